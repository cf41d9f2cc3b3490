#include "openchamber/control.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>

namespace openchamber {

PidResult pid_update(PidState pid, double error, double dt) {
  pid.integral = std::clamp(pid.integral + error * dt, -pid.windup_limit, pid.windup_limit);
  double derivative = pid.previous_error ? (error - *pid.previous_error) / dt : 0.0;
  double raw = pid.kp * error + pid.ki * pid.integral + pid.kd * derivative;
  pid.previous_error = error;
  return {std::clamp(raw, pid.output_min, pid.output_max), pid};
}

namespace {

struct EffectInfo {
  std::string_view name;
  EffectDomain domain;
  std::optional<Pump> pump;
};

constexpr std::array<EffectInfo, kEffectCount> kEffects{{
    {"heat", EffectDomain::fraction, std::nullopt},
    {"cool", EffectDomain::fraction, std::nullopt},
    {"humidify", EffectDomain::fraction, std::nullopt},
    {"vent", EffectDomain::boolean, std::nullopt},
    {"illuminate_red", EffectDomain::fraction, std::nullopt},
    {"illuminate_blue", EffectDomain::fraction, std::nullopt},
    {"illuminate_white", EffectDomain::fraction, std::nullopt},
    {"circulate", EffectDomain::boolean, std::nullopt},
    {"dose_ph_up", EffectDomain::millilitres, Pump::ph_up},
    {"dose_ph_down", EffectDomain::millilitres, Pump::ph_down},
    {"dose_nutrient_a", EffectDomain::millilitres, Pump::nutrient_a},
    {"dose_nutrient_b", EffectDomain::millilitres, Pump::nutrient_b},
    {"add_fresh_water", EffectDomain::millilitres, Pump::fresh_water},
    {"aerate", EffectDomain::boolean, std::nullopt},
}};

const EffectInfo& info(Effect e) { return kEffects[static_cast<std::size_t>(e)]; }

}  // namespace

std::string_view name_of(Effect e) { return info(e).name; }

std::optional<Effect> effect_from_name(std::string_view name) {
  for (std::size_t i = 0; i < kEffects.size(); ++i)
    if (kEffects[i].name == name) return static_cast<Effect>(i);
  return std::nullopt;
}

EffectDomain domain_of(Effect e) { return info(e).domain; }
std::optional<Pump> pump_for(Effect e) { return info(e).pump; }

bool magnitude_valid(Effect e, double m) {
  if (!std::isfinite(m)) return false;
  switch (domain_of(e)) {
    case EffectDomain::fraction: return m >= 0.0 && m <= 1.0;
    case EffectDomain::millilitres: return m >= 0.0;
    case EffectDomain::boolean: return m == 0.0 || m == 1.0;
  }
  return false;
}

std::string_view name_of(ControllerKind k) {
  switch (k) {
    case ControllerKind::none: return "none";
    case ControllerKind::pid: return "pid";
    case ControllerKind::bangbang: return "bangbang";
    case ControllerKind::open_loop: return "open_loop";
  }
  return "none";
}

std::optional<ControllerKind> controller_kind_from_name(std::string_view name) {
  for (auto k : {ControllerKind::none, ControllerKind::pid, ControllerKind::bangbang, ControllerKind::open_loop})
    if (name_of(k) == name) return k;
  return std::nullopt;
}

std::string_view name_of(PostRecipePolicy p) { return p == PostRecipePolicy::hold_last ? "hold_last" : "all_off"; }

std::optional<PostRecipePolicy> post_recipe_policy_from_name(std::string_view name) {
  if (name == "hold_last") return PostRecipePolicy::hold_last;
  if (name == "all_off") return PostRecipePolicy::all_off;
  return std::nullopt;
}

std::string_view name_of(RunPhase p) {
  switch (p) {
    case RunPhase::running: return "running";
    case RunPhase::ended: return "ended";
    case RunPhase::aborted: return "aborted";
  }
  return "running";
}

ControllerConfig ControllerConfig::defaults() {
  ControllerConfig c;
  auto& temp = c[Variable::air_temperature];
  temp.kind = ControllerKind::pid;
  temp.pid.kp = 0.4;
  temp.pid.ki = 0.01;
  temp.pid.kd = 0.05;
  temp.pid.windup_limit = 100.0;

  auto& humidity = c[Variable::air_humidity];
  humidity.kind = ControllerKind::bangbang;
  humidity.hysteresis = 4.0;

  auto& co2 = c[Variable::air_carbon_dioxide];
  co2.kind = ControllerKind::bangbang;
  co2.hysteresis = 200.0;

  auto& ph = c[Variable::water_potential_hydrogen];
  ph.kind = ControllerKind::bangbang;
  ph.hysteresis = 0.4;
  ph.dose_ml = 1.0;

  auto& ec = c[Variable::water_electrical_conductivity];
  ec.kind = ControllerKind::bangbang;
  ec.hysteresis = 200.0;
  ec.dose_ml = 2.0;

  auto& level = c[Variable::water_level];
  level.kind = ControllerKind::bangbang;
  level.hysteresis = 10.0;
  level.dose_ml = 50.0;

  c[Variable::light_illuminance].kind = ControllerKind::open_loop;
  return c;
}

void validate(const ControllerConfig& config) {
  auto fail = [](const std::string& what) { throw ControlError(ControlErrorCode::InvalidConfig, what); };
  if (config.period < 1) fail("control period must be >= 1");
  for (Variable v : kAllVariables) {
    const auto& vc = config[v];
    std::string name(name_of(v));
    if (vc.kind == ControllerKind::pid) {
      if (!(vc.pid.output_min < vc.pid.output_max)) fail(name + ": output_min must be < output_max");
      if (!(vc.pid.windup_limit > 0.0)) fail(name + ": windup_limit must be > 0");
    }
    if (vc.kind == ControllerKind::bangbang && !(vc.hysteresis > 0.0)) fail(name + ": hysteresis must be > 0");
    if (vc.kind == ControllerKind::open_loop && v != Variable::light_illuminance)
      fail(name + ": open_loop is only available for light_illuminance");
    if (!(vc.dose_ml >= 0.0)) fail(name + ": dose_ml must be >= 0");
  }
  for (double flow : config.dosing_calibration)
    if (!(flow > 0.0)) fail("dosing calibration must be > 0 ml/s");
}

RunState RunState::start(std::string recipe_id, const ControllerConfig& config, std::int64_t start_wall_time) {
  RunState run;
  run.recipe_id = std::move(recipe_id);
  run.start_wall_time = start_wall_time;
  for (Variable v : kAllVariables) {
    run.pid[index_of(v)] = config[v].pid;
    run.pid[index_of(v)].integral = 0.0;
    run.pid[index_of(v)].previous_error.reset();
  }
  return run;
}

namespace {

double bangbang(double error, double width) {
  if (error > width / 2.0) return 1.0;
  if (error < -width / 2.0) return -1.0;
  return 0.0;
}

// A signed output at or below this drives a boolean "vent" effect.
constexpr double kVentThreshold = -0.5;

void emit(std::vector<EffectCommand>& out, Effect e, double magnitude, std::optional<Variable> cause) {
  if (magnitude > 0.0) out.push_back({e, magnitude, cause});
}

void map_output(std::vector<EffectCommand>& out, Variable v, double output, const VariableControl& vc) {
  auto fraction = [](double x) { return std::clamp(x, 0.0, 1.0); };
  switch (v) {
    case Variable::air_temperature:
      if (output > 0.0) emit(out, Effect::heat, fraction(output), v);
      else emit(out, Effect::cool, fraction(-output), v);
      break;
    case Variable::air_humidity:
      if (output > 0.0) emit(out, Effect::humidify, fraction(output), v);
      else if (output <= kVentThreshold) emit(out, Effect::vent, 1.0, v);
      break;
    case Variable::air_carbon_dioxide:
      if (output <= kVentThreshold) emit(out, Effect::vent, 1.0, v);
      break;
    case Variable::water_potential_hydrogen:
      if (output > 0.0) emit(out, Effect::dose_ph_up, output * vc.dose_ml, v);
      else emit(out, Effect::dose_ph_down, -output * vc.dose_ml, v);
      break;
    case Variable::water_electrical_conductivity:
      if (output > 0.0) {
        emit(out, Effect::dose_nutrient_a, output * vc.dose_ml, v);
        emit(out, Effect::dose_nutrient_b, output * vc.dose_ml, v);
      }
      break;
    case Variable::water_level:
      if (output > 0.0) emit(out, Effect::add_fresh_water, output * vc.dose_ml, v);
      break;
    case Variable::water_temperature:  // no actuator in the chamber
    case Variable::light_illuminance:  // handled open-loop
      break;
  }
}

}  // namespace

PlanResult plan(const SensorReadings& sensed, const ActiveSetpoints& desired, const ControllerConfig& config,
                RunState run, double dt) {
  std::vector<EffectCommand> commands;
  for (Variable v : kAllVariables) {
    const auto& target = desired[v];
    const auto& reading = sensed[index_of(v)];
    const auto& vc = config[v];
    if (!target || !reading || vc.kind == ControllerKind::none) continue;

    if (v == Variable::light_illuminance) {
      emit(commands, Effect::illuminate_white, std::clamp(*target / descriptor(v).max, 0.0, 1.0), v);
      continue;
    }

    double error = *target - *reading;
    double output = 0.0;
    if (vc.kind == ControllerKind::pid) {
      auto result = pid_update(run.pid[index_of(v)], error, dt);
      run.pid[index_of(v)] = result.state;
      output = result.output;
    } else if (vc.kind == ControllerKind::bangbang) {
      output = bangbang(error, vc.hysteresis);
    }
    map_output(commands, v, output, vc);
  }
  bool housekeeping = run.phase == RunPhase::running ||
                      (run.phase == RunPhase::ended && config.post_recipe == PostRecipePolicy::hold_last);
  if (housekeeping) {
    commands.push_back({Effect::circulate, 1.0, std::nullopt});
    commands.push_back({Effect::aerate, 1.0, std::nullopt});
  }
  return {std::move(commands), std::move(run)};
}

ActuatorBank Actuation::averaged(Seconds period) const {
  ActuatorBank out = bank;
  for (std::size_t p = 0; p < kPumpCount; ++p) out.dosing_flow[p] = delivered_ml[p] / static_cast<double>(period);
  return out;
}

Actuation translate(const std::vector<EffectCommand>& commands, const PerPump<double>& calibration, Seconds period,
                    const PerPump<double>& carry_in) {
  for (double flow : calibration)
    if (!(flow > 0.0)) throw ControlError(ControlErrorCode::BadCalibration, "pump calibration must be > 0 ml/s");
  if (period < 1) throw ControlError(ControlErrorCode::InvalidConfig, "control period must be >= 1");

  Actuation out;
  PerPump<double> pending = carry_in;
  double heat = 0.0;
  double cool = 0.0;
  auto& bank = out.bank;
  for (const auto& cmd : commands) {
    if (!magnitude_valid(cmd.effect, cmd.magnitude))
      throw ControlError(ControlErrorCode::InvalidCommand,
                         std::string(name_of(cmd.effect)) + " magnitude outside its domain");
    double m = cmd.magnitude;
    switch (cmd.effect) {
      case Effect::heat: heat = std::max(heat, m); break;
      case Effect::cool: cool = std::max(cool, m); break;
      case Effect::humidify: bank.humidifier = std::max(bank.humidifier, m); break;
      case Effect::vent: bank.vent_open = bank.vent_open || m == 1.0; break;
      case Effect::illuminate_red: bank.light_red = std::max(bank.light_red, m); break;
      case Effect::illuminate_blue: bank.light_blue = std::max(bank.light_blue, m); break;
      case Effect::illuminate_white: bank.light_white = std::max(bank.light_white, m); break;
      case Effect::circulate: if (m == 1.0) bank.circulation_fan = 1.0; break;
      case Effect::aerate:
        if (m == 1.0) bank.aerator = bank.water_pump = true;
        break;
      case Effect::dose_ph_up:
      case Effect::dose_ph_down:
      case Effect::dose_nutrient_a:
      case Effect::dose_nutrient_b:
      case Effect::add_fresh_water: pending[index_of(*pump_for(cmd.effect))] += m; break;
    }
  }
  // Heater and chiller never run together: the net demand wins.
  bank.heater = std::max(0.0, heat - cool);
  bank.chiller = std::max(0.0, cool - heat);

  const double window = static_cast<double>(period);
  for (std::size_t p = 0; p < kPumpCount; ++p) {
    double flow = calibration[p];
    double needed = pending[p] / flow;
    if (needed <= window) {
      out.on_seconds[p] = needed;
      out.delivered_ml[p] = pending[p];
      out.carry_ml[p] = 0.0;
    } else {
      out.on_seconds[p] = window;
      out.delivered_ml[p] = flow * window;
      out.carry_ml[p] = pending[p] - out.delivered_ml[p];
    }
    bank.dosing_flow[p] = out.on_seconds[p] > 0.0 ? flow : 0.0;
  }
  return out;
}

void append_tick_points(std::vector<DataPoint>& out, const std::string& run_id, Seconds t,
                        const SensorReadings& sensed, const ActiveSetpoints& desired) {
  constexpr double kNone = std::numeric_limits<double>::quiet_NaN();
  for (Variable v : kAllVariables) {
    const auto& reading = sensed[index_of(v)];
    out.push_back({t, v, reading ? *reading : kNone, Stream::measured, run_id});
  }
  for (Variable v : kAllVariables) {
    const auto& target = desired[v];
    out.push_back({t, v, target ? *target : kNone, Stream::desired, run_id});
  }
}

RunLog run_recipe(const Recipe& recipe, SimulatedChamber& chamber, const ControllerConfig& config,
                  Seconds duration_limit, std::string run_id, std::stop_token stop) {
  validate(config);
  if (duration_limit < config.period)
    throw ControlError(ControlErrorCode::InvalidConfig, "duration_limit must be >= the control period");
  const RecipeTimeline timeline(recipe);
  const Seconds period = config.period;

  RunLog log;
  log.run_id = run_id.empty() ? recipe.id : std::move(run_id);
  RunState run = RunState::start(recipe.id, config);
  PerPump<double> carry{};
  log.points.reserve(static_cast<std::size_t>(duration_limit / period + 1) * kVariableCount * 2);

  for (Seconds t = 0; t <= duration_limit; t += period) {
    if (stop.stop_requested()) {
      run.phase = RunPhase::aborted;
      log.final_bank = ActuatorBank::all_off();
      break;
    }
    run.elapsed = t;
    SensorReadings sensed = chamber.sense();
    ActiveSetpoints desired = timeline.setpoints_at(t);
    auto planned = plan(sensed, desired, config, std::move(run), static_cast<double>(period));
    run = std::move(planned.run);
    Actuation act = translate(planned.commands, config.dosing_calibration, period, carry);
    carry = act.carry_ml;

    append_tick_points(log.points, log.run_id, t, sensed, desired);
    for (const auto& cmd : planned.commands) log.actuations.push_back({t, cmd, false});
    ++log.ticks;

    if (desired.ended) {
      run.phase = RunPhase::ended;
      log.final_bank = config.post_recipe == PostRecipePolicy::all_off ? ActuatorBank::all_off() : act.bank;
      break;
    }
    log.final_bank = act.bank;
    if (t + period > duration_limit) break;
    chamber.advance(act.averaged(period), period);
  }
  log.final_state = std::move(run);
  return log;
}

}  // namespace openchamber
