#include "openchamber/config.hpp"

#include <boost/program_options/options_description.hpp>
#include <boost/program_options/parsers.hpp>

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <utility>
#include <vector>

namespace openchamber {

namespace po = boost::program_options;

namespace {

double to_double(const std::string& key, const std::string& text) {
  double v = 0;
  auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc{} || end != text.data() + text.size())
    throw ConfigError(key + ": expected a number, got \"" + text + "\"");
  return v;
}

std::int64_t to_int(const std::string& key, const std::string& text) {
  std::int64_t v = 0;
  auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc{} || end != text.data() + text.size())
    throw ConfigError(key + ": expected an integer, got \"" + text + "\"");
  return v;
}

std::vector<std::string> split(const std::string& key) {
  std::vector<std::string> parts;
  std::size_t start = 0;
  for (;;) {
    auto dot = key.find('.', start);
    parts.push_back(key.substr(start, dot - start));
    if (dot == std::string::npos) return parts;
    start = dot + 1;
  }
}

Variable variable_named(const std::string& key, const std::string& name) {
  auto v = variable_from_name(name);
  if (!v) throw ConfigError(key + ": unknown variable \"" + name + "\"");
  return *v;
}

Pump pump_named(const std::string& key, const std::string& name) {
  for (std::size_t i = 0; i < kPumpCount; ++i)
    if (name_of(static_cast<Pump>(i)) == name) return static_cast<Pump>(i);
  throw ConfigError(key + ": unknown pump \"" + name + "\"");
}

void apply_chamber(ChamberParams& p, Scenario& s, const std::string& key, const std::vector<std::string>& k,
                   const std::string& value) {
  if (k.size() == 3) {
    Variable v = variable_named(key, k[2]);
    double x = to_double(key, value);
    if (k[1] == "coupling") p.coupling(index_of(v)) = x;
    else if (k[1] == "ambient") p.ambient[v] = x;
    else if (k[1] == "initial") s.initial[v] = x;
    else throw ConfigError("unknown key " + key);
    return;
  }
  if (k.size() != 2) throw ConfigError("unknown key " + key);
  const std::string& f = k[1];
  if (f == "integration_step") {
    p.integration_step = to_int(key, value);
    return;
  }
  double x = to_double(key, value);
  if (f == "thermal_mass") p.thermal_mass = x;
  else if (f == "heater_watts") p.heater_watts = x;
  else if (f == "chiller_watts") p.chiller_watts = x;
  else if (f == "vent_exchange") p.vent_exchange = x;
  else if (f == "humidifier_rate") p.humidifier_rate = x;
  else if (f == "co2_drawdown") p.co2_drawdown = x;
  else if (f == "ph_shift_per_ml") p.ph_shift_per_ml = x;
  else if (f == "ec_rise_per_ml") p.ec_rise_per_ml = x;
  else if (f == "reference_volume_liters") p.reference_volume_liters = x;
  else if (f == "reservoir_liters") p.reservoir_liters = x;
  else if (f == "level_mm_per_ml") p.level_mm_per_ml = x;
  else if (f == "evaporation_mm_per_s") p.evaporation_mm_per_s = x;
  else if (f == "lux_red") p.lux_at_full[0] = x;
  else if (f == "lux_blue") p.lux_at_full[1] = x;
  else if (f == "lux_white") p.lux_at_full[2] = x;
  else throw ConfigError("unknown key " + key);
}

void apply_sensor(SensorModel& m, const std::string& key, const std::vector<std::string>& k,
                  const std::string& value) {
  if (k.size() != 3) throw ConfigError("unknown key " + key);
  auto& c = m[variable_named(key, k[1])];
  if (k[2] == "quantization") c.quantization = to_double(key, value);
  else if (k[2] == "sigma") c.sigma = to_double(key, value);
  else if (k[2] == "warm_up") c.warm_up = to_int(key, value);
  else throw ConfigError("unknown key " + key);
}

void apply_controller(ControllerConfig& c, const std::string& key, const std::vector<std::string>& k,
                      const std::string& value) {
  if (k.size() == 2 && k[1] == "period") {
    c.period = to_int(key, value);
  } else if (k.size() == 2 && k[1] == "post_recipe") {
    auto p = post_recipe_policy_from_name(value);
    if (!p) throw ConfigError(key + ": expected hold_last or all_off");
    c.post_recipe = *p;
  } else if (k.size() == 3 && k[1] == "calibration") {
    c.dosing_calibration[index_of(pump_named(key, k[2]))] = to_double(key, value);
  } else if (k.size() == 3) {
    auto& vc = c[variable_named(key, k[1])];
    const std::string& f = k[2];
    if (f == "kind") {
      auto kind = controller_kind_from_name(value);
      if (!kind) throw ConfigError(key + ": expected none, pid, bangbang or open_loop");
      vc.kind = *kind;
    } else if (f == "kp") vc.pid.kp = to_double(key, value);
    else if (f == "ki") vc.pid.ki = to_double(key, value);
    else if (f == "kd") vc.pid.kd = to_double(key, value);
    else if (f == "output_min") vc.pid.output_min = to_double(key, value);
    else if (f == "output_max") vc.pid.output_max = to_double(key, value);
    else if (f == "windup_limit") vc.pid.windup_limit = to_double(key, value);
    else if (f == "hysteresis") vc.hysteresis = to_double(key, value);
    else if (f == "dose_ml") vc.dose_ml = to_double(key, value);
    else throw ConfigError("unknown key " + key);
  } else {
    throw ConfigError("unknown key " + key);
  }
}

void apply_key(AppConfig& cfg, const std::string& key, const std::string& value) {
  auto k = split(key);
  const std::string& head = k[0];
  if (head == "chamber") return apply_chamber(cfg.scenario.params, cfg.scenario, key, k, value);
  if (head == "sensor") return apply_sensor(cfg.scenario.sensors, key, k, value);
  if (head == "controller") return apply_controller(cfg.controller, key, k, value);
  if (key == "seed") cfg.seed = static_cast<std::uint64_t>(to_int(key, value));
  else if (key == "store.path") cfg.store_path = value;
  else if (key == "api.token") cfg.api_token = value;
  else if (key == "api.cors_origin") cfg.cors_origin = value;
  else if (key == "api.ui_dir") cfg.ui_dir = value;
  else if (key == "sync.peer_id") cfg.peer_id = value;
  else if (key == "sync.server") cfg.server_url = value;
  else if (key == "sync.token") cfg.sync_token = value;
  else if (key == "sync.interval") {
    cfg.sync_interval = to_int(key, value);
    if (cfg.sync_interval < 0) throw ConfigError(key + " must be >= 0");
  }
  else if (key == "sync.pull_filter") {
    auto f = KindFilter::parse(value);
    if (!f) throw ConfigError(key + ": unknown document kind in \"" + value + "\"");
    cfg.pull_filter = *f;
  } else {
    throw ConfigError("unknown key " + key);
  }
}

}  // namespace

AppConfig parse_config(std::istream& in, const std::string& preset_override) {
  std::vector<std::pair<std::string, std::string>> entries;
  try {
    po::options_description none;
    auto parsed = po::parse_config_file(in, none, /*allow_unregistered=*/true);
    for (const auto& opt : parsed.options)
      entries.emplace_back(opt.string_key, opt.value.empty() ? std::string{} : opt.value.front());
  } catch (const po::error& e) {
    throw ConfigError(e.what());
  }

  AppConfig cfg;
  std::string preset = cfg.preset;
  for (const auto& [key, value] : entries)
    if (key == "preset") preset = value;
  if (!preset_override.empty()) preset = preset_override;
  try {
    cfg.scenario = scenario_preset(preset);
  } catch (const ChamberError& e) {
    throw ConfigError(e.what());
  }
  cfg.preset = preset;
  for (const auto& [key, value] : entries)
    if (key != "preset") apply_key(cfg, key, value);

  try {
    validate(cfg.scenario.params);
    validate(cfg.scenario.sensors);
    validate(cfg.controller);
  } catch (const std::runtime_error& e) {
    throw ConfigError(e.what());
  }
  return cfg;
}

AppConfig load_config(const std::filesystem::path& path, const std::string& preset_override) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  return parse_config(in, preset_override);
}

std::filesystem::path resolve_config_path(const std::string& flag_value) {
  if (!flag_value.empty()) return flag_value;
  if (const char* env = std::getenv("OPENCHAMBER_CONFIG")) return env;
  return {};
}

Json to_json(const ControllerConfig& c) {
  Json vars = Json::object();
  for (Variable v : kAllVariables) {
    const auto& vc = c[v];
    vars[std::string(name_of(v))] = Json{{"kind", name_of(vc.kind)},
                                         {"kp", vc.pid.kp},
                                         {"ki", vc.pid.ki},
                                         {"kd", vc.pid.kd},
                                         {"output_min", vc.pid.output_min},
                                         {"output_max", vc.pid.output_max},
                                         {"windup_limit", vc.pid.windup_limit},
                                         {"hysteresis", vc.hysteresis},
                                         {"dose_ml", vc.dose_ml}};
  }
  Json calibration = Json::object();
  for (std::size_t i = 0; i < kPumpCount; ++i)
    calibration[std::string(name_of(static_cast<Pump>(i)))] = c.dosing_calibration[i];
  return Json{{"period", c.period},
              {"post_recipe", name_of(c.post_recipe)},
              {"calibration", std::move(calibration)},
              {"variables", std::move(vars)}};
}

ControllerConfig merge_controller_config(const ControllerConfig& base, const Json& patch) {
  if (!patch.is_object()) throw ConfigError("config patch must be a JSON object");
  ControllerConfig c = base;
  auto number = [](const Json& j, const std::string& where) {
    if (!j.is_number()) throw ConfigError(where + " must be a number");
    return j.get<double>();
  };
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    const std::string& key = it.key();
    const Json& value = it.value();
    if (key == "period") {
      if (!value.is_number_integer()) throw ConfigError("period must be an integer");
      c.period = value.get<Seconds>();
    } else if (key == "post_recipe") {
      auto p = value.is_string() ? post_recipe_policy_from_name(value.get<std::string>()) : std::nullopt;
      if (!p) throw ConfigError("post_recipe must be hold_last or all_off");
      c.post_recipe = *p;
    } else if (key == "calibration") {
      if (!value.is_object()) throw ConfigError("calibration must be an object");
      for (auto p = value.begin(); p != value.end(); ++p)
        c.dosing_calibration[index_of(pump_named("calibration", p.key()))] =
            number(p.value(), "calibration." + p.key());
    } else if (key == "variables") {
      if (!value.is_object()) throw ConfigError("variables must be an object");
      for (auto v = value.begin(); v != value.end(); ++v) {
        auto& vc = c[variable_named("variables", v.key())];
        if (!v.value().is_object()) throw ConfigError("variables." + v.key() + " must be an object");
        for (auto f = v.value().begin(); f != v.value().end(); ++f) {
          const std::string where = "variables." + v.key() + "." + f.key();
          if (f.key() == "kind") {
            auto kind = f.value().is_string() ? controller_kind_from_name(f.value().get<std::string>()) : std::nullopt;
            if (!kind) throw ConfigError(where + " must be none, pid, bangbang or open_loop");
            vc.kind = *kind;
          } else if (f.key() == "kp") vc.pid.kp = number(f.value(), where);
          else if (f.key() == "ki") vc.pid.ki = number(f.value(), where);
          else if (f.key() == "kd") vc.pid.kd = number(f.value(), where);
          else if (f.key() == "output_min") vc.pid.output_min = number(f.value(), where);
          else if (f.key() == "output_max") vc.pid.output_max = number(f.value(), where);
          else if (f.key() == "windup_limit") vc.pid.windup_limit = number(f.value(), where);
          else if (f.key() == "hysteresis") vc.hysteresis = number(f.value(), where);
          else if (f.key() == "dose_ml") vc.dose_ml = number(f.value(), where);
          else throw ConfigError("unknown field " + where);
        }
      }
    } else {
      throw ConfigError("unknown field " + key);
    }
  }
  try {
    validate(c);
  } catch (const ControlError& e) {
    throw ConfigError(e.what());
  }
  return c;
}

}  // namespace openchamber
