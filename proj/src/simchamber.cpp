#include "openchamber/simchamber.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <utility>

namespace openchamber {

std::string_view name_of(Pump p) {
  switch (p) {
    case Pump::ph_up: return "ph_up";
    case Pump::ph_down: return "ph_down";
    case Pump::nutrient_a: return "nutrient_a";
    case Pump::nutrient_b: return "nutrient_b";
    case Pump::fresh_water: return "fresh_water";
  }
  return "unknown";
}

namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw ChamberError(ChamberErrorCode::InvalidParams, what);
}

bool is_fraction(double f) { return f >= 0.0 && f <= 1.0; }

}  // namespace

void validate(const ActuatorBank& a) {
  require(is_fraction(a.heater) && is_fraction(a.chiller) && is_fraction(a.humidifier) &&
              is_fraction(a.light_red) && is_fraction(a.light_blue) && is_fraction(a.light_white) &&
              is_fraction(a.circulation_fan),
          "actuator fractions must lie in [0, 1]");
  for (double f : a.dosing_flow) require(f >= 0.0, "dosing flow must be >= 0");
}

void validate(const ChamberParams& p) {
  require(p.thermal_mass > 0.0, "thermal_mass must be > 0");
  require(p.integration_step >= 1, "integration_step must be >= 1");
  require(p.reservoir_liters > 0.0 && p.reference_volume_liters > 0.0, "volumes must be > 0");
  require((p.coupling.array() >= 0.0).all(), "coupling coefficients must be >= 0");
  for (double rate : {p.heater_watts, p.chiller_watts, p.vent_exchange, p.humidifier_rate, p.co2_drawdown,
                      p.ph_shift_per_ml, p.ec_rise_per_ml, p.level_mm_per_ml, p.evaporation_mm_per_s,
                      p.lux_at_full[0], p.lux_at_full[1], p.lux_at_full[2]})
    require(rate >= 0.0, "rates must be >= 0");
}

SensorModel make_sensor_model(const PerVariable<double>& quantization, Seconds co2_warm_up) {
  SensorModel model;
  for (Variable v : kAllVariables) {
    auto& c = model[v];
    c.quantization = quantization[index_of(v)];
    c.min = descriptor(v).min;
    c.max = descriptor(v).max;
  }
  model[Variable::air_carbon_dioxide].warm_up = co2_warm_up;
  return model;
}

void validate(const SensorModel& model) {
  for (const auto& c : model.channels) {
    require(c.quantization >= 0.0, "quantization step must be >= 0");
    require(c.sigma >= 0.0, "sigma must be >= 0");
    require(c.warm_up >= 0, "warm_up must be >= 0");
    require(c.min < c.max, "sensor range must satisfy min < max");
  }
}

namespace {

// Steps like 0.1 divide by their integral reciprocal so readings come out
// as the nearest double to the decimal (23.2, not 23.200000000000003).
double quantize(double x, double q) {
  double inverse = 1.0 / q;
  double k = std::round(inverse);
  if (q < 1.0 && std::abs(inverse - k) < 1e-9 * k) return std::round(x * k) / k;
  return std::round(x / q) * q;
}

}  // namespace

SensorReadings read_sensors(const EnvironmentState& state, const SensorModel& model, std::uint64_t seed,
                            Seconds elapsed_since_power_on) {
  std::mt19937_64 engine(seed);
  std::normal_distribution<double> standard_normal(0.0, 1.0);
  SensorReadings readings{};
  for (Variable v : kAllVariables) {
    const auto& c = model[v];
    // Draw for every channel so one channel's settings never shift another's noise.
    double noise = standard_normal(engine) * c.sigma;
    if (elapsed_since_power_on < c.warm_up) continue;
    double x = state[v] + noise;
    if (c.quantization > 0.0) x = quantize(x, c.quantization);
    readings[index_of(v)] = std::clamp(x, c.min, c.max);
  }
  return readings;
}

namespace {

constexpr Seconds kCo2WarmUp = 150;

Scenario default_desktop() {
  Scenario s;
  auto& p = s.params;
  auto& amb = p.ambient;
  amb[Variable::air_temperature] = 22.0;
  amb[Variable::air_humidity] = 45.0;
  amb[Variable::air_carbon_dioxide] = 400.0;
  amb[Variable::water_temperature] = 20.0;
  amb[Variable::water_potential_hydrogen] = 6.0;
  amb[Variable::water_electrical_conductivity] = 1500.0;
  amb[Variable::light_illuminance] = 0.0;
  amb[Variable::water_level] = 500.0;

  p.thermal_mass = 40000.0;
  p.coupling(index_of(Variable::air_temperature)) = 2.0e-4;
  p.coupling(index_of(Variable::air_humidity)) = 1.0e-3;
  p.coupling(index_of(Variable::air_carbon_dioxide)) = 5.0e-4;
  p.coupling(index_of(Variable::water_temperature)) = 1.0e-4;
  p.vent_exchange = 5.0e-4;
  p.humidifier_rate = 0.05;
  p.co2_drawdown = 0.05;
  p.ph_shift_per_ml = 0.01;
  p.ec_rise_per_ml = 10.0;
  p.reference_volume_liters = 10.0;
  p.reservoir_liters = 20.0;
  p.level_mm_per_ml = 0.025;
  p.evaporation_mm_per_s = 1.0e-4;
  p.lux_at_full = {10000.0, 10000.0, 40000.0};
  p.integration_step = 1;

  s.initial = amb;

  PerVariable<double> quantization{0.1, 0.1, 1.0, 0.1, 0.01, 1.0, 0.1, 1.0};
  s.sensors = make_sensor_model(quantization, kCo2WarmUp);
  PerVariable<double> sigma{0.05, 0.1, 2.0, 0.05, 0.005, 2.0, 0.5, 0.25};
  for (Variable v : kAllVariables) s.sensors[v].sigma = sigma[index_of(v)];
  return s;
}

Scenario noisy_sensors() {
  Scenario s = default_desktop();
  // Accuracy figures are read as 2σ bounds.
  PerVariable<double> sigma{0.1, 0.05, 25.0, 0.25, 0.05, 20.0, 5.0, 0.5};
  for (Variable v : kAllVariables) s.sensors[v].sigma = sigma[index_of(v)];
  return s;
}

Scenario hot_ambient() {
  Scenario s = default_desktop();
  s.params.ambient[Variable::air_temperature] = 32.0;
  s.params.ambient[Variable::air_humidity] = 60.0;
  s.params.ambient[Variable::water_temperature] = 27.0;
  s.initial = s.params.ambient;
  return s;
}

}  // namespace

Scenario scenario_preset(std::string_view name) {
  if (name == "default_desktop") return default_desktop();
  if (name == "noisy_sensors") return noisy_sensors();
  if (name == "hot_ambient") return hot_ambient();
  throw ChamberError(ChamberErrorCode::UnknownPreset, "unknown preset \"" + std::string(name) + "\"");
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  // splitmix64 finalizer
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

SimulatedChamber::SimulatedChamber(Scenario scenario, std::uint64_t seed)
    : scenario_(std::move(scenario)), seed_(seed) {
  validate(scenario_.params);
  validate(scenario_.sensors);
  state_ = scenario_.initial;
  power_on_ = state_.sim_time;
}

SensorReadings SimulatedChamber::sense() const {
  return read_sensors(state_, scenario_.sensors, mix_seed(seed_, static_cast<std::uint64_t>(state_.sim_time)),
                      powered_for());
}

void SimulatedChamber::advance(const ActuatorBank& actuators, Seconds dt) {
  validate(actuators);
  state_ = step(state_, actuators, scenario_.params, dt);
}

}  // namespace openchamber
