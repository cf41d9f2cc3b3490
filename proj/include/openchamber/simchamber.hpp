#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

#include <Eigen/Dense>

#include "openchamber/recipe.hpp"
#include "openchamber/variables.hpp"

namespace openchamber {

template <typename Scalar>
using StateVector = Eigen::Matrix<Scalar, static_cast<int>(kVariableCount), 1>;

template <typename Scalar>
StateVector<Scalar> lower_bounds() {
  StateVector<Scalar> v;
  for (Variable var : kAllVariables) v(index_of(var)) = Scalar(descriptor(var).min);
  return v;
}

template <typename Scalar>
StateVector<Scalar> upper_bounds() {
  StateVector<Scalar> v;
  for (Variable var : kAllVariables) v(index_of(var)) = Scalar(descriptor(var).max);
  return v;
}

/// Ground-truth chamber variables at one simulation instant.
template <typename Scalar>
struct BasicEnvironmentState {
  StateVector<Scalar> values = StateVector<Scalar>::Zero();
  Seconds sim_time = 0;

  Scalar& operator[](Variable v) { return values(index_of(v)); }
  const Scalar& operator[](Variable v) const { return values(index_of(v)); }

  friend bool operator==(const BasicEnvironmentState& a, const BasicEnvironmentState& b) {
    return a.sim_time == b.sim_time && a.values == b.values;
  }
};

using EnvironmentState = BasicEnvironmentState<double>;

enum class Pump : std::uint8_t { ph_up, ph_down, nutrient_a, nutrient_b, fresh_water };
inline constexpr std::size_t kPumpCount = 5;
template <typename T>
using PerPump = std::array<T, kPumpCount>;

constexpr std::size_t index_of(Pump p) { return static_cast<std::size_t>(p); }
std::string_view name_of(Pump p);

/// Physical actuator settings held constant over one step.
struct ActuatorBank {
  double heater = 0.0;      // fraction of 150 W
  double chiller = 0.0;     // fraction of 200 W
  double humidifier = 0.0;  // fraction of full output
  bool vent_open = false;
  double light_red = 0.0;
  double light_blue = 0.0;
  double light_white = 0.0;
  double circulation_fan = 0.0;
  bool water_pump = false;
  bool aerator = false;
  PerPump<double> dosing_flow{};  // ml/s while running

  static ActuatorBank all_off() { return {}; }
  double light_fraction() const { return (light_red + light_blue + light_white) / 3.0; }

  friend bool operator==(const ActuatorBank&, const ActuatorBank&) = default;
};

/// Throws ChamberError(InvalidParams) when a fraction leaves [0,1] or a flow is negative.
void validate(const ActuatorBank& bank);

template <typename Scalar>
struct BasicChamberParams {
  Scalar thermal_mass = 40000;  // J/°C
  Scalar heater_watts = 150;
  Scalar chiller_watts = 200;
  StateVector<Scalar> coupling = StateVector<Scalar>::Zero();  // 1/s toward ambient
  BasicEnvironmentState<Scalar> ambient;
  Scalar vent_exchange = 0;      // 1/s, air variables only, while the vent is open
  Scalar humidifier_rate = 0;    // %RH/s at full output
  Scalar co2_drawdown = 0;       // ppm/s at full light
  Scalar ph_shift_per_ml = 0;    // pH per ml at the reference volume
  Scalar ec_rise_per_ml = 0;     // µS/cm per ml at the reference volume
  Scalar reference_volume_liters = 10;
  Scalar reservoir_liters = 20;
  Scalar level_mm_per_ml = 0;
  Scalar evaporation_mm_per_s = 0;  // at full circulation
  std::array<Scalar, 3> lux_at_full{0, 0, 0};  // red, blue, white
  Seconds integration_step = 1;
};

using ChamberParams = BasicChamberParams<double>;

/// Throws ChamberError(InvalidParams) on a non-positive thermal mass,
/// a negative rate, or an integration step below 1.
void validate(const ChamberParams& params);

enum class ChamberErrorCode { StepMismatch, UnknownPreset, InvalidParams };

class ChamberError : public std::runtime_error {
 public:
  ChamberError(ChamberErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}
  ChamberErrorCode code() const noexcept { return code_; }

 private:
  ChamberErrorCode code_;
};

template <typename Scalar>
Scalar illuminance(const ActuatorBank& a, const BasicChamberParams<Scalar>& p) {
  Scalar lux = Scalar(a.light_red) * p.lux_at_full[0] + Scalar(a.light_blue) * p.lux_at_full[1] +
               Scalar(a.light_white) * p.lux_at_full[2];
  const auto& d = descriptor(Variable::light_illuminance);
  return std::min(std::max(lux, Scalar(d.min)), Scalar(d.max));
}

/// Forward-Euler integration of the first-order chamber model over dt
/// seconds in steps of params.integration_step. Every substep clamps to
/// the variable ranges; light is set from the channel fractions.
template <typename Scalar>
BasicEnvironmentState<Scalar> step(const BasicEnvironmentState<Scalar>& state, const ActuatorBank& a,
                                   const BasicChamberParams<Scalar>& p, Seconds dt) {
  if (dt < 1 || p.integration_step < 1 || dt % p.integration_step != 0)
    throw ChamberError(ChamberErrorCode::StepMismatch,
                       "dt " + std::to_string(dt) + " is not a positive multiple of the integration step " +
                           std::to_string(p.integration_step));

  const auto T = index_of(Variable::air_temperature);
  const auto RH = index_of(Variable::air_humidity);
  const auto CO2 = index_of(Variable::air_carbon_dioxide);
  const auto PH = index_of(Variable::water_potential_hydrogen);
  const auto EC = index_of(Variable::water_electrical_conductivity);
  const auto LUX = index_of(Variable::light_illuminance);
  const auto LEVEL = index_of(Variable::water_level);

  const Scalar volume_scale = p.reference_volume_liters / p.reservoir_liters;
  const auto& flow = a.dosing_flow;

  StateVector<Scalar> source = StateVector<Scalar>::Zero();
  source(T) = (Scalar(a.heater) * p.heater_watts - Scalar(a.chiller) * p.chiller_watts) / p.thermal_mass;
  source(RH) = Scalar(a.humidifier) * p.humidifier_rate;
  source(CO2) = -p.co2_drawdown * Scalar(a.light_fraction());
  source(PH) = (Scalar(flow[index_of(Pump::ph_up)]) - Scalar(flow[index_of(Pump::ph_down)])) *
               p.ph_shift_per_ml * volume_scale;
  source(EC) = (Scalar(flow[index_of(Pump::nutrient_a)]) + Scalar(flow[index_of(Pump::nutrient_b)])) *
               p.ec_rise_per_ml * volume_scale;
  source(LEVEL) = Scalar(flow[index_of(Pump::fresh_water)]) * p.level_mm_per_ml -
                  p.evaporation_mm_per_s * Scalar(a.circulation_fan);

  StateVector<Scalar> exchange = p.coupling;
  if (a.vent_open) {
    exchange(T) += p.vent_exchange;
    exchange(RH) += p.vent_exchange;
    exchange(CO2) += p.vent_exchange;
  }
  exchange(LUX) = Scalar(0);

  const StateVector<Scalar> lo = lower_bounds<Scalar>();
  const StateVector<Scalar> hi = upper_bounds<Scalar>();
  const Scalar h = Scalar(p.integration_step);
  const Scalar lux = illuminance(a, p);

  BasicEnvironmentState<Scalar> next = state;
  for (Seconds n = dt / p.integration_step; n > 0; --n) {
    next.values += h * (source + exchange.cwiseProduct(p.ambient.values - next.values));
    next.values = next.values.cwiseMax(lo).cwiseMin(hi);
    next.values(LUX) = lux;
  }
  next.sim_time = state.sim_time + dt;
  return next;
}

struct SensorChannel {
  double quantization = 0.1;  // 0 disables quantization
  double sigma = 0.0;
  Seconds warm_up = 0;
  double min = 0.0;
  double max = 0.0;
};

struct SensorModel {
  PerVariable<SensorChannel> channels;

  SensorChannel& operator[](Variable v) { return channels[index_of(v)]; }
  const SensorChannel& operator[](Variable v) const { return channels[index_of(v)]; }
};

/// Sensor model with the registry ranges, the given quantization steps, no
/// noise, and the CO2 warm-up.
SensorModel make_sensor_model(const PerVariable<double>& quantization, Seconds co2_warm_up);

void validate(const SensorModel& model);

/// nullopt marks an Invalid reading.
using Reading = std::optional<double>;
using SensorReadings = PerVariable<Reading>;

/// reading = clamp(quantize(true + noise), min, max). Air CO2 is Invalid
/// until its warm-up elapses.
SensorReadings read_sensors(const EnvironmentState& state, const SensorModel& model, std::uint64_t seed,
                            Seconds elapsed_since_power_on);

struct Scenario {
  EnvironmentState initial;
  ChamberParams params;
  SensorModel sensors;
};

/// "default_desktop", "noisy_sensors", or "hot_ambient" (preset version 1).
Scenario scenario_preset(std::string_view name);

inline constexpr std::array<std::string_view, 3> kPresetNames{"default_desktop", "noisy_sensors",
                                                              "hot_ambient"};

/// One simulated chamber: threads state through step() and derives a
/// per-instant sensor seed from the base seed.
class SimulatedChamber {
 public:
  SimulatedChamber(Scenario scenario, std::uint64_t seed);

  SensorReadings sense() const;
  void advance(const ActuatorBank& actuators, Seconds dt);

  const EnvironmentState& state() const noexcept { return state_; }
  const Scenario& scenario() const noexcept { return scenario_; }
  Seconds powered_for() const noexcept { return state_.sim_time - power_on_; }

 private:
  Scenario scenario_;
  EnvironmentState state_;
  std::uint64_t seed_;
  Seconds power_on_;
};

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt);

}  // namespace openchamber
