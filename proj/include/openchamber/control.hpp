#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <stop_token>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "openchamber/recipe.hpp"
#include "openchamber/simchamber.hpp"
#include "openchamber/telemetry.hpp"

namespace openchamber {

// ---------------------------------------------------------------- PID

struct PidState {
  double kp = 0.0;
  double ki = 0.0;
  double kd = 0.0;
  double integral = 0.0;
  std::optional<double> previous_error;
  double output_min = -1.0;
  double output_max = 1.0;
  double windup_limit = 100.0;
};

struct PidResult {
  double output;
  PidState state;
};

/// Positional PID. The integral is clamped to ±windup_limit before it is
/// used; the derivative term is zero on the first update.
PidResult pid_update(PidState pid, double error, double dt);

// ---------------------------------------------------------------- effects

enum class Effect : std::uint8_t {
  heat,
  cool,
  humidify,
  vent,
  illuminate_red,
  illuminate_blue,
  illuminate_white,
  circulate,
  dose_ph_up,
  dose_ph_down,
  dose_nutrient_a,
  dose_nutrient_b,
  add_fresh_water,
  aerate,
};

inline constexpr std::size_t kEffectCount = 14;

enum class EffectDomain { fraction, millilitres, boolean };

std::string_view name_of(Effect e);
std::optional<Effect> effect_from_name(std::string_view name);
EffectDomain domain_of(Effect e);
/// Pump driven by a dose effect, if any.
std::optional<Pump> pump_for(Effect e);
bool magnitude_valid(Effect e, double magnitude);

/// A hardware-agnostic order such as "dose 20 ml of pH up".
struct EffectCommand {
  Effect effect = Effect::circulate;
  double magnitude = 0.0;
  std::optional<Variable> cause;  // variable whose error produced it

  friend bool operator==(const EffectCommand&, const EffectCommand&) = default;
};

// ---------------------------------------------------------------- config

enum class ControllerKind { none, pid, bangbang, open_loop };
enum class PostRecipePolicy { hold_last, all_off };

std::string_view name_of(ControllerKind k);
std::optional<ControllerKind> controller_kind_from_name(std::string_view name);
std::string_view name_of(PostRecipePolicy p);
std::optional<PostRecipePolicy> post_recipe_policy_from_name(std::string_view name);

struct VariableControl {
  ControllerKind kind = ControllerKind::none;
  PidState pid;             // gains and limits; integral/previous_error ignored
  double hysteresis = 1.0;  // bang-bang deadband width, centred on zero error
  double dose_ml = 0.0;     // volume per control period at full output (dosing variables)
};

struct ControllerConfig {
  PerVariable<VariableControl> variables;
  Seconds period = 10;
  PostRecipePolicy post_recipe = PostRecipePolicy::hold_last;
  PerPump<double> dosing_calibration{1.0, 1.0, 1.0, 1.0, 1.0};  // ml/s

  VariableControl& operator[](Variable v) { return variables[index_of(v)]; }
  const VariableControl& operator[](Variable v) const { return variables[index_of(v)]; }

  static ControllerConfig defaults();
};

enum class ControlErrorCode { BadCalibration, InvalidConfig, InvalidCommand };

class ControlError : public std::runtime_error {
 public:
  ControlError(ControlErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}
  ControlErrorCode code() const noexcept { return code_; }

 private:
  ControlErrorCode code_;
};

/// Throws ControlError(InvalidConfig) when an invariant fails.
void validate(const ControllerConfig& config);

// ---------------------------------------------------------------- plan

enum class RunPhase { running, ended, aborted };
std::string_view name_of(RunPhase p);

struct RunState {
  std::string recipe_id;
  std::int64_t start_wall_time = 0;
  Seconds elapsed = 0;
  RunPhase phase = RunPhase::running;
  PerVariable<PidState> pid{};

  /// Fresh run state with PID gains taken from the config.
  static RunState start(std::string recipe_id, const ControllerConfig& config, std::int64_t start_wall_time = 0);
};

struct PlanResult {
  std::vector<EffectCommand> commands;
  RunState run;
};

/// Maps sensed-vs-desired errors to effect commands. Invalid readings are
/// skipped for the tick; zero-magnitude commands are omitted.
PlanResult plan(const SensorReadings& sensed, const ActiveSetpoints& desired, const ControllerConfig& config,
                RunState run, double dt);

// ---------------------------------------------------------------- translate

/// Device-level schedule for one control period.
struct Actuation {
  ActuatorBank bank;               // pump flows are the calibrated rate for running pumps
  PerPump<double> on_seconds{};    // pump run time within this period
  PerPump<double> delivered_ml{};  // volume delivered this period
  PerPump<double> carry_ml{};      // volume left for the next period

  /// Bank with pump flows averaged over the period, for the simulator.
  ActuatorBank averaged(Seconds period) const;
};

/// Converts effects to actuator settings. Requested doses plus the carried
/// volume run at the calibrated flow for at most one period; the rest is
/// carried. Throws ControlError(BadCalibration) for a flow <= 0.
Actuation translate(const std::vector<EffectCommand>& commands, const PerPump<double>& calibration_ml_per_s,
                    Seconds period, const PerPump<double>& carry_in = {});

// ---------------------------------------------------------------- run

struct ActuationRecord {
  Seconds timestamp = 0;
  EffectCommand command;
  bool manual = false;
};

struct RunLog {
  std::string run_id;
  std::vector<DataPoint> points;
  std::vector<ActuationRecord> actuations;
  RunState final_state;
  ActuatorBank final_bank;
  Seconds ticks = 0;
};

/// Appends one measured and one desired DataPoint per variable for a tick.
void append_tick_points(std::vector<DataPoint>& out, const std::string& run_id, Seconds t,
                        const SensorReadings& sensed, const ActiveSetpoints& desired);

/// Sense → Plan → Act every control period from elapsed 0 until the recipe
/// ends or duration_limit is reached. A stop request ends the run at the
/// next tick boundary with phase aborted and all actuators off.
RunLog run_recipe(const Recipe& recipe, SimulatedChamber& chamber, const ControllerConfig& config,
                  Seconds duration_limit, std::string run_id = {}, std::stop_token stop = {});

}  // namespace openchamber
