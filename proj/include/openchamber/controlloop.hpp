#pragma once

#include <condition_variable>
#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "openchamber/control.hpp"
#include "openchamber/datastore.hpp"
#include "openchamber/recipe.hpp"
#include "openchamber/simchamber.hpp"

namespace openchamber {

enum class LoopErrorCode {
  RunActive,
  NoActiveRun,
  UnknownRecipe,
  RecipeExists,
  InvalidEffect,
  MagnitudeOutOfRange,
};

std::string_view to_string(LoopErrorCode code);

class LoopError : public std::runtime_error {
 public:
  LoopError(LoopErrorCode code, const std::string& message) : std::runtime_error(message), code_(code) {}
  LoopErrorCode code() const noexcept { return code_; }

 private:
  LoopErrorCode code_;
};

/// Snapshot published after every tick.
struct LoopState {
  Seconds sim_time = 0;
  Seconds powered_for = 0;
  SensorReadings sensed{};
  ActiveSetpoints desired{};
  std::optional<RunPhase> phase;  // nullopt: no run since start-up
  std::string run_id;
  std::string recipe_id;
  Seconds elapsed = 0;
  Seconds duration = 0;
  ActuatorBank bank;
};

struct LoggedActuation {
  std::uint64_t id = 0;
  Seconds sim_time = 0;
  std::string run_id;  // empty outside a run
  Seconds elapsed = 0;
  EffectCommand command;
  double duration_s = 0;  // manual holds; 0 for controller output and doses
  bool manual = false;
};

struct ManualActuation {
  EffectCommand command;
  /// How long a fraction/boolean effect is held. Doses are one-shot.
  Seconds duration_s = 0;
  bool override_run = false;
};

/// Recipe stored, or found identical to an existing one.
struct RecipeStored {
  Recipe recipe;
  bool created = false;
};

/// The live Sense→Plan→Act process behind `serve`. Every mutation is a
/// command drained between ticks by the loop thread, so callers observe
/// either the state before or after their request.
class ControlLoop {
 public:
  struct Options {
    /// Simulated seconds per wall second while a run is active; 0 runs
    /// ticks back to back. Idle ticks always follow the wall clock (scaled
    /// by speed when speed > 0).
    double speed = 0.0;
    std::size_t actuation_log_capacity = 100000;
  };

  ControlLoop(Datastore& store, Scenario scenario, ControllerConfig config, std::uint64_t seed, Options options);
  ~ControlLoop();
  ControlLoop(const ControlLoop&) = delete;
  ControlLoop& operator=(const ControlLoop&) = delete;

  /// Starts the loop thread. Without it, commands execute inline and time
  /// only moves through step().
  void start();
  void stop();

  /// Runs exactly one tick on the calling thread (tests, no loop thread).
  void step();

  // Commands. Each blocks until applied.
  RecipeStored store_recipe(const Recipe& recipe);
  std::string start_run(const std::string& recipe_id);
  void abort_run();
  LoggedActuation actuate(const ManualActuation& request);
  ControllerConfig patch_config(const Json& patch);

  // Reads.
  LoopState state() const;
  ControllerConfig config() const;
  std::vector<LoggedActuation> actuations(const std::optional<std::string>& run_id, std::size_t limit) const;
  /// Stored plus not-yet-flushed points of a run.
  std::vector<DataPoint> run_telemetry(const std::string& run_key) const;
  /// Blocks until the current run leaves the running phase or the timeout
  /// (wall seconds) expires. Returns whether it left.
  bool wait_run_finished(double timeout_seconds) const;

 private:
  struct Run;

  template <typename F>
  auto submit(F&& fn) -> decltype(fn());
  void thread_main(std::stop_token stop);
  void tick_locked();
  void tick_running();
  void tick_idle();
  void finish_run(RunPhase phase);
  void log_actuation(const EffectCommand& cmd, bool manual, double duration_s);
  std::vector<EffectCommand> manual_commands();

  Datastore& store_;
  Options options_;
  SimulatedChamber chamber_;
  ControllerConfig config_;

  mutable std::mutex mutex_;
  mutable std::condition_variable_any changed_;
  std::deque<std::function<void()>> queue_;
  bool tick_now_ = false;  // next loop iteration ticks without waiting

  LoopState state_;
  std::unique_ptr<Run> run_;
  PerPump<double> carry_{};
  struct Hold {
    EffectCommand command;
    Seconds until;
  };
  std::vector<Hold> holds_;
  std::vector<EffectCommand> one_shots_;
  std::deque<LoggedActuation> log_;
  std::uint64_t next_actuation_id_ = 1;

  std::jthread thread_;
};

}  // namespace openchamber
