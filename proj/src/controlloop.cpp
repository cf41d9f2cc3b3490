#include "openchamber/controlloop.hpp"

#include <algorithm>
#include <chrono>
#include <future>

#include "openchamber/config.hpp"
#include "openchamber/log.hpp"

namespace openchamber {

std::string_view to_string(LoopErrorCode code) {
  switch (code) {
    case LoopErrorCode::RunActive: return "RunActive";
    case LoopErrorCode::NoActiveRun: return "NoActiveRun";
    case LoopErrorCode::UnknownRecipe: return "UnknownRecipe";
    case LoopErrorCode::RecipeExists: return "RecipeExists";
    case LoopErrorCode::InvalidEffect: return "InvalidEffect";
    case LoopErrorCode::MagnitudeOutOfRange: return "MagnitudeOutOfRange";
  }
  return "Unknown";
}

struct ControlLoop::Run {
  Run(Datastore& store, Recipe r, RunMeta m, RunState s)
      : recipe(std::move(r)), timeline(recipe), meta(std::move(m)), state(std::move(s)), writer(store, meta.run_id) {}

  Recipe recipe;
  RecipeTimeline timeline;
  RunMeta meta;
  RunState state;
  TelemetryWriter writer;
  bool finished = false;
};

namespace {

using Clock = std::chrono::steady_clock;

std::int64_t unix_now() {
  return std::chrono::duration_cast<std::chrono::seconds>(std::chrono::system_clock::now().time_since_epoch())
      .count();
}

}  // namespace

ControlLoop::ControlLoop(Datastore& store, Scenario scenario, ControllerConfig config, std::uint64_t seed,
                         Options options)
    : store_(store), options_(options), chamber_(std::move(scenario), seed), config_(std::move(config)) {
  validate(config_);
  if (!(options_.speed >= 0.0)) throw ConfigError("speed must be >= 0");
  state_.sim_time = chamber_.state().sim_time;
  state_.sensed = chamber_.sense();
}

ControlLoop::~ControlLoop() { stop(); }

void ControlLoop::start() {
  if (thread_.joinable()) return;
  thread_ = std::jthread([this](std::stop_token st) { thread_main(st); });
}

void ControlLoop::stop() {
  if (!thread_.joinable()) return;
  thread_.request_stop();
  changed_.notify_all();
  thread_.join();
  thread_ = {};
  std::lock_guard lock(mutex_);
  // Anything still queued is answered by running it inline.
  while (!queue_.empty()) {
    auto task = std::move(queue_.front());
    queue_.pop_front();
    task();
  }
  if (run_ && !run_->finished) {
    try {
      run_->writer.flush();
      put_run_meta(store_, run_->meta);
    } catch (const std::exception& e) {
      log_event("error", "could not flush telemetry on shutdown", {{"error", e.what()}});
    }
  }
}

template <typename F>
auto ControlLoop::submit(F&& fn) -> decltype(fn()) {
  using R = decltype(fn());
  if (!thread_.joinable()) {
    std::lock_guard lock(mutex_);
    return fn();
  }
  auto task = std::make_shared<std::packaged_task<R()>>(std::forward<F>(fn));
  auto result = task->get_future();
  {
    std::lock_guard lock(mutex_);
    queue_.emplace_back([task] { (*task)(); });
  }
  changed_.notify_all();
  return result.get();
}

void ControlLoop::thread_main(std::stop_token stop) {
  std::unique_lock lock(mutex_);
  auto next_tick = Clock::now();
  while (!stop.stop_requested()) {
    while (!queue_.empty()) {
      auto task = std::move(queue_.front());
      queue_.pop_front();
      task();
    }
    if (tick_now_) {
      next_tick = Clock::now();
      tick_now_ = false;
    }
    const bool running = run_ && !run_->finished;
    const bool flat_out = running && options_.speed == 0.0;
    auto now = Clock::now();
    if (!flat_out && now < next_tick) {
      changed_.wait_until(lock, stop, next_tick, [&] { return !queue_.empty(); });
      continue;
    }
    tick_locked();
    changed_.notify_all();
    if (flat_out) {
      // Let readers and command submitters in between back-to-back ticks.
      lock.unlock();
      std::this_thread::yield();
      lock.lock();
      next_tick = Clock::now();
    } else {
      double scale = options_.speed > 0.0 ? options_.speed : 1.0;
      next_tick += std::chrono::duration_cast<Clock::duration>(
          std::chrono::duration<double>(static_cast<double>(config_.period) / scale));
      if (next_tick < now) next_tick = now;
    }
  }
}

void ControlLoop::step() {
  std::lock_guard lock(mutex_);
  tick_locked();
}

void ControlLoop::tick_locked() {
  try {
    if (run_ && !run_->finished)
      tick_running();
    else
      tick_idle();
  } catch (const std::exception& e) {
    // Fail safe: stop the run and switch everything off.
    log_event("error", "control tick failed", {{"error", e.what()}});
    holds_.clear();
    one_shots_.clear();
    carry_ = {};
    state_.bank = ActuatorBank::all_off();
    if (run_ && !run_->finished) {
      try {
        finish_run(RunPhase::aborted);
      } catch (const std::exception& inner) {
        run_->finished = true;
        state_.phase = RunPhase::aborted;
        log_event("error", "could not record aborted run", {{"error", inner.what()}});
      }
    }
  }
}

std::vector<EffectCommand> ControlLoop::manual_commands() {
  const Seconds now = chamber_.state().sim_time;
  std::erase_if(holds_, [&](const Hold& h) { return h.until <= now; });
  std::vector<EffectCommand> out;
  for (const auto& h : holds_) out.push_back(h.command);
  out.insert(out.end(), one_shots_.begin(), one_shots_.end());
  one_shots_.clear();
  return out;
}

void ControlLoop::tick_running() {
  Run& r = *run_;
  const Seconds period = config_.period;
  const Seconds t = r.state.elapsed;

  SensorReadings sensed = chamber_.sense();
  ActiveSetpoints desired = r.timeline.setpoints_at(t);
  auto planned = plan(sensed, desired, config_, r.state, static_cast<double>(period));
  r.state = std::move(planned.run);
  for (const auto& cmd : planned.commands) log_actuation(cmd, false, 0);

  auto commands = std::move(planned.commands);
  auto manual = manual_commands();
  commands.insert(commands.end(), manual.begin(), manual.end());
  Actuation act = translate(commands, config_.dosing_calibration, period, carry_);
  carry_ = act.carry_ml;

  std::vector<DataPoint> tick;
  tick.reserve(2 * kVariableCount);
  append_tick_points(tick, r.meta.run_id, t, sensed, desired);
  r.writer.append_tick(tick);
  ++r.meta.ticks;

  state_.sensed = sensed;
  state_.desired = desired;
  state_.elapsed = t;
  state_.bank = act.bank;

  if (desired.ended) {
    finish_run(RunPhase::ended);
  } else {
    chamber_.advance(act.averaged(period), period);
    r.state.elapsed = t + period;
  }
  state_.sim_time = chamber_.state().sim_time;
  state_.powered_for = chamber_.powered_for();
}

void ControlLoop::tick_idle() {
  const Seconds period = config_.period;
  SensorReadings sensed = chamber_.sense();
  ActiveSetpoints desired{};
  std::vector<EffectCommand> commands;
  if (run_ && run_->state.phase == RunPhase::ended && config_.post_recipe == PostRecipePolicy::hold_last) {
    // Keep holding the recipe's final setpoints.
    desired = run_->timeline.setpoints_at(run_->timeline.duration());
    auto planned = plan(sensed, desired, config_, run_->state, static_cast<double>(period));
    planned.run.phase = RunPhase::ended;
    run_->state = std::move(planned.run);
    commands = std::move(planned.commands);
    for (const auto& cmd : commands) log_actuation(cmd, false, 0);
  }
  auto manual = manual_commands();
  commands.insert(commands.end(), manual.begin(), manual.end());
  Actuation act = translate(commands, config_.dosing_calibration, period, carry_);
  carry_ = act.carry_ml;
  chamber_.advance(act.averaged(period), period);

  state_.sensed = sensed;
  state_.desired = desired;
  state_.bank = act.bank;
  state_.sim_time = chamber_.state().sim_time;
  state_.powered_for = chamber_.powered_for();
}

void ControlLoop::finish_run(RunPhase phase) {
  Run& r = *run_;
  r.finished = true;
  r.state.phase = phase;
  state_.phase = phase;
  if (phase == RunPhase::aborted || config_.post_recipe == PostRecipePolicy::all_off) {
    holds_.clear();
    one_shots_.clear();
    carry_ = {};
    state_.bank = ActuatorBank::all_off();
  }
  r.meta.phase = std::string(name_of(phase));
  r.writer.flush();
  put_run_meta(store_, r.meta);
  log_event("info", "run finished", {{"run_id", r.meta.run_id}, {"phase", r.meta.phase}, {"ticks", r.meta.ticks}});
}

void ControlLoop::log_actuation(const EffectCommand& cmd, bool manual, double duration_s) {
  LoggedActuation entry;
  entry.id = next_actuation_id_++;
  entry.sim_time = chamber_.state().sim_time;
  if (run_ && !run_->finished) {
    entry.run_id = run_->meta.run_id;
    entry.elapsed = run_->state.elapsed;
  }
  entry.command = cmd;
  entry.duration_s = duration_s;
  entry.manual = manual;
  log_.push_back(std::move(entry));
  while (log_.size() > options_.actuation_log_capacity) log_.pop_front();
}

// ---------------------------------------------------------------- commands

RecipeStored ControlLoop::store_recipe(const Recipe& recipe) {
  return submit([&]() -> RecipeStored {
    if (auto existing = store_.get(recipe.id)) {
      if (existing->kind == DocumentKind::recipe && !existing->deleted) {
        Recipe stored = parse_recipe(existing->body.dump());
        if (stored == recipe) return {std::move(stored), false};
      }
      throw LoopError(LoopErrorCode::RecipeExists, "a different document already uses id " + recipe.id);
    }
    Document doc{recipe.id, 0, DocumentKind::recipe, Json::parse(serialize_recipe(recipe)), false, {}};
    store_.put(doc);
    return {recipe, true};
  });
}

std::string ControlLoop::start_run(const std::string& recipe_id) {
  return submit([&]() -> std::string {
    if (run_ && !run_->finished)
      throw LoopError(LoopErrorCode::RunActive, "run " + run_->meta.run_id + " is still running");
    auto doc = store_.get(recipe_id);
    if (!doc || doc->kind != DocumentKind::recipe || doc->deleted)
      throw LoopError(LoopErrorCode::UnknownRecipe, "no recipe with id " + recipe_id);
    Recipe recipe = parse_recipe(doc->body.dump());

    RunMeta meta;
    meta.run_id = unused_run_id(store_, "run");
    meta.recipe_id = recipe_id;
    meta.period = config_.period;
    meta.start_wall_time = unix_now();
    put_run_meta(store_, meta);

    auto state = RunState::start(recipe_id, config_, meta.start_wall_time);
    run_ = std::make_unique<Run>(store_, std::move(recipe), meta, std::move(state));
    holds_.clear();
    one_shots_.clear();
    carry_ = {};
    state_.phase = RunPhase::running;
    state_.run_id = meta.run_id;
    state_.recipe_id = recipe_id;
    state_.elapsed = 0;
    state_.duration = run_->timeline.duration();
    tick_now_ = true;
    log_event("info", "run started", {{"run_id", meta.run_id}, {"recipe_id", recipe_id}});
    return meta.run_id;
  });
}

void ControlLoop::abort_run() {
  submit([&] {
    if (!run_ || run_->finished) throw LoopError(LoopErrorCode::NoActiveRun, "no run is active");
    finish_run(RunPhase::aborted);
  });
  changed_.notify_all();
}

LoggedActuation ControlLoop::actuate(const ManualActuation& request) {
  const auto& cmd = request.command;
  if (!magnitude_valid(cmd.effect, cmd.magnitude))
    throw LoopError(LoopErrorCode::MagnitudeOutOfRange,
                    std::string(name_of(cmd.effect)) + " magnitude " + format_double(cmd.magnitude) +
                        " is outside its domain");
  if (request.duration_s < 0)
    throw LoopError(LoopErrorCode::MagnitudeOutOfRange, "duration_s must be >= 0");
  return submit([&]() -> LoggedActuation {
    if (run_ && !run_->finished && !request.override_run)
      throw LoopError(LoopErrorCode::RunActive, "a recipe run is active; resend with override to actuate");
    double held = 0;
    if (domain_of(cmd.effect) == EffectDomain::millilitres) {
      one_shots_.push_back(cmd);
    } else {
      Seconds duration = std::max<Seconds>(request.duration_s, config_.period);
      holds_.push_back({cmd, chamber_.state().sim_time + duration});
      held = static_cast<double>(duration);
    }
    log_actuation(cmd, true, held);
    tick_now_ = true;
    return log_.back();
  });
}

ControllerConfig ControlLoop::patch_config(const Json& patch) {
  return submit([&]() -> ControllerConfig {
    ControllerConfig next = merge_controller_config(config_, patch);
    if (run_ && !run_->finished) {
      if (next.period != config_.period)
        throw LoopError(LoopErrorCode::RunActive, "the control period cannot change during a run");
      for (Variable v : kAllVariables) {
        // New gains and limits; the accumulated integral carries over.
        auto& pid = run_->state.pid[index_of(v)];
        const auto& g = next[v].pid;
        pid.kp = g.kp;
        pid.ki = g.ki;
        pid.kd = g.kd;
        pid.output_min = g.output_min;
        pid.output_max = g.output_max;
        pid.windup_limit = g.windup_limit;
      }
    }
    config_ = next;
    return config_;
  });
}

// ---------------------------------------------------------------- reads

LoopState ControlLoop::state() const {
  std::lock_guard lock(mutex_);
  return state_;
}

ControllerConfig ControlLoop::config() const {
  std::lock_guard lock(mutex_);
  return config_;
}

std::vector<LoggedActuation> ControlLoop::actuations(const std::optional<std::string>& run_id,
                                                     std::size_t limit) const {
  std::lock_guard lock(mutex_);
  std::vector<LoggedActuation> out;
  for (auto it = log_.rbegin(); it != log_.rend() && (limit == 0 || out.size() < limit); ++it)
    if (!run_id || it->run_id == *run_id) out.push_back(*it);
  std::reverse(out.begin(), out.end());
  return out;
}

std::vector<DataPoint> ControlLoop::run_telemetry(const std::string& run_key) const {
  std::lock_guard lock(mutex_);
  auto points = run_points(store_, run_key);
  if (run_ && run_->meta.run_id == run_key) {
    const auto& pending = run_->writer.pending();
    points.insert(points.end(), pending.begin(), pending.end());
  }
  return points;
}

bool ControlLoop::wait_run_finished(double timeout_seconds) const {
  std::unique_lock lock(mutex_);
  return changed_.wait_for(lock, std::chrono::duration<double>(timeout_seconds),
                           [&] { return !run_ || run_->finished; });
}

}  // namespace openchamber
