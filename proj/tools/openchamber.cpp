// openchamber — command-line entry point: validate, simulate, serve, sync,
// cloud, export. Exit 0 on success, 1 on validation failure, 2 on runtime
// error. Logs go to stderr as one JSON object per line.

#include <CLI11.hpp>

#include <pthread.h>
#include <signal.h>

#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include "openchamber/config.hpp"
#include "openchamber/controlloop.hpp"
#include "openchamber/httpapi.hpp"
#include "openchamber/log.hpp"
#include "openchamber/syncproto.hpp"

using namespace openchamber;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitInvalid = 1;
constexpr int kExitRuntime = 2;

/// Input the user got wrong (bad flags, unknown run, ...): exit 1.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::ostringstream out;
  out << in.rdbuf();
  return out.str();
}

void write_output(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text << std::flush;
    return;
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  out.close();
  if (!out) throw std::runtime_error("cannot write " + path);
}

AppConfig load_app_config(const std::string& flag, const std::string& preset = {}) {
  auto path = resolve_config_path(flag);
  if (path.empty()) {
    AppConfig cfg;
    if (!preset.empty()) {
      try {
        cfg.scenario = scenario_preset(preset);
      } catch (const ChamberError& e) {
        throw ConfigError(e.what());
      }
      cfg.preset = preset;
    }
    return cfg;
  }
  return load_config(path, preset);
}

StreamFilter stream_filter(const std::string& name) {
  if (name == "measured") return StreamFilter::measured;
  if (name == "desired") return StreamFilter::desired;
  return StreamFilter::all;
}

std::filesystem::path store_path(const std::string& flag, const AppConfig& cfg) {
  if (!flag.empty()) return flag;
  if (!cfg.store_path.empty()) return cfg.store_path;
  return "openchamber.store";
}

/// Blocks SIGINT/SIGTERM in every thread started afterwards and calls
/// on_signal from a watcher thread when one arrives.
class SignalWatcher {
 public:
  explicit SignalWatcher(std::function<void()> on_signal) {
    sigemptyset(&set_);
    sigaddset(&set_, SIGINT);
    sigaddset(&set_, SIGTERM);
    pthread_sigmask(SIG_BLOCK, &set_, nullptr);
    thread_ = std::jthread([this, fn = std::move(on_signal)](std::stop_token st) {
      timespec wait{0, 200'000'000};
      while (!st.stop_requested()) {
        int sig = sigtimedwait(&set_, nullptr, &wait);
        if (sig > 0) {
          log_event("info", "shutting down", {{"signal", sig}});
          fn();
          return;
        }
      }
    });
  }

 private:
  sigset_t set_{};
  std::jthread thread_;
};

// ---------------------------------------------------------------- validate

int cmd_validate(const std::string& path) {
  std::string raw = read_file(path);
  try {
    Recipe r = parse_recipe(raw);
    std::cout << "ok\n";
    log_event("info", "recipe valid", {{"id", r.id}, {"operations", r.operations.size()}, {"duration", r.duration()}});
    return kExitOk;
  } catch (const RecipeError& e) {
    std::cout << e.what() << "\n";
    Json fields{{"code", to_string(e.code())}, {"file", path}};
    if (e.index()) fields["index"] = *e.index();
    log_event("error", e.what(), fields);
    return kExitInvalid;
  }
}

// ---------------------------------------------------------------- simulate

struct SimulateArgs {
  std::string recipe;
  std::string preset;
  double hours = 48;
  std::uint64_t seed = 0;
  std::string out;
  std::string config;
  std::string store;
  std::string run_id;
  std::string stream = "all";
};

int cmd_simulate(const SimulateArgs& a) {
  AppConfig cfg = load_app_config(a.config, a.preset);
  Recipe recipe = parse_recipe(read_file(a.recipe));
  if (!(a.hours > 0)) throw UsageError("--hours must be > 0");
  auto limit = static_cast<Seconds>(std::llround(a.hours * 3600.0));

  SimulatedChamber chamber(cfg.scenario, a.seed);
  RunLog log = run_recipe(recipe, chamber, cfg.controller, limit, a.run_id.empty() ? "sim" : a.run_id);
  write_output(a.out, to_csv(log.points, stream_filter(a.stream)));

  if (!a.store.empty()) {
    Datastore store(Datastore::Options{a.store});
    RunMeta meta;
    meta.run_id = a.run_id.empty() ? unused_run_id(store, "sim") : a.run_id;
    meta.recipe_id = recipe.id;
    meta.period = cfg.controller.period;
    meta.phase = std::string(name_of(log.final_state.phase));
    meta.ticks = log.ticks;
    if (!store.get(recipe.id))
      store.put({recipe.id, 0, DocumentKind::recipe, Json::parse(serialize_recipe(recipe)), false, {}});
    for (auto& p : log.points) p.run_id = meta.run_id;
    store_run(store, meta, log.points);
    log_event("info", "run stored", {{"run_id", meta.run_id}, {"store", a.store}});
  }
  log_event("info", "simulation finished",
            {{"recipe_id", recipe.id},
             {"preset", cfg.preset},
             {"seed", a.seed},
             {"ticks", log.ticks},
             {"points", log.points.size()},
             {"phase", name_of(log.final_state.phase)}});
  return kExitOk;
}

// ---------------------------------------------------------------- serve

struct ServeArgs {
  std::string config;
  std::string host = "127.0.0.1";
  int port = 8080;
  double speed = 0;
  std::string store;
  std::string preset;
  std::optional<std::uint64_t> seed;
};

int cmd_serve(const ServeArgs& a) {
  AppConfig cfg = load_app_config(a.config, a.preset);
  if (!(a.speed >= 0)) throw UsageError("--speed must be >= 0");
  Datastore store(Datastore::Options{store_path(a.store, cfg)});

  ControlLoop loop(store, cfg.scenario, cfg.controller, a.seed.value_or(cfg.seed), {a.speed});
  ApiServer api(loop, store, ApiOptions{cfg.api_token, cfg.cors_origin, cfg.ui_dir});
  SignalWatcher signals([&] { api.stop(); });

  std::jthread syncer;
  if (!cfg.server_url.empty() && cfg.sync_interval > 0) {
    syncer = std::jthread([&](std::stop_token st) {
      std::mutex m;
      std::condition_variable_any cv;
      while (!st.stop_requested()) {
        try {
          HttpTransport transport(cfg.server_url);
          SyncClient client(store, transport, cfg.peer_id, cfg.pull_filter, cfg.sync_token);
          auto r = client.sync();
          log_event("info", "sync finished", {{"pushed", r.pushed}, {"pulled", r.pulled}});
        } catch (const std::exception& e) {
          log_event("warn", "sync failed", {{"error", e.what()}});
        }
        std::unique_lock lock(m);
        cv.wait_for(lock, st, std::chrono::seconds(cfg.sync_interval), [] { return false; });
      }
    });
  }

  loop.start();
  api.run(a.host, a.port, [&](int bound) {
    log_event("info", "listening",
              {{"host", a.host}, {"port", bound}, {"store", store.options().path.string()}, {"speed", a.speed}});
  });
  if (syncer.joinable()) {
    syncer.request_stop();
    syncer.join();
  }
  loop.stop();
  return kExitOk;
}

// ---------------------------------------------------------------- sync / cloud / export

struct SyncArgs {
  std::string config;
  std::string server;
  std::string store;
  std::string peer;
  std::string token;
  std::string filter;
};

int cmd_sync(const SyncArgs& a) {
  AppConfig cfg = load_app_config(a.config);
  std::string server = a.server.empty() ? cfg.server_url : a.server;
  if (server.empty()) throw UsageError("--server (or sync.server) is required");
  KindFilter filter = cfg.pull_filter;
  if (!a.filter.empty()) {
    auto f = KindFilter::parse(a.filter);
    if (!f) throw UsageError("unknown document kind in --filter " + a.filter);
    filter = *f;
  }
  std::string peer = a.peer.empty() ? cfg.peer_id : a.peer;
  if (!valid_peer(peer)) throw UsageError("invalid peer id " + peer);

  Datastore store(Datastore::Options{store_path(a.store, cfg)});
  HttpTransport transport(server);
  SyncClient client(store, transport, peer, filter, a.token.empty() ? cfg.sync_token : a.token);
  SyncReport r = client.sync();
  Json conflicts = Json::array();
  for (const auto& c : r.conflicts)
    conflicts.push_back(Json{{"id", c.id},
                             {"client_revision", c.client_revision},
                             {"server_revision", c.server_revision},
                             {"preserved_as", c.preserved_as}});
  std::cout << Json{{"pushed", r.pushed},
                    {"pulled", r.pulled},
                    {"push_checkpoint", r.push_checkpoint},
                    {"pull_checkpoint", r.pull_checkpoint},
                    {"conflicts", std::move(conflicts)}}
                   .dump()
            << "\n";
  return kExitOk;
}

struct CloudArgs {
  std::string config;
  std::string host = "127.0.0.1";
  int port = 8090;
  std::string store = "openchamber-cloud.store";
  std::string token;
};

int cmd_cloud(const CloudArgs& a) {
  AppConfig cfg = load_app_config(a.config);
  std::filesystem::path path = a.store;
  Datastore store(Datastore::Options{path});
  SyncServer server(store, a.token.empty() ? cfg.sync_token : a.token);
  SyncHttpServer http(server);
  SignalWatcher signals([&] { http.stop(); });
  http.run(a.host, a.port, [&](int bound) {
    log_event("info", "listening", {{"host", a.host}, {"port", bound}, {"store", path.string()}});
  });
  return kExitOk;
}

struct ExportArgs {
  std::string config;
  std::string run;
  std::string out;
  std::string store;
  std::string stream = "all";
};

int cmd_export(const ExportArgs& a) {
  AppConfig cfg = load_app_config(a.config);
  Datastore store(Datastore::Options{store_path(a.store, cfg)});
  try {
    write_output(a.out, export_csv(store, a.run, stream_filter(a.stream)));
  } catch (const StoreError& e) {
    if (e.code() == StoreErrorCode::UnknownRun) throw UsageError(e.what());
    throw;
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"openchamber: food-computer brain against a simulated chamber"};
  app.require_subcommand(1);

  std::string validate_path;
  auto* validate = app.add_subcommand("validate", "Parse a recipe file and report errors or \"ok\"");
  validate->add_option("recipe", validate_path, "Recipe JSON file")->required();

  SimulateArgs sim;
  auto* simulate = app.add_subcommand("simulate", "Run a recipe headless and write the telemetry CSV");
  simulate->add_option("--recipe", sim.recipe, "Recipe JSON file")->required();
  simulate->add_option("--preset", sim.preset, "Chamber preset")
      ->check(CLI::IsMember({"default_desktop", "noisy_sensors", "hot_ambient"}));
  simulate->add_option("--hours", sim.hours, "Simulated hours")->capture_default_str();
  simulate->add_option("--seed", sim.seed, "Sensor noise seed")->capture_default_str();
  simulate->add_option("--out", sim.out, "Output CSV (default stdout)");
  simulate->add_option("--config", sim.config, "Configuration file (default $OPENCHAMBER_CONFIG)");
  simulate->add_option("--store", sim.store, "Also store the run in this store file");
  simulate->add_option("--run-id", sim.run_id, "Run id recorded in the store");
  simulate->add_option("--stream", sim.stream, "Streams to export")
      ->check(CLI::IsMember({"all", "measured", "desired"}))
      ->capture_default_str();

  ServeArgs serve_args;
  auto* serve = app.add_subcommand("serve", "Run the control loop against the simulator and serve the API");
  serve->add_option("--config", serve_args.config, "Configuration file (default $OPENCHAMBER_CONFIG)");
  serve->add_option("--host", serve_args.host, "Bind address")->capture_default_str();
  serve->add_option("--port", serve_args.port, "Port (0 picks a free one)")->capture_default_str();
  serve->add_option("--speed", serve_args.speed, "Simulated seconds per wall second during runs; 0 = max")
      ->capture_default_str();
  serve->add_option("--store", serve_args.store, "Store file (overrides store.path)");
  serve->add_option("--preset", serve_args.preset, "Chamber preset (overrides the config file)")
      ->check(CLI::IsMember({"default_desktop", "noisy_sensors", "hot_ambient"}));
  serve->add_option("--seed", serve_args.seed, "Sensor noise seed (overrides the config file)");

  SyncArgs sync_args;
  auto* sync = app.add_subcommand("sync", "Replicate the local store with a cloud server once");
  sync->add_option("--config", sync_args.config, "Configuration file (default $OPENCHAMBER_CONFIG)");
  sync->add_option("--server", sync_args.server, "Server base URL, e.g. http://host:8090");
  sync->add_option("--store", sync_args.store, "Store file (overrides store.path)");
  sync->add_option("--peer", sync_args.peer, "Peer id (overrides sync.peer_id)");
  sync->add_option("--token", sync_args.token, "Bearer token (overrides sync.token)");
  sync->add_option("--filter", sync_args.filter, "Pull filter: all or a comma-separated kind list");

  CloudArgs cloud_args;
  auto* cloud = app.add_subcommand("cloud", "Run the replication server");
  cloud->add_option("--config", cloud_args.config, "Configuration file (default $OPENCHAMBER_CONFIG)");
  cloud->add_option("--host", cloud_args.host, "Bind address")->capture_default_str();
  cloud->add_option("--port", cloud_args.port, "Port (0 picks a free one)")->capture_default_str();
  cloud->add_option("--store", cloud_args.store, "Server store file")->capture_default_str();
  cloud->add_option("--token", cloud_args.token, "Bearer token clients must present");

  ExportArgs export_args;
  auto* exp = app.add_subcommand("export", "Write a stored run as CSV");
  exp->add_option("--config", export_args.config, "Configuration file (default $OPENCHAMBER_CONFIG)");
  exp->add_option("--run", export_args.run, "Run id")->required();
  exp->add_option("--out", export_args.out, "Output CSV (default stdout)");
  exp->add_option("--store", export_args.store, "Store file (overrides store.path)");
  exp->add_option("--stream", export_args.stream, "Streams to export")
      ->check(CLI::IsMember({"all", "measured", "desired"}))
      ->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? kExitOk : kExitInvalid;
  }

  try {
    if (*validate) return cmd_validate(validate_path);
    if (*simulate) return cmd_simulate(sim);
    if (*serve) return cmd_serve(serve_args);
    if (*sync) return cmd_sync(sync_args);
    if (*cloud) return cmd_cloud(cloud_args);
    if (*exp) return cmd_export(export_args);
  } catch (const RecipeError& e) {
    log_event("error", e.what(), {{"code", to_string(e.code())}});
    return kExitInvalid;
  } catch (const ConfigError& e) {
    log_event("error", e.what(), {{"code", "InvalidConfig"}});
    return kExitInvalid;
  } catch (const UsageError& e) {
    log_event("error", e.what(), {{"code", "Usage"}});
    return kExitInvalid;
  } catch (const SyncError& e) {
    log_event("error", e.what(), {{"code", to_string(e.code())}});
    return kExitRuntime;
  } catch (const StoreError& e) {
    log_event("error", e.what(), {{"code", to_string(e.code())}});
    return kExitRuntime;
  } catch (const std::exception& e) {
    log_event("error", e.what());
    return kExitRuntime;
  }
  return kExitRuntime;
}
