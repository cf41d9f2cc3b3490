#include "openchamber/httpapi.hpp"

#include <httplib.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <thread>

#include "openchamber/config.hpp"
#include "openchamber/log.hpp"
#include "openchamber/syncproto.hpp"

namespace openchamber {

namespace {

/// Request-shape failures raised by the handlers themselves.
struct ApiFailure : std::runtime_error {
  ApiFailure(int s, std::string c, const std::string& m) : std::runtime_error(m), status(s), code(std::move(c)) {}
  int status;
  std::string code;
};

[[noreturn]] void bad_request(const std::string& message) { throw ApiFailure(400, "BadRequest", message); }

std::string_view control_code(ControlErrorCode c) {
  switch (c) {
    case ControlErrorCode::BadCalibration: return "BadCalibration";
    case ControlErrorCode::InvalidConfig: return "InvalidConfig";
    case ControlErrorCode::InvalidCommand: return "InvalidCommand";
  }
  return "InvalidCommand";
}

std::string_view chamber_code(ChamberErrorCode c) {
  switch (c) {
    case ChamberErrorCode::StepMismatch: return "StepMismatch";
    case ChamberErrorCode::UnknownPreset: return "UnknownPreset";
    case ChamberErrorCode::InvalidParams: return "InvalidParams";
  }
  return "InvalidParams";
}

int loop_status(LoopErrorCode c) {
  switch (c) {
    case LoopErrorCode::RunActive:
    case LoopErrorCode::NoActiveRun:
    case LoopErrorCode::RecipeExists: return 409;
    case LoopErrorCode::UnknownRecipe: return 404;
    case LoopErrorCode::InvalidEffect:
    case LoopErrorCode::MagnitudeOutOfRange: return 400;
  }
  return 400;
}

int store_status(StoreErrorCode c) {
  switch (c) {
    case StoreErrorCode::UnknownRun: return 404;
    case StoreErrorCode::RevisionConflict: return 409;
    case StoreErrorCode::StorageFull: return 507;
    case StoreErrorCode::InvalidDocument: return 400;
    case StoreErrorCode::Corrupt:
    case StoreErrorCode::Io: return 500;
  }
  return 500;
}

Json reading_json(const std::optional<double>& r) { return r ? Json(*r) : Json(nullptr); }

Json value_json(double v) { return std::isnan(v) ? Json(nullptr) : Json(v); }

Json bank_json(const ActuatorBank& b) {
  Json flows = Json::object();
  for (std::size_t p = 0; p < kPumpCount; ++p) flows[std::string(name_of(static_cast<Pump>(p)))] = b.dosing_flow[p];
  return Json{{"heater", b.heater},
              {"chiller", b.chiller},
              {"humidifier", b.humidifier},
              {"vent_open", b.vent_open},
              {"light_red", b.light_red},
              {"light_blue", b.light_blue},
              {"light_white", b.light_white},
              {"circulation_fan", b.circulation_fan},
              {"water_pump", b.water_pump},
              {"aerator", b.aerator},
              {"dosing_flow", std::move(flows)}};
}

Json actuation_json(const LoggedActuation& a) {
  Json j{{"id", a.id},
         {"sim_time", a.sim_time},
         {"run_id", a.run_id.empty() ? Json(nullptr) : Json(a.run_id)},
         {"elapsed", a.elapsed},
         {"effect", name_of(a.command.effect)},
         {"magnitude", a.command.magnitude},
         {"duration_s", a.duration_s},
         {"manual", a.manual}};
  j["cause"] = a.command.cause ? Json(name_of(*a.command.cause)) : Json(nullptr);
  return j;
}

nlohmann::ordered_json recipe_json(const Recipe& r) { return nlohmann::ordered_json::parse(serialize_recipe(r)); }

Json parse_body(const httplib::Request& req) {
  Json body = Json::parse(req.body, nullptr, false);
  if (body.is_discarded() || !body.is_object()) bad_request("request body must be a JSON object");
  return body;
}

std::optional<Seconds> int_param(const httplib::Request& req, const std::string& name) {
  if (!req.has_param(name)) return std::nullopt;
  std::string text = req.get_param_value(name);
  Seconds v = 0;
  auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc{} || end != text.data() + text.size()) bad_request(name + " must be an integer");
  return v;
}

std::optional<StreamFilter> stream_param(const httplib::Request& req) {
  if (!req.has_param("stream")) return std::nullopt;
  auto s = req.get_param_value("stream");
  if (s == "all") return StreamFilter::all;
  if (s == "measured") return StreamFilter::measured;
  if (s == "desired") return StreamFilter::desired;
  bad_request("stream must be all, measured or desired");
}

}  // namespace

Json ApiError::to_json() const {
  Json e{{"status", status}, {"code", code}, {"message", message}};
  if (index) e["index"] = *index;
  return Json{{"error", std::move(e)}};
}

ApiError api_error_from(std::exception_ptr error) {
  try {
    std::rethrow_exception(error);
  } catch (const ApiFailure& e) {
    return {e.status, e.code, e.what(), std::nullopt};
  } catch (const RecipeError& e) {
    return {400, std::string(to_string(e.code())), e.what(), e.index()};
  } catch (const LoopError& e) {
    return {loop_status(e.code()), std::string(to_string(e.code())), e.what(), std::nullopt};
  } catch (const StoreError& e) {
    return {store_status(e.code()), std::string(to_string(e.code())), e.what(), std::nullopt};
  } catch (const ConfigError& e) {
    return {400, "InvalidConfig", e.what(), std::nullopt};
  } catch (const ControlError& e) {
    return {400, std::string(control_code(e.code())), e.what(), std::nullopt};
  } catch (const ChamberError& e) {
    return {400, std::string(chamber_code(e.code())), e.what(), std::nullopt};
  } catch (const CsvError& e) {
    return {400, "InvalidCsv", e.what(), std::nullopt};
  } catch (const Json::exception& e) {
    return {400, "BadRequest", e.what(), std::nullopt};
  } catch (const std::exception& e) {
    return {500, "Internal", e.what(), std::nullopt};
  } catch (...) {
    return {500, "Internal", "unknown failure", std::nullopt};
  }
}

struct ApiServer::Impl {
  ControlLoop& loop;
  Datastore& store;
  ApiOptions options;
  httplib::Server http;
  std::thread thread;

  Impl(ControlLoop& l, Datastore& s, ApiOptions o) : loop(l), store(s), options(std::move(o)) { routes(); }

  using Handler = std::function<void(const httplib::Request&, httplib::Response&)>;

  static void send_json(httplib::Response& res, int status, const auto& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
  }

  bool authorized(const httplib::Request& req) const {
    if (options.bearer_token.empty()) return true;
    return req.get_header_value("Authorization") == "Bearer " + options.bearer_token;
  }

  /// Wraps a handler with authentication and typed error mapping.
  Handler guarded(Handler inner, bool needs_auth = true) {
    return [this, inner = std::move(inner), needs_auth](const httplib::Request& req, httplib::Response& res) {
      if (needs_auth && !authorized(req)) {
        ApiError e{401, "Unauthorized", "missing or wrong bearer token", std::nullopt};
        send_json(res, e.status, e.to_json());
        return;
      }
      try {
        inner(req, res);
      } catch (...) {
        ApiError e = api_error_from(std::current_exception());
        if (e.status >= 500) log_event("error", "request failed", {{"path", req.path}, {"error", e.message}});
        send_json(res, e.status, e.to_json());
      }
    };
  }

  std::string run_param(const httplib::Request& req) {
    if (req.has_param("run")) return req.get_param_value("run");
    auto current = loop.state().run_id;
    if (current.empty()) bad_request("run is required when no run has been started");
    return current;
  }

  void require_run(const std::string& key) {
    auto runs = store.runs();
    if (std::find(runs.begin(), runs.end(), key) == runs.end())
      throw StoreError(StoreErrorCode::UnknownRun, "unknown run " + key);
  }

  void routes() {
    http.set_default_headers({{"Access-Control-Allow-Origin", options.cors_origin},
                              {"Access-Control-Allow-Methods", "GET, POST, PATCH, OPTIONS"},
                              {"Access-Control-Allow-Headers", "Content-Type, Authorization"}});
    http.Options(".*", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });

    if (!options.ui_dir.empty() && !http.set_mount_point("/ui", options.ui_dir.string()))
      log_event("warn", "ui directory not found; /ui disabled", {{"ui_dir", options.ui_dir.string()}});

    http.Get("/health", guarded([](const httplib::Request&, httplib::Response& res) {
               send_json(res, 200, Json{{"status", "ok"}});
             }, false));

    http.Get("/openapi.yaml", [](const httplib::Request&, httplib::Response& res) {
      res.set_content(kOpenApiDocument, "application/yaml");
    });

    // The dashboard's injected settings blob; a file of the same name in
    // ui_dir takes precedence through the mount point.
    http.Get("/ui/config.json", guarded([this](const httplib::Request&, httplib::Response& res) {
               send_json(res, 200, Json{{"api_base", "/"}, {"auth", options.bearer_token.empty() ? "none" : "bearer"}});
             }, false));
    http.Get("/ui(/.*)?", guarded([](const httplib::Request&, httplib::Response&) {
               throw ApiFailure(404, "UiNotInstalled", "no dashboard bundle is configured");
             }, false));

    http.Get("/state", guarded([this](const httplib::Request&, httplib::Response& res) {
               LoopState s = loop.state();
               Json measured = Json::object();
               Json desired = Json::object();
               for (Variable v : kAllVariables) {
                 measured[std::string(name_of(v))] = reading_json(s.sensed[index_of(v)]);
                 desired[std::string(name_of(v))] = reading_json(s.desired[v]);
               }
               Json run = nullptr;
               if (s.phase)
                 run = Json{{"run_id", s.run_id},     {"recipe_id", s.recipe_id}, {"phase", name_of(*s.phase)},
                            {"elapsed", s.elapsed},   {"duration", s.duration}};
               send_json(res, 200,
                         Json{{"sim_time", s.sim_time},
                              {"powered_for", s.powered_for},
                              {"phase", s.phase ? Json(name_of(*s.phase)) : Json("idle")},
                              {"run", std::move(run)},
                              {"measured", std::move(measured)},
                              {"desired", std::move(desired)},
                              {"actuators", bank_json(s.bank)}});
             }));

    http.Get("/telemetry", guarded([this](const httplib::Request& req, httplib::Response& res) {
               std::string key = run_param(req);
               auto from = int_param(req, "from");
               auto to = int_param(req, "to");
               auto filter = stream_param(req).value_or(StreamFilter::all);
               std::optional<Variable> var;
               if (req.has_param("var")) {
                 var = variable_from_name(req.get_param_value("var"));
                 if (!var) throw ApiFailure(400, "UnknownVariable", "unknown variable " + req.get_param_value("var"));
               }
               require_run(key);
               Json points = Json::array();
               for (const auto& p : loop.run_telemetry(key)) {
                 if ((from && p.timestamp < *from) || (to && p.timestamp > *to)) continue;
                 if ((var && p.variable != *var) || !matches(filter, p.stream)) continue;
                 points.push_back(Json{{"timestamp", p.timestamp},
                                       {"variable", name_of(p.variable)},
                                       {"value", value_json(p.value)},
                                       {"stream", name_of(p.stream)}});
               }
               send_json(res, 200, Json{{"run", key}, {"points", std::move(points)}});
             }));

    http.Get("/telemetry.csv", guarded([this](const httplib::Request& req, httplib::Response& res) {
               std::string key = run_param(req);
               auto filter = stream_param(req).value_or(StreamFilter::all);
               require_run(key);
               res.set_content(to_csv(loop.run_telemetry(key), filter), "text/csv");
             }));

    http.Get("/runs", guarded([this](const httplib::Request&, httplib::Response& res) {
               Json runs = Json::array();
               for (const auto& key : store.runs())
                 for (const auto& doc : store.run_documents(key))
                   if (doc.kind == DocumentKind::run_meta) {
                     Json meta = doc.body;
                     meta["key"] = key;
                     runs.push_back(std::move(meta));
                   }
               send_json(res, 200, Json{{"runs", std::move(runs)}});
             }));

    http.Post("/recipes", guarded([this](const httplib::Request& req, httplib::Response& res) {
                Recipe recipe = parse_recipe(req.body);
                RecipeStored stored = loop.store_recipe(recipe);
                nlohmann::ordered_json out{{"id", stored.recipe.id}, {"created", stored.created}};
                out["recipe"] = recipe_json(stored.recipe);
                send_json(res, stored.created ? 201 : 200, out);
              }));

    http.Get("/recipes", guarded([this](const httplib::Request&, httplib::Response& res) {
               Json list = Json::array();
               for (const auto& doc : store.documents(KindFilter{DocumentKind::recipe})) {
                 if (doc.deleted) continue;
                 Json entry{{"id", doc.id}, {"revision", doc.revision}, {"origin", doc.origin}};
                 try {
                   Recipe r = parse_recipe(doc.body.dump());
                   entry["duration"] = r.duration();
                   entry["operations"] = r.operations.size();
                 } catch (const RecipeError&) {
                   entry["invalid"] = true;
                 }
                 list.push_back(std::move(entry));
               }
               std::sort(list.begin(), list.end(),
                         [](const Json& a, const Json& b) { return a["id"].get<std::string>() < b["id"].get<std::string>(); });
               send_json(res, 200, Json{{"recipes", std::move(list)}});
             }));

    http.Get(R"(/recipes/([^/]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
               std::string id = req.matches[1];
               auto doc = store.get(id);
               if (!doc || doc->kind != DocumentKind::recipe || doc->deleted)
                 throw LoopError(LoopErrorCode::UnknownRecipe, "no recipe with id " + id);
               send_json(res, 200, recipe_json(parse_recipe(doc->body.dump())));
             }));

    http.Post("/runs", guarded([this](const httplib::Request& req, httplib::Response& res) {
                Json body = parse_body(req);
                if (!body.contains("recipe_id") || !body["recipe_id"].is_string())
                  bad_request("recipe_id (string) is required");
                std::string recipe_id = body["recipe_id"];
                std::string run_id = loop.start_run(recipe_id);
                send_json(res, 201, Json{{"run_id", run_id}, {"recipe_id", recipe_id}, {"phase", "running"}});
              }));

    http.Post("/runs/current/abort", guarded([this](const httplib::Request&, httplib::Response& res) {
                loop.abort_run();
                LoopState s = loop.state();
                send_json(res, 200, Json{{"run_id", s.run_id}, {"phase", "aborted"}, {"elapsed", s.elapsed}});
              }));

    http.Post("/actuate", guarded([this](const httplib::Request& req, httplib::Response& res) {
                Json body = parse_body(req);
                if (!body.contains("effect") || !body["effect"].is_string()) bad_request("effect (string) is required");
                auto effect = effect_from_name(body["effect"].get<std::string>());
                if (!effect)
                  throw LoopError(LoopErrorCode::InvalidEffect, "unknown effect " + body["effect"].get<std::string>());
                if (!body.contains("magnitude") || !body["magnitude"].is_number())
                  bad_request("magnitude (number) is required");
                ManualActuation request;
                request.command = {*effect, body["magnitude"].get<double>(), std::nullopt};
                if (body.contains("duration_s") && !body["duration_s"].is_null()) {
                  if (!body["duration_s"].is_number_integer()) bad_request("duration_s must be an integer");
                  request.duration_s = body["duration_s"].get<Seconds>();
                }
                if (body.contains("override")) {
                  if (!body["override"].is_boolean()) bad_request("override must be a boolean");
                  request.override_run = body["override"].get<bool>();
                }
                send_json(res, 202, Json{{"actuation", actuation_json(loop.actuate(request))}});
              }));

    http.Get("/actuations", guarded([this](const httplib::Request& req, httplib::Response& res) {
               std::optional<std::string> run;
               if (req.has_param("run")) run = req.get_param_value("run");
               auto limit = int_param(req, "limit").value_or(1000);
               if (limit < 0) bad_request("limit must be >= 0");
               bool manual_only = req.has_param("manual") && req.get_param_value("manual") == "true";
               Json list = Json::array();
               for (const auto& a : loop.actuations(run, manual_only ? 0 : static_cast<std::size_t>(limit)))
                 if (!manual_only || a.manual) list.push_back(actuation_json(a));
               if (manual_only && limit > 0 && list.size() > static_cast<std::size_t>(limit))
                 list.erase(list.begin(), list.end() - limit);
               send_json(res, 200, Json{{"actuations", std::move(list)}});
             }));

    http.Get("/config", guarded([this](const httplib::Request&, httplib::Response& res) {
               send_json(res, 200, to_json(loop.config()));
             }));

    http.Patch("/config", guarded([this](const httplib::Request& req, httplib::Response& res) {
                 send_json(res, 200, to_json(loop.patch_config(parse_body(req))));
               }));

    http.set_error_handler([](const httplib::Request& req, httplib::Response& res) {
      if (res.status != 404 || !res.body.empty()) return;
      ApiError e{404, "NotFound", "no route for " + req.method + " " + req.path, std::nullopt};
      send_json(res, 404, e.to_json());
    });
  }

  int bind(const std::string& host, int port) {
    int bound = port == 0 ? http.bind_to_any_port(host) : (http.bind_to_port(host, port) ? port : -1);
    if (bound < 0) throw SyncError(SyncErrorCode::BindFailure, "cannot bind " + host + ":" + std::to_string(port));
    return bound;
  }
};

ApiServer::ApiServer(ControlLoop& loop, Datastore& store, ApiOptions options)
    : impl_(std::make_unique<Impl>(loop, store, std::move(options))) {}

ApiServer::~ApiServer() { stop(); }

int ApiServer::start(const std::string& host, int port) {
  int bound = impl_->bind(host, port);
  impl_->thread = std::thread([this] { impl_->http.listen_after_bind(); });
  impl_->http.wait_until_ready();
  return bound;
}

void ApiServer::run(const std::string& host, int port, const std::function<void(int)>& on_bound) {
  int bound = impl_->bind(host, port);
  if (on_bound) on_bound(bound);
  impl_->http.listen_after_bind();
}

void ApiServer::stop() {
  impl_->http.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

}  // namespace openchamber
