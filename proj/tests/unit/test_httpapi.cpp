#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <unistd.h>

#include "generators.hpp"
#include "openchamber/httpapi.hpp"
#include "openchamber/config.hpp"
#include "openchamber/syncproto.hpp"

// After the project headers: <resolv.h> (via httplib) defines _res, which
// Eigen uses as a parameter name.
#include <httplib.h>

using namespace openchamber;
using openchamber::testing::data_path;

namespace {

std::string sample_text() {
  std::ifstream in(data_path("sample_recipe.json"));
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

struct Fixture {
  Datastore store;
  ControlLoop loop;
  ApiServer api;
  int port;
  httplib::Client client;

  explicit Fixture(ApiOptions options = {}, double speed = 0)
      : loop(store, scenario_preset("default_desktop"), ControllerConfig::defaults(), 1, {speed, 100000}),
        api(loop, store, std::move(options)),
        port(api.start("127.0.0.1", 0)),
        client("127.0.0.1", port) {
    loop.start();
  }
  ~Fixture() {
    api.stop();
    loop.stop();
  }

  Json json(const httplib::Result& r) {
    REQUIRE(r);
    return Json::parse(r->body);
  }
  void expect_error(const httplib::Result& r, int status, const std::string& code) {
    REQUIRE(r);
    CHECK(r->status == status);
    Json j = Json::parse(r->body);
    CHECK(j["error"]["code"] == code);
    CHECK(j["error"]["status"] == status);
    CHECK(j["error"]["message"].is_string());
  }
  httplib::Result post(const std::string& path, const std::string& body) {
    return client.Post(path, body, "application/json");
  }
};

}  // namespace

TEST_SUITE("httpapi") {
  TEST_CASE("error mapping") {
    auto from = [](auto e) { return api_error_from(std::make_exception_ptr(e)); };
    CHECK(from(RecipeError(RecipeErrorCode::UnknownVariable, "x", 3)).index == 3u);
    CHECK(from(RecipeError(RecipeErrorCode::UnknownVariable, "x", 3)).code == "UnknownVariable");
    CHECK(from(LoopError(LoopErrorCode::RunActive, "x")).status == 409);
    CHECK(from(LoopError(LoopErrorCode::UnknownRecipe, "x")).status == 404);
    CHECK(from(StoreError(StoreErrorCode::StorageFull, "x")).status == 507);
    CHECK(from(StoreError(StoreErrorCode::UnknownRun, "x")).status == 404);
    CHECK(from(ConfigError("x")).code == "InvalidConfig");
    CHECK(from(std::runtime_error("x")).status == 500);
    Json j = ApiError{400, "BadRequest", "m", std::nullopt}.to_json();
    CHECK(j == Json{{"error", {{"status", 400}, {"code", "BadRequest"}, {"message", "m"}}}});
  }

  TEST_CASE("recipe, run, telemetry round trip") {
    Fixture f;
    auto health = f.client.Get("/health");
    CHECK(health->status == 200);
    CHECK(f.json(health)["status"] == "ok");
    CHECK(health->get_header_value("Access-Control-Allow-Origin") == "*");

    auto created = f.post("/recipes", sample_text());
    CHECK(created->status == 201);
    CHECK(f.json(created)["id"] == "7ca3134e91aec96acd17a74764000bb8");
    CHECK(f.post("/recipes", sample_text())->status == 200);
    auto conflicting = Json::parse(sample_text());
    conflicting["operations"][0][2] = 30;
    f.expect_error(f.post("/recipes", conflicting.dump()), 409, "RecipeExists");

    auto bad = f.post("/recipes", R"({"_id":"x","format":"simple","operations":[[0,"air_temperature",1],[0,"soil",3]]})");
    f.expect_error(bad, 400, "UnknownVariable");
    CHECK(f.json(bad)["error"]["index"] == 1);
    f.expect_error(f.post("/recipes", "{"), 400, "MalformedJson");

    auto list = f.json(f.client.Get("/recipes"));
    REQUIRE(list["recipes"].size() == 1);
    CHECK(list["recipes"][0]["duration"] == 172800);
    CHECK(list["recipes"][0]["operations"] == 6);
    CHECK(f.json(f.client.Get("/recipes/7ca3134e91aec96acd17a74764000bb8"))["operations"].size() == 6);
    f.expect_error(f.client.Get("/recipes/none"), 404, "UnknownRecipe");

    f.expect_error(f.client.Get("/telemetry"), 400, "BadRequest");
    f.expect_error(f.post("/runs", R"({"recipe_id":"none"})"), 404, "UnknownRecipe");
    f.expect_error(f.post("/runs", R"({})"), 400, "BadRequest");
    auto run = f.post("/runs", R"({"recipe_id":"7ca3134e91aec96acd17a74764000bb8"})");
    CHECK(run->status == 201);
    CHECK(f.json(run)["run_id"] == "run-0001");
    REQUIRE(f.loop.wait_run_finished(60));

    auto state = f.json(f.client.Get("/state"));
    CHECK(state["phase"] == "ended");
    CHECK(state["run"]["elapsed"] == 172800);
    CHECK(state["desired"]["air_temperature"] == 23.0);
    CHECK(state["desired"]["water_level"].is_null());
    CHECK(state["measured"]["air_temperature"].is_number());

    auto csv = f.client.Get("/telemetry.csv");
    REQUIRE(csv->status == 200);
    CHECK(std::count(csv->body.begin(), csv->body.end(), '\n') == 1 + 17281 * 16);
    auto measured = f.client.Get("/telemetry.csv?stream=measured");
    CHECK(std::count(measured->body.begin(), measured->body.end(), '\n') == 1 + 17281 * 8);

    auto window = f.json(f.client.Get("/telemetry?from=43190&to=43200&var=air_temperature&stream=desired"));
    REQUIRE(window["points"].size() == 2);
    CHECK(window["points"][0]["value"] == 25.0);
    CHECK(window["points"][1]["value"] == 23.0);
    f.expect_error(f.client.Get("/telemetry?var=soil"), 400, "UnknownVariable");
    f.expect_error(f.client.Get("/telemetry?from=abc"), 400, "BadRequest");
    f.expect_error(f.client.Get("/telemetry?stream=both"), 400, "BadRequest");
    f.expect_error(f.client.Get("/telemetry?run=run-0042"), 404, "UnknownRun");
    f.expect_error(f.client.Get("/telemetry.csv?run=run-0042"), 404, "UnknownRun");

    auto runs = f.json(f.client.Get("/runs"));
    REQUIRE(runs["runs"].size() == 1);
    CHECK(runs["runs"][0]["phase"] == "ended");
    CHECK(runs["runs"][0]["ticks"] == 17281);
    f.expect_error(f.post("/runs/current/abort", ""), 409, "NoActiveRun");
  }

  TEST_CASE("manual actuation and abort") {
    Fixture f({}, 1000);  // 10 ms per tick so the run stays active
    f.post("/recipes", sample_text());
    auto idle = f.post("/actuate", R"({"effect":"heat","magnitude":0.5,"duration_s":60})");
    CHECK(idle->status == 202);
    CHECK(f.json(idle)["actuation"]["manual"] == true);
    CHECK(f.json(idle)["actuation"]["run_id"].is_null());

    f.post("/runs", R"({"recipe_id":"7ca3134e91aec96acd17a74764000bb8"})");
    f.expect_error(f.post("/runs", R"({"recipe_id":"7ca3134e91aec96acd17a74764000bb8"})"), 409, "RunActive");
    f.expect_error(f.post("/actuate", R"({"effect":"dose_ph_up","magnitude":20})"), 409, "RunActive");
    auto forced = f.post("/actuate", R"({"effect":"dose_ph_up","magnitude":20,"override":true})");
    CHECK(forced->status == 202);
    CHECK(f.json(forced)["actuation"]["run_id"] == "run-0001");
    f.expect_error(f.post("/actuate", R"({"effect":"explode","magnitude":1})"), 400, "InvalidEffect");
    f.expect_error(f.post("/actuate", R"({"effect":"vent","magnitude":0.5,"override":true})"), 400,
                   "MagnitudeOutOfRange");
    f.expect_error(f.post("/actuate", R"({"effect":"vent"})"), 400, "BadRequest");
    f.expect_error(f.post("/actuate", R"({"effect":"vent","magnitude":1,"override":"yes"})"), 400, "BadRequest");

    auto manual = f.json(f.client.Get("/actuations?manual=true"));
    REQUIRE(manual["actuations"].size() == 2);
    CHECK(manual["actuations"][1]["effect"] == "dose_ph_up");
    CHECK(f.json(f.client.Get("/actuations?limit=1"))["actuations"].size() == 1);
    f.expect_error(f.client.Get("/actuations?limit=-1"), 400, "BadRequest");

    f.expect_error(f.client.Patch("/config", R"({"period":5})", "application/json"), 409, "RunActive");
    auto abort = f.post("/runs/current/abort", "");
    CHECK(abort->status == 200);
    CHECK(f.json(abort)["phase"] == "aborted");
    auto state = f.json(f.client.Get("/state"));
    CHECK(state["phase"] == "aborted");
    CHECK(state["actuators"]["heater"] == 0.0);
    CHECK(state["actuators"]["dosing_flow"]["ph_up"] == 0.0);
  }

  TEST_CASE("config routes") {
    Fixture f;
    auto cfg = f.json(f.client.Get("/config"));
    CHECK(cfg["period"] == 10);
    auto patched = f.client.Patch("/config", R"({"variables":{"air_temperature":{"kp":0.7}}})", "application/json");
    CHECK(patched->status == 200);
    CHECK(f.json(patched)["variables"]["air_temperature"]["kp"] == 0.7);
    f.expect_error(f.client.Patch("/config", R"({"bogus":1})", "application/json"), 400, "InvalidConfig");
    f.expect_error(f.client.Patch("/config", "[]", "application/json"), 400, "BadRequest");
  }

  TEST_CASE("documentation, dashboard mount and CORS") {
    Fixture f;
    auto doc = f.client.Get("/openapi.yaml");
    REQUIRE(doc->status == 200);
    CHECK(doc->body.rfind("openapi: 3.0.3", 0) == 0);
    for (const char* path : {"/health:", "/state:", "/telemetry:", "/telemetry.csv:", "/recipes:", "/recipes/{id}:",
                             "/runs:", "/runs/current/abort:", "/actuate:", "/actuations:", "/config:", "/ui/config.json:"})
      CHECK(doc->body.find(path) != std::string::npos);
    f.expect_error(f.client.Get("/ui/index.html"), 404, "UiNotInstalled");
    CHECK(f.json(f.client.Get("/ui/config.json"))["auth"] == "none");
    auto preflight = f.client.Options("/recipes");
    CHECK(preflight->status == 204);
    CHECK(preflight->get_header_value("Access-Control-Allow-Methods").find("PATCH") != std::string::npos);
    f.expect_error(f.client.Get("/nowhere"), 404, "NotFound");
  }

  TEST_CASE("static bundle under /ui") {
    auto dir = std::filesystem::temp_directory_path() / ("openchamber-ui-" + std::to_string(::getpid()));
    std::filesystem::create_directories(dir);
    std::ofstream(dir / "index.html") << "<html>dash</html>";
    {
      ApiOptions o;
      o.ui_dir = dir;
      Fixture f(o);
      auto page = f.client.Get("/ui/index.html");
      REQUIRE(page);
      CHECK(page->status == 200);
      CHECK(page->body == "<html>dash</html>");
      CHECK(f.json(f.client.Get("/ui/config.json"))["api_base"] == "/");
    }
    std::filesystem::remove_all(dir);
  }

  TEST_CASE("bearer authentication") {
    ApiOptions o;
    o.bearer_token = "t0ken";
    o.cors_origin = "http://dash.local";
    Fixture f(o);
    CHECK(f.client.Get("/health")->status == 200);
    CHECK(f.client.Get("/openapi.yaml")->status == 200);
    CHECK(f.json(f.client.Get("/ui/config.json"))["auth"] == "bearer");
    f.expect_error(f.client.Get("/state"), 401, "Unauthorized");
    f.expect_error(f.client.Get("/state", {{"Authorization", "Bearer nope"}}), 401, "Unauthorized");
    auto ok = f.client.Get("/state", {{"Authorization", "Bearer t0ken"}});
    CHECK(ok->status == 200);
    CHECK(ok->get_header_value("Access-Control-Allow-Origin") == "http://dash.local");
    CHECK(f.json(ok)["phase"] == "idle");
    CHECK(f.json(ok)["run"].is_null());
  }
}
