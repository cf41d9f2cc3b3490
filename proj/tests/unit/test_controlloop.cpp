#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <fstream>
#include <sstream>

#include "generators.hpp"
#include "openchamber/controlloop.hpp"

using namespace openchamber;
using openchamber::testing::data_path;

namespace {

Recipe sample() {
  std::ifstream in(data_path("sample_recipe.json"));
  std::ostringstream s;
  s << in.rdbuf();
  return parse_recipe(s.str());
}

Recipe short_recipe(const std::string& id, Seconds end, double temp = 25) {
  Recipe r;
  r.id = id;
  r.operations = {{0, Variable::air_temperature, temp}, {end, Variable::air_temperature, temp}};
  return r;
}

LoopErrorCode code_of(auto&& fn) {
  try {
    fn();
  } catch (const LoopError& e) {
    return e.code();
  }
  FAIL("expected a LoopError");
  return LoopErrorCode::RunActive;
}

ControlLoop make_loop(Datastore& store, ControllerConfig cfg = ControllerConfig::defaults(), double speed = 0) {
  return ControlLoop(store, scenario_preset("default_desktop"), cfg, 7, {speed, 100000});
}

}  // namespace

TEST_SUITE("controlloop") {
  TEST_CASE("recipes are stored once") {
    Datastore store;
    auto loop = make_loop(store);
    auto first = loop.store_recipe(sample());
    CHECK(first.created);
    auto again = loop.store_recipe(sample());
    CHECK_FALSE(again.created);
    CHECK(again.recipe == sample());
    Recipe other = sample();
    other.operations[0].value = 26;
    CHECK(code_of([&] { loop.store_recipe(other); }) == LoopErrorCode::RecipeExists);
    CHECK(store.document_count() == 1);
  }

  TEST_CASE("a run ticks through the recipe and ends") {
    Datastore store;
    auto loop = make_loop(store);
    loop.store_recipe(short_recipe("r", 600));
    CHECK(code_of([&] { loop.start_run("nope"); }) == LoopErrorCode::UnknownRecipe);
    CHECK(code_of([&] { loop.abort_run(); }) == LoopErrorCode::NoActiveRun);
    std::string run = loop.start_run("r");
    CHECK(run == "run-0001");
    CHECK(code_of([&] { loop.start_run("r"); }) == LoopErrorCode::RunActive);
    CHECK(loop.state().phase == RunPhase::running);
    for (int i = 0; i < 61; ++i) loop.step();
    auto s = loop.state();
    CHECK(s.phase == RunPhase::ended);
    CHECK(s.elapsed == 600);
    CHECK(s.duration == 600);
    auto meta = run_meta_from_json(store.get(run_meta_id(run))->body);
    CHECK(meta.phase == "ended");
    CHECK(meta.ticks == 61);
    CHECK(run_points(store, run).size() == 61 * 2 * kVariableCount);
    CHECK(loop.start_run("r") == "run-0002");
  }

  TEST_CASE("live loop matches the offline run tick for tick") {
    Datastore store;
    auto loop = make_loop(store);
    loop.store_recipe(short_recipe("r", 3600, 24));
    // Started before the thread so no idle tick runs first.
    std::string run = loop.start_run("r");
    loop.start();
    REQUIRE(loop.wait_run_finished(30));
    loop.stop();

    SimulatedChamber chamber(scenario_preset("default_desktop"), 7);
    RunLog offline = run_recipe(short_recipe("r", 3600, 24), chamber, ControllerConfig::defaults(), 3600, run);
    auto live = export_csv(store, run);
    CHECK(live == to_csv(offline.points));
  }

  TEST_CASE("abort switches everything off") {
    Datastore store;
    auto loop = make_loop(store);
    loop.store_recipe(short_recipe("r", 3600, 35));
    loop.start_run("r");
    for (int i = 0; i < 10; ++i) loop.step();
    CHECK(loop.state().bank.heater > 0);
    loop.abort_run();
    auto s = loop.state();
    CHECK(s.phase == RunPhase::aborted);
    CHECK(s.bank == ActuatorBank::all_off());
    loop.step();
    CHECK(loop.state().bank == ActuatorBank::all_off());
    CHECK(run_meta_from_json(store.get(run_meta_id("run-0001"))->body).phase == "aborted");
  }

  TEST_CASE("hold_last keeps controlling after the recipe ends; all_off does not") {
    Datastore store;
    auto loop = make_loop(store);
    loop.store_recipe(short_recipe("r", 60, 30));
    loop.start_run("r");
    for (int i = 0; i < 7; ++i) loop.step();
    REQUIRE(loop.state().phase == RunPhase::ended);
    for (int i = 0; i < 10; ++i) loop.step();
    CHECK(loop.state().bank.heater > 0);
    CHECK(loop.state().desired[Variable::air_temperature] == 30.0);

    Datastore store2;
    auto cfg = ControllerConfig::defaults();
    cfg.post_recipe = PostRecipePolicy::all_off;
    auto off = make_loop(store2, cfg);
    off.store_recipe(short_recipe("r", 60, 30));
    off.start_run("r");
    for (int i = 0; i < 7; ++i) off.step();
    CHECK(off.state().bank == ActuatorBank::all_off());
    for (int i = 0; i < 10; ++i) off.step();
    CHECK(off.state().bank == ActuatorBank::all_off());
  }

  TEST_CASE("a failing tick aborts the run with all actuators off") {
    Datastore::Options o;
    o.max_documents = 2;  // recipe + run meta; the first telemetry batch will not fit
    Datastore store(o);
    auto loop = make_loop(store);
    loop.store_recipe(short_recipe("r", 86400, 35));
    loop.start_run("r");
    for (int i = 0; i < 100; ++i) loop.step();
    auto s = loop.state();
    CHECK(s.phase == RunPhase::aborted);
    CHECK(s.bank == ActuatorBank::all_off());
    CHECK(s.elapsed < 1000);
  }

  TEST_CASE("manual actuation needs override during a run") {
    Datastore store;
    auto loop = make_loop(store);
    auto idle = loop.actuate({{Effect::heat, 1.0, std::nullopt}, 30, false});
    CHECK(idle.manual);
    CHECK(idle.duration_s == 30);
    CHECK(idle.run_id.empty());
    loop.step();
    CHECK(loop.state().bank.heater == 1.0);
    for (int i = 0; i < 3; ++i) loop.step();
    CHECK(loop.state().bank.heater == 0.0);

    // Short holds last at least one control period.
    CHECK(loop.actuate({{Effect::vent, 1.0, std::nullopt}, 0, false}).duration_s == 10);

    loop.store_recipe(short_recipe("r", 600));
    loop.start_run("r");
    CHECK(code_of([&] { loop.actuate({{Effect::dose_ph_up, 20.0, std::nullopt}, 0, false}); }) ==
          LoopErrorCode::RunActive);
    auto dose = loop.actuate({{Effect::dose_ph_up, 20.0, std::nullopt}, 0, true});
    CHECK(dose.run_id == "run-0001");
    CHECK(dose.duration_s == 0);
    loop.step();
    CHECK(loop.state().bank.dosing_flow[index_of(Pump::ph_up)] == 1.0);  // calibrated flow while running

    CHECK(code_of([&] { loop.actuate({{Effect::heat, 1.5, std::nullopt}, 0, true}); }) ==
          LoopErrorCode::MagnitudeOutOfRange);
    CHECK(code_of([&] { loop.actuate({{Effect::vent, 0.5, std::nullopt}, 0, true}); }) ==
          LoopErrorCode::MagnitudeOutOfRange);
    CHECK(code_of([&] { loop.actuate({{Effect::heat, 0.5, std::nullopt}, -1, true}); }) ==
          LoopErrorCode::MagnitudeOutOfRange);

    auto manual = loop.actuations(std::nullopt, 0);
    std::size_t count = std::count_if(manual.begin(), manual.end(), [](const auto& a) { return a.manual; });
    CHECK(count == 3);
    auto in_run = loop.actuations(std::string("run-0001"), 0);
    for (const auto& a : in_run) CHECK(a.run_id == "run-0001");
    CHECK(loop.actuations(std::nullopt, 2).size() == 2);
  }

  TEST_CASE("config patches") {
    Datastore store;
    auto loop = make_loop(store);
    CHECK(loop.patch_config(Json{{"period", 20}}).period == 20);
    loop.store_recipe(short_recipe("r", 6000));
    loop.start_run("r");
    for (int i = 0; i < 5; ++i) loop.step();
    CHECK(code_of([&] { loop.patch_config(Json{{"period", 10}}); }) == LoopErrorCode::RunActive);
    auto cfg = loop.patch_config(Json::parse(R"({"variables":{"air_temperature":{"kp":0.9}}})"));
    CHECK(cfg[Variable::air_temperature].pid.kp == 0.9);
    CHECK(loop.config().period == 20);
    CHECK(loop.state().elapsed == 80);
  }

  TEST_CASE("CO2 is not controlled during the sensor warm-up") {
    Datastore store;
    auto loop = make_loop(store);
    Recipe r;
    r.id = "co2";
    r.operations = {{0, Variable::air_carbon_dioxide, 100}, {600, Variable::air_carbon_dioxide, 100}};
    loop.store_recipe(r);
    loop.start_run("co2");
    for (int i = 0; i < 61; ++i) loop.step();
    bool seen = false;
    for (const auto& a : loop.actuations(std::nullopt, 0)) {
      if (a.command.cause != Variable::air_carbon_dioxide) continue;
      CHECK(a.sim_time >= 150);
      seen = true;
    }
    CHECK(seen);
  }

  TEST_CASE("idle ticks follow the wall clock") {
    Datastore store;
    auto loop = make_loop(store, ControllerConfig::defaults(), 100);  // 10 s period → 0.1 s per tick
    loop.start();
    std::this_thread::sleep_for(std::chrono::milliseconds(550));
    auto t = loop.state().sim_time;
    loop.stop();
    CHECK(t >= 20);
    CHECK(t <= 70);
  }

  TEST_CASE("stop flushes an unfinished run") {
    Datastore store;
    {
      auto loop = make_loop(store, ControllerConfig::defaults(), 100);
      loop.store_recipe(short_recipe("r", 86400));
      loop.start();
      loop.start_run("r");
      std::this_thread::sleep_for(std::chrono::milliseconds(300));
      loop.stop();
      auto pts = loop.run_telemetry("run-0001");
      CHECK(pts.size() == run_points(store, "run-0001").size());
      CHECK(pts.size() > 0);
      CHECK(run_meta_from_json(store.get(run_meta_id("run-0001"))->body).ticks * 16 ==
            static_cast<Seconds>(pts.size()));
    }
  }
}
