#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <fstream>
#include <map>
#include <sstream>

#include "generators.hpp"
#include "openchamber/recipe.hpp"

using namespace openchamber;
using openchamber::testing::data_path;
using openchamber::testing::random_recipe;

namespace {

std::string read(const std::string& path) {
  std::ifstream in(path);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

Recipe sample() { return parse_recipe(read(data_path("sample_recipe.json"))); }

// Straight scan over the operations list: the latest setpoint with
// offset <= t wins. Deliberately shares no code with RecipeTimeline.
std::map<Variable, double> naive_setpoints(const Recipe& r, Seconds t) {
  std::map<Variable, double> out;
  for (const auto& op : r.operations)
    if (op.offset <= t) out[op.variable] = op.value;
  return out;
}

std::map<Variable, double> as_map(const ActiveSetpoints& a) {
  std::map<Variable, double> out;
  for (Variable v : kAllVariables)
    if (a[v]) out[v] = *a[v];
  return out;
}

RecipeErrorCode code_of(const std::string& raw, std::optional<std::size_t>* index = nullptr) {
  try {
    parse_recipe(raw);
  } catch (const RecipeError& e) {
    if (index) *index = e.index();
    return e.code();
  }
  FAIL("expected a RecipeError for " << raw);
  return RecipeErrorCode::MalformedJson;
}

}  // namespace

TEST_SUITE("recipe") {
  TEST_CASE("sample document parses to six set points") {
    Recipe r = sample();
    CHECK(r.id == "7ca3134e91aec96acd17a74764000bb8");
    CHECK(r.format == "simple");
    REQUIRE(r.operations.size() == 6);
    CHECK(r.operations[0] == SetPoint{0, Variable::air_temperature, 25});
    CHECK(r.operations[3] == SetPoint{43200, Variable::air_temperature, 23});
    CHECK(r.operations[5] == SetPoint{172800, Variable::air_humidity, 20});
    CHECK(r.duration() == 172800);
  }

  TEST_CASE("minimal recipe") {
    Recipe r = parse_recipe(R"({"_id":"x","format":"simple","operations":[[0,"air_temperature",25]]})");
    CHECK(r.operations.size() == 1);
    CHECK(r.duration() == 0);
    auto j = nlohmann::json::parse(serialize_recipe(r));
    CHECK(j.size() == 3);
    CHECK(j.contains("_id"));
    CHECK(j.contains("format"));
    CHECK(j.contains("operations"));

    RecipeTimeline t(r);
    CHECK(t.steps(Variable::air_temperature).size() == 1);
    CHECK(t.duration() == 0);
    CHECK(t.setpoints_at(0).ended);
  }

  TEST_CASE("compiled sample timeline") {
    RecipeTimeline t = compile(sample());
    auto steps = [&](Variable v) {
      std::vector<std::pair<Seconds, double>> out;
      for (const auto& s : t.steps(v)) out.emplace_back(s.offset, s.value);
      return out;
    };
    using P = std::vector<std::pair<Seconds, double>>;
    CHECK(steps(Variable::air_temperature) == P{{0, 25}, {43200, 23}});
    CHECK(steps(Variable::air_humidity) == P{{0, 25}, {172800, 20}});
    CHECK(steps(Variable::light_illuminance) == P{{0, 60}, {108000, 0}});
    CHECK(steps(Variable::water_level).empty());
    CHECK(t.duration() == 172800);
  }

  TEST_CASE("setpoints_at on the sample") {
    RecipeTimeline t = compile(sample());
    using M = std::map<Variable, double>;

    auto at0 = t.setpoints_at(0);
    CHECK(as_map(at0) == M{{Variable::air_temperature, 25}, {Variable::air_humidity, 25}, {Variable::light_illuminance, 60}});
    CHECK_FALSE(at0.ended);

    auto at50k = t.setpoints_at(50000);
    CHECK(as_map(at50k) ==
          M{{Variable::air_temperature, 23}, {Variable::air_humidity, 25}, {Variable::light_illuminance, 60}});
    CHECK_FALSE(at50k.ended);

    auto end = t.setpoints_at(172800);
    CHECK(as_map(end) == M{{Variable::air_temperature, 23}, {Variable::air_humidity, 20}, {Variable::light_illuminance, 0}});
    CHECK(end.ended);
  }

  TEST_CASE("sample round trip") {
    Recipe r = sample();
    CHECK(parse_recipe(serialize_recipe(r)) == r);
  }

  TEST_CASE("extra top-level keys survive a round trip") {
    Recipe r = parse_recipe(
        R"({"_id":"x","name":"basil","format":"simple","operations":[[0,"air_temperature",25]],"meta":{"a":[1,2]}})");
    CHECK(r.extra.size() == 2);
    Recipe back = parse_recipe(serialize_recipe(r));
    CHECK(back == r);
    CHECK(back.extra["meta"]["a"][1] == 2);
  }

  TEST_CASE("1000-set-point recipe round trips") {
    std::mt19937_64 rng(1000);
    Recipe r = random_recipe(rng, 1000, 365 * 86400);
    REQUIRE(r.operations.size() >= 990);
    CHECK(parse_recipe(serialize_recipe(r)) == r);
  }

  TEST_CASE("properties over generated recipes") {
    std::mt19937_64 rng(20240611);
    std::uniform_int_distribution<std::size_t> size(1, 60);
    for (int n = 0; n < 1000; ++n) {
      Recipe r = random_recipe(rng, size(rng));
      CAPTURE(n);
      RecipeTimeline t(r);

      // Round trip and lossless compilation.
      REQUIRE(parse_recipe(serialize_recipe(r)) == r);
      REQUIRE(t.enumerate() == r.operations);

      Seconds max_off = 0;
      for (const auto& op : r.operations) max_off = std::max(max_off, op.offset);
      REQUIRE(t.duration() == max_off);
      REQUIRE(r.duration() == max_off);

      // Probe at every offset, just before and after it, and at random times.
      std::vector<Seconds> probes{0, max_off, max_off + 1, max_off + 86400};
      for (const auto& op : r.operations) {
        probes.push_back(op.offset);
        if (op.offset > 0) probes.push_back(op.offset - 1);
        probes.push_back(op.offset + 1);
      }
      std::uniform_int_distribution<Seconds> any(0, max_off + 1000);
      for (int i = 0; i < 20; ++i) probes.push_back(any(rng));
      std::sort(probes.begin(), probes.end());

      std::map<Variable, double> previous;
      for (Seconds p : probes) {
        auto active = t.setpoints_at(p);
        auto got = as_map(active);
        REQUIRE(got == naive_setpoints(r, p));
        // Duration law.
        REQUIRE(active.ended == (p >= max_off));
        // Monotone coverage.
        for (const auto& [v, _] : previous) REQUIRE(got.contains(v));
        previous = got;
      }

      // Hold semantics between consecutive offsets of each variable.
      for (Variable v : kAllVariables) {
        const auto& steps = t.steps(v);
        for (std::size_t i = 0; i + 1 < steps.size(); ++i) {
          REQUIRE(steps[i].offset < steps[i + 1].offset);
          Seconds mid = steps[i].offset + (steps[i + 1].offset - steps[i].offset) / 2;
          REQUIRE(t.setpoints_at(steps[i].offset)[v] == t.setpoints_at(mid)[v]);
          REQUIRE(t.setpoints_at(steps[i + 1].offset - 1)[v] == steps[i].value);
        }
      }
    }
  }

  TEST_CASE("typed rejections name the offending element") {
    std::optional<std::size_t> index;

    CHECK(code_of("{not json") == RecipeErrorCode::MalformedJson);
    CHECK(code_of("[]") == RecipeErrorCode::MalformedJson);
    CHECK(code_of(R"({"format":"simple","operations":[[0,"air_temperature",1]]})") == RecipeErrorCode::MalformedJson);
    CHECK(code_of(R"({"_id":"","format":"simple","operations":[[0,"air_temperature",1]]})") ==
          RecipeErrorCode::MalformedJson);
    CHECK(code_of(R"({"_id":"x","format":"fancy","operations":[[0,"air_temperature",1]]})") ==
          RecipeErrorCode::UnknownFormat);
    CHECK(code_of(R"({"_id":"x","format":"simple","operations":[]})") == RecipeErrorCode::EmptyOperations);

    CHECK(code_of(R"({"_id":"x","format":"simple","operations":[[0,"air_temperature",1],[5,"air_temperature"]]})",
                  &index) == RecipeErrorCode::InvalidOperation);
    CHECK(index == 1u);
    CHECK(code_of(R"({"_id":"x","format":"simple","operations":[[-1,"air_temperature",1]]})", &index) ==
          RecipeErrorCode::InvalidOperation);
    CHECK(code_of(R"({"_id":"x","format":"simple","operations":[[1.5,"air_temperature",1]]})", &index) ==
          RecipeErrorCode::InvalidOperation);

    CHECK(code_of(R"({"_id":"x","format":"simple","operations":[[0,"air_temperature",1],[0,"soil_moisture",3]]})",
                  &index) == RecipeErrorCode::UnknownVariable);
    CHECK(index == 1u);
    CHECK(code_of(R"({"_id":"x","format":"simple","operations":[[0,"air_carbon_dioxide",2500]]})", &index) ==
          RecipeErrorCode::ValueOutOfRange);
    CHECK(index == 0u);
    CHECK(code_of(R"({"_id":"x","format":"simple","operations":[[0,"water_potential_hydrogen",-0.1]]})") ==
          RecipeErrorCode::ValueOutOfRange);
    CHECK(code_of(R"({"_id":"x","format":"simple","operations":[[0,"air_humidity",5],[0,"air_humidity",6]]})",
                  &index) == RecipeErrorCode::DuplicateSetPoint);
    CHECK(index == 1u);
  }

  TEST_CASE("reordered sample is rejected as unsorted") {
    auto j = nlohmann::json::parse(read(data_path("sample_recipe.json")));
    auto& ops = j["operations"];
    std::reverse(ops.begin(), ops.end());
    std::optional<std::size_t> index;
    CHECK(code_of(j.dump(), &index) == RecipeErrorCode::UnsortedOffsets);
    CHECK(index == 1u);
  }

  TEST_CASE("registry bounds are accepted inclusively") {
    for (Variable v : kAllVariables) {
      const auto& d = descriptor(v);
      std::string name(d.name);
      CAPTURE(name);
      nlohmann::json j{{"_id", "b"}, {"format", "simple"}, {"operations", {{0, name, d.min}, {1, name, d.max}}}};
      CHECK(parse_recipe(j.dump()).operations.size() == 2);
    }
  }
}
