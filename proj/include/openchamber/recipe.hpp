#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "openchamber/variables.hpp"

namespace openchamber {

/// Seconds since recipe start.
using Seconds = std::int64_t;

struct SetPoint {
  Seconds offset = 0;
  Variable variable = Variable::air_temperature;
  double value = 0.0;

  friend bool operator==(const SetPoint&, const SetPoint&) = default;
};

/// A "simple"-format climate recipe. `extra` holds any unrecognised
/// top-level keys so they survive a parse/serialize round trip.
struct Recipe {
  std::string id;
  std::string format = "simple";
  std::vector<SetPoint> operations;
  nlohmann::ordered_json extra = nlohmann::ordered_json::object();

  Seconds duration() const;

  friend bool operator==(const Recipe&, const Recipe&) = default;
};

enum class RecipeErrorCode {
  MalformedJson,
  UnknownFormat,
  EmptyOperations,
  InvalidOperation,
  UnsortedOffsets,
  UnknownVariable,
  ValueOutOfRange,
  DuplicateSetPoint,
};

std::string_view to_string(RecipeErrorCode code);

class RecipeError : public std::runtime_error {
 public:
  RecipeError(RecipeErrorCode code, std::string message,
              std::optional<std::size_t> index = std::nullopt);

  RecipeErrorCode code() const noexcept { return code_; }
  /// Index into "operations" of the offending element, when one exists.
  std::optional<std::size_t> index() const noexcept { return index_; }

 private:
  RecipeErrorCode code_;
  std::optional<std::size_t> index_;
};

/// Parses and validates a recipe document. Throws RecipeError for every
/// rejection; no other exception type escapes.
Recipe parse_recipe(std::string_view raw);

/// Emits "_id", "format", "operations", then any preserved extra keys.
std::string serialize_recipe(const Recipe& recipe);

/// Active setpoints at an instant. Variables that have not yet received
/// their first setpoint are nullopt.
struct ActiveSetpoints {
  PerVariable<std::optional<double>> values{};
  bool ended = false;

  const std::optional<double>& operator[](Variable v) const { return values[index_of(v)]; }
};

/// Compiled per-variable step functions of a recipe.
class RecipeTimeline {
 public:
  struct Step {
    Seconds offset;
    double value;
    std::size_t ordinal;  // position in the source operations list
  };

  explicit RecipeTimeline(const Recipe& recipe);

  const std::vector<Step>& steps(Variable v) const { return steps_[index_of(v)]; }
  Seconds duration() const noexcept { return duration_; }

  /// Latest setpoint per variable with offset <= t; hold semantics.
  ActiveSetpoints setpoints_at(Seconds t) const;

  /// Reconstructs the source operations list in its original order.
  std::vector<SetPoint> enumerate() const;

 private:
  PerVariable<std::vector<Step>> steps_;
  Seconds duration_ = 0;
  std::size_t count_ = 0;
};

inline RecipeTimeline compile(const Recipe& recipe) { return RecipeTimeline(recipe); }

}  // namespace openchamber
