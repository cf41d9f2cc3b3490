#include "openchamber/recipe.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <utility>

namespace openchamber {

std::optional<Variable> variable_from_name(std::string_view name) {
  for (Variable v : kAllVariables) {
    if (name_of(v) == name) return v;
  }
  return std::nullopt;
}

std::string_view to_string(RecipeErrorCode code) {
  switch (code) {
    case RecipeErrorCode::MalformedJson: return "MalformedJson";
    case RecipeErrorCode::UnknownFormat: return "UnknownFormat";
    case RecipeErrorCode::EmptyOperations: return "EmptyOperations";
    case RecipeErrorCode::InvalidOperation: return "InvalidOperation";
    case RecipeErrorCode::UnsortedOffsets: return "UnsortedOffsets";
    case RecipeErrorCode::UnknownVariable: return "UnknownVariable";
    case RecipeErrorCode::ValueOutOfRange: return "ValueOutOfRange";
    case RecipeErrorCode::DuplicateSetPoint: return "DuplicateSetPoint";
  }
  return "Unknown";
}

namespace {

std::string format_message(RecipeErrorCode code, const std::string& message,
                           std::optional<std::size_t> index) {
  std::string out(to_string(code));
  if (index) out += " at operations[" + std::to_string(*index) + "]";
  out += ": " + message;
  return out;
}

using Json = nlohmann::ordered_json;

// Offsets are whole seconds. Integral floats such as 3600.0 are accepted.
std::optional<Seconds> offset_from(const Json& j) {
  constexpr double kMaxOffset = 4.0e18;
  if (j.is_number_unsigned()) {
    auto u = j.get<std::uint64_t>();
    if (u > static_cast<std::uint64_t>(kMaxOffset)) return std::nullopt;
    return static_cast<Seconds>(u);
  }
  if (j.is_number_integer()) {
    auto i = j.get<std::int64_t>();
    if (i < 0) return std::nullopt;
    return i;
  }
  if (j.is_number_float()) {
    double d = j.get<double>();
    if (!std::isfinite(d) || d < 0.0 || d > kMaxOffset || std::floor(d) != d) return std::nullopt;
    return static_cast<Seconds>(d);
  }
  return std::nullopt;
}

}  // namespace

RecipeError::RecipeError(RecipeErrorCode code, std::string message,
                         std::optional<std::size_t> index)
    : std::runtime_error(format_message(code, message, index)), code_(code), index_(index) {}

Seconds Recipe::duration() const {
  Seconds d = 0;
  for (const auto& op : operations) d = std::max(d, op.offset);
  return d;
}

Recipe parse_recipe(std::string_view raw) {
  using E = RecipeErrorCode;
  Json doc = Json::parse(raw.begin(), raw.end(), nullptr, /*allow_exceptions=*/false);
  if (doc.is_discarded()) throw RecipeError(E::MalformedJson, "document is not valid JSON");
  if (!doc.is_object()) throw RecipeError(E::MalformedJson, "top level must be an object");

  Recipe recipe;
  auto id = doc.find("_id");
  if (id == doc.end() || !id->is_string() || id->get_ref<const std::string&>().empty())
    throw RecipeError(E::MalformedJson, "\"_id\" must be a non-empty string");
  recipe.id = id->get<std::string>();

  auto format = doc.find("format");
  if (format == doc.end() || !format->is_string())
    throw RecipeError(E::MalformedJson, "\"format\" must be a string");
  if (format->get_ref<const std::string&>() != "simple")
    throw RecipeError(E::UnknownFormat, "unsupported format \"" + format->get<std::string>() + "\"");
  recipe.format = "simple";

  auto ops = doc.find("operations");
  if (ops == doc.end() || !ops->is_array())
    throw RecipeError(E::MalformedJson, "\"operations\" must be an array");
  if (ops->empty()) throw RecipeError(E::EmptyOperations, "recipe has no set points");

  recipe.operations.reserve(ops->size());
  // Variables already seen at the current offset, for duplicate detection.
  std::array<bool, kVariableCount> seen_at_offset{};
  for (std::size_t i = 0; i < ops->size(); ++i) {
    const Json& op = (*ops)[i];
    if (!op.is_array() || op.size() != 3)
      throw RecipeError(E::InvalidOperation, "expected [offset, variable_type, value]", i);
    auto offset = offset_from(op[0]);
    if (!offset)
      throw RecipeError(E::InvalidOperation, "offset must be a non-negative whole number of seconds", i);
    if (!op[1].is_string()) throw RecipeError(E::InvalidOperation, "variable_type must be a string", i);
    if (!op[2].is_number()) throw RecipeError(E::InvalidOperation, "value must be a number", i);

    const auto& name = op[1].get_ref<const std::string&>();
    auto variable = variable_from_name(name);
    if (!variable) throw RecipeError(E::UnknownVariable, "unknown variable \"" + name + "\"", i);
    double value = op[2].get<double>();
    if (!std::isfinite(value)) throw RecipeError(E::InvalidOperation, "value must be finite", i);
    if (!in_range(*variable, value)) {
      const auto& d = descriptor(*variable);
      throw RecipeError(E::ValueOutOfRange,
                        name + " value " + std::to_string(value) + " outside [" +
                            std::to_string(d.min) + ", " + std::to_string(d.max) + "]",
                        i);
    }

    if (!recipe.operations.empty()) {
      Seconds previous = recipe.operations.back().offset;
      if (*offset < previous)
        throw RecipeError(E::UnsortedOffsets,
                          "offset " + std::to_string(*offset) + " follows " + std::to_string(previous), i);
      if (*offset != previous) seen_at_offset.fill(false);
    }
    if (seen_at_offset[index_of(*variable)])
      throw RecipeError(E::DuplicateSetPoint,
                        "second set point for " + name + " at offset " + std::to_string(*offset), i);
    seen_at_offset[index_of(*variable)] = true;

    recipe.operations.push_back({*offset, *variable, value});
  }

  for (auto it = doc.begin(); it != doc.end(); ++it) {
    if (it.key() != "_id" && it.key() != "format" && it.key() != "operations")
      recipe.extra[it.key()] = it.value();
  }
  return recipe;
}

std::string serialize_recipe(const Recipe& recipe) {
  Json doc = Json::object();
  doc["_id"] = recipe.id;
  doc["format"] = recipe.format;
  Json ops = Json::array();
  for (const auto& op : recipe.operations)
    ops.push_back(Json::array({op.offset, name_of(op.variable), op.value}));
  doc["operations"] = std::move(ops);
  for (auto it = recipe.extra.begin(); it != recipe.extra.end(); ++it) doc[it.key()] = it.value();
  return doc.dump();
}

RecipeTimeline::RecipeTimeline(const Recipe& recipe) : count_(recipe.operations.size()) {
  for (std::size_t i = 0; i < recipe.operations.size(); ++i) {
    const auto& op = recipe.operations[i];
    steps_[index_of(op.variable)].push_back({op.offset, op.value, i});
    duration_ = std::max(duration_, op.offset);
  }
}

ActiveSetpoints RecipeTimeline::setpoints_at(Seconds t) const {
  ActiveSetpoints active;
  for (Variable v : kAllVariables) {
    const auto& steps = steps_[index_of(v)];
    auto next = std::upper_bound(steps.begin(), steps.end(), t,
                                 [](Seconds time, const Step& s) { return time < s.offset; });
    if (next != steps.begin()) active.values[index_of(v)] = std::prev(next)->value;
  }
  active.ended = t >= duration_;
  return active;
}

std::vector<SetPoint> RecipeTimeline::enumerate() const {
  std::vector<SetPoint> out(count_);
  for (Variable v : kAllVariables) {
    for (const auto& s : steps_[index_of(v)]) out[s.ordinal] = {s.offset, v, s.value};
  }
  return out;
}

}  // namespace openchamber
