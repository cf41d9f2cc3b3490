#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

namespace openchamber {

/// Environmental variables sensed and controlled in the chamber. The
/// enumerator order is the storage order of every per-variable array.
enum class Variable : std::uint8_t {
  air_temperature,
  air_humidity,
  air_carbon_dioxide,
  water_temperature,
  water_potential_hydrogen,
  water_electrical_conductivity,
  light_illuminance,
  water_level,
};

inline constexpr std::size_t kVariableCount = 8;

template <typename T>
using PerVariable = std::array<T, kVariableCount>;

struct VariableDescriptor {
  std::string_view name;
  std::string_view unit;
  double min;
  double max;
};

inline constexpr PerVariable<VariableDescriptor> kVariableRegistry{{
    {"air_temperature", "°C", -40.0, 125.0},
    {"air_humidity", "%RH", 0.0, 100.0},
    {"air_carbon_dioxide", "ppm", 0.0, 2000.0},
    {"water_temperature", "°C", -10.0, 85.0},
    {"water_potential_hydrogen", "pH", 0.0, 14.0},
    {"water_electrical_conductivity", "µS/cm", 5.0, 200000.0},
    {"light_illuminance", "lux", 0.0, 40000.0},
    {"water_level", "mm", 0.0, 1000.0},
}};

inline constexpr PerVariable<Variable> kAllVariables{
    Variable::air_temperature,          Variable::air_humidity,
    Variable::air_carbon_dioxide,       Variable::water_temperature,
    Variable::water_potential_hydrogen, Variable::water_electrical_conductivity,
    Variable::light_illuminance,        Variable::water_level,
};

constexpr std::size_t index_of(Variable v) { return static_cast<std::size_t>(v); }

constexpr const VariableDescriptor& descriptor(Variable v) {
  return kVariableRegistry[index_of(v)];
}

constexpr std::string_view name_of(Variable v) { return descriptor(v).name; }

constexpr bool in_range(Variable v, double value) {
  return value >= descriptor(v).min && value <= descriptor(v).max;
}

/// Exact-name lookup; unknown names yield nullopt.
std::optional<Variable> variable_from_name(std::string_view name);

}  // namespace openchamber
