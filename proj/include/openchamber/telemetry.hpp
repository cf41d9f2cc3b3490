#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "openchamber/recipe.hpp"
#include "openchamber/variables.hpp"

namespace openchamber {

enum class Stream : std::uint8_t { measured, desired };

std::string_view name_of(Stream s);
std::optional<Stream> stream_from_name(std::string_view name);

/// One timestamped sample. A NaN value marks "no value" (an Invalid
/// reading, or a variable without an active setpoint).
struct DataPoint {
  Seconds timestamp = 0;
  Variable variable = Variable::air_temperature;
  double value = 0.0;
  Stream stream = Stream::measured;
  std::string run_id;

  bool has_value() const;
};

/// Equality that treats two NaN values as equal.
bool same_point(const DataPoint& a, const DataPoint& b);

/// Which streams an export includes.
enum class StreamFilter { all, measured, desired };
bool matches(StreamFilter filter, Stream s);

/// Canonical CSV: header `timestamp,variable,value,stream`, rows sorted by
/// (timestamp, variable name, stream name), LF after every line, shortest
/// round-trip decimal for values, empty field for NaN. RFC 4180 quoting.
std::string to_csv(std::vector<DataPoint> points, StreamFilter filter = StreamFilter::all);

class CsvError : public std::runtime_error {
 public:
  CsvError(std::size_t line, const std::string& message)
      : std::runtime_error("line " + std::to_string(line) + ": " + message), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

/// Parses a canonical CSV export back into DataPoints tagged with run_id.
std::vector<DataPoint> from_csv(std::string_view csv, const std::string& run_id);

/// Shortest decimal that parses back to the same double.
std::string format_double(double value);

}  // namespace openchamber
