#include "openchamber/telemetry.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>
#include <tuple>

namespace openchamber {

std::string_view name_of(Stream s) { return s == Stream::measured ? "measured" : "desired"; }

std::optional<Stream> stream_from_name(std::string_view name) {
  if (name == "measured") return Stream::measured;
  if (name == "desired") return Stream::desired;
  return std::nullopt;
}

bool DataPoint::has_value() const { return !std::isnan(value); }

bool same_point(const DataPoint& a, const DataPoint& b) {
  bool values_equal = (a.value == b.value) || (std::isnan(a.value) && std::isnan(b.value));
  return values_equal && a.timestamp == b.timestamp && a.variable == b.variable && a.stream == b.stream &&
         a.run_id == b.run_id;
}

bool matches(StreamFilter filter, Stream s) {
  switch (filter) {
    case StreamFilter::all: return true;
    case StreamFilter::measured: return s == Stream::measured;
    case StreamFilter::desired: return s == Stream::desired;
  }
  return false;
}

std::string format_double(double value) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, value);
  return std::string(buf, end);
}

namespace {

void append_field(std::string& out, std::string_view field) {
  if (field.find_first_of(",\"\r\n") == std::string_view::npos) {
    out += field;
    return;
  }
  out += '"';
  for (char c : field) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
}

// Splits one CSV record starting at pos; advances pos past the record's LF.
std::vector<std::string> read_record(std::string_view csv, std::size_t& pos, std::size_t line) {
  std::vector<std::string> fields;
  std::string field;
  bool quoted = false;
  bool field_started_quoted = false;
  while (pos < csv.size()) {
    char c = csv[pos++];
    if (quoted) {
      if (c == '"') {
        if (pos < csv.size() && csv[pos] == '"') {
          field += '"';
          ++pos;
        } else {
          quoted = false;
        }
      } else {
        field += c;
      }
      continue;
    }
    if (c == '"' && field.empty() && !field_started_quoted) {
      quoted = field_started_quoted = true;
    } else if (c == ',') {
      fields.push_back(std::move(field));
      field.clear();
      field_started_quoted = false;
    } else if (c == '\n') {
      fields.push_back(std::move(field));
      return fields;
    } else if (c == '\r' && pos < csv.size() && csv[pos] == '\n') {
      // tolerated on input; exports always use LF
    } else {
      field += c;
    }
  }
  if (quoted) throw CsvError(line, "unterminated quoted field");
  fields.push_back(std::move(field));
  return fields;
}

}  // namespace

std::string to_csv(std::vector<DataPoint> points, StreamFilter filter) {
  std::erase_if(points, [&](const DataPoint& p) { return !matches(filter, p.stream); });
  std::sort(points.begin(), points.end(), [](const DataPoint& a, const DataPoint& b) {
    return std::tuple(a.timestamp, name_of(a.variable), name_of(a.stream)) <
           std::tuple(b.timestamp, name_of(b.variable), name_of(b.stream));
  });
  std::string out = "timestamp,variable,value,stream\n";
  out.reserve(out.size() + points.size() * 40);
  for (const auto& p : points) {
    append_field(out, std::to_string(p.timestamp));
    out += ',';
    append_field(out, name_of(p.variable));
    out += ',';
    if (p.has_value()) append_field(out, format_double(p.value));
    out += ',';
    append_field(out, name_of(p.stream));
    out += '\n';
  }
  return out;
}

std::vector<DataPoint> from_csv(std::string_view csv, const std::string& run_id) {
  std::size_t pos = 0;
  std::size_t line = 1;
  auto header = read_record(csv, pos, line);
  if (header != std::vector<std::string>{"timestamp", "variable", "value", "stream"})
    throw CsvError(line, "unexpected header");
  std::vector<DataPoint> points;
  while (pos < csv.size()) {
    ++line;
    auto fields = read_record(csv, pos, line);
    if (fields.size() != 4) throw CsvError(line, "expected 4 fields");
    DataPoint p;
    p.run_id = run_id;
    const auto& ts = fields[0];
    auto [tend, tec] = std::from_chars(ts.data(), ts.data() + ts.size(), p.timestamp);
    if (tec != std::errc{} || tend != ts.data() + ts.size()) throw CsvError(line, "bad timestamp");
    auto variable = variable_from_name(fields[1]);
    if (!variable) throw CsvError(line, "unknown variable " + fields[1]);
    p.variable = *variable;
    const auto& vs = fields[2];
    if (vs.empty()) {
      p.value = std::numeric_limits<double>::quiet_NaN();
    } else {
      auto [vend, vec] = std::from_chars(vs.data(), vs.data() + vs.size(), p.value);
      if (vec != std::errc{} || vend != vs.data() + vs.size()) throw CsvError(line, "bad value");
    }
    auto stream = stream_from_name(fields[3]);
    if (!stream) throw CsvError(line, "unknown stream " + fields[3]);
    p.stream = *stream;
    points.push_back(std::move(p));
  }
  return points;
}

}  // namespace openchamber
