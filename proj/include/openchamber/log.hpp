#pragma once

#include <string_view>

#include <json.hpp>

namespace openchamber {

/// Writes one JSON object per line to standard error:
/// {"ts": <unix seconds>, "level": ..., "msg": ..., <fields>}.
void log_event(std::string_view level, std::string_view message,
               const nlohmann::json& fields = nlohmann::json::object());

}  // namespace openchamber
