#include "openchamber/log.hpp"

#include <chrono>
#include <cstdio>
#include <mutex>

namespace openchamber {

void log_event(std::string_view level, std::string_view message, const nlohmann::json& fields) {
  static std::mutex mutex;
  auto now = std::chrono::duration<double>(std::chrono::system_clock::now().time_since_epoch()).count();
  nlohmann::ordered_json line{{"ts", now}, {"level", level}, {"msg", message}};
  if (fields.is_object())
    for (auto it = fields.begin(); it != fields.end(); ++it) line[it.key()] = it.value();
  std::string text = line.dump(-1, ' ', false, nlohmann::ordered_json::error_handler_t::replace) + "\n";
  std::lock_guard lock(mutex);
  std::fwrite(text.data(), 1, text.size(), stderr);
  std::fflush(stderr);
}

}  // namespace openchamber
