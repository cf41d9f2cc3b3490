#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>

#include "openchamber/control.hpp"
#include "openchamber/datastore.hpp"
#include "openchamber/simchamber.hpp"

namespace openchamber {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Everything a process reads from its configuration file. See
/// docs/configuration.md for the key reference.
struct AppConfig {
  std::string preset = "default_desktop";
  Scenario scenario = scenario_preset("default_desktop");
  ControllerConfig controller = ControllerConfig::defaults();
  std::uint64_t seed = 0;

  std::filesystem::path store_path;
  std::string api_token;
  std::string cors_origin = "*";
  std::filesystem::path ui_dir;

  std::string peer_id = "pfc";
  std::string server_url;
  std::string sync_token;
  KindFilter pull_filter{DocumentKind::recipe};
  Seconds sync_interval = 0;  // serve: seconds between background syncs; 0 disables
};

/// Parses `key = value` lines (`#` comments, optional `[section]` prefixes).
/// The preset key (or `preset_override` when non-empty) is applied first,
/// then every override in file order. Unknown keys and malformed values
/// throw ConfigError.
AppConfig parse_config(std::istream& in, const std::string& preset_override = {});
AppConfig load_config(const std::filesystem::path& path, const std::string& preset_override = {});

/// Config path from an explicit flag, else $OPENCHAMBER_CONFIG, else empty.
std::filesystem::path resolve_config_path(const std::string& flag_value);

Json to_json(const ControllerConfig& config);
/// Applies the fields present in `patch` on top of `base` and validates the
/// result. Throws ConfigError.
ControllerConfig merge_controller_config(const ControllerConfig& base, const Json& patch);

}  // namespace openchamber
