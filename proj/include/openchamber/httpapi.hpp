#pragma once

#include <exception>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>

#include "openchamber/controlloop.hpp"
#include "openchamber/datastore.hpp"

namespace openchamber {

struct ApiOptions {
  std::string bearer_token;  // empty: no authentication
  std::string cors_origin = "*";
  std::filesystem::path ui_dir;  // served under /ui when set
};

/// Body of every error response: {"error": {status, code, message, index?}}.
struct ApiError {
  int status = 500;
  std::string code;
  std::string message;
  std::optional<std::size_t> index;

  Json to_json() const;
};

/// Maps a typed module exception onto its HTTP status and code name.
ApiError api_error_from(std::exception_ptr error);

/// The OpenAPI description shipped with the server (docs/openapi.yaml).
extern const char* const kOpenApiDocument;

/// Operator REST API over a running ControlLoop and its store.
class ApiServer {
 public:
  ApiServer(ControlLoop& loop, Datastore& store, ApiOptions options);
  ~ApiServer();
  ApiServer(const ApiServer&) = delete;
  ApiServer& operator=(const ApiServer&) = delete;

  /// Binds (port 0 picks a free port) and serves on a background thread.
  /// Returns the bound port. Throws SyncError(BindFailure).
  int start(const std::string& host, int port);
  /// Serves on the calling thread until stop().
  void run(const std::string& host, int port, const std::function<void(int)>& on_bound = {});
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace openchamber
