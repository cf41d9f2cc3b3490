#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <stdexcept>
#include <string>
#include <vector>

#include "openchamber/datastore.hpp"

namespace openchamber {

inline constexpr int kSyncProtocolVersion = 1;
inline constexpr std::size_t kSyncBatchSize = 100;
inline constexpr const char* kSyncVersionHeader = "X-Sync-Version";

enum class SyncErrorCode {
  NetworkUnavailable,
  ProtocolVersionMismatch,
  ChecksumMismatch,
  Unauthorized,
  BadRequest,
  BindFailure,
  ServerError,
};

std::string_view to_string(SyncErrorCode code);

class SyncError : public std::runtime_error {
 public:
  SyncError(SyncErrorCode code, const std::string& message) : std::runtime_error(message), code_(code) {}
  SyncErrorCode code() const noexcept { return code_; }

 private:
  SyncErrorCode code_;
};

/// Transport-neutral request/response pair; header names are matched
/// case-insensitively by the server.
struct WireRequest {
  std::string method;
  std::string path;
  std::map<std::string, std::string> query;
  std::map<std::string, std::string> headers;
  std::string body;
};

struct WireResponse {
  int status = 200;
  std::string body;
};

class Transport {
 public:
  virtual ~Transport() = default;
  /// Throws SyncError(NetworkUnavailable) when the server cannot be reached
  /// or the exchange is cut off.
  virtual WireResponse send(const WireRequest& request) = 0;
};

/// Peer ids: 1-128 characters, no '/', not the reserved "server".
bool valid_peer(const std::string& peer);

/// CRC-32 over the canonical (sorted-key) JSON text of a batch.
std::uint32_t batch_checksum(const Json& docs);

enum class SyncDirection { push, pull };
std::string_view name_of(SyncDirection d);

struct ReplicationCheckpoint {
  std::string peer;
  SyncDirection direction = SyncDirection::push;
  Sequence last_acknowledged_sequence = 0;
};

/// Server side of the replication protocol: a "Server DB" that accepts
/// every client's pushes under "<peer>/<id>" and serves filtered changes.
class SyncServer {
 public:
  explicit SyncServer(Datastore& store, std::string bearer_token = {});

  /// Handles GET /health, POST /replicate/push, GET /replicate/changes and
  /// POST /replicate/checkpoint.
  WireResponse handle(const WireRequest& request);

  Sequence checkpoint(const std::string& peer, SyncDirection direction) const;
  Datastore& store() noexcept { return store_; }

 private:
  WireResponse push(const Json& body);
  WireResponse changes(const WireRequest& request);
  WireResponse record_checkpoint(const Json& body);
  std::mutex& peer_mutex(const std::string& peer);

  Datastore& store_;
  std::string token_;
  mutable std::mutex checkpoints_mutex_;
  std::map<std::pair<std::string, SyncDirection>, Sequence> checkpoints_;
  std::mutex peers_mutex_;
  std::map<std::string, std::unique_ptr<std::mutex>> peer_mutexes_;
};

/// Calls a SyncServer in-process, through the same JSON encoding as HTTP.
class LocalTransport : public Transport {
 public:
  explicit LocalTransport(SyncServer& server) : server_(server) {}
  WireResponse send(const WireRequest& request) override { return server_.handle(request); }

 private:
  SyncServer& server_;
};

/// HTTP client transport for a server base URL such as "http://host:port".
class HttpTransport : public Transport {
 public:
  explicit HttpTransport(std::string base_url, int timeout_seconds = 10);
  ~HttpTransport() override;
  WireResponse send(const WireRequest& request) override;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

/// Serves a SyncServer over HTTP on a background thread.
class SyncHttpServer {
 public:
  explicit SyncHttpServer(SyncServer& server);
  ~SyncHttpServer();

  /// Binds host:port (port 0 picks a free port) and starts serving.
  /// Throws SyncError(BindFailure).
  int start(const std::string& host, int port);
  /// Blocks serving on the calling thread until stop().
  void run(const std::string& host, int port, const std::function<void(int)>& on_bound = {});
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

struct SyncConflict {
  std::string id;
  Revision client_revision = 0;
  Revision server_revision = 0;
  std::string preserved_as;
};

struct SyncReport {
  std::size_t pushed = 0;
  std::size_t pulled = 0;
  Sequence push_checkpoint = 0;
  Sequence pull_checkpoint = 0;
  std::vector<SyncConflict> conflicts;
};

/// Client side: uploads every locally written document, downloads only
/// server changes whose kind matches the pull filter. Checkpoints live in
/// the client store's local metadata and advance only after the server
/// acknowledges a batch.
class SyncClient {
 public:
  /// Origin recorded on documents pulled from the server.
  static constexpr const char* kServerOrigin = "server";

  SyncClient(Datastore& store, Transport& transport, std::string peer_id,
             KindFilter pull_filter = KindFilter{DocumentKind::recipe}, std::string bearer_token = {});

  SyncReport sync();

  ReplicationCheckpoint checkpoint(SyncDirection direction) const;

 private:
  WireResponse call(WireRequest request);
  void push_phase(SyncReport& report);
  void pull_phase(SyncReport& report);
  void apply_pulled(const Json& result, SyncReport& report);

  Datastore& store_;
  Transport& transport_;
  std::string peer_;
  KindFilter pull_filter_;
  std::string token_;
  std::mutex sync_mutex_;
};

}  // namespace openchamber
