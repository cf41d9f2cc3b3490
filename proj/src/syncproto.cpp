#include "openchamber/syncproto.hpp"

#include <zlib.h>

#include <algorithm>
#include <cctype>
#include <charconv>

namespace openchamber {

std::string_view to_string(SyncErrorCode code) {
  switch (code) {
    case SyncErrorCode::NetworkUnavailable: return "NetworkUnavailable";
    case SyncErrorCode::ProtocolVersionMismatch: return "ProtocolVersionMismatch";
    case SyncErrorCode::ChecksumMismatch: return "ChecksumMismatch";
    case SyncErrorCode::Unauthorized: return "Unauthorized";
    case SyncErrorCode::BadRequest: return "BadRequest";
    case SyncErrorCode::BindFailure: return "BindFailure";
    case SyncErrorCode::ServerError: return "ServerError";
  }
  return "ServerError";
}

std::string_view name_of(SyncDirection d) { return d == SyncDirection::push ? "push" : "pull"; }

std::uint32_t batch_checksum(const Json& docs) {
  std::string text = docs.dump();
  return static_cast<std::uint32_t>(
      ::crc32(0L, reinterpret_cast<const Bytef*>(text.data()), static_cast<uInt>(text.size())));
}

namespace {

constexpr int kChecksumAttempts = 3;

WireResponse json_response(int status, const Json& body) { return {status, body.dump()}; }

WireResponse error_response(int status, std::string_view code, const std::string& message) {
  return json_response(status, Json{{"error", {{"code", code}, {"message", message}}}});
}

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  return s;
}

std::optional<std::string> header(const WireRequest& r, const std::string& name) {
  auto wanted = lower(name);
  for (const auto& [k, v] : r.headers)
    if (lower(k) == wanted) return v;
  return std::nullopt;
}

std::optional<std::int64_t> to_int(const std::string& text) {
  std::int64_t v = 0;
  auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc{} || end != text.data() + text.size()) return std::nullopt;
  return v;
}

std::optional<SyncDirection> direction_from_name(std::string_view s) {
  if (s == "push") return SyncDirection::push;
  if (s == "pull") return SyncDirection::pull;
  return std::nullopt;
}

Json wire_document(const Document& doc) {
  return Json{{"id", doc.id},
              {"rev", doc.revision},
              {"kind", name_of(doc.kind)},
              {"deleted", doc.deleted},
              {"body", doc.body}};
}

// Throws nlohmann exceptions on shape errors; callers map them to BadRequest.
Document document_from_wire(const Json& j) {
  Document doc;
  doc.id = j.at("id").get<std::string>();
  doc.revision = j.at("rev").get<Revision>();
  auto kind = document_kind_from_name(j.at("kind").get<std::string>());
  if (!kind || doc.id.empty() || doc.revision < 1) throw std::invalid_argument("bad document");
  doc.kind = *kind;
  doc.deleted = j.at("deleted").get<bool>();
  doc.body = j.at("body");
  return doc;
}

}  // namespace

bool valid_peer(const std::string& peer) {
  return !peer.empty() && peer.size() <= 128 && peer.find('/') == std::string::npos && peer != SyncClient::kServerOrigin;
}

// ---------------------------------------------------------------- server

SyncServer::SyncServer(Datastore& store, std::string bearer_token)
    : store_(store), token_(std::move(bearer_token)) {}

std::mutex& SyncServer::peer_mutex(const std::string& peer) {
  std::lock_guard lock(peers_mutex_);
  auto& slot = peer_mutexes_[peer];
  if (!slot) slot = std::make_unique<std::mutex>();
  return *slot;
}

Sequence SyncServer::checkpoint(const std::string& peer, SyncDirection direction) const {
  std::lock_guard lock(checkpoints_mutex_);
  auto it = checkpoints_.find({peer, direction});
  return it == checkpoints_.end() ? 0 : it->second;
}

WireResponse SyncServer::handle(const WireRequest& request) {
  if (request.method == "GET" && request.path == "/health")
    return json_response(200, Json{{"status", "ok"},
                                   {"protocol", kSyncProtocolVersion},
                                   {"last_seq", store_.last_sequence()}});

  if (!token_.empty() && header(request, "Authorization") != "Bearer " + token_)
    return error_response(401, "Unauthorized", "missing or wrong bearer token");
  auto version = header(request, kSyncVersionHeader);
  if (version != std::to_string(kSyncProtocolVersion))
    return error_response(400, "ProtocolVersionMismatch",
                          "expected " + std::string(kSyncVersionHeader) + ": " +
                              std::to_string(kSyncProtocolVersion));

  try {
    if (request.method == "POST" && request.path == "/replicate/push")
      return push(Json::parse(request.body));
    if (request.method == "GET" && request.path == "/replicate/changes") return changes(request);
    if (request.method == "POST" && request.path == "/replicate/checkpoint")
      return record_checkpoint(Json::parse(request.body));
  } catch (const Json::exception& e) {
    return error_response(400, "BadRequest", e.what());
  } catch (const std::invalid_argument& e) {
    return error_response(400, "BadRequest", e.what());
  } catch (const StoreError& e) {
    if (e.code() == StoreErrorCode::StorageFull) return error_response(507, "StorageFull", e.what());
    return error_response(500, to_string(e.code()), e.what());
  }
  return error_response(404, "NotFound", request.method + " " + request.path);
}

WireResponse SyncServer::push(const Json& body) {
  const auto peer = body.at("peer").get<std::string>();
  if (!valid_peer(peer)) throw std::invalid_argument("invalid peer id");
  const Json& docs = body.at("docs");
  if (!docs.is_array()) throw std::invalid_argument("docs must be an array");
  const auto last_seq = body.at("last_seq").get<Sequence>();
  if (body.at("count").get<std::size_t>() != docs.size() ||
      body.at("checksum").get<std::uint32_t>() != batch_checksum(docs))
    return error_response(422, "ChecksumMismatch", "batch failed its length or checksum check");

  std::vector<Document> incoming;
  incoming.reserve(docs.size());
  for (const auto& j : docs) {
    Document doc = document_from_wire(j);
    doc.id = peer + "/" + doc.id;
    doc.origin = peer;
    incoming.push_back(std::move(doc));
  }

  std::lock_guard lock(peer_mutex(peer));
  std::size_t applied = 0;
  for (const auto& doc : incoming)
    if (store_.put_replica(doc) == ReplicaOutcome::applied) ++applied;

  Sequence recorded = 0;
  {
    std::lock_guard cp_lock(checkpoints_mutex_);
    auto& cp = checkpoints_[{peer, SyncDirection::push}];
    cp = std::max(cp, last_seq);
    recorded = cp;
  }
  return json_response(200, Json{{"applied", applied},
                                 {"duplicates", incoming.size() - applied},
                                 {"checkpoint", recorded}});
}

WireResponse SyncServer::changes(const WireRequest& request) {
  auto param = [&](const std::string& key) -> std::optional<std::string> {
    auto it = request.query.find(key);
    if (it == request.query.end()) return std::nullopt;
    return it->second;
  };
  Sequence since = 0;
  if (auto s = param("since")) {
    auto v = to_int(*s);
    if (!v || *v < 0) return error_response(400, "BadRequest", "since must be a non-negative integer");
    since = *v;
  }
  KindFilter filter = KindFilter::all();
  if (auto f = param("filter")) {
    auto parsed = KindFilter::parse(*f);
    if (!parsed) return error_response(400, "BadRequest", "unknown filter " + *f);
    filter = *parsed;
  }
  std::size_t limit = kSyncBatchSize;
  if (auto l = param("limit")) {
    auto v = to_int(*l);
    if (!v || *v < 1 || *v > 1000) return error_response(400, "BadRequest", "limit must be in [1, 1000]");
    limit = static_cast<std::size_t>(*v);
  }
  const std::string peer = param("peer").value_or("");

  // Entries committed after this point are left for the next request.
  const Sequence head = store_.last_sequence();
  Json results = Json::array();
  Sequence last_seq = std::max(since, head);
  bool pending = false;
  for (const auto& change : store_.changes_since(since, filter)) {
    if (change.sequence > head) break;
    if (!peer.empty() && change.origin == peer) continue;
    if (results.size() == limit) {
      pending = true;
      break;
    }
    auto doc = store_.get(change.id);
    if (!doc) continue;
    Json entry = wire_document(*doc);
    entry["seq"] = change.sequence;
    entry["origin"] = doc->origin;
    results.push_back(std::move(entry));
    last_seq = change.sequence;
  }
  if (!pending) last_seq = std::max(since, head);
  auto checksum = batch_checksum(results);
  return json_response(200, Json{{"results", std::move(results)},
                                 {"last_seq", last_seq},
                                 {"pending", pending},
                                 {"checksum", checksum}});
}

WireResponse SyncServer::record_checkpoint(const Json& body) {
  const auto peer = body.at("peer").get<std::string>();
  if (!valid_peer(peer)) throw std::invalid_argument("invalid peer id");
  auto direction = direction_from_name(body.at("direction").get<std::string>());
  if (!direction) throw std::invalid_argument("direction must be push or pull");
  Sequence value = 0;
  {
    std::lock_guard lock(checkpoints_mutex_);
    auto& cp = checkpoints_[{peer, *direction}];
    if (body.contains("seq")) cp = std::max(cp, body.at("seq").get<Sequence>());
    value = cp;
  }
  return json_response(200, Json{{"peer", peer}, {"direction", name_of(*direction)}, {"seq", value}});
}

// ---------------------------------------------------------------- client

namespace {

std::string checkpoint_key(const std::string& peer, SyncDirection d) {
  return "sync/" + peer + "/" + std::string(name_of(d));
}

SyncErrorCode code_from_wire(int status, std::string_view code) {
  if (code == "ProtocolVersionMismatch") return SyncErrorCode::ProtocolVersionMismatch;
  if (code == "ChecksumMismatch") return SyncErrorCode::ChecksumMismatch;
  if (code == "Unauthorized" || status == 401) return SyncErrorCode::Unauthorized;
  if (status >= 400 && status < 500) return SyncErrorCode::BadRequest;
  return SyncErrorCode::ServerError;
}

}  // namespace

SyncClient::SyncClient(Datastore& store, Transport& transport, std::string peer_id, KindFilter pull_filter,
                       std::string bearer_token)
    : store_(store),
      transport_(transport),
      peer_(std::move(peer_id)),
      pull_filter_(pull_filter),
      token_(std::move(bearer_token)) {
  if (!valid_peer(peer_)) throw SyncError(SyncErrorCode::BadRequest, "invalid peer id \"" + peer_ + "\"");
}

ReplicationCheckpoint SyncClient::checkpoint(SyncDirection direction) const {
  auto stored = store_.get_local(checkpoint_key(peer_, direction));
  return {peer_, direction, stored ? stored->at("seq").get<Sequence>() : 0};
}

WireResponse SyncClient::call(WireRequest request) {
  request.headers[kSyncVersionHeader] = std::to_string(kSyncProtocolVersion);
  if (!token_.empty()) request.headers["Authorization"] = "Bearer " + token_;
  WireResponse response = transport_.send(request);
  if (response.status >= 200 && response.status < 300) return response;
  Json body = Json::parse(response.body, nullptr, false);
  std::string code;
  std::string message = response.body;
  if (!body.is_discarded() && body.contains("error")) {
    code = body["error"].value("code", "");
    message = body["error"].value("message", "");
  }
  throw SyncError(code_from_wire(response.status, code),
                  request.method + " " + request.path + " failed (" + std::to_string(response.status) + "): " + message);
}

SyncReport SyncClient::sync() {
  std::lock_guard guard(sync_mutex_);
  WireResponse health = transport_.send({"GET", "/health", {}, {}, {}});
  Json h = Json::parse(health.body, nullptr, false);
  if (health.status != 200 || h.is_discarded() || !h.contains("protocol"))
    throw SyncError(SyncErrorCode::ServerError, "server health check failed");
  if (h["protocol"] != kSyncProtocolVersion)
    throw SyncError(SyncErrorCode::ProtocolVersionMismatch,
                    "server speaks protocol " + h["protocol"].dump() + ", client speaks " +
                        std::to_string(kSyncProtocolVersion));

  SyncReport report;
  push_phase(report);
  pull_phase(report);
  report.push_checkpoint = checkpoint(SyncDirection::push).last_acknowledged_sequence;
  report.pull_checkpoint = checkpoint(SyncDirection::pull).last_acknowledged_sequence;
  return report;
}

void SyncClient::push_phase(SyncReport& report) {
  Sequence cp = checkpoint(SyncDirection::push).last_acknowledged_sequence;
  const auto key = checkpoint_key(peer_, SyncDirection::push);
  for (;;) {
    auto changes = store_.changes_since(cp, KindFilter::all(), kSyncBatchSize);
    if (changes.empty()) break;
    Json docs = Json::array();
    for (const auto& change : changes) {
      auto doc = store_.get(change.id);
      // Pulled documents flow down only; superseded revisions are covered by
      // the later change for the same id.
      if (!doc || !doc->origin.empty() || doc->revision != change.revision) continue;
      docs.push_back(wire_document(*doc));
    }
    const Sequence last = changes.back().sequence;
    if (!docs.empty()) {
      Json body{{"peer", peer_},
                {"since", cp},
                {"last_seq", last},
                {"count", docs.size()},
                {"checksum", batch_checksum(docs)},
                {"docs", docs}};
      const std::string payload = body.dump();
      for (int attempt = 1;; ++attempt) {
        try {
          call({"POST", "/replicate/push", {}, {}, payload});
          break;
        } catch (const SyncError& e) {
          if (e.code() != SyncErrorCode::ChecksumMismatch || attempt == kChecksumAttempts) throw;
        }
      }
      report.pushed += docs.size();
    }
    cp = last;
    store_.set_local(key, Json{{"seq", cp}});
  }
}

void SyncClient::pull_phase(SyncReport& report) {
  Sequence cp = checkpoint(SyncDirection::pull).last_acknowledged_sequence;
  const Sequence start = cp;
  const auto key = checkpoint_key(peer_, SyncDirection::pull);
  for (bool pending = true; pending;) {
    WireRequest request{"GET",
                        "/replicate/changes",
                        {{"since", std::to_string(cp)},
                         {"filter", pull_filter_.to_string()},
                         {"peer", peer_},
                         {"limit", std::to_string(kSyncBatchSize)}},
                        {},
                        {}};
    Json page;
    for (int attempt = 1;; ++attempt) {
      page = Json::parse(call(request).body, nullptr, false);
      bool intact = !page.is_discarded() && page.contains("results") && page.contains("checksum") &&
                    page["checksum"] == batch_checksum(page["results"]);
      if (intact) break;
      if (attempt == kChecksumAttempts)
        throw SyncError(SyncErrorCode::ChecksumMismatch, "changes page failed its checksum check");
    }
    for (const auto& result : page["results"]) apply_pulled(result, report);
    Sequence last = page.at("last_seq").get<Sequence>();
    pending = page.value("pending", false);
    if (last > cp) {
      cp = last;
      store_.set_local(key, Json{{"seq", cp}});
    }
  }
  if (cp != start)
    call({"POST", "/replicate/checkpoint", {}, {},
          Json{{"peer", peer_}, {"direction", "pull"}, {"seq", cp}}.dump()});
}

void SyncClient::apply_pulled(const Json& result, SyncReport& report) {
  Document incoming;
  try {
    incoming = document_from_wire(result);
  } catch (const std::exception& e) {
    throw SyncError(SyncErrorCode::ServerError, std::string("malformed document from server: ") + e.what());
  }
  if (!pull_filter_.contains(incoming.kind)) return;
  incoming.origin = kServerOrigin;

  auto existing = store_.get(incoming.id);
  if (existing && existing->origin.empty()) {
    bool same = existing->kind == incoming.kind && existing->body == incoming.body &&
                existing->deleted == incoming.deleted;
    if (!same) {
      // Server wins; the local copy survives under a conflict id.
      std::string preserved = incoming.id + "~conflict-" + std::to_string(existing->revision);
      for (int n = 2; store_.get(preserved); ++n)
        preserved = incoming.id + "~conflict-" + std::to_string(existing->revision) + "-" + std::to_string(n);
      Document copy = *existing;
      copy.id = preserved;
      store_.put(copy);
      report.conflicts.push_back({incoming.id, existing->revision, incoming.revision, preserved});
    }
    store_.put_replica(incoming, ReplicaPolicy::replace);
    ++report.pulled;
    return;
  }
  if (store_.put_replica(incoming) == ReplicaOutcome::applied) ++report.pulled;
}

}  // namespace openchamber
