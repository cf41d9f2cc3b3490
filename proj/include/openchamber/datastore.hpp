#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <shared_mutex>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "openchamber/telemetry.hpp"

namespace openchamber {

using Json = nlohmann::json;
using Revision = std::int64_t;
using Sequence = std::int64_t;

enum class DocumentKind : std::uint8_t { recipe, datapoint_batch, run_meta };
inline constexpr std::size_t kDocumentKindCount = 3;

std::string_view name_of(DocumentKind k);
std::optional<DocumentKind> document_kind_from_name(std::string_view name);

/// Set of document kinds used to filter changes feeds.
class KindFilter {
 public:
  constexpr KindFilter() = default;
  constexpr KindFilter(std::initializer_list<DocumentKind> kinds) {
    for (auto k : kinds) bits_ |= bit(k);
  }
  static constexpr KindFilter all() {
    KindFilter f;
    f.bits_ = (1u << kDocumentKindCount) - 1;
    return f;
  }
  /// "all", or a comma-separated list of kind names.
  static std::optional<KindFilter> parse(std::string_view text);

  constexpr bool contains(DocumentKind k) const { return (bits_ & bit(k)) != 0; }
  constexpr bool is_all() const { return bits_ == all().bits_; }
  std::string to_string() const;

  friend constexpr bool operator==(KindFilter, KindFilter) = default;

 private:
  static constexpr unsigned bit(DocumentKind k) { return 1u << static_cast<unsigned>(k); }
  unsigned bits_ = 0;
};

struct Document {
  std::string id;
  Revision revision = 0;
  DocumentKind kind = DocumentKind::recipe;
  Json body;
  bool deleted = false;
  /// Empty for documents written locally; otherwise the peer the document
  /// was replicated from.
  std::string origin;

  friend bool operator==(const Document&, const Document&) = default;
};

struct Change {
  Sequence sequence = 0;
  std::string id;
  Revision revision = 0;
  DocumentKind kind = DocumentKind::recipe;
  bool deleted = false;
  std::string origin;

  friend bool operator==(const Change&, const Change&) = default;
};

enum class StoreErrorCode { RevisionConflict, StorageFull, UnknownRun, InvalidDocument, Corrupt, Io };
std::string_view to_string(StoreErrorCode code);

class StoreError : public std::runtime_error {
 public:
  StoreError(StoreErrorCode code, const std::string& message) : std::runtime_error(message), code_(code) {}
  StoreErrorCode code() const noexcept { return code_; }

 private:
  StoreErrorCode code_;
};

enum class ReplicaOutcome { applied, duplicate };
enum class ReplicaPolicy {
  newer_only,  // skip unless the incoming revision is newer
  replace,     // overwrite whatever is stored under the id
};

/// Append-only document store with a gapless changes feed. Backed by a
/// single log file when a path is given, otherwise memory only. One writer
/// at a time; readers see committed state.
class Datastore {
 public:
  struct Options {
    std::filesystem::path path;   // empty: in-memory
    bool sync_writes = true;      // fdatasync before put() returns
    std::size_t max_documents = 0;  // 0: unlimited
    std::uintmax_t max_bytes = 0;   // log size cap; 0: unlimited
  };

  static constexpr std::uint8_t kFormatVersion = 1;

  Datastore();
  explicit Datastore(Options options);
  ~Datastore();
  Datastore(const Datastore&) = delete;
  Datastore& operator=(const Datastore&) = delete;

  /// Local write. The stored revision is the current revision + 1.
  /// `expected` must equal the current revision (nullopt or 0 when creating).
  Revision put(const Document& doc, std::optional<Revision> expected = std::nullopt);

  /// Stores a replicated document at its own revision. Under newer_only an
  /// equal or newer stored revision makes this a no-op.
  ReplicaOutcome put_replica(const Document& doc, ReplicaPolicy policy = ReplicaPolicy::newer_only);

  std::optional<Document> get(const std::string& id) const;
  std::vector<Document> documents(KindFilter filter = KindFilter::all()) const;
  std::size_t document_count() const;

  /// Entries with sequence > since whose kind is in the filter, in order.
  /// limit 0 means unlimited.
  std::vector<Change> changes_since(Sequence since, KindFilter filter = KindFilter::all(),
                                    std::size_t limit = 0) const;
  Sequence last_sequence() const;

  /// Non-replicated metadata (checkpoints). Never appears in the feed.
  void set_local(const std::string& key, const Json& value);
  std::optional<Json> get_local(const std::string& key) const;

  /// run_meta and datapoint_batch documents for a run key ("run" or
  /// "peer/run"), read under one snapshot.
  std::vector<Document> run_documents(const std::string& run_key) const;
  /// Run keys that have a run_meta document.
  std::vector<std::string> runs() const;

  /// Rewrites the log dropping bodies of superseded revisions. The feed
  /// keeps every entry.
  void compact();

  const Options& options() const noexcept { return options_; }

 private:
  void apply(Document doc, Sequence seq);
  Json record_for(const Document& doc, Sequence seq) const;
  void append_record(const Json& record);
  void recover();
  void replay(const Json& record);
  void check_capacity(bool new_document, std::size_t record_bytes) const;
  Sequence commit(Document doc);

  Options options_;
  mutable std::shared_mutex mutex_;
  std::unordered_map<std::string, Document> docs_;
  std::vector<Change> feed_;
  std::map<std::string, Json> locals_;
  std::map<std::string, std::set<std::string>> run_index_;
  int fd_ = -1;
  std::uintmax_t file_bytes_ = 0;
};

/// Key that groups a run's documents: run id, namespaced by origin peer.
std::string run_key(const Document& doc);

std::string run_meta_id(const std::string& run_id);

/// First "<prefix>-NNNN" with no run_meta document in the store.
std::string unused_run_id(const Datastore& store, std::string_view prefix);

struct RunMeta {
  std::string run_id;
  std::string recipe_id;
  Seconds period = 10;
  std::string time_base = "simulated";
  std::int64_t start_wall_time = 0;
  std::string phase = "running";
  Seconds ticks = 0;
};

Json to_json(const RunMeta& meta);
RunMeta run_meta_from_json(const Json& body);

/// Groups tick-sized slices of DataPoints into datapoint_batch documents of
/// at most kMaxPoints points without splitting a tick.
class TelemetryWriter {
 public:
  static constexpr std::size_t kMaxPoints = 1000;

  TelemetryWriter(Datastore& store, std::string run_id);

  void append_tick(std::span<const DataPoint> tick);
  void flush();

  /// Points not yet written to the store.
  const std::vector<DataPoint>& pending() const noexcept { return pending_; }
  std::size_t batches_written() const noexcept { return batches_; }

 private:
  Datastore& store_;
  std::string run_id_;
  std::vector<DataPoint> pending_;
  std::size_t batches_ = 0;
};

/// Writes a run's metadata document (creating or updating it).
void put_run_meta(Datastore& store, const RunMeta& meta);

/// Writes the run meta plus all points, batched per tick.
void store_run(Datastore& store, const RunMeta& meta, std::span<const DataPoint> points,
               std::size_t points_per_tick = 2 * kVariableCount);

std::vector<DataPoint> run_points(const Datastore& store, const std::string& run_key);

/// Canonical CSV for a stored run. Throws StoreError(UnknownRun).
std::string export_csv(const Datastore& store, const std::string& run_key,
                       StreamFilter filter = StreamFilter::all);

}  // namespace openchamber
