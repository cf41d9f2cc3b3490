#include "openchamber/datastore.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <sys/stat.h>
#include <unistd.h>
#include <zlib.h>

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <limits>
#include <mutex>

namespace openchamber {

namespace {

constexpr char kMagic[7] = {'O', 'C', 'S', 'T', 'O', 'R', 'E'};
constexpr std::size_t kHeaderBytes = sizeof kMagic + 1;
constexpr std::size_t kRecordPrefix = 8;  // u32 length + u32 crc32, little endian

[[noreturn]] void io_error(const std::string& what) {
  throw StoreError(StoreErrorCode::Io, what + ": " + std::strerror(errno));
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out += static_cast<char>((v >> (8 * i)) & 0xff);
}

std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
         static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
}

std::uint32_t crc_of(std::string_view bytes) {
  return static_cast<std::uint32_t>(
      ::crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size())));
}

void write_all(int fd, std::string_view bytes) {
  while (!bytes.empty()) {
    ssize_t n = ::write(fd, bytes.data(), bytes.size());
    if (n < 0) {
      if (errno == EINTR) continue;
      io_error("write");
    }
    bytes.remove_prefix(static_cast<std::size_t>(n));
  }
}

std::string frame(const Json& record) {
  std::string payload = record.dump();
  std::string out;
  out.reserve(payload.size() + kRecordPrefix);
  put_u32(out, static_cast<std::uint32_t>(payload.size()));
  put_u32(out, crc_of(payload));
  out += payload;
  return out;
}

std::string header_bytes() {
  std::string h(kMagic, sizeof kMagic);
  h += static_cast<char>(Datastore::kFormatVersion);
  return h;
}

}  // namespace

std::string_view name_of(DocumentKind k) {
  switch (k) {
    case DocumentKind::recipe: return "recipe";
    case DocumentKind::datapoint_batch: return "datapoint_batch";
    case DocumentKind::run_meta: return "run_meta";
  }
  return "recipe";
}

std::optional<DocumentKind> document_kind_from_name(std::string_view name) {
  for (auto k : {DocumentKind::recipe, DocumentKind::datapoint_batch, DocumentKind::run_meta})
    if (name_of(k) == name) return k;
  return std::nullopt;
}

std::optional<KindFilter> KindFilter::parse(std::string_view text) {
  if (text == "all") return all();
  KindFilter f;
  while (!text.empty()) {
    auto comma = text.find(',');
    auto token = text.substr(0, comma);
    auto kind = document_kind_from_name(token);
    if (!kind) return std::nullopt;
    f.bits_ |= bit(*kind);
    if (comma == std::string_view::npos) break;
    text.remove_prefix(comma + 1);
  }
  if (f.bits_ == 0) return std::nullopt;
  return f;
}

std::string KindFilter::to_string() const {
  if (is_all()) return "all";
  std::string out;
  for (auto k : {DocumentKind::recipe, DocumentKind::datapoint_batch, DocumentKind::run_meta}) {
    if (!contains(k)) continue;
    if (!out.empty()) out += ',';
    out += name_of(k);
  }
  return out;
}

std::string_view to_string(StoreErrorCode code) {
  switch (code) {
    case StoreErrorCode::RevisionConflict: return "RevisionConflict";
    case StoreErrorCode::StorageFull: return "StorageFull";
    case StoreErrorCode::UnknownRun: return "UnknownRun";
    case StoreErrorCode::InvalidDocument: return "InvalidDocument";
    case StoreErrorCode::Corrupt: return "Corrupt";
    case StoreErrorCode::Io: return "Io";
  }
  return "Io";
}

std::string run_key(const Document& doc) {
  auto it = doc.body.find("run_id");
  if (it == doc.body.end() || !it->is_string()) return {};
  std::string key = it->get<std::string>();
  return doc.origin.empty() ? key : doc.origin + "/" + key;
}

std::string run_meta_id(const std::string& run_id) { return "run:" + run_id; }

std::string unused_run_id(const Datastore& store, std::string_view prefix) {
  for (std::size_t n = store.runs().size() + 1;; ++n) {
    char suffix[32];
    std::snprintf(suffix, sizeof suffix, "-%04zu", n);
    std::string id = std::string(prefix) + suffix;
    if (!store.get(run_meta_id(id))) return id;
  }
}

// ---------------------------------------------------------------- Datastore

Datastore::Datastore() : Datastore(Options{}) {}

Datastore::Datastore(Options options) : options_(std::move(options)) {
  if (options_.path.empty()) return;
  fd_ = ::open(options_.path.c_str(), O_RDWR | O_CREAT | O_CLOEXEC, 0644);
  if (fd_ < 0) io_error("open " + options_.path.string());
  try {
    if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
      if (errno == EWOULDBLOCK)
        throw StoreError(StoreErrorCode::Io, options_.path.string() + " is in use by another process");
      io_error("flock");
    }
    recover();
  } catch (...) {
    ::close(fd_);
    fd_ = -1;
    throw;
  }
}

Datastore::~Datastore() {
  if (fd_ >= 0) ::close(fd_);
}

void Datastore::recover() {
  struct stat st {};
  if (::fstat(fd_, &st) != 0) io_error("fstat");
  if (st.st_size == 0) {
    std::string h = header_bytes();
    write_all(fd_, h);
    if (::fdatasync(fd_) != 0) io_error("fdatasync");
    file_bytes_ = h.size();
    return;
  }
  std::string data(static_cast<std::size_t>(st.st_size), '\0');
  std::size_t got = 0;
  while (got < data.size()) {
    ssize_t n = ::pread(fd_, data.data() + got, data.size() - got, static_cast<off_t>(got));
    if (n < 0) {
      if (errno == EINTR) continue;
      io_error("read");
    }
    if (n == 0) break;
    got += static_cast<std::size_t>(n);
  }
  data.resize(got);
  if (data.size() < kHeaderBytes || data.compare(0, sizeof kMagic, kMagic, sizeof kMagic) != 0)
    throw StoreError(StoreErrorCode::Corrupt, options_.path.string() + " is not a store file");
  if (static_cast<std::uint8_t>(data[sizeof kMagic]) != kFormatVersion)
    throw StoreError(StoreErrorCode::Corrupt, "unsupported store format version");

  std::size_t pos = kHeaderBytes;
  while (pos + kRecordPrefix <= data.size()) {
    auto* p = reinterpret_cast<const unsigned char*>(data.data() + pos);
    std::uint32_t len = get_u32(p);
    std::uint32_t crc = get_u32(p + 4);
    if (pos + kRecordPrefix + len > data.size()) break;  // torn tail
    std::string_view payload(data.data() + pos + kRecordPrefix, len);
    if (crc_of(payload) != crc) break;
    Json record = Json::parse(payload, nullptr, false);
    if (record.is_discarded()) break;

    try {
      replay(record);
    } catch (const Json::exception& e) {
      throw StoreError(StoreErrorCode::Corrupt, std::string("malformed store record: ") + e.what());
    }
    pos += kRecordPrefix + len;
  }
  if (pos != data.size()) {
    // Drop a partially written record left by a crash.
    if (::ftruncate(fd_, static_cast<off_t>(pos)) != 0) io_error("ftruncate");
  }
  file_bytes_ = pos;
}

void Datastore::replay(const Json& record) {
  if (record.value("t", "") == "local") {
    locals_[record.at("key").get<std::string>()] = record.at("value");
  } else {
    Sequence seq = record.at("seq").get<Sequence>();
    if (seq != static_cast<Sequence>(feed_.size()) + 1)
      throw StoreError(StoreErrorCode::Corrupt, "sequence gap in store log");
    Document doc;
    doc.id = record.at("id").get<std::string>();
    doc.revision = record.at("rev").get<Revision>();
    auto kind = document_kind_from_name(record.at("kind").get<std::string>());
    if (!kind) throw StoreError(StoreErrorCode::Corrupt, "unknown document kind in store log");
    doc.kind = *kind;
    doc.deleted = record.value("deleted", false);
    doc.origin = record.value("origin", "");
    doc.body = record.at("body");
    apply(std::move(doc), seq);
  }
}

Json Datastore::record_for(const Document& doc, Sequence seq) const {
  return Json{{"t", "doc"},           {"seq", seq},         {"id", doc.id},
              {"rev", doc.revision},  {"kind", name_of(doc.kind)}, {"deleted", doc.deleted},
              {"origin", doc.origin}, {"body", doc.body}};
}

void Datastore::append_record(const Json& record) {
  std::string bytes = frame(record);
  if (fd_ >= 0) {
    if (::lseek(fd_, static_cast<off_t>(file_bytes_), SEEK_SET) < 0) io_error("lseek");
    write_all(fd_, bytes);
    if (options_.sync_writes && ::fdatasync(fd_) != 0) io_error("fdatasync");
  }
  file_bytes_ += bytes.size();
}

void Datastore::check_capacity(bool new_document, std::size_t record_bytes) const {
  if (new_document && options_.max_documents != 0 && docs_.size() >= options_.max_documents)
    throw StoreError(StoreErrorCode::StorageFull, "document limit reached");
  if (options_.max_bytes != 0 && file_bytes_ + record_bytes > options_.max_bytes)
    throw StoreError(StoreErrorCode::StorageFull, "store size limit reached");
}

void Datastore::apply(Document doc, Sequence seq) {
  feed_.push_back({seq, doc.id, doc.revision, doc.kind, doc.deleted, doc.origin});
  if (doc.kind == DocumentKind::datapoint_batch || doc.kind == DocumentKind::run_meta) {
    auto key = run_key(doc);
    if (!key.empty()) run_index_[key].insert(doc.id);
  }
  docs_.insert_or_assign(doc.id, std::move(doc));
}

Sequence Datastore::commit(Document doc) {
  Sequence seq = static_cast<Sequence>(feed_.size()) + 1;
  Json record = record_for(doc, seq);
  std::size_t bytes = record.dump().size() + kRecordPrefix;
  check_capacity(!docs_.contains(doc.id), bytes);
  append_record(record);
  apply(std::move(doc), seq);
  return seq;
}

Revision Datastore::put(const Document& doc, std::optional<Revision> expected) {
  if (doc.id.empty()) throw StoreError(StoreErrorCode::InvalidDocument, "document id must be non-empty");
  std::unique_lock lock(mutex_);
  auto it = docs_.find(doc.id);
  Revision current = it == docs_.end() ? 0 : it->second.revision;
  if (expected.value_or(0) != current)
    throw StoreError(StoreErrorCode::RevisionConflict,
                     "document " + doc.id + " is at revision " + std::to_string(current) + ", expected " +
                         std::to_string(expected.value_or(0)));
  Document stored = doc;
  stored.revision = current + 1;
  commit(std::move(stored));
  return current + 1;
}

ReplicaOutcome Datastore::put_replica(const Document& doc, ReplicaPolicy policy) {
  if (doc.id.empty() || doc.revision < 1)
    throw StoreError(StoreErrorCode::InvalidDocument, "replicated document needs an id and a revision >= 1");
  std::unique_lock lock(mutex_);
  auto it = docs_.find(doc.id);
  if (policy == ReplicaPolicy::newer_only && it != docs_.end() && it->second.revision >= doc.revision)
    return ReplicaOutcome::duplicate;
  commit(doc);
  return ReplicaOutcome::applied;
}

std::optional<Document> Datastore::get(const std::string& id) const {
  std::shared_lock lock(mutex_);
  auto it = docs_.find(id);
  if (it == docs_.end()) return std::nullopt;
  return it->second;
}

std::vector<Document> Datastore::documents(KindFilter filter) const {
  std::shared_lock lock(mutex_);
  std::vector<Document> out;
  for (const auto& [id, doc] : docs_)
    if (filter.contains(doc.kind)) out.push_back(doc);
  std::sort(out.begin(), out.end(), [](const Document& a, const Document& b) { return a.id < b.id; });
  return out;
}

std::size_t Datastore::document_count() const {
  std::shared_lock lock(mutex_);
  return docs_.size();
}

std::vector<Change> Datastore::changes_since(Sequence since, KindFilter filter, std::size_t limit) const {
  std::shared_lock lock(mutex_);
  std::vector<Change> out;
  // Sequences are gapless and start at 1, so entry i holds sequence i + 1.
  auto start = static_cast<std::size_t>(std::clamp<Sequence>(since, 0, static_cast<Sequence>(feed_.size())));
  for (std::size_t i = start; i < feed_.size(); ++i) {
    if (!filter.contains(feed_[i].kind)) continue;
    out.push_back(feed_[i]);
    if (limit != 0 && out.size() == limit) break;
  }
  return out;
}

Sequence Datastore::last_sequence() const {
  std::shared_lock lock(mutex_);
  return static_cast<Sequence>(feed_.size());
}

void Datastore::set_local(const std::string& key, const Json& value) {
  std::unique_lock lock(mutex_);
  Json record{{"t", "local"}, {"key", key}, {"value", value}};
  check_capacity(false, record.dump().size() + kRecordPrefix);
  append_record(record);
  locals_[key] = value;
}

std::optional<Json> Datastore::get_local(const std::string& key) const {
  std::shared_lock lock(mutex_);
  auto it = locals_.find(key);
  if (it == locals_.end()) return std::nullopt;
  return it->second;
}

std::vector<Document> Datastore::run_documents(const std::string& key) const {
  std::shared_lock lock(mutex_);
  std::vector<Document> out;
  auto it = run_index_.find(key);
  if (it == run_index_.end()) return out;
  for (const auto& id : it->second) {
    auto doc = docs_.find(id);
    if (doc != docs_.end() && !doc->second.deleted) out.push_back(doc->second);
  }
  return out;
}

std::vector<std::string> Datastore::runs() const {
  std::shared_lock lock(mutex_);
  std::vector<std::string> out;
  for (const auto& [key, ids] : run_index_) {
    bool has_meta = std::any_of(ids.begin(), ids.end(), [&](const std::string& id) {
      auto doc = docs_.find(id);
      return doc != docs_.end() && doc->second.kind == DocumentKind::run_meta;
    });
    if (has_meta) out.push_back(key);
  }
  return out;
}

void Datastore::compact() {
  std::unique_lock lock(mutex_);
  if (fd_ < 0) return;
  std::filesystem::path tmp = options_.path;
  tmp += ".compact";
  int out = ::open(tmp.c_str(), O_RDWR | O_CREAT | O_TRUNC | O_CLOEXEC, 0644);
  if (out < 0) io_error("open " + tmp.string());
  if (::flock(out, LOCK_EX | LOCK_NB) != 0) {
    ::close(out);
    io_error("flock " + tmp.string());
  }
  std::string bytes = header_bytes();
  for (const auto& change : feed_) {
    const Document& latest = docs_.at(change.id);
    Document doc{change.id, change.revision, change.kind, nullptr, change.deleted, change.origin};
    if (latest.revision == change.revision) doc.body = latest.body;
    bytes += frame(record_for(doc, change.sequence));
  }
  for (const auto& [key, value] : locals_) bytes += frame(Json{{"t", "local"}, {"key", key}, {"value", value}});
  try {
    write_all(out, bytes);
    if (::fsync(out) != 0) io_error("fsync");
  } catch (...) {
    ::close(out);
    throw;
  }
  std::filesystem::rename(tmp, options_.path);
  ::close(fd_);
  fd_ = out;
  file_bytes_ = bytes.size();
}

// ---------------------------------------------------------------- runs

Json to_json(const RunMeta& m) {
  return Json{{"run_id", m.run_id},     {"recipe_id", m.recipe_id},
              {"period", m.period},     {"time_base", m.time_base},
              {"start_wall_time", m.start_wall_time}, {"phase", m.phase},
              {"ticks", m.ticks}};
}

RunMeta run_meta_from_json(const Json& body) {
  RunMeta m;
  m.run_id = body.value("run_id", "");
  m.recipe_id = body.value("recipe_id", "");
  m.period = body.value("period", Seconds{10});
  m.time_base = body.value("time_base", "simulated");
  m.start_wall_time = body.value("start_wall_time", std::int64_t{0});
  m.phase = body.value("phase", "running");
  m.ticks = body.value("ticks", Seconds{0});
  return m;
}

void put_run_meta(Datastore& store, const RunMeta& meta) {
  Document doc{run_meta_id(meta.run_id), 0, DocumentKind::run_meta, to_json(meta), false, {}};
  auto existing = store.get(doc.id);
  store.put(doc, existing ? std::optional<Revision>(existing->revision) : std::nullopt);
}

TelemetryWriter::TelemetryWriter(Datastore& store, std::string run_id)
    : store_(store), run_id_(std::move(run_id)) {}

void TelemetryWriter::append_tick(std::span<const DataPoint> tick) {
  if (!pending_.empty() && pending_.size() + tick.size() > kMaxPoints) flush();
  pending_.insert(pending_.end(), tick.begin(), tick.end());
}

void TelemetryWriter::flush() {
  if (pending_.empty()) return;
  Json points = Json::array();
  for (const auto& p : pending_) {
    Json value = p.has_value() ? Json(p.value) : Json(nullptr);
    points.push_back(Json::array({p.timestamp, name_of(p.variable), std::move(value), name_of(p.stream)}));
  }
  char suffix[16];
  std::snprintf(suffix, sizeof suffix, "%06zu", batches_);
  Document doc{"batch:" + run_id_ + ":" + suffix,
               0,
               DocumentKind::datapoint_batch,
               Json{{"run_id", run_id_},
                    {"first", pending_.front().timestamp},
                    {"last", pending_.back().timestamp},
                    {"points", std::move(points)}},
               false,
               {}};
  store_.put(doc);
  ++batches_;
  pending_.clear();
}

void store_run(Datastore& store, const RunMeta& meta, std::span<const DataPoint> points,
               std::size_t points_per_tick) {
  put_run_meta(store, meta);
  TelemetryWriter writer(store, meta.run_id);
  for (std::size_t i = 0; i < points.size(); i += points_per_tick)
    writer.append_tick(points.subspan(i, std::min(points_per_tick, points.size() - i)));
  writer.flush();
}

std::vector<DataPoint> run_points(const Datastore& store, const std::string& key) {
  std::vector<DataPoint> out;
  for (const auto& doc : store.run_documents(key)) {
    if (doc.kind != DocumentKind::datapoint_batch) continue;
    for (const auto& row : doc.body.at("points")) {
      DataPoint p;
      p.timestamp = row.at(0).get<Seconds>();
      auto variable = variable_from_name(row.at(1).get<std::string>());
      auto stream = stream_from_name(row.at(3).get<std::string>());
      if (!variable || !stream) throw StoreError(StoreErrorCode::Corrupt, "malformed data point in " + doc.id);
      p.variable = *variable;
      p.stream = *stream;
      p.value = row.at(2).is_null() ? std::numeric_limits<double>::quiet_NaN() : row.at(2).get<double>();
      p.run_id = key;
      out.push_back(std::move(p));
    }
  }
  return out;
}

std::string export_csv(const Datastore& store, const std::string& key, StreamFilter filter) {
  auto docs = store.run_documents(key);
  bool known = std::any_of(docs.begin(), docs.end(),
                           [](const Document& d) { return d.kind == DocumentKind::run_meta; });
  if (!known) throw StoreError(StoreErrorCode::UnknownRun, "unknown run " + key);
  return to_csv(run_points(store, key), filter);
}

}  // namespace openchamber
