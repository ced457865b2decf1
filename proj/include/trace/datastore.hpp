#pragma once

// Directory-tree store: one JSONL segment per record kind plus index.json.
//
//   <root>/examples.jsonl      EvalExample
//   <root>/blueprints.jsonl    canonical blueprint text keyed by (example, side, producer)
//   <root>/judge_runs.jsonl    JudgeRun keyed by (example, backend, mode, bundle digest)
//   <root>/annotations.jsonl   AnnotationRecord keyed by (example, annotator, pass)
//   <root>/index.json          key -> record digest per segment, plus segment sizes
//
// Writes are append-only. Re-writing a key with identical bytes is a no-op;
// different bytes raise CONFLICT. Cross-process writers serialize on an
// advisory flock per segment; the index is rebuilt from the segment whenever
// its recorded size disagrees with the file.

#include <sys/file.h>
#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "trace/blueprint.hpp"
#include "trace/error.hpp"
#include "trace/hash.hpp"
#include "trace/io.hpp"
#include "trace/judge.hpp"
#include "trace/labels.hpp"
#include "trace/protocol.hpp"
#include "trace/stats.hpp"

namespace trace::datastore {

namespace fs = std::filesystem;
using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

enum class Dataset { speakbench, s2s_arena, custom };

constexpr std::string_view to_string(Dataset d) {
  switch (d) {
    case Dataset::speakbench: return "speakbench";
    case Dataset::s2s_arena: return "s2s_arena";
    case Dataset::custom: return "custom";
  }
  return "?";
}

inline std::optional<Dataset> try_parse_dataset(std::string_view s) {
  if (s == "speakbench") return Dataset::speakbench;
  if (s == "s2s_arena" || s == "s2s-arena") return Dataset::s2s_arena;
  if (s == "custom") return Dataset::custom;
  return std::nullopt;
}

struct AudioRef {
  std::string path;  // relative to the example's audio root
  std::string sha256;
  friend bool operator==(const AudioRef&, const AudioRef&) = default;
};

struct EvalExample {
  std::string example_id;
  Dataset dataset = Dataset::custom;
  std::string audio_root;
  AudioRef prompt_audio;
  AudioRef response_a;
  AudioRef response_b;
  std::string prompt_text;  // user request as text, when the manifest has it
  std::optional<std::string> original_label;  // "1", "2" or "tie"
  std::vector<std::string> flags;

  fs::path resolve(const AudioRef& r) const { return fs::path(audio_root) / r.path; }
  friend bool operator==(const EvalExample&, const EvalExample&) = default;
};

inline ordered_json to_json(const AudioRef& r) { return ordered_json{{"path", r.path}, {"sha256", r.sha256}}; }

inline ordered_json to_json(const EvalExample& e) {
  ordered_json j;
  j["example_id"] = e.example_id;
  j["dataset"] = std::string(to_string(e.dataset));
  j["audio_root"] = e.audio_root;
  j["prompt_audio"] = to_json(e.prompt_audio);
  j["response_a"] = to_json(e.response_a);
  j["response_b"] = to_json(e.response_b);
  j["prompt_text"] = e.prompt_text;
  j["original_label"] = e.original_label ? ordered_json(*e.original_label) : ordered_json(nullptr);
  j["flags"] = e.flags;
  return j;
}

inline EvalExample example_from_json(const json& j) {
  EvalExample e;
  e.example_id = j.at("example_id").get<std::string>();
  e.dataset = try_parse_dataset(j.at("dataset").get<std::string>()).value_or(Dataset::custom);
  e.audio_root = j.value("audio_root", "");
  auto ref = [&](const char* k) { return AudioRef{j.at(k).at("path").get<std::string>(), j.at(k).at("sha256").get<std::string>()}; };
  e.prompt_audio = ref("prompt_audio");
  e.response_a = ref("response_a");
  e.response_b = ref("response_b");
  e.prompt_text = j.value("prompt_text", "");
  if (j.contains("original_label") && !j["original_label"].is_null())
    e.original_label = j["original_label"].get<std::string>();
  e.flags = j.value("flags", std::vector<std::string>{});
  return e;
}

struct StoredBlueprint {
  std::string example_id;
  std::string side;      // "a" or "b"
  std::string producer;  // feature-source identities plus ablation mask
  std::string text;      // canonical serialisation
};

// ---------------------------------------------------------------------------

namespace detail {

class FileLock {
 public:
  explicit FileLock(const fs::path& p) {
    fd_ = ::open(p.c_str(), O_RDWR | O_CREAT, 0644);
    if (fd_ < 0) throw CodedError("IO_ERROR", "cannot open lock " + p.string());
    if (::flock(fd_, LOCK_EX) != 0) {
      ::close(fd_);
      throw CodedError("IO_ERROR", "cannot lock " + p.string());
    }
  }
  ~FileLock() {
    ::flock(fd_, LOCK_UN);
    ::close(fd_);
  }
  FileLock(const FileLock&) = delete;
  FileLock& operator=(const FileLock&) = delete;

 private:
  int fd_ = -1;
};

}  // namespace detail

class Store {
 public:
  static constexpr const char* kSegments[] = {"examples", "blueprints", "judge_runs", "annotations"};

  explicit Store(fs::path root) : root_(std::move(root)) {
    fs::create_directories(root_);
    json idx;
    if (fs::exists(index_path())) {
      try {
        idx = json::parse(io::read_text(index_path()));
      } catch (const std::exception&) {
        idx = json::object();  // stale or torn index: rebuild below
      }
    }
    for (const char* seg : kSegments) {
      auto& s = segs_[seg];
      if (idx.contains(seg) && idx[seg].value("bytes", -1LL) == file_size(seg)) {
        s.bytes = idx[seg]["bytes"].get<long long>();
        for (auto it = idx[seg]["keys"].begin(); it != idx[seg]["keys"].end(); ++it)
          s.keys[it.key()] = it.value().get<std::string>();
      } else {
        rescan(seg);
      }
    }
    save_index();
  }

  const fs::path& root() const { return root_; }

  /// Appends `record` under `key`. Returns false when an identical record was
  /// already stored.
  bool put(const std::string& segment, const std::string& key, const ordered_json& record) {
    const std::string digest = record_digest(json::parse(record.dump()));
    std::lock_guard lk(mu_);
    detail::FileLock flk(root_ / (segment + ".lock"));
    auto& s = seg(segment);
    if (s.bytes != file_size(segment)) rescan(segment);
    if (auto it = s.keys.find(key); it != s.keys.end()) {
      if (it->second == digest) return false;
      throw CodedError("CONFLICT", segment + " key " + key + " already holds different content");
    }
    ordered_json wrapped = {{"key", key}, {"record", record}};
    io::append_line(segment_path(segment), wrapped.dump());
    s.keys[key] = digest;
    s.bytes = file_size(segment);
    save_index();
    return true;
  }

  /// Records in append order.
  std::vector<std::pair<std::string, json>> scan(const std::string& segment) const {
    std::vector<std::pair<std::string, json>> out;
    if (!fs::exists(segment_path(segment))) return out;
    io::for_each_jsonl(segment_path(segment), [&](const json& j, std::size_t line) {
      if (!j.contains("key") || !j.contains("record"))
        throw CodedError("CORRUPT_STORE", segment + ":" + std::to_string(line));
      out.emplace_back(j["key"].get<std::string>(), j["record"]);
    });
    return out;
  }

  bool contains(const std::string& segment, const std::string& key) const {
    std::lock_guard lk(mu_);
    const auto& s = segs_.at(segment);
    return s.keys.count(key) > 0;
  }

  std::size_t size(const std::string& segment) const {
    std::lock_guard lk(mu_);
    return segs_.at(segment).keys.size();
  }

  // ---- examples

  bool put_example(const EvalExample& e) { return put("examples", e.example_id, to_json(e)); }

  std::vector<EvalExample> examples(std::optional<Dataset> dataset = std::nullopt) const {
    std::vector<EvalExample> out;
    for (const auto& [k, j] : scan("examples")) {
      auto e = example_from_json(j);
      if (!dataset || e.dataset == *dataset) out.push_back(std::move(e));
    }
    return out;
  }

  std::optional<EvalExample> example(const std::string& id) const {
    for (auto& e : examples())
      if (e.example_id == id) return e;
    return std::nullopt;
  }

  // ---- blueprints

  static std::string blueprint_key(const std::string& example_id, const std::string& side, const std::string& producer) {
    return example_id + "|" + side + "|" + producer;
  }

  bool put_blueprint(const std::string& example_id, const std::string& side, const std::string& producer,
                     const blueprint::Blueprint& b) {
    require_example(example_id);
    ordered_json j{{"example_id", example_id}, {"side", side}, {"producer", producer}, {"text", blueprint::serialize(b)}};
    return put("blueprints", blueprint_key(example_id, side, producer), j);
  }

  std::optional<blueprint::Blueprint> blueprint(const std::string& example_id, const std::string& side,
                                                const std::string& producer) const {
    const auto key = blueprint_key(example_id, side, producer);
    if (!contains("blueprints", key)) return std::nullopt;
    for (const auto& [k, j] : scan("blueprints"))
      if (k == key) return blueprint::deserialize(j.at("text").get<std::string>());
    return std::nullopt;
  }

  std::vector<StoredBlueprint> blueprints() const {
    std::vector<StoredBlueprint> out;
    for (const auto& [k, j] : scan("blueprints"))
      out.push_back({j.at("example_id"), j.at("side"), j.at("producer"), j.at("text")});
    return out;
  }

  // ---- judge runs

  static std::string run_key(const judge::JudgeRun& r) {
    return r.example_id + "|" + r.backend_id + "|" + std::string(judge::to_string(r.mode)) + "|" + r.bundle_digest;
  }

  bool put_judge_run(const judge::JudgeRun& r) {
    require_example(r.example_id);
    return put("judge_runs", run_key(r), judge::to_json(r));
  }

  /// Throws DANGLING_REFERENCE when a run names an unknown example.
  std::vector<judge::JudgeRun> judge_runs() const {
    auto ids = example_ids();
    std::vector<judge::JudgeRun> out;
    for (const auto& [k, j] : scan("judge_runs")) {
      auto r = judge::judge_run_from_json(j);
      if (!ids.count(r.example_id)) throw CodedError("DANGLING_REFERENCE", "judge run " + k);
      out.push_back(std::move(r));
    }
    return out;
  }

  // ---- annotations

  static std::string annotation_key(const protocol::AnnotationRecord& r) {
    return r.example_id + "|" + r.annotator_id + "|" + std::string(protocol::to_string(r.pass));
  }

  bool put_annotation(const protocol::AnnotationRecord& r) {
    require_example(r.example_id);
    return put("annotations", annotation_key(r), protocol::to_json(r));
  }

  std::vector<protocol::AnnotationRecord> annotations() const {
    auto ids = example_ids();
    std::vector<protocol::AnnotationRecord> out;
    for (const auto& [k, j] : scan("annotations")) {
      auto r = protocol::annotation_from_json(j);
      if (!ids.count(r.example_id)) throw CodedError("DANGLING_REFERENCE", "annotation " + k);
      out.push_back(std::move(r));
    }
    return out;
  }

  std::set<std::string> example_ids() const {
    std::set<std::string> ids;
    std::lock_guard lk(mu_);
    for (const auto& [k, d] : segs_.at("examples").keys) ids.insert(k);
    return ids;
  }

 private:
  struct Segment {
    long long bytes = 0;
    std::map<std::string, std::string> keys;
  };

  // Digest over the key-sorted form, so field order never matters.
  static std::string record_digest(const json& j) { return hash::sha256_hex(j.dump()); }

  fs::path segment_path(const std::string& s) const { return root_ / (s + ".jsonl"); }
  fs::path index_path() const { return root_ / "index.json"; }

  long long file_size(const std::string& s) const {
    std::error_code ec;
    auto n = fs::file_size(segment_path(s), ec);
    return ec ? 0 : static_cast<long long>(n);
  }

  Segment& seg(const std::string& s) {
    auto it = segs_.find(s);
    if (it == segs_.end()) throw CodedError("INVALID_INPUT", "unknown segment " + s);
    return it->second;
  }

  void rescan(const std::string& segment) {
    auto& s = segs_[segment];
    s.keys.clear();
    for (const auto& [k, j] : scan(segment)) s.keys[k] = record_digest(j);
    s.bytes = file_size(segment);
  }

  void save_index() {
    ordered_json idx = ordered_json::object();
    for (const char* name : kSegments) {
      const auto& s = segs_.at(name);
      ordered_json keys = ordered_json::object();
      for (const auto& [k, d] : s.keys) keys[k] = d;
      idx[name] = {{"bytes", s.bytes}, {"keys", keys}};
    }
    io::write_atomic(index_path(), idx.dump(1) + "\n");
  }

  void require_example(const std::string& id) const {
    std::lock_guard lk(mu_);
    if (!segs_.at("examples").keys.count(id)) throw CodedError("DANGLING_REFERENCE", "unknown example " + id);
  }

  fs::path root_;
  mutable std::recursive_mutex mu_;
  std::map<std::string, Segment> segs_;
};

// ---------------------------------------------------------------------------
// Ingestion
//
// Manifest: JSONL, one object per example:
//   {"id": "...", "prompt_audio": "rel/path.wav", "audio_a": "...", "audio_b": "...",
//    "label": "1" | "2" | "tie", "prompt_text": "...", "language": "en"}
// `label`, `prompt_text` and `language` are optional. Paths are relative to
// the audio directory.

struct LayoutDescriptor {
  Dataset dataset = Dataset::custom;
  fs::path manifest;
  fs::path audio_dir;
  std::optional<fs::path> exclusions;  // one example id per line (SpeakBench few-shot list)
};

struct SkipEntry {
  std::string example_id;
  std::string code;  // MISSING_AUDIO, EXCLUDED_FEW_SHOT, NON_ENGLISH
  std::string detail;
};

struct IngestReport {
  std::size_t manifest_rows = 0;
  std::size_t registered = 0;  // newly written
  std::size_t unchanged = 0;   // already present with identical content
  std::vector<SkipEntry> skipped;
  std::size_t total() const { return registered + unchanged; }
};

inline ordered_json to_json(const IngestReport& r) {
  ordered_json j;
  j["manifest_rows"] = r.manifest_rows;
  j["registered"] = r.registered;
  j["unchanged"] = r.unchanged;
  j["examples"] = r.total();
  ordered_json sk = ordered_json::array();
  for (const auto& s : r.skipped) sk.push_back({{"example_id", s.example_id}, {"code", s.code}, {"detail", s.detail}});
  j["skipped"] = sk;
  return j;
}

inline bool is_english(std::string lang) {
  std::transform(lang.begin(), lang.end(), lang.begin(), [](unsigned char c) { return std::tolower(c); });
  return lang == "en" || lang == "english" || lang.rfind("en-", 0) == 0 || lang.rfind("en_", 0) == 0;
}

inline std::set<std::string> read_id_list(const fs::path& p) {
  std::set<std::string> ids;
  std::istringstream in(io::read_text(p));
  std::string line;
  while (std::getline(in, line)) {
    auto b = line.find_first_not_of(" \t\r");
    if (b == std::string::npos || line[b] == '#') continue;
    auto e = line.find_last_not_of(" \t\r");
    ids.insert(line.substr(b, e - b + 1));
  }
  return ids;
}

/// MALFORMED_MANIFEST is fatal; missing audio is reported per row.
inline IngestReport ingest_dataset(Store& store, const LayoutDescriptor& layout) {
  struct Row {
    std::string id, prompt, a, b, prompt_text, language;
    std::optional<std::string> label;
  };
  std::vector<Row> rows;
  std::set<std::string> seen;
  try {
    io::for_each_jsonl(layout.manifest, [&](const json& j, std::size_t line) {
      auto where = layout.manifest.string() + ":" + std::to_string(line);
      if (!j.is_object()) throw CodedError("MALFORMED_MANIFEST", where + ": not an object");
      Row r;
      try {
        r.id = j.at("id").get<std::string>();
        r.prompt = j.at("prompt_audio").get<std::string>();
        r.a = j.at("audio_a").get<std::string>();
        r.b = j.at("audio_b").get<std::string>();
        r.prompt_text = j.value("prompt_text", "");
        r.language = j.value("language", "");
        if (j.contains("label") && !j["label"].is_null()) {
          const auto& l = j["label"];
          r.label = l.is_number_integer() ? std::to_string(l.get<int>()) : l.get<std::string>();
        }
      } catch (const json::exception& e) {
        throw CodedError("MALFORMED_MANIFEST", where + ": " + e.what());
      }
      if (r.label) {
        const bool winner = *r.label == "1" || *r.label == "2";
        const bool ok = winner || (*r.label == "tie" && layout.dataset != Dataset::s2s_arena);
        if (!ok) throw CodedError("MALFORMED_MANIFEST", where + ": label '" + *r.label + "' not allowed for dataset");
      }
      if (!seen.insert(r.id).second) throw CodedError("MALFORMED_MANIFEST", where + ": duplicate id " + r.id);
      rows.push_back(std::move(r));
    });
  } catch (const CodedError& e) {
    if (e.code() == "MALFORMED_JSONL") throw CodedError("MALFORMED_MANIFEST", e.detail());
    throw;
  }

  std::set<std::string> excluded;
  if (layout.exclusions) excluded = read_id_list(*layout.exclusions);

  IngestReport rep;
  rep.manifest_rows = rows.size();
  const auto audio_root = fs::absolute(layout.audio_dir).lexically_normal();
  for (const auto& r : rows) {
    if (layout.dataset == Dataset::speakbench && excluded.count(r.id)) {
      rep.skipped.push_back({r.id, "EXCLUDED_FEW_SHOT", "listed in " + layout.exclusions->string()});
      continue;
    }
    if (layout.dataset == Dataset::s2s_arena && !is_english(r.language)) {
      rep.skipped.push_back({r.id, "NON_ENGLISH", r.language.empty() ? "language missing" : r.language});
      continue;
    }
    EvalExample e;
    e.example_id = r.id;
    e.dataset = layout.dataset;
    e.audio_root = audio_root.string();
    e.prompt_text = r.prompt_text;
    e.original_label = r.label;
    if (layout.dataset != Dataset::speakbench && excluded.count(r.id)) e.flags.push_back("excluded");
    std::string missing;
    auto ref = [&](const std::string& rel) {
      const auto p = audio_root / rel;
      if (!fs::is_regular_file(p)) {
        missing += (missing.empty() ? "" : ", ") + rel;
        return AudioRef{rel, ""};
      }
      return AudioRef{rel, hash::sha256_file(p)};
    };
    e.prompt_audio = ref(r.prompt);
    e.response_a = ref(r.a);
    e.response_b = ref(r.b);
    if (!missing.empty()) {
      rep.skipped.push_back({r.id, "MISSING_AUDIO", missing});
      continue;
    }
    if (store.put_example(e))
      ++rep.registered;
    else
      ++rep.unchanged;
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Reporting helpers

struct LabelCounts {
  std::size_t both_bad = 0;
  std::size_t winner = 0;
  std::size_t both_good = 0;
  friend bool operator==(const LabelCounts&, const LabelCounts&) = default;
};

/// Per-dimension tallies over first-pass HCoT annotations; win_1 and win_2
/// are merged into `winner`.
inline std::map<std::string, LabelCounts> annotation_counts(const Store& store, std::optional<Dataset> dataset) {
  std::set<std::string> ids;
  for (const auto& e : store.examples(dataset)) ids.insert(e.example_id);
  std::map<std::string, LabelCounts> out{{"content", {}}, {"voice_quality", {}}, {"paralinguistics", {}}, {"overall", {}}};
  auto tally = [](LabelCounts& c, Rating r) {
    if (r == Rating::both_bad) ++c.both_bad;
    else if (r == Rating::both_good) ++c.both_good;
    else ++c.winner;
  };
  for (const auto& a : store.annotations()) {
    if (a.pass != protocol::Pass::hcot || !ids.count(a.example_id) || !a.dims) continue;
    tally(out["content"], a.dims->content);
    tally(out["voice_quality"], a.dims->voice_quality);
    tally(out["paralinguistics"], a.dims->paralinguistics);
    tally(out["overall"], a.overall);
  }
  return out;
}

/// Label set of one pass, keyed by example id. With several annotators on the
/// same pass the first stored record wins; adjudication is left to callers.
inline stats::LabelSet label_set(const Store& store, protocol::Pass pass,
                                 std::optional<Dataset> dataset = std::nullopt,
                                 std::optional<protocol::Target> target = std::nullopt) {
  using protocol::Target;
  std::set<std::string> ids;
  for (const auto& e : store.examples(dataset)) ids.insert(e.example_id);
  stats::LabelSet out;
  for (const auto& a : store.annotations()) {
    if (a.pass != pass || !ids.count(a.example_id)) continue;
    Rating r = a.overall;
    if (target && *target != Target::overall) {
      if (!a.dims) continue;
      r = *target == Target::content ? a.dims->content
          : *target == Target::voice_quality ? a.dims->voice_quality
                                             : a.dims->paralinguistics;
    }
    out.emplace(a.example_id, std::string(to_string(r)));
  }
  return out;
}

/// Original dataset labels ("1", "2", "tie").
inline stats::LabelSet original_labels(const Store& store, std::optional<Dataset> dataset = std::nullopt) {
  stats::LabelSet out;
  for (const auto& e : store.examples(dataset))
    if (e.original_label) out.emplace(e.example_id, *e.original_label);
  return out;
}

inline void export_outcomes(const stats::PairedOutcomes& po, const fs::path& path) {
  po.validate();
  io::write_atomic(path, po.to_jsonl());
}

}  // namespace trace::datastore
