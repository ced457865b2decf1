#pragma once

// Stage drivers behind the trace CLI. Each stage reads and writes one work
// directory:
//
//   store/                                datastore segments
//   prosody/<clip>.prosody.json           signal measurements (extract)
//   features/<clip>.features.json         extractor payloads (fetch-features)
//   blueprints/<variant>/<clip>.blueprint.json, index.json
//   judge.wal.jsonl                       raw responses before parsing
//   reports/<stage>.json, .txt, .csv
//   meter.json                            wall-clock seconds per feature fetch
//
// Clip ids are <example_id>.prompt, <example_id>.a and <example_id>.b.
// Reports carry no timestamps, so identical inputs give identical bytes.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "trace/acoustics.hpp"
#include "trace/audio.hpp"
#include "trace/blueprint.hpp"
#include "trace/costing.hpp"
#include "trace/datastore.hpp"
#include "trace/error.hpp"
#include "trace/extractors.hpp"
#include "trace/fusion.hpp"
#include "trace/io.hpp"
#include "trace/judge.hpp"
#include "trace/labels.hpp"
#include "trace/parallel.hpp"
#include "trace/probes.hpp"
#include "trace/protocol.hpp"
#include "trace/run_config.hpp"
#include "trace/stats.hpp"

namespace trace::pipeline {

/// Outcome of one stage. `partial` maps to exit code 2.
struct StageResult {
  std::string stage;
  ordered_json report;
  std::string text;
  bool partial = false;
};

struct Failure {
  std::string item;
  std::string code;
  std::string message;
};

inline ordered_json to_json(const std::vector<Failure>& fs_) {
  ordered_json a = ordered_json::array();
  for (const auto& f : fs_) a.push_back({{"item", f.item}, {"code", f.code}, {"message", f.message}});
  return a;
}

inline std::string clip_id(const std::string& example_id, std::string_view side) {
  return example_id + "." + std::string(side);
}

inline std::string variant_name(const blueprint::AblationMask& m) {
  if (m.empty()) return "full";
  std::string s = "wo_";
  bool first = true;
  for (auto g : blueprint::all_groups) {
    if (!m.masked(g)) continue;
    if (!first) s += "+";
    s += std::string(blueprint::to_string(g));
    first = false;
  }
  return s;
}

inline std::string pct(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f", 100.0 * v);
  return buf;
}

// ---------------------------------------------------------------------------
// Measurement files

inline ordered_json to_json(const acoustics::SignalMeasurements& m) {
  ordered_json j;
  if (m.pitch)
    j["pitch"] = {{"mean_hz", m.pitch->mean_hz}, {"std_hz", m.pitch->std_hz}, {"contour_hz", m.pitch->contour_hz}};
  else
    j["pitch"] = nullptr;
  if (m.loudness)
    j["loudness"] = {{"integrated_lufs", m.loudness->integrated_lufs},
                     {"std_lufs", m.loudness->std_lufs},
                     {"contour_lufs", m.loudness->contour_lufs}};
  else
    j["loudness"] = nullptr;
  j["activity"] = {{"duration_seconds", m.activity.duration_seconds}, {"pause_seconds", m.activity.pause_seconds}};
  j["flags"] = m.flags;
  return j;
}

inline acoustics::SignalMeasurements measurements_from_json(const json& j) {
  acoustics::SignalMeasurements m;
  if (!j.at("pitch").is_null()) {
    const auto& p = j["pitch"];
    m.pitch = acoustics::PitchStats{p.at("mean_hz").get<double>(), p.at("std_hz").get<double>(),
                                    p.at("contour_hz").get<std::vector<double>>()};
  }
  if (!j.at("loudness").is_null()) {
    const auto& l = j["loudness"];
    m.loudness = acoustics::LoudnessStats{l.at("integrated_lufs").get<double>(), l.at("std_lufs").get<double>(),
                                          l.at("contour_lufs").get<std::vector<double>>()};
  }
  m.activity.duration_seconds = j.at("activity").at("duration_seconds").get<double>();
  m.activity.pause_seconds = j.at("activity").at("pause_seconds").get<double>();
  m.flags = j.value("flags", std::vector<std::string>{});
  return m;
}

/// Payloads fetched for one clip, with the identity of the source of each.
struct ClipFeatures {
  std::string clip_id;
  std::string audio_sha256;
  std::map<extract::Feature, std::pair<std::string, extract::Payload>> features;

  const extract::Payload* get(extract::Feature f) const {
    auto it = features.find(f);
    return it == features.end() ? nullptr : &it->second.second;
  }
};

inline ordered_json to_json(const ClipFeatures& c) {
  ordered_json j;
  j["clip_id"] = c.clip_id;
  j["audio_sha256"] = c.audio_sha256;
  ordered_json f = ordered_json::object();
  for (const auto& [feat, entry] : c.features)
    f[feature_key(feat)] = {{"source", entry.first}, {"payload", extract::to_json(entry.second)}};
  j["features"] = f;
  return j;
}

inline ClipFeatures clip_features_from_json(const json& j) {
  ClipFeatures c;
  c.clip_id = j.at("clip_id").get<std::string>();
  c.audio_sha256 = j.value("audio_sha256", "");
  for (auto it = j.at("features").begin(); it != j.at("features").end(); ++it) {
    auto f = extract::try_parse_feature(it.key());
    if (!f) continue;
    c.features[*f] = {it.value().at("source").get<std::string>(), extract::validate_payload(*f, it.value().at("payload"))};
  }
  return c;
}

// ---------------------------------------------------------------------------
// Workspace

class Workspace {
 public:
  explicit Workspace(RunConfig cfg) : cfg_(std::move(cfg)), digest_(cfg_.digest()), store_(cfg_.work / "store") {}

  const RunConfig& config() const { return cfg_; }
  const std::string& digest() const { return digest_; }
  datastore::Store& store() { return store_; }

  fs::path prosody_path(const std::string& clip) const { return cfg_.work / "prosody" / (clip + ".prosody.json"); }
  fs::path features_path(const std::string& clip) const { return cfg_.work / "features" / (clip + ".features.json"); }
  fs::path blueprint_dir() const { return cfg_.work / "blueprints" / variant_name(cfg_.mask); }
  fs::path reports_dir() const { return cfg_.work / "reports"; }
  fs::path wal_path() const { return cfg_.work / "judge.wal.jsonl"; }
  fs::path meter_path() const { return cfg_.work / "meter.json"; }

  std::vector<datastore::EvalExample> examples() const {
    auto ex = store_.examples(cfg_.dataset);
    std::sort(ex.begin(), ex.end(), [](const auto& a, const auto& b) { return a.example_id < b.example_id; });
    return ex;
  }

  std::optional<ClipFeatures> features(const std::string& clip) const {
    const auto p = features_path(clip);
    if (!fs::exists(p)) return std::nullopt;
    return clip_features_from_json(json::parse(io::read_text(p)));
  }

  /// Common report envelope.
  ordered_json envelope(const std::string& stage) const {
    ordered_json j;
    j["stage"] = stage;
    j["run_config_digest"] = digest_;
    j["run_config"] = cfg_.to_json();
    return j;
  }

  void write_report(const StageResult& r, const std::string& name) const {
    io::write_atomic(reports_dir() / (name + ".json"), r.report.dump(2) + "\n");
    if (!r.text.empty()) io::write_atomic(reports_dir() / (name + ".txt"), r.text);
  }

 private:
  RunConfig cfg_;
  std::string digest_;
  datastore::Store store_;
};

inline void require(bool ok, const std::string& field, const std::string& why) {
  if (!ok) throw invalid(field, why);
}

// ---------------------------------------------------------------------------
// ingest

inline StageResult run_ingest(Workspace& ws) {
  const auto& c = ws.config();
  require(c.dataset.has_value(), "dataset", "required for ingest");
  require(c.manifest.has_value(), "ingest.manifest", "required for ingest");
  require(c.audio_dir.has_value(), "ingest.audio_dir", "required for ingest");
  datastore::LayoutDescriptor layout{*c.dataset, *c.manifest, *c.audio_dir, c.exclusions};
  auto rep = datastore::ingest_dataset(ws.store(), layout);
  StageResult r{"ingest", ws.envelope("ingest"), {}, false};
  r.report["result"] = datastore::to_json(rep);
  std::size_t missing = 0;
  for (const auto& s : rep.skipped) missing += s.code == "MISSING_AUDIO";
  r.partial = missing > 0;
  r.text = "ingest: " + std::to_string(rep.manifest_rows) + " rows, " + std::to_string(rep.registered) +
           " registered, " + std::to_string(rep.unchanged) + " unchanged, " + std::to_string(rep.skipped.size()) +
           " skipped\n";
  for (const auto& s : rep.skipped) r.text += "  skip " + s.example_id + " " + s.code + " " + s.detail + "\n";
  ws.write_report(r, "ingest");
  return r;
}

// ---------------------------------------------------------------------------
// extract

struct ExtractJob {
  std::string clip_id;
  fs::path audio;
  std::string sha256;
  fs::path out;
};

inline std::vector<Failure> run_extract_jobs(const std::vector<ExtractJob>& jobs, std::size_t workers,
                                             const std::string& digest, std::size_t& written,
                                             std::size_t& unchanged) {
  std::vector<std::optional<Failure>> errors(jobs.size());
  std::vector<int> state(jobs.size(), 0);  // 1 written, 2 unchanged
  parallel_for(jobs.size(), workers, [&](std::size_t i) {
    const auto& job = jobs[i];
    try {
      if (fs::exists(job.out)) {
        auto prev = json::parse(io::read_text(job.out));
        if (prev.value("audio_sha256", "") == job.sha256) {
          state[i] = 2;
          return;
        }
      }
      auto clip = audio::load(job.audio);
      auto m = acoustics::measure_signal(clip);
      ordered_json j;
      j["clip_id"] = job.clip_id;
      j["audio_sha256"] = job.sha256;
      j["run_config_digest"] = digest;
      j["measurements"] = to_json(m);
      io::write_atomic(job.out, j.dump(2) + "\n");
      state[i] = 1;
    } catch (const CodedError& e) {
      errors[i] = Failure{job.clip_id, e.code(), e.detail()};
    } catch (const audio::AudioError& e) {
      errors[i] = Failure{job.clip_id, "UNSUPPORTED_AUDIO", e.what()};
    } catch (const std::exception& e) {
      errors[i] = Failure{job.clip_id, "EXTRACT_FAILED", e.what()};
    }
  });
  std::vector<Failure> out;
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    if (errors[i]) out.push_back(*errors[i]);
    written += state[i] == 1;
    unchanged += state[i] == 2;
  }
  return out;
}

inline StageResult finish_extract(Workspace& ws, std::size_t clips, std::size_t written, std::size_t unchanged,
                                  const std::vector<Failure>& failures) {
  StageResult r{"extract", ws.envelope("extract"), {}, !failures.empty()};
  r.report["result"] = {{"clips", clips}, {"written", written}, {"unchanged", unchanged}, {"failures", to_json(failures)}};
  r.text = "extract: " + std::to_string(clips) + " clips, " + std::to_string(written) + " written, " +
           std::to_string(unchanged) + " unchanged, " + std::to_string(failures.size()) + " failed\n";
  for (const auto& f : failures) r.text += "  fail " + f.item + " " + f.code + " " + f.message + "\n";
  ws.write_report(r, "extract");
  return r;
}

/// Measures the response clips of every stored example.
inline StageResult run_extract(Workspace& ws) {
  std::vector<ExtractJob> jobs;
  for (const auto& e : ws.examples())
    for (auto [side, ref] : {std::pair{"a", &e.response_a}, std::pair{"b", &e.response_b}}) {
      const auto id = clip_id(e.example_id, side);
      jobs.push_back({id, e.resolve(*ref), ref->sha256, ws.prosody_path(id)});
    }
  std::size_t written = 0, unchanged = 0;
  auto failures = run_extract_jobs(jobs, ws.config().workers, ws.digest(), written, unchanged);
  return finish_extract(ws, jobs.size(), written, unchanged, failures);
}

/// Directory form: every file under `audio_dir`, clip id = file stem. Files
/// that are neither WAV nor FLAC are reported, not skipped silently.
inline StageResult run_extract_dir(Workspace& ws, const fs::path& audio_dir, const fs::path& out_dir) {
  require(fs::is_directory(audio_dir), "audio", "not a directory: " + audio_dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(audio_dir))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::vector<ExtractJob> jobs;
  for (const auto& f : files)
    jobs.push_back({f.stem().string(), f, hash::sha256_file(f), out_dir / (f.stem().string() + ".prosody.json")});
  std::size_t written = 0, unchanged = 0;
  auto failures = run_extract_jobs(jobs, ws.config().workers, ws.digest(), written, unchanged);
  return finish_extract(ws, jobs.size(), written, unchanged, failures);
}

// ---------------------------------------------------------------------------
// fetch-features

/// Features a configuration needs for the response clips.
inline std::set<extract::Feature> needed_features(const RunConfig& c) {
  using extract::Feature;
  std::set<Feature> out;
  for (auto m : c.modes) {
    if (m == judge::Mode::audio) continue;
    out.insert(Feature::asr);
    if (m != judge::Mode::trace_blueprint) continue;
    if (!c.mask.masked(blueprint::Group::emotion)) out.insert(Feature::emotion);
    if (!c.mask.masked(blueprint::Group::accent)) out.insert(Feature::accent);
    if (!c.mask.masked(blueprint::Group::audio_quality)) out.insert(Feature::mos);
  }
  return out;
}

inline StageResult run_fetch_features(Workspace& ws) {
  const auto& c = ws.config();
  const auto needed = needed_features(c);
  std::map<extract::Feature, std::unique_ptr<extract::FeatureSource>> sources;
  for (auto f : needed) {
    const auto field = "features." + feature_key(f);
    auto it = c.sources.find(f);
    require(it != c.sources.end(), field, "no source configured");
    extract::ExtractorSpec spec;
    spec.feature = f;
    spec.location = it->second;
    spec.backend = it->second.rfind("http://", 0) == 0 ? extract::BackendKind::http_service
                                                         : extract::BackendKind::precomputed_file;
    spec.timeout_seconds = c.extractor_timeout;
    spec.max_retries = c.extractor_retries;
    try {
      const char* key = std::getenv("TRACE_EXTRACTOR_API_KEY");
      sources[f] = extract::make_source(spec, key ? key : "");
    } catch (const CodedError& e) {
      throw invalid(field, e.detail());
    }
  }

  std::map<std::string, ClipFeatures> clips;
  std::map<extract::Feature, std::vector<extract::ClipRef>> requests;
  for (const auto& e : ws.examples()) {
    for (auto [side, ref] : {std::pair{"a", &e.response_a}, std::pair{"b", &e.response_b}}) {
      const auto id = clip_id(e.example_id, side);
      clips[id] = ws.features(id).value_or(ClipFeatures{id, ref->sha256, {}});
      for (auto f : needed) requests[f].push_back({id, e.resolve(*ref), ref->sha256});
    }
    if (e.prompt_text.empty() && needed.count(extract::Feature::asr)) {
      const auto id = clip_id(e.example_id, "prompt");
      clips[id] = ws.features(id).value_or(ClipFeatures{id, e.prompt_audio.sha256, {}});
      requests[extract::Feature::asr].push_back({id, e.resolve(e.prompt_audio), e.prompt_audio.sha256});
    }
  }

  json meter = fs::exists(ws.meter_path()) ? json::parse(io::read_text(ws.meter_path())) : json::object();
  extract::FeatureCache cache(c.work / "cache");
  extract::FetchOptions opts;
  opts.max_retries = c.extractor_retries;
  std::vector<Failure> failures;
  ordered_json per_feature = ordered_json::object();
  for (auto& [f, src] : sources) {
    const auto t0 = std::chrono::steady_clock::now();
    auto res = extract::batch_fetch({src.get()}, requests[f], &cache, c.extractor_parallelism, opts);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (res.backend_calls > 0) meter[feature_key(f)] = secs;
    for (auto& [clip, payloads] : res.features)
      for (auto& [feat, p] : payloads) clips[clip].features[feat] = {src->identity(), p};
    for (const auto& fl : res.failures)
      failures.push_back({fl.clip_id + ":" + feature_key(fl.feature), fl.code, fl.message});
    per_feature[feature_key(f)] = {{"source", src->identity()},
                                                       {"clips", requests[f].size()},
                                                       {"fetched", requests[f].size() - res.failures.size()},
                                                       {"failed", res.failures.size()}};
  }
  io::write_atomic(ws.meter_path(), meter.dump(2) + "\n");

  std::size_t written = 0;
  for (const auto& [id, cf] : clips) {
    if (cf.features.empty()) continue;
    auto j = to_json(cf);
    j["run_config_digest"] = ws.digest();
    const auto text = j.dump(2) + "\n";
    const auto p = ws.features_path(id);
    if (fs::exists(p)) {
      auto prev = json::parse(io::read_text(p));
      prev.erase("run_config_digest");
      if (prev == json::parse(to_json(cf).dump())) continue;
    }
    io::write_atomic(p, text);
    ++written;
  }

  StageResult r{"fetch-features", ws.envelope("fetch-features"), {}, !failures.empty()};
  r.report["result"] = {{"clips", clips.size()}, {"written", written}, {"features", per_feature},
                        {"failures", to_json(failures)}};
  r.text = "fetch-features: " + std::to_string(clips.size()) + " clips, " + std::to_string(written) + " updated, " +
           std::to_string(failures.size()) + " failed\n";
  for (const auto& f : failures) r.text += "  fail " + f.item + " " + f.code + " " + f.message + "\n";
  ws.write_report(r, "fetch-features");
  return r;
}

// ---------------------------------------------------------------------------
// blueprint

/// Producer identity: the sources of the features actually used, the prosody
/// settings, and the ablation mask.
inline std::string producer_id(const ClipFeatures& cf, const blueprint::AblationMask& mask) {
  using extract::Feature;
  std::string ids;
  auto add = [&](Feature f) {
    auto it = cf.features.find(f);
    ids += feature_key(f) + "=" + (it == cf.features.end() ? "-" : it->second.first) + "\n";
  };
  add(Feature::asr);
  if (!mask.masked(blueprint::Group::emotion)) add(Feature::emotion);
  if (!mask.masked(blueprint::Group::accent)) add(Feature::accent);
  if (!mask.masked(blueprint::Group::audio_quality)) add(Feature::mos);
  if (!mask.masked(blueprint::Group::audio_properties)) ids += "prosody=dsp-20\n";
  return "src:" + hash::short_digest(hash::sha256_hex(ids)) + ";mask:" + mask.to_string();
}

inline std::optional<std::string> transcript_of(const ClipFeatures& cf) {
  if (auto* p = cf.get(extract::Feature::asr)) return std::get<extract::Transcript>(*p).text;
  return std::nullopt;
}

inline blueprint::Blueprint make_blueprint(const Workspace& ws, const std::string& clip, const ClipFeatures& cf) {
  using extract::Feature;
  const auto& mask = ws.config().mask;
  blueprint::BlueprintInputs in;
  in.transcript = transcript_of(cf);
  if (!in.transcript) throw CodedError("MISSING_FEATURE", "asr");
  if (auto* p = cf.get(Feature::emotion)) in.emotion = std::get<extract::EmotionVector>(*p);
  if (auto* p = cf.get(Feature::accent)) in.accent = std::get<extract::AccentVector>(*p);
  if (auto* p = cf.get(Feature::mos)) in.quality = std::get<extract::QualityScores>(*p);
  if (!mask.masked(blueprint::Group::audio_properties)) {
    const auto pp = ws.prosody_path(clip);
    if (!fs::exists(pp)) throw CodedError("MISSING_PROSODY", "run extract first: " + pp.string());
    auto j = json::parse(io::read_text(pp));
    auto m = measurements_from_json(j.at("measurements"));
    in.prosody = blueprint::from_prosody(acoustics::combine(m, *in.transcript));
  }
  return blueprint::build_blueprint(in, mask);
}

inline StageResult run_blueprint(Workspace& ws) {
  const auto& c = ws.config();
  std::vector<Failure> failures;
  std::size_t stored = 0, unchanged = 0;
  ordered_json index = ordered_json::object();
  for (const auto& e : ws.examples()) {
    for (std::string side : {"a", "b"}) {
      const auto clip = clip_id(e.example_id, side);
      try {
        auto cf = ws.features(clip);
        if (!cf) throw CodedError("MISSING_FEATURE", "run fetch-features first");
        auto bp = make_blueprint(ws, clip, *cf);
        const auto producer = producer_id(*cf, c.mask);
        if (ws.store().put_blueprint(e.example_id, side, producer, bp))
          ++stored;
        else
          ++unchanged;
        io::write_atomic(ws.blueprint_dir() / (clip + ".blueprint.json"), blueprint::serialize(bp));
        index[clip] = producer;
      } catch (const CodedError& err) {
        failures.push_back({clip, err.code(), err.detail()});
      }
    }
  }
  ordered_json idx;
  idx["run_config_digest"] = ws.digest();
  idx["variant"] = variant_name(c.mask);
  idx["producers"] = index;
  io::write_atomic(ws.blueprint_dir() / "index.json", idx.dump(2) + "\n");

  StageResult r{"blueprint", ws.envelope("blueprint"), {}, !failures.empty()};
  r.report["result"] = {{"variant", variant_name(c.mask)},
                        {"stored", stored},
                        {"unchanged", unchanged},
                        {"failures", to_json(failures)}};
  r.text = "blueprint (" + variant_name(c.mask) + "): " + std::to_string(stored) + " stored, " +
           std::to_string(unchanged) + " unchanged, " + std::to_string(failures.size()) + " failed\n";
  for (const auto& f : failures) r.text += "  fail " + f.item + " " + f.code + " " + f.message + "\n";
  ws.write_report(r, "blueprint");
  return r;
}

// ---------------------------------------------------------------------------
// judge

inline std::unique_ptr<judge::ChatBackend> make_backend(const RunConfig& c) {
  if (c.backend == "replay") {
    require(c.fixture.has_value(), "judge.fixture", "required for the replay backend");
    require(fs::is_regular_file(*c.fixture), "judge.fixture", "not found: " + c.fixture->string());
    return std::make_unique<judge::ReplayBackend>(*c.fixture);
  }
  const char* key = std::getenv("TRACE_JUDGE_API_KEY");
  if (!key) key = std::getenv("OPENAI_API_KEY");
  return std::make_unique<judge::OpenAIChatBackend>(c.base_url, key ? key : "", c.model, c.audio_capable);
}

struct JudgeItem {
  std::string example_id;
  judge::Mode mode = judge::Mode::trace_blueprint;
  bool swapped = false;
  judge::PromptBundle bundle;
};

struct JudgePlan {
  std::vector<JudgeItem> items;
  std::vector<Failure> failures;  // examples whose prompt could not be rendered
};

/// Renders every bundle the configuration calls for. Used by `judge` to make
/// calls and by later stages to find exactly the runs this configuration owns.
inline JudgePlan plan_judging(Workspace& ws, const judge::TemplateSet& templates) {
  const auto& c = ws.config();
  JudgePlan plan;
  for (const auto& e : ws.examples()) {
    for (auto mode : c.modes) {
      const std::string item = e.example_id + ":" + std::string(judge::to_string(mode));
      try {
        judge::PromptInputs in;
        in.mask = c.mask;
        if (mode != judge::Mode::audio) {
          if (!e.prompt_text.empty()) {
            in.user_prompt = e.prompt_text;
          } else if (auto pf = ws.features(clip_id(e.example_id, "prompt"))) {
            in.user_prompt = transcript_of(*pf);
          }
        }
        if (mode == judge::Mode::transcript_only) {
          if (auto a = ws.features(clip_id(e.example_id, "a"))) in.transcript_a = transcript_of(*a);
          if (auto b = ws.features(clip_id(e.example_id, "b"))) in.transcript_b = transcript_of(*b);
        }
        if (mode == judge::Mode::trace_blueprint) {
          for (std::string side : {"a", "b"}) {
            auto cf = ws.features(clip_id(e.example_id, side));
            if (!cf) continue;
            auto bp = ws.store().blueprint(e.example_id, side, producer_id(*cf, c.mask));
            (side == "a" ? in.blueprint_a : in.blueprint_b) = bp;
          }
        }
        if (mode == judge::Mode::audio) {
          in.instruction_audio = judge::AudioRef{"instruction.wav", e.resolve(e.prompt_audio), e.prompt_audio.sha256};
          in.audio_a = judge::AudioRef{"audio_a.wav", e.resolve(e.response_a), e.response_a.sha256};
          in.audio_b = judge::AudioRef{"audio_b.wav", e.resolve(e.response_b), e.response_b.sha256};
        }
        plan.items.push_back({e.example_id, mode, false, judge::render_prompt(mode, in, templates)});
        if (c.swap_ab)
          plan.items.push_back({e.example_id, mode, true, judge::render_prompt(mode, judge::swapped(in), templates)});
      } catch (const CodedError& err) {
        plan.failures.push_back({item, err.code(), err.detail()});
      }
    }
  }
  return plan;
}

inline std::string run_key_of(const JudgeItem& it, const std::string& backend_id) {
  return it.example_id + "|" + backend_id + "|" + std::string(judge::to_string(it.mode)) + "|" + it.bundle.digest();
}

inline StageResult run_judging(Workspace& ws, judge::ChatBackend& backend) {
  const auto& c = ws.config();
  auto templates = judge::TemplateSet::load(c.prompts);
  auto plan = plan_judging(ws, templates);
  judge::WriteAheadLog wal(ws.wal_path());
  judge::RateLimiter limiter(c.requests_per_minute, c.tokens_per_minute);
  judge::RunOptions opts;
  opts.decode = c.decode;
  opts.retry.max_retries = c.judge_retries;
  opts.wal = &wal;
  opts.limiter = &limiter;
  opts.run_config_digest = ws.digest();

  const auto n = plan.items.size();
  std::vector<int> state(n, 0);  // 1 judged, 2 cached, 3 parse failure, 4 failed
  std::vector<std::optional<Failure>> errors(n);
  parallel_for(n, c.workers, [&](std::size_t i) {
    const auto& it = plan.items[i];
    const std::string item = it.example_id + ":" + std::string(judge::to_string(it.mode)) + (it.swapped ? ":swapped" : "");
    if (ws.store().contains("judge_runs", run_key_of(it, backend.id()))) {
      state[i] = 2;
      return;
    }
    try {
      auto o = opts;
      o.swapped = it.swapped;
      auto run = judge::run_judge(it.example_id, it.bundle, backend, o);
      ws.store().put_judge_run(run);
      state[i] = run.parsed ? 1 : 3;
      if (!run.parsed) errors[i] = Failure{item, run.parse_failure->code, run.parse_failure->message};
    } catch (const judge::JudgeFailure& e) {
      state[i] = 4;
      errors[i] = Failure{item, e.code(), e.detail() + " (retries " + std::to_string(e.retry_count()) + ")"};
    } catch (const CodedError& e) {
      state[i] = 4;
      errors[i] = Failure{item, e.code(), e.detail()};
    }
  });

  std::size_t judged = 0, cached = 0, parse_failures = 0, failed = 0;
  std::vector<Failure> failures = plan.failures;
  for (std::size_t i = 0; i < n; ++i) {
    judged += state[i] == 1;
    cached += state[i] == 2;
    parse_failures += state[i] == 3;
    failed += state[i] == 4;
    if (errors[i]) failures.push_back(*errors[i]);
  }
  StageResult r{"judge", ws.envelope("judge"), {}, !failures.empty()};
  r.report["result"] = {{"backend", backend.id()},
                        {"template_version", templates.version()},
                        {"planned", n},
                        {"judged", judged},
                        {"cached", cached},
                        {"parse_failures", parse_failures},
                        {"failed", failed + plan.failures.size()},
                        {"failures", to_json(failures)}};
  r.text = "judge (" + backend.id() + "): " + std::to_string(n) + " planned, " + std::to_string(judged) +
           " judged, " + std::to_string(cached) + " already stored, " + std::to_string(parse_failures) +
           " unparseable, " + std::to_string(failed + plan.failures.size()) + " failed\n";
  for (const auto& f : failures) r.text += "  fail " + f.item + " " + f.code + " " + f.message + "\n";
  ws.write_report(r, "judge");
  return r;
}

// ---------------------------------------------------------------------------
// Run selection for fuse, eval, probe and cost

struct Selection {
  // system name -> example id -> run in original A/B order
  std::map<std::string, std::map<std::string, judge::JudgeRun>> runs;
  std::map<std::string, std::vector<judge::JudgeRun>> swapped_runs;
  std::vector<std::string> systems;  // in configured mode order
  std::vector<Failure> missing;      // planned but not judged, or unrenderable
};

inline Selection select_runs(Workspace& ws, const std::string& backend_id) {
  auto templates = judge::TemplateSet::load(ws.config().prompts);
  auto plan = plan_judging(ws, templates);
  std::map<std::string, judge::JudgeRun> by_key;
  for (auto& r : ws.store().judge_runs()) by_key.emplace(datastore::Store::run_key(r), std::move(r));
  Selection s;
  for (auto m : ws.config().modes) s.systems.push_back(system_name(m));
  s.missing = plan.failures;
  for (const auto& it : plan.items) {
    auto found = by_key.find(run_key_of(it, backend_id));
    const auto sys = system_name(it.mode);
    if (found == by_key.end()) {
      s.missing.push_back({it.example_id + ":" + std::string(judge::to_string(it.mode)) + (it.swapped ? ":swapped" : ""),
                           "NOT_JUDGED", "no stored run for this configuration"});
      continue;
    }
    if (it.swapped)
      s.swapped_runs[sys].push_back(found->second);
    else
      s.runs[sys].emplace(it.example_id, found->second);
  }
  return s;
}

// ---------------------------------------------------------------------------
// fuse

inline StageResult run_fuse(Workspace& ws, const std::string& backend_id) {
  const auto& c = ws.config();
  auto sel = select_runs(ws, backend_id);
  const auto fn = fusion::resolve(c.policy, c.cap);
  std::string lines;
  std::vector<Failure> failures = sel.missing;
  std::map<std::string, std::size_t> fused;
  for (const auto& sys : sel.systems) {
    for (const auto& [id, run] : sel.runs[sys]) {
      auto d = run.decisions();
      if (!d) {
        failures.push_back({id + ":" + sys, run.parse_failure ? run.parse_failure->code : "UNPARSED", "no decisions"});
        continue;
      }
      ordered_json j;
      j["example_id"] = id;
      j["system"] = sys;
      j["content"] = std::string(to_string(d->content));
      j["voice_quality"] = std::string(to_string(d->voice_quality));
      j["paralinguistics"] = std::string(to_string(d->paralinguistics));
      j["overall"] = std::string(to_string(fn(*d)));
      j["run_config_digest"] = ws.digest();
      lines += j.dump() + "\n";
      ++fused[sys];
    }
  }
  io::write_atomic(ws.reports_dir() / "predictions.jsonl", lines);
  StageResult r{"fuse", ws.envelope("fuse"), {}, !failures.empty()};
  r.report["result"] = {{"fused", fused}, {"failures", to_json(failures)}};
  r.text = "fuse (" + std::string(fusion::to_string(c.policy)) + "):";
  for (const auto& sys : sel.systems) r.text += " " + sys + "=" + std::to_string(fused[sys]);
  r.text += ", " + std::to_string(failures.size()) + " unavailable\n";
  for (const auto& f : failures) r.text += "  skip " + f.item + " " + f.code + " " + f.message + "\n";
  ws.write_report(r, "fuse");
  return r;
}

// ---------------------------------------------------------------------------
// Truth labels

struct Truth {
  DimScores dims;
  Rating overall = Rating::both_good;
};

/// From `paths.truth` (JSONL of {example_id, content, voice_quality,
/// paralinguistics, overall}) when set, otherwise first-pass HCoT annotations.
inline std::map<std::string, Truth> load_truth(Workspace& ws) {
  std::map<std::string, Truth> out;
  std::set<std::string> ids;
  for (const auto& e : ws.examples()) ids.insert(e.example_id);
  const auto& c = ws.config();
  if (c.truth) {
    io::for_each_jsonl(*c.truth, [&](const json& j, std::size_t line) {
      try {
        Truth t;
        t.dims = dims(parse_rating(j.at("content").get<std::string>()),
                      parse_rating(j.at("voice_quality").get<std::string>()),
                      parse_rating(j.at("paralinguistics").get<std::string>()));
        t.overall = parse_rating(j.at("overall").get<std::string>());
        const auto id = j.at("example_id").get<std::string>();
        if (ids.count(id)) out.emplace(id, t);
      } catch (const std::exception& e) {
        throw invalid("paths.truth", c.truth->string() + ":" + std::to_string(line) + ": " + e.what());
      }
    });
    return out;
  }
  for (const auto& a : ws.store().annotations())
    if (a.pass == protocol::Pass::hcot && a.dims && ids.count(a.example_id))
      out.emplace(a.example_id, Truth{*a.dims, a.overall});
  return out;
}

// ---------------------------------------------------------------------------
// eval

struct EvalTables {
  stats::PairedOutcomes overall;
  std::array<stats::PairedOutcomes, 3> dims;  // content, voice_quality, paralinguistics
  std::vector<Failure> dropped;
  std::size_t unlabeled = 0;
};

inline EvalTables build_outcomes(Workspace& ws, const Selection& sel, const std::map<std::string, Truth>& truth) {
  const auto fn = fusion::resolve(ws.config().policy, ws.config().cap);
  EvalTables t;
  t.overall.systems = sel.systems;
  for (auto& d : t.dims) d.systems = sel.systems;
  for (const auto& e : ws.examples()) {
    auto tr = truth.find(e.example_id);
    if (tr == truth.end()) {
      ++t.unlabeled;
      continue;
    }
    std::map<std::string, DimScores> decided;
    bool ok = true;
    for (const auto& sys : sel.systems) {
      auto rs = sel.runs.find(sys);
      const judge::JudgeRun* run = nullptr;
      if (rs != sel.runs.end())
        if (auto it = rs->second.find(e.example_id); it != rs->second.end()) run = &it->second;
      if (!run) {
        t.dropped.push_back({e.example_id, "NOT_JUDGED", sys});
        ok = false;
        break;
      }
      if (!run->decisions()) {
        t.dropped.push_back({e.example_id, run->parse_failure ? run->parse_failure->code : "UNPARSED", sys});
        ok = false;
        break;
      }
      decided[sys] = *run->decisions();
    }
    if (!ok) continue;
    stats::OutcomeRow row{e.example_id, tr->second.overall, {}};
    for (const auto& [sys, d] : decided) row.predictions[sys] = fn(d);
    t.overall.rows.push_back(row);
    for (auto dim : all_dimensions) {
      const auto k = static_cast<std::size_t>(dim);
      stats::OutcomeRow dr{e.example_id, tr->second.dims.at(dim), {}};
      for (const auto& [sys, d] : decided) dr.predictions[sys] = d.at(dim);
      t.dims[k].rows.push_back(dr);
    }
  }
  return t;
}

inline StageResult run_eval(Workspace& ws, const std::string& backend_id) {
  const auto& c = ws.config();
  auto sel = select_runs(ws, backend_id);
  auto truth = load_truth(ws);
  auto t = build_outcomes(ws, sel, truth);
  if (t.overall.rows.empty())
    throw CodedError("INSUFFICIENT_DATA", "no example has both truth labels and decisions from every system");
  stats::BootstrapOptions bo;
  bo.replicates = c.replicates;
  bo.seed = c.seed;
  bo.level = c.level;
  bo.workers = c.workers;

  StageResult r{"eval", ws.envelope("eval"), {}, !t.dropped.empty()};
  ordered_json res;
  res["n"] = t.overall.rows.size();
  res["arity"] = static_cast<int>(c.arity);
  res["bootstrap"] = {{"flavor", "percentile"},
                      {"resampling", "paired over examples"},
                      {"replicates", c.replicates},
                      {"seed", c.seed},
                      {"level", c.level}};
  res["unlabeled"] = t.unlabeled;
  res["dropped"] = to_json(t.dropped);

  struct Row {
    std::string judge;
    std::array<std::string, 3> dims;
    std::string overall;
  };
  std::vector<Row> table;
  const double chance = 1.0 / static_cast<double>(static_cast<int>(c.arity));
  table.push_back({"Random Guess", {pct(0.25), pct(0.25), pct(0.25)}, pct(chance)});

  ordered_json rows = ordered_json::array();
  rows.push_back({{"judge", "Random Guess"},
                  {"content", 0.25},
                  {"voice_quality", 0.25},
                  {"paralinguistics", 0.25},
                  {"overall", chance}});
  for (const auto& sys : sel.systems) {
    ordered_json row;
    row["judge"] = sys;
    Row tr{sys, {}, {}};
    for (auto dim : all_dimensions) {
      const auto k = static_cast<std::size_t>(dim);
      auto f = stats::accuracy(t.dims[k], sys, Arity::four_way);
      row[std::string(to_string(dim))] = {{"accuracy", f.value}, {"n", f.n}};
      tr.dims[k] = pct(f.value);
    }
    auto acc = stats::accuracy_ci(t.overall, sys, c.arity, bo);
    row["overall"] = {{"accuracy", acc.accuracy.value}, {"n", acc.accuracy.n}, {"ci", stats::to_json(acc.ci)}};
    tr.overall = pct(acc.accuracy.value) + " (" + pct(acc.ci.lo) + "-" + pct(acc.ci.hi) + ")";
    rows.push_back(row);
    table.push_back(tr);
  }

  // Human-human row when a resampled HCoT pass exists.
  std::optional<Row> human;
  if (!c.truth) {
    std::map<std::string, protocol::AnnotationRecord> first, second;
    std::set<std::string> ids;
    for (const auto& e : ws.examples()) ids.insert(e.example_id);
    for (const auto& a : ws.store().annotations()) {
      if (!ids.count(a.example_id) || !a.dims) continue;
      if (a.pass == protocol::Pass::hcot) first.emplace(a.example_id, a);
      if (a.pass == protocol::Pass::hcot_resample) second.emplace(a.example_id, a);
    }
    stats::PairedOutcomes hh_overall;
    std::array<stats::PairedOutcomes, 3> hh_dims;
    hh_overall.systems = {"human"};
    for (auto& d : hh_dims) d.systems = {"human"};
    for (const auto& [id, b] : second) {
      auto a = first.find(id);
      if (a == first.end()) continue;
      hh_overall.rows.push_back({id, a->second.overall, {{"human", b.overall}}});
      for (auto dim : all_dimensions)
        hh_dims[static_cast<std::size_t>(dim)].rows.push_back(
            {id, a->second.dims->at(dim), {{"human", b.dims->at(dim)}}});
    }
    if (!hh_overall.rows.empty()) {
      ordered_json row;
      row["judge"] = "Human-human agreement";
      Row hr{"Human-human agreement", {}, {}};
      for (auto dim : all_dimensions) {
        const auto k = static_cast<std::size_t>(dim);
        auto f = stats::accuracy(hh_dims[k], "human", Arity::four_way);
        row[std::string(to_string(dim))] = {{"accuracy", f.value}, {"n", f.n}};
        hr.dims[k] = pct(f.value);
      }
      try {
        auto f = stats::accuracy(hh_overall, "human", c.arity);
        row["overall"] = {{"accuracy", f.value}, {"n", f.n}};
        hr.overall = pct(f.value);
      } catch (const CodedError&) {
        row["overall"] = nullptr;
        hr.overall = "-";
      }
      rows.push_back(row);
      human = hr;
    }
  }
  if (human) table.push_back(*human);
  res["rows"] = rows;

  ordered_json mc = ordered_json::array();
  std::string mc_text;
  for (std::size_t i = 0; i < sel.systems.size(); ++i)
    for (std::size_t j = i + 1; j < sel.systems.size(); ++j) {
      const auto& a = sel.systems[i];
      const auto& b = sel.systems[j];
      auto m = stats::mcnemar(stats::correctness(t.overall, a, c.arity), stats::correctness(t.overall, b, c.arity));
      mc.push_back({{"a", a}, {"b", b}, {"b_count", m.b}, {"c_count", m.c}, {"p_value", m.p_value},
                    {"no_discordant", m.no_discordant}});
      char buf[160];
      std::snprintf(buf, sizeof buf, "%-14s vs %-14s b=%-4zu c=%-4zu p=%.4g%s\n", a.c_str(), b.c_str(), m.b, m.c,
                    m.p_value, m.no_discordant ? " (no discordant pairs)" : "");
      mc_text += buf;
    }
  res["mcnemar"] = mc;

  ordered_json conf = ordered_json::object();
  for (const auto& sys : sel.systems) conf[sys] = stats::to_json(stats::confusion(t.overall, sys));
  res["confusion"] = conf;
  r.report["result"] = res;

  // Text table
  std::string& out = r.text;
  char line[256];
  out += "TRACE evaluation  run_config " + ws.digest() + "\n";
  out += "dataset " + (c.dataset ? std::string(datastore::to_string(*c.dataset)) : std::string("all")) + "  policy " +
         std::string(fusion::to_string(c.policy)) + " (" + (c.cap == fusion::CapMode::strict ? "strict" : "lenient") +
         " cap)  arity " + std::to_string(static_cast<int>(c.arity)) + "  N " + std::to_string(t.overall.rows.size()) +
         "\n";
  std::snprintf(line, sizeof line, "bootstrap percentile, paired over examples, replicates %zu, seed %llu, level %.2f\n",
                c.replicates, static_cast<unsigned long long>(c.seed), c.level);
  out += line;
  if (!t.dropped.empty()) out += "dropped " + std::to_string(t.dropped.size()) + " examples (see report)\n";
  out += "\n";
  std::snprintf(line, sizeof line, "%-24s %8s %14s %16s  %s\n", "Judge", "Content", "Voice Quality", "Paralinguistics",
                "Overall");
  out += line;
  for (const auto& row : table) {
    std::snprintf(line, sizeof line, "%-24s %8s %14s %16s  %s\n", row.judge.c_str(), row.dims[0].c_str(),
                  row.dims[1].c_str(), row.dims[2].c_str(), row.overall.c_str());
    out += line;
  }
  out += "Per-dimension columns are 4-way; Overall is " + std::to_string(static_cast<int>(c.arity)) +
         "-way with a " + pct(c.level) + "% CI.\n";
  if (!mc_text.empty()) out += "\nMcNemar, exact two-sided, on overall correctness\n" + mc_text;
  for (const auto& sys : sel.systems) {
    auto m = stats::confusion(t.overall, sys);
    out += "\nConfusion " + sys + " (rows truth, cols prediction: 1 2 both_good both_bad)\n";
    for (std::size_t k = 0; k < 4; ++k) {
      std::snprintf(line, sizeof line, "  %-10s %5zu %5zu %5zu %5zu\n", std::string(to_string(all_ratings[k])).c_str(),
                    m.counts[k][0], m.counts[k][1], m.counts[k][2], m.counts[k][3]);
      out += line;
    }
    std::snprintf(line, sizeof line, "  weighted precision %.3f  weighted recall %.3f\n", m.weighted_precision,
                  m.weighted_recall);
    out += line;
  }
  ws.write_report(r, "eval");
  stats::PairedOutcomes export_po = t.overall;
  datastore::export_outcomes(export_po, ws.reports_dir() / "outcomes.jsonl");
  return r;
}

// ---------------------------------------------------------------------------
// probe

inline StageResult run_probe_stage(Workspace& ws, const std::string& backend_id, probes::Probe which) {
  const auto& c = ws.config();
  auto sel = select_runs(ws, backend_id);
  auto truth = load_truth(ws);
  std::map<std::string, std::vector<probes::ProbeRow>> rows;
  std::vector<Failure> skipped;
  for (const auto& sys : sel.systems)
    for (const auto& [id, run] : sel.runs[sys]) {
      auto d = run.decisions();
      if (!d) {
        skipped.push_back({id + ":" + sys, run.parse_failure ? run.parse_failure->code : "UNPARSED", "no decisions"});
        continue;
      }
      probes::ProbeRow row{id, *d, std::nullopt, std::nullopt};
      if (auto t = truth.find(id); t != truth.end()) {
        row.truth_dims = t->second.dims;
        row.truth_overall = t->second.overall;
      }
      rows[sys].push_back(row);
    }
  auto rep = probes::run_probe(which, rows, {c.policy, c.cap});
  const std::string name = "probe_" + std::string(probes::to_string(which));
  StageResult r{"probe", ws.envelope("probe"), {}, !skipped.empty()};
  r.report["result"] = probes::to_json(rep);
  r.report["skipped"] = to_json(skipped);

  std::string csv = probes::to_csv(rep);
  std::string tagged;
  std::size_t pos = 0;
  bool header = true;
  while (pos < csv.size()) {
    auto nl = csv.find('\n', pos);
    if (nl == std::string::npos) nl = csv.size();
    tagged += csv.substr(pos, nl - pos) + (header ? ",run_config" : "," + ws.digest()) + "\n";
    header = false;
    pos = nl + 1;
  }
  io::write_atomic(ws.reports_dir() / (name + ".csv"), tagged);
  r.text = tagged;
  ws.write_report(r, name);
  return r;
}

// ---------------------------------------------------------------------------
// cost

/// GPU hours per mode: configured values win; otherwise the fetch meter,
/// counting ASR for the transcript judge and every feature for TRACE.
inline double gpu_hours_for(const Workspace& ws, judge::Mode m) {
  const auto& c = ws.config();
  if (auto it = c.gpu_hours.find(m); it != c.gpu_hours.end()) return it->second;
  if (m == judge::Mode::audio || !fs::exists(ws.meter_path())) return 0.0;
  auto meter = json::parse(io::read_text(ws.meter_path()));
  double secs = meter.value("asr", 0.0);
  if (m == judge::Mode::trace_blueprint)
    secs += meter.value("emotion", 0.0) + meter.value("accent", 0.0) + meter.value("mos", 0.0);
  return secs / 3600.0;
}

inline StageResult run_cost(Workspace& ws, const std::string& backend_id) {
  const auto& c = ws.config();
  require(c.prices.has_value(), "paths.prices", "required for cost");
  auto sheet = costing::PriceSheet::from_config(config::KeyValues::load(*c.prices));
  auto sel = select_runs(ws, backend_id);
  std::vector<std::pair<std::string, costing::CostReport>> columns;
  ordered_json cols = ordered_json::object();
  for (auto m : c.modes) {
    const auto sys = system_name(m);
    std::vector<judge::JudgeRun> runs;
    for (const auto& [id, run] : sel.runs[sys]) runs.push_back(run);
    for (const auto& run : sel.swapped_runs[sys]) runs.push_back(run);
    auto rep = costing::accumulate(runs, gpu_hours_for(ws, m), sheet);
    columns.emplace_back(sys, rep);
    cols[sys] = costing::to_json(rep);
  }
  StageResult r{"cost", ws.envelope("cost"), {}, !sel.missing.empty()};
  r.report["result"] = {{"columns", cols}, {"missing", to_json(sel.missing)}};
  r.text = costing::table(columns, sheet);
  ws.write_report(r, "cost");
  return r;
}

// ---------------------------------------------------------------------------
// agree

/// Label sources: orig, blind, hcot, hcot_resample (from the store),
/// system:<name> (fused predictions), or a JSONL file of {example_id, label}.
inline stats::LabelSet label_source(Workspace& ws, const std::string& spec, protocol::Target target,
                                    const std::string& backend_id) {
  const auto& c = ws.config();
  if (spec == "orig") {
    if (target != protocol::Target::overall) throw invalid("target", "original labels are overall only");
    return datastore::original_labels(ws.store(), c.dataset);
  }
  if (auto pass = protocol::try_parse_pass(spec)) {
    if (*pass == protocol::Pass::blind_overall_first && target != protocol::Target::overall)
      throw invalid("target", "blind passes are overall only");
    return datastore::label_set(ws.store(), *pass, c.dataset, target);
  }
  if (spec.rfind("system:", 0) == 0) {
    const auto sys = spec.substr(7);
    auto sel = select_runs(ws, backend_id);
    auto it = sel.runs.find(sys);
    if (it == sel.runs.end()) throw invalid("labels", "no runs for system '" + sys + "'");
    const auto fn = fusion::resolve(c.policy, c.cap);
    stats::LabelSet out;
    for (const auto& [id, run] : it->second) {
      auto d = run.decisions();
      if (!d) continue;
      Rating r = target == protocol::Target::overall ? fn(*d)
                 : target == protocol::Target::content ? d->content
                 : target == protocol::Target::voice_quality ? d->voice_quality
                                                             : d->paralinguistics;
      out.emplace(id, std::string(to_string(r)));
    }
    return out;
  }
  if (!fs::is_regular_file(spec)) throw invalid("labels", "unknown label source '" + spec + "'");
  stats::LabelSet out;
  io::for_each_jsonl(spec, [&](const json& j, std::size_t line) {
    try {
      out.emplace(j.at("example_id").get<std::string>(), j.at("label").get<std::string>());
    } catch (const std::exception& e) {
      throw invalid("labels", spec + ":" + std::to_string(line) + ": " + e.what());
    }
  });
  return out;
}

inline StageResult run_agree(Workspace& ws, const std::string& a, const std::string& b, protocol::Target target,
                             const std::string& backend_id) {
  const auto& c = ws.config();
  auto la = label_source(ws, a, target, backend_id);
  auto lb = label_source(ws, b, target, backend_id);
  stats::BootstrapOptions bo;
  bo.replicates = c.replicates;
  bo.seed = c.seed;
  bo.level = c.level;
  bo.workers = c.workers;
  auto rep = stats::agreement(la, lb, bo);
  StageResult r{"agree", ws.envelope("agree"), {}, false};
  r.report["result"] = {{"a", a}, {"b", b}, {"target", std::string(protocol::to_string(target))},
                        {"agreement", stats::to_json(rep)}};
  char line[256];
  r.text = "agreement " + a + " vs " + b + " (" + std::string(protocol::to_string(target)) + "), overlap " +
           std::to_string(rep.overlap) + "\n";
  for (const auto& x : rep.by_arity) {
    if (!x.available) {
      std::snprintf(line, sizeof line, "  %d-way  unavailable\n", static_cast<int>(x.arity));
    } else if (x.kappa) {
      std::snprintf(line, sizeof line, "  %d-way  N=%zu  agreement %s [%s, %s]  kappa %.3f [%.3f, %.3f]\n",
                    static_cast<int>(x.arity), x.agreement.n, pct(x.agreement.value).c_str(), pct(x.ci.lo).c_str(),
                    pct(x.ci.hi).c_str(), x.kappa->kappa, x.kappa->ci.lo, x.kappa->ci.hi);
    } else {
      std::snprintf(line, sizeof line, "  %d-way  N=%zu  agreement %s [%s, %s]  kappa undefined\n",
                    static_cast<int>(x.arity), x.agreement.n, pct(x.agreement.value).c_str(), pct(x.ci.lo).c_str(),
                    pct(x.ci.hi).c_str());
    }
    r.text += line;
  }
  ws.write_report(r, "agree");
  return r;
}

}  // namespace trace::pipeline
