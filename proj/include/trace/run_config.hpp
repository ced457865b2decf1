#pragma once

// RunConfig: everything a pipeline invocation depends on, loaded from a
// TOML-style key/value file overlaid with command-line values.
//
//   dataset = speakbench          policy = speakbench_tree     cap = strict
//   arity = 4   seed = 0   replicates = 10000   level = 0.95   ablate = emotion
//   workers = 4
//   [paths]     work, prompts, truth, prices
//   [ingest]    manifest, audio_dir, exclusions
//   [features]  manifest (all features) | asr, emotion, accent, mos (file or http:// URL)
//               timeout_seconds, max_retries, parallelism
//   [judge]     modes, backend (replay|openai), fixture, base_url, model, audio,
//               temperature, max_tokens, max_retries, requests_per_minute,
//               tokens_per_minute, swap_ab
//   [cost]      gpu_hours.<mode>
//   [server], [annotators]   consumed by `serve`
//
// Relative paths in a config file are taken relative to that file.

#include <cctype>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "trace/blueprint.hpp"
#include "trace/config.hpp"
#include "trace/datastore.hpp"
#include "trace/error.hpp"
#include "trace/extractors.hpp"
#include "trace/fusion.hpp"
#include "trace/hash.hpp"
#include "trace/judge.hpp"
#include "trace/labels.hpp"
#include "trace/parallel.hpp"

namespace trace::pipeline {

namespace fs = std::filesystem;
using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

/// Lowercase feature name as used in config keys, meter and feature files.
inline std::string feature_key(extract::Feature f) {
  std::string s(extract::to_string(f));
  for (auto& ch : s) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  return s;
}

inline CodedError invalid(const std::string& field, const std::string& message) {
  return CodedError("INVALID_CONFIG", field + ": " + message);
}

/// Display name of a judge mode in reports.
inline std::string system_name(judge::Mode m) {
  switch (m) {
    case judge::Mode::trace_blueprint: return "TRACE";
    case judge::Mode::transcript_only: return "LLM Judge";
    case judge::Mode::audio: return "Audio Judge";
  }
  return "?";
}

struct RunConfig {
  std::optional<datastore::Dataset> dataset;
  fusion::Policy policy = fusion::Policy::speakbench_tree;
  fusion::CapMode cap = fusion::CapMode::strict;
  Arity arity = Arity::four_way;
  std::uint64_t seed = 0;
  std::size_t replicates = 10000;
  double level = 0.95;
  blueprint::AblationMask mask;
  std::size_t workers = default_workers();

  fs::path work = "trace-work";
  fs::path prompts = "prompts";
  std::optional<fs::path> truth;
  std::optional<fs::path> prices;

  std::optional<fs::path> manifest;
  std::optional<fs::path> audio_dir;
  std::optional<fs::path> exclusions;

  std::map<extract::Feature, std::string> sources;  // file path or http:// URL
  double extractor_timeout = 30.0;
  int extractor_retries = 2;
  std::size_t extractor_parallelism = 8;

  std::vector<judge::Mode> modes{judge::Mode::trace_blueprint};
  std::string backend = "replay";
  std::optional<fs::path> fixture;
  std::string base_url;
  std::string model;
  bool audio_capable = false;
  judge::DecodeParams decode;
  int judge_retries = 3;
  int requests_per_minute = 0;
  long long tokens_per_minute = 0;
  bool swap_ab = false;

  std::map<judge::Mode, double> gpu_hours;

  static RunConfig from(const config::KeyValues& kv);

  /// Result-affecting settings plus digests of every input file. Paths and
  /// worker counts are left out so relocated inputs give the same digest.
  ordered_json to_json() const;
  std::string digest() const { return hash::short_digest(hash::sha256_hex(to_json().dump())); }
};

namespace detail {

inline const std::set<std::string>& known_keys() {
  static const std::set<std::string> keys{
      "dataset",           "policy",           "cap",
      "arity",             "seed",             "replicates",
      "level",             "ablate",           "workers",
      "paths.work",        "paths.prompts",    "paths.truth",
      "paths.prices",      "ingest.manifest",  "ingest.audio_dir",
      "ingest.exclusions", "features.manifest", "features.asr",
      "features.emotion",  "features.accent",  "features.mos",
      "features.timeout_seconds", "features.max_retries", "features.parallelism",
      "judge.modes",       "judge.backend",    "judge.fixture",
      "judge.base_url",    "judge.model",      "judge.audio",
      "judge.temperature", "judge.max_tokens", "judge.max_retries",
      "judge.requests_per_minute", "judge.tokens_per_minute", "judge.swap_ab"};
  return keys;
}

inline bool is_path_key(const std::string& k) {
  static const std::set<std::string> keys{"paths.work",       "paths.prompts",     "paths.truth",
                                          "paths.prices",     "ingest.manifest",   "ingest.audio_dir",
                                          "ingest.exclusions", "features.manifest", "features.asr",
                                          "features.emotion", "features.accent",   "features.mos",
                                          "judge.fixture",    "server.ui_dir"};
  return keys.count(k) != 0;
}

inline double number(const config::KeyValues& kv, const std::string& key, double lo, double hi) {
  std::optional<double> v;
  try {
    v = kv.get_number(key);
  } catch (const CodedError&) {
    throw invalid(key, "not a number: '" + *kv.get(key) + "'");
  }
  if (!(*v >= lo && *v <= hi)) throw invalid(key, "out of range: " + *kv.get(key));
  return *v;
}

inline long long integer(const config::KeyValues& kv, const std::string& key, long long lo, long long hi) {
  const double v = number(kv, key, static_cast<double>(lo), static_cast<double>(hi));
  if (v != static_cast<double>(static_cast<long long>(v))) throw invalid(key, "not an integer: " + *kv.get(key));
  return static_cast<long long>(v);
}

inline bool boolean(const config::KeyValues& kv, const std::string& key) {
  const auto v = *kv.get(key);
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw invalid(key, "expected true or false, got '" + v + "'");
}

inline std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::size_t pos = 0;
  while (pos <= s.size()) {
    auto comma = s.find(',', pos);
    if (comma == std::string::npos) comma = s.size();
    auto item = std::string(config::trim(std::string_view(s).substr(pos, comma - pos)));
    if (!item.empty()) out.push_back(item);
    pos = comma + 1;
  }
  return out;
}

inline ordered_json file_digest(const std::optional<fs::path>& p) {
  if (!p) return nullptr;
  if (!fs::is_regular_file(*p)) return "missing";
  return hash::short_digest(hash::sha256_file(*p));
}

}  // namespace detail

/// Reads a config file, resolving relative paths against its directory.
inline config::KeyValues load_config_file(const fs::path& file) {
  auto kv = config::KeyValues::load(file);
  const auto base = fs::absolute(file).parent_path();
  for (const auto& [k, v] : kv.entries()) {
    if (!detail::is_path_key(k) || v.rfind("http://", 0) == 0 || v.rfind("https://", 0) == 0) continue;
    if (fs::path(v).is_relative()) kv.set(k, (base / v).lexically_normal().string());
  }
  return kv;
}

inline RunConfig RunConfig::from(const config::KeyValues& kv) {
  using namespace detail;
  for (const auto& [k, v] : kv.entries()) {
    if (k.rfind("server.", 0) == 0 || k.rfind("annotators.", 0) == 0 || k.rfind("cost.gpu_hours.", 0) == 0) continue;
    if (!known_keys().count(k)) throw invalid(k, "unknown key");
  }
  RunConfig c;
  auto path = [&](const char* key) -> std::optional<fs::path> {
    if (auto v = kv.get(key)) return fs::path(*v);
    return std::nullopt;
  };

  if (auto v = kv.get("dataset")) {
    c.dataset = datastore::try_parse_dataset(*v);
    if (!c.dataset) throw invalid("dataset", "unknown value '" + *v + "' (expected speakbench, s2s_arena, custom)");
  }
  if (auto v = kv.get("policy")) {
    auto p = fusion::try_parse_policy(*v);
    if (!p) throw invalid("policy", "unknown value '" + *v + "' (expected speakbench_tree, s2s_arena_cap, majority_vote)");
    c.policy = *p;
  }
  if (auto v = kv.get("cap")) {
    auto m = fusion::try_parse_cap(*v);
    if (!m) throw invalid("cap", "unknown value '" + *v + "' (expected strict, lenient)");
    c.cap = *m;
  }
  if (auto v = kv.get("arity")) {
    auto a = parse_arity(*v);
    if (!a) throw invalid("arity", "unknown value '" + *v + "' (expected 2, 3, 4)");
    c.arity = *a;
  }
  if (kv.has("seed")) c.seed = static_cast<std::uint64_t>(integer(kv, "seed", 0, 9007199254740991LL));
  if (kv.has("replicates")) c.replicates = static_cast<std::size_t>(integer(kv, "replicates", 1000, 100000000));
  if (kv.has("level")) {
    c.level = number(kv, "level", 0, 1);
    if (c.level <= 0 || c.level >= 1) throw invalid("level", "must lie strictly between 0 and 1");
  }
  if (auto v = kv.get("ablate")) {
    try {
      c.mask = blueprint::AblationMask::parse(*v);
    } catch (const CodedError& e) {
      throw CodedError("INVALID_CONFIG", e.detail());
    }
  }
  if (kv.has("workers")) c.workers = static_cast<std::size_t>(integer(kv, "workers", 1, 1024));

  if (auto p = path("paths.work")) c.work = *p;
  if (auto p = path("paths.prompts")) c.prompts = *p;
  c.truth = path("paths.truth");
  c.prices = path("paths.prices");
  c.manifest = path("ingest.manifest");
  c.audio_dir = path("ingest.audio_dir");
  c.exclusions = path("ingest.exclusions");

  if (auto v = kv.get("features.manifest"))
    for (auto f : extract::all_features) c.sources[f] = *v;
  for (auto f : extract::all_features)
    if (auto v = kv.get("features." + feature_key(f))) c.sources[f] = *v;
  if (kv.has("features.timeout_seconds")) c.extractor_timeout = number(kv, "features.timeout_seconds", 0.001, 3600);
  if (kv.has("features.max_retries")) c.extractor_retries = static_cast<int>(integer(kv, "features.max_retries", 0, 20));
  if (kv.has("features.parallelism"))
    c.extractor_parallelism = static_cast<std::size_t>(integer(kv, "features.parallelism", 1, 256));

  if (auto v = kv.get("judge.modes")) {
    c.modes.clear();
    for (const auto& item : split_csv(*v)) {
      auto m = judge::try_parse_mode(item);
      if (!m) throw invalid("judge.modes", "unknown value '" + item + "' (expected trace_blueprint, transcript_only, audio)");
      if (std::find(c.modes.begin(), c.modes.end(), *m) == c.modes.end()) c.modes.push_back(*m);
    }
    if (c.modes.empty()) throw invalid("judge.modes", "empty");
  }
  if (auto v = kv.get("judge.backend")) {
    if (*v != "replay" && *v != "openai") throw invalid("judge.backend", "unknown value '" + *v + "' (expected replay, openai)");
    c.backend = *v;
  }
  c.fixture = path("judge.fixture");
  c.base_url = kv.get_or("judge.base_url", "");
  c.model = kv.get_or("judge.model", "");
  if (kv.has("judge.audio")) c.audio_capable = boolean(kv, "judge.audio");
  if (kv.has("judge.temperature")) c.decode.temperature = number(kv, "judge.temperature", 0, 2);
  if (kv.has("judge.max_tokens")) c.decode.max_tokens = static_cast<int>(integer(kv, "judge.max_tokens", 1, 1000000));
  c.decode.model = c.model;
  if (kv.has("judge.max_retries")) c.judge_retries = static_cast<int>(integer(kv, "judge.max_retries", 0, 20));
  if (kv.has("judge.requests_per_minute"))
    c.requests_per_minute = static_cast<int>(integer(kv, "judge.requests_per_minute", 0, 1000000));
  if (kv.has("judge.tokens_per_minute"))
    c.tokens_per_minute = integer(kv, "judge.tokens_per_minute", 0, 1000000000000LL);
  if (kv.has("judge.swap_ab")) c.swap_ab = boolean(kv, "judge.swap_ab");

  for (const auto& [k, v] : kv.entries()) {
    if (k.rfind("cost.gpu_hours.", 0) != 0) continue;
    auto m = judge::try_parse_mode(k.substr(15));
    if (!m) throw invalid(k, "unknown judge mode");
    c.gpu_hours[*m] = number(kv, k, 0, 1e9);
  }

  if (c.backend == "openai") {
    if (c.base_url.empty()) throw invalid("judge.base_url", "required for the openai backend");
    if (c.model.empty()) throw invalid("judge.model", "required for the openai backend");
  }
  for (const auto& [f, loc] : c.sources)
    if (loc.rfind("https://", 0) == 0)
      throw invalid("features." + feature_key(f), "extractor services must use http://");
  return c;
}

inline ordered_json RunConfig::to_json() const {
  ordered_json j;
  j["dataset"] = dataset ? ordered_json(std::string(datastore::to_string(*dataset))) : ordered_json(nullptr);
  j["policy"] = std::string(fusion::to_string(policy));
  j["cap"] = cap == fusion::CapMode::strict ? "strict" : "lenient";
  j["arity"] = static_cast<int>(arity);
  j["ablate"] = mask.to_string();
  j["bootstrap"] = {{"flavor", "percentile"}, {"replicates", replicates}, {"seed", seed}, {"level", level}};
  ordered_json modes_j = ordered_json::array();
  for (auto m : modes) modes_j.push_back(std::string(judge::to_string(m)));
  ordered_json judge_j;
  judge_j["modes"] = modes_j;
  judge_j["backend"] = backend;
  if (backend == "replay")
    judge_j["fixture"] = detail::file_digest(fixture);
  else
    judge_j["endpoint"] = base_url;
  judge_j["model"] = model;
  judge_j["audio"] = audio_capable;
  judge_j["temperature"] = decode.temperature;
  judge_j["max_tokens"] = decode.max_tokens;
  judge_j["swap_ab"] = swap_ab;
  j["judge"] = judge_j;
  ordered_json feats = ordered_json::object();
  for (const auto& [f, loc] : sources) {
    const bool http = loc.rfind("http://", 0) == 0;
    feats[feature_key(f)] = http ? ordered_json(loc) : detail::file_digest(fs::path(loc));
  }
  j["features"] = feats;
  ordered_json inputs;
  inputs["manifest"] = detail::file_digest(manifest);
  inputs["exclusions"] = detail::file_digest(exclusions);
  inputs["truth"] = detail::file_digest(truth);
  inputs["prices"] = detail::file_digest(prices);
  try {
    inputs["prompts"] = judge::TemplateSet::load(prompts).version();
  } catch (const CodedError&) {
    inputs["prompts"] = nullptr;
  }
  j["inputs"] = inputs;
  ordered_json gpu = ordered_json::object();
  for (const auto& [m, h] : gpu_hours) gpu[std::string(judge::to_string(m))] = h;
  j["gpu_hours"] = gpu;
  return j;
}

}  // namespace trace::pipeline
