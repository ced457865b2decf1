#pragma once

// Clients for the neural feature sources (ASR, emotion, accent, MOS). The
// models themselves run elsewhere; this side validates payloads, caches them
// by audio content hash and fans requests out with bounded parallelism.

#include <httplib.h>

#include <array>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <string_view>
#include <thread>
#include <unordered_map>
#include <variant>
#include <vector>

#include "trace/error.hpp"
#include "trace/hash.hpp"
#include "trace/io.hpp"
#include "trace/parallel.hpp"

namespace trace::extract {

namespace fs = std::filesystem;
using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

enum class Feature { asr, emotion, accent, mos };
enum class BackendKind { http_service, precomputed_file };

inline constexpr std::array<Feature, 4> all_features{Feature::asr, Feature::emotion, Feature::accent, Feature::mos};

constexpr std::string_view to_string(Feature f) {
  switch (f) {
    case Feature::asr: return "ASR";
    case Feature::emotion: return "EMOTION";
    case Feature::accent: return "ACCENT";
    case Feature::mos: return "MOS";
  }
  return "?";
}

inline std::optional<Feature> try_parse_feature(std::string_view s) {
  for (auto f : all_features) {
    if (s == to_string(f)) return f;
  }
  if (s == "asr") return Feature::asr;
  if (s == "emotion") return Feature::emotion;
  if (s == "accent") return Feature::accent;
  if (s == "mos") return Feature::mos;
  return std::nullopt;
}

constexpr std::string_view to_string(BackendKind b) {
  return b == BackendKind::http_service ? "HTTP_SERVICE" : "PRECOMPUTED_FILE";
}

// ---------------------------------------------------------------------------
// Payload types

inline constexpr std::array<std::string_view, 9> emotion_keys{
    "angry", "disgusted", "fearful", "happy", "neutral", "other", "sad", "surprised", "unknown"};

// Key order (and the "southatlandtic" spelling) follow the released example.
inline constexpr std::array<std::string_view, 16> accent_keys{
    "england",  "us",        "canada",         "australia", "indian",      "scotland", "ireland", "african",
    "malaysia", "newzealand", "southatlandtic", "bermuda",   "philippines", "hongkong", "wales",   "singapore"};

struct Transcript {
  std::string text;
  friend bool operator==(const Transcript&, const Transcript&) = default;
};

struct EmotionVector {
  std::array<double, 9> scores{};
  /// Set when the scores sum to 1 within [0.99, 1.01]. Non-distributions are
  /// kept verbatim, never renormalised.
  bool is_distribution = false;
  double at(std::string_view key) const {
    for (std::size_t i = 0; i < emotion_keys.size(); ++i)
      if (emotion_keys[i] == key) return scores[i];
    throw std::out_of_range("no emotion key " + std::string(key));
  }
  friend bool operator==(const EmotionVector&, const EmotionVector&) = default;
};

struct AccentVector {
  std::array<double, 16> similarity{};
  double at(std::string_view key) const {
    for (std::size_t i = 0; i < accent_keys.size(); ++i)
      if (accent_keys[i] == key) return similarity[i];
    throw std::out_of_range("no accent key " + std::string(key));
  }
  friend bool operator==(const AccentVector&, const AccentVector&) = default;
};

struct QualityScores {
  double sig = 0, bak = 0, ovrl = 0, p808 = 0;
  friend bool operator==(const QualityScores&, const QualityScores&) = default;
};

using Payload = std::variant<Transcript, EmotionVector, AccentVector, QualityScores>;

inline Feature feature_of(const Payload& p) {
  return static_cast<Feature>(p.index());
}

namespace detail {

[[noreturn]] inline void malformed(Feature f, const std::string& why) {
  throw CodedError("MALFORMED_PAYLOAD", std::string(to_string(f)) + ": " + why);
}

inline const json& require_object(Feature f, const json& j) {
  if (!j.is_object()) malformed(f, "payload must be a JSON object");
  return j;
}

inline double require_number(Feature f, const json& obj, std::string_view key, double lo, double hi) {
  auto it = obj.find(std::string(key));
  if (it == obj.end()) malformed(f, "missing key '" + std::string(key) + "'");
  if (!it->is_number()) malformed(f, "'" + std::string(key) + "' is not a number");
  const double v = it->get<double>();
  if (!std::isfinite(v) || v < lo || v > hi)
    malformed(f, "'" + std::string(key) + "' = " + it->dump() + " outside [" + json(lo).dump() + ", " +
                     json(hi).dump() + "]");
  return v;
}

template <std::size_t N>
void require_exact_keys(Feature f, const json& obj, const std::array<std::string_view, N>& keys) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool known = false;
    for (auto k : keys) known = known || k == it.key();
    if (!known) malformed(f, "unexpected key '" + it.key() + "'");
  }
}

}  // namespace detail

/// Schema validation shared by every backend, so a payload accepted from one
/// source is accepted identically from another.
inline Payload validate_payload(Feature f, const json& j) {
  switch (f) {
    case Feature::asr: {
      if (j.is_string()) return Transcript{j.get<std::string>()};
      const auto& o = detail::require_object(f, j);
      auto it = o.find("text");
      if (it == o.end() || !it->is_string()) detail::malformed(f, "missing string key 'text'");
      return Transcript{it->get<std::string>()};
    }
    case Feature::emotion: {
      const auto& o = detail::require_object(f, j);
      detail::require_exact_keys(f, o, emotion_keys);
      EmotionVector v;
      double sum = 0;
      for (std::size_t i = 0; i < emotion_keys.size(); ++i) {
        v.scores[i] = detail::require_number(f, o, emotion_keys[i], 0.0, 1.0);
        sum += v.scores[i];
      }
      v.is_distribution = sum >= 0.99 && sum <= 1.01;
      return v;
    }
    case Feature::accent: {
      const auto& o = detail::require_object(f, j);
      detail::require_exact_keys(f, o, accent_keys);
      AccentVector v;
      for (std::size_t i = 0; i < accent_keys.size(); ++i)
        v.similarity[i] = detail::require_number(f, o, accent_keys[i], -1.0, 1.0);
      return v;
    }
    case Feature::mos: {
      const auto& o = detail::require_object(f, j);
      static constexpr std::array<std::string_view, 4> keys{"sig", "bak", "ovrl", "p808"};
      detail::require_exact_keys(f, o, keys);
      return QualityScores{detail::require_number(f, o, "sig", 1.0, 5.0), detail::require_number(f, o, "bak", 1.0, 5.0),
                           detail::require_number(f, o, "ovrl", 1.0, 5.0),
                           detail::require_number(f, o, "p808", 1.0, 5.0)};
    }
  }
  detail::malformed(f, "unknown feature");
}

inline ordered_json to_json(const Payload& p) {
  ordered_json out = ordered_json::object();
  std::visit(
      [&](const auto& v) {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, Transcript>) {
          out["text"] = v.text;
        } else if constexpr (std::is_same_v<T, EmotionVector>) {
          for (std::size_t i = 0; i < emotion_keys.size(); ++i) out[std::string(emotion_keys[i])] = v.scores[i];
        } else if constexpr (std::is_same_v<T, AccentVector>) {
          for (std::size_t i = 0; i < accent_keys.size(); ++i) out[std::string(accent_keys[i])] = v.similarity[i];
        } else {
          out["sig"] = v.sig;
          out["bak"] = v.bak;
          out["ovrl"] = v.ovrl;
          out["p808"] = v.p808;
        }
      },
      p);
  return out;
}

// ---------------------------------------------------------------------------
// Specs and sources

struct ClipRef {
  std::string clip_id;
  fs::path audio_path;
  std::string audio_hash;  // sha256 hex of the audio file bytes
};

struct ExtractorSpec {
  Feature feature = Feature::asr;
  BackendKind backend = BackendKind::precomputed_file;
  std::string location;  // URL for HTTP, manifest path for files
  double timeout_seconds = 30.0;
  int max_retries = 2;

  void validate() const {
    if (location.empty()) throw CodedError("INVALID_SPEC", std::string(to_string(feature)) + ": empty location");
    if (backend == BackendKind::http_service) {
      if (location.rfind("http://", 0) != 0)
        throw CodedError("INVALID_SPEC", std::string(to_string(feature)) + ": not an http:// URL: " + location);
    } else if (!fs::exists(location)) {
      throw CodedError("INVALID_SPEC", std::string(to_string(feature)) + ": manifest not found: " + location);
    }
    if (timeout_seconds <= 0) throw CodedError("INVALID_SPEC", "timeout must be positive");
    if (max_retries < 0) throw CodedError("INVALID_SPEC", "max_retries must be >= 0");
  }
};

class FeatureSource {
 public:
  virtual ~FeatureSource() = default;
  virtual Feature feature() const = 0;
  /// Stable identity used in cache keys; changing backend invalidates.
  virtual std::string identity() const = 0;
  /// Raw (unvalidated) payload for one clip. Throws CodedError; TIMEOUT and
  /// TRANSPORT are treated as retryable.
  virtual json fetch_raw(const ClipRef& clip) = 0;
};

/// JSONL manifest of {clip_id, feature, payload}. Rows for other features are
/// ignored, so one manifest may carry all four.
class PrecomputedSource : public FeatureSource {
 public:
  PrecomputedSource(Feature f, const fs::path& manifest) : feature_(f), manifest_(manifest) {
    io::for_each_jsonl(manifest, [&](const json& row, std::size_t line) {
      if (!row.is_object() || !row.contains("clip_id") || !row.contains("feature") || !row.contains("payload"))
        throw CodedError("MALFORMED_MANIFEST", manifest.string() + ":" + std::to_string(line) +
                                                   ": rows need clip_id, feature, payload");
      auto rf = try_parse_feature(row["feature"].get<std::string>());
      if (!rf) throw CodedError("MALFORMED_MANIFEST", manifest.string() + ":" + std::to_string(line) + ": bad feature");
      if (*rf == f) rows_[row["clip_id"].get<std::string>()] = row["payload"];
    });
    identity_ = "file:" + hash::short_digest(hash::sha256_file(manifest));
  }

  Feature feature() const override { return feature_; }
  std::string identity() const override { return identity_; }

  json fetch_raw(const ClipRef& clip) override {
    auto it = rows_.find(clip.clip_id);
    if (it == rows_.end())
      throw CodedError("MISSING_PRECOMPUTED", std::string(to_string(feature_)) + " for clip " + clip.clip_id);
    return it->second;
  }

 private:
  Feature feature_;
  fs::path manifest_;
  std::string identity_;
  std::unordered_map<std::string, json> rows_;
};

/// POSTs the clip as multipart form data (fields: audio, clip_id, feature)
/// and expects the payload JSON in the response body.
class HttpSource : public FeatureSource {
 public:
  HttpSource(Feature f, std::string url, double timeout_seconds, std::string api_key = {})
      : feature_(f), url_(std::move(url)), timeout_(timeout_seconds), api_key_(std::move(api_key)) {
    const auto scheme_end = url_.find("://");
    if (scheme_end == std::string::npos) throw CodedError("INVALID_SPEC", "bad URL " + url_);
    const auto path_start = url_.find('/', scheme_end + 3);
    base_ = path_start == std::string::npos ? url_ : url_.substr(0, path_start);
    path_ = path_start == std::string::npos ? "/" : url_.substr(path_start);
  }

  Feature feature() const override { return feature_; }
  std::string identity() const override { return "http:" + url_; }

  json fetch_raw(const ClipRef& clip) override {
    httplib::Client cli(base_);
    const auto us = std::chrono::microseconds(static_cast<long long>(timeout_ * 1e6));
    cli.set_connection_timeout(std::chrono::duration_cast<std::chrono::seconds>(us).count(),
                               static_cast<long>(us.count() % 1000000));
    cli.set_read_timeout(std::chrono::duration_cast<std::chrono::seconds>(us).count(),
                         static_cast<long>(us.count() % 1000000));
    httplib::Headers headers;
    if (!api_key_.empty()) headers.emplace("Authorization", "Bearer " + api_key_);
    const std::string bytes = clip.audio_path.empty() ? std::string() : io::read_text(clip.audio_path);
    httplib::MultipartFormDataItems items{
        {"audio", bytes, clip.audio_path.filename().string(), "application/octet-stream"},
        {"clip_id", clip.clip_id, "", ""},
        {"feature", std::string(to_string(feature_)), "", ""},
    };
    auto res = cli.Post(path_, headers, items);
    if (!res) {
      const auto err = res.error();
      if (err == httplib::Error::Read || err == httplib::Error::Write || err == httplib::Error::ConnectionTimeout)
        throw CodedError("TIMEOUT", url_ + ": " + httplib::to_string(err));
      throw CodedError("TRANSPORT", url_ + ": " + httplib::to_string(err));
    }
    if (res->status == 404) throw CodedError("MISSING_PRECOMPUTED", url_ + " has no result for " + clip.clip_id);
    if (res->status >= 500 || res->status == 429)
      throw CodedError("TRANSPORT", url_ + ": HTTP " + std::to_string(res->status));
    if (res->status != 200) throw CodedError("MALFORMED_PAYLOAD", url_ + ": HTTP " + std::to_string(res->status));
    try {
      return json::parse(res->body);
    } catch (const json::parse_error& e) {
      throw CodedError("MALFORMED_PAYLOAD", url_ + ": response is not JSON: " + e.what());
    }
  }

 private:
  Feature feature_;
  std::string url_;
  std::string base_;
  std::string path_;
  double timeout_;
  std::string api_key_;
};

inline std::unique_ptr<FeatureSource> make_source(const ExtractorSpec& spec, std::string api_key = {}) {
  spec.validate();
  if (spec.backend == BackendKind::precomputed_file)
    return std::make_unique<PrecomputedSource>(spec.feature, spec.location);
  return std::make_unique<HttpSource>(spec.feature, spec.location, spec.timeout_seconds, std::move(api_key));
}

// ---------------------------------------------------------------------------
// Content-addressed cache

class FeatureCache {
 public:
  explicit FeatureCache(fs::path root) : root_(std::move(root)) { fs::create_directories(root_); }

  static std::string key(Feature f, std::string_view audio_hash, std::string_view backend_identity) {
    hash::Sha256 h;
    h.update(to_string(f)).update("\n").update(audio_hash).update("\n").update(backend_identity);
    return h.hex();
  }

  std::optional<Payload> get(Feature f, const std::string& key) const {
    std::shared_lock lk(mu_);
    const auto p = path_for(key);
    if (!fs::exists(p)) return std::nullopt;
    return validate_payload(f, json::parse(io::read_text(p)));
  }

  /// Idempotent: rewriting a key with the same payload leaves identical bytes.
  void put(const std::string& key, const Payload& payload) {
    std::unique_lock lk(mu_);
    io::write_atomic(path_for(key), to_json(payload).dump() + "\n");
  }

  const fs::path& root() const { return root_; }

 private:
  fs::path path_for(const std::string& key) const { return root_ / key.substr(0, 2) / (key + ".json"); }

  fs::path root_;
  mutable std::shared_mutex mu_;
};

// ---------------------------------------------------------------------------
// Fetching

struct FetchOptions {
  int max_retries = 2;
  std::chrono::milliseconds backoff{50};
};

inline bool retryable(const CodedError& e) { return e.code() == "TIMEOUT" || e.code() == "TRANSPORT"; }

/// Cached, validated fetch. `backend_calls`, when given, counts requests that
/// reached the source (cache misses and retries).
inline Payload fetch_feature(FeatureSource& source, const ClipRef& clip, FeatureCache* cache,
                             const FetchOptions& opts = {}, std::atomic<std::size_t>* backend_calls = nullptr) {
  const auto f = source.feature();
  std::string key;
  if (cache) {
    key = FeatureCache::key(f, clip.audio_hash, source.identity());
    if (auto hit = cache->get(f, key)) return *hit;
  }
  for (int attempt = 0;; ++attempt) {
    try {
      if (backend_calls) backend_calls->fetch_add(1);
      Payload p = validate_payload(f, source.fetch_raw(clip));
      if (cache) cache->put(key, p);
      return p;
    } catch (const CodedError& e) {
      if (!retryable(e) || attempt >= opts.max_retries) throw;
      std::this_thread::sleep_for(opts.backoff * (1 << attempt));
    }
  }
}

struct FetchFailure {
  std::string clip_id;
  Feature feature = Feature::asr;
  std::string code;
  std::string message;
};

struct BatchResult {
  std::map<std::string, std::map<Feature, Payload>> features;
  std::vector<FetchFailure> failures;
  std::size_t backend_calls = 0;
};

/// Partial success is the contract: failures are collected, never raised.
inline BatchResult batch_fetch(const std::vector<FeatureSource*>& sources, const std::vector<ClipRef>& clips,
                               FeatureCache* cache, std::size_t parallelism = 8, const FetchOptions& opts = {}) {
  BatchResult result;
  const std::size_t n = sources.size() * clips.size();
  std::vector<std::optional<Payload>> slots(n);
  std::vector<std::optional<FetchFailure>> errors(n);
  std::atomic<std::size_t> calls{0};
  parallel_for(n, parallelism, [&](std::size_t i) {
    const auto& clip = clips[i / sources.size()];
    auto& src = *sources[i % sources.size()];
    try {
      slots[i] = fetch_feature(src, clip, cache, opts, &calls);
    } catch (const CodedError& e) {
      errors[i] = FetchFailure{clip.clip_id, src.feature(), e.code(), e.what()};
    } catch (const std::exception& e) {
      errors[i] = FetchFailure{clip.clip_id, src.feature(), "INTERNAL", e.what()};
    }
  });
  for (std::size_t i = 0; i < n; ++i) {
    const auto& clip = clips[i / sources.size()];
    if (slots[i]) result.features[clip.clip_id].emplace(sources[i % sources.size()]->feature(), *slots[i]);
    if (errors[i]) result.failures.push_back(*errors[i]);
  }
  result.backend_calls = calls.load();
  return result;
}

}  // namespace trace::extract
