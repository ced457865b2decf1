#pragma once

// Synthetic replay corpus: harmonic "voices" with a pause, a manifest,
// precomputed extractor payloads, truth labels, and a replay fixture whose
// responses are keyed by the digests of the bundles this pipeline renders.

#include <cmath>
#include <cstdio>
#include <numbers>
#include <filesystem>
#include <string>
#include <vector>

#include "support/signals.hpp"
#include "trace/pipeline.hpp"
#include "trace/stats.hpp"

namespace trace::synth {

namespace fs = std::filesystem;
using json = nlohmann::json;

struct Corpus {
  fs::path root;
  fs::path audio_dir;
  fs::path manifest;
  fs::path features;
  fs::path truth;
  fs::path fixture;
  fs::path prices;
  fs::path config;
  std::size_t n = 0;
};

/// Voiced signal: f0 plus two harmonics, syllable-rate amplitude modulation,
/// a silent gap in the middle.
inline audio::AudioClip voice(double f0, double seconds, double amp, double sr = 16000) {
  audio::AudioClip clip;
  clip.sample_rate = sr;
  const auto n = static_cast<std::size_t>(seconds * sr);
  clip.samples.resize(n);
  const double gap_lo = 0.45 * seconds, gap_hi = gap_lo + 0.3;
  for (std::size_t i = 0; i < n; ++i) {
    const double t = static_cast<double>(i) / sr;
    if (t >= gap_lo && t < gap_hi) continue;
    const double env = 0.6 + 0.4 * std::sin(2 * std::numbers::pi * 4.0 * t);
    const double f = f0 * (1.0 + 0.03 * std::sin(2 * std::numbers::pi * 5.0 * t));
    const double ph = 2 * std::numbers::pi * f * t;
    clip.samples[i] = static_cast<float>(amp * env * (0.6 * std::sin(ph) + 0.25 * std::sin(2 * ph) + 0.15 * std::sin(3 * ph)));
  }
  return clip;
}

inline Rating random_rating(stats::SplitMix64& rng) { return all_ratings[rng.below(4)]; }

inline std::string fmt3(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  return buf;
}

inline pipeline::RunConfig corpus_config(const Corpus& c, const fs::path& work, const fs::path& prompts) {
  config::KeyValues kv;
  kv.set("dataset", "custom");
  kv.set("seed", "11");
  kv.set("replicates", "2000");
  kv.set("workers", "2");
  kv.set("paths.work", work.string());
  kv.set("paths.prompts", prompts.string());
  kv.set("paths.truth", c.truth.string());
  kv.set("paths.prices", c.prices.string());
  kv.set("ingest.manifest", c.manifest.string());
  kv.set("ingest.audio_dir", c.audio_dir.string());
  kv.set("features.manifest", c.features.string());
  kv.set("judge.modes", "trace,transcript,audio");
  kv.set("judge.backend", "replay");
  kv.set("judge.fixture", c.fixture.string());
  return pipeline::RunConfig::from(kv);
}

/// Per-mode chance that a dimension decision deviates from the truth.
inline double error_rate(judge::Mode m) {
  switch (m) {
    case judge::Mode::trace_blueprint: return 0.2;
    case judge::Mode::transcript_only: return 0.35;
    case judge::Mode::audio: return 0.4;
  }
  return 0.5;
}

inline std::string response_text(const DimScores& d, std::size_t k) {
  const auto dialect = k % 2 == 0 ? judge::Dialect::prompt_table : judge::Dialect::listing;
  auto obj = judge::serialize_decisions(d, dialect);
  if (k % 7 == 3) return "Here is my assessment.\n```json\n" + obj.dump(2) + "\n```\n";
  return obj.dump();
}

/// Runs ingest through blueprint in a scratch work dir and records one
/// response per rendered bundle.
inline void write_fixture(const Corpus& c, const fs::path& prompts, const std::map<std::string, DimScores>& truth,
                          std::uint64_t seed) {
  const auto scratch = c.root / "scratch";
  fs::remove_all(scratch);
  io::write_atomic(c.fixture, "");
  {
    pipeline::Workspace ws(corpus_config(c, scratch, prompts));
    pipeline::run_ingest(ws);
    pipeline::run_extract(ws);
    pipeline::run_fetch_features(ws);
    pipeline::run_blueprint(ws);
    auto templates = judge::TemplateSet::load(prompts);
    auto plan = pipeline::plan_judging(ws, templates);
    if (!plan.failures.empty()) throw CodedError("CORPUS", "unrenderable bundle: " + plan.failures.front().message);
    std::string lines;
    std::size_t k = 0;
    for (const auto& it : plan.items) {
      stats::SplitMix64 rng(seed ^ 0x5eedULL, k);
      DimScores d = truth.at(it.example_id);
      for (auto dim : all_dimensions) {
        const double u = static_cast<double>(rng.next() >> 11) * 0x1.0p-53;
        if (u < error_rate(it.mode)) d.set(dim, random_rating(rng));
      }
      if (it.swapped) d = judge::swap_sides(d);
      d.reasoning = {"content notes", "voice notes", "delivery notes"};
      json row;
      row["bundle_digest"] = it.bundle.digest();
      row["raw_response"] = response_text(d, k);
      row["usage"] = {{"text_in", static_cast<long long>(it.bundle.user_text.size() / 4 + 300)},
                      {"audio_in", it.mode == judge::Mode::audio ? 1200LL : 0LL},
                      {"text_out", 90LL + static_cast<long long>(k % 40)}};
      lines += row.dump() + "\n";
      ++k;
    }
    io::write_atomic(c.fixture, lines);
  }
  fs::remove_all(scratch);
}

inline Corpus make_corpus(const fs::path& root, const fs::path& prompts, std::size_t n = 20, std::uint64_t seed = 7) {
  Corpus c;
  c.root = root;
  c.n = n;
  c.audio_dir = root / "audio";
  c.manifest = root / "manifest.jsonl";
  c.features = root / "features.jsonl";
  c.truth = root / "truth.jsonl";
  c.fixture = root / "fixture.jsonl";
  c.prices = root / "prices.toml";
  c.config = root / "trace.toml";
  fs::create_directories(c.audio_dir);

  static const char* words[] = {"sure", "here", "is", "a", "calm", "reply", "about", "the", "weather", "today",
                                "with", "some", "extra", "detail", "and", "warmth"};
  std::string manifest, features, truth_lines;
  std::map<std::string, DimScores> truth;
  for (std::size_t i = 0; i < n; ++i) {
    stats::SplitMix64 rng(seed, i);
    char id_buf[32];
    std::snprintf(id_buf, sizeof id_buf, "ex%02zu", i);
    const std::string id = id_buf;
    auto uni = [&] { return static_cast<double>(rng.next() >> 11) * 0x1.0p-53; };

    audio::save_wav(c.audio_dir / (id + "_prompt.wav"), voice(110 + 40 * uni(), 1.0, 0.5));
    audio::save_wav(c.audio_dir / (id + "_a.wav"), voice(100 + 150 * uni(), 1.2, 0.2 + 0.6 * uni()));
    audio::save_wav(c.audio_dir / (id + "_b.wav"), voice(100 + 150 * uni(), 1.2, 0.2 + 0.6 * uni()));

    json m{{"id", id},
           {"prompt_audio", id + "_prompt.wav"},
           {"audio_a", id + "_a.wav"},
           {"audio_b", id + "_b.wav"},
           {"prompt_text", "Please answer question " + std::to_string(i) + " in a friendly, upbeat voice."}};
    const auto orig = rng.below(3);
    m["label"] = orig == 0 ? "1" : orig == 1 ? "2" : "tie";
    manifest += m.dump() + "\n";

    for (std::string side : {"a", "b"}) {
      const auto clip = id + "." + side;
      std::string text;
      const auto nwords = 4 + rng.below(10);
      for (std::size_t w = 0; w < nwords; ++w) text += std::string(w ? " " : "") + words[rng.below(16)];
      features += json{{"clip_id", clip}, {"feature", "asr"}, {"payload", {{"text", text}}}}.dump() + "\n";
      json emo = json::object();
      std::vector<double> raw;
      double sum = 0;
      for (std::size_t k = 0; k < extract::emotion_keys.size(); ++k) {
        raw.push_back(uni() + (k == 4 ? 2.0 : 0.0));
        sum += raw.back();
      }
      for (std::size_t k = 0; k < extract::emotion_keys.size(); ++k)
        emo[std::string(extract::emotion_keys[k])] = raw[k] / sum;
      features += json{{"clip_id", clip}, {"feature", "emotion"}, {"payload", emo}}.dump() + "\n";
      json acc = json::object();
      for (auto key : extract::accent_keys) acc[std::string(key)] = std::round((uni() * 2 - 1) * 1000) / 1000;
      features += json{{"clip_id", clip}, {"feature", "accent"}, {"payload", acc}}.dump() + "\n";
      json mos{{"sig", 1 + 4 * uni()}, {"bak", 1 + 4 * uni()}, {"ovrl", 1 + 4 * uni()}, {"p808", 1 + 4 * uni()}};
      features += json{{"clip_id", clip}, {"feature", "mos"}, {"payload", mos}}.dump() + "\n";
    }

    DimScores d = dims(random_rating(rng), random_rating(rng), random_rating(rng));
    Rating overall = fusion::fuse_speakbench(d);
    if (rng.below(10) == 0) overall = random_rating(rng);
    truth[id] = d;
    truth_lines += json{{"example_id", id},
                        {"content", std::string(to_string(d.content))},
                        {"voice_quality", std::string(to_string(d.voice_quality))},
                        {"paralinguistics", std::string(to_string(d.paralinguistics))},
                        {"overall", std::string(to_string(overall))}}
                       .dump() +
                   "\n";
  }
  io::write_atomic(c.manifest, manifest);
  io::write_atomic(c.features, features);
  io::write_atomic(c.truth, truth_lines);
  io::write_atomic(c.prices,
                   "[prices]\ntext_in_per_million = 2.5\naudio_in_per_million = 40.0\n"
                   "text_out_per_million = 10.0\ngpu_rate_per_hour = 0.404\n");
  io::write_atomic(c.config, "dataset = custom\nseed = 11\nreplicates = 2000\n[paths]\nprompts = \"" +
                                 prompts.string() +
                                 "\"\ntruth = truth.jsonl\nprices = prices.toml\n[ingest]\nmanifest = manifest.jsonl\n"
                                 "audio_dir = audio\n[features]\nmanifest = features.jsonl\n[judge]\n"
                                 "modes = trace,transcript,audio\nbackend = replay\nfixture = fixture.jsonl\n");
  write_fixture(c, prompts, truth, seed);
  return c;
}

/// ingest -> extract -> fetch-features -> blueprint -> judge -> fuse -> eval.
inline std::vector<pipeline::StageResult> run_all(pipeline::Workspace& ws) {
  std::vector<pipeline::StageResult> out;
  out.push_back(pipeline::run_ingest(ws));
  out.push_back(pipeline::run_extract(ws));
  out.push_back(pipeline::run_fetch_features(ws));
  out.push_back(pipeline::run_blueprint(ws));
  auto backend = pipeline::make_backend(ws.config());
  out.push_back(pipeline::run_judging(ws, *backend));
  out.push_back(pipeline::run_fuse(ws, backend->id()));
  out.push_back(pipeline::run_eval(ws, backend->id()));
  return out;
}

}  // namespace trace::synth
