#pragma once

// Signal-level prosody features: autocorrelation pitch, BS.1770 gated
// loudness, and energy-based speech activity for speech/articulation rates.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "trace/audio.hpp"

namespace trace::acoustics {

using audio::AudioClip;

enum class ErrorKind { empty_clip, no_voiced_frames, all_gated, zero_duration, low_sample_rate };

constexpr std::string_view to_string(ErrorKind k) {
  switch (k) {
    case ErrorKind::empty_clip: return "EMPTY_CLIP";
    case ErrorKind::no_voiced_frames: return "NO_VOICED_FRAMES";
    case ErrorKind::all_gated: return "ALL_GATED";
    case ErrorKind::zero_duration: return "ZERO_DURATION";
    case ErrorKind::low_sample_rate: return "LOW_SAMPLE_RATE";
  }
  return "?";
}

class AcousticsError : public std::runtime_error {
 public:
  AcousticsError(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

inline double round2(double x) { return std::round(x * 100.0) / 100.0; }

/// Uniform linear resampling to `points` values. Endpoints map to endpoints.
inline std::vector<double> resample_linear(std::span<const double> values, std::size_t points) {
  std::vector<double> out;
  if (values.empty() || points == 0) return out;
  out.reserve(points);
  if (values.size() == 1 || points == 1) {
    out.assign(points, values.front());
    if (points == 1) out[0] = values.front();
    return out;
  }
  const double step = static_cast<double>(values.size() - 1) / static_cast<double>(points - 1);
  for (std::size_t i = 0; i < points; ++i) {
    const double x = step * static_cast<double>(i);
    auto lo = static_cast<std::size_t>(std::floor(x));
    if (lo >= values.size() - 1) {
      out.push_back(values.back());
      continue;
    }
    const double frac = x - static_cast<double>(lo);
    out.push_back(values[lo] + (values[lo + 1] - values[lo]) * frac);
  }
  return out;
}

inline double mean(std::span<const double> v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

inline double population_std(std::span<const double> v) {
  if (v.size() < 2) return 0.0;
  const double m = mean(v);
  double acc = 0.0;
  for (double x : v) acc += (x - m) * (x - m);
  return std::sqrt(acc / static_cast<double>(v.size()));
}

// ---------------------------------------------------------------------------
// Pitch

struct PitchConfig {
  double frame_seconds = 0.040;
  double hop_seconds = 0.010;
  double voicing_threshold = 0.45;  // on the normalized autocorrelation peak
  double min_hz = 60.0;
  double max_hz = 500.0;
  double silence_rms = 1e-4;
  // Octave guard: the first local peak reaching this fraction of the best
  // peak wins over later (sub-harmonic) lags.
  double first_peak_ratio = 0.9;
};

/// Per-frame f0 in Hz for voiced frames only, in time order.
inline std::vector<double> track_pitch(const AudioClip& clip, const PitchConfig& cfg = {}) {
  std::vector<double> f0;
  const double sr = clip.sample_rate;
  const auto frame = static_cast<std::size_t>(std::lround(cfg.frame_seconds * sr));
  const auto hop = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(cfg.hop_seconds * sr)));
  const auto lag_min = static_cast<std::size_t>(std::max(2.0, std::floor(sr / cfg.max_hz)));
  const auto lag_max = static_cast<std::size_t>(std::ceil(sr / cfg.min_hz));
  if (frame < 4 || lag_max + 2 >= frame) return f0;

  std::vector<double> x(frame);
  std::vector<double> r(lag_max + 2, 0.0);
  for (std::size_t start = 0; start + frame <= clip.samples.size(); start += hop) {
    double dc = 0.0;
    for (std::size_t i = 0; i < frame; ++i) dc += clip.samples[start + i];
    dc /= static_cast<double>(frame);
    double energy = 0.0;
    for (std::size_t i = 0; i < frame; ++i) {
      x[i] = clip.samples[start + i] - dc;
      energy += x[i] * x[i];
    }
    if (std::sqrt(energy / static_cast<double>(frame)) < cfg.silence_rms) continue;

    // Prefix sums of squares make each normalization term O(1).
    std::vector<double> sq(frame + 1, 0.0);
    for (std::size_t i = 0; i < frame; ++i) sq[i + 1] = sq[i] + x[i] * x[i];
    for (std::size_t lag = lag_min - 1; lag <= lag_max + 1; ++lag) {
      const std::size_t n = frame - lag;
      double num = 0.0;
      for (std::size_t i = 0; i < n; ++i) num += x[i] * x[i + lag];
      const double e0 = sq[n];
      const double e1 = sq[frame] - sq[lag];
      r[lag] = (e0 > 0 && e1 > 0) ? num / std::sqrt(e0 * e1) : 0.0;
    }

    double best = -1.0;
    for (std::size_t lag = lag_min; lag <= lag_max; ++lag)
      if (r[lag] > r[lag - 1] && r[lag] >= r[lag + 1]) best = std::max(best, r[lag]);
    if (best < cfg.voicing_threshold) continue;

    std::size_t chosen = 0;
    for (std::size_t lag = lag_min; lag <= lag_max; ++lag) {
      if (r[lag] > r[lag - 1] && r[lag] >= r[lag + 1] && r[lag] >= cfg.first_peak_ratio * best) {
        chosen = lag;
        break;
      }
    }
    const double a = r[chosen - 1], b = r[chosen], c = r[chosen + 1];
    const double denom = a - 2.0 * b + c;
    const double delta = denom != 0.0 ? 0.5 * (a - c) / denom : 0.0;
    const double period = static_cast<double>(chosen) + std::clamp(delta, -0.5, 0.5);
    const double hz = sr / period;
    if (hz >= cfg.min_hz && hz <= cfg.max_hz) f0.push_back(hz);
  }
  return f0;
}

struct PitchStats {
  double mean_hz = 0.0;
  double std_hz = 0.0;
  std::vector<double> contour_hz;
  friend bool operator==(const PitchStats&, const PitchStats&) = default;
};

inline PitchStats estimate_pitch(const AudioClip& clip, std::size_t contour_points = 20,
                                 const PitchConfig& cfg = {}) {
  if (clip.empty()) throw AcousticsError(ErrorKind::empty_clip, "pitch estimation needs samples");
  const auto track = track_pitch(clip, cfg);
  if (track.empty()) throw AcousticsError(ErrorKind::no_voiced_frames, "no frame passed the voicing test");
  PitchStats s;
  s.mean_hz = round2(mean(track));
  s.std_hz = round2(population_std(track));
  for (double v : resample_linear(track, contour_points)) s.contour_hz.push_back(round2(v));
  return s;
}

// ---------------------------------------------------------------------------
// Loudness (ITU-R BS.1770-4)

struct Biquad {
  double b0 = 1, b1 = 0, b2 = 0, a1 = 0, a2 = 0;
};

/// K-weighting stages derived from the analog prototype so any sample rate
/// works; at 48 kHz this reproduces the coefficients tabulated in BS.1770.
inline std::pair<Biquad, Biquad> k_weighting(double sample_rate) {
  const double pi = 3.14159265358979323846;
  Biquad shelf;
  {
    const double f0 = 1681.974450955533;
    const double gain_db = 3.999843853973347;
    const double q = 0.7071752369554196;
    const double k = std::tan(pi * f0 / sample_rate);
    const double vh = std::pow(10.0, gain_db / 20.0);
    const double vb = std::pow(vh, 0.4996667741545416);
    const double a0 = 1.0 + k / q + k * k;
    shelf.b0 = (vh + vb * k / q + k * k) / a0;
    shelf.b1 = 2.0 * (k * k - vh) / a0;
    shelf.b2 = (vh - vb * k / q + k * k) / a0;
    shelf.a1 = 2.0 * (k * k - 1.0) / a0;
    shelf.a2 = (1.0 - k / q + k * k) / a0;
  }
  Biquad highpass;
  {
    const double f0 = 38.13547087602444;
    const double q = 0.5003270373238773;
    const double k = std::tan(pi * f0 / sample_rate);
    const double a0 = 1.0 + k / q + k * k;
    highpass.b0 = 1.0;
    highpass.b1 = -2.0;
    highpass.b2 = 1.0;
    highpass.a1 = 2.0 * (k * k - 1.0) / a0;
    highpass.a2 = (1.0 - k / q + k * k) / a0;
  }
  return {shelf, highpass};
}

inline std::vector<double> run_filter(const Biquad& f, std::span<const double> in) {
  std::vector<double> out(in.size());
  double x1 = 0, x2 = 0, y1 = 0, y2 = 0;
  for (std::size_t i = 0; i < in.size(); ++i) {
    const double x = in[i];
    const double y = f.b0 * x + f.b1 * x1 + f.b2 * x2 - f.a1 * y1 - f.a2 * y2;
    x2 = x1;
    x1 = x;
    y2 = y1;
    y1 = y;
    out[i] = y;
  }
  return out;
}

struct LoudnessConfig {
  double block_seconds = 0.400;
  double hop_seconds = 0.100;  // 75% overlap
  double absolute_gate_lufs = -70.0;
  double relative_gate_lu = -10.0;
};

struct LoudnessStats {
  double integrated_lufs = 0.0;
  double std_lufs = 0.0;
  std::vector<double> contour_lufs;
  friend bool operator==(const LoudnessStats&, const LoudnessStats&) = default;
};

inline double block_lufs(double mean_square) { return -0.691 + 10.0 * std::log10(mean_square); }

/// Mean-square energy of each K-weighted block, in time order.
inline std::vector<double> block_energies(const AudioClip& clip, const LoudnessConfig& cfg = {}) {
  std::vector<double> x(clip.samples.begin(), clip.samples.end());
  const auto [shelf, hp] = k_weighting(clip.sample_rate);
  const auto y = run_filter(hp, run_filter(shelf, x));
  const auto block = static_cast<std::size_t>(std::lround(cfg.block_seconds * clip.sample_rate));
  const auto hop = static_cast<std::size_t>(std::lround(cfg.hop_seconds * clip.sample_rate));
  std::vector<double> z;
  auto energy = [&](std::size_t start, std::size_t len) {
    double acc = 0.0;
    for (std::size_t i = start; i < start + len; ++i) acc += y[i] * y[i];
    return acc / static_cast<double>(len);
  };
  if (y.size() < block) {
    if (!y.empty()) z.push_back(energy(0, y.size()));
    return z;
  }
  for (std::size_t start = 0; start + block <= y.size(); start += hop) z.push_back(energy(start, block));
  return z;
}

inline LoudnessStats measure_loudness(const AudioClip& clip, std::size_t contour_points = 20,
                                      const LoudnessConfig& cfg = {}) {
  if (clip.empty()) throw AcousticsError(ErrorKind::empty_clip, "loudness needs samples");
  if (clip.sample_rate < 8000.0) throw AcousticsError(ErrorKind::low_sample_rate, "loudness needs >= 8 kHz");
  const auto z = block_energies(clip, cfg);

  std::vector<double> above_abs;
  for (double e : z)
    if (e > 0.0 && block_lufs(e) > cfg.absolute_gate_lufs) above_abs.push_back(e);
  if (above_abs.empty()) throw AcousticsError(ErrorKind::all_gated, "every block is below the absolute gate");

  const double relative_gate = block_lufs(mean(above_abs)) + cfg.relative_gate_lu;
  std::vector<double> gated_energy;
  std::vector<double> gated_lufs;
  for (double e : z) {
    if (e <= 0.0) continue;
    const double l = block_lufs(e);
    if (l > cfg.absolute_gate_lufs && l > relative_gate) {
      gated_energy.push_back(e);
      gated_lufs.push_back(l);
    }
  }
  LoudnessStats s;
  s.integrated_lufs = round2(block_lufs(mean(gated_energy)));
  s.std_lufs = round2(population_std(gated_lufs));
  for (double v : resample_linear(gated_lufs, contour_points)) s.contour_lufs.push_back(round2(v));
  return s;
}

// ---------------------------------------------------------------------------
// Speech activity and rates

struct ActivityConfig {
  double frame_seconds = 0.010;
  double threshold_db = -40.0;  // frame RMS relative to clip peak
  double hysteresis_db = 3.0;   // release threshold sits this far below onset
  double min_pause_seconds = 0.200;
};

struct ActivitySummary {
  double duration_seconds = 0.0;
  double pause_seconds = 0.0;
  double active_seconds() const { return duration_seconds - pause_seconds; }
};

inline ActivitySummary detect_activity(const AudioClip& clip, const ActivityConfig& cfg = {}) {
  ActivitySummary out;
  out.duration_seconds = clip.duration();
  if (clip.empty()) return out;

  float peak = 0.0f;
  for (float s : clip.samples) peak = std::max(peak, std::fabs(s));
  if (peak <= 0.0f) {
    out.pause_seconds = out.duration_seconds;
    return out;
  }
  const auto frame = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(cfg.frame_seconds * clip.sample_rate)));
  const auto min_pause = static_cast<std::size_t>(std::lround(cfg.min_pause_seconds * clip.sample_rate));

  bool active = false;
  std::size_t silent_run = 0;
  std::size_t pause_samples = 0;
  auto close_run = [&] {
    if (silent_run >= min_pause) pause_samples += silent_run;
    silent_run = 0;
  };
  for (std::size_t start = 0; start < clip.samples.size(); start += frame) {
    const std::size_t len = std::min(frame, clip.samples.size() - start);
    double acc = 0.0;
    for (std::size_t i = start; i < start + len; ++i) acc += static_cast<double>(clip.samples[i]) * clip.samples[i];
    const double rms = std::sqrt(acc / static_cast<double>(len));
    const double db = rms > 0 ? 20.0 * std::log10(rms / peak) : -1e9;
    active = active ? db > cfg.threshold_db - cfg.hysteresis_db : db > cfg.threshold_db;
    if (active) {
      close_run();
    } else {
      silent_run += len;
    }
  }
  close_run();
  out.pause_seconds = static_cast<double>(pause_samples) / clip.sample_rate;
  return out;
}

inline std::size_t count_words(std::string_view transcript) {
  std::istringstream in{std::string(transcript)};
  std::size_t n = 0;
  for (std::string w; in >> w;) ++n;
  return n;
}

struct SpeechRates {
  double speech_rate_wpm = 0.0;
  double articulation_rate_wpm = 0.0;
  friend bool operator==(const SpeechRates&, const SpeechRates&) = default;
};

inline SpeechRates speech_rates(const ActivitySummary& activity, std::size_t words) {
  if (activity.duration_seconds <= 0.0) throw AcousticsError(ErrorKind::zero_duration, "clip has zero duration");
  SpeechRates r;
  r.speech_rate_wpm = round2(static_cast<double>(words) / (activity.duration_seconds / 60.0));
  const double active = activity.active_seconds();
  if (activity.pause_seconds > 0.0 && active > 0.0) {
    r.articulation_rate_wpm = round2(static_cast<double>(words) / (active / 60.0));
  } else {
    r.articulation_rate_wpm = r.speech_rate_wpm;
  }
  return r;
}

inline SpeechRates speech_rates(const AudioClip& clip, std::string_view transcript, const ActivityConfig& cfg = {}) {
  if (clip.duration() <= 0.0) throw AcousticsError(ErrorKind::zero_duration, "clip has zero duration");
  return speech_rates(detect_activity(clip, cfg), count_words(transcript));
}

// ---------------------------------------------------------------------------
// Combined prosody block

struct ProsodyFeatures {
  std::optional<PitchStats> pitch;        // absent when no frame is voiced
  std::optional<LoudnessStats> loudness;  // absent when every block is gated
  SpeechRates rates;

  friend bool operator==(const ProsodyFeatures&, const ProsodyFeatures&) = default;
};

/// Signal measurements that do not depend on the transcript.
struct SignalMeasurements {
  std::optional<PitchStats> pitch;
  std::optional<LoudnessStats> loudness;
  ActivitySummary activity;
  std::vector<std::string> flags;  // e.g. "NO_VOICED_FRAMES"
};

struct ProsodyConfig {
  std::size_t contour_points = 20;
  PitchConfig pitch;
  LoudnessConfig loudness;
  ActivityConfig activity;
};

inline SignalMeasurements measure_signal(const AudioClip& clip, const ProsodyConfig& cfg = {}) {
  SignalMeasurements m;
  try {
    m.pitch = estimate_pitch(clip, cfg.contour_points, cfg.pitch);
  } catch (const AcousticsError& e) {
    m.flags.emplace_back(to_string(e.kind()));
  }
  try {
    m.loudness = measure_loudness(clip, cfg.contour_points, cfg.loudness);
  } catch (const AcousticsError& e) {
    m.flags.emplace_back(to_string(e.kind()));
  }
  m.activity = detect_activity(clip, cfg.activity);
  return m;
}

inline ProsodyFeatures combine(const SignalMeasurements& m, std::string_view transcript) {
  ProsodyFeatures p;
  p.pitch = m.pitch;
  p.loudness = m.loudness;
  if (m.activity.duration_seconds > 0.0) p.rates = speech_rates(m.activity, count_words(transcript));
  return p;
}

}  // namespace trace::acoustics
