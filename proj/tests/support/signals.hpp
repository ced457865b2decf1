#pragma once

#include <cmath>
#include <cstddef>

#include "trace/audio.hpp"

namespace trace::testing {

inline constexpr double pi = 3.14159265358979323846;

inline audio::AudioClip tone(double hz, double seconds, double sample_rate, double amplitude = 1.0) {
  audio::AudioClip clip;
  clip.sample_rate = sample_rate;
  const auto n = static_cast<std::size_t>(std::llround(seconds * sample_rate));
  clip.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i)
    clip.samples[i] = static_cast<float>(amplitude * std::sin(2.0 * pi * hz * static_cast<double>(i) / sample_rate));
  return clip;
}

inline audio::AudioClip silence(double seconds, double sample_rate) {
  audio::AudioClip clip;
  clip.sample_rate = sample_rate;
  clip.samples.assign(static_cast<std::size_t>(std::llround(seconds * sample_rate)), 0.0f);
  return clip;
}

inline audio::AudioClip concat(audio::AudioClip a, const audio::AudioClip& b) {
  a.samples.insert(a.samples.end(), b.samples.begin(), b.samples.end());
  return a;
}

inline double db_to_gain(double db) { return std::pow(10.0, db / 20.0); }

}  // namespace trace::testing
