#include <gtest/gtest.h>

#include <complex>
#include <random>

#include "support/signals.hpp"
#include "trace/acoustics.hpp"

namespace trace::acoustics {
namespace {

using testing::concat;
using testing::db_to_gain;
using testing::silence;
using testing::tone;

// Reference K-weighting: the 48 kHz biquad coefficients tabulated in
// BS.1770-4, evaluated on the unit circle. Independent of k_weighting().
double reference_k_gain_db_48k(double hz) {
  const std::complex<double> z = std::polar(1.0, 2.0 * testing::pi * hz / 48000.0);
  const auto zi = 1.0 / z;
  auto h = [&](double b0, double b1, double b2, double a1, double a2) {
    return (b0 + b1 * zi + b2 * zi * zi) / (1.0 + a1 * zi + a2 * zi * zi);
  };
  const auto h1 = h(1.53512485958697, -2.69169618940638, 1.19839281085285, -1.69065929318241, 0.73248077421585);
  const auto h2 = h(1.0, -2.0, 1.0, -1.99004745483398, 0.99007225036621);
  return 20.0 * std::log10(std::abs(h1 * h2));
}

TEST(Pitch, Tone440) {
  const auto p = estimate_pitch(tone(440.0, 1.0, 16000.0, db_to_gain(-12.0)));
  EXPECT_NEAR(p.mean_hz, 440.0, 1.0);
  EXPECT_LE(p.std_hz, 2.0);
  EXPECT_EQ(p.contour_hz.size(), 20u);
}

TEST(Pitch, SilenceHasNoVoicedFrames) {
  try {
    estimate_pitch(silence(1.0, 16000.0));
    FAIL() << "expected NO_VOICED_FRAMES";
  } catch (const AcousticsError& e) {
    EXPECT_EQ(e.kind(), ErrorKind::no_voiced_frames);
  }
}

TEST(Pitch, WhiteNoiseIsUnvoiced) {
  std::mt19937 rng(3);
  std::normal_distribution<float> n(0.0f, 0.1f);
  audio::AudioClip clip = silence(1.0, 16000.0);
  for (auto& s : clip.samples) s = n(rng);
  const auto track = track_pitch(clip);
  EXPECT_LT(track.size(), 5u);  // a stray frame may cross the threshold by chance
}

TEST(Pitch, TwoSegments) {
  const auto clip = concat(tone(220.0, 0.5, 16000.0, 0.5), tone(330.0, 0.5, 16000.0, 0.5));
  EXPECT_NEAR(estimate_pitch(clip).mean_hz, 275.0, 3.0);
}

TEST(Pitch, RandomTonesWithinOnePercent) {
  std::mt19937 rng(20240517);
  std::uniform_real_distribution<double> freq(80.0, 400.0);
  for (int i = 0; i < 20; ++i) {
    const double f = freq(rng);
    const double sr = (i % 2 == 0) ? 16000.0 : 22050.0;
    EXPECT_NEAR(estimate_pitch(tone(f, 0.5, sr, 0.3)).mean_hz, f, 0.01 * f) << "f=" << f;
  }
}

TEST(Loudness, ReferenceFilterMatchesTabulatedCoefficients) {
  const auto [shelf, hp] = k_weighting(48000.0);
  EXPECT_NEAR(shelf.b0, 1.53512485958697, 1e-9);
  EXPECT_NEAR(shelf.b1, -2.69169618940638, 1e-9);
  EXPECT_NEAR(shelf.b2, 1.19839281085285, 1e-9);
  EXPECT_NEAR(shelf.a1, -1.69065929318241, 1e-9);
  EXPECT_NEAR(shelf.a2, 0.73248077421585, 1e-9);
  EXPECT_NEAR(hp.a1, -1.99004745483398, 1e-9);
  EXPECT_NEAR(hp.a2, 0.99007225036621, 1e-9);
}

TEST(Loudness, FullScale997HzSine) {
  // Oracle: mean square 1/2 through the tabulated K-weighting response.
  const double expected = -0.691 + 10.0 * std::log10(0.5) + reference_k_gain_db_48k(997.0);
  EXPECT_NEAR(expected, -3.01, 0.01);
  const auto l = measure_loudness(tone(997.0, 5.0, 48000.0, 1.0));
  EXPECT_NEAR(l.integrated_lufs, expected, 0.1);
  EXPECT_NEAR(l.integrated_lufs, -3.01, 0.1);
  EXPECT_EQ(l.contour_lufs.size(), 20u);
  EXPECT_LE(l.std_lufs, 0.05);
}

TEST(Loudness, GainEquivariance) {
  const auto full = measure_loudness(tone(997.0, 5.0, 48000.0, 1.0));
  const auto quiet = measure_loudness(tone(997.0, 5.0, 48000.0, db_to_gain(-20.0)));
  EXPECT_NEAR(quiet.integrated_lufs, -23.01, 0.1);
  EXPECT_NEAR(full.integrated_lufs - quiet.integrated_lufs, 20.0, 0.1);
  std::mt19937 rng(11);
  std::uniform_real_distribution<double> g(-30.0, 0.0);
  const auto base = tone(500.0, 2.0, 44100.0, 0.5);
  const double ref = measure_loudness(base).integrated_lufs;
  for (int i = 0; i < 5; ++i) {
    const double db = g(rng);
    auto clip = base;
    for (auto& s : clip.samples) s = static_cast<float>(s * db_to_gain(db));
    EXPECT_NEAR(measure_loudness(clip).integrated_lufs - ref, db, 0.1);
  }
}

TEST(Loudness, SilenceIsAllGated) {
  try {
    measure_loudness(silence(2.0, 48000.0));
    FAIL();
  } catch (const AcousticsError& e) {
    EXPECT_EQ(e.kind(), ErrorKind::all_gated);
  }
  EXPECT_THROW(measure_loudness(tone(100.0, 1.0, 4000.0)), AcousticsError);
}

TEST(Contour, ResamplingKeepsEndpoints) {
  const std::vector<double> v{1.0, 5.0, -2.0, 7.5, 3.0};
  const auto r = resample_linear(v, 20);
  ASSERT_EQ(r.size(), 20u);
  EXPECT_DOUBLE_EQ(r.front(), 1.0);
  EXPECT_DOUBLE_EQ(r.back(), 3.0);
  const auto same = resample_linear(v, 5);
  EXPECT_EQ(same, v);
  EXPECT_EQ(resample_linear(std::vector<double>{4.0}, 20), std::vector<double>(20, 4.0));
}

TEST(Rates, NoPauses) {
  std::string words;
  for (int i = 0; i < 30; ++i) words += "w ";
  const auto r = speech_rates(tone(200.0, 10.0, 16000.0, 0.5), words);
  EXPECT_DOUBLE_EQ(r.speech_rate_wpm, 180.0);
  EXPECT_DOUBLE_EQ(r.articulation_rate_wpm, 180.0);
}

TEST(Rates, TwoSecondsOfSilence) {
  const auto clip = concat(concat(tone(200.0, 4.0, 16000.0, 0.5), silence(2.0, 16000.0)), tone(200.0, 4.0, 16000.0, 0.5));
  std::string words;
  for (int i = 0; i < 30; ++i) words += "word ";
  const auto r = speech_rates(clip, words);
  EXPECT_DOUBLE_EQ(r.speech_rate_wpm, 180.0);
  EXPECT_DOUBLE_EQ(r.articulation_rate_wpm, 225.0);
}

TEST(Rates, ShortGapsAreNotPauses) {
  const auto clip = concat(concat(tone(200.0, 4.0, 16000.0, 0.5), silence(0.15, 16000.0)), tone(200.0, 4.0, 16000.0, 0.5));
  const auto a = detect_activity(clip);
  EXPECT_DOUBLE_EQ(a.pause_seconds, 0.0);
}

TEST(Rates, EmptyTranscriptAndZeroDuration) {
  const auto r = speech_rates(tone(200.0, 3.0, 16000.0, 0.5), "");
  EXPECT_DOUBLE_EQ(r.speech_rate_wpm, 0.0);
  EXPECT_DOUBLE_EQ(r.articulation_rate_wpm, 0.0);
  EXPECT_THROW(speech_rates(silence(0.0, 16000.0), "a b"), AcousticsError);
}

TEST(Rates, ArticulationNeverBelowSpeechRate) {
  std::mt19937 rng(5);
  std::uniform_real_distribution<double> len(0.05, 1.5);
  for (int trial = 0; trial < 10; ++trial) {
    audio::AudioClip clip = silence(0.0, 16000.0);
    for (int seg = 0; seg < 6; ++seg)
      clip = concat(concat(clip, tone(180.0, len(rng), 16000.0, 0.4)), silence(len(rng), 16000.0));
    const auto r = speech_rates(clip, "one two three four five six seven");
    EXPECT_GE(r.articulation_rate_wpm, r.speech_rate_wpm);
  }
}

TEST(Prosody, SilentClipFlagsBothMeasures) {
  const auto m = measure_signal(silence(1.0, 16000.0));
  EXPECT_FALSE(m.pitch.has_value());
  EXPECT_FALSE(m.loudness.has_value());
  EXPECT_EQ(m.flags, (std::vector<std::string>{"NO_VOICED_FRAMES", "ALL_GATED"}));
}

}  // namespace
}  // namespace trace::acoustics
