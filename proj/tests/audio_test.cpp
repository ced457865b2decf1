#include <gtest/gtest.h>

#include <filesystem>

#include "support/signals.hpp"
#include "trace/audio.hpp"

namespace trace::audio {
namespace {

const std::filesystem::path data_dir{TRACE_TEST_DATA};

void expect_same_samples(const AudioClip& a, const AudioClip& b, float tol) {
  ASSERT_EQ(a.samples.size(), b.samples.size());
  EXPECT_EQ(a.sample_rate, b.sample_rate);
  for (std::size_t i = 0; i < a.samples.size(); ++i) ASSERT_NEAR(a.samples[i], b.samples[i], tol) << "sample " << i;
}

TEST(Audio, FlacMono16MatchesWavTwin) {
  const auto flac = load(data_dir / "mono16.flac");
  const auto wav = load(data_dir / "mono16.wav");
  EXPECT_EQ(flac.sample_rate, 16000.0);
  EXPECT_EQ(flac.samples.size(), 4800u);
  expect_same_samples(flac, wav, 0.0f);
}

TEST(Audio, FlacStereo24MatchesWavTwin) {
  const auto flac = load(data_dir / "stereo24.flac");
  const auto wav = load(data_dir / "stereo24.wav");
  EXPECT_EQ(flac.sample_rate, 44100.0);
  EXPECT_EQ(flac.samples.size(), 8820u);
  expect_same_samples(flac, wav, 1e-7f);
}

TEST(Audio, Float32WavDecodes) {
  const auto f = load(data_dir / "float32.wav");
  const auto i16 = load(data_dir / "mono16.wav");
  expect_same_samples(f, i16, 1.0f / 16384.0f);
}

TEST(Audio, StereoIsDownmixedByAveraging) {
  // 2-channel 16-bit WAV written by hand: L = 0.5, R = -0.25.
  std::vector<std::uint8_t> wav = encode_wav(testing::silence(0.001, 8000.0));
  auto put16 = [](std::vector<std::uint8_t>& v, std::size_t at, std::uint16_t x) {
    v[at] = x & 0xFF;
    v[at + 1] = x >> 8;
  };
  std::vector<std::uint8_t> bytes(44 + 4 * 4);
  std::copy(wav.begin(), wav.begin() + 44, bytes.begin());
  put16(bytes, 22, 2);           // channels
  put16(bytes, 32, 4);           // block align
  bytes[40] = 16;                // data size
  bytes[41] = bytes[42] = bytes[43] = 0;
  for (int i = 0; i < 4; ++i) {
    put16(bytes, 44 + 4 * i, 16384);
    put16(bytes, 46 + 4 * i, static_cast<std::uint16_t>(-8192));
  }
  const auto clip = decode(bytes);
  ASSERT_EQ(clip.samples.size(), 4u);
  for (float s : clip.samples) EXPECT_FLOAT_EQ(s, 0.125f);
}

TEST(Audio, RejectsOtherContainers) {
  const std::vector<std::uint8_t> ogg{'O', 'g', 'g', 'S', 0, 0, 0, 0};
  EXPECT_THROW(decode(ogg), AudioError);
  EXPECT_THROW(load(data_dir / "does_not_exist.wav"), AudioError);
}

TEST(Audio, WavRoundTrip) {
  const auto clip = testing::tone(300.0, 0.05, 16000.0, 0.5);
  const auto back = decode(encode_wav(clip, WavEncoding::float32));
  expect_same_samples(clip, back, 0.0f);
  const auto back16 = decode(encode_wav(clip, WavEncoding::pcm16));
  expect_same_samples(clip, back16, 1.0f / 16000.0f);
}

}  // namespace
}  // namespace trace::audio
