#pragma once

// Mono audio carrier plus WAV/FLAC decoding. Multichannel input is downmixed
// by averaging channels.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace trace::audio {

class AudioError : public std::runtime_error {
 public:
  explicit AudioError(const std::string& what) : std::runtime_error(what) {}
};

struct AudioClip {
  std::vector<float> samples;  // mono, nominally in [-1, 1]
  double sample_rate = 0.0;

  double duration() const { return sample_rate > 0 ? static_cast<double>(samples.size()) / sample_rate : 0.0; }
  bool empty() const { return samples.empty(); }
};

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw AudioError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

namespace detail {

inline std::uint32_t le16(const std::uint8_t* p) { return p[0] | (p[1] << 8); }
inline std::uint32_t le32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline AudioClip downmix(const std::vector<std::vector<float>>& channels, double rate) {
  AudioClip clip;
  clip.sample_rate = rate;
  if (channels.empty()) return clip;
  const std::size_t n = channels.front().size();
  clip.samples.assign(n, 0.0f);
  const float scale = 1.0f / static_cast<float>(channels.size());
  for (const auto& ch : channels)
    for (std::size_t i = 0; i < n; ++i) clip.samples[i] += ch[i] * scale;
  return clip;
}

// MSB-first bit reader over a FLAC frame.
class BitReader {
 public:
  explicit BitReader(std::span<const std::uint8_t> data, std::size_t byte_pos = 0)
      : data_(data), pos_(byte_pos * 8) {}

  std::uint64_t read(unsigned bits) {
    std::uint64_t v = 0;
    for (unsigned i = 0; i < bits; ++i) {
      if (pos_ >= data_.size() * 8) throw AudioError("FLAC: unexpected end of stream");
      v = (v << 1) | ((data_[pos_ >> 3] >> (7 - (pos_ & 7))) & 1u);
      ++pos_;
    }
    return v;
  }
  std::int64_t read_signed(unsigned bits) {
    if (bits == 0) return 0;
    const std::uint64_t v = read(bits);
    const std::uint64_t sign = 1ull << (bits - 1);
    return static_cast<std::int64_t>((v ^ sign)) - static_cast<std::int64_t>(sign);
  }
  std::uint64_t read_unary() {
    std::uint64_t n = 0;
    while (read(1) == 0) ++n;
    return n;
  }
  void align() { pos_ = (pos_ + 7) & ~static_cast<std::size_t>(7); }
  std::size_t byte_pos() const { return pos_ >> 3; }
  bool at_end() const { return pos_ >= data_.size() * 8; }

 private:
  std::span<const std::uint8_t> data_;
  std::size_t pos_;
};

inline void read_residual(BitReader& br, std::size_t block_size, unsigned order, std::vector<std::int64_t>& out) {
  const auto method = br.read(2);
  if (method > 1) throw AudioError("FLAC: reserved residual coding method");
  const unsigned param_bits = method == 0 ? 4 : 5;
  const std::uint64_t escape = method == 0 ? 15 : 31;
  const unsigned partition_order = static_cast<unsigned>(br.read(4));
  const std::size_t partitions = std::size_t{1} << partition_order;
  for (std::size_t p = 0; p < partitions; ++p) {
    std::size_t count = block_size >> partition_order;
    if (p == 0) {
      if (count < order) throw AudioError("FLAC: bad partition size");
      count -= order;
    }
    const auto param = br.read(param_bits);
    if (param == escape) {
      const auto raw_bits = static_cast<unsigned>(br.read(5));
      for (std::size_t i = 0; i < count; ++i) out.push_back(br.read_signed(raw_bits));
    } else {
      for (std::size_t i = 0; i < count; ++i) {
        const std::uint64_t q = br.read_unary();
        const std::uint64_t u = (q << param) | br.read(static_cast<unsigned>(param));
        out.push_back(static_cast<std::int64_t>(u >> 1) ^ -static_cast<std::int64_t>(u & 1));
      }
    }
  }
}

inline std::vector<std::int64_t> read_subframe(BitReader& br, std::size_t block_size, unsigned bps) {
  if (br.read(1) != 0) throw AudioError("FLAC: bad subframe padding");
  const auto type = static_cast<unsigned>(br.read(6));
  unsigned wasted = 0;
  if (br.read(1)) wasted = static_cast<unsigned>(br.read_unary()) + 1;
  bps -= wasted;

  std::vector<std::int64_t> s;
  s.reserve(block_size);
  if (type == 0) {
    s.assign(block_size, br.read_signed(bps));
  } else if (type == 1) {
    for (std::size_t i = 0; i < block_size; ++i) s.push_back(br.read_signed(bps));
  } else if (type >= 8 && type <= 12) {
    const unsigned order = type - 8;
    for (unsigned i = 0; i < order; ++i) s.push_back(br.read_signed(bps));
    std::vector<std::int64_t> res;
    read_residual(br, block_size, order, res);
    for (std::size_t i = 0; i < res.size(); ++i) {
      const std::size_t n = s.size();
      std::int64_t pred = 0;
      switch (order) {
        case 0: pred = 0; break;
        case 1: pred = s[n - 1]; break;
        case 2: pred = 2 * s[n - 1] - s[n - 2]; break;
        case 3: pred = 3 * s[n - 1] - 3 * s[n - 2] + s[n - 3]; break;
        case 4: pred = 4 * s[n - 1] - 6 * s[n - 2] + 4 * s[n - 3] - s[n - 4]; break;
      }
      s.push_back(pred + res[i]);
    }
  } else if (type >= 32) {
    const unsigned order = (type & 31) + 1;
    for (unsigned i = 0; i < order; ++i) s.push_back(br.read_signed(bps));
    const unsigned precision = static_cast<unsigned>(br.read(4)) + 1;
    if (precision == 16) throw AudioError("FLAC: invalid LPC precision");
    const auto shift = br.read_signed(5);
    if (shift < 0) throw AudioError("FLAC: negative LPC shift");
    std::vector<std::int64_t> coefs(order);
    for (auto& c : coefs) c = br.read_signed(precision);
    std::vector<std::int64_t> res;
    read_residual(br, block_size, order, res);
    for (std::size_t i = 0; i < res.size(); ++i) {
      const std::size_t n = s.size();
      std::int64_t acc = 0;
      for (unsigned j = 0; j < order; ++j) acc += coefs[j] * s[n - 1 - j];
      s.push_back((acc >> shift) + res[i]);
    }
  } else {
    throw AudioError("FLAC: reserved subframe type");
  }
  if (wasted)
    for (auto& v : s) v <<= wasted;
  return s;
}

}  // namespace detail

inline AudioClip decode_wav(std::span<const std::uint8_t> bytes) {
  using detail::le16;
  using detail::le32;
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 || std::memcmp(bytes.data() + 8, "WAVE", 4) != 0)
    throw AudioError("not a RIFF/WAVE file");
  unsigned format = 0, channels = 0, bits = 0;
  double rate = 0;
  const std::uint8_t* pcm = nullptr;
  std::size_t pcm_size = 0;
  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const std::uint8_t* chunk = bytes.data() + pos;
    std::size_t size = le32(chunk + 4);
    const std::size_t body = pos + 8;
    if (std::memcmp(chunk, "fmt ", 4) == 0) {
      if (size < 16 || body + size > bytes.size()) throw AudioError("WAV: truncated fmt chunk");
      format = le16(chunk + 8);
      channels = le16(chunk + 10);
      rate = le32(chunk + 12);
      bits = le16(chunk + 22);
      if (format == 0xFFFE && size >= 40) format = le16(chunk + 8 + 24);  // extensible subformat
    } else if (std::memcmp(chunk, "data", 4) == 0) {
      pcm = chunk + 8;
      pcm_size = std::min(size, bytes.size() - body);
    }
    pos = body + size + (size & 1);
  }
  if (!pcm || channels == 0 || rate <= 0) throw AudioError("WAV: missing fmt or data chunk");
  const bool is_float = format == 3;
  if (!(format == 1 || is_float)) throw AudioError("WAV: unsupported format tag " + std::to_string(format));
  if (is_float && bits != 32) throw AudioError("WAV: only 32-bit float is supported");
  if (!is_float && bits != 16 && bits != 24 && bits != 32)
    throw AudioError("WAV: unsupported PCM bit depth " + std::to_string(bits));

  const std::size_t frame_bytes = channels * (bits / 8);
  const std::size_t frames = pcm_size / frame_bytes;
  std::vector<std::vector<float>> ch(channels, std::vector<float>(frames));
  for (std::size_t i = 0; i < frames; ++i) {
    for (unsigned c = 0; c < channels; ++c) {
      const std::uint8_t* p = pcm + i * frame_bytes + c * (bits / 8);
      float v = 0;
      if (is_float) {
        std::uint32_t u = le32(p);
        std::memcpy(&v, &u, sizeof v);
      } else if (bits == 16) {
        v = static_cast<float>(static_cast<std::int16_t>(le16(p))) / 32768.0f;
      } else if (bits == 24) {
        std::int32_t s = static_cast<std::int32_t>((p[0] << 8) | (p[1] << 16) | (p[2] << 24)) >> 8;
        v = static_cast<float>(s) / 8388608.0f;
      } else {
        v = static_cast<float>(static_cast<double>(static_cast<std::int32_t>(le32(p))) / 2147483648.0);
      }
      ch[c][i] = v;
    }
  }
  return detail::downmix(ch, rate);
}

inline AudioClip decode_flac(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), "fLaC", 4) != 0) throw AudioError("not a FLAC stream");
  std::size_t pos = 4;
  unsigned channels = 0, bps = 0;
  double rate = 0;
  bool last = false;
  while (!last) {
    if (pos + 4 > bytes.size()) throw AudioError("FLAC: truncated metadata");
    last = (bytes[pos] & 0x80) != 0;
    const unsigned type = bytes[pos] & 0x7F;
    const std::size_t len = (bytes[pos + 1] << 16) | (bytes[pos + 2] << 8) | bytes[pos + 3];
    if (type == 0) {
      detail::BitReader br(bytes, pos + 4);
      br.read(16 + 16 + 24 + 24);
      rate = static_cast<double>(br.read(20));
      channels = static_cast<unsigned>(br.read(3)) + 1;
      bps = static_cast<unsigned>(br.read(5)) + 1;
    }
    pos += 4 + len;
  }
  if (channels == 0) throw AudioError("FLAC: missing STREAMINFO");

  static constexpr std::array<unsigned, 8> size_codes{0, 8, 12, 0, 16, 20, 24, 32};
  static constexpr std::array<unsigned, 12> rate_codes{0,     88200, 176400, 192000, 8000,  16000,
                                                       22050, 24000, 32000,  44100,  48000, 96000};
  std::vector<std::vector<float>> out(channels);
  while (pos + 2 <= bytes.size()) {
    if (bytes[pos] != 0xFF || (bytes[pos + 1] & 0xFE) != 0xF8) throw AudioError("FLAC: lost frame sync");
    detail::BitReader br(bytes, pos);
    br.read(16);
    const auto bs_code = static_cast<unsigned>(br.read(4));
    const auto sr_code = static_cast<unsigned>(br.read(4));
    const auto assignment = static_cast<unsigned>(br.read(4));
    const auto ss_code = static_cast<unsigned>(br.read(3));
    br.read(1);
    // UTF-8-style coded frame/sample number.
    const auto first = br.read(8);
    int extra = 0;
    for (std::uint64_t mask = 0x80; mask && (first & mask); mask >>= 1) ++extra;
    if (extra > 0) br.read(8 * static_cast<unsigned>(extra - 1));

    std::size_t block = 0;
    if (bs_code == 1) block = 192;
    else if (bs_code >= 2 && bs_code <= 5) block = 576u << (bs_code - 2);
    else if (bs_code == 6) block = br.read(8) + 1;
    else if (bs_code == 7) block = br.read(16) + 1;
    else if (bs_code >= 8) block = 256u << (bs_code - 8);
    else throw AudioError("FLAC: reserved block size");

    if (sr_code == 12) br.read(8);
    else if (sr_code == 13 || sr_code == 14) br.read(16);
    else if (sr_code >= 1 && sr_code < rate_codes.size() && rate <= 0) rate = rate_codes[sr_code];
    br.read(8);  // CRC-8

    const unsigned frame_bps = ss_code == 0 ? bps : size_codes[ss_code];
    if (frame_bps == 0) throw AudioError("FLAC: reserved sample size");
    const unsigned nch = assignment < 8 ? assignment + 1 : 2;
    if (nch != channels) throw AudioError("FLAC: channel count changed mid-stream");

    std::vector<std::vector<std::int64_t>> sub(nch);
    for (unsigned c = 0; c < nch; ++c) {
      unsigned sub_bps = frame_bps;
      if ((assignment == 8 && c == 1) || (assignment == 9 && c == 0) || (assignment == 10 && c == 1)) ++sub_bps;
      sub[c] = detail::read_subframe(br, block, sub_bps);
    }
    if (assignment == 8) {
      for (std::size_t i = 0; i < block; ++i) sub[1][i] = sub[0][i] - sub[1][i];
    } else if (assignment == 9) {
      for (std::size_t i = 0; i < block; ++i) sub[0][i] += sub[1][i];
    } else if (assignment == 10) {
      for (std::size_t i = 0; i < block; ++i) {
        std::int64_t mid = (sub[0][i] << 1) | (sub[1][i] & 1);
        const std::int64_t side = sub[1][i];
        sub[0][i] = (mid + side) >> 1;
        sub[1][i] = (mid - side) >> 1;
      }
    }
    const double scale = 1.0 / static_cast<double>(1ull << (frame_bps - 1));
    for (unsigned c = 0; c < nch; ++c)
      for (auto v : sub[c]) out[c].push_back(static_cast<float>(static_cast<double>(v) * scale));

    br.align();
    br.read(16);  // CRC-16
    pos = br.byte_pos();
  }
  return detail::downmix(out, rate);
}

inline AudioClip decode(std::span<const std::uint8_t> bytes) {
  if (bytes.size() >= 4 && std::memcmp(bytes.data(), "RIFF", 4) == 0) return decode_wav(bytes);
  if (bytes.size() >= 4 && std::memcmp(bytes.data(), "fLaC", 4) == 0) return decode_flac(bytes);
  throw AudioError("unsupported audio container (expected WAV or FLAC)");
}

inline AudioClip load(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  try {
    return decode(bytes);
  } catch (const AudioError& e) {
    throw AudioError(path.string() + ": " + e.what());
  }
}

enum class WavEncoding { pcm16, float32 };

inline std::vector<std::uint8_t> encode_wav(const AudioClip& clip, WavEncoding enc = WavEncoding::pcm16) {
  const unsigned bits = enc == WavEncoding::pcm16 ? 16 : 32;
  const std::uint32_t data_size = static_cast<std::uint32_t>(clip.samples.size() * (bits / 8));
  std::vector<std::uint8_t> out;
  out.reserve(44 + data_size);
  auto put = [&](std::uint32_t v, int n) {
    for (int i = 0; i < n; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFF));
  };
  auto tag = [&](const char* t) { out.insert(out.end(), t, t + 4); };
  const auto rate = static_cast<std::uint32_t>(clip.sample_rate);
  tag("RIFF");
  put(36 + data_size, 4);
  tag("WAVE");
  tag("fmt ");
  put(16, 4);
  put(enc == WavEncoding::pcm16 ? 1 : 3, 2);
  put(1, 2);
  put(rate, 4);
  put(rate * (bits / 8), 4);
  put(bits / 8, 2);
  put(bits, 2);
  tag("data");
  put(data_size, 4);
  for (float s : clip.samples) {
    if (enc == WavEncoding::pcm16) {
      const float c = std::clamp(s, -1.0f, 1.0f);
      const auto v = static_cast<std::int16_t>(std::lround(c * 32767.0f));
      put(static_cast<std::uint16_t>(v), 2);
    } else {
      std::uint32_t u;
      std::memcpy(&u, &s, sizeof u);
      put(u, 4);
    }
  }
  return out;
}

inline void save_wav(const std::filesystem::path& path, const AudioClip& clip, WavEncoding enc = WavEncoding::pcm16) {
  const auto bytes = encode_wav(clip, enc);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw AudioError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace trace::audio
