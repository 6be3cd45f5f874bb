#pragma once

// Minimal RIFF/WAVE reader and writer for 16-bit PCM. Multichannel input is
// downmixed to mono by averaging; output is always mono.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "stx/error.hpp"

namespace stx {

struct AudioSignal {
  std::vector<double> samples;  // in [-1, 1]
  int sample_rate_hz = 16000;
};

namespace wav_detail {

inline std::uint32_t u32le(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline std::uint16_t u16le(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

inline void put_u32le(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xFF));
}

inline void put_u16le(std::vector<unsigned char>& out, std::uint16_t v) {
  out.push_back(static_cast<unsigned char>(v & 0xFF));
  out.push_back(static_cast<unsigned char>((v >> 8) & 0xFF));
}

}  // namespace wav_detail

inline AudioSignal read_wav(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("read_wav: cannot open " + path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
      std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) {
    throw DataError("read_wav: " + path + " is not a RIFF/WAVE file");
  }

  int channels = 0, sample_rate = 0, bits = 0;
  bool have_fmt = false;
  const unsigned char* data = nullptr;
  std::size_t data_len = 0;

  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const char* id = reinterpret_cast<const char*>(bytes.data() + pos);
    const std::uint32_t chunk = wav_detail::u32le(bytes.data() + pos + 4);
    pos += 8;
    if (pos + chunk > bytes.size()) throw DataError("read_wav: truncated chunk in " + path);
    if (std::memcmp(id, "fmt ", 4) == 0) {
      if (chunk < 16) throw DataError("read_wav: short fmt chunk in " + path);
      const std::uint16_t format = wav_detail::u16le(bytes.data() + pos);
      if (format != 1) throw DataError("read_wav: only PCM supported, got format " + std::to_string(format));
      channels = wav_detail::u16le(bytes.data() + pos + 2);
      sample_rate = static_cast<int>(wav_detail::u32le(bytes.data() + pos + 4));
      bits = wav_detail::u16le(bytes.data() + pos + 14);
      have_fmt = true;
    } else if (std::memcmp(id, "data", 4) == 0) {
      data = bytes.data() + pos;
      data_len = chunk;
    }
    pos += chunk + (chunk & 1);  // chunks are word-aligned
  }

  if (!have_fmt || data == nullptr) throw DataError("read_wav: missing fmt/data chunk in " + path);
  if (bits != 16) throw DataError("read_wav: only 16-bit PCM supported, got " + std::to_string(bits));
  if (channels < 1) throw DataError("read_wav: bad channel count in " + path);
  if (sample_rate <= 0) throw DataError("read_wav: bad sample rate in " + path);

  const std::size_t frame_bytes = static_cast<std::size_t>(channels) * 2;
  const std::size_t n = data_len / frame_bytes;
  AudioSignal sig;
  sig.sample_rate_hz = sample_rate;
  sig.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (int c = 0; c < channels; ++c) {
      const unsigned char* p = data + i * frame_bytes + static_cast<std::size_t>(c) * 2;
      const std::int16_t s = static_cast<std::int16_t>(p[0] | (p[1] << 8));
      acc += static_cast<double>(s);
    }
    sig.samples[i] = acc / (channels * 32768.0);
  }
  return sig;
}

inline void write_wav(const std::string& path, const AudioSignal& sig) {
  if (sig.sample_rate_hz <= 0) throw ContractError("write_wav: sample rate must be positive");
  std::vector<unsigned char> out;
  const std::uint32_t data_bytes = static_cast<std::uint32_t>(sig.samples.size() * 2);
  out.reserve(44 + data_bytes);
  out.insert(out.end(), {'R', 'I', 'F', 'F'});
  wav_detail::put_u32le(out, 36 + data_bytes);
  out.insert(out.end(), {'W', 'A', 'V', 'E', 'f', 'm', 't', ' '});
  wav_detail::put_u32le(out, 16);
  wav_detail::put_u16le(out, 1);  // PCM
  wav_detail::put_u16le(out, 1);  // mono
  wav_detail::put_u32le(out, static_cast<std::uint32_t>(sig.sample_rate_hz));
  wav_detail::put_u32le(out, static_cast<std::uint32_t>(sig.sample_rate_hz) * 2);
  wav_detail::put_u16le(out, 2);   // block align
  wav_detail::put_u16le(out, 16);  // bits
  out.insert(out.end(), {'d', 'a', 't', 'a'});
  wav_detail::put_u32le(out, data_bytes);
  for (const double x : sig.samples) {
    const double clamped = std::max(-1.0, std::min(1.0, x));
    const auto s = static_cast<std::int16_t>(std::lround(clamped * 32767.0));
    wav_detail::put_u16le(out, static_cast<std::uint16_t>(s));
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("write_wav: cannot open " + path + " for writing");
  f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError("write_wav: write failed for " + path);
}

}  // namespace stx
