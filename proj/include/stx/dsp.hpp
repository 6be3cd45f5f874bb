#pragma once

// MFCC feature extraction: pre-emphasis, Hamming-windowed framing, radix-2
// FFT power spectra, triangular mel filter energies with log compression,
// and a direct cosine transform
//
//   C_i = sum_{n=1..Nf} S_n * cos(i * (n - 0.5) * pi / Nf),  i = 0..L
//
// where S_n is the log energy of the n-th filter. The whole pipeline is
// deterministic and is checked end to end against a naive DFT oracle in the
// test suite.

#include <cmath>
#include <cstddef>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "stx/error.hpp"
#include "stx/wav.hpp"

namespace stx {

constexpr double kLogFloor = 1e-10;  // silence guard inside the log

struct FeatureConfig {
  double frame_ms = 25.0;
  double hop_ms = 10.0;
  double preemphasis = 0.97;
  std::size_t n_fft = 512;
  int n_filters = 26;   // Nf
  int n_coeffs = 12;    // L; a frame keeps L+1 coefficients C_0..C_L
  double mel_low_hz = 0.0;
  double mel_high_hz = 8000.0;
};

struct MfccMatrix {
  std::size_t frames = 0;
  std::size_t coeffs = 0;  // L + 1
  std::vector<double> values;  // row-major frames x coeffs
  double frame_ms = 25.0;
  double hop_ms = 10.0;

  double at(std::size_t f, std::size_t c) const { return values[f * coeffs + c]; }
  double& at(std::size_t f, std::size_t c) { return values[f * coeffs + c]; }
};

// ---------------------------------------------------------------------------
// Framing
// ---------------------------------------------------------------------------

struct FrameMatrix {
  std::size_t n_frames = 0;
  std::size_t frame_len = 0;
  std::vector<double> values;  // row-major n_frames x frame_len

  const double* frame(std::size_t i) const { return values.data() + i * frame_len; }
};

// Pre-emphasis y[t] = x[t] - coeff * x[t-1] over the whole signal, then
// Hamming-windowed frames of frame_ms every hop_ms.
inline FrameMatrix frame_and_window(const AudioSignal& signal, double frame_ms, double hop_ms,
                                    double preemphasis = 0.97) {
  if (!(hop_ms > 0.0) || frame_ms < hop_ms) {
    throw ConfigError("frame_and_window: need frame_ms >= hop_ms > 0");
  }
  if (signal.sample_rate_hz <= 0) throw DataError("frame_and_window: bad sample rate");
  for (const double s : signal.samples) {
    if (!std::isfinite(s)) throw DataError("frame_and_window: non-finite sample");
  }
  const auto frame_len =
      static_cast<std::size_t>(std::llround(frame_ms * signal.sample_rate_hz / 1000.0));
  const auto hop = static_cast<std::size_t>(std::llround(hop_ms * signal.sample_rate_hz / 1000.0));
  if (frame_len == 0 || hop == 0) throw ConfigError("frame_and_window: frame/hop rounds to zero samples");
  if (signal.samples.size() < frame_len) {
    throw DataError("frame_and_window: signal of " + std::to_string(signal.samples.size()) +
                    " samples is shorter than one " + std::to_string(frame_len) + "-sample frame");
  }

  std::vector<double> emphasized(signal.samples.size());
  emphasized[0] = signal.samples[0];
  for (std::size_t t = 1; t < signal.samples.size(); ++t) {
    emphasized[t] = signal.samples[t] - preemphasis * signal.samples[t - 1];
  }

  std::vector<double> window(frame_len, 1.0);
  if (frame_len > 1) {
    constexpr double two_pi = 6.283185307179586476925286766559;
    for (std::size_t n = 0; n < frame_len; ++n) {
      window[n] = 0.54 - 0.46 * std::cos(two_pi * static_cast<double>(n) /
                                         static_cast<double>(frame_len - 1));
    }
  }

  FrameMatrix out;
  out.n_frames = (signal.samples.size() - frame_len) / hop + 1;
  out.frame_len = frame_len;
  out.values.resize(out.n_frames * frame_len);
  for (std::size_t f = 0; f < out.n_frames; ++f) {
    for (std::size_t n = 0; n < frame_len; ++n) {
      out.values[f * frame_len + n] = emphasized[f * hop + n] * window[n];
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Power spectrum (radix-2 FFT)
// ---------------------------------------------------------------------------

inline void fft_radix2(std::vector<double>& re, std::vector<double>& im) {
  const std::size_t n = re.size();
  // bit-reversal permutation
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) {
      std::swap(re[i], re[j]);
      std::swap(im[i], im[j]);
    }
  }
  constexpr double two_pi = 6.283185307179586476925286766559;
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double ang = -two_pi / static_cast<double>(len);
    const double wr = std::cos(ang), wi = std::sin(ang);
    for (std::size_t i = 0; i < n; i += len) {
      double cur_r = 1.0, cur_i = 0.0;
      for (std::size_t j = 0; j < len / 2; ++j) {
        const double ur = re[i + j], ui = im[i + j];
        const double vr = re[i + j + len / 2] * cur_r - im[i + j + len / 2] * cur_i;
        const double vi = re[i + j + len / 2] * cur_i + im[i + j + len / 2] * cur_r;
        re[i + j] = ur + vr;
        im[i + j] = ui + vi;
        re[i + j + len / 2] = ur - vr;
        im[i + j + len / 2] = ui - vi;
        const double next_r = cur_r * wr - cur_i * wi;
        cur_i = cur_r * wi + cur_i * wr;
        cur_r = next_r;
      }
    }
  }
}

// |DFT|^2 / n_fft for bins 0..n_fft/2.
inline std::vector<double> power_spectrum(const std::vector<double>& frame, std::size_t n_fft) {
  if (n_fft == 0 || (n_fft & (n_fft - 1)) != 0) {
    throw ConfigError("power_spectrum: n_fft " + std::to_string(n_fft) + " is not a power of two");
  }
  if (n_fft < frame.size()) {
    throw ConfigError("power_spectrum: n_fft " + std::to_string(n_fft) + " shorter than frame of " +
                      std::to_string(frame.size()));
  }
  std::vector<double> re(n_fft, 0.0), im(n_fft, 0.0);
  std::copy(frame.begin(), frame.end(), re.begin());
  fft_radix2(re, im);
  std::vector<double> power(n_fft / 2 + 1);
  for (std::size_t k = 0; k <= n_fft / 2; ++k) {
    power[k] = (re[k] * re[k] + im[k] * im[k]) / static_cast<double>(n_fft);
  }
  return power;
}

// ---------------------------------------------------------------------------
// Mel filterbank
// ---------------------------------------------------------------------------

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

struct MelFilterbank {
  int n_filters = 0;
  std::size_t n_bins = 0;
  double low_hz = 0.0;
  double high_hz = 0.0;
  std::vector<double> weights;  // row-major n_filters x n_bins

  double weight(int filter, std::size_t bin) const {
    return weights[static_cast<std::size_t>(filter) * n_bins + bin];
  }
};

// Triangular filters with feet/centers equally spaced on the mel scale;
// adjacent filters overlap at the triangle feet.
inline MelFilterbank build_mel_filterbank(int n_filters, std::size_t n_fft, int sample_rate_hz,
                                          double low_hz, double high_hz) {
  if (n_filters < 1) throw ConfigError("mel filterbank: need at least one filter");
  if (!(low_hz >= 0.0) || !(high_hz > low_hz)) throw ConfigError("mel filterbank: need 0 <= low < high");
  if (high_hz > sample_rate_hz / 2.0 + 1e-9) {
    throw ConfigError("mel filterbank: high edge " + std::to_string(high_hz) +
                      " Hz above Nyquist of " + std::to_string(sample_rate_hz / 2.0) + " Hz");
  }
  MelFilterbank fb;
  fb.n_filters = n_filters;
  fb.n_bins = n_fft / 2 + 1;
  fb.low_hz = low_hz;
  fb.high_hz = high_hz;
  fb.weights.assign(static_cast<std::size_t>(n_filters) * fb.n_bins, 0.0);

  const double mel_lo = hz_to_mel(low_hz), mel_hi = hz_to_mel(high_hz);
  const double mel_step = (mel_hi - mel_lo) / (n_filters + 1);
  for (int m = 0; m < n_filters; ++m) {
    const double left = mel_to_hz(mel_lo + m * mel_step);
    const double center = mel_to_hz(mel_lo + (m + 1) * mel_step);
    const double right = mel_to_hz(mel_lo + (m + 2) * mel_step);
    for (std::size_t k = 0; k < fb.n_bins; ++k) {
      const double f = static_cast<double>(k) * sample_rate_hz / static_cast<double>(n_fft);
      double w = 0.0;
      if (f >= left && f <= center) {
        w = (f - left) / (center - left);
      } else if (f > center && f <= right) {
        w = (right - f) / (right - center);
      }
      fb.weights[static_cast<std::size_t>(m) * fb.n_bins + k] = w;
    }
  }
  return fb;
}

// S_n = ln(max(filter . power, floor)).
inline std::vector<double> mel_filter_energies(const std::vector<double>& power,
                                               const MelFilterbank& fb) {
  if (power.size() != fb.n_bins) {
    throw ShapeError("mel_filter_energies: spectrum of " + std::to_string(power.size()) +
                     " bins does not match filterbank over " + std::to_string(fb.n_bins));
  }
  std::vector<double> sn(static_cast<std::size_t>(fb.n_filters));
  for (int m = 0; m < fb.n_filters; ++m) {
    double acc = 0.0;
    const double* row = fb.weights.data() + static_cast<std::size_t>(m) * fb.n_bins;
    for (std::size_t k = 0; k < fb.n_bins; ++k) acc += row[k] * power[k];
    sn[static_cast<std::size_t>(m)] = std::log(std::max(acc, kLogFloor));
  }
  return sn;
}

// ---------------------------------------------------------------------------
// Cosine transform
// ---------------------------------------------------------------------------

// Direct summation; Nf is small so no fast transform is needed.
inline std::vector<double> dct_mfcc(const std::vector<double>& sn, int n_coeffs_l) {
  if (n_coeffs_l < 0) throw ContractError("dct_mfcc: coefficient count must be >= 0");
  if (sn.empty()) throw ContractError("dct_mfcc: need at least one filter energy");
  const auto nf = static_cast<double>(sn.size());
  constexpr double pi = 3.14159265358979323846;
  std::vector<double> c(static_cast<std::size_t>(n_coeffs_l) + 1, 0.0);
  for (int i = 0; i <= n_coeffs_l; ++i) {
    double acc = 0.0;
    for (std::size_t n = 1; n <= sn.size(); ++n) {
      acc += sn[n - 1] * std::cos(i * (static_cast<double>(n) - 0.5) * pi / nf);
    }
    c[static_cast<std::size_t>(i)] = acc;
  }
  return c;
}

// ---------------------------------------------------------------------------
// End-to-end extraction
// ---------------------------------------------------------------------------

inline MfccMatrix extract_mfcc(const AudioSignal& signal, const FeatureConfig& cfg) {
  const FrameMatrix framed = frame_and_window(signal, cfg.frame_ms, cfg.hop_ms, cfg.preemphasis);
  if (cfg.n_fft < framed.frame_len) {
    throw ConfigError("extract_mfcc: n_fft " + std::to_string(cfg.n_fft) + " shorter than frame of " +
                      std::to_string(framed.frame_len) + " samples");
  }
  const MelFilterbank fb = build_mel_filterbank(cfg.n_filters, cfg.n_fft, signal.sample_rate_hz,
                                                cfg.mel_low_hz, cfg.mel_high_hz);
  MfccMatrix m;
  m.frames = framed.n_frames;
  m.coeffs = static_cast<std::size_t>(cfg.n_coeffs) + 1;
  m.frame_ms = cfg.frame_ms;
  m.hop_ms = cfg.hop_ms;
  m.values.resize(m.frames * m.coeffs);
  std::vector<double> frame(framed.frame_len);
  for (std::size_t f = 0; f < framed.n_frames; ++f) {
    std::copy(framed.frame(f), framed.frame(f) + framed.frame_len, frame.begin());
    const std::vector<double> power = power_spectrum(frame, cfg.n_fft);
    const std::vector<double> sn = mel_filter_energies(power, fb);
    const std::vector<double> c = dct_mfcc(sn, cfg.n_coeffs);
    std::copy(c.begin(), c.end(), m.values.begin() + static_cast<std::ptrdiff_t>(f * m.coeffs));
  }
  return m;
}

// ---------------------------------------------------------------------------
// MFCC matrix file format
// ---------------------------------------------------------------------------
// Header line `mfcc,v1,<frames>,<coeffs>,<frame_ms>,<hop_ms>` followed by one
// CSV row per frame. Values are printed with 17 significant digits so a
// write/read round trip is exact.

inline void save_mfcc(const std::string& path, const MfccMatrix& m) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("save_mfcc: cannot open " + path + " for writing");
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", m.frame_ms);
  out << "mfcc,v1," << m.frames << ',' << m.coeffs << ',' << buf;
  std::snprintf(buf, sizeof(buf), "%.17g", m.hop_ms);
  out << ',' << buf << '\n';
  for (std::size_t f = 0; f < m.frames; ++f) {
    for (std::size_t c = 0; c < m.coeffs; ++c) {
      std::snprintf(buf, sizeof(buf), "%.17g", m.at(f, c));
      out << (c ? "," : "") << buf;
    }
    out << '\n';
  }
  if (!out) throw IoError("save_mfcc: write failed for " + path);
}

inline MfccMatrix load_mfcc(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("load_mfcc: cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw DataError("load_mfcc: empty file " + path);
  std::istringstream header(line);
  std::string tag, version, field;
  std::getline(header, tag, ',');
  std::getline(header, version, ',');
  if (tag != "mfcc" || version != "v1") throw DataError("load_mfcc: bad header in " + path);
  MfccMatrix m;
  try {
    std::getline(header, field, ',');
    m.frames = std::stoul(field);
    std::getline(header, field, ',');
    m.coeffs = std::stoul(field);
    std::getline(header, field, ',');
    m.frame_ms = std::stod(field);
    std::getline(header, field, ',');
    m.hop_ms = std::stod(field);
  } catch (const std::exception&) {
    throw DataError("load_mfcc: malformed header in " + path);
  }
  m.values.reserve(m.frames * m.coeffs);
  for (std::size_t f = 0; f < m.frames; ++f) {
    if (!std::getline(in, line)) throw DataError("load_mfcc: truncated matrix in " + path);
    std::istringstream row(line);
    for (std::size_t c = 0; c < m.coeffs; ++c) {
      if (!std::getline(row, field, ',')) throw DataError("load_mfcc: short row in " + path);
      try {
        m.values.push_back(std::stod(field));
      } catch (const std::exception&) {
        throw DataError("load_mfcc: bad value in " + path);
      }
    }
  }
  return m;
}

}  // namespace stx
