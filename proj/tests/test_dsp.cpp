#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>

#include "mfcc_pipeline_oracle.hpp"
#include "oracles.hpp"
#include "stx/dsp.hpp"
#include "stx/rng.hpp"
#include "stx/wav.hpp"

using namespace stx;

namespace {

AudioSignal tone(double hz, double seconds, int rate, double amp = 0.5) {
  AudioSignal sig;
  sig.sample_rate_hz = rate;
  const auto n = static_cast<std::size_t>(seconds * rate);
  sig.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    sig.samples[i] = amp * std::sin(2.0 * oracle::kPi * hz * static_cast<double>(i) / rate);
  }
  return sig;
}

AudioSignal noise_signal(std::size_t n, int rate, RngStream& rng, double amp = 0.3) {
  AudioSignal sig;
  sig.sample_rate_hz = rate;
  sig.samples.resize(n);
  for (double& s : sig.samples) s = amp * (2.0 * rng.uniform() - 1.0);
  return sig;
}

}  // namespace

TEST_CASE("framing counts and windowed content", "[dsp]") {
  AudioSignal sig;
  sig.sample_rate_hz = 16000;

  SECTION("exact fit gives one frame") {
    sig.samples.assign(400, 0.1);
    const FrameMatrix f = frame_and_window(sig, 25.0, 10.0);
    CHECK(f.n_frames == 1);
    CHECK(f.frame_len == 400);
  }
  SECTION("zero signal gives zero frames") {
    sig.samples.assign(800, 0.0);
    const FrameMatrix f = frame_and_window(sig, 25.0, 10.0);
    for (const double v : f.values) REQUIRE(v == 0.0);
  }
  SECTION("720 samples at frame 400 / hop 160 give 3 frames") {
    sig.samples.assign(720, 0.05);
    const FrameMatrix f = frame_and_window(sig, 25.0, 10.0);
    CHECK(f.n_frames == 3);
  }
  SECTION("short signal is rejected") {
    sig.samples.assign(399, 0.0);
    CHECK_THROWS_AS(frame_and_window(sig, 25.0, 10.0), DataError);
  }
  SECTION("bad frame/hop configuration is rejected") {
    sig.samples.assign(800, 0.0);
    CHECK_THROWS_AS(frame_and_window(sig, 5.0, 10.0), ConfigError);
  }
}

TEST_CASE("power spectrum matches the naive DFT oracle", "[dsp]") {
  SECTION("zero frame") {
    const std::vector<double> zero(64, 0.0);
    for (const double p : power_spectrum(zero, 64)) REQUIRE(p == 0.0);
  }
  SECTION("pure cosine at bin frequency concentrates in that bin") {
    const std::size_t n = 64, k = 5;
    std::vector<double> frame(n);
    for (std::size_t t = 0; t < n; ++t)
      frame[t] = std::cos(2.0 * oracle::kPi * static_cast<double>(k * t) / static_cast<double>(n));
    const auto power = power_spectrum(frame, n);
    const auto ref = oracle::dft_power_ref(frame, n);
    for (std::size_t b = 0; b < power.size(); ++b) {
      REQUIRE(power[b] == Catch::Approx(ref[b]).margin(1e-9));
    }
    double total = 0.0;
    for (const double p : power) total += p;
    CHECK(power[k] / total > 0.999);
  }
  SECTION("constant frame puts all energy in bin 0") {
    const std::vector<double> frame(32, 0.7);
    const auto power = power_spectrum(frame, 32);
    const auto ref = oracle::dft_power_ref(frame, 32);
    CHECK(power[0] == Catch::Approx(ref[0]).margin(1e-9));
    for (std::size_t b = 1; b < power.size(); ++b) REQUIRE(std::abs(power[b]) < 1e-18);
  }
  SECTION("random frames, zero-padded, match the oracle to 1e-9 relative") {
    RngStream rng(21);
    for (int trial = 0; trial < 20; ++trial) {
      std::vector<double> frame(100);
      for (double& v : frame) v = 2.0 * rng.uniform() - 1.0;
      const auto power = power_spectrum(frame, 128);
      const auto ref = oracle::dft_power_ref(frame, 128);
      for (std::size_t b = 0; b < power.size(); ++b) {
        REQUIRE(std::abs(power[b] - ref[b]) <= 1e-9 * std::max(1.0, std::abs(ref[b])));
      }
    }
  }
  SECTION("n_fft must be a power of two and cover the frame") {
    CHECK_THROWS_AS(power_spectrum(std::vector<double>(10, 0.0), 48), ConfigError);
    CHECK_THROWS_AS(power_spectrum(std::vector<double>(65, 0.0), 64), ConfigError);
  }
}

TEST_CASE("mel filterbank structure and energies", "[dsp]") {
  const MelFilterbank fb = build_mel_filterbank(26, 512, 16000, 0.0, 8000.0);

  SECTION("filters are nonnegative, unimodal, zero outside their band") {
    for (int m = 0; m < fb.n_filters; ++m) {
      bool rising_done = false;
      double prev = 0.0;
      for (std::size_t k = 0; k < fb.n_bins; ++k) {
        const double w = fb.weight(m, k);
        REQUIRE(w >= 0.0);
        if (w < prev) rising_done = true;
        if (rising_done && w > prev) FAIL("filter " << m << " is not unimodal");
        prev = w;
      }
    }
  }
  SECTION("zero spectrum floors every energy") {
    const std::vector<double> zero(fb.n_bins, 0.0);
    for (const double s : mel_filter_energies(zero, fb)) {
      REQUIRE(s == Catch::Approx(std::log(1e-10)).margin(1e-15));
    }
  }
  SECTION("indicator spectrum lights up only the covering filters") {
    // Bin 40 (1250 Hz): find a filter with substantial weight there, then
    // verify energies against direct dot products.
    std::vector<double> spec(fb.n_bins, 0.0);
    spec[40] = 1.0;
    const auto sn = mel_filter_energies(spec, fb);
    for (int m = 0; m < fb.n_filters; ++m) {
      const double direct = fb.weight(m, 40);
      const double expected = std::log(std::max(direct, kLogFloor));
      REQUIRE(sn[static_cast<std::size_t>(m)] == Catch::Approx(expected).margin(1e-12));
    }
  }
  SECTION("uniform spectrum gives the log of each filter's weight sum") {
    const std::vector<double> ones(fb.n_bins, 1.0);
    const auto sn = mel_filter_energies(ones, fb);
    for (int m = 0; m < fb.n_filters; ++m) {
      double wsum = 0.0;
      for (std::size_t k = 0; k < fb.n_bins; ++k) wsum += fb.weight(m, k);
      REQUIRE(sn[static_cast<std::size_t>(m)] ==
              Catch::Approx(std::log(std::max(wsum, kLogFloor))).margin(1e-12));
    }
  }
  SECTION("length mismatch is rejected") {
    CHECK_THROWS_AS(mel_filter_energies(std::vector<double>(10, 0.0), fb), ShapeError);
  }
}

TEST_CASE("direct cosine transform", "[dsp]") {
  SECTION("C_0 collapses to the plain sum") {
    const std::vector<double> sn{0.3, -1.2, 2.0, 0.7};
    const auto c = dct_mfcc(sn, 3);
    CHECK(c[0] == Catch::Approx(0.3 - 1.2 + 2.0 + 0.7).margin(1e-12));
  }
  SECTION("zero energies give zero coefficients") {
    const auto c = dct_mfcc(std::vector<double>(8, 0.0), 5);
    for (const double v : c) REQUIRE(v == 0.0);
  }
  SECTION("single-term evaluation") {
    const auto c = dct_mfcc({1.0, 0.0, 0.0, 0.0}, 1);
    CHECK(c[1] == Catch::Approx(std::cos(0.5 * oracle::kPi / 4.0)).margin(1e-7));
    CHECK(c[1] == Catch::Approx(0.9238795).margin(1e-7));
  }
  SECTION("random energies match the reference sum") {
    RngStream rng(31);
    std::vector<double> sn(26);
    for (double& v : sn) v = rng.normal();
    const auto c = dct_mfcc(sn, 12);
    const auto ref = oracle::dct_ref(sn, 12);
    for (std::size_t i = 0; i < c.size(); ++i) REQUIRE(c[i] == Catch::Approx(ref[i]).margin(1e-12));
  }
}

TEST_CASE("end-to-end extraction", "[dsp]") {
  const FeatureConfig cfg;

  SECTION("zero signal: identical rows, floored C_0, vanishing higher coefficients") {
    AudioSignal sig;
    sig.sample_rate_hz = 16000;
    sig.samples.assign(16000, 0.0);
    const MfccMatrix m = extract_mfcc(sig, cfg);
    REQUIRE(m.frames == 98);
    REQUIRE(m.coeffs == 13);
    CHECK(m.at(0, 0) == Catch::Approx(26.0 * std::log(1e-10)).margin(1e-9));
    for (std::size_t c = 1; c < m.coeffs; ++c) REQUIRE(std::abs(m.at(0, c)) < 1e-9);
    for (std::size_t f = 1; f < m.frames; ++f)
      for (std::size_t c = 0; c < m.coeffs; ++c) REQUIRE(m.at(f, c) == m.at(0, c));
  }
  SECTION("one second of 440 Hz at 16 kHz gives 98 frames x 13 coefficients") {
    const MfccMatrix m = extract_mfcc(tone(440.0, 1.0, 16000), cfg);
    CHECK(m.frames == 98);
    CHECK(m.coeffs == 13);
  }
  SECTION("extraction is deterministic") {
    const AudioSignal sig = tone(523.25, 0.5, 16000);
    const MfccMatrix a = extract_mfcc(sig, cfg);
    const MfccMatrix b = extract_mfcc(sig, cfg);
    CHECK(a.values == b.values);
  }
  SECTION("matches the naive oracle on random half-second signals") {
    RngStream rng(7);
    for (int trial = 0; trial < 10; ++trial) {
      RngStream srng = rng.split(trial);
      const AudioSignal sig = noise_signal(8000, 16000, srng);
      const MfccMatrix m = extract_mfcc(sig, cfg);
      std::size_t frames = 0;
      const std::vector<double> ref = testutil::mfcc_pipeline_oracle(sig, cfg, &frames);
      REQUIRE(m.frames == frames);
      for (std::size_t i = 0; i < ref.size(); ++i) {
        REQUIRE(std::abs(m.values[i] - ref[i]) < 1e-8);
      }
    }
  }
}

TEST_CASE("time-shift covariance: one-hop shift moves rows by one", "[dsp]") {
  RngStream rng(17);
  const AudioSignal sig = noise_signal(4000, 16000, rng);
  AudioSignal shifted;
  shifted.sample_rate_hz = 16000;
  shifted.samples.assign(160, 0.0);
  shifted.samples.insert(shifted.samples.end(), sig.samples.begin(), sig.samples.end());

  const FeatureConfig cfg;
  const MfccMatrix a = extract_mfcc(sig, cfg);
  const MfccMatrix b = extract_mfcc(shifted, cfg);
  REQUIRE(b.frames == a.frames + 1);
  for (std::size_t f = 1; f < a.frames; ++f) {
    for (std::size_t c = 0; c < a.coeffs; ++c) {
      REQUIRE(std::abs(b.at(f + 1, c) - a.at(f, c)) < 1e-9);
    }
  }
}

TEST_CASE("amplitude scaling shifts C_0 by Nf*ln(a^2) and leaves C_i alone", "[dsp]") {
  RngStream rng(23);
  const AudioSignal sig = noise_signal(4000, 16000, rng, 0.4);  // well above the log floor
  AudioSignal scaled = sig;
  const double a = 2.0;
  for (double& s : scaled.samples) s *= a;

  const FeatureConfig cfg;
  const MfccMatrix base = extract_mfcc(sig, cfg);
  const MfccMatrix big = extract_mfcc(scaled, cfg);
  const double c0_shift = cfg.n_filters * std::log(a * a);
  for (std::size_t f = 0; f < base.frames; ++f) {
    REQUIRE(big.at(f, 0) - base.at(f, 0) == Catch::Approx(c0_shift).margin(1e-9));
    for (std::size_t c = 1; c < base.coeffs; ++c) {
      REQUIRE(std::abs(big.at(f, c) - base.at(f, c)) < 1e-9);
    }
  }
}

TEST_CASE("wav io round trip and stereo downmix", "[dsp]") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "stx_dsp_test";
  fs::create_directories(dir);

  SECTION("mono round trip within quantization") {
    const AudioSignal sig = tone(300.0, 0.05, 16000, 0.8);
    const std::string path = (dir / "mono.wav").string();
    write_wav(path, sig);
    const AudioSignal back = read_wav(path);
    REQUIRE(back.sample_rate_hz == 16000);
    REQUIRE(back.samples.size() == sig.samples.size());
    // write scale 32767, read scale 32768: worst case ~1.5 LSB
    for (std::size_t i = 0; i < sig.samples.size(); ++i) {
      REQUIRE(std::abs(back.samples[i] - sig.samples[i]) < 1.5 / 32768.0);
    }
  }
  SECTION("stereo input is averaged to mono") {
    // Hand-built 2-channel PCM16 file: L = 8192, R = -4096 per sample.
    std::vector<unsigned char> b;
    auto u32 = [&](std::uint32_t v) { for (int i = 0; i < 4; ++i) b.push_back((v >> (8 * i)) & 0xFF); };
    auto u16 = [&](std::uint16_t v) { b.push_back(v & 0xFF); b.push_back((v >> 8) & 0xFF); };
    const int n = 10;
    b.insert(b.end(), {'R', 'I', 'F', 'F'});
    u32(36 + n * 4);
    b.insert(b.end(), {'W', 'A', 'V', 'E', 'f', 'm', 't', ' '});
    u32(16);
    u16(1);
    u16(2);
    u32(8000);
    u32(8000 * 4);
    u16(4);
    u16(16);
    b.insert(b.end(), {'d', 'a', 't', 'a'});
    u32(n * 4);
    for (int i = 0; i < n; ++i) {
      u16(8192);
      u16(static_cast<std::uint16_t>(-4096));
    }
    const std::string path = (dir / "stereo.wav").string();
    std::ofstream f(path, std::ios::binary);
    f.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
    f.close();
    const AudioSignal sig = read_wav(path);
    REQUIRE(sig.sample_rate_hz == 8000);
    REQUIRE(sig.samples.size() == 10);
    for (const double s : sig.samples) {
      REQUIRE(s == Catch::Approx((8192.0 - 4096.0) / 2.0 / 32768.0).margin(1e-12));
    }
  }
  SECTION("malformed files are rejected") {
    const std::string path = (dir / "bad.wav").string();
    std::ofstream f(path, std::ios::binary);
    f << "not a wav";
    f.close();
    CHECK_THROWS_AS(read_wav(path), DataError);
    CHECK_THROWS_AS(read_wav((dir / "missing.wav").string()), IoError);
  }
}

TEST_CASE("mfcc text format round trip", "[dsp]") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "stx_dsp_test";
  fs::create_directories(dir);

  const MfccMatrix m = extract_mfcc(tone(440.0, 0.2, 16000), FeatureConfig{});
  const std::string path = (dir / "tone.mfcc").string();
  save_mfcc(path, m);
  const MfccMatrix back = load_mfcc(path);
  REQUIRE(back.frames == m.frames);
  REQUIRE(back.coeffs == m.coeffs);
  CHECK(back.frame_ms == m.frame_ms);
  CHECK(back.hop_ms == m.hop_ms);
  for (std::size_t i = 0; i < m.values.size(); ++i) {
    REQUIRE(std::abs(back.values[i] - m.values[i]) < 1e-9);
  }

  std::ofstream bad((dir / "bad.mfcc").string());
  bad << "nope,v9,1,1,25,10\n0\n";
  bad.close();
  CHECK_THROWS_AS(load_mfcc((dir / "bad.mfcc").string()), DataError);
}
