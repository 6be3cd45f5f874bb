#pragma once

// Corpus handling: a CSV index (`id,path,pcl_c,split`) over per-participant
// audio or precomputed feature files, a deterministic synthetic-corpus
// generator whose score is recoverable from spectral features, and seeded
// batch iteration.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "stx/dsp.hpp"
#include "stx/rng.hpp"
#include "stx/wav.hpp"

namespace stx {

struct CorpusItem {
  std::string id;
  std::string path;  // relative to the corpus root
  double pcl_c = 0.0;
  std::string split;
};

struct Corpus {
  std::string root;
  std::vector<CorpusItem> items;
  std::vector<MfccMatrix> features;  // parallel to items

  std::vector<std::size_t> split_indices(const std::string& split) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < items.size(); ++i) {
      if (items[i].split == split) out.push_back(i);
    }
    return out;
  }
};

namespace detail {

inline bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace detail

// Features for one index row: WAV files go through extraction, .mfcc files
// are read back from the text format.
inline MfccMatrix load_features(const std::string& root, const CorpusItem& item,
                                const FeatureConfig& fcfg) {
  const std::string full = (std::filesystem::path(root) / item.path).string();
  if (detail::ends_with(item.path, ".wav")) return extract_mfcc(read_wav(full), fcfg);
  if (detail::ends_with(item.path, ".mfcc")) return load_mfcc(full);
  throw DataError("corpus: row '" + item.id + "' has unsupported file type: " + item.path);
}

// Parses and validates the index, then materializes features for every row
// (in parallel when threads > 1; the result does not depend on the thread
// count).
inline Corpus load_corpus(const std::string& root, const std::string& index_file,
                          const FeatureConfig& fcfg, int threads = 1) {
  const std::string index_path = (std::filesystem::path(root) / index_file).string();
  std::ifstream in(index_path);
  if (!in) throw IoError("load_corpus: cannot open index " + index_path);
  std::string line;
  if (!std::getline(in, line) || line != "id,path,pcl_c,split") {
    throw DataError("load_corpus: expected header 'id,path,pcl_c,split' in " + index_path);
  }
  Corpus corpus;
  corpus.root = root;
  std::set<std::string> ids;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    std::istringstream fields(line);
    CorpusItem item;
    std::string score;
    if (!std::getline(fields, item.id, ',') || !std::getline(fields, item.path, ',') ||
        !std::getline(fields, score, ',') || !std::getline(fields, item.split, ',')) {
      throw DataError("load_corpus: malformed row " + std::to_string(row) + " in " + index_path);
    }
    try {
      std::size_t used = 0;
      item.pcl_c = std::stod(score, &used);
      if (used != score.size()) throw std::invalid_argument(score);
    } catch (const std::exception&) {
      throw DataError("load_corpus: non-numeric score '" + score + "' for id '" + item.id +
                      "' (row " + std::to_string(row) + ")");
    }
    if (!std::isfinite(item.pcl_c)) {
      throw DataError("load_corpus: non-finite score for id '" + item.id + "'");
    }
    if (!ids.insert(item.id).second) {
      throw DataError("load_corpus: duplicate id '" + item.id + "' (row " + std::to_string(row) + ")");
    }
    const std::string full = (std::filesystem::path(root) / item.path).string();
    if (!std::filesystem::exists(full)) {
      throw DataError("load_corpus: id '" + item.id + "' references missing file " + full);
    }
    corpus.items.push_back(std::move(item));
  }

  corpus.features.resize(corpus.items.size());
  const int n_threads = std::max(1, threads);
  if (n_threads == 1 || corpus.items.size() < 2) {
    for (std::size_t i = 0; i < corpus.items.size(); ++i) {
      corpus.features[i] = load_features(root, corpus.items[i], fcfg);
    }
  } else {
    std::vector<std::thread> pool;
    std::vector<std::string> errors(static_cast<std::size_t>(n_threads));
    for (int t = 0; t < n_threads; ++t) {
      pool.emplace_back([&, t] {
        try {
          for (std::size_t i = static_cast<std::size_t>(t); i < corpus.items.size();
               i += static_cast<std::size_t>(n_threads)) {
            corpus.features[i] = load_features(root, corpus.items[i], fcfg);
          }
        } catch (const std::exception& e) {
          errors[static_cast<std::size_t>(t)] = e.what();
        }
      });
    }
    for (auto& th : pool) th.join();
    for (const auto& e : errors) {
      if (!e.empty()) throw DataError("load_corpus: " + e);
    }
  }
  return corpus;
}

// ---------------------------------------------------------------------------
// Synthetic corpus
// ---------------------------------------------------------------------------

struct SyntheticSpec {
  int n_participants = 64;
  double duration_s = 1.0;
  int sample_rate = 16000;
  double score_lo = 20.0;
  double score_hi = 60.0;
  std::uint64_t seed = 42;
};

// Two sine tones whose frequencies and amplitude-modulation rate rise
// monotonically with the score, plus Gaussian noise 30 dB below the signal;
// the score is recoverable from spectral features by construction.
inline AudioSignal synthesize_participant(const SyntheticSpec& spec, double score, RngStream rng) {
  const double z = (score - spec.score_lo) / (spec.score_hi - spec.score_lo);
  const double f1 = 220.0 + 320.0 * z;
  const double f2 = 1200.0 + 800.0 * z;
  const double am = 1.5 + 6.0 * z;
  AudioSignal sig;
  sig.sample_rate_hz = spec.sample_rate;
  const auto n = static_cast<std::size_t>(spec.duration_s * spec.sample_rate);
  sig.samples.resize(n);
  constexpr double two_pi = 6.283185307179586476925286766559;
  double energy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double t = static_cast<double>(i) / spec.sample_rate;
    const double v = 0.45 * std::sin(two_pi * f1 * t) * (0.6 + 0.4 * std::sin(two_pi * am * t)) +
                     0.35 * std::sin(two_pi * f2 * t);
    sig.samples[i] = v;
    energy += v * v;
  }
  const double sigma = std::sqrt(energy / static_cast<double>(n)) * std::pow(10.0, -30.0 / 20.0);
  for (double& s : sig.samples) {
    s = std::max(-1.0, std::min(1.0, s + sigma * rng.normal()));
  }
  return sig;
}

// Writes n WAV files plus index.csv with a deterministic 70/15/15 split.
inline void generate_synthetic(const SyntheticSpec& spec, const std::string& out_dir) {
  if (!(spec.score_lo < spec.score_hi)) throw ConfigError("synthetic: need score_lo < score_hi");
  if (spec.n_participants < 0) throw ConfigError("synthetic: participant count must be >= 0");
  if (spec.duration_s <= 0.0 || spec.sample_rate <= 0) {
    throw ConfigError("synthetic: duration and sample rate must be positive");
  }
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("synthetic: cannot create " + out_dir + ": " + ec.message());

  const RngStream master(spec.seed);
  std::ostringstream index;
  index << "id,path,pcl_c,split\n";
  const int n = spec.n_participants;
  const int n_train = static_cast<int>(0.70 * n);
  const int n_val = static_cast<int>(0.85 * n) - n_train;
  for (int i = 0; i < n; ++i) {
    RngStream prng = master.split(1000 + static_cast<std::uint64_t>(i));
    const double score = spec.score_lo + (spec.score_hi - spec.score_lo) * prng.uniform();
    char id[16];
    std::snprintf(id, sizeof(id), "p%03d", i);
    const std::string wav_name = std::string(id) + ".wav";
    write_wav((std::filesystem::path(out_dir) / wav_name).string(),
              synthesize_participant(spec, score, prng.split(7)));
    const char* split = i < n_train ? "train" : (i < n_train + n_val ? "val" : "test");
    char score_text[64];
    std::snprintf(score_text, sizeof(score_text), "%.17g", score);
    index << id << ',' << wav_name << ',' << score_text << ',' << split << '\n';
  }
  std::ofstream out((std::filesystem::path(out_dir) / "index.csv").string(), std::ios::trunc);
  if (!out) throw IoError("synthetic: cannot write index.csv in " + out_dir);
  out << index.str();
}

// ---------------------------------------------------------------------------
// Batch iteration
// ---------------------------------------------------------------------------

// Training order for one epoch: a seeded shuffle keyed by (stream, epoch), so
// epochs differ but reruns reproduce; a final batch smaller than batch_size
// is dropped.
inline std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size,
                                                           const RngStream& base,
                                                           std::uint64_t epoch) {
  if (batch_size == 0) throw ContractError("epoch_batches: batch size must be positive");
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  RngStream rng = base.split(epoch);
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng.next_u64() % i);
    std::swap(order[i - 1], order[j]);
  }
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start + batch_size <= n; start += batch_size) {
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(start + batch_size));
  }
  return batches;
}

// Evaluation order: original order, nothing shuffled or dropped.
inline std::vector<std::vector<std::size_t>> eval_batches(const std::vector<std::size_t>& indices,
                                                          std::size_t batch_size) {
  if (batch_size == 0) throw ContractError("eval_batches: batch size must be positive");
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < indices.size(); start += batch_size) {
    const std::size_t end = std::min(indices.size(), start + batch_size);
    batches.emplace_back(indices.begin() + static_cast<std::ptrdiff_t>(start),
                         indices.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

}  // namespace stx
