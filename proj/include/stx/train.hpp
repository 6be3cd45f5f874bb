#pragma once

// Training loop: seeded shuffling, one stochastic-depth draw per node per
// batch, per-epoch validation in inference mode, best-checkpoint tracking,
// and early stopping on validation RMSE. Everything downstream of
// (seed, data, config) is deterministic.

#include <chrono>
#include <cstdio>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "stx/data.hpp"
#include "stx/metrics.hpp"
#include "stx/model.hpp"
#include "stx/optim.hpp"

namespace stx {

struct TrainConfig {
  int epochs = 200;
  std::size_t batch_size = 8;
  std::uint64_t seed = 42;
  int patience = 50;  // early stop after this many epochs without val-RMSE improvement
  AdamConfig adam;
  bool minmax_targets = false;
  std::string train_split = "train";
  std::string val_split = "val";

  void validate() const {
    if (epochs < 0) throw ConfigError("train: epochs must be >= 0");
    if (batch_size < 2) throw ConfigError("train: batch_size must be >= 2 (batch norm)");
    if (patience < 1) throw ConfigError("train: patience must be >= 1");
    if (adam.lr <= 0.0) throw ConfigError("train: learning rate must be positive");
  }

  std::map<std::string, std::string> to_kv() const {
    char buf[64];
    const auto fmt = [&buf](double v) {
      std::snprintf(buf, sizeof(buf), "%.17g", v);
      return std::string(buf);
    };
    std::map<std::string, std::string> kv;
    kv["epochs"] = std::to_string(epochs);
    kv["batch_size"] = std::to_string(batch_size);
    kv["seed"] = std::to_string(seed);
    kv["patience"] = std::to_string(patience);
    kv["lr"] = fmt(adam.lr);
    kv["weight_decay"] = fmt(adam.weight_decay);
    kv["beta1"] = fmt(adam.beta1);
    kv["beta2"] = fmt(adam.beta2);
    kv["adam_eps"] = fmt(adam.eps);
    kv["minmax_targets"] = minmax_targets ? "1" : "0";
    kv["train_split"] = train_split;
    kv["val_split"] = val_split;
    return kv;
  }

  void apply_kv(const std::string& key, const std::string& value) {
    try {
      if (key == "epochs") epochs = std::stoi(value);
      else if (key == "batch_size") batch_size = std::stoul(value);
      else if (key == "seed") seed = std::stoull(value);
      else if (key == "patience") patience = std::stoi(value);
      else if (key == "lr") adam.lr = std::stod(value);
      else if (key == "weight_decay") adam.weight_decay = std::stod(value);
      else if (key == "beta1") adam.beta1 = std::stod(value);
      else if (key == "beta2") adam.beta2 = std::stod(value);
      else if (key == "adam_eps") adam.eps = std::stod(value);
      else if (key == "minmax_targets") minmax_targets = value == "1" || value == "true";
      else if (key == "train_split") train_split = value;
      else if (key == "val_split") val_split = value;
      else throw DataError("train config: unknown key '" + key + "'");
    } catch (const DataError&) {
      throw;
    } catch (const std::exception&) {
      throw DataError("train config: bad value '" + value + "' for key '" + key + "'");
    }
  }
};

struct EpochStats {
  double train_loss = 0.0;  // mean batch MSE in training-target units
  double val_rmse = 0.0;    // raw score units
  double val_ccc = 0.0;
};

struct TrainReport {
  std::vector<EpochStats> epochs;
  int best_epoch = -1;
  double best_val_rmse = std::numeric_limits<double>::infinity();
  std::uint64_t seed = 0;
  std::map<std::string, std::string> config_kv;
  double wall_time_s = 0.0;  // informational; excluded from the determinism contract

  // Line-oriented text: header key=value lines, a tab-separated epoch table,
  // then summary keys. Lines starting with '#' carry non-deterministic
  // metadata (timing) and are not part of the reproducibility contract.
  std::string serialize() const {
    char buf[64];
    const auto fmt = [&buf](double v) {
      std::snprintf(buf, sizeof(buf), "%.17g", v);
      return std::string(buf);
    };
    std::string out = "stxtrain,v1\n";
    out += "seed=" + std::to_string(seed) + "\n";
    for (const auto& [k, v] : config_kv) out += k + "=" + v + "\n";
    out += "columns=epoch\ttrain_loss\tval_rmse\tval_ccc\n";
    for (std::size_t e = 0; e < epochs.size(); ++e) {
      out += std::to_string(e) + "\t" + fmt(epochs[e].train_loss) + "\t" + fmt(epochs[e].val_rmse) +
             "\t" + fmt(epochs[e].val_ccc) + "\n";
    }
    out += "best_epoch=" + std::to_string(best_epoch) + "\n";
    out += "best_val_rmse=" + fmt(best_val_rmse) + "\n";
    out += "# wall_time_s=" + fmt(wall_time_s) + "\n";
    return out;
  }
};

// Inference-mode metrics over one split, in raw score units.
inline EvalReport evaluate_split(Model& model, const Corpus& corpus, const std::string& split,
                                 std::size_t batch_size = 8) {
  const std::vector<std::size_t> indices = corpus.split_indices(split);
  if (indices.empty()) throw ContractError("evaluate: split '" + split + "' is empty");
  NoGradGuard no_grad;
  std::vector<double> preds, targets;
  preds.reserve(indices.size());
  targets.reserve(indices.size());
  for (const auto& batch : eval_batches(indices, batch_size)) {
    std::vector<MfccMatrix> feats;
    feats.reserve(batch.size());
    for (const std::size_t i : batch) feats.push_back(corpus.features[i]);
    ForwardCtx ctx;
    const Tensor y = model.forward(pad_batch(feats, model.config()), ctx);
    for (std::size_t j = 0; j < batch.size(); ++j) {
      preds.push_back(y.values()[j] * model.target_scale + model.target_offset);
      targets.push_back(corpus.items[batch[j]].pcl_c);
    }
  }
  EvalReport report;
  report.split = split;
  report.n = preds.size();
  report.rmse = rmse(preds, targets);
  report.ccc = preds.size() >= 2 ? ccc(preds, targets) : 0.0;
  return report;
}

inline TrainReport train_model(Model& model, const Corpus& corpus, const TrainConfig& tcfg) {
  tcfg.validate();
  const std::vector<std::size_t> train_idx = corpus.split_indices(tcfg.train_split);
  const std::vector<std::size_t> val_idx = corpus.split_indices(tcfg.val_split);
  if (train_idx.empty() || val_idx.empty()) {
    throw ContractError("train: need non-empty '" + tcfg.train_split + "' and '" + tcfg.val_split +
                        "' splits");
  }
  const auto start_time = std::chrono::steady_clock::now();

  model.target_scale = 1.0;
  model.target_offset = 0.0;
  if (tcfg.minmax_targets) {
    double lo = corpus.items[train_idx[0]].pcl_c, hi = lo;
    for (const std::size_t i : train_idx) {
      lo = std::min(lo, corpus.items[i].pcl_c);
      hi = std::max(hi, corpus.items[i].pcl_c);
    }
    model.target_offset = lo;
    model.target_scale = hi > lo ? hi - lo : 1.0;
  }

  TrainReport report;
  report.seed = tcfg.seed;
  for (const auto& [k, v] : model.config().to_kv()) report.config_kv["model." + k] = v;
  for (const auto& [k, v] : tcfg.to_kv()) report.config_kv["train." + k] = v;

  AdamOptimizer opt(model.parameters(), tcfg.adam);
  const RngStream master(tcfg.seed);
  RngStream stoch = master.split(2);
  const RngStream shuffle_base = master.split(3);

  NamedTensors best_state = model.named_state();
  int since_best = 0;
  long global_step = 0;

  for (int epoch = 0; epoch < tcfg.epochs; ++epoch) {
    double loss_sum = 0.0;
    std::size_t n_batches = 0;
    const auto batches =
        epoch_batches(train_idx.size(), tcfg.batch_size, shuffle_base, static_cast<std::uint64_t>(epoch));
    for (const auto& batch : batches) {
      std::vector<MfccMatrix> feats;
      std::vector<double> targets;
      feats.reserve(batch.size());
      targets.reserve(batch.size());
      for (const std::size_t pos : batch) {
        const std::size_t i = train_idx[pos];
        feats.push_back(corpus.features[i]);
        targets.push_back((corpus.items[i].pcl_c - model.target_offset) / model.target_scale);
      }
      opt.zero_grad();
      ForwardCtx ctx{Mode::kTrain, &stoch, nullptr};
      const Tensor pred = model.forward(pad_batch(feats, model.config()), ctx);
      const Tensor loss = mse_loss(pred, targets);
      ++global_step;
      if (!std::isfinite(loss.value())) {
        throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(n_batches) + " (global step " + std::to_string(global_step) +
                           ")");
      }
      loss.backward();
      opt.step();
      loss_sum += loss.value();
      ++n_batches;
    }

    EpochStats stats;
    stats.train_loss = n_batches ? loss_sum / static_cast<double>(n_batches) : 0.0;
    const EvalReport val = evaluate_split(model, corpus, tcfg.val_split, tcfg.batch_size);
    stats.val_rmse = val.rmse;
    stats.val_ccc = val.ccc;
    report.epochs.push_back(stats);

    if (val.rmse < report.best_val_rmse) {
      report.best_val_rmse = val.rmse;
      report.best_epoch = epoch;
      best_state = model.named_state();
      since_best = 0;
    } else if (++since_best >= tcfg.patience) {
      break;
    }
  }

  model.load_state(best_state);
  report.wall_time_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start_time).count();
  return report;
}

}  // namespace stx
