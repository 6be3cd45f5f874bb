#pragma once

// Adam with decoupled weight decay: parameters are first shrunk by
// lr * weight_decay, then updated with bias-corrected moment estimates.

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "stx/tensor.hpp"

namespace stx {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

class AdamOptimizer {
 public:
  AdamOptimizer(std::vector<std::pair<std::string, Tensor>>& params, AdamConfig cfg = {})
      : cfg_(cfg) {
    params_.reserve(params.size());
    m_.reserve(params.size());
    v_.reserve(params.size());
    for (auto& [name, t] : params) {
      params_.push_back(t);
      m_.emplace_back(t.size(), 0.0);
      v_.emplace_back(t.size(), 0.0);
    }
  }

  long step_count() const { return t_; }
  const AdamConfig& config() const { return cfg_; }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  // One update over all parameters; a parameter whose grad was never
  // populated (e.g. a skipped branch) is treated as having zero gradient.
  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor& p = params_[i];
      if (m_[i].size() != p.size()) {
        throw ContractError("adam: parameter " + std::to_string(i) +
                            " changed size since optimizer construction");
      }
      std::vector<double>& w = p.values();
      const std::vector<double>* grad = p.has_grad() ? &p.grad() : nullptr;
      if (grad && grad->size() != w.size()) {
        throw ContractError("adam: gradient shape mismatch for parameter " + std::to_string(i));
      }
      for (std::size_t j = 0; j < w.size(); ++j) {
        if (cfg_.weight_decay != 0.0) w[j] -= cfg_.lr * cfg_.weight_decay * w[j];
        const double g = grad ? (*grad)[j] : 0.0;
        m_[i][j] = cfg_.beta1 * m_[i][j] + (1.0 - cfg_.beta1) * g;
        v_[i][j] = cfg_.beta2 * v_[i][j] + (1.0 - cfg_.beta2) * g * g;
        const double m_hat = m_[i][j] / bc1;
        const double v_hat = v_[i][j] / bc2;
        w[j] -= cfg_.lr * m_hat / (std::sqrt(v_hat) + cfg_.eps);
      }
    }
  }

 private:
  AdamConfig cfg_;
  long t_ = 0;
  std::vector<Tensor> params_;  // shares storage with the model
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
};

// Mean squared error between predictions and fixed targets; the training
// surrogate whose square root is the reported RMSE.
inline Tensor mse_loss(const Tensor& pred, const std::vector<double>& target) {
  if (pred.size() == 0 || pred.size() != target.size()) {
    throw ContractError("mse_loss: prediction/target length mismatch (" +
                        std::to_string(pred.size()) + " vs " + std::to_string(target.size()) + ")");
  }
  const Tensor t(pred.shape(), target);
  const Tensor diff = sub(pred, t);
  return scale(sum(mul(diff, diff)), 1.0 / static_cast<double>(pred.size()));
}

}  // namespace stx
