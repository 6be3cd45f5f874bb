#pragma once

// Evaluation measures: RMSE and the concordance correlation coefficient
//   CCC = 2 cov(Y, Yhat) / ((mu_Y - mu_Yhat)^2 + var_Y + var_Yhat)
// with population (1/K) covariance and variances.

#include <cmath>
#include <cstdio>
#include <span>
#include <string>

#include "stx/error.hpp"

namespace stx {

inline double rmse(std::span<const double> pred, std::span<const double> target) {
  if (pred.size() != target.size()) {
    throw ContractError("rmse: length mismatch " + std::to_string(pred.size()) + " vs " +
                        std::to_string(target.size()));
  }
  if (pred.empty()) throw ContractError("rmse: empty input");
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = pred[i] - target[i];
    acc += d * d;
  }
  return std::sqrt(acc / static_cast<double>(pred.size()));
}

inline double ccc(std::span<const double> pred, std::span<const double> target) {
  if (pred.size() != target.size()) {
    throw ContractError("ccc: length mismatch " + std::to_string(pred.size()) + " vs " +
                        std::to_string(target.size()));
  }
  if (pred.size() < 2) throw ContractError("ccc: need at least two samples");
  const auto k = static_cast<double>(pred.size());
  double mean_p = 0.0, mean_t = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    mean_p += pred[i];
    mean_t += target[i];
  }
  mean_p /= k;
  mean_t /= k;
  double var_p = 0.0, var_t = 0.0, cov = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    var_p += (pred[i] - mean_p) * (pred[i] - mean_p);
    var_t += (target[i] - mean_t) * (target[i] - mean_t);
    cov += (pred[i] - mean_p) * (target[i] - mean_t);
  }
  var_p /= k;
  var_t /= k;
  cov /= k;
  if (var_p == 0.0 && var_t == 0.0) {
    throw NumericError("ccc: undefined for two constant inputs (0/0)");
  }
  // var_p + var_t is grouped so ccc(a,b) == ccc(b,a) bit-for-bit
  const double mean_gap = mean_p - mean_t;
  return 2.0 * cov / (mean_gap * mean_gap + (var_p + var_t));
}

struct EvalReport {
  double rmse = 0.0;
  double ccc = 0.0;
  std::size_t n = 0;
  std::string split;

  // Machine-readable key=value lines.
  std::string to_text() const {
    char buf[64];
    std::string out = "split=" + split + "\nn=" + std::to_string(n) + "\n";
    std::snprintf(buf, sizeof(buf), "%.17g", rmse);
    out += std::string("rmse=") + buf + "\n";
    std::snprintf(buf, sizeof(buf), "%.17g", ccc);
    out += std::string("ccc=") + buf + "\n";
    return out;
  }
};

}  // namespace stx
