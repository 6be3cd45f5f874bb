#pragma once

// Finite-difference verification suite covering every layer mechanism and
// the assembled model. Stochastic draws are frozen through a MaskTape so the
// two-sided evaluations see identical masks. Layer checks must stay under
// 1e-4 relative error, the full model under 1e-3.

#include <algorithm>
#include <string>
#include <vector>

#include "stx/gradcheck.hpp"
#include "stx/layers.hpp"
#include "stx/model.hpp"

namespace stx {

struct GradCheckResult {
  std::string name;
  double max_err = 0.0;
  double tolerance = 1e-4;
  int trials = 0;

  bool passed() const { return max_err < tolerance; }
};

namespace gradcheck_detail {

inline Tensor random_tensor(Shape shape, RngStream& rng, double scale = 1.0) {
  std::vector<double> v(shape_size(shape));
  for (double& x : v) x = rng.normal() * scale;
  return Tensor(std::move(shape), std::move(v));
}

// Fixed random readout so the scalar exercises every output coordinate.
inline Tensor readout(const Tensor& y, const std::vector<double>& w) {
  return sum(mul(y, Tensor(y.shape(), w)));
}

inline std::vector<double> readout_weights(std::size_t n, RngStream& rng) {
  std::vector<double> w(n);
  for (double& v : w) v = rng.normal();
  return w;
}

inline ModelConfig suite_model_config() {
  ModelConfig cfg;
  cfg.patch_h = 2;
  cfg.patch_w = 13;
  cfg.d_model = 8;
  cfg.n_heads = 2;
  cfg.n_blocks = 2;
  cfg.lwta_u = 2;
  cfg.dropout_rate = 0.2;
  cfg.survival_p = 0.5;
  cfg.ri = 2;
  cfg.ffn_hidden = {16};
  cfg.lcn_patch = 2;
  cfg.lcn_stride = 2;
  cfg.lcn_filters = 8;
  cfg.reg_hidden = {8};
  cfg.max_frames = 8;
  return cfg;
}

}  // namespace gradcheck_detail

inline std::vector<GradCheckResult> run_gradcheck_suite(int trials = 100, std::uint64_t seed = 42) {
  using gradcheck_detail::random_tensor;
  using gradcheck_detail::readout;
  using gradcheck_detail::readout_weights;

  std::vector<GradCheckResult> results;

  // --- LWTA with frozen winner masks -------------------------------------
  {
    GradCheckResult r{"lwta", 0.0, 1e-4, trials};
    for (int t = 0; t < trials; ++t) {
      RngStream rng = RngStream(seed).split(1000 + static_cast<std::uint64_t>(t));
      LwtaLayer layer(5, 6, 2, rng);
      const Tensor x = random_tensor({3, 5}, rng);
      const auto w = readout_weights(3 * 6, rng);
      MaskTape tape;
      ForwardCtx record{Mode::kTrain, nullptr, &tape};
      (void)layer.forward(x, record);
      const auto f_x = [&](const Tensor& in) {
        tape.rewind();
        ForwardCtx replay{Mode::kTrain, nullptr, &tape};
        return readout(layer.forward(in, replay), w);
      };
      const auto f_w = [&](const Tensor& in) {
        tape.rewind();
        ForwardCtx replay{Mode::kTrain, nullptr, &tape};
        LwtaLayer probe = layer;
        probe.weight = in;
        return readout(probe.forward(x, replay), w);
      };
      r.max_err = std::max({r.max_err, finite_difference_check(f_x, x),
                            finite_difference_check(f_w, layer.weight.detach())});
    }
    results.push_back(r);
  }

  // --- Locally connected ---------------------------------------------------
  {
    GradCheckResult r{"locally_connected", 0.0, 1e-4, trials};
    for (int t = 0; t < trials; ++t) {
      RngStream rng = RngStream(seed).split(2000 + static_cast<std::uint64_t>(t));
      LocallyConnectedLayer layer(6, 2, 2, 2, 3, rng);
      const Tensor x = random_tensor({2, 6, 2}, rng);
      const auto w = readout_weights(2 * 3 * 3, rng);
      r.max_err = std::max(r.max_err, finite_difference_check(
                                          [&](const Tensor& in) { return readout(layer.forward(in), w); }, x));
      const int which = t % 2;
      const Tensor& param = which == 0 ? layer.w : layer.b;
      r.max_err = std::max(
          r.max_err, finite_difference_check(
                         [&](const Tensor& in) {
                           LocallyConnectedLayer probe = layer;
                           (which == 0 ? probe.w : probe.b) =
                               in;
                           return readout(probe.forward(x), w);
                         },
                         param.detach()));
    }
    results.push_back(r);
  }

  // --- Dropout with a frozen mask ------------------------------------------
  {
    GradCheckResult r{"dropout", 0.0, 1e-4, trials};
    for (int t = 0; t < trials; ++t) {
      RngStream rng = RngStream(seed).split(3000 + static_cast<std::uint64_t>(t));
      const Tensor x = random_tensor({4, 6}, rng);
      const auto w = readout_weights(x.size(), rng);
      MaskTape tape;
      ForwardCtx record{Mode::kTrain, &rng, &tape};
      (void)dropout_forward(x, 0.3, record);
      r.max_err = std::max(r.max_err, finite_difference_check(
                                          [&](const Tensor& in) {
                                            tape.rewind();
                                            ForwardCtx replay{Mode::kTrain, nullptr, &tape};
                                            return readout(dropout_forward(in, 0.3, replay), w);
                                          },
                                          x));
    }
    results.push_back(r);
  }

  // --- GELU ------------------------------------------------------------------
  {
    GradCheckResult r{"gelu", 0.0, 1e-4, trials};
    for (int t = 0; t < trials; ++t) {
      RngStream rng = RngStream(seed).split(4000 + static_cast<std::uint64_t>(t));
      const Tensor x = random_tensor({3, 5}, rng, 2.0);
      const auto w = readout_weights(x.size(), rng);
      r.max_err = std::max(
          r.max_err,
          finite_difference_check([&](const Tensor& in) { return readout(gelu(in), w); }, x));
    }
    results.push_back(r);
  }

  // --- Stochastic depth with a frozen gate -----------------------------------
  {
    GradCheckResult r{"stochastic_depth", 0.0, 1e-4, trials};
    for (int t = 0; t < trials; ++t) {
      RngStream rng = RngStream(seed).split(5000 + static_cast<std::uint64_t>(t));
      DenseLayer branch_layer(4, 4, rng);
      const auto branch = [&](const Tensor& in) { return branch_layer.forward(in); };
      StochasticDepthNode node(0.5);
      const Tensor x = random_tensor({3, 4}, rng);
      const auto w = readout_weights(x.size(), rng);
      MaskTape tape;
      ForwardCtx record{Mode::kTrain, &rng, &tape};
      (void)node.forward(x, branch, record);
      // train mode with the recorded gate, plus inference mode (x + p*branch)
      r.max_err = std::max({r.max_err,
                            finite_difference_check(
                                [&](const Tensor& in) {
                                  tape.rewind();
                                  ForwardCtx replay{Mode::kTrain, nullptr, &tape};
                                  return readout(node.forward(in, branch, replay), w);
                                },
                                x),
                            finite_difference_check(
                                [&](const Tensor& in) {
                                  ForwardCtx infer;
                                  return readout(node.forward(in, branch, infer), w);
                                },
                                x)});
    }
    results.push_back(r);
  }

  // --- Spatial-reduction attention -------------------------------------------
  for (const int ri : {1, 2}) {
    GradCheckResult r{"sr_attention_ri" + std::to_string(ri), 0.0, 1e-4, trials};
    for (int t = 0; t < trials; ++t) {
      RngStream rng = RngStream(seed).split(6000 + static_cast<std::uint64_t>(ri) * 500 +
                                            static_cast<std::uint64_t>(t));
      SrAttentionLayer layer(8, 2, ri, rng);
      const Tensor x = random_tensor({2, 4, 8}, rng);
      const auto w = readout_weights(x.size(), rng);
      r.max_err = std::max(r.max_err, finite_difference_check(
                                          [&](const Tensor& in) {
                                            ForwardCtx ctx;
                                            return readout(layer.forward(in, ctx), w);
                                          },
                                          x));
      // Rotate through the projection parameters.
      Tensor* params[] = {&layer.wq.w, &layer.wk.w, &layer.wv.w, &layer.wo.w, &layer.sr_w};
      Tensor* chosen = params[t % (ri > 1 ? 5 : 4)];
      r.max_err = std::max(r.max_err, finite_difference_check(
                                          [&](const Tensor& in) {
                                            SrAttentionLayer probe = layer;
                                            Tensor* probe_params[] = {&probe.wq.w, &probe.wk.w,
                                                                      &probe.wv.w, &probe.wo.w,
                                                                      &probe.sr_w};
                                            *probe_params[t % (ri > 1 ? 5 : 4)] =
                                                in;
                                            ForwardCtx ctx;
                                            return readout(probe.forward(x, ctx), w);
                                          },
                                          chosen->detach()));
    }
    results.push_back(r);
  }

  // --- Batch normalization (training statistics) -------------------------------
  {
    GradCheckResult r{"batchnorm", 0.0, 1e-4, trials};
    for (int t = 0; t < trials; ++t) {
      RngStream rng = RngStream(seed).split(7000 + static_cast<std::uint64_t>(t));
      BatchNormLayer layer(4);
      for (double& g : layer.gamma.values()) g = 1.0 + 0.3 * rng.normal();
      for (double& b : layer.beta.values()) b = 0.3 * rng.normal();
      const Tensor x = random_tensor({5, 4}, rng);
      const auto w = readout_weights(x.size(), rng);
      const auto check_param = [&](const Tensor& center, int which) {
        return finite_difference_check(
            [&](const Tensor& in) {
              BatchNormLayer probe = layer;
              (which == 0 ? probe.gamma : probe.beta) =
                  in;
              ForwardCtx train{Mode::kTrain, nullptr, nullptr};
              return readout(probe.forward(x, train), w);
            },
            center);
      };
      r.max_err = std::max({r.max_err,
                            finite_difference_check(
                                [&](const Tensor& in) {
                                  BatchNormLayer probe = layer;
                                  ForwardCtx train{Mode::kTrain, nullptr, nullptr};
                                  return readout(probe.forward(in, train), w);
                                },
                                x),
                            check_param(layer.gamma.detach(), 0),
                            check_param(layer.beta.detach(), 1)});
    }
    results.push_back(r);
  }

  // --- Full model ---------------------------------------------------------------
  {
    const int model_trials = std::max(1, trials / 20);
    GradCheckResult input_r{"model_input", 0.0, 1e-3, model_trials};
    GradCheckResult param_r{"model_params", 0.0, 1e-3, model_trials};
    for (int t = 0; t < model_trials; ++t) {
      ModelConfig cfg = gradcheck_detail::suite_model_config();
      cfg.seed = seed + static_cast<std::uint64_t>(t);
      Model model(cfg);
      RngStream rng = RngStream(seed).split(8000 + static_cast<std::uint64_t>(t));
      std::vector<MfccMatrix> batch;
      for (int i = 0; i < 2; ++i) {
        MfccMatrix m;
        m.frames = 8;
        m.coeffs = 13;
        m.values.resize(m.frames * m.coeffs);
        for (double& v : m.values) v = rng.normal();
        batch.push_back(std::move(m));
      }
      const Tensor x = pad_batch(batch, cfg);
      const auto w = readout_weights(2, rng);

      MaskTape tape;
      RngStream stoch = rng.split(1);
      ForwardCtx record{Mode::kTrain, &stoch, &tape};
      (void)model.forward(x, record);

      const auto f = [&](const Tensor& in) {
        tape.rewind();
        ForwardCtx replay{Mode::kTrain, nullptr, &tape};
        return readout(model.forward(in, replay), w);
      };
      input_r.max_err = std::max(input_r.max_err, finite_difference_check(f, x));

      // Analytic parameter gradients vs central differences on sampled
      // coordinates of every parameter tensor.
      tape.rewind();
      ForwardCtx replay{Mode::kTrain, nullptr, &tape};
      const Tensor y = readout(model.forward(Tensor(x.shape(), x.values(), true), replay), w);
      y.backward();
      const double eps = 1e-5;
      for (auto& [name, param] : model.parameters()) {
        const std::vector<double> analytic =
            param.has_grad() ? param.grad() : std::vector<double>(param.size(), 0.0);
        for (int pick = 0; pick < 2; ++pick) {
          const std::size_t j = static_cast<std::size_t>(rng.next_u64() % param.size());
          const double orig = param.values()[j];
          NoGradGuard no_grad;
          tape.rewind();
          ForwardCtx rp{Mode::kTrain, nullptr, &tape};
          param.values()[j] = orig + eps;
          const double fp = readout(model.forward(x, rp), w).value();
          tape.rewind();
          ForwardCtx rm{Mode::kTrain, nullptr, &tape};
          param.values()[j] = orig - eps;
          const double fm = readout(model.forward(x, rm), w).value();
          param.values()[j] = orig;
          const double numeric = (fp - fm) / (2.0 * eps);
          const double rel =
              std::abs(analytic[j] - numeric) / std::max(1.0, std::abs(analytic[j]));
          param_r.max_err = std::max(param_r.max_err, rel);
        }
        param.zero_grad();
      }
    }
    results.push_back(input_r);
    results.push_back(param_r);
  }

  return results;
}

inline bool gradcheck_all_passed(const std::vector<GradCheckResult>& results) {
  return std::all_of(results.begin(), results.end(),
                     [](const GradCheckResult& r) { return r.passed(); });
}

}  // namespace stx
