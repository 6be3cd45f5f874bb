#pragma once

// The stochastic layer zoo: local winner-take-all, locally connected
// filters, inverted dropout, stochastic depth gating, batch/layer
// normalization, and spatial-reduction multi-head attention.
//
// Every forward takes a ForwardCtx carrying the mode, the RNG stream for
// stochastic draws, and an optional MaskTape. The tape records dropout
// masks, winner masks, and depth gates on a first pass and replays them on
// later passes, which is how finite-difference checks see frozen masks.

#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "stx/nn_ops.hpp"
#include "stx/rng.hpp"
#include "stx/tensor.hpp"

namespace stx {

enum class Mode { kTrain, kInfer };

struct MaskTape {
  bool replay = false;
  std::vector<std::vector<double>> masks;
  std::vector<int> gates;
  std::size_t mask_cursor = 0;
  std::size_t gate_cursor = 0;

  // Switch from recording to replaying and restart from the top.
  void rewind() {
    replay = true;
    mask_cursor = 0;
    gate_cursor = 0;
  }
};

struct ForwardCtx {
  Mode mode = Mode::kInfer;
  RngStream* rng = nullptr;
  MaskTape* tape = nullptr;
};

namespace detail {

inline std::vector<double> tape_mask(MaskTape* tape, const std::function<std::vector<double>()>& make) {
  if (tape && tape->replay) {
    if (tape->mask_cursor >= tape->masks.size()) throw ContractError("mask tape exhausted");
    return tape->masks[tape->mask_cursor++];
  }
  std::vector<double> mask = make();
  if (tape) {
    tape->masks.push_back(mask);
    ++tape->mask_cursor;
  }
  return mask;
}

inline int tape_gate(MaskTape* tape, const std::function<int()>& draw) {
  if (tape && tape->replay) {
    if (tape->gate_cursor >= tape->gates.size()) throw ContractError("gate tape exhausted");
    return tape->gates[tape->gate_cursor++];
  }
  const int gate = draw();
  if (tape) {
    tape->gates.push_back(gate);
    ++tape->gate_cursor;
  }
  return gate;
}

inline RngStream& require_rng(const ForwardCtx& ctx, const char* who) {
  if (ctx.rng == nullptr) throw ContractError(std::string(who) + ": training mode needs an RngStream");
  return *ctx.rng;
}

// Flattens all leading dims so layers can treat input as [rows, features].
inline Tensor as_2d(const Tensor& x) {
  if (x.rank() == 2) return x;
  if (x.rank() < 2) throw ShapeError("expected rank >= 2, got " + shape_str(x.shape()));
  return reshape(x, {x.size() / x.shape().back(), x.shape().back()});
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Parameter initialization
// ---------------------------------------------------------------------------

inline Tensor glorot_normal(std::size_t fan_in, std::size_t fan_out, Shape shape, RngStream& rng) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in + fan_out));
  std::vector<double> v(shape_size(shape));
  for (double& x : v) x = rng.normal() * stddev;
  return Tensor(std::move(shape), std::move(v), true);
}

// ---------------------------------------------------------------------------
// Dense projection
// ---------------------------------------------------------------------------

struct DenseLayer {
  Tensor w;  // [in, out]
  Tensor b;  // [out]

  DenseLayer() = default;
  DenseLayer(std::size_t in, std::size_t out, RngStream& rng)
      : w(glorot_normal(in, out, {in, out}, rng)), b(Shape{out}, 0.0, true) {}

  Tensor forward(const Tensor& x) const {
    Shape out_shape = x.shape();
    out_shape.back() = w.dim(1);
    return reshape(add_bias(matmul(detail::as_2d(x), w), b), std::move(out_shape));
  }
};

// ---------------------------------------------------------------------------
// Local winner-take-all
// ---------------------------------------------------------------------------

// y = x.W followed by hard competition inside contiguous blocks of
// block_size units: the (lowest-index) maximal unit passes through when
// positive, everything else emits zero. Gradients flow only through winners.
struct LwtaLayer {
  Tensor weight;  // [J, K], no bias
  int block_size = 2;

  LwtaLayer() = default;
  LwtaLayer(std::size_t in, std::size_t out, int u, RngStream& rng)
      : weight(glorot_normal(in, out, {in, out}, rng)), block_size(u) {
    if (u < 1 || out % static_cast<std::size_t>(u) != 0) {
      throw ConfigError("lwta: width " + std::to_string(out) + " is not divisible by block size " +
                        std::to_string(u));
    }
  }

  // 0/1 winner gate per pre-activation entry; all-zero blocks when no entry
  // is positive; the lowest index wins ties.
  static std::vector<double> winner_mask(const std::vector<double>& pre, std::size_t width, int u) {
    std::vector<double> mask(pre.size(), 0.0);
    const std::size_t rows = pre.size() / width;
    const auto bu = static_cast<std::size_t>(u);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t blk = 0; blk < width; blk += bu) {
        std::size_t best = blk;
        for (std::size_t j = blk + 1; j < blk + bu; ++j) {
          if (pre[r * width + j] > pre[r * width + best]) best = j;
        }
        if (pre[r * width + best] > 0.0) mask[r * width + best] = 1.0;
      }
    }
    return mask;
  }

  Tensor forward(const Tensor& x, ForwardCtx& ctx) const {
    const std::size_t width = weight.dim(1);
    const Tensor pre = matmul(detail::as_2d(x), weight);
    const std::vector<double> mask = detail::tape_mask(
        ctx.tape, [&] { return winner_mask(pre.values(), width, block_size); });
    Shape out_shape = x.shape();
    out_shape.back() = width;
    return reshape(mul_mask(pre, mask), std::move(out_shape));
  }
};

// ---------------------------------------------------------------------------
// Locally connected layer
// ---------------------------------------------------------------------------

// Convolution-like but with an individual filter per output position;
// positions share nothing.
struct LocallyConnectedLayer {
  std::size_t patch = 1, stride = 1, in_len = 0, in_ch = 0, filters = 0, out_len = 0;
  Tensor w;  // [out_len, patch*in_ch, filters]
  Tensor b;  // [out_len, filters]

  LocallyConnectedLayer() = default;
  LocallyConnectedLayer(std::size_t in_len_, std::size_t in_ch_, std::size_t patch_,
                        std::size_t stride_, std::size_t filters_, RngStream& rng)
      : patch(patch_), stride(stride_), in_len(in_len_), in_ch(in_ch_), filters(filters_) {
    if (patch == 0 || stride == 0 || filters == 0) {
      throw ConfigError("locally_connected: patch, stride, and filters must be positive");
    }
    if (in_len < patch) {
      throw ConfigError("locally_connected: input length " + std::to_string(in_len) +
                        " shorter than patch " + std::to_string(patch));
    }
    out_len = (in_len - patch) / stride + 1;
    w = glorot_normal(patch * in_ch, filters, {out_len, patch * in_ch, filters}, rng);
    b = Tensor(Shape{out_len, filters}, 0.0, true);
  }

  Tensor forward(const Tensor& x) const {
    if (x.rank() != 3 || x.dim(1) != in_len || x.dim(2) != in_ch) {
      throw ConfigError("locally_connected: input " + shape_str(x.shape()) +
                        " does not match layer geometry [*," + std::to_string(in_len) + "," +
                        std::to_string(in_ch) + "]");
    }
    return locally_connected(x, w, b, patch, stride);
  }
};

// ---------------------------------------------------------------------------
// Dropout
// ---------------------------------------------------------------------------

// Inverted dropout: each unit is zeroed with probability rate during
// training and survivors are scaled by 1/(1-rate); inference is identity.
inline Tensor dropout_forward(const Tensor& x, double rate, ForwardCtx& ctx) {
  if (rate < 0.0 || rate >= 1.0) {
    throw ConfigError("dropout: rate must be in [0,1), got " + std::to_string(rate));
  }
  if (ctx.mode == Mode::kInfer || rate == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - rate);
  const std::vector<double> mask = detail::tape_mask(ctx.tape, [&] {
    RngStream& rng = detail::require_rng(ctx, "dropout");
    std::vector<double> m(x.size());
    for (double& v : m) v = rng.uniform() < rate ? 0.0 : keep_scale;
    return m;
  });
  return mul_mask(x, mask);
}

// ---------------------------------------------------------------------------
// Stochastic depth
// ---------------------------------------------------------------------------

// Residual wrapper: training keeps the branch with probability survival_p
// (one Bernoulli draw per node per batch) and skips it entirely otherwise;
// inference always adds the branch scaled by survival_p.
struct StochasticDepthNode {
  double survival_p = 1.0;
  int last_gate = -1;  // 1 branch executed, 0 skipped; -1 before any training pass

  StochasticDepthNode() = default;
  explicit StochasticDepthNode(double p) : survival_p(p) {
    if (!(p > 0.0) || p > 1.0) {
      throw ConfigError("stochastic depth: survival probability must be in (0,1], got " +
                        std::to_string(p));
    }
  }

  Tensor forward(const Tensor& x, const std::function<Tensor(const Tensor&)>& branch,
                 ForwardCtx& ctx) {
    if (ctx.mode == Mode::kInfer) {
      const Tensor bx = branch(x);
      check_branch_shape(x, bx);
      return add(x, scale(bx, survival_p));
    }
    const int gate = detail::tape_gate(ctx.tape, [&] {
      return detail::require_rng(ctx, "stochastic depth").bernoulli(survival_p) ? 1 : 0;
    });
    last_gate = gate;
    if (gate == 0) return x;
    const Tensor bx = branch(x);
    check_branch_shape(x, bx);
    return add(x, bx);
  }

 private:
  static void check_branch_shape(const Tensor& x, const Tensor& bx) {
    if (bx.shape() != x.shape()) {
      throw ContractError("stochastic depth: branch output " + shape_str(bx.shape()) +
                          " does not match input " + shape_str(x.shape()));
    }
  }
};

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

struct BatchNormLayer {
  Tensor gamma;  // [F]
  Tensor beta;   // [F]
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double momentum = 0.1;
  double eps = 1e-5;
  long batches_seen = 0;

  BatchNormLayer() = default;
  explicit BatchNormLayer(std::size_t features)
      : gamma(Shape{features}, 1.0, true),
        beta(Shape{features}, 0.0, true),
        running_mean(features, 0.0),
        running_var(features, 1.0) {}

  // x: [N, F]. Training normalizes by batch statistics and folds them into
  // the running averages; inference normalizes by the running averages.
  Tensor forward(const Tensor& x, ForwardCtx& ctx) {
    if (ctx.mode == Mode::kTrain) {
      BatchStats stats;
      Tensor y = batch_norm_train(x, gamma, beta, eps, &stats);
      for (std::size_t j = 0; j < running_mean.size(); ++j) {
        running_mean[j] = (1.0 - momentum) * running_mean[j] + momentum * stats.mean[j];
        running_var[j] = (1.0 - momentum) * running_var[j] + momentum * stats.var[j];
      }
      ++batches_seen;
      return y;
    }
    return batch_norm_infer(x, gamma, beta, running_mean, running_var, eps);
  }
};

// ---------------------------------------------------------------------------
// Layer normalization
// ---------------------------------------------------------------------------

struct LayerNormLayer {
  Tensor gamma;
  Tensor beta;
  double eps = 1e-5;

  LayerNormLayer() = default;
  explicit LayerNormLayer(std::size_t features)
      : gamma(Shape{features}, 1.0, true), beta(Shape{features}, 0.0, true) {}

  Tensor forward(const Tensor& x) const { return layer_norm_lastdim(x, gamma, beta, eps); }
};

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

// Unscaled softmax(Q.K^T).V, kept as a test reference for the scaled,
// spatially reduced variant below. Q: [s,d], K: [t,d], V: [t,dv].
inline Tensor baseline_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2 || q.dim(1) != k.dim(1) ||
      k.dim(0) != v.dim(0)) {
    throw ShapeError("baseline_attention: incompatible shapes " + shape_str(q.shape()) + ", " +
                     shape_str(k.shape()) + ", " + shape_str(v.shape()));
  }
  return matmul(softmax_lastdim(matmul(q, transpose_last2(k))), v);
}

// Multi-head attention with spatial reduction on the keys/values path:
//   SR(x) = LayerNorm(Reshape(x, Ri) . W)
// groups Ri consecutive tokens, projects the concatenation back to d_model,
// and normalizes; queries keep full resolution, so attention weights are
// [B, H, S, S/Ri] and logits are scaled by 1/sqrt(d_head). With Ri = 1 the
// reduction is the identity and keys/values come straight from x.
struct SrAttentionLayer {
  int n_heads = 1;
  int d_model = 0;
  int d_head = 0;
  int reduction_ratio = 1;
  DenseLayer wq, wk, wv, wo;
  Tensor sr_w;  // [Ri*d_model, d_model]
  LayerNormLayer sr_norm;

  // Weights of the most recent forward, stored as [B, H, S, S/Ri].
  std::vector<double> last_attention;
  Shape last_attention_shape;

  SrAttentionLayer() = default;
  SrAttentionLayer(int d_model_, int n_heads_, int ri, RngStream& rng)
      : n_heads(n_heads_), d_model(d_model_), reduction_ratio(ri) {
    if (n_heads < 1 || d_model < 1 || d_model % n_heads != 0) {
      throw ConfigError("sr_attention: d_model " + std::to_string(d_model) +
                        " is not divisible by " + std::to_string(n_heads) + " heads");
    }
    if (ri < 1) throw ConfigError("sr_attention: reduction ratio must be >= 1");
    d_head = d_model / n_heads;
    const auto d = static_cast<std::size_t>(d_model);
    wq = DenseLayer(d, d, rng);
    wk = DenseLayer(d, d, rng);
    wv = DenseLayer(d, d, rng);
    wo = DenseLayer(d, d, rng);
    sr_w = glorot_normal(static_cast<std::size_t>(ri) * d, d,
                         {static_cast<std::size_t>(ri) * d, d}, rng);
    sr_norm = LayerNormLayer(d);
  }

  Tensor forward(const Tensor& x, ForwardCtx&) {
    if (x.rank() != 3 || x.dim(2) != static_cast<std::size_t>(d_model)) {
      throw ShapeError("sr_attention: expected [B,S," + std::to_string(d_model) + "], got " +
                       shape_str(x.shape()));
    }
    const std::size_t batch = x.dim(0), seq = x.dim(1);
    const auto ri = static_cast<std::size_t>(reduction_ratio);
    if (seq % ri != 0) {
      throw DataError("sr_attention: sequence length " + std::to_string(seq) +
                      " not divisible by reduction ratio " + std::to_string(reduction_ratio));
    }
    const std::size_t reduced = seq / ri;
    const auto d = static_cast<std::size_t>(d_model);
    const auto heads = static_cast<std::size_t>(n_heads);
    const auto dh = static_cast<std::size_t>(d_head);

    Tensor kv_src = x;
    if (ri > 1) {
      const Tensor grouped = reshape(x, {batch * reduced, ri * d});
      kv_src = sr_norm.forward(reshape(matmul(grouped, sr_w), {batch, reduced, d}));
    }

    // [B, len, D] -> [B*H, len, d_head]
    const auto split_heads = [&](const Tensor& t, std::size_t len) {
      return reshape(swap_axes12(reshape(t, {batch, len, heads, dh})), {batch * heads, len, dh});
    };
    const Tensor qh = split_heads(wq.forward(x), seq);
    const Tensor kh = split_heads(wk.forward(kv_src), reduced);
    const Tensor vh = split_heads(wv.forward(kv_src), reduced);

    const Tensor logits = scale(bmm(qh, transpose_last2(kh)), 1.0 / std::sqrt(static_cast<double>(d_head)));
    const Tensor attn = softmax_lastdim(logits);
    last_attention = attn.values();
    last_attention_shape = {batch, heads, seq, reduced};

    const Tensor merged =
        reshape(swap_axes12(reshape(bmm(attn, vh), {batch, heads, seq, dh})), {batch, seq, d});
    return wo.forward(merged);
  }
};

}  // namespace stx
