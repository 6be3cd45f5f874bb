#pragma once

// The assembled audio regressor: patch embedding of the MFCC matrix,
// Fourier position encoding, an LWTA layer, a stack of encoder blocks
// (batch norm -> spatial-reduction attention, wrapped in a stochastic-depth
// residual), another LWTA + batch norm, a GELU feed-forward, and a
// regression head (locally connected -> average pool -> dropout -> LWTA ->
// dense stack) that emits one unbounded score per input.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "stx/dsp.hpp"
#include "stx/layers.hpp"
#include "stx/serialize.hpp"

namespace stx {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct ModelConfig {
  std::size_t patch_h = 4;   // frames per patch
  std::size_t patch_w = 13;  // coefficients per patch (full band by default)
  int d_model = 64;
  int n_heads = 8;
  int n_blocks = 3;
  int lwta_u = 2;            // competing units per LWTA block
  double dropout_rate = 0.2;
  double survival_p = 0.2;   // stochastic depth survival probability
  int ri = 2;                // attention reduction ratio
  std::vector<int> ffn_hidden{128};
  std::size_t lcn_patch = 2;
  std::size_t lcn_stride = 2;
  std::size_t lcn_filters = 32;
  std::vector<int> reg_hidden{64, 32};
  std::size_t max_frames = 96;  // input length cap / pad target
  std::uint64_t seed = 42;
  FeatureConfig features;

  std::size_t n_coeff_cols() const { return static_cast<std::size_t>(features.n_coeffs) + 1; }
  std::size_t grid_cols() const { return (n_coeff_cols() + patch_w - 1) / patch_w * patch_w; }
  std::size_t patch_dim() const { return patch_h * patch_w; }
  std::size_t n_patches() const { return (max_frames / patch_h) * (grid_cols() / patch_w); }
  std::size_t lcn_out_len() const { return (n_patches() - lcn_patch) / lcn_stride + 1; }

  void validate() const {
    if (patch_h == 0 || patch_w == 0) throw ConfigError("config: patch dims must be positive");
    if (d_model < 2 || d_model % 2 != 0) throw ConfigError("config: d_model must be even and >= 2");
    if (n_heads < 1 || d_model % n_heads != 0) {
      throw ConfigError("config: d_model " + std::to_string(d_model) + " not divisible by " +
                        std::to_string(n_heads) + " heads");
    }
    if (n_blocks < 1) throw ConfigError("config: need at least one encoder block");
    if (lwta_u < 1 || d_model % lwta_u != 0 || lcn_filters % static_cast<std::size_t>(lwta_u) != 0) {
      throw ConfigError("config: lwta block size must divide d_model and lcn_filters");
    }
    if (dropout_rate < 0.0 || dropout_rate >= 1.0) throw ConfigError("config: dropout_rate must be in [0,1)");
    if (!(survival_p > 0.0) || survival_p > 1.0) throw ConfigError("config: survival_p must be in (0,1]");
    if (ri < 1) throw ConfigError("config: reduction ratio must be >= 1");
    if (max_frames == 0 || max_frames % patch_h != 0) {
      throw ConfigError("config: max_frames must be a positive multiple of patch_h");
    }
    if (n_patches() % static_cast<std::size_t>(ri) != 0) {
      throw ConfigError("config: patch count " + std::to_string(n_patches()) +
                        " not divisible by reduction ratio " + std::to_string(ri));
    }
    if (lcn_patch == 0 || lcn_stride == 0 || lcn_filters == 0 || n_patches() < lcn_patch) {
      throw ConfigError("config: regression unit geometry does not fit " +
                        std::to_string(n_patches()) + " patches");
    }
    for (const int h : ffn_hidden) {
      if (h < 1) throw ConfigError("config: ffn_hidden dims must be positive");
    }
    for (const int h : reg_hidden) {
      if (h < 1) throw ConfigError("config: reg_hidden dims must be positive");
    }
  }

  std::map<std::string, std::string> to_kv() const {
    char buf[64];
    const auto fmt = [&buf](double v) {
      std::snprintf(buf, sizeof(buf), "%.17g", v);
      return std::string(buf);
    };
    const auto join = [](const std::vector<int>& xs) {
      std::string s;
      for (std::size_t i = 0; i < xs.size(); ++i) s += (i ? "," : "") + std::to_string(xs[i]);
      return s;
    };
    std::map<std::string, std::string> kv;
    kv["patch_h"] = std::to_string(patch_h);
    kv["patch_w"] = std::to_string(patch_w);
    kv["d_model"] = std::to_string(d_model);
    kv["n_heads"] = std::to_string(n_heads);
    kv["n_blocks"] = std::to_string(n_blocks);
    kv["lwta_u"] = std::to_string(lwta_u);
    kv["dropout_rate"] = fmt(dropout_rate);
    kv["survival_p"] = fmt(survival_p);
    kv["ri"] = std::to_string(ri);
    kv["ffn_hidden"] = join(ffn_hidden);
    kv["lcn_patch"] = std::to_string(lcn_patch);
    kv["lcn_stride"] = std::to_string(lcn_stride);
    kv["lcn_filters"] = std::to_string(lcn_filters);
    kv["reg_hidden"] = join(reg_hidden);
    kv["max_frames"] = std::to_string(max_frames);
    kv["seed"] = std::to_string(seed);
    kv["feat_frame_ms"] = fmt(features.frame_ms);
    kv["feat_hop_ms"] = fmt(features.hop_ms);
    kv["feat_preemphasis"] = fmt(features.preemphasis);
    kv["feat_n_fft"] = std::to_string(features.n_fft);
    kv["feat_n_filters"] = std::to_string(features.n_filters);
    kv["feat_n_coeffs"] = std::to_string(features.n_coeffs);
    kv["feat_mel_low_hz"] = fmt(features.mel_low_hz);
    kv["feat_mel_high_hz"] = fmt(features.mel_high_hz);
    return kv;
  }

  static std::vector<int> parse_int_list(const std::string& s) {
    std::vector<int> out;
    std::istringstream is(s);
    std::string item;
    while (std::getline(is, item, ',')) {
      if (!item.empty()) out.push_back(std::stoi(item));
    }
    return out;
  }

  void apply_kv(const std::string& key, const std::string& value) {
    try {
      if (key == "patch_h") patch_h = std::stoul(value);
      else if (key == "patch_w") patch_w = std::stoul(value);
      else if (key == "d_model") d_model = std::stoi(value);
      else if (key == "n_heads") n_heads = std::stoi(value);
      else if (key == "n_blocks") n_blocks = std::stoi(value);
      else if (key == "lwta_u") lwta_u = std::stoi(value);
      else if (key == "dropout_rate") dropout_rate = std::stod(value);
      else if (key == "survival_p") survival_p = std::stod(value);
      else if (key == "ri") ri = std::stoi(value);
      else if (key == "ffn_hidden") ffn_hidden = parse_int_list(value);
      else if (key == "lcn_patch") lcn_patch = std::stoul(value);
      else if (key == "lcn_stride") lcn_stride = std::stoul(value);
      else if (key == "lcn_filters") lcn_filters = std::stoul(value);
      else if (key == "reg_hidden") reg_hidden = parse_int_list(value);
      else if (key == "max_frames") max_frames = std::stoul(value);
      else if (key == "seed") seed = std::stoull(value);
      else if (key == "feat_frame_ms") features.frame_ms = std::stod(value);
      else if (key == "feat_hop_ms") features.hop_ms = std::stod(value);
      else if (key == "feat_preemphasis") features.preemphasis = std::stod(value);
      else if (key == "feat_n_fft") features.n_fft = std::stoul(value);
      else if (key == "feat_n_filters") features.n_filters = std::stoi(value);
      else if (key == "feat_n_coeffs") features.n_coeffs = std::stoi(value);
      else if (key == "feat_mel_low_hz") features.mel_low_hz = std::stod(value);
      else if (key == "feat_mel_high_hz") features.mel_high_hz = std::stod(value);
      else throw DataError("config: unknown key '" + key + "'");
    } catch (const DataError&) {
      throw;
    } catch (const std::exception&) {
      throw DataError("config: bad value '" + value + "' for key '" + key + "'");
    }
  }

  static ModelConfig from_kv(const std::map<std::string, std::string>& kv) {
    ModelConfig cfg;
    for (const auto& [k, v] : kv) cfg.apply_kv(k, v);
    return cfg;
  }

  // Key-sorted one-per-line text; used in checkpoints and reports.
  std::string canonical_text() const {
    std::string out;
    for (const auto& [k, v] : to_kv()) out += k + "=" + v + "\n";
    return out;
  }
};

// ---------------------------------------------------------------------------
// Patch creation and position encoding
// ---------------------------------------------------------------------------

struct PatchSequence {
  Tensor patches;  // [1, n_patches, patch_h*patch_w]
  std::size_t grid_rows = 0;
  std::size_t grid_cols = 0;
};

namespace detail {

// Copies up to target_rows frames into a zero-padded [1, target_rows, cols] grid.
inline Tensor mfcc_grid(const MfccMatrix& m, std::size_t target_rows, std::size_t cols) {
  std::vector<double> grid(target_rows * cols, 0.0);
  const std::size_t rows = std::min(m.frames, target_rows);
  const std::size_t copy_cols = std::min(m.coeffs, cols);
  for (std::size_t f = 0; f < rows; ++f)
    for (std::size_t c = 0; c < copy_cols; ++c) grid[f * cols + c] = m.at(f, c);
  return Tensor(Shape{1, target_rows, cols}, std::move(grid));
}

}  // namespace detail

// Zero-pads the matrix up to multiples of the patch dims (and truncates past
// max_frames), then flattens non-overlapping patches row-major.
inline PatchSequence patchify(const MfccMatrix& m, const ModelConfig& cfg) {
  if (m.frames == 0 || m.coeffs == 0) throw DataError("patchify: empty feature matrix");
  const std::size_t used = std::min(m.frames, cfg.max_frames);
  const std::size_t padded_rows = (used + cfg.patch_h - 1) / cfg.patch_h * cfg.patch_h;
  const std::size_t padded_cols = (m.coeffs + cfg.patch_w - 1) / cfg.patch_w * cfg.patch_w;
  PatchSequence seq;
  seq.grid_rows = padded_rows / cfg.patch_h;
  seq.grid_cols = padded_cols / cfg.patch_w;
  seq.patches = patch_extract(detail::mfcc_grid(m, padded_rows, padded_cols), cfg.patch_h, cfg.patch_w);
  return seq;
}

// Stacks a batch of feature matrices onto the model's fixed input grid
// [B, max_frames, grid_cols]; shorter inputs are zero-padded, longer ones
// truncated.
inline Tensor pad_batch(const std::vector<MfccMatrix>& batch, const ModelConfig& cfg) {
  if (batch.empty()) throw ContractError("pad_batch: empty batch");
  const std::size_t cols = cfg.grid_cols();
  std::vector<double> grid(batch.size() * cfg.max_frames * cols, 0.0);
  for (std::size_t b = 0; b < batch.size(); ++b) {
    if (batch[b].frames == 0 || batch[b].coeffs == 0) throw DataError("pad_batch: empty feature matrix");
    const Tensor one = detail::mfcc_grid(batch[b], cfg.max_frames, cols);
    std::copy(one.values().begin(), one.values().end(),
              grid.begin() + static_cast<std::ptrdiff_t>(b * cfg.max_frames * cols));
  }
  return Tensor(Shape{batch.size(), cfg.max_frames, cols}, std::move(grid));
}

// Interleaved sine/cosine table: PE[pos, 2i] = sin(pos / 10000^(2i/d)),
// PE[pos, 2i+1] = cos(pos / 10000^(2i/d)).
inline Tensor fourier_position_encoding(std::size_t seq_len, std::size_t d_model) {
  if (d_model % 2 != 0) {
    throw ConfigError("fourier_position_encoding: d_model must be even, got " + std::to_string(d_model));
  }
  std::vector<double> pe(seq_len * d_model);
  for (std::size_t pos = 0; pos < seq_len; ++pos) {
    for (std::size_t i = 0; i < d_model / 2; ++i) {
      const double rate = std::pow(10000.0, 2.0 * static_cast<double>(i) / static_cast<double>(d_model));
      const double angle = static_cast<double>(pos) / rate;
      pe[pos * d_model + 2 * i] = std::sin(angle);
      pe[pos * d_model + 2 * i + 1] = std::cos(angle);
    }
  }
  return Tensor(Shape{seq_len, d_model}, std::move(pe));
}

// ---------------------------------------------------------------------------
// Encoder block
// ---------------------------------------------------------------------------

// Residual branch = SrAttention(BatchNorm(x)), gated by stochastic depth.
// Batch norm runs per-feature over (batch * seq) rows.
struct EncoderBlock {
  BatchNormLayer bn;
  SrAttentionLayer attn;
  StochasticDepthNode sd;

  Tensor forward(const Tensor& x, ForwardCtx& ctx) {
    const std::size_t b = x.dim(0), s = x.dim(1), d = x.dim(2);
    return sd.forward(
        x,
        [&](const Tensor& in) {
          const Tensor normed = reshape(bn.forward(reshape(in, {b * s, d}), ctx), {b, s, d});
          return attn.forward(normed, ctx);
        },
        ctx);
  }
};

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

class Model {
 public:
  explicit Model(const ModelConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    RngStream init = RngStream(cfg_.seed).split(0x1);

    const std::size_t d = static_cast<std::size_t>(cfg_.d_model);
    embed_ = DenseLayer(cfg_.patch_dim(), d, init);
    pe_ = fourier_position_encoding(cfg_.n_patches(), d);
    lwta_in_ = LwtaLayer(d, d, cfg_.lwta_u, init);
    blocks_.reserve(static_cast<std::size_t>(cfg_.n_blocks));
    for (int i = 0; i < cfg_.n_blocks; ++i) {
      EncoderBlock blk;
      blk.bn = BatchNormLayer(d);
      blk.attn = SrAttentionLayer(cfg_.d_model, cfg_.n_heads, cfg_.ri, init);
      blk.sd = StochasticDepthNode(cfg_.survival_p);
      blocks_.push_back(std::move(blk));
    }
    lwta_mid_ = LwtaLayer(d, d, cfg_.lwta_u, init);
    bn_final_ = BatchNormLayer(d);

    std::vector<std::size_t> ffn_dims{d};
    for (const int h : cfg_.ffn_hidden) ffn_dims.push_back(static_cast<std::size_t>(h));
    ffn_dims.push_back(d);
    for (std::size_t i = 0; i + 1 < ffn_dims.size(); ++i) {
      ffn_.emplace_back(ffn_dims[i], ffn_dims[i + 1], init);
    }

    reg_lcn_ = LocallyConnectedLayer(cfg_.n_patches(), d, cfg_.lcn_patch, cfg_.lcn_stride,
                                     cfg_.lcn_filters, init);
    reg_lwta_ = LwtaLayer(cfg_.lcn_filters, cfg_.lcn_filters, cfg_.lwta_u, init);

    std::vector<std::size_t> reg_dims{cfg_.lcn_filters};
    for (const int h : cfg_.reg_hidden) reg_dims.push_back(static_cast<std::size_t>(h));
    reg_dims.push_back(1);
    for (std::size_t i = 0; i + 1 < reg_dims.size(); ++i) {
      reg_dense_.emplace_back(reg_dims[i], reg_dims[i + 1], init);
    }

    register_params();
  }

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;

  const ModelConfig& config() const { return cfg_; }

  // x: [B, max_frames, grid_cols] -> [B] scores (in training-target units;
  // see target_scale/target_offset).
  Tensor forward(const Tensor& x, ForwardCtx& ctx) {
    const std::size_t cols = cfg_.grid_cols();
    if (x.rank() != 3 || x.dim(1) != cfg_.max_frames || x.dim(2) != cols) {
      throw ContractError("model: input " + shape_str(x.shape()) + " does not match grid [*," +
                          std::to_string(cfg_.max_frames) + "," + std::to_string(cols) + "]");
    }
    const std::size_t batch = x.dim(0);
    const std::size_t p = cfg_.n_patches();
    const std::size_t d = static_cast<std::size_t>(cfg_.d_model);

    Tensor h = embed_.forward(patch_extract(x, cfg_.patch_h, cfg_.patch_w));
    h = add_broadcast0(h, pe_);
    h = lwta_in_.forward(h, ctx);
    for (auto& blk : blocks_) h = blk.forward(h, ctx);
    h = lwta_mid_.forward(h, ctx);
    h = reshape(bn_final_.forward(reshape(h, {batch * p, d}), ctx), {batch, p, d});
    for (std::size_t i = 0; i < ffn_.size(); ++i) {
      h = ffn_[i].forward(h);
      if (i + 1 < ffn_.size()) h = dropout_forward(gelu(h), cfg_.dropout_rate, ctx);
    }

    Tensor r = mean_axis1(reg_lcn_.forward(h));
    r = dropout_forward(r, cfg_.dropout_rate, ctx);
    r = reg_lwta_.forward(r, ctx);
    for (std::size_t i = 0; i < reg_dense_.size(); ++i) {
      r = reg_dense_[i].forward(r);
      if (i + 1 < reg_dense_.size()) r = gelu(r);
    }
    return reshape(r, {batch});
  }

  // Inference-mode score for a single feature matrix, in raw target units.
  double predict(const MfccMatrix& m) {
    NoGradGuard no_grad;
    ForwardCtx ctx;
    const Tensor y = forward(pad_batch({m}, cfg_), ctx);
    return y.values()[0] * target_scale + target_offset;
  }

  std::vector<std::pair<std::string, Tensor>>& parameters() { return params_; }

  std::size_t count_parameters() const {
    std::size_t n = 0;
    for (const auto& [name, t] : params_) n += t.size();
    return n;
  }

  // Detached copies of all learnable parameters and persistent buffers.
  NamedTensors named_state() const {
    NamedTensors out;
    out.reserve(params_.size() + 8);
    for (const auto& [name, t] : params_) out.emplace_back(name, t.detach());
    const auto put_vec = [&out](const std::string& name, const std::vector<double>& v) {
      out.emplace_back(name, Tensor(Shape{v.size()}, v));
    };
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      put_vec("block" + std::to_string(i) + ".bn.running_mean", blocks_[i].bn.running_mean);
      put_vec("block" + std::to_string(i) + ".bn.running_var", blocks_[i].bn.running_var);
    }
    put_vec("final_bn.running_mean", bn_final_.running_mean);
    put_vec("final_bn.running_var", bn_final_.running_var);
    out.emplace_back("target.scale", Tensor::scalar(target_scale));
    out.emplace_back("target.offset", Tensor::scalar(target_offset));
    return out;
  }

  void load_state(const NamedTensors& entries) {
    std::map<std::string, const Tensor*> by_name;
    for (const auto& [name, t] : entries) by_name[name] = &t;
    const auto fetch = [&by_name](const std::string& name, const Shape& want) -> const Tensor& {
      const auto it = by_name.find(name);
      if (it == by_name.end()) throw DataError("checkpoint: missing tensor '" + name + "'");
      if (it->second->shape() != want) {
        throw DataError("checkpoint: tensor '" + name + "' has shape " +
                        shape_str(it->second->shape()) + ", expected " + shape_str(want));
      }
      return *it->second;
    };
    for (auto& [name, t] : params_) t.values() = fetch(name, t.shape()).values();
    const auto fetch_vec = [&fetch](const std::string& name, std::vector<double>& dst) {
      dst = fetch(name, Shape{dst.size()}).values();
    };
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      fetch_vec("block" + std::to_string(i) + ".bn.running_mean", blocks_[i].bn.running_mean);
      fetch_vec("block" + std::to_string(i) + ".bn.running_var", blocks_[i].bn.running_var);
    }
    fetch_vec("final_bn.running_mean", bn_final_.running_mean);
    fetch_vec("final_bn.running_var", bn_final_.running_var);
    target_scale = fetch("target.scale", Shape{1}).values()[0];
    target_offset = fetch("target.offset", Shape{1}).values()[0];
  }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("model: cannot open " + path + " for writing");
    out << "stxmodel,v1\n" << cfg_.canonical_text() << "---\n";
    save_named_tensors(out, named_state());
    if (!out) throw IoError("model: write failed for " + path);
  }

  static Model load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("model: cannot open " + path);
    std::string line;
    if (!std::getline(in, line) || line != "stxmodel,v1") {
      throw DataError("model: " + path + " is not a model checkpoint");
    }
    std::map<std::string, std::string> kv;
    while (std::getline(in, line)) {
      if (line == "---") break;
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw DataError("model: malformed config line '" + line + "'");
      kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    Model model(ModelConfig::from_kv(kv));
    model.load_state(load_named_tensors(in));
    return model;
  }

  // Sub-modules are exposed for tests and the gradient-check suite.
  DenseLayer embed_;
  Tensor pe_;  // constant, not a parameter
  LwtaLayer lwta_in_;
  std::vector<EncoderBlock> blocks_;
  LwtaLayer lwta_mid_;
  BatchNormLayer bn_final_;
  std::vector<DenseLayer> ffn_;
  LocallyConnectedLayer reg_lcn_;
  LwtaLayer reg_lwta_;
  std::vector<DenseLayer> reg_dense_;

  // Affine map from network output to raw score units (identity unless
  // min-max target scaling was enabled during training).
  double target_scale = 1.0;
  double target_offset = 0.0;

 private:
  void register_params() {
    params_.clear();
    const auto add = [this](const std::string& name, const Tensor& t) { params_.emplace_back(name, t); };
    add("embed.w", embed_.w);
    add("embed.b", embed_.b);
    add("lwta_in.w", lwta_in_.weight);
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      const std::string p = "block" + std::to_string(i) + ".";
      add(p + "bn.gamma", blocks_[i].bn.gamma);
      add(p + "bn.beta", blocks_[i].bn.beta);
      add(p + "attn.wq.w", blocks_[i].attn.wq.w);
      add(p + "attn.wq.b", blocks_[i].attn.wq.b);
      add(p + "attn.wk.w", blocks_[i].attn.wk.w);
      add(p + "attn.wk.b", blocks_[i].attn.wk.b);
      add(p + "attn.wv.w", blocks_[i].attn.wv.w);
      add(p + "attn.wv.b", blocks_[i].attn.wv.b);
      add(p + "attn.wo.w", blocks_[i].attn.wo.w);
      add(p + "attn.wo.b", blocks_[i].attn.wo.b);
      add(p + "attn.sr.w", blocks_[i].attn.sr_w);
      add(p + "attn.sr_norm.gamma", blocks_[i].attn.sr_norm.gamma);
      add(p + "attn.sr_norm.beta", blocks_[i].attn.sr_norm.beta);
    }
    add("lwta_mid.w", lwta_mid_.weight);
    add("final_bn.gamma", bn_final_.gamma);
    add("final_bn.beta", bn_final_.beta);
    for (std::size_t i = 0; i < ffn_.size(); ++i) {
      add("ffn" + std::to_string(i) + ".w", ffn_[i].w);
      add("ffn" + std::to_string(i) + ".b", ffn_[i].b);
    }
    add("reg.lcn.w", reg_lcn_.w);
    add("reg.lcn.b", reg_lcn_.b);
    add("reg.lwta.w", reg_lwta_.weight);
    for (std::size_t i = 0; i < reg_dense_.size(); ++i) {
      add("reg.dense" + std::to_string(i) + ".w", reg_dense_[i].w);
      add("reg.dense" + std::to_string(i) + ".b", reg_dense_[i].b);
    }
  }

  ModelConfig cfg_;
  std::vector<std::pair<std::string, Tensor>> params_;
};

}  // namespace stx
