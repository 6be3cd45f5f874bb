#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>

#include "stx/gradcheck.hpp"
#include "stx/model.hpp"

using namespace stx;

namespace {

// Small geometry for fast full-model tests.
ModelConfig tiny_config() {
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
  cfg.seed = 5;
  return cfg;
}

MfccMatrix random_mfcc(std::size_t frames, std::size_t coeffs, RngStream& rng) {
  MfccMatrix m;
  m.frames = frames;
  m.coeffs = coeffs;
  m.values.resize(frames * coeffs);
  for (double& v : m.values) v = rng.normal();
  return m;
}

Tensor weighted_sum(const Tensor& y, RngStream& rng) {
  std::vector<double> w(y.size());
  for (double& v : w) v = rng.normal();
  return sum(mul(y, Tensor(y.shape(), w)));
}

}  // namespace

TEST_CASE("patchify shapes, padding, and reconstruction", "[model]") {
  ModelConfig cfg;
  cfg.patch_h = 2;
  cfg.patch_w = 2;
  cfg.max_frames = 96;

  SECTION("4x4 matrix with 2x2 patches gives 4 patches of length 4") {
    MfccMatrix m;
    m.frames = 4;
    m.coeffs = 4;
    m.values = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15};
    const PatchSequence seq = patchify(m, cfg);
    CHECK(seq.patches.shape() == Shape{1, 4, 4});
    // top-left patch is rows 0-1 x cols 0-1, flattened row-major
    CHECK(seq.patches.values()[0] == 0);
    CHECK(seq.patches.values()[1] == 1);
    CHECK(seq.patches.values()[2] == 4);
    CHECK(seq.patches.values()[3] == 5);
  }
  SECTION("zero matrix gives zero patches") {
    MfccMatrix m;
    m.frames = 4;
    m.coeffs = 4;
    m.values.assign(16, 0.0);
    const PatchSequence seq = patchify(m, cfg);
    for (const double v : seq.patches.values()) REQUIRE(v == 0.0);
  }
  SECTION("5x4 matrix pads to 6x4 and reconstructs with zero pad rows") {
    MfccMatrix m;
    m.frames = 5;
    m.coeffs = 4;
    m.values.resize(20);
    for (std::size_t i = 0; i < 20; ++i) m.values[i] = static_cast<double>(i + 1);
    const PatchSequence seq = patchify(m, cfg);
    REQUIRE(seq.patches.shape() == Shape{1, 6, 4});
    CHECK(seq.grid_rows == 3);
    CHECK(seq.grid_cols == 2);
    // Reconstruct the padded 6x4 grid from the patches and compare.
    std::vector<double> grid(24, -1.0);
    for (std::size_t p = 0; p < 6; ++p) {
      const std::size_t pr = p / 2, pc = p % 2;
      for (std::size_t j = 0; j < 2; ++j)
        for (std::size_t l = 0; l < 2; ++l)
          grid[(pr * 2 + j) * 4 + pc * 2 + l] = seq.patches.values()[p * 4 + j * 2 + l];
    }
    for (std::size_t f = 0; f < 6; ++f)
      for (std::size_t c = 0; c < 4; ++c)
        REQUIRE(grid[f * 4 + c] == (f < 5 ? m.values[f * 4 + c] : 0.0));
  }
  SECTION("empty matrix is rejected") {
    MfccMatrix m;
    CHECK_THROWS_AS(patchify(m, cfg), DataError);
  }
}

TEST_CASE("fourier position encoding", "[model]") {
  const Tensor pe = fourier_position_encoding(5, 6);
  REQUIRE(pe.shape() == Shape{5, 6});

  SECTION("position zero is alternating 0/1") {
    for (std::size_t i = 0; i < 3; ++i) {
      CHECK(pe.values()[2 * i] == 0.0);
      CHECK(pe.values()[2 * i + 1] == 1.0);
    }
  }
  SECTION("every entry lies in [-1, 1]") {
    for (const double v : pe.values()) {
      REQUIRE(v >= -1.0);
      REQUIRE(v <= 1.0);
    }
  }
  SECTION("PE[1,0] = sin(1)") {
    CHECK(pe.values()[6] == Catch::Approx(0.8414710).margin(1e-7));
  }
  SECTION("odd width is rejected") {
    CHECK_THROWS_AS(fourier_position_encoding(4, 7), ConfigError);
  }
}

TEST_CASE("encoder block skip and zero-branch behavior", "[model]") {
  RngStream rng(41);
  EncoderBlock blk;
  blk.bn = BatchNormLayer(8);
  blk.attn = SrAttentionLayer(8, 2, 2, rng);
  blk.sd = StochasticDepthNode(0.5);
  std::vector<double> xv(2 * 4 * 8);
  for (double& v : xv) v = rng.normal();
  const Tensor x(Shape{2, 4, 8}, xv);

  SECTION("a zero depth gate returns x exactly") {
    MaskTape tape;
    tape.gates = {0};
    tape.replay = true;
    ForwardCtx ctx{Mode::kTrain, nullptr, &tape};
    const Tensor y = blk.forward(x, ctx);
    CHECK(y.values() == x.values());
  }
  SECTION("zero attention output projection makes the branch vanish") {
    std::fill(blk.attn.wo.w.values().begin(), blk.attn.wo.w.values().end(), 0.0);
    std::fill(blk.attn.wo.b.values().begin(), blk.attn.wo.b.values().end(), 0.0);
    blk.sd.survival_p = 1.0;
    RngStream r2(1);
    ForwardCtx ctx{Mode::kTrain, &r2, nullptr};
    const Tensor y = blk.forward(x, ctx);
    for (std::size_t i = 0; i < x.size(); ++i) {
      REQUIRE(y.values()[i] == Catch::Approx(x.values()[i]).margin(1e-15));
    }
  }
  SECTION("shapes are preserved") {
    RngStream r2(2);
    ForwardCtx ctx{Mode::kTrain, &r2, nullptr};
    CHECK(blk.forward(x, ctx).shape() == x.shape());
  }
}

TEST_CASE("model forward contract", "[model]") {
  const ModelConfig cfg = tiny_config();
  Model model(cfg);
  RngStream rng(43);
  const MfccMatrix a = random_mfcc(7, 13, rng);
  const MfccMatrix b = random_mfcc(8, 13, rng);
  const Tensor x = pad_batch({a, b}, cfg);

  SECTION("returns one scalar per batch element") {
    ForwardCtx ctx;
    CHECK(model.forward(x, ctx).shape() == Shape{2});
  }
  SECTION("inference is deterministic") {
    ForwardCtx ctx;
    const Tensor y1 = model.forward(x, ctx);
    ForwardCtx ctx2;
    const Tensor y2 = model.forward(x, ctx2);
    CHECK(y1.values() == y2.values());
  }
  SECTION("zeroed final dense layer leaves only its bias") {
    auto& last = model.reg_dense_.back();
    std::fill(last.w.values().begin(), last.w.values().end(), 0.0);
    last.b.values()[0] = 3.25;
    ForwardCtx ctx;
    const Tensor y = model.forward(x, ctx);
    CHECK(y.values()[0] == 3.25);
    CHECK(y.values()[1] == 3.25);
  }
  SECTION("permuting the batch permutes outputs (inference)") {
    ForwardCtx ctx;
    const Tensor y = model.forward(x, ctx);
    ForwardCtx ctx2;
    const Tensor y_swapped = model.forward(pad_batch({b, a}, cfg), ctx2);
    CHECK(y.values()[0] == Catch::Approx(y_swapped.values()[1]).margin(1e-12));
    CHECK(y.values()[1] == Catch::Approx(y_swapped.values()[0]).margin(1e-12));
  }
  SECTION("wrong grid shape is a contract error") {
    ForwardCtx ctx;
    CHECK_THROWS_AS(model.forward(Tensor({2, 4, 13}, 0.0), ctx), ContractError);
  }
}

TEST_CASE("train and inference forwards agree when nothing is stochastic", "[model]") {
  ModelConfig cfg = tiny_config();
  cfg.dropout_rate = 0.0;
  cfg.survival_p = 1.0;
  Model model(cfg);
  RngStream rng(44);
  const Tensor x = pad_batch({random_mfcc(8, 13, rng), random_mfcc(8, 13, rng)}, cfg);

  // Make every batch-norm running average coincide with this batch's
  // statistics, so the statistics source is the only difference left.
  for (auto& blk : model.blocks_) blk.bn.momentum = 1.0;
  model.bn_final_.momentum = 1.0;
  RngStream r2(1);
  ForwardCtx train{Mode::kTrain, &r2, nullptr};
  const Tensor yt = model.forward(x, train);

  ForwardCtx infer;
  const Tensor yi = model.forward(x, infer);
  for (std::size_t i = 0; i < yt.size(); ++i) {
    REQUIRE(yt.values()[i] == Catch::Approx(yi.values()[i]).margin(1e-12));
  }
}

TEST_CASE("full-model gradient check with frozen masks", "[model]") {
  const ModelConfig cfg = tiny_config();
  Model model(cfg);
  RngStream rng(45);
  const Tensor x = pad_batch({random_mfcc(8, 13, rng), random_mfcc(6, 13, rng)}, cfg);

  MaskTape tape;
  RngStream stoch(9);
  ForwardCtx record{Mode::kTrain, &stoch, &tape};
  (void)model.forward(x, record);

  RngStream wrng(46);
  const double err = finite_difference_check(
      [&](const Tensor& t) {
        tape.rewind();
        ForwardCtx replay{Mode::kTrain, nullptr, &tape};
        RngStream w2 = wrng;
        return weighted_sum(model.forward(t, replay), w2);
      },
      x);
  CHECK(err < 1e-3);
}

TEST_CASE("parameter counting", "[model]") {
  SECTION("a dense J->K layer holds J*K + K values") {
    RngStream rng(47);
    const DenseLayer dense(5, 3, rng);
    CHECK(dense.w.size() + dense.b.size() == 5 * 3 + 3);
  }
  SECTION("widening the feed-forward strictly increases the count") {
    ModelConfig small = tiny_config();
    ModelConfig big = tiny_config();
    big.ffn_hidden = {32};
    CHECK(Model(big).count_parameters() > Model(small).count_parameters());
  }
  SECTION("default desk configuration matches the golden snapshot") {
    CHECK(Model(ModelConfig{}).count_parameters() == 158337);
  }
}

TEST_CASE("checkpoint round trip preserves behavior and validates shapes", "[model]") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "stx_model_test";
  fs::create_directories(dir);
  const std::string path = (dir / "model.ckpt").string();

  const ModelConfig cfg = tiny_config();
  Model model(cfg);
  model.target_scale = 2.5;
  model.target_offset = 20.0;
  // Nudge the running stats away from their initialization.
  model.bn_final_.running_mean.assign(model.bn_final_.running_mean.size(), 0.3);
  model.save(path);

  Model back = Model::load(path);
  CHECK(back.config().canonical_text() == cfg.canonical_text());
  CHECK(back.target_scale == 2.5);
  CHECK(back.target_offset == 20.0);
  CHECK(back.bn_final_.running_mean[0] == 0.3);

  RngStream rng(48);
  const MfccMatrix m = random_mfcc(8, 13, rng);
  CHECK(model.predict(m) == back.predict(m));

  SECTION("a truncated checkpoint is rejected") {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << "stxmodel,v1\n" << cfg.canonical_text() << "---\n";
    out.close();
    CHECK_THROWS_AS(Model::load(path), DataError);
  }
  SECTION("a non-checkpoint file is rejected") {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << "garbage";
    out.close();
    CHECK_THROWS_AS(Model::load(path), DataError);
  }
}

TEST_CASE("model config validation and kv round trip", "[model]") {
  SECTION("defaults are valid") {
    CHECK_NOTHROW(ModelConfig{}.validate());
  }
  SECTION("kv round trip is lossless") {
    ModelConfig cfg = tiny_config();
    cfg.dropout_rate = 0.17;
    cfg.ffn_hidden = {16, 12};
    const ModelConfig back = ModelConfig::from_kv(cfg.to_kv());
    CHECK(back.canonical_text() == cfg.canonical_text());
  }
  SECTION("bad configurations are rejected") {
    ModelConfig cfg;
    cfg.n_heads = 7;  // does not divide 64
    CHECK_THROWS_AS(cfg.validate(), ConfigError);

    ModelConfig cfg2;
    cfg2.max_frames = 95;  // not a multiple of patch_h
    CHECK_THROWS_AS(cfg2.validate(), ConfigError);

    ModelConfig cfg3;
    cfg3.survival_p = 0.0;
    CHECK_THROWS_AS(cfg3.validate(), ConfigError);

    CHECK_THROWS_AS(ModelConfig::from_kv({{"no_such_key", "1"}}), DataError);
  }
}
