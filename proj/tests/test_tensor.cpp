#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <set>

#include "oracles.hpp"
#include "stx/gradcheck.hpp"
#include "stx/nn_ops.hpp"
#include "stx/rng.hpp"
#include "stx/serialize.hpp"
#include "stx/tensor.hpp"

#include <sstream>

using namespace stx;

namespace {

Tensor random_tensor(Shape shape, RngStream& rng, bool requires_grad = false, double scale = 1.0) {
  std::vector<double> v(shape_size(shape));
  for (double& x : v) x = rng.normal() * scale;
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

}  // namespace

TEST_CASE("matmul matches hand-expanded products", "[tensor]") {
  const Tensor eye({2, 2}, {1, 0, 0, 1});
  const Tensor a({2, 2}, {1, 2, 3, 4});
  CHECK(matmul(eye, a).values() == std::vector<double>{1, 2, 3, 4});

  const Tensor zero({2, 2}, 0.0);
  CHECK(matmul(a, zero).values() == std::vector<double>{0, 0, 0, 0});

  const Tensor b({2, 2}, {5, 6, 7, 8});
  CHECK(matmul(a, b).values() == std::vector<double>{19, 22, 43, 50});
}

TEST_CASE("matmul rejects mismatched inner dimensions naming both shapes", "[tensor]") {
  const Tensor a({2, 3}, 1.0);
  const Tensor b({4, 2}, 1.0);
  try {
    matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2,3]") != std::string::npos);
    CHECK(msg.find("[4,2]") != std::string::npos);
  }
}

TEST_CASE("matmul is associative on small random matrices", "[tensor]") {
  RngStream rng(11);
  for (int trial = 0; trial < 25; ++trial) {
    const Tensor a = random_tensor({3, 4}, rng);
    const Tensor b = random_tensor({4, 5}, rng);
    const Tensor c = random_tensor({5, 2}, rng);
    const Tensor left = matmul(matmul(a, b), c);
    const Tensor right = matmul(a, matmul(b, c));
    for (std::size_t i = 0; i < left.size(); ++i) {
      REQUIRE(std::abs(left.data()[i] - right.data()[i]) < 1e-10);
    }
  }
}

TEST_CASE("softmax_lastdim matches closed forms and the exponential-sum oracle", "[tensor]") {
  CHECK(softmax_lastdim(Tensor({2}, {0.0, 0.0})).values() == std::vector<double>{0.5, 0.5});
  CHECK(softmax_lastdim(Tensor({1}, {42.0})).values() == std::vector<double>{1.0});

  const Tensor t({2}, {0.0, std::log(3.0)});
  const Tensor y = softmax_lastdim(t);
  CHECK(y.data()[0] == Catch::Approx(0.25).margin(1e-12));
  CHECK(y.data()[1] == Catch::Approx(0.75).margin(1e-12));
  const auto ref = oracle::softmax_ref({0.0, std::log(3.0)});
  CHECK(y.data()[0] == Catch::Approx(ref[0]).margin(1e-14));
  CHECK(y.data()[1] == Catch::Approx(ref[1]).margin(1e-14));
}

TEST_CASE("softmax rows sum to one and are shift invariant", "[tensor]") {
  RngStream rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor x = random_tensor({4, 7}, rng, false, 3.0);
    const Tensor y = softmax_lastdim(x);
    for (std::size_t r = 0; r < 4; ++r) {
      double row_sum = 0.0;
      for (std::size_t j = 0; j < 7; ++j) row_sum += y.data()[r * 7 + j];
      REQUIRE(std::abs(row_sum - 1.0) < 1e-12);
    }
    std::vector<double> shifted = x.values();
    const double c = rng.uniform(-5.0, 5.0);
    for (double& v : shifted) v += c;
    const Tensor y2 = softmax_lastdim(Tensor(x.shape(), shifted));
    for (std::size_t i = 0; i < y.size(); ++i) {
      REQUIRE(std::abs(y.data()[i] - y2.data()[i]) < 1e-12);
    }
  }
}

TEST_CASE("softmax rejects non-finite input", "[tensor]") {
  CHECK_THROWS_AS(softmax_lastdim(Tensor({2}, {1.0, std::nan("")})), NumericError);
}

TEST_CASE("backward populates leaf gradients", "[tensor]") {
  SECTION("sum gives all-ones gradient") {
    Tensor x({2, 3}, {1, 2, 3, 4, 5, 6}, true);
    sum(x).backward();
    CHECK(x.grad() == std::vector<double>(6, 1.0));
  }
  SECTION("d(x*x)/dx at 3 is 6, against a central difference") {
    Tensor x = Tensor::scalar(3.0, true);
    mul(x, x).backward();
    CHECK(x.grad()[0] == Catch::Approx(6.0).margin(1e-12));
    const double eps = 1e-6;
    const double fd = ((3 + eps) * (3 + eps) - (3 - eps) * (3 - eps)) / (2 * eps);
    CHECK(x.grad()[0] == Catch::Approx(fd).margin(1e-8));
  }
  SECTION("constant root leaves no gradients behind") {
    Tensor x({2}, {1.0, 2.0}, false);
    Tensor y = sum(mul(x, x));
    y.backward();
    CHECK_FALSE(x.has_grad());
  }
  SECTION("non-scalar root is rejected") {
    Tensor x({2}, {1.0, 2.0}, true);
    CHECK_THROWS_AS(add(x, x).backward(), ContractError);
  }
}

TEST_CASE("gradient accumulation sums contributions exactly", "[tensor]") {
  Tensor x({3}, {1.0, -2.0, 0.5}, true);
  const Tensor a({3}, {2.0, 3.0, 4.0});
  const Tensor b({3}, {-1.0, 5.0, 7.0});
  // x feeds two linear consumers; its gradient must be a + b exactly.
  sum(add(mul(x, a), mul(x, b))).backward();
  CHECK(x.grad() == std::vector<double>{1.0, 8.0, 11.0});

  Tensor y = Tensor::scalar(2.0, true);
  sum(add(y, y)).backward();
  CHECK(y.grad()[0] == 2.0);
}

TEST_CASE("finite differences: linear functions are exact", "[tensor]") {
  // At the origin the +/- eps evaluations are exact in floating point, so
  // the error is exactly zero; generic inputs only add rounding noise.
  const Tensor zeros({4}, 0.0);
  CHECK(finite_difference_check([](const Tensor& t) { return sum(t); }, zeros, 1e-5) == 0.0);

  const Tensor x({4}, {0.3, -1.2, 2.0, 0.0});
  CHECK(finite_difference_check([](const Tensor& t) { return sum(t); }, x, 1e-5) < 1e-10);
}

TEST_CASE("finite differences: sum of squares", "[tensor]") {
  const Tensor x({2}, {1.0, 2.0});
  const double err =
      finite_difference_check([](const Tensor& t) { return sum(mul(t, t)); }, x, 1e-5);
  CHECK(err < 1e-8);
}

TEST_CASE("every core op passes randomized finite-difference checks", "[tensor]") {
  RngStream rng(99);
  // Takes the stream by value so every re-evaluation of f inside the
  // finite-difference loop sees the same readout weights.
  auto weighted_sum = [&](const Tensor& y, RngStream wrng) {
    std::vector<double> w(y.size());
    for (double& v : w) v = wrng.normal();
    return sum(mul(y, Tensor(y.shape(), w)));
  };

  for (int trial = 0; trial < 100; ++trial) {
    RngStream wrng = rng.split(1000 + trial);
    const int which = trial % 10;
    double err = 0.0;
    switch (which) {
      case 0: {  // matmul, both arguments
        const Tensor a = random_tensor({3, 4}, rng);
        const Tensor b = random_tensor({4, 2}, rng);
        err = std::max(
            finite_difference_check(
                [&](const Tensor& t) { return weighted_sum(matmul(t, b), wrng); }, a),
            finite_difference_check(
                [&](const Tensor& t) { return weighted_sum(matmul(a, t), wrng); }, b));
        break;
      }
      case 1: {  // bmm
        const Tensor a = random_tensor({2, 3, 4}, rng);
        const Tensor b = random_tensor({2, 4, 2}, rng);
        err = std::max(
            finite_difference_check([&](const Tensor& t) { return weighted_sum(bmm(t, b), wrng); },
                                    a),
            finite_difference_check([&](const Tensor& t) { return weighted_sum(bmm(a, t), wrng); },
                                    b));
        break;
      }
      case 2: {  // softmax
        const Tensor x = random_tensor({3, 5}, rng, false, 2.0);
        err = finite_difference_check(
            [&](const Tensor& t) { return weighted_sum(softmax_lastdim(t), wrng); }, x);
        break;
      }
      case 3: {  // gelu
        const Tensor x = random_tensor({2, 6}, rng, false, 2.0);
        err = finite_difference_check([&](const Tensor& t) { return weighted_sum(gelu(t), wrng); },
                                      x);
        break;
      }
      case 4: {  // elementwise add/sub/mul/scale chain
        const Tensor x = random_tensor({3, 3}, rng);
        const Tensor c = random_tensor({3, 3}, rng);
        err = finite_difference_check(
            [&](const Tensor& t) {
              return weighted_sum(scale(mul(add(t, c), sub(t, c)), 0.7), wrng);
            },
            x);
        break;
      }
      case 5: {  // reshape + transpose + swap
        const Tensor x = random_tensor({2, 3, 2, 2}, rng);
        err = finite_difference_check(
            [&](const Tensor& t) {
              return weighted_sum(transpose_last2(swap_axes12(t)), wrng);
            },
            x);
        break;
      }
      case 6: {  // add_bias and add_broadcast0
        const Tensor x = random_tensor({4, 3}, rng);
        const Tensor b = random_tensor({3}, rng);
        err = std::max(
            finite_difference_check(
                [&](const Tensor& t) { return weighted_sum(add_bias(t, b), wrng); }, x),
            finite_difference_check(
                [&](const Tensor& t) { return weighted_sum(add_bias(x, t), wrng); }, b));
        break;
      }
      case 7: {  // mean_axis1 + mul_mask
        const Tensor x = random_tensor({2, 4, 3}, rng);
        std::vector<double> mask(x.size());
        for (double& m : mask) m = rng.bernoulli(0.5) ? 1.25 : 0.0;
        err = finite_difference_check(
            [&](const Tensor& t) { return weighted_sum(mean_axis1(mul_mask(t, mask)), wrng); }, x);
        break;
      }
      case 8: {  // layer norm, all three arguments
        const Tensor x = random_tensor({3, 6}, rng);
        const Tensor g = random_tensor({6}, rng, false, 0.5);
        const Tensor be = random_tensor({6}, rng, false, 0.5);
        err = std::max({finite_difference_check(
                            [&](const Tensor& t) {
                              return weighted_sum(layer_norm_lastdim(t, g, be), wrng);
                            },
                            x),
                        finite_difference_check(
                            [&](const Tensor& t) {
                              return weighted_sum(layer_norm_lastdim(x, t, be), wrng);
                            },
                            g),
                        finite_difference_check(
                            [&](const Tensor& t) {
                              return weighted_sum(layer_norm_lastdim(x, g, t), wrng);
                            },
                            be)});
        break;
      }
      default: {  // batch norm (training) + patch_extract
        const Tensor x = random_tensor({4, 6}, rng);
        const Tensor g = random_tensor({6}, rng, false, 0.5);
        const Tensor be = random_tensor({6}, rng, false, 0.5);
        const Tensor px = random_tensor({2, 4, 6}, rng);
        err = std::max(finite_difference_check(
                           [&](const Tensor& t) {
                             return weighted_sum(batch_norm_train(t, g, be, 1e-5), wrng);
                           },
                           x),
                       finite_difference_check(
                           [&](const Tensor& t) {
                             return weighted_sum(patch_extract(t, 2, 3), wrng);
                           },
                           px));
        break;
      }
    }
    INFO("trial " << trial << " op " << which);
    REQUIRE(err < 1e-4);
  }
}

TEST_CASE("rng streams are deterministic, seekable, and splittable", "[tensor]") {
  RngStream a(1234);
  RngStream b(1234);
  for (int i = 0; i < 100; ++i) REQUIRE(a.next_u64() == b.next_u64());

  a.seek(7);
  b.seek(7);
  CHECK(a.next_u64() == b.next_u64());

  RngStream s1 = RngStream(1234).split(1);
  RngStream s2 = RngStream(1234).split(2);
  CHECK(s1.next_u64() != s2.next_u64());

  RngStream u(77);
  for (int i = 0; i < 1000; ++i) {
    const double v = u.uniform();
    REQUIRE(v >= 0.0);
    REQUIRE(v < 1.0);
  }
}

TEST_CASE("tensor binary serialization round-trips exactly", "[tensor]") {
  RngStream rng(3);
  const Tensor t = random_tensor({3, 2, 4}, rng);
  std::stringstream ss;
  save_tensor(ss, t);
  const Tensor back = load_tensor(ss);
  CHECK(back.shape() == t.shape());
  CHECK(back.values() == t.values());

  NamedTensors named{{"alpha.w", random_tensor({2, 2}, rng)}, {"beta.b", random_tensor({5}, rng)}};
  std::stringstream ss2;
  save_named_tensors(ss2, named);
  const NamedTensors round = load_named_tensors(ss2);
  REQUIRE(round.size() == 2);
  CHECK(round[0].first == "alpha.w");
  CHECK(round[0].second.values() == named[0].second.values());
  CHECK(round[1].second.values() == named[1].second.values());

  std::stringstream bad("XXXX");
  CHECK_THROWS_AS(load_tensor(bad), DataError);
}

TEST_CASE("shape validation catches zero dims and length mismatches", "[tensor]") {
  CHECK_THROWS_AS(Tensor({2, 0}, 1.0), ShapeError);
  CHECK_THROWS_AS(Tensor({2, 2}, {1.0, 2.0}), ShapeError);
  CHECK_THROWS_AS(Tensor({2}, {1.0, 2.0}).value(), ContractError);
}
