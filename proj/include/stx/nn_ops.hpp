#pragma once

// Fused layer kernels with hand-derived backward rules. Each one is covered
// by finite-difference checks in the test suite.

#include <cmath>
#include <cstddef>
#include <vector>

#include "stx/tensor.hpp"

namespace stx {

// Layer normalization over the last dimension with learned scale and shift.
// x: [..., D], gamma/beta: [D].
inline Tensor layer_norm_lastdim(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                                 double eps = 1e-5) {
  const std::size_t d = x.shape().back();
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
    throw ShapeError("layer_norm: scale/shift " + shape_str(gamma.shape()) +
                     " do not match feature dim of " + shape_str(x.shape()));
  }
  const std::size_t rows = x.size() / d;
  std::vector<double> out(x.size());
  std::vector<double> xhat(x.size());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = x.data() + r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    inv_std[r] = inv;
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (row[j] - mean) * inv;
      out[r * d + j] = gamma.data()[j] * xhat[r * d + j] + beta.data()[j];
    }
  }
  auto px = x.node(), pg = gamma.node(), pb = beta.node();
  std::vector<double> gv = gamma.values();
  return detail::make_op(
      x.shape(), std::move(out), {x, gamma, beta},
      [px, pg, pb, xhat = std::move(xhat), inv_std = std::move(inv_std), gv = std::move(gv), rows,
       d](TensorNode& n) {
        for (std::size_t r = 0; r < rows; ++r) {
          const double* g = n.grad.data() + r * d;
          const double* xh = xhat.data() + r * d;
          if (pg->requires_grad) {
            pg->ensure_grad();
            for (std::size_t j = 0; j < d; ++j) pg->grad[j] += g[j] * xh[j];
          }
          if (pb->requires_grad) {
            pb->ensure_grad();
            for (std::size_t j = 0; j < d; ++j) pb->grad[j] += g[j];
          }
          if (px->requires_grad) {
            px->ensure_grad();
            double s1 = 0.0, s2 = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              const double dxh = g[j] * gv[j];
              s1 += dxh;
              s2 += dxh * xh[j];
            }
            const double inv_d = 1.0 / static_cast<double>(d);
            for (std::size_t j = 0; j < d; ++j) {
              const double dxh = g[j] * gv[j];
              px->grad[r * d + j] += inv_std[r] * (dxh - s1 * inv_d - xh[j] * s2 * inv_d);
            }
          }
        }
      });
}

struct BatchStats {
  std::vector<double> mean;
  std::vector<double> var;  // population (1/N)
};

// Batch normalization in training mode: per-feature statistics over the rows
// of x [N, F]. Batch statistics are differentiable; the caller folds them
// into running averages outside the graph.
inline Tensor batch_norm_train(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps,
                               BatchStats* stats_out = nullptr) {
  if (x.rank() != 2) throw ShapeError("batch_norm: expected [N,F] input, got " + shape_str(x.shape()));
  const std::size_t n_rows = x.dim(0), f = x.dim(1);
  if (n_rows < 2) {
    throw ContractError("batch_norm: training mode needs batch >= 2, got " +
                        std::to_string(n_rows));
  }
  if (gamma.shape() != Shape{f} || beta.shape() != Shape{f}) {
    throw ShapeError("batch_norm: scale/shift " + shape_str(gamma.shape()) +
                     " do not match features of " + shape_str(x.shape()));
  }
  std::vector<double> mean(f, 0.0), var(f, 0.0);
  for (std::size_t r = 0; r < n_rows; ++r)
    for (std::size_t j = 0; j < f; ++j) mean[j] += x.data()[r * f + j];
  for (double& m : mean) m /= static_cast<double>(n_rows);
  for (std::size_t r = 0; r < n_rows; ++r)
    for (std::size_t j = 0; j < f; ++j) {
      const double c = x.data()[r * f + j] - mean[j];
      var[j] += c * c;
    }
  for (double& v : var) v /= static_cast<double>(n_rows);

  std::vector<double> inv_std(f);
  for (std::size_t j = 0; j < f; ++j) inv_std[j] = 1.0 / std::sqrt(var[j] + eps);

  std::vector<double> xhat(x.size()), out(x.size());
  for (std::size_t r = 0; r < n_rows; ++r)
    for (std::size_t j = 0; j < f; ++j) {
      xhat[r * f + j] = (x.data()[r * f + j] - mean[j]) * inv_std[j];
      out[r * f + j] = gamma.data()[j] * xhat[r * f + j] + beta.data()[j];
    }
  if (stats_out) {
    stats_out->mean = mean;
    stats_out->var = var;
  }
  auto px = x.node(), pg = gamma.node(), pb = beta.node();
  std::vector<double> gv = gamma.values();
  return detail::make_op(
      x.shape(), std::move(out), {x, gamma, beta},
      [px, pg, pb, xhat = std::move(xhat), inv_std = std::move(inv_std), gv = std::move(gv), n_rows,
       f](TensorNode& n) {
        if (pg->requires_grad) {
          pg->ensure_grad();
          for (std::size_t r = 0; r < n_rows; ++r)
            for (std::size_t j = 0; j < f; ++j) pg->grad[j] += n.grad[r * f + j] * xhat[r * f + j];
        }
        if (pb->requires_grad) {
          pb->ensure_grad();
          for (std::size_t r = 0; r < n_rows; ++r)
            for (std::size_t j = 0; j < f; ++j) pb->grad[j] += n.grad[r * f + j];
        }
        if (px->requires_grad) {
          px->ensure_grad();
          std::vector<double> s1(f, 0.0), s2(f, 0.0);
          for (std::size_t r = 0; r < n_rows; ++r)
            for (std::size_t j = 0; j < f; ++j) {
              const double dxh = n.grad[r * f + j] * gv[j];
              s1[j] += dxh;
              s2[j] += dxh * xhat[r * f + j];
            }
          const double inv_n = 1.0 / static_cast<double>(n_rows);
          for (std::size_t r = 0; r < n_rows; ++r)
            for (std::size_t j = 0; j < f; ++j) {
              const double dxh = n.grad[r * f + j] * gv[j];
              px->grad[r * f + j] +=
                  inv_std[j] * (dxh - s1[j] * inv_n - xhat[r * f + j] * s2[j] * inv_n);
            }
        }
      });
}

// Inference-mode batch normalization against fixed running statistics.
inline Tensor batch_norm_infer(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                               const std::vector<double>& mean, const std::vector<double>& var,
                               double eps) {
  if (x.rank() != 2) throw ShapeError("batch_norm: expected [N,F] input, got " + shape_str(x.shape()));
  const std::size_t n_rows = x.dim(0), f = x.dim(1);
  if (mean.size() != f || var.size() != f || gamma.shape() != Shape{f} || beta.shape() != Shape{f}) {
    throw ShapeError("batch_norm: running stats/scale do not match features of " +
                     shape_str(x.shape()));
  }
  std::vector<double> inv_std(f);
  for (std::size_t j = 0; j < f; ++j) inv_std[j] = 1.0 / std::sqrt(var[j] + eps);
  std::vector<double> out(x.size()), xhat(x.size());
  for (std::size_t r = 0; r < n_rows; ++r)
    for (std::size_t j = 0; j < f; ++j) {
      xhat[r * f + j] = (x.data()[r * f + j] - mean[j]) * inv_std[j];
      out[r * f + j] = gamma.data()[j] * xhat[r * f + j] + beta.data()[j];
    }
  auto px = x.node(), pg = gamma.node(), pb = beta.node();
  std::vector<double> gv = gamma.values();
  return detail::make_op(
      x.shape(), std::move(out), {x, gamma, beta},
      [px, pg, pb, xhat = std::move(xhat), inv_std = std::move(inv_std), gv = std::move(gv), n_rows,
       f](TensorNode& n) {
        for (std::size_t r = 0; r < n_rows; ++r)
          for (std::size_t j = 0; j < f; ++j) {
            const double g = n.grad[r * f + j];
            if (px->requires_grad) {
              px->ensure_grad();
              px->grad[r * f + j] += g * gv[j] * inv_std[j];
            }
            if (pg->requires_grad) {
              pg->ensure_grad();
              pg->grad[j] += g * xhat[r * f + j];
            }
            if (pb->requires_grad) {
              pb->ensure_grad();
              pb->grad[j] += g;
            }
          }
      });
}

// Locally connected 1-d layer: per-position unshared filters.
// x: [B, S, C], w: [P, patch*C, F], b: [P, F] where P = (S - patch)/stride + 1.
// out[b,p,f] = b[p,f] + sum_{j,c} x[b, p*stride + j, c] * w[p, j*C + c, f]
inline Tensor locally_connected(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t patch,
                                std::size_t stride) {
  if (x.rank() != 3) throw ShapeError("locally_connected: expected [B,S,C] input, got " + shape_str(x.shape()));
  if (patch == 0 || stride == 0) throw ConfigError("locally_connected: patch and stride must be positive");
  const std::size_t batch = x.dim(0), s_len = x.dim(1), ch = x.dim(2);
  if (s_len < patch) {
    throw ConfigError("locally_connected: input length " + std::to_string(s_len) +
                      " shorter than patch " + std::to_string(patch));
  }
  const std::size_t p_out = (s_len - patch) / stride + 1;
  const std::size_t k = patch * ch;
  if (w.rank() != 3 || w.dim(0) != p_out || w.dim(1) != k) {
    throw ShapeError("locally_connected: weights " + shape_str(w.shape()) + " do not match geometry [" +
                     std::to_string(p_out) + "," + std::to_string(k) + ",F]");
  }
  const std::size_t filters = w.dim(2);
  if (b.shape() != Shape{p_out, filters}) {
    throw ShapeError("locally_connected: bias " + shape_str(b.shape()) + " does not match [" +
                     std::to_string(p_out) + "," + std::to_string(filters) + "]");
  }
  std::vector<double> out(batch * p_out * filters);
  for (std::size_t bi = 0; bi < batch; ++bi)
    for (std::size_t p = 0; p < p_out; ++p) {
      double* orow = out.data() + (bi * p_out + p) * filters;
      for (std::size_t f = 0; f < filters; ++f) orow[f] = b.data()[p * filters + f];
      for (std::size_t j = 0; j < patch; ++j)
        for (std::size_t c = 0; c < ch; ++c) {
          const double xv = x.data()[(bi * s_len + p * stride + j) * ch + c];
          if (xv == 0.0) continue;
          const double* wrow = w.data() + (p * k + j * ch + c) * filters;
          for (std::size_t f = 0; f < filters; ++f) orow[f] += xv * wrow[f];
        }
    }
  auto px = x.node(), pw = w.node(), pb = b.node();
  std::vector<double> xv = x.values(), wv = w.values();
  return detail::make_op(
      Shape{batch, p_out, filters}, std::move(out), {x, w, b},
      [px, pw, pb, xv = std::move(xv), wv = std::move(wv), batch, s_len, ch, p_out, k, patch, stride,
       filters](TensorNode& n) {
        if (pb->requires_grad) pb->ensure_grad();
        if (pw->requires_grad) pw->ensure_grad();
        if (px->requires_grad) px->ensure_grad();
        for (std::size_t bi = 0; bi < batch; ++bi)
          for (std::size_t p = 0; p < p_out; ++p) {
            const double* g = n.grad.data() + (bi * p_out + p) * filters;
            if (pb->requires_grad)
              for (std::size_t f = 0; f < filters; ++f) pb->grad[p * filters + f] += g[f];
            for (std::size_t j = 0; j < patch; ++j)
              for (std::size_t c = 0; c < ch; ++c) {
                const std::size_t xi = (bi * s_len + p * stride + j) * ch + c;
                const std::size_t wo = (p * k + j * ch + c) * filters;
                if (pw->requires_grad) {
                  const double x_v = xv[xi];
                  for (std::size_t f = 0; f < filters; ++f) pw->grad[wo + f] += x_v * g[f];
                }
                if (px->requires_grad) {
                  double acc = 0.0;
                  for (std::size_t f = 0; f < filters; ++f) acc += wv[wo + f] * g[f];
                  px->grad[xi] += acc;
                }
              }
          }
      });
}

// Non-overlapping patch flattening for an exactly tiled grid.
// x: [B, T, C] with T % ph == 0 and C % pw == 0 -> [B, P, ph*pw],
// P = (T/ph)*(C/pw); patches ordered row-major over the grid and flattened
// row-major internally.
inline Tensor patch_extract(const Tensor& x, std::size_t ph, std::size_t pw) {
  if (x.rank() != 3) throw ShapeError("patch_extract: expected [B,T,C] input, got " + shape_str(x.shape()));
  if (ph == 0 || pw == 0) throw ConfigError("patch_extract: patch dims must be positive");
  const std::size_t batch = x.dim(0), t_len = x.dim(1), c_len = x.dim(2);
  if (t_len % ph != 0 || c_len % pw != 0) {
    throw ShapeError("patch_extract: grid " + shape_str(x.shape()) + " not tiled by " +
                     std::to_string(ph) + "x" + std::to_string(pw));
  }
  const std::size_t rows = t_len / ph, cols = c_len / pw;
  const std::size_t n_patches = rows * cols, plen = ph * pw;
  std::vector<double> out(batch * n_patches * plen);
  for (std::size_t bi = 0; bi < batch; ++bi)
    for (std::size_t pr = 0; pr < rows; ++pr)
      for (std::size_t pc = 0; pc < cols; ++pc) {
        const std::size_t p = pr * cols + pc;
        for (std::size_t j = 0; j < ph; ++j)
          for (std::size_t l = 0; l < pw; ++l)
            out[(bi * n_patches + p) * plen + j * pw + l] =
                x.data()[(bi * t_len + pr * ph + j) * c_len + pc * pw + l];
      }
  auto px = x.node();
  return detail::make_op(Shape{batch, n_patches, plen}, std::move(out), {x},
                         [px, batch, t_len, c_len, rows, cols, ph, pw, n_patches, plen](TensorNode& n) {
                           if (!px->requires_grad) return;
                           px->ensure_grad();
                           for (std::size_t bi = 0; bi < batch; ++bi)
                             for (std::size_t pr = 0; pr < rows; ++pr)
                               for (std::size_t pc = 0; pc < cols; ++pc) {
                                 const std::size_t p = pr * cols + pc;
                                 for (std::size_t j = 0; j < ph; ++j)
                                   for (std::size_t l = 0; l < pw; ++l)
                                     px->grad[(bi * t_len + pr * ph + j) * c_len + pc * pw + l] +=
                                         n.grad[(bi * n_patches + p) * plen + j * pw + l];
                               }
                         });
}

}  // namespace stx
