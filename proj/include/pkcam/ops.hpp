#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "pkcam/tensor.hpp"

// Forward operations with reverse-mode adjoints. All loops are plain
// sequential loops with a fixed accumulation order, so repeated runs on the
// same inputs are bit-identical. Convolution output extents use floor
// division, the standard cross-correlation arithmetic; a ragged border that
// does not fit a full stride step is discarded.

namespace pkcam {
namespace ops {

inline void expect_rank(Tensor t, int rank, const char* op, const char* arg) {
  if (t.rank() != rank)
    throw ShapeError(std::string(op) + ": " + arg + " must have rank " +
                     std::to_string(rank) + ", got " + shape_str(t.shape()));
}

inline void expect_same_shape(Tensor a, Tensor b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()) + " do not match");
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

inline Tensor relu(Tensor x) {
  Tensor y(x.shape());
  const double* xp = x.data();
  double* yp = y.data();
  for (std::int64_t i = 0; i < x.numel(); ++i) yp[i] = xp[i] > 0.0 ? xp[i] : 0.0;
  detail::check_finite(y, "relu");
  if (detail::tracing({&x})) {
    y.set_requires_grad(true);
    GradTape::active()->record([x, y]() mutable {
      x.ensure_grad();
      if (!y.has_grad()) return;
      const double* g = y.grad();
      const double* xp = x.data();
      double* xg = x.grad();
      for (std::int64_t i = 0; i < x.numel(); ++i)
        if (xp[i] > 0.0) xg[i] += g[i];
    });
  }
  return y;
}

inline Tensor sigmoid(Tensor x) {
  Tensor y(x.shape());
  const double* xp = x.data();
  double* yp = y.data();
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    double t = xp[i];
    yp[i] = t >= 0.0 ? 1.0 / (1.0 + std::exp(-t))
                     : std::exp(t) / (1.0 + std::exp(t));
  }
  detail::check_finite(y, "sigmoid");
  if (detail::tracing({&x})) {
    y.set_requires_grad(true);
    GradTape::active()->record([x, y]() mutable {
      x.ensure_grad();
      if (!y.has_grad()) return;
      const double* g = y.grad();
      const double* yp = y.data();
      double* xg = x.grad();
      for (std::int64_t i = 0; i < x.numel(); ++i) xg[i] += g[i] * yp[i] * (1.0 - yp[i]);
    });
  }
  return y;
}

// Softmax along one axis; exponentials are max-shifted per slice.
inline Tensor softmax(Tensor x, int axis) {
  if (axis < 0 || axis >= x.rank())
    throw ShapeError("softmax: axis " + std::to_string(axis) + " out of range for " +
                     shape_str(x.shape()));
  const std::int64_t len = x.dim(axis);
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.dim(i);
  for (int i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);

  Tensor y(x.shape());
  const double* xp = x.data();
  double* yp = y.data();
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t in = 0; in < inner; ++in) {
      const std::int64_t base = o * len * inner + in;
      double mx = xp[base];
      for (std::int64_t l = 1; l < len; ++l) mx = std::max(mx, xp[base + l * inner]);
      double z = 0.0;
      for (std::int64_t l = 0; l < len; ++l) {
        double e = std::exp(xp[base + l * inner] - mx);
        yp[base + l * inner] = e;
        z += e;
      }
      for (std::int64_t l = 0; l < len; ++l) yp[base + l * inner] /= z;
    }
  }
  detail::check_finite(y, "softmax");
  if (detail::tracing({&x})) {
    y.set_requires_grad(true);
    GradTape::active()->record([x, y, outer, inner, len]() mutable {
      x.ensure_grad();
      if (!y.has_grad()) return;
      const double* g = y.grad();
      const double* yp = y.data();
      double* xg = x.grad();
      for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t in = 0; in < inner; ++in) {
          const std::int64_t base = o * len * inner + in;
          double dot = 0.0;
          for (std::int64_t l = 0; l < len; ++l)
            dot += g[base + l * inner] * yp[base + l * inner];
          for (std::int64_t l = 0; l < len; ++l) {
            const std::int64_t k = base + l * inner;
            xg[k] += yp[k] * (g[k] - dot);
          }
        }
      }
    });
  }
  return y;
}

inline Tensor add(Tensor a, Tensor b) {
  expect_same_shape(a, b, "add");
  Tensor y(a.shape());
  const double* ap = a.data();
  const double* bp = b.data();
  double* yp = y.data();
  for (std::int64_t i = 0; i < a.numel(); ++i) yp[i] = ap[i] + bp[i];
  detail::check_finite(y, "add");
  if (detail::tracing({&a, &b})) {
    y.set_requires_grad(true);
    GradTape::active()->record([a, b, y]() mutable {
      a.ensure_grad();
      b.ensure_grad();
      if (!y.has_grad()) return;
      const double* g = y.grad();
      double* ag = a.grad();
      double* bg = b.grad();
      for (std::int64_t i = 0; i < a.numel(); ++i) {
        ag[i] += g[i];
        bg[i] += g[i];
      }
    });
  }
  return y;
}

inline Tensor mul(Tensor a, Tensor b) {
  expect_same_shape(a, b, "mul");
  Tensor y(a.shape());
  const double* ap = a.data();
  const double* bp = b.data();
  double* yp = y.data();
  for (std::int64_t i = 0; i < a.numel(); ++i) yp[i] = ap[i] * bp[i];
  detail::check_finite(y, "mul");
  if (detail::tracing({&a, &b})) {
    y.set_requires_grad(true);
    GradTape::active()->record([a, b, y]() mutable {
      a.ensure_grad();
      b.ensure_grad();
      if (!y.has_grad()) return;
      const double* g = y.grad();
      double* ag = a.grad();
      double* bg = b.grad();
      for (std::int64_t i = 0; i < a.numel(); ++i) {
        ag[i] += g[i] * b[i];
        bg[i] += g[i] * a[i];
      }
    });
  }
  return y;
}

inline Tensor scale(Tensor x, double c) {
  Tensor y(x.shape());
  const double* xp = x.data();
  double* yp = y.data();
  for (std::int64_t i = 0; i < x.numel(); ++i) yp[i] = xp[i] * c;
  detail::check_finite(y, "scale");
  if (detail::tracing({&x})) {
    y.set_requires_grad(true);
    GradTape::active()->record([x, y, c]() mutable {
      x.ensure_grad();
      if (!y.has_grad()) return;
      const double* g = y.grad();
      double* xg = x.grad();
      for (std::int64_t i = 0; i < x.numel(); ++i) xg[i] += g[i] * c;
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Affine maps
// ---------------------------------------------------------------------------

// y[n,o] = sum_i x[n,i] * w[o,i]   (no bias)
inline Tensor linear(Tensor x, Tensor w) {
  expect_rank(x, 2, "linear", "input");
  expect_rank(w, 2, "linear", "weight");
  if (x.dim(1) != w.dim(1))
    throw ShapeError("linear: input feature axis (1) = " + std::to_string(x.dim(1)) +
                     " does not match weight D_in = " + std::to_string(w.dim(1)));
  const std::int64_t N = x.dim(0), Din = x.dim(1), Dout = w.dim(0);
  Tensor y(Shape{N, Dout});
  for (std::int64_t n = 0; n < N; ++n) {
    const double* xr = x.data() + n * Din;
    double* yr = y.data() + n * Dout;
    for (std::int64_t o = 0; o < Dout; ++o) {
      const double* wr = w.data() + o * Din;
      double acc = 0.0;
      for (std::int64_t i = 0; i < Din; ++i) acc += xr[i] * wr[i];
      yr[o] = acc;
    }
  }
  detail::check_finite(y, "linear");
  if (detail::tracing({&x, &w})) {
    y.set_requires_grad(true);
    GradTape::active()->record([x, w, y, N, Din, Dout]() mutable {
      x.ensure_grad();
      w.ensure_grad();
      if (!y.has_grad()) return;
      const double* g = y.grad();
      double* xg = x.grad();
      double* wg = w.grad();
      for (std::int64_t n = 0; n < N; ++n) {
        const double* gr = g + n * Dout;
        const double* xr = x.data() + n * Din;
        double* xgr = xg + n * Din;
        for (std::int64_t o = 0; o < Dout; ++o) {
          const double go = gr[o];
          const double* wr = w.data() + o * Din;
          double* wgr = wg + o * Din;
          for (std::int64_t i = 0; i < Din; ++i) {
            xgr[i] += go * wr[i];
            wgr[i] += go * xr[i];
          }
        }
      }
    });
  }
  return y;
}

// y = x . w^T + b
inline Tensor fc(Tensor x, Tensor w, Tensor b) {
  expect_rank(b, 1, "fc", "bias");
  if (b.dim(0) != w.dim(0))
    throw ShapeError("fc: bias axis (0) = " + std::to_string(b.dim(0)) +
                     " does not match weight D_out = " + std::to_string(w.dim(0)));
  Tensor y = linear(x, w);
  const std::int64_t N = y.dim(0), Dout = y.dim(1);
  double* yp = y.data();
  const double* bp = b.data();
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t o = 0; o < Dout; ++o) yp[n * Dout + o] += bp[o];
  detail::check_finite(y, "fc");
  if (detail::tracing({&b})) {
    y.set_requires_grad(true);
    GradTape::active()->record([b, y, N, Dout]() mutable {
      b.ensure_grad();
      if (!y.has_grad()) return;
      const double* g = y.grad();
      double* bg = b.grad();
      for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t o = 0; o < Dout; ++o) bg[o] += g[n * Dout + o];
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Convolutions
// ---------------------------------------------------------------------------

// Cross-correlation of x[N,Cin,H,W] with w[Cout,Cin,kh,kw]; optional per-output
// channel bias. Output extents floor((H + 2 pad - kh) / stride) + 1.
inline Tensor conv2d(Tensor x, Tensor w, Tensor bias, int stride,
                     int pad) {
  expect_rank(x, 4, "conv2d", "input");
  expect_rank(w, 4, "conv2d", "kernel");
  if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
  if (pad < 0) throw ShapeError("conv2d: pad must be >= 0");
  const std::int64_t kh = w.dim(2), kw = w.dim(3);
  if (kh % 2 == 0 || kw % 2 == 0)
    throw ShapeError("conv2d: kernel extents must be odd, got " + shape_str(w.shape()));
  if (x.dim(1) != w.dim(1))
    throw ShapeError("conv2d: input channel axis (1) = " + std::to_string(x.dim(1)) +
                     " does not match kernel C_in = " + std::to_string(w.dim(1)));
  const std::int64_t N = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::int64_t Cout = w.dim(0);
  const std::int64_t Ho = (H + 2 * pad - kh) / stride + 1;
  const std::int64_t Wo = (W + 2 * pad - kw) / stride + 1;
  if (H + 2 * pad < kh || W + 2 * pad < kw)
    throw ShapeError("conv2d: kernel " + shape_str(w.shape()) +
                     " larger than padded input spatial axes (2,3) of " +
                     shape_str(x.shape()));
  if (bias.defined()) {
    expect_rank(bias, 1, "conv2d", "bias");
    if (bias.dim(0) != Cout)
      throw ShapeError("conv2d: bias axis (0) = " + std::to_string(bias.dim(0)) +
                       " does not match kernel C_out = " + std::to_string(Cout));
  }

  Tensor y(Shape{N, Cout, Ho, Wo});
  for (std::int64_t n = 0; n < N; ++n) {
    for (std::int64_t o = 0; o < Cout; ++o) {
      const double b0 = bias.defined() ? bias[o] : 0.0;
      for (std::int64_t i = 0; i < Ho; ++i) {
        for (std::int64_t j = 0; j < Wo; ++j) {
          double acc = b0;
          for (std::int64_t c = 0; c < Cin; ++c) {
            for (std::int64_t p = 0; p < kh; ++p) {
              const std::int64_t u = i * stride - pad + p;
              if (u < 0 || u >= H) continue;
              const double* xr = x.data() + ((n * Cin + c) * H + u) * W;
              const double* wr = w.data() + ((o * Cin + c) * kh + p) * kw;
              for (std::int64_t q = 0; q < kw; ++q) {
                const std::int64_t v = j * stride - pad + q;
                if (v < 0 || v >= W) continue;
                acc += xr[v] * wr[q];
              }
            }
          }
          y.at(n, o, i, j) = acc;
        }
      }
    }
  }
  detail::check_finite(y, "conv2d");
  if (detail::tracing({&x, &w, &bias})) {
    y.set_requires_grad(true);
    GradTape::active()->record([x, w, bias, y, stride, pad]() mutable {
      x.ensure_grad();
      w.ensure_grad();
      if (bias.defined()) bias.ensure_grad();
      if (!y.has_grad()) return;
      const std::int64_t N = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
      const std::int64_t Cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
      const std::int64_t Ho = y.dim(2), Wo = y.dim(3);
      const double* g = y.grad();
      double* xg = x.grad();
      double* wg = w.grad();
      for (std::int64_t n = 0; n < N; ++n) {
        for (std::int64_t o = 0; o < Cout; ++o) {
          for (std::int64_t i = 0; i < Ho; ++i) {
            for (std::int64_t j = 0; j < Wo; ++j) {
              const double go = g[((n * Cout + o) * Ho + i) * Wo + j];
              if (bias.defined()) bias.grad()[o] += go;
              for (std::int64_t c = 0; c < Cin; ++c) {
                for (std::int64_t p = 0; p < kh; ++p) {
                  const std::int64_t u = i * stride - pad + p;
                  if (u < 0 || u >= H) continue;
                  const double* xr = x.data() + ((n * Cin + c) * H + u) * W;
                  double* xgr = xg + ((n * Cin + c) * H + u) * W;
                  const double* wr = w.data() + ((o * Cin + c) * kh + p) * kw;
                  double* wgr = wg + ((o * Cin + c) * kh + p) * kw;
                  for (std::int64_t q = 0; q < kw; ++q) {
                    const std::int64_t v = j * stride - pad + q;
                    if (v < 0 || v >= W) continue;
                    xgr[v] += go * wr[q];
                    wgr[q] += go * xr[v];
                  }
                }
              }
            }
          }
        }
      }
    });
  }
  return y;
}

inline Tensor conv2d(Tensor x, Tensor w, int stride, int pad) {
  return conv2d(x, w, Tensor(), stride, pad);
}

// 1-D convolution over the channel axis of x[N,C] with one shared kernel
// w[k] and zero padding: y[n,c] = sum_j w[j] * x[n, c + j - pad].
inline Tensor conv1d(Tensor x, Tensor w, int pad) {
  expect_rank(x, 2, "conv1d", "input");
  expect_rank(w, 1, "conv1d", "kernel");
  if (pad < 0) throw ShapeError("conv1d: pad must be >= 0");
  const std::int64_t N = x.dim(0), C = x.dim(1), k = w.dim(0);
  if (k > C + 2 * pad)
    throw ShapeError("conv1d: kernel length " + std::to_string(k) +
                     " exceeds padded channel axis (1) extent " +
                     std::to_string(C + 2 * pad));
  const std::int64_t Co = C + 2 * pad - k + 1;
  Tensor y(Shape{N, Co});
  for (std::int64_t n = 0; n < N; ++n) {
    const double* xr = x.data() + n * C;
    double* yr = y.data() + n * Co;
    for (std::int64_t c = 0; c < Co; ++c) {
      double acc = 0.0;
      for (std::int64_t j = 0; j < k; ++j) {
        const std::int64_t t = c + j - pad;
        if (t < 0 || t >= C) continue;
        acc += w[j] * xr[t];
      }
      yr[c] = acc;
    }
  }
  detail::check_finite(y, "conv1d");
  if (detail::tracing({&x, &w})) {
    y.set_requires_grad(true);
    GradTape::active()->record([x, w, y, pad]() mutable {
      x.ensure_grad();
      w.ensure_grad();
      if (!y.has_grad()) return;
      const std::int64_t N = x.dim(0), C = x.dim(1), k = w.dim(0), Co = y.dim(1);
      const double* g = y.grad();
      double* xg = x.grad();
      double* wg = w.grad();
      for (std::int64_t n = 0; n < N; ++n) {
        const double* xr = x.data() + n * C;
        const double* gr = g + n * Co;
        double* xgr = xg + n * C;
        for (std::int64_t c = 0; c < Co; ++c) {
          for (std::int64_t j = 0; j < k; ++j) {
            const std::int64_t t = c + j - pad;
            if (t < 0 || t >= C) continue;
            xgr[t] += gr[c] * w[j];
            wg[j] += gr[c] * xr[t];
          }
        }
      }
    });
  }
  return y;
}

// "Same" mode: odd kernel, pad (k-1)/2, output width equals input width.
inline Tensor conv1d_same(Tensor x, Tensor w) {
  if (w.dim(0) % 2 == 0)
    throw ShapeError("conv1d: same mode requires an odd kernel, got length " +
                     std::to_string(w.dim(0)));
  return conv1d(x, w, static_cast<int>((w.dim(0) - 1) / 2));
}

// ---------------------------------------------------------------------------
// Pooling and per-channel statistics
// ---------------------------------------------------------------------------

// Per-channel spatial mean of x[N,C,H,W] -> [N,C].
inline Tensor gap2d(Tensor x) {
  expect_rank(x, 4, "gap2d", "input");
  const std::int64_t N = x.dim(0), C = x.dim(1), M = x.dim(2) * x.dim(3);
  Tensor y(Shape{N, C});
  for (std::int64_t n = 0; n < N; ++n) {
    for (std::int64_t c = 0; c < C; ++c) {
      const double* xr = x.data() + (n * C + c) * M;
      double acc = 0.0;
      for (std::int64_t m = 0; m < M; ++m) acc += xr[m];
      y.at(n, c) = acc / static_cast<double>(M);
    }
  }
  detail::check_finite(y, "gap2d");
  if (detail::tracing({&x})) {
    y.set_requires_grad(true);
    GradTape::active()->record([x, y, N, C, M]() mutable {
      x.ensure_grad();
      if (!y.has_grad()) return;
      const double* g = y.grad();
      double* xg = x.grad();
      const double inv = 1.0 / static_cast<double>(M);
      for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t c = 0; c < C; ++c) {
          const double gv = g[n * C + c] * inv;
          double* xgr = xg + (n * C + c) * M;
          for (std::int64_t m = 0; m < M; ++m) xgr[m] += gv;
        }
    });
  }
  return y;
}

inline constexpr double kStdEps = 1e-8;

// Per-channel population standard deviation, sqrt(var + 1e-8). The epsilon
// keeps the gradient defined at zero variance.
inline Tensor std2d(Tensor x) {
  expect_rank(x, 4, "std2d", "input");
  const std::int64_t N = x.dim(0), C = x.dim(1), M = x.dim(2) * x.dim(3);
  Tensor y(Shape{N, C});
  Tensor mean(Shape{N, C});
  for (std::int64_t n = 0; n < N; ++n) {
    for (std::int64_t c = 0; c < C; ++c) {
      const double* xr = x.data() + (n * C + c) * M;
      double mu = 0.0;
      for (std::int64_t m = 0; m < M; ++m) mu += xr[m];
      mu /= static_cast<double>(M);
      double var = 0.0;
      for (std::int64_t m = 0; m < M; ++m) {
        const double d = xr[m] - mu;
        var += d * d;
      }
      var /= static_cast<double>(M);
      mean.at(n, c) = mu;
      y.at(n, c) = std::sqrt(var + kStdEps);
    }
  }
  detail::check_finite(y, "std2d");
  if (detail::tracing({&x})) {
    y.set_requires_grad(true);
    GradTape::active()->record([x, y, mean, N, C, M]() mutable {
      x.ensure_grad();
      if (!y.has_grad()) return;
      const double* g = y.grad();
      double* xg = x.grad();
      for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t c = 0; c < C; ++c) {
          const double s = y.at(n, c);
          const double mu = mean.at(n, c);
          const double k = g[n * C + c] / (static_cast<double>(M) * s);
          const double* xr = x.data() + (n * C + c) * M;
          double* xgr = xg + (n * C + c) * M;
          for (std::int64_t m = 0; m < M; ++m) xgr[m] += k * (xr[m] - mu);
        }
    });
  }
  return y;
}

inline Tensor maxpool2d(Tensor x, int k, int stride, int pad) {
  expect_rank(x, 4, "maxpool2d", "input");
  const std::int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::int64_t Ho = (H + 2 * pad - k) / stride + 1;
  const std::int64_t Wo = (W + 2 * pad - k) / stride + 1;
  if (Ho < 1 || Wo < 1)
    throw ShapeError("maxpool2d: window exceeds spatial axes (2,3) of " +
                     shape_str(x.shape()));
  Tensor y(Shape{N, C, Ho, Wo});
  auto argmax = std::make_shared<std::vector<std::int64_t>>(
      static_cast<std::size_t>(y.numel()));
  std::int64_t idx = 0;
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t c = 0; c < C; ++c)
      for (std::int64_t i = 0; i < Ho; ++i)
        for (std::int64_t j = 0; j < Wo; ++j, ++idx) {
          double best = -std::numeric_limits<double>::infinity();
          std::int64_t bi = -1;
          for (int p = 0; p < k; ++p) {
            const std::int64_t u = i * stride - pad + p;
            if (u < 0 || u >= H) continue;
            for (int q = 0; q < k; ++q) {
              const std::int64_t v = j * stride - pad + q;
              if (v < 0 || v >= W) continue;
              const std::int64_t f = ((n * C + c) * H + u) * W + v;
              if (x[f] > best) {
                best = x[f];
                bi = f;
              }
            }
          }
          y[idx] = best;
          (*argmax)[static_cast<std::size_t>(idx)] = bi;
        }
  detail::check_finite(y, "maxpool2d");
  if (detail::tracing({&x})) {
    y.set_requires_grad(true);
    GradTape::active()->record([x, y, argmax]() mutable {
      x.ensure_grad();
      if (!y.has_grad()) return;
      const double* g = y.grad();
      double* xg = x.grad();
      for (std::int64_t i = 0; i < y.numel(); ++i)
        xg[(*argmax)[static_cast<std::size_t>(i)]] += g[i];
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Reshaping and joining
// ---------------------------------------------------------------------------

inline Tensor reshape(Tensor x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw ShapeError("reshape: " + shape_str(x.shape()) + " cannot be viewed as " +
                     shape_str(shape));
  Tensor y(std::move(shape), x.values());
  if (detail::tracing({&x})) {
    y.set_requires_grad(true);
    GradTape::active()->record([x, y]() mutable {
      x.ensure_grad();
      if (!y.has_grad()) return;
      const double* g = y.grad();
      double* xg = x.grad();
      for (std::int64_t i = 0; i < x.numel(); ++i) xg[i] += g[i];
    });
  }
  return y;
}

// [N,A] ++ [N,B] -> [N,A+B]
inline Tensor concat_cols(Tensor a, Tensor b) {
  expect_rank(a, 2, "concat_cols", "lhs");
  expect_rank(b, 2, "concat_cols", "rhs");
  if (a.dim(0) != b.dim(0))
    throw ShapeError("concat_cols: batch axis (0) mismatch, " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  const std::int64_t N = a.dim(0), A = a.dim(1), B = b.dim(1);
  Tensor y(Shape{N, A + B});
  for (std::int64_t n = 0; n < N; ++n) {
    std::memcpy(y.data() + n * (A + B), a.data() + n * A, sizeof(double) * A);
    std::memcpy(y.data() + n * (A + B) + A, b.data() + n * B, sizeof(double) * B);
  }
  if (detail::tracing({&a, &b})) {
    y.set_requires_grad(true);
    GradTape::active()->record([a, b, y, N, A, B]() mutable {
      a.ensure_grad();
      b.ensure_grad();
      if (!y.has_grad()) return;
      const double* g = y.grad();
      double* ag = a.grad();
      double* bg = b.grad();
      for (std::int64_t n = 0; n < N; ++n) {
        for (std::int64_t i = 0; i < A; ++i) ag[n * A + i] += g[n * (A + B) + i];
        for (std::int64_t i = 0; i < B; ++i) bg[n * B + i] += g[n * (A + B) + A + i];
      }
    });
  }
  return y;
}

// Stack K row tensors [N,C] into [N,K,C]; row order is preserved.
inline Tensor stack_rows(std::vector<Tensor> rows) {
  if (rows.empty()) throw ContractError("stack_rows: empty row list");
  const std::int64_t N = rows[0].dim(0), C = rows[0].dim(1);
  const std::int64_t K = static_cast<std::int64_t>(rows.size());
  for (const auto& r : rows) {
    expect_rank(r, 2, "stack_rows", "row");
    expect_same_shape(r, rows[0], "stack_rows");
  }
  Tensor y(Shape{N, K, C});
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t k = 0; k < K; ++k)
      std::memcpy(y.data() + (n * K + k) * C, rows[static_cast<std::size_t>(k)].data() + n * C,
                  sizeof(double) * C);
  bool trace = false;
  for (const auto& r : rows) trace = trace || detail::tracing({&r});
  if (trace) {
    y.set_requires_grad(true);
    GradTape::active()->record([rows, y, N, K, C]() mutable {
      for (auto& r : rows) r.ensure_grad();
      if (!y.has_grad()) return;
      const double* g = y.grad();
      for (std::int64_t k = 0; k < K; ++k) {
        double* rg = rows[static_cast<std::size_t>(k)].grad();
        for (std::int64_t n = 0; n < N; ++n)
          for (std::int64_t c = 0; c < C; ++c) rg[n * C + c] += g[(n * K + k) * C + c];
      }
    });
  }
  return y;
}

// Leading n entries of a 1-D tensor; gradients flow to the kept prefix.
inline Tensor prefix(Tensor x, std::int64_t n) {
  expect_rank(x, 1, "prefix", "input");
  if (n < 1 || n > x.dim(0))
    throw ShapeError("prefix: cannot take " + std::to_string(n) + " of " +
                     std::to_string(x.dim(0)) + " entries");
  Tensor y(Shape{n}, std::vector<double>(x.data(), x.data() + n));
  if (detail::tracing({&x})) {
    y.set_requires_grad(true);
    GradTape::active()->record([x, y, n]() mutable {
      x.ensure_grad();
      if (!y.has_grad()) return;
      for (std::int64_t i = 0; i < n; ++i) x.grad()[i] += y.grad()[i];
    });
  }
  return y;
}

// Leading n columns of a 2-D tensor.
inline Tensor prefix_cols(Tensor x, std::int64_t n) {
  expect_rank(x, 2, "prefix_cols", "input");
  if (n < 1 || n > x.dim(1))
    throw ShapeError("prefix_cols: cannot take " + std::to_string(n) + " of " +
                     std::to_string(x.dim(1)) + " columns");
  const std::int64_t R = x.dim(0), C = x.dim(1);
  Tensor y(Shape{R, n});
  for (std::int64_t r = 0; r < R; ++r)
    std::memcpy(y.data() + r * n, x.data() + r * C, sizeof(double) * static_cast<std::size_t>(n));
  if (detail::tracing({&x})) {
    y.set_requires_grad(true);
    GradTape::active()->record([x, y, R, C, n]() mutable {
      x.ensure_grad();
      if (!y.has_grad()) return;
      const double* g = y.grad();
      double* xg = x.grad();
      for (std::int64_t r = 0; r < R; ++r)
        for (std::int64_t i = 0; i < n; ++i) xg[r * C + i] += g[r * n + i];
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Channel broadcasts
// ---------------------------------------------------------------------------

// y[n,c,h,w] = x[n,c,h,w] * s[n,c]
inline Tensor scale_channels(Tensor x, Tensor s) {
  expect_rank(x, 4, "scale_channels", "input");
  expect_rank(s, 2, "scale_channels", "scales");
  if (x.dim(0) != s.dim(0) || x.dim(1) != s.dim(1))
    throw ShapeError("scale_channels: axes (0,1) of " + shape_str(x.shape()) +
                     " do not match scales " + shape_str(s.shape()));
  const std::int64_t N = x.dim(0), C = x.dim(1), M = x.dim(2) * x.dim(3);
  Tensor y(x.shape());
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t c = 0; c < C; ++c) {
      const double sv = s.at(n, c);
      const double* xr = x.data() + (n * C + c) * M;
      double* yr = y.data() + (n * C + c) * M;
      for (std::int64_t m = 0; m < M; ++m) yr[m] = xr[m] * sv;
    }
  detail::check_finite(y, "scale_channels");
  if (detail::tracing({&x, &s})) {
    y.set_requires_grad(true);
    GradTape::active()->record([x, s, y, N, C, M]() mutable {
      x.ensure_grad();
      s.ensure_grad();
      if (!y.has_grad()) return;
      const double* g = y.grad();
      double* xg = x.grad();
      double* sg = s.grad();
      for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t c = 0; c < C; ++c) {
          const double sv = s.at(n, c);
          const double* gr = g + (n * C + c) * M;
          const double* xr = x.data() + (n * C + c) * M;
          double* xgr = xg + (n * C + c) * M;
          double acc = 0.0;
          for (std::int64_t m = 0; m < M; ++m) {
            xgr[m] += gr[m] * sv;
            acc += gr[m] * xr[m];
          }
          sg[n * C + c] += acc;
        }
    });
  }
  return y;
}

// y[n,c,h,w] = x[n,c,h,w] + z[n,c]   (GC additive fusion)
inline Tensor add_channels(Tensor x, Tensor z) {
  expect_rank(x, 4, "add_channels", "input");
  expect_rank(z, 2, "add_channels", "addend");
  if (x.dim(0) != z.dim(0) || x.dim(1) != z.dim(1))
    throw ShapeError("add_channels: axes (0,1) of " + shape_str(x.shape()) +
                     " do not match addend " + shape_str(z.shape()));
  const std::int64_t N = x.dim(0), C = x.dim(1), M = x.dim(2) * x.dim(3);
  Tensor y(x.shape());
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t c = 0; c < C; ++c) {
      const double zv = z.at(n, c);
      const double* xr = x.data() + (n * C + c) * M;
      double* yr = y.data() + (n * C + c) * M;
      for (std::int64_t m = 0; m < M; ++m) yr[m] = xr[m] + zv;
    }
  detail::check_finite(y, "add_channels");
  if (detail::tracing({&x, &z})) {
    y.set_requires_grad(true);
    GradTape::active()->record([x, z, y, N, C, M]() mutable {
      x.ensure_grad();
      z.ensure_grad();
      if (!y.has_grad()) return;
      const double* g = y.grad();
      double* xg = x.grad();
      double* zg = z.grad();
      for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t c = 0; c < C; ++c) {
          const double* gr = g + (n * C + c) * M;
          double* xgr = xg + (n * C + c) * M;
          double acc = 0.0;
          for (std::int64_t m = 0; m < M; ++m) {
            xgr[m] += gr[m];
            acc += gr[m];
          }
          zg[n * C + c] += acc;
        }
    });
  }
  return y;
}

// y[n,c] = x[n,c] * v[c]   (per-channel weight shared over the batch)
inline Tensor mul_rowvec(Tensor x, Tensor v) {
  expect_rank(x, 2, "mul_rowvec", "input");
  expect_rank(v, 1, "mul_rowvec", "weight");
  if (x.dim(1) != v.dim(0))
    throw ShapeError("mul_rowvec: channel axis (1) = " + std::to_string(x.dim(1)) +
                     " does not match weight length " + std::to_string(v.dim(0)));
  const std::int64_t N = x.dim(0), C = x.dim(1);
  Tensor y(x.shape());
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t c = 0; c < C; ++c) y.at(n, c) = x.at(n, c) * v[c];
  detail::check_finite(y, "mul_rowvec");
  if (detail::tracing({&x, &v})) {
    y.set_requires_grad(true);
    GradTape::active()->record([x, v, y, N, C]() mutable {
      x.ensure_grad();
      v.ensure_grad();
      if (!y.has_grad()) return;
      const double* g = y.grad();
      double* xg = x.grad();
      double* vg = v.grad();
      for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t c = 0; c < C; ++c) {
          xg[n * C + c] += g[n * C + c] * v[c];
          vg[c] += g[n * C + c] * x.at(n, c);
        }
    });
  }
  return y;
}

// SRM style integration: z[n,c] = mean[n,c]*w[c,0] + std[n,c]*w[c,1].
inline Tensor style_integrate(Tensor mean, Tensor stdev, Tensor w) {
  expect_rank(mean, 2, "style_integrate", "mean");
  expect_rank(stdev, 2, "style_integrate", "std");
  expect_same_shape(mean, stdev, "style_integrate");
  expect_rank(w, 2, "style_integrate", "weight");
  if (w.dim(0) != mean.dim(1) || w.dim(1) != 2)
    throw ShapeError("style_integrate: weight must be [C,2] with C = " +
                     std::to_string(mean.dim(1)) + ", got " + shape_str(w.shape()));
  const std::int64_t N = mean.dim(0), C = mean.dim(1);
  Tensor y(Shape{N, C});
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t c = 0; c < C; ++c)
      y.at(n, c) = mean.at(n, c) * w.at(c, 0) + stdev.at(n, c) * w.at(c, 1);
  detail::check_finite(y, "style_integrate");
  if (detail::tracing({&mean, &stdev, &w})) {
    y.set_requires_grad(true);
    GradTape::active()->record([mean, stdev, w, y, N, C]() mutable {
      mean.ensure_grad();
      stdev.ensure_grad();
      w.ensure_grad();
      if (!y.has_grad()) return;
      const double* g = y.grad();
      for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t c = 0; c < C; ++c) {
          const double gv = g[n * C + c];
          mean.grad()[n * C + c] += gv * w.at(c, 0);
          stdev.grad()[n * C + c] += gv * w.at(c, 1);
          w.grad()[c * 2 + 0] += gv * mean.at(n, c);
          w.grad()[c * 2 + 1] += gv * stdev.at(n, c);
        }
    });
  }
  return y;
}

// Norm-lite: y[n,c,h,w] = x[n,c,h,w] * gamma[c] + beta[c].
inline Tensor channel_affine(Tensor x, Tensor gamma, Tensor beta) {
  expect_rank(x, 4, "channel_affine", "input");
  expect_rank(gamma, 1, "channel_affine", "gamma");
  expect_rank(beta, 1, "channel_affine", "beta");
  if (gamma.dim(0) != x.dim(1) || beta.dim(0) != x.dim(1))
    throw ShapeError("channel_affine: channel axis (1) = " + std::to_string(x.dim(1)) +
                     " does not match gamma/beta lengths");
  const std::int64_t N = x.dim(0), C = x.dim(1), M = x.dim(2) * x.dim(3);
  Tensor y(x.shape());
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t c = 0; c < C; ++c) {
      const double gm = gamma[c], bt = beta[c];
      const double* xr = x.data() + (n * C + c) * M;
      double* yr = y.data() + (n * C + c) * M;
      for (std::int64_t m = 0; m < M; ++m) yr[m] = xr[m] * gm + bt;
    }
  detail::check_finite(y, "channel_affine");
  if (detail::tracing({&x, &gamma, &beta})) {
    y.set_requires_grad(true);
    GradTape::active()->record([x, gamma, beta, y, N, C, M]() mutable {
      x.ensure_grad();
      gamma.ensure_grad();
      beta.ensure_grad();
      if (!y.has_grad()) return;
      const double* g = y.grad();
      double* xg = x.grad();
      for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t c = 0; c < C; ++c) {
          const double gm = gamma[c];
          const double* gr = g + (n * C + c) * M;
          const double* xr = x.data() + (n * C + c) * M;
          double* xgr = xg + (n * C + c) * M;
          double dg = 0.0, db = 0.0;
          for (std::int64_t m = 0; m < M; ++m) {
            xgr[m] += gr[m] * gm;
            dg += gr[m] * xr[m];
            db += gr[m];
          }
          gamma.grad()[c] += dg;
          beta.grad()[c] += db;
        }
    });
  }
  return y;
}

// Attention-weighted spatial sum: y[n,c] = sum_hw attn[n,hw] * x[n,c,h,w].
inline Tensor spatial_attend(Tensor x, Tensor attn) {
  expect_rank(x, 4, "spatial_attend", "input");
  expect_rank(attn, 2, "spatial_attend", "attention");
  const std::int64_t N = x.dim(0), C = x.dim(1), M = x.dim(2) * x.dim(3);
  if (attn.dim(0) != N || attn.dim(1) != M)
    throw ShapeError("spatial_attend: attention " + shape_str(attn.shape()) +
                     " does not match flattened spatial axes (2,3) of " +
                     shape_str(x.shape()));
  Tensor y(Shape{N, C});
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t c = 0; c < C; ++c) {
      const double* xr = x.data() + (n * C + c) * M;
      const double* ar = attn.data() + n * M;
      double acc = 0.0;
      for (std::int64_t m = 0; m < M; ++m) acc += ar[m] * xr[m];
      y.at(n, c) = acc;
    }
  detail::check_finite(y, "spatial_attend");
  if (detail::tracing({&x, &attn})) {
    y.set_requires_grad(true);
    GradTape::active()->record([x, attn, y, N, C, M]() mutable {
      x.ensure_grad();
      attn.ensure_grad();
      if (!y.has_grad()) return;
      const double* g = y.grad();
      double* xg = x.grad();
      double* ag = attn.grad();
      for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t c = 0; c < C; ++c) {
          const double gv = g[n * C + c];
          const double* xr = x.data() + (n * C + c) * M;
          const double* ar = attn.data() + n * M;
          double* xgr = xg + (n * C + c) * M;
          for (std::int64_t m = 0; m < M; ++m) {
            xgr[m] += gv * ar[m];
            ag[n * M + m] += gv * xr[m];
          }
        }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Stack interactions (previous-knowledge aggregation primitives)
// ---------------------------------------------------------------------------

// y[n,c] = sum_k stack[n,k,c]; no parameters.
inline Tensor interact_sum(Tensor stack) {
  expect_rank(stack, 3, "interact_sum", "stack");
  const std::int64_t N = stack.dim(0), K = stack.dim(1), C = stack.dim(2);
  Tensor y(Shape{N, C});
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t c = 0; c < C; ++c) {
      double acc = 0.0;
      for (std::int64_t k = 0; k < K; ++k) acc += stack[(n * K + k) * C + c];
      y.at(n, c) = acc;
    }
  detail::check_finite(y, "interact_sum");
  if (detail::tracing({&stack})) {
    y.set_requires_grad(true);
    GradTape::active()->record([stack, y, N, K, C]() mutable {
      stack.ensure_grad();
      if (!y.has_grad()) return;
      const double* g = y.grad();
      double* sg = stack.grad();
      for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t k = 0; k < K; ++k)
          for (std::int64_t c = 0; c < C; ++c) sg[(n * K + k) * C + c] += g[n * C + c];
    });
  }
  return y;
}

// y[n,c] = sum_k w[k] * stack[n,k,c]; one shared kernel across channels.
inline Tensor interact_kernel(Tensor stack, Tensor w) {
  expect_rank(stack, 3, "interact_kernel", "stack");
  expect_rank(w, 1, "interact_kernel", "kernel");
  const std::int64_t N = stack.dim(0), K = stack.dim(1), C = stack.dim(2);
  if (w.dim(0) != K)
    throw ContractError("interact_kernel: kernel length " + std::to_string(w.dim(0)) +
                        " does not match stack rows " + std::to_string(K));
  Tensor y(Shape{N, C});
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t c = 0; c < C; ++c) {
      double acc = 0.0;
      for (std::int64_t k = 0; k < K; ++k) acc += w[k] * stack[(n * K + k) * C + c];
      y.at(n, c) = acc;
    }
  detail::check_finite(y, "interact_kernel");
  if (detail::tracing({&stack, &w})) {
    y.set_requires_grad(true);
    GradTape::active()->record([stack, w, y, N, K, C]() mutable {
      stack.ensure_grad();
      w.ensure_grad();
      if (!y.has_grad()) return;
      const double* g = y.grad();
      double* sg = stack.grad();
      double* wg = w.grad();
      for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t k = 0; k < K; ++k)
          for (std::int64_t c = 0; c < C; ++c) {
            const double gv = g[n * C + c];
            sg[(n * K + k) * C + c] += gv * w[k];
            wg[k] += gv * stack[(n * K + k) * C + c];
          }
    });
  }
  return y;
}

// y[n,c] = sum_k w[c,k] * stack[n,k,c]; independent weights per channel/row.
inline Tensor interact_depthwise(Tensor stack, Tensor w) {
  expect_rank(stack, 3, "interact_depthwise", "stack");
  expect_rank(w, 2, "interact_depthwise", "weight");
  const std::int64_t N = stack.dim(0), K = stack.dim(1), C = stack.dim(2);
  if (w.dim(0) != C || w.dim(1) != K)
    throw ContractError("interact_depthwise: weight " + shape_str(w.shape()) +
                        " does not match stack [C,K] = [" + std::to_string(C) + "," +
                        std::to_string(K) + "]");
  Tensor y(Shape{N, C});
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t c = 0; c < C; ++c) {
      double acc = 0.0;
      for (std::int64_t k = 0; k < K; ++k)
        acc += w.at(c, k) * stack[(n * K + k) * C + c];
      y.at(n, c) = acc;
    }
  detail::check_finite(y, "interact_depthwise");
  if (detail::tracing({&stack, &w})) {
    y.set_requires_grad(true);
    GradTape::active()->record([stack, w, y, N, K, C]() mutable {
      stack.ensure_grad();
      w.ensure_grad();
      if (!y.has_grad()) return;
      const double* g = y.grad();
      double* sg = stack.grad();
      double* wg = w.grad();
      for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t c = 0; c < C; ++c) {
          const double gv = g[n * C + c];
          for (std::int64_t k = 0; k < K; ++k) {
            sg[(n * K + k) * C + c] += gv * w.at(c, k);
            wg[c * K + k] += gv * stack[(n * K + k) * C + c];
          }
        }
    });
  }
  return y;
}

// y[n,c] = w[0]*a[n,c] + w[1]*b[n,c]; the two scalars are shared across
// channels (1-D convolution of kernel size two over the pair).
inline Tensor fuse_pair(Tensor a, Tensor b, Tensor w) {
  expect_rank(a, 2, "fuse_pair", "lhs");
  expect_same_shape(a, b, "fuse_pair");
  expect_rank(w, 1, "fuse_pair", "weights");
  if (w.dim(0) != 2)
    throw ContractError("fuse_pair: expected exactly 2 weights, got " +
                        std::to_string(w.dim(0)));
  Tensor y(a.shape());
  const double w0 = w[0], w1 = w[1];
  for (std::int64_t i = 0; i < a.numel(); ++i) y[i] = w0 * a[i] + w1 * b[i];
  detail::check_finite(y, "fuse_pair");
  if (detail::tracing({&a, &b, &w})) {
    y.set_requires_grad(true);
    GradTape::active()->record([a, b, w, y]() mutable {
      a.ensure_grad();
      b.ensure_grad();
      w.ensure_grad();
      if (!y.has_grad()) return;
      const double* g = y.grad();
      double* ag = a.grad();
      double* bg = b.grad();
      double* wg = w.grad();
      const double w0 = w[0], w1 = w[1];
      for (std::int64_t i = 0; i < a.numel(); ++i) {
        ag[i] += g[i] * w0;
        bg[i] += g[i] * w1;
        wg[0] += g[i] * a[i];
        wg[1] += g[i] * b[i];
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Reductions and loss
// ---------------------------------------------------------------------------

inline Tensor sum_all(Tensor x) {
  Tensor y(Shape{1});
  double acc = 0.0;
  for (std::int64_t i = 0; i < x.numel(); ++i) acc += x[i];
  y[0] = acc;
  detail::check_finite(y, "sum_all");
  if (detail::tracing({&x})) {
    y.set_requires_grad(true);
    GradTape::active()->record([x, y]() mutable {
      x.ensure_grad();
      if (!y.has_grad()) return;
      const double g = y.grad()[0];
      double* xg = x.grad();
      for (std::int64_t i = 0; i < x.numel(); ++i) xg[i] += g;
    });
  }
  return y;
}

inline Tensor mean_all(Tensor x) {
  Tensor y = sum_all(x);
  return scale(y, 1.0 / static_cast<double>(x.numel()));
}

// Mean cross-entropy of logits[N,K] against integer labels.
inline Tensor cross_entropy(Tensor logits, const std::vector<int>& labels) {
  expect_rank(logits, 2, "cross_entropy", "logits");
  const std::int64_t N = logits.dim(0), K = logits.dim(1);
  if (static_cast<std::int64_t>(labels.size()) != N)
    throw ShapeError("cross_entropy: batch axis (0) = " + std::to_string(N) +
                     " does not match " + std::to_string(labels.size()) + " labels");
  for (int l : labels)
    if (l < 0 || l >= K)
      throw ContractError("cross_entropy: label " + std::to_string(l) +
                          " out of range for " + std::to_string(K) + " classes");
  Tensor probs(Shape{N, K});
  Tensor y(Shape{1});
  double total = 0.0;
  for (std::int64_t n = 0; n < N; ++n) {
    const double* zr = logits.data() + n * K;
    double mx = zr[0];
    for (std::int64_t k = 1; k < K; ++k) mx = std::max(mx, zr[k]);
    double z = 0.0;
    for (std::int64_t k = 0; k < K; ++k) z += std::exp(zr[k] - mx);
    const double lse = mx + std::log(z);
    for (std::int64_t k = 0; k < K; ++k) probs.at(n, k) = std::exp(zr[k] - lse);
    total += lse - zr[labels[static_cast<std::size_t>(n)]];
  }
  y[0] = total / static_cast<double>(N);
  detail::check_finite(y, "cross_entropy");
  if (detail::tracing({&logits})) {
    y.set_requires_grad(true);
    GradTape::active()->record([logits, probs, labels, y, N, K]() mutable {
      logits.ensure_grad();
      if (!y.has_grad()) return;
      const double g = y.grad()[0] / static_cast<double>(N);
      double* zg = logits.grad();
      for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t k = 0; k < K; ++k) {
          double d = probs.at(n, k);
          if (k == labels[static_cast<std::size_t>(n)]) d -= 1.0;
          zg[n * K + k] += g * d;
        }
    });
  }
  return y;
}

}  // namespace ops
}  // namespace pkcam
