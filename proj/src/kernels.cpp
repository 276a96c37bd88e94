// SPDX-License-Identifier: Apache-2.0
#include "finsent/kernels.hpp"

#include <cmath>
#include <cstddef>
#include <limits>
#include <vector>

namespace finsent::kernels {

namespace {

using Index = std::ptrdiff_t;

// Below this many multiply-adds a parallel region costs more than it saves.
constexpr std::size_t kParallelWork = 1 << 14;

constexpr double kLayerNormEps = 1e-5;
constexpr double kGeluScale = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluCubic = 0.044715;

template <class T>
T gelu_value(T x) {
  const T inner = static_cast<T>(kGeluScale) * (x + static_cast<T>(kGeluCubic) * x * x * x);
  return static_cast<T>(0.5) * x * (T{1} + std::tanh(inner));
}

template <class T>
T gelu_derivative(T x) {
  const T inner = static_cast<T>(kGeluScale) * (x + static_cast<T>(kGeluCubic) * x * x * x);
  const T th = std::tanh(inner);
  const T dinner = static_cast<T>(kGeluScale) * (T{1} + static_cast<T>(3 * kGeluCubic) * x * x);
  return static_cast<T>(0.5) * (T{1} + th) + static_cast<T>(0.5) * x * (T{1} - th * th) * dinner;
}

}  // namespace

template <class T>
void matmul(std::span<const T> a, std::span<const T> b, std::span<const T> bias, std::span<T> c, std::size_t m,
            std::size_t k, std::size_t n) {
  const bool has_bias = !bias.empty();
#pragma omp parallel for schedule(static) if (m * k * n > kParallelWork)
  for (Index i = 0; i < static_cast<Index>(m); ++i) {
    T* ci = c.data() + i * n;
    for (std::size_t j = 0; j < n; ++j) ci[j] = has_bias ? bias[j] : T{0};
    const T* ai = a.data() + i * k;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const T aik = ai[kk];
      const T* bk = b.data() + kk * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aik * bk[j];
    }
  }
}

template <class T>
void matmul_backward_input(std::span<const T> dc, std::span<const T> b, std::span<T> da, std::size_t m,
                           std::size_t k, std::size_t n) {
#pragma omp parallel for schedule(static) if (m * k * n > kParallelWork)
  for (Index i = 0; i < static_cast<Index>(m); ++i) {
    const T* dci = dc.data() + i * n;
    T* dai = da.data() + i * k;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const T* bk = b.data() + kk * n;
      T s{0};
      for (std::size_t j = 0; j < n; ++j) s += dci[j] * bk[j];
      dai[kk] += s;
    }
  }
}

template <class T>
void matmul_backward_weight(std::span<const T> a, std::span<const T> dc, std::span<T> db, std::span<T> dbias,
                            std::size_t m, std::size_t k, std::size_t n) {
  const bool parallel = m * k * n > kParallelWork;
#pragma omp parallel for schedule(static) if (parallel)
  for (Index kk = 0; kk < static_cast<Index>(k); ++kk) {
    T* dbk = db.data() + kk * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T aik = a[i * k + kk];
      const T* dci = dc.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) dbk[j] += aik * dci[j];
    }
  }
  if (dbias.empty()) return;
#pragma omp parallel for schedule(static) if (parallel)
  for (Index j = 0; j < static_cast<Index>(n); ++j) {
    for (std::size_t i = 0; i < m; ++i) dbias[j] += dc[i * n + j];
  }
}

template <class T>
void layernorm_forward(std::span<const T> x, std::span<const T> gain, std::span<const T> offset, std::span<T> y,
                       std::span<T> mean, std::span<T> rstd, std::size_t rows, std::size_t d) {
#pragma omp parallel for schedule(static) if (rows * d > kParallelWork)
  for (Index r = 0; r < static_cast<Index>(rows); ++r) {
    const T* xr = x.data() + r * d;
    T sum{0};
    for (std::size_t j = 0; j < d; ++j) sum += xr[j];
    const T mu = sum / static_cast<T>(d);
    T sq{0};
    for (std::size_t j = 0; j < d; ++j) sq += (xr[j] - mu) * (xr[j] - mu);
    const T rs = T{1} / std::sqrt(sq / static_cast<T>(d) + static_cast<T>(kLayerNormEps));
    mean[r] = mu;
    rstd[r] = rs;
    T* yr = y.data() + r * d;
    for (std::size_t j = 0; j < d; ++j) yr[j] = (xr[j] - mu) * rs * gain[j] + offset[j];
  }
}

template <class T>
void layernorm_backward(std::span<const T> dy, std::span<const T> x, std::span<const T> gain,
                        std::span<const T> mean, std::span<const T> rstd, std::span<T> dx, std::span<T> dgain,
                        std::span<T> doffset, std::size_t rows, std::size_t d) {
  const bool parallel = rows * d > kParallelWork;
#pragma omp parallel for schedule(static) if (parallel)
  for (Index r = 0; r < static_cast<Index>(rows); ++r) {
    const T* xr = x.data() + r * d;
    const T* dyr = dy.data() + r * d;
    T s1{0};
    T s2{0};
    for (std::size_t j = 0; j < d; ++j) {
      const T xhat = (xr[j] - mean[r]) * rstd[r];
      const T g = dyr[j] * gain[j];
      s1 += g;
      s2 += g * xhat;
    }
    const T inv_d = T{1} / static_cast<T>(d);
    T* dxr = dx.data() + r * d;
    for (std::size_t j = 0; j < d; ++j) {
      const T xhat = (xr[j] - mean[r]) * rstd[r];
      dxr[j] += rstd[r] * (dyr[j] * gain[j] - s1 * inv_d - xhat * (s2 * inv_d));
    }
  }
#pragma omp parallel for schedule(static) if (parallel)
  for (Index j = 0; j < static_cast<Index>(d); ++j) {
    for (std::size_t r = 0; r < rows; ++r) {
      const T xhat = (x[r * d + j] - mean[r]) * rstd[r];
      dgain[j] += dy[r * d + j] * xhat;
      doffset[j] += dy[r * d + j];
    }
  }
}

template <class T>
void gelu_forward(std::span<const T> x, std::span<T> y) {
#pragma omp parallel for schedule(static) if (x.size() > kParallelWork)
  for (Index i = 0; i < static_cast<Index>(x.size()); ++i) y[i] = gelu_value(x[i]);
}

template <class T>
void gelu_backward(std::span<const T> x, std::span<const T> dy, std::span<T> dx) {
#pragma omp parallel for schedule(static) if (x.size() > kParallelWork)
  for (Index i = 0; i < static_cast<Index>(x.size()); ++i) dx[i] = gelu_derivative(x[i]) * dy[i];
}

template <class T>
void attention_forward(std::span<const T> q, std::span<const T> k, std::span<const T> v,
                       std::span<const std::uint8_t> mask, std::span<T> probs, std::span<T> out, std::size_t t,
                       std::size_t d, std::size_t heads) {
  const std::size_t dh = d / heads;
  const T scale = T{1} / std::sqrt(static_cast<T>(dh));
#pragma omp parallel for collapse(2) schedule(static) if (heads * t * t * dh > kParallelWork)
  for (Index h = 0; h < static_cast<Index>(heads); ++h) {
    for (Index i = 0; i < static_cast<Index>(t); ++i) {
      const std::uint8_t* mrow = mask.data() + i * t;
      T* p = probs.data() + (h * t + i) * t;
      const T* qi = q.data() + i * d + h * dh;
      T max_score = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < t; ++j) {
        if (!mrow[j]) {
          p[j] = T{0};
          continue;
        }
        const T* kj = k.data() + j * d + h * dh;
        T s{0};
        for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
        p[j] = s * scale;
        if (p[j] > max_score) max_score = p[j];
      }
      T denom{0};
      for (std::size_t j = 0; j < t; ++j) {
        if (!mrow[j]) continue;
        p[j] = std::exp(p[j] - max_score);
        denom += p[j];
      }
      T* oi = out.data() + i * d + h * dh;
      for (std::size_t c = 0; c < dh; ++c) oi[c] = T{0};
      for (std::size_t j = 0; j < t; ++j) {
        if (!mrow[j]) continue;
        p[j] /= denom;
        const T* vj = v.data() + j * d + h * dh;
        for (std::size_t c = 0; c < dh; ++c) oi[c] += p[j] * vj[c];
      }
    }
  }
}

template <class T>
void attention_backward(std::span<const T> q, std::span<const T> k, std::span<const T> v,
                        std::span<const T> probs, std::span<const std::uint8_t> mask, std::span<const T> dout,
                        std::span<T> dq, std::span<T> dk, std::span<T> dv, std::size_t t, std::size_t d,
                        std::size_t heads) {
  const std::size_t dh = d / heads;
  const T scale = T{1} / std::sqrt(static_cast<T>(dh));
  const bool parallel = heads * t * t * dh > kParallelWork;
  std::vector<T> dscores(heads * t * t, T{0});

#pragma omp parallel for collapse(2) schedule(static) if (parallel)
  for (Index h = 0; h < static_cast<Index>(heads); ++h) {
    for (Index i = 0; i < static_cast<Index>(t); ++i) {
      const std::uint8_t* mrow = mask.data() + i * t;
      const T* p = probs.data() + (h * t + i) * t;
      T* ds = dscores.data() + (h * t + i) * t;
      const T* doi = dout.data() + i * d + h * dh;
      T dot{0};
      for (std::size_t j = 0; j < t; ++j) {
        if (!mrow[j]) continue;
        const T* vj = v.data() + j * d + h * dh;
        T dp{0};
        for (std::size_t c = 0; c < dh; ++c) dp += doi[c] * vj[c];
        ds[j] = dp;
        dot += p[j] * dp;
      }
      for (std::size_t j = 0; j < t; ++j) {
        if (mrow[j]) ds[j] = p[j] * (ds[j] - dot) * scale;
      }
    }
  }

#pragma omp parallel for collapse(2) schedule(static) if (parallel)
  for (Index h = 0; h < static_cast<Index>(heads); ++h) {
    for (Index i = 0; i < static_cast<Index>(t); ++i) {
      const std::uint8_t* mrow = mask.data() + i * t;
      const T* ds = dscores.data() + (h * t + i) * t;
      T* dqi = dq.data() + i * d + h * dh;
      for (std::size_t c = 0; c < dh; ++c) dqi[c] = T{0};
      for (std::size_t j = 0; j < t; ++j) {
        if (!mrow[j]) continue;
        const T* kj = k.data() + j * d + h * dh;
        for (std::size_t c = 0; c < dh; ++c) dqi[c] += ds[j] * kj[c];
      }
    }
  }

#pragma omp parallel for collapse(2) schedule(static) if (parallel)
  for (Index h = 0; h < static_cast<Index>(heads); ++h) {
    for (Index j = 0; j < static_cast<Index>(t); ++j) {
      T* dkj = dk.data() + j * d + h * dh;
      T* dvj = dv.data() + j * d + h * dh;
      for (std::size_t c = 0; c < dh; ++c) {
        dkj[c] = T{0};
        dvj[c] = T{0};
      }
      for (std::size_t i = 0; i < t; ++i) {
        if (!mask[i * t + j]) continue;
        const T ds = dscores[(h * t + i) * t + j];
        const T p = probs[(h * t + i) * t + j];
        const T* qi = q.data() + i * d + h * dh;
        const T* doi = dout.data() + i * d + h * dh;
        for (std::size_t c = 0; c < dh; ++c) {
          dkj[c] += ds * qi[c];
          dvj[c] += p * doi[c];
        }
      }
    }
  }
}

namespace serial {

template <class T>
void matmul(std::span<const T> a, std::span<const T> b, std::span<const T> bias, std::span<T> c, std::size_t m,
            std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      T s = bias.empty() ? T{0} : bias[j];
      for (std::size_t kk = 0; kk < k; ++kk) s += a[i * k + kk] * b[kk * n + j];
      c[i * n + j] = s;
    }
  }
}

template <class T>
void matmul_backward_input(std::span<const T> dc, std::span<const T> b, std::span<T> da, std::size_t m,
                           std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t kk = 0; kk < k; ++kk) {
      T s{0};
      for (std::size_t j = 0; j < n; ++j) s += dc[i * n + j] * b[kk * n + j];
      da[i * k + kk] += s;
    }
  }
}

template <class T>
void matmul_backward_weight(std::span<const T> a, std::span<const T> dc, std::span<T> db, std::span<T> dbias,
                            std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t kk = 0; kk < k; ++kk) {
      for (std::size_t j = 0; j < n; ++j) db[kk * n + j] += a[i * k + kk] * dc[i * n + j];
    }
    if (!dbias.empty()) {
      for (std::size_t j = 0; j < n; ++j) dbias[j] += dc[i * n + j];
    }
  }
}

template <class T>
void layernorm_forward(std::span<const T> x, std::span<const T> gain, std::span<const T> offset, std::span<T> y,
                       std::span<T> mean, std::span<T> rstd, std::size_t rows, std::size_t d) {
  for (std::size_t r = 0; r < rows; ++r) {
    T sum{0};
    for (std::size_t j = 0; j < d; ++j) sum += x[r * d + j];
    mean[r] = sum / static_cast<T>(d);
    T sq{0};
    for (std::size_t j = 0; j < d; ++j) sq += (x[r * d + j] - mean[r]) * (x[r * d + j] - mean[r]);
    rstd[r] = T{1} / std::sqrt(sq / static_cast<T>(d) + static_cast<T>(kLayerNormEps));
    for (std::size_t j = 0; j < d; ++j) y[r * d + j] = (x[r * d + j] - mean[r]) * rstd[r] * gain[j] + offset[j];
  }
}

template <class T>
void layernorm_backward(std::span<const T> dy, std::span<const T> x, std::span<const T> gain,
                        std::span<const T> mean, std::span<const T> rstd, std::span<T> dx, std::span<T> dgain,
                        std::span<T> doffset, std::size_t rows, std::size_t d) {
  for (std::size_t r = 0; r < rows; ++r) {
    T s1{0};
    T s2{0};
    for (std::size_t j = 0; j < d; ++j) {
      const T xhat = (x[r * d + j] - mean[r]) * rstd[r];
      s1 += dy[r * d + j] * gain[j];
      s2 += dy[r * d + j] * gain[j] * xhat;
    }
    const T inv_d = T{1} / static_cast<T>(d);
    for (std::size_t j = 0; j < d; ++j) {
      const T xhat = (x[r * d + j] - mean[r]) * rstd[r];
      dx[r * d + j] += rstd[r] * (dy[r * d + j] * gain[j] - s1 * inv_d - xhat * (s2 * inv_d));
      dgain[j] += dy[r * d + j] * xhat;
      doffset[j] += dy[r * d + j];
    }
  }
}

template <class T>
void gelu_forward(std::span<const T> x, std::span<T> y) {
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = gelu_value(x[i]);
}

template <class T>
void gelu_backward(std::span<const T> x, std::span<const T> dy, std::span<T> dx) {
  for (std::size_t i = 0; i < x.size(); ++i) dx[i] = gelu_derivative(x[i]) * dy[i];
}

template <class T>
void attention_forward(std::span<const T> q, std::span<const T> k, std::span<const T> v,
                       std::span<const std::uint8_t> mask, std::span<T> probs, std::span<T> out, std::size_t t,
                       std::size_t d, std::size_t heads) {
  const std::size_t dh = d / heads;
  const T scale = T{1} / std::sqrt(static_cast<T>(dh));
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < t; ++i) {
      T max_score = -std::numeric_limits<T>::infinity();
      std::vector<T> scores(t, T{0});
      for (std::size_t j = 0; j < t; ++j) {
        if (!mask[i * t + j]) continue;
        T s{0};
        for (std::size_t c = 0; c < dh; ++c) s += q[i * d + h * dh + c] * k[j * d + h * dh + c];
        scores[j] = s * scale;
        if (scores[j] > max_score) max_score = scores[j];
      }
      T denom{0};
      for (std::size_t j = 0; j < t; ++j) {
        if (!mask[i * t + j]) continue;
        scores[j] = std::exp(scores[j] - max_score);
        denom += scores[j];
      }
      for (std::size_t c = 0; c < dh; ++c) out[i * d + h * dh + c] = T{0};
      for (std::size_t j = 0; j < t; ++j) {
        T p{0};
        if (mask[i * t + j]) {
          p = scores[j] / denom;
          for (std::size_t c = 0; c < dh; ++c) out[i * d + h * dh + c] += p * v[j * d + h * dh + c];
        }
        probs[(h * t + i) * t + j] = p;
      }
    }
  }
}

template <class T>
void attention_backward(std::span<const T> q, std::span<const T> k, std::span<const T> v,
                        std::span<const T> probs, std::span<const std::uint8_t> mask, std::span<const T> dout,
                        std::span<T> dq, std::span<T> dk, std::span<T> dv, std::size_t t, std::size_t d,
                        std::size_t heads) {
  const std::size_t dh = d / heads;
  const T scale = T{1} / std::sqrt(static_cast<T>(dh));
  for (auto* g : {&dq, &dk, &dv}) {
    for (auto& x : *g) x = T{0};
  }
  std::vector<T> ds(t);
  for (std::size_t h = 0; h < heads; ++h) {
    // dk and dv accumulate over queries i in ascending order.
    for (std::size_t i = 0; i < t; ++i) {
      T dot{0};
      for (std::size_t j = 0; j < t; ++j) {
        ds[j] = T{0};
        if (!mask[i * t + j]) continue;
        T dp{0};
        for (std::size_t c = 0; c < dh; ++c) dp += dout[i * d + h * dh + c] * v[j * d + h * dh + c];
        ds[j] = dp;
        dot += probs[(h * t + i) * t + j] * dp;
      }
      for (std::size_t j = 0; j < t; ++j) {
        if (!mask[i * t + j]) continue;
        const T p = probs[(h * t + i) * t + j];
        ds[j] = p * (ds[j] - dot) * scale;
        for (std::size_t c = 0; c < dh; ++c) {
          dq[i * d + h * dh + c] += ds[j] * k[j * d + h * dh + c];
          dk[j * d + h * dh + c] += ds[j] * q[i * d + h * dh + c];
          dv[j * d + h * dh + c] += p * dout[i * d + h * dh + c];
        }
      }
    }
  }
}

}  // namespace serial

#define FINSENT_INSTANTIATE_KERNELS(NS, T)                                                                   \
  template void NS::matmul<T>(std::span<const T>, std::span<const T>, std::span<const T>, std::span<T>,     \
                              std::size_t, std::size_t, std::size_t);                                       \
  template void NS::matmul_backward_input<T>(std::span<const T>, std::span<const T>, std::span<T>,          \
                                             std::size_t, std::size_t, std::size_t);                        \
  template void NS::matmul_backward_weight<T>(std::span<const T>, std::span<const T>, std::span<T>,         \
                                              std::span<T>, std::size_t, std::size_t, std::size_t);         \
  template void NS::layernorm_forward<T>(std::span<const T>, std::span<const T>, std::span<const T>,        \
                                         std::span<T>, std::span<T>, std::span<T>, std::size_t, std::size_t); \
  template void NS::layernorm_backward<T>(std::span<const T>, std::span<const T>, std::span<const T>,       \
                                          std::span<const T>, std::span<const T>, std::span<T>, std::span<T>, \
                                          std::span<T>, std::size_t, std::size_t);                          \
  template void NS::gelu_forward<T>(std::span<const T>, std::span<T>);                                      \
  template void NS::gelu_backward<T>(std::span<const T>, std::span<const T>, std::span<T>);                 \
  template void NS::attention_forward<T>(std::span<const T>, std::span<const T>, std::span<const T>,        \
                                         std::span<const std::uint8_t>, std::span<T>, std::span<T>,         \
                                         std::size_t, std::size_t, std::size_t);                            \
  template void NS::attention_backward<T>(std::span<const T>, std::span<const T>, std::span<const T>,       \
                                          std::span<const T>, std::span<const std::uint8_t>,                \
                                          std::span<const T>, std::span<T>, std::span<T>, std::span<T>,     \
                                          std::size_t, std::size_t, std::size_t);

}  // namespace finsent::kernels

FINSENT_INSTANTIATE_KERNELS(finsent::kernels, float)
FINSENT_INSTANTIATE_KERNELS(finsent::kernels, double)
FINSENT_INSTANTIATE_KERNELS(finsent::kernels::serial, float)
FINSENT_INSTANTIATE_KERNELS(finsent::kernels::serial, double)
