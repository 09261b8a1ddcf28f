#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <type_traits>
#include <vector>

#include "emra/tensor.hpp"

// Differentiable dense kernels. Every op computes its forward value and, when
// grad recording is on, registers an adjoint closure. Adjoints accumulate with
// += into parent .grad so fan-out works by construction.

namespace emra {

namespace detail {

// Accumulation type for reductions and transcendentals: at least double, and
// the scalar type itself when it is wider (long double probes).
template <typename S>
using acc_t = std::conditional_t<(sizeof(S) > sizeof(double)), S, double>;

// Decompose a shape around `axis` into (outer, n, inner) so that element
// (o, j, i) lives at (o * n + j) * inner + i.
struct AxisSplit {
  std::size_t outer;
  std::size_t n;
  std::size_t inner;
};

inline AxisSplit axis_split(const Shape& shape, int axis) {
  if (axis < 0 || axis >= static_cast<int>(shape.size())) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                         shape_str(shape));
  }
  AxisSplit s{1, static_cast<std::size_t>(shape[axis]), 1};
  for (int i = 0; i < axis; ++i) s.outer *= static_cast<std::size_t>(shape[i]);
  for (int i = axis + 1; i < static_cast<int>(shape.size()); ++i) {
    s.inner *= static_cast<std::size_t>(shape[i]);
  }
  return s;
}

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " +
                         shape_str(b));
  }
}

}  // namespace detail

template <typename S>
TensorPtr<S> add(const TensorPtr<S>& a, const TensorPtr<S>& b) {
  detail::require_same_shape(a->shape, b->shape, "add");
  std::vector<S> d(a->numel());
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = a->data[i] + b->data[i];
  auto out = Tensor<S>::create(a->shape, std::move(d));
  record(out, {a, b}, [pa = a.get(), pb = b.get()](Tensor<S>& self) {
    if (pa->requires_grad) pa->accumulate_grad(self.grad);
    if (pb->requires_grad) pb->accumulate_grad(self.grad);
  });
  return out;
}

template <typename S>
TensorPtr<S> sub(const TensorPtr<S>& a, const TensorPtr<S>& b) {
  detail::require_same_shape(a->shape, b->shape, "sub");
  std::vector<S> d(a->numel());
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = a->data[i] - b->data[i];
  auto out = Tensor<S>::create(a->shape, std::move(d));
  record(out, {a, b}, [pa = a.get(), pb = b.get()](Tensor<S>& self) {
    if (pa->requires_grad) pa->accumulate_grad(self.grad);
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] -= self.grad[i];
    }
  });
  return out;
}

template <typename S>
TensorPtr<S> mul(const TensorPtr<S>& a, const TensorPtr<S>& b) {
  detail::require_same_shape(a->shape, b->shape, "mul");
  std::vector<S> d(a->numel());
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = a->data[i] * b->data[i];
  auto out = Tensor<S>::create(a->shape, std::move(d));
  record(out, {a, b}, [pa = a.get(), pb = b.get()](Tensor<S>& self) {
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i] * pb->data[i];
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] += self.grad[i] * pa->data[i];
    }
  });
  return out;
}

template <typename S>
TensorPtr<S> scale(const TensorPtr<S>& a, S factor) {
  std::vector<S> d(a->numel());
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = a->data[i] * factor;
  auto out = Tensor<S>::create(a->shape, std::move(d));
  record(out, {a}, [pa = a.get(), factor](Tensor<S>& self) {
    pa->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i] * factor;
  });
  return out;
}

// x: [N,D] plus a length-D bias broadcast over rows.
template <typename S>
TensorPtr<S> add_row_bias(const TensorPtr<S>& x, const TensorPtr<S>& bias) {
  if (x->rank() != 2 || bias->rank() != 1 || bias->shape[0] != x->shape[1]) {
    throw DimensionError("add_row_bias: incompatible shapes " + shape_str(x->shape) + " and " +
                         shape_str(bias->shape));
  }
  const std::size_t n = static_cast<std::size_t>(x->shape[0]);
  const std::size_t d = static_cast<std::size_t>(x->shape[1]);
  std::vector<S> out_d(x->numel());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) out_d[i * d + j] = x->data[i * d + j] + bias->data[j];
  }
  auto out = Tensor<S>::create(x->shape, std::move(out_d));
  record(out, {x, bias}, [px = x.get(), pb = bias.get(), n, d](Tensor<S>& self) {
    if (px->requires_grad) px->accumulate_grad(self.grad);
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j) pb->grad[j] += self.grad[i * d + j];
      }
    }
  });
  return out;
}

template <typename S>
TensorPtr<S> matmul(const TensorPtr<S>& a, const TensorPtr<S>& b) {
  if (a->rank() != 2 || b->rank() != 2 || a->shape[1] != b->shape[0]) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a->shape) + " and " +
                         shape_str(b->shape));
  }
  const std::size_t m = static_cast<std::size_t>(a->shape[0]);
  const std::size_t k = static_cast<std::size_t>(a->shape[1]);
  const std::size_t n = static_cast<std::size_t>(b->shape[1]);
  std::vector<S> d(m * n, S(0));
  {
    // k unrolled by four: one pass over the output row does four
    // accumulations, in the same per-element order as the plain loop.
    const S* __restrict__ pa = a->data.data();
    const S* __restrict__ pb = b->data.data();
    S* __restrict__ pc = d.data();
    const std::size_t k4 = k - k % 4;
    for (std::size_t i = 0; i < m; ++i) {
      const S* arow = pa + i * k;
      S* crow = pc + i * n;
      std::size_t kk = 0;
      for (; kk < k4; kk += 4) {
        const S a0 = arow[kk], a1 = arow[kk + 1], a2 = arow[kk + 2], a3 = arow[kk + 3];
        const S* b0 = pb + kk * n;
        const S* b1 = b0 + n;
        const S* b2 = b1 + n;
        const S* b3 = b2 + n;
        for (std::size_t j = 0; j < n; ++j) {
          S c = crow[j];
          c += a0 * b0[j];
          c += a1 * b1[j];
          c += a2 * b2[j];
          c += a3 * b3[j];
          crow[j] = c;
        }
      }
      for (; kk < k; ++kk) {
        const S av = arow[kk];
        const S* brow = pb + kk * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  }
  auto out = Tensor<S>::create({static_cast<int>(m), static_cast<int>(n)}, std::move(d));
  record(out, {a, b}, [pa = a.get(), pb = b.get(), m, k, n](Tensor<S>& self) {
    const S* g = self.grad.data();
    if (pa->requires_grad) {
      pa->ensure_grad();
      // dA = dC * B^T
      for (std::size_t i = 0; i < m; ++i) {
        const S* grow = g + i * n;
        S* arow = pa->grad.data() + i * k;
        for (std::size_t kk = 0; kk < k; ++kk) {
          const S* brow = pb->data.data() + kk * n;
          S acc = S(0);
          for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
          arow[kk] += acc;
        }
      }
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      // dB = A^T * dC
      for (std::size_t kk = 0; kk < k; ++kk) {
        S* brow = pb->grad.data() + kk * n;
        for (std::size_t i = 0; i < m; ++i) {
          const S av = pa->data[i * k + kk];
          const S* grow = g + i * n;
          for (std::size_t j = 0; j < n; ++j) brow[j] += av * grow[j];
        }
      }
    }
  });
  return out;
}

template <typename S>
TensorPtr<S> transpose(const TensorPtr<S>& a) {
  if (a->rank() != 2) {
    throw DimensionError("transpose expects a 2-d tensor, got " + shape_str(a->shape));
  }
  const std::size_t m = static_cast<std::size_t>(a->shape[0]);
  const std::size_t n = static_cast<std::size_t>(a->shape[1]);
  std::vector<S> d(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) d[j * m + i] = a->data[i * n + j];
  }
  auto out = Tensor<S>::create({static_cast<int>(n), static_cast<int>(m)}, std::move(d));
  record(out, {a}, [pa = a.get(), m, n](Tensor<S>& self) {
    pa->ensure_grad();
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) pa->grad[i * n + j] += self.grad[j * m + i];
    }
  });
  return out;
}

// Rows [r0, r1) of a 2-d tensor.
template <typename S>
TensorPtr<S> slice_rows(const TensorPtr<S>& a, int r0, int r1) {
  if (a->rank() != 2 || r0 < 0 || r1 < r0 || r1 > a->shape[0]) {
    throw DimensionError("slice_rows: bad range [" + std::to_string(r0) + "," +
                         std::to_string(r1) + ") for shape " + shape_str(a->shape));
  }
  const std::size_t n = static_cast<std::size_t>(a->shape[1]);
  std::vector<S> d(a->data.begin() + static_cast<std::ptrdiff_t>(r0 * n),
                   a->data.begin() + static_cast<std::ptrdiff_t>(r1 * n));
  auto out = Tensor<S>::create({r1 - r0, a->shape[1]}, std::move(d));
  record(out, {a}, [pa = a.get(), r0, n](Tensor<S>& self) {
    pa->ensure_grad();
    const std::size_t base = static_cast<std::size_t>(r0) * n;
    for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[base + i] += self.grad[i];
  });
  return out;
}

// Columns [c0, c1) of a 2-d tensor.
template <typename S>
TensorPtr<S> slice_cols(const TensorPtr<S>& a, int c0, int c1) {
  if (a->rank() != 2 || c0 < 0 || c1 < c0 || c1 > a->shape[1]) {
    throw DimensionError("slice_cols: bad range [" + std::to_string(c0) + "," +
                         std::to_string(c1) + ") for shape " + shape_str(a->shape));
  }
  const std::size_t m = static_cast<std::size_t>(a->shape[0]);
  const std::size_t n = static_cast<std::size_t>(a->shape[1]);
  const std::size_t w = static_cast<std::size_t>(c1 - c0);
  std::vector<S> d(m * w);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < w; ++j) d[i * w + j] = a->data[i * n + c0 + j];
  }
  auto out = Tensor<S>::create({static_cast<int>(m), c1 - c0}, std::move(d));
  record(out, {a}, [pa = a.get(), m, n, w, c0](Tensor<S>& self) {
    pa->ensure_grad();
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < w; ++j) {
        pa->grad[i * n + static_cast<std::size_t>(c0) + j] += self.grad[i * w + j];
      }
    }
  });
  return out;
}

// Rectangular block [r0,r1) x [c0,c1) of a 2-d tensor.
template <typename S>
TensorPtr<S> block(const TensorPtr<S>& a, int r0, int r1, int c0, int c1) {
  if (a->rank() != 2 || r0 < 0 || r1 < r0 || r1 > a->shape[0] || c0 < 0 || c1 < c0 ||
      c1 > a->shape[1]) {
    throw DimensionError("block: bad range for shape " + shape_str(a->shape));
  }
  const std::size_t n = static_cast<std::size_t>(a->shape[1]);
  const std::size_t h = static_cast<std::size_t>(r1 - r0);
  const std::size_t w = static_cast<std::size_t>(c1 - c0);
  std::vector<S> d(h * w);
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < w; ++j) {
      d[i * w + j] = a->data[(static_cast<std::size_t>(r0) + i) * n + static_cast<std::size_t>(c0) + j];
    }
  }
  auto out = Tensor<S>::create({r1 - r0, c1 - c0}, std::move(d));
  record(out, {a}, [pa = a.get(), n, h, w, r0, c0](Tensor<S>& self) {
    pa->ensure_grad();
    for (std::size_t i = 0; i < h; ++i) {
      for (std::size_t j = 0; j < w; ++j) {
        pa->grad[(static_cast<std::size_t>(r0) + i) * n + static_cast<std::size_t>(c0) + j] +=
            self.grad[i * w + j];
      }
    }
  });
  return out;
}

template <typename S>
TensorPtr<S> concat_rows(const TensorPtr<S>& a, const TensorPtr<S>& b) {
  if (a->rank() != 2 || b->rank() != 2 || a->shape[1] != b->shape[1]) {
    throw DimensionError("concat_rows: incompatible shapes " + shape_str(a->shape) + " and " +
                         shape_str(b->shape));
  }
  std::vector<S> d;
  d.reserve(a->numel() + b->numel());
  d.insert(d.end(), a->data.begin(), a->data.end());
  d.insert(d.end(), b->data.begin(), b->data.end());
  auto out = Tensor<S>::create({a->shape[0] + b->shape[0], a->shape[1]}, std::move(d));
  record(out, {a, b}, [pa = a.get(), pb = b.get()](Tensor<S>& self) {
    const std::size_t na = pa->data.size();
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (std::size_t i = 0; i < na; ++i) pa->grad[i] += self.grad[i];
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (std::size_t i = 0; i < pb->data.size(); ++i) pb->grad[i] += self.grad[na + i];
    }
  });
  return out;
}

template <typename S>
TensorPtr<S> concat_cols(const std::vector<TensorPtr<S>>& parts) {
  if (parts.empty()) {
    throw DimensionError("concat_cols: empty input list");
  }
  const int m = parts[0]->shape[0];
  int total = 0;
  for (const auto& p : parts) {
    if (p->rank() != 2 || p->shape[0] != m) {
      throw DimensionError("concat_cols: incompatible part shape " + shape_str(p->shape));
    }
    total += p->shape[1];
  }
  std::vector<S> d(static_cast<std::size_t>(m) * static_cast<std::size_t>(total));
  std::size_t col = 0;
  for (const auto& p : parts) {
    const std::size_t w = static_cast<std::size_t>(p->shape[1]);
    for (std::size_t i = 0; i < static_cast<std::size_t>(m); ++i) {
      for (std::size_t j = 0; j < w; ++j) {
        d[i * static_cast<std::size_t>(total) + col + j] = p->data[i * w + j];
      }
    }
    col += w;
  }
  auto out = Tensor<S>::create({m, total}, std::move(d));
  record(out, std::vector<TensorPtr<S>>(parts), [m, total](Tensor<S>& self) {
    std::size_t col = 0;
    for (const auto& p : self.parents) {
      const std::size_t w = static_cast<std::size_t>(p->shape[1]);
      if (p->requires_grad) {
        p->ensure_grad();
        for (std::size_t i = 0; i < static_cast<std::size_t>(m); ++i) {
          for (std::size_t j = 0; j < w; ++j) {
            p->grad[i * w + j] += self.grad[i * static_cast<std::size_t>(total) + col + j];
          }
        }
      }
      col += w;
    }
  });
  return out;
}

template <typename S>
TensorPtr<S> reshape(const TensorPtr<S>& a, Shape new_shape) {
  if (shape_numel(new_shape) != a->numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(a->shape) + " as " +
                         shape_str(new_shape));
  }
  auto out = Tensor<S>::create(std::move(new_shape), a->data);
  record(out, {a}, [pa = a.get()](Tensor<S>& self) { pa->accumulate_grad(self.grad); });
  return out;
}

// Numerically stable softmax along `axis` (max subtraction per slice).
template <typename S>
TensorPtr<S> softmax(const TensorPtr<S>& x, int axis) {
  const auto sp = detail::axis_split(x->shape, axis);
  std::vector<S> d(x->numel());
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.n * sp.inner + i;
      S mx = x->data[base];
      for (std::size_t j = 1; j < sp.n; ++j) mx = std::max(mx, x->data[base + j * sp.inner]);
      S sum = S(0);
      for (std::size_t j = 0; j < sp.n; ++j) {
        const S e = std::exp(x->data[base + j * sp.inner] - mx);
        d[base + j * sp.inner] = e;
        sum += e;
      }
      const S inv = S(1) / sum;
      for (std::size_t j = 0; j < sp.n; ++j) d[base + j * sp.inner] *= inv;
    }
  }
  auto out = Tensor<S>::create(x->shape, std::move(d));
  record(out, {x}, [px = x.get(), sp](Tensor<S>& self) {
    px->ensure_grad();
    // dx_j = y_j * (dy_j - sum_k dy_k y_k) per slice
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const std::size_t base = o * sp.n * sp.inner + i;
        S dot = S(0);
        for (std::size_t j = 0; j < sp.n; ++j) {
          const std::size_t k = base + j * sp.inner;
          dot += self.grad[k] * self.data[k];
        }
        for (std::size_t j = 0; j < sp.n; ++j) {
          const std::size_t k = base + j * sp.inner;
          px->grad[k] += self.data[k] * (self.grad[k] - dot);
        }
      }
    }
  });
  return out;
}

// Softmax over the last axis restricted to entries whose mask byte is
// nonzero; masked entries are exactly zero in the output and receive exactly
// zero gradient. Every slice must contain at least one valid entry.
template <typename S>
TensorPtr<S> masked_softmax_last(const TensorPtr<S>& x, const std::vector<std::uint8_t>& valid) {
  if (valid.size() != x->numel()) {
    throw DimensionError("masked_softmax_last: mask size mismatch");
  }
  if (x->rank() == 0) {
    throw DimensionError("masked_softmax_last: rank-0 input");
  }
  const std::size_t n = static_cast<std::size_t>(x->shape.back());
  const std::size_t slices = x->numel() / n;
  std::vector<S> d(x->numel(), S(0));
  for (std::size_t s = 0; s < slices; ++s) {
    const std::size_t base = s * n;
    S mx = S(0);
    bool seen = false;
    for (std::size_t j = 0; j < n; ++j) {
      if (valid[base + j]) {
        mx = seen ? std::max(mx, x->data[base + j]) : x->data[base + j];
        seen = true;
      }
    }
    if (!seen) {
      throw NumericError("masked_softmax_last: slice with no valid entry");
    }
    S sum = S(0);
    for (std::size_t j = 0; j < n; ++j) {
      if (valid[base + j]) {
        const S e = std::exp(x->data[base + j] - mx);
        d[base + j] = e;
        sum += e;
      }
    }
    const S inv = S(1) / sum;
    for (std::size_t j = 0; j < n; ++j) {
      if (valid[base + j]) d[base + j] *= inv;
    }
  }
  auto out = Tensor<S>::create(x->shape, std::move(d));
  record(out, {x}, [px = x.get(), n, slices, mask = valid](Tensor<S>& self) {
    px->ensure_grad();
    for (std::size_t s = 0; s < slices; ++s) {
      const std::size_t base = s * n;
      S dot = S(0);
      for (std::size_t j = 0; j < n; ++j) {
        if (mask[base + j]) dot += self.grad[base + j] * self.data[base + j];
      }
      for (std::size_t j = 0; j < n; ++j) {
        if (mask[base + j]) {
          px->grad[base + j] += self.data[base + j] * (self.grad[base + j] - dot);
        }
      }
    }
  });
  return out;
}

inline constexpr double kLayerNormEps = 1e-6;

// Normalizes each slice along `axis` to zero mean / unit variance (biased
// variance, epsilon inside the square root) and applies the gamma/beta affine.
template <typename S>
TensorPtr<S> layer_norm(const TensorPtr<S>& x, const TensorPtr<S>& gamma, const TensorPtr<S>& beta,
                        int axis) {
  const auto sp = detail::axis_split(x->shape, axis);
  if (gamma->numel() != sp.n || beta->numel() != sp.n) {
    throw DimensionError("layer_norm: gamma/beta extent " + std::to_string(gamma->numel()) +
                         " does not match axis extent " + std::to_string(sp.n));
  }
  std::vector<S> d(x->numel());
  std::vector<S> xhat(x->numel());
  std::vector<S> inv_std(sp.outer * sp.inner);
  const S inv_n = S(1) / static_cast<S>(sp.n);
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.n * sp.inner + i;
      S mean = S(0);
      for (std::size_t j = 0; j < sp.n; ++j) mean += x->data[base + j * sp.inner];
      mean *= inv_n;
      S var = S(0);
      for (std::size_t j = 0; j < sp.n; ++j) {
        const S c = x->data[base + j * sp.inner] - mean;
        var += c * c;
      }
      var *= inv_n;
      const S inv = S(1) / std::sqrt(var + static_cast<S>(kLayerNormEps));
      inv_std[o * sp.inner + i] = inv;
      for (std::size_t j = 0; j < sp.n; ++j) {
        const std::size_t k = base + j * sp.inner;
        const S xn = (x->data[k] - mean) * inv;
        xhat[k] = xn;
        d[k] = xn * gamma->data[j] + beta->data[j];
      }
    }
  }
  auto out = Tensor<S>::create(x->shape, std::move(d));
  record(out, {x, gamma, beta},
         [px = x.get(), pg = gamma.get(), pb = beta.get(), sp, xhat = std::move(xhat),
          inv_std = std::move(inv_std)](Tensor<S>& self) {
           const S inv_n = S(1) / static_cast<S>(sp.n);
           if (pb->requires_grad) pb->ensure_grad();
           if (pg->requires_grad) pg->ensure_grad();
           if (px->requires_grad) px->ensure_grad();
           for (std::size_t o = 0; o < sp.outer; ++o) {
             for (std::size_t i = 0; i < sp.inner; ++i) {
               const std::size_t base = o * sp.n * sp.inner + i;
               S sum_dxhat = S(0);
               S sum_dxhat_xhat = S(0);
               for (std::size_t j = 0; j < sp.n; ++j) {
                 const std::size_t k = base + j * sp.inner;
                 const S dy = self.grad[k];
                 if (pb->requires_grad) pb->grad[j] += dy;
                 if (pg->requires_grad) pg->grad[j] += dy * xhat[k];
                 const S dxh = dy * pg->data[j];
                 sum_dxhat += dxh;
                 sum_dxhat_xhat += dxh * xhat[k];
               }
               if (px->requires_grad) {
                 const S inv = inv_std[o * sp.inner + i];
                 for (std::size_t j = 0; j < sp.n; ++j) {
                   const std::size_t k = base + j * sp.inner;
                   const S dxh = self.grad[k] * pg->data[j];
                   px->grad[k] +=
                       inv * (dxh - inv_n * sum_dxhat - xhat[k] * inv_n * sum_dxhat_xhat);
                 }
               }
             }
           }
         });
  return out;
}

namespace detail {

// tanh written as 1 - 2/(e^{2u}+1); exp is the cheapest transcendental on
// this path and the forward/adjoint pair below share the exact same value.
template <typename A>
inline A fast_tanh(A u) {
  if (u > A(20)) return A(1);
  if (u < A(-20)) return A(-1);
  return A(1) - A(2) / (std::exp(A(2) * u) + A(1));
}

}  // namespace detail

// GELU, tanh approximation. The adjoint differentiates the approximation
// itself so gradient checks are exact with respect to what runs forward.
template <typename S>
TensorPtr<S> gelu(const TensorPtr<S>& x) {
  using A = detail::acc_t<S>;
  constexpr double kSqrt2OverPi = 0.7978845608028653558798921198687;
  constexpr double kCubic = 0.044715;
  std::vector<S> d(x->numel());
  for (std::size_t i = 0; i < d.size(); ++i) {
    const A v = static_cast<A>(x->data[i]);
    const A t = detail::fast_tanh(static_cast<A>(kSqrt2OverPi) * (v + static_cast<A>(kCubic) * v * v * v));
    d[i] = static_cast<S>(A(0.5) * v * (A(1) + t));
  }
  auto out = Tensor<S>::create(x->shape, std::move(d));
  record(out, {x}, [px = x.get()](Tensor<S>& self) {
    constexpr double kSqrt2OverPi = 0.7978845608028653558798921198687;
    constexpr double kCubic = 0.044715;
    px->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const A v = static_cast<A>(px->data[i]);
      const A u = static_cast<A>(kSqrt2OverPi) * (v + static_cast<A>(kCubic) * v * v * v);
      const A t = detail::fast_tanh(u);
      const A du = static_cast<A>(kSqrt2OverPi) * (A(1) + A(3) * static_cast<A>(kCubic) * v * v);
      const A dgelu = A(0.5) * (A(1) + t) + A(0.5) * v * (A(1) - t * t) * du;
      px->grad[i] += self.grad[i] * static_cast<S>(dgelu);
    }
  });
  return out;
}

// Per-channel 3x3 correlation with zero padding 1, stride 1.
// x: [H,W,C], kernels: [3,3,C], bias: [C].
template <typename S>
TensorPtr<S> depthwise_conv3x3(const TensorPtr<S>& x, const TensorPtr<S>& kernels,
                               const TensorPtr<S>& bias) {
  if (x->rank() != 3) {
    throw DimensionError("depthwise_conv3x3: input must be [H,W,C], got " + shape_str(x->shape));
  }
  if (kernels->rank() != 3 || kernels->shape[0] != 3 || kernels->shape[1] != 3) {
    throw ConfigError("depthwise_conv3x3: kernel extent must be 3x3, got " +
                      shape_str(kernels->shape));
  }
  const int h = x->shape[0], w = x->shape[1], c = x->shape[2];
  if (kernels->shape[2] != c || bias->numel() != static_cast<std::size_t>(c)) {
    throw DimensionError("depthwise_conv3x3: channel mismatch between input " +
                         shape_str(x->shape) + " and kernels " + shape_str(kernels->shape));
  }
  std::vector<S> d(x->numel());
  for (int y = 0; y < h; ++y) {
    for (int xx = 0; xx < w; ++xx) {
      for (int ch = 0; ch < c; ++ch) {
        S acc = bias->data[static_cast<std::size_t>(ch)];
        for (int dy = -1; dy <= 1; ++dy) {
          const int sy = y + dy;
          if (sy < 0 || sy >= h) continue;
          for (int dx = -1; dx <= 1; ++dx) {
            const int sx = xx + dx;
            if (sx < 0 || sx >= w) continue;
            acc += x->data[(static_cast<std::size_t>(sy) * w + sx) * c + ch] *
                   kernels->data[(static_cast<std::size_t>(dy + 1) * 3 + (dx + 1)) * c + ch];
          }
        }
        d[(static_cast<std::size_t>(y) * w + xx) * c + ch] = acc;
      }
    }
  }
  auto out = Tensor<S>::create(x->shape, std::move(d));
  record(out, {x, kernels, bias},
         [px = x.get(), pk = kernels.get(), pb = bias.get(), h, w, c](Tensor<S>& self) {
           if (px->requires_grad) px->ensure_grad();
           if (pk->requires_grad) pk->ensure_grad();
           if (pb->requires_grad) pb->ensure_grad();
           for (int y = 0; y < h; ++y) {
             for (int xx = 0; xx < w; ++xx) {
               for (int ch = 0; ch < c; ++ch) {
                 const S go = self.grad[(static_cast<std::size_t>(y) * w + xx) * c + ch];
                 if (pb->requires_grad) pb->grad[static_cast<std::size_t>(ch)] += go;
                 for (int dy = -1; dy <= 1; ++dy) {
                   const int sy = y + dy;
                   if (sy < 0 || sy >= h) continue;
                   for (int dx = -1; dx <= 1; ++dx) {
                     const int sx = xx + dx;
                     if (sx < 0 || sx >= w) continue;
                     const std::size_t xi = (static_cast<std::size_t>(sy) * w + sx) * c + ch;
                     const std::size_t ki =
                         (static_cast<std::size_t>(dy + 1) * 3 + (dx + 1)) * c + ch;
                     if (px->requires_grad) px->grad[xi] += pk->data[ki] * go;
                     if (pk->requires_grad) pk->grad[ki] += px->data[xi] * go;
                   }
                 }
               }
             }
           }
         });
  return out;
}

// Per-pixel linear map: x [H,W,Cin] x weight [Cin,Cout] + bias [Cout].
template <typename S>
TensorPtr<S> pointwise_conv(const TensorPtr<S>& x, const TensorPtr<S>& weight,
                            const TensorPtr<S>& bias) {
  if (x->rank() != 3 || weight->rank() != 2 || x->shape[2] != weight->shape[0]) {
    throw DimensionError("pointwise_conv: channel mismatch between input " + shape_str(x->shape) +
                         " and weight " + shape_str(weight->shape));
  }
  const std::size_t px_count = static_cast<std::size_t>(x->shape[0]) * x->shape[1];
  const std::size_t cin = static_cast<std::size_t>(x->shape[2]);
  const std::size_t cout = static_cast<std::size_t>(weight->shape[1]);
  if (bias->numel() != cout) {
    throw DimensionError("pointwise_conv: bias extent mismatch");
  }
  std::vector<S> d(px_count * cout);
  {
    const S* __restrict__ px_data = x->data.data();
    const S* __restrict__ pw = weight->data.data();
    const std::size_t c4 = cin - cin % 4;
    for (std::size_t p = 0; p < px_count; ++p) {
      S* orow = d.data() + p * cout;
      for (std::size_t j = 0; j < cout; ++j) orow[j] = bias->data[j];
      const S* xrow = px_data + p * cin;
      std::size_t ci = 0;
      for (; ci < c4; ci += 4) {
        const S x0 = xrow[ci], x1 = xrow[ci + 1], x2 = xrow[ci + 2], x3 = xrow[ci + 3];
        const S* w0 = pw + ci * cout;
        const S* w1 = w0 + cout;
        const S* w2 = w1 + cout;
        const S* w3 = w2 + cout;
        for (std::size_t j = 0; j < cout; ++j) {
          S o = orow[j];
          o += x0 * w0[j];
          o += x1 * w1[j];
          o += x2 * w2[j];
          o += x3 * w3[j];
          orow[j] = o;
        }
      }
      for (; ci < cin; ++ci) {
        const S xv = xrow[ci];
        const S* wrow = pw + ci * cout;
        for (std::size_t j = 0; j < cout; ++j) orow[j] += xv * wrow[j];
      }
    }
  }
  auto out = Tensor<S>::create({x->shape[0], x->shape[1], static_cast<int>(cout)}, std::move(d));
  record(out, {x, weight, bias},
         [px = x.get(), pw = weight.get(), pb = bias.get(), px_count, cin, cout](Tensor<S>& self) {
           if (px->requires_grad) px->ensure_grad();
           if (pw->requires_grad) pw->ensure_grad();
           if (pb->requires_grad) pb->ensure_grad();
           for (std::size_t p = 0; p < px_count; ++p) {
             const S* grow = self.grad.data() + p * cout;
             if (pb->requires_grad) {
               for (std::size_t j = 0; j < cout; ++j) pb->grad[j] += grow[j];
             }
             const S* xrow = px->data.data() + p * cin;
             for (std::size_t ci = 0; ci < cin; ++ci) {
               const S* wrow = pw->data.data() + ci * cout;
               if (px->requires_grad) {
                 S acc = S(0);
                 for (std::size_t j = 0; j < cout; ++j) acc += grow[j] * wrow[j];
                 px->grad[p * cin + ci] += acc;
               }
               if (pw->requires_grad) {
                 S* gwrow = pw->grad.data() + ci * cout;
                 const S xv = xrow[ci];
                 for (std::size_t j = 0; j < cout; ++j) gwrow[j] += xv * grow[j];
               }
             }
           }
         });
  return out;
}

namespace detail {

// align_corners=false source coordinate, clamped to the valid range.
struct LerpTap {
  int lo;
  int hi;
  double w_hi;  // weight of hi, weight of lo is 1 - w_hi
};

inline LerpTap lerp_tap(int dst, int out_extent, int in_extent) {
  const double scale = static_cast<double>(in_extent) / static_cast<double>(out_extent);
  double src = (static_cast<double>(dst) + 0.5) * scale - 0.5;
  if (src < 0.0) src = 0.0;
  const double max_src = static_cast<double>(in_extent - 1);
  if (src > max_src) src = max_src;
  LerpTap t;
  t.lo = static_cast<int>(std::floor(src));
  t.hi = std::min(t.lo + 1, in_extent - 1);
  t.w_hi = src - static_cast<double>(t.lo);
  return t;
}

}  // namespace detail

// Bilinear resize of an [H,W,C] field (align_corners=false). Upsampling and
// downsampling use the same sampling rule; out == in is an exact identity.
template <typename S>
TensorPtr<S> bilinear_resize(const TensorPtr<S>& x, int out_h, int out_w) {
  if (x->rank() != 3) {
    throw DimensionError("bilinear_resize: input must be [H,W,C], got " + shape_str(x->shape));
  }
  if (out_h < 1 || out_w < 1) {
    throw DimensionError("bilinear_resize: output extents must be >= 1");
  }
  const int h = x->shape[0], w = x->shape[1], c = x->shape[2];
  std::vector<detail::LerpTap> ty(static_cast<std::size_t>(out_h));
  std::vector<detail::LerpTap> tx(static_cast<std::size_t>(out_w));
  for (int i = 0; i < out_h; ++i) ty[static_cast<std::size_t>(i)] = detail::lerp_tap(i, out_h, h);
  for (int j = 0; j < out_w; ++j) tx[static_cast<std::size_t>(j)] = detail::lerp_tap(j, out_w, w);
  std::vector<S> d(static_cast<std::size_t>(out_h) * out_w * c);
  for (int i = 0; i < out_h; ++i) {
    const auto& ay = ty[static_cast<std::size_t>(i)];
    for (int j = 0; j < out_w; ++j) {
      const auto& ax = tx[static_cast<std::size_t>(j)];
      const S wy1 = static_cast<S>(ay.w_hi), wy0 = S(1) - wy1;
      const S wx1 = static_cast<S>(ax.w_hi), wx0 = S(1) - wx1;
      const S* p00 = x->data.data() + (static_cast<std::size_t>(ay.lo) * w + ax.lo) * c;
      const S* p01 = x->data.data() + (static_cast<std::size_t>(ay.lo) * w + ax.hi) * c;
      const S* p10 = x->data.data() + (static_cast<std::size_t>(ay.hi) * w + ax.lo) * c;
      const S* p11 = x->data.data() + (static_cast<std::size_t>(ay.hi) * w + ax.hi) * c;
      S* orow = d.data() + (static_cast<std::size_t>(i) * out_w + j) * c;
      for (int ch = 0; ch < c; ++ch) {
        orow[ch] = wy0 * (wx0 * p00[ch] + wx1 * p01[ch]) + wy1 * (wx0 * p10[ch] + wx1 * p11[ch]);
      }
    }
  }
  auto out = Tensor<S>::create({out_h, out_w, c}, std::move(d));
  record(out, {x},
         [px = x.get(), ty = std::move(ty), tx = std::move(tx), out_h, out_w, w, c](Tensor<S>& self) {
           px->ensure_grad();
           for (int i = 0; i < out_h; ++i) {
             const auto& ay = ty[static_cast<std::size_t>(i)];
             for (int j = 0; j < out_w; ++j) {
               const auto& ax = tx[static_cast<std::size_t>(j)];
               const S wy1 = static_cast<S>(ay.w_hi), wy0 = S(1) - wy1;
               const S wx1 = static_cast<S>(ax.w_hi), wx0 = S(1) - wx1;
               const S* grow = self.grad.data() + (static_cast<std::size_t>(i) * out_w + j) * c;
               S* g00 = px->grad.data() + (static_cast<std::size_t>(ay.lo) * w + ax.lo) * c;
               S* g01 = px->grad.data() + (static_cast<std::size_t>(ay.lo) * w + ax.hi) * c;
               S* g10 = px->grad.data() + (static_cast<std::size_t>(ay.hi) * w + ax.lo) * c;
               S* g11 = px->grad.data() + (static_cast<std::size_t>(ay.hi) * w + ax.hi) * c;
               for (int ch = 0; ch < c; ++ch) {
                 const S g = grow[ch];
                 g00[ch] += wy0 * wx0 * g;
                 g01[ch] += wy0 * wx1 * g;
                 g10[ch] += wy1 * wx0 * g;
                 g11[ch] += wy1 * wx1 * g;
               }
             }
           }
         });
  return out;
}

inline constexpr int kIgnoreIndex = 255;

// Mean of -log softmax(logits)[target] over non-ignored rows. An all-ignored
// batch yields loss 0 with zero gradient. logits: [P,C].
template <typename S>
TensorPtr<S> cross_entropy_mean(const TensorPtr<S>& logits, const std::vector<int>& targets,
                                int ignore_index = kIgnoreIndex) {
  if (logits->rank() != 2) {
    throw DimensionError("cross_entropy_mean: logits must be [P,C], got " +
                         shape_str(logits->shape));
  }
  const std::size_t p = static_cast<std::size_t>(logits->shape[0]);
  const std::size_t c = static_cast<std::size_t>(logits->shape[1]);
  if (targets.size() != p) {
    throw DimensionError("cross_entropy_mean: target count mismatch");
  }
  using A = detail::acc_t<S>;
  std::size_t n_valid = 0;
  A total = A(0);
  for (std::size_t i = 0; i < p; ++i) {
    const int t = targets[i];
    if (t == ignore_index) continue;
    if (t < 0 || t >= static_cast<int>(c)) {
      throw DataError("cross_entropy_mean: target " + std::to_string(t) + " out of range at row " +
                      std::to_string(i));
    }
    const S* row = logits->data.data() + i * c;
    S mx = row[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    A sum = A(0);
    for (std::size_t j = 0; j < c; ++j) sum += std::exp(static_cast<A>(row[j] - mx));
    total += std::log(sum) + static_cast<A>(mx) - static_cast<A>(row[static_cast<std::size_t>(t)]);
    ++n_valid;
  }
  const S loss = n_valid ? static_cast<S>(total / static_cast<A>(n_valid)) : S(0);
  auto out = Tensor<S>::scalar(loss);
  record(out, {logits}, [pl = logits.get(), targets, ignore_index, p, c, n_valid](Tensor<S>& self) {
    if (n_valid == 0) {
      return;
    }
    pl->ensure_grad();
    const S g = self.grad[0] / static_cast<S>(n_valid);
    for (std::size_t i = 0; i < p; ++i) {
      const int t = targets[i];
      if (t == ignore_index) continue;
      const S* row = pl->data.data() + i * c;
      S mx = row[0];
      for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
      S sum = S(0);
      for (std::size_t j = 0; j < c; ++j) sum += std::exp(row[j] - mx);
      const S inv = S(1) / sum;
      S* grow = pl->grad.data() + i * c;
      for (std::size_t j = 0; j < c; ++j) {
        const S soft = std::exp(row[j] - mx) * inv;
        grow[j] += g * (soft - (static_cast<int>(j) == t ? S(1) : S(0)));
      }
    }
  });
  return out;
}

// Elementwise natural log of a strictly positive tensor; epsilon keeps the
// domain safe for values that round to zero.
template <typename S>
TensorPtr<S> log_elem(const TensorPtr<S>& x, S epsilon = S(0)) {
  std::vector<S> d(x->numel());
  for (std::size_t i = 0; i < d.size(); ++i) {
    const S v = x->data[i] + epsilon;
    if (!(v > S(0))) {
      throw NumericError("log_elem: non-positive input " + std::to_string(static_cast<double>(v)));
    }
    d[i] = std::log(v);
  }
  auto out = Tensor<S>::create(x->shape, std::move(d));
  record(out, {x}, [px = x.get(), epsilon](Tensor<S>& self) {
    px->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      px->grad[i] += self.grad[i] / (px->data[i] + epsilon);
    }
  });
  return out;
}

template <typename S>
TensorPtr<S> sum_all(const TensorPtr<S>& x) {
  S total = S(0);
  for (const S v : x->data) total += v;
  auto out = Tensor<S>::scalar(total);
  record(out, {x}, [px = x.get()](Tensor<S>& self) {
    px->ensure_grad();
    for (auto& g : px->grad) g += self.grad[0];
  });
  return out;
}

// Elementwise arithmetic mean of same-shaped tensors.
template <typename S>
TensorPtr<S> mean_of(const std::vector<TensorPtr<S>>& parts) {
  if (parts.empty()) {
    throw DimensionError("mean_of: empty input list");
  }
  for (const auto& p : parts) {
    detail::require_same_shape(parts[0]->shape, p->shape, "mean_of");
  }
  const S inv = S(1) / static_cast<S>(parts.size());
  std::vector<S> d(parts[0]->numel(), S(0));
  for (const auto& p : parts) {
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += p->data[i];
  }
  for (auto& v : d) v *= inv;
  auto out = Tensor<S>::create(parts[0]->shape, std::move(d));
  record(out, std::vector<TensorPtr<S>>(parts), [inv](Tensor<S>& self) {
    for (const auto& p : self.parents) {
      if (!p->requires_grad) continue;
      p->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += inv * self.grad[i];
    }
  });
  return out;
}

// Divides every row of a 2-d tensor by its row sum.
template <typename S>
TensorPtr<S> row_normalize(const TensorPtr<S>& a) {
  if (a->rank() != 2) {
    throw DimensionError("row_normalize expects a 2-d tensor, got " + shape_str(a->shape));
  }
  const std::size_t m = static_cast<std::size_t>(a->shape[0]);
  const std::size_t n = static_cast<std::size_t>(a->shape[1]);
  std::vector<S> d(m * n);
  std::vector<S> inv_sums(m);
  for (std::size_t i = 0; i < m; ++i) {
    S sum = S(0);
    for (std::size_t j = 0; j < n; ++j) sum += a->data[i * n + j];
    const S inv = S(1) / sum;
    inv_sums[i] = inv;
    for (std::size_t j = 0; j < n; ++j) d[i * n + j] = a->data[i * n + j] * inv;
  }
  auto out = Tensor<S>::create(a->shape, std::move(d));
  record(out, {a}, [pa = a.get(), m, n, inv_sums = std::move(inv_sums)](Tensor<S>& self) {
    pa->ensure_grad();
    for (std::size_t i = 0; i < m; ++i) {
      S dot = S(0);
      for (std::size_t j = 0; j < n; ++j) dot += self.grad[i * n + j] * self.data[i * n + j];
      const S inv = inv_sums[i];
      for (std::size_t j = 0; j < n; ++j) {
        pa->grad[i * n + j] += inv * (self.grad[i * n + j] - dot);
      }
    }
  });
  return out;
}

// matmul(x, w) + bias; bias may be null.
template <typename S>
TensorPtr<S> linear(const TensorPtr<S>& x, const TensorPtr<S>& w, const TensorPtr<S>& bias) {
  auto y = matmul(x, w);
  return bias ? add_row_bias(y, bias) : y;
}

// Argmax along the last axis with ties broken toward the lowest index.
template <typename S>
std::vector<int> argmax_last(const Shape& shape, const std::vector<S>& data) {
  if (shape.empty()) {
    throw DimensionError("argmax_last: rank-0 input");
  }
  const std::size_t n = static_cast<std::size_t>(shape.back());
  const std::size_t slices = data.size() / n;
  std::vector<int> out(slices);
  for (std::size_t s = 0; s < slices; ++s) {
    const S* row = data.data() + s * n;
    int best = 0;
    for (std::size_t j = 1; j < n; ++j) {
      if (row[j] > row[static_cast<std::size_t>(best)]) best = static_cast<int>(j);
    }
    out[s] = best;
  }
  return out;
}

}  // namespace emra
