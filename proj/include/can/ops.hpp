#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "can/random.hpp"
#include "can/tensor.hpp"

namespace can {

namespace detail {

template <typename T>
void require_rank(const Tensor<T>& x, std::size_t rank, const char* op) {
  if (x.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(x.shape()));
  }
}

template <typename T>
bool wants_grad(const Node<T>& out, std::size_t i) {
  return out.inputs[i]->requires_grad;
}

// Splits a shape around `axis` into (outer, extent, inner) strides.
inline void axis_split(const Shape& s, std::size_t axis, std::size_t& outer, std::size_t& n,
                       std::size_t& inner) {
  outer = 1;
  inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  n = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
}

template <typename T, typename Fwd, typename Deriv>
Tensor<T> unary(const char* name, const Tensor<T>& x, Fwd fwd, Deriv deriv) {
  std::vector<T> out(x.numel());
  auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(in[i]);
  return make_op<T>(name, x.shape(), std::move(out), {x}, [deriv](Node<T>& o) {
    auto& gx = o.inputs[0]->grad_buffer();
    const auto& xv = o.inputs[0]->value;
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += o.grad[i] * deriv(xv[i], o.value[i]);
  });
}

}  // namespace detail

/// a[m×k] · b[k×n]
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: cannot multiply " + shape_str(a.shape()) + " by " +
                         shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(m * n, T(0));
  const T* av = a.data().data();
  const T* bv = b.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    T* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T s = av[i * k + p];
      const T* brow = bv + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += s * brow[j];
    }
  }
  return make_op<T>("matmul", {m, n}, std::move(out), {a, b}, [m, k, n](Node<T>& o) {
    const T* g = o.grad.data();
    const T* av = o.inputs[0]->value.data();
    const T* bv = o.inputs[1]->value.data();
    if (detail::wants_grad(o, 0)) {
      T* ga = o.inputs[0]->grad_buffer().data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          T acc = 0;
          for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * bv[p * n + j];
          ga[i * k + p] += acc;
        }
    }
    if (detail::wants_grad(o, 1)) {
      T* gb = o.inputs[1]->grad_buffer().data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const T s = av[i * k + p];
          for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += s * g[i * n + j];
        }
    }
  });
}

/// Elementwise a + b. `b` may also be a vector matching a's last extent, added
/// to every leading slice (bias-add); no other broadcasting.
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  const bool same = a.shape() == b.shape();
  const bool bias = !same && b.rank() == 1 && a.shape().back() == b.dim(0);
  if (!same && !bias) {
    throw DimensionError("add: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const std::size_t w = b.numel();
  std::vector<T> out(a.data().begin(), a.data().end());
  auto bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i % w];
  return make_op<T>("add", a.shape(), std::move(out), {a, b}, [w](Node<T>& o) {
    if (detail::wants_grad(o, 0)) {
      auto& ga = o.inputs[0]->grad_buffer();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += o.grad[i];
    }
    if (detail::wants_grad(o, 1)) {
      auto& gb = o.inputs[1]->grad_buffer();
      for (std::size_t i = 0; i < o.grad.size(); ++i) gb[i % w] += o.grad[i];
    }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("sub: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  std::vector<T> out(a.numel());
  auto av = a.data();
  auto bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return make_op<T>("sub", a.shape(), std::move(out), {a, b}, [](Node<T>& o) {
    if (detail::wants_grad(o, 0)) {
      auto& ga = o.inputs[0]->grad_buffer();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += o.grad[i];
    }
    if (detail::wants_grad(o, 1)) {
      auto& gb = o.inputs[1]->grad_buffer();
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= o.grad[i];
    }
  });
}

/// Elementwise (Hadamard) product of equally shaped tensors.
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("mul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  std::vector<T> out(a.numel());
  auto av = a.data();
  auto bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return make_op<T>("mul", a.shape(), std::move(out), {a, b}, [](Node<T>& o) {
    const auto& av = o.inputs[0]->value;
    const auto& bv = o.inputs[1]->value;
    if (detail::wants_grad(o, 0)) {
      auto& ga = o.inputs[0]->grad_buffer();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += o.grad[i] * bv[i];
    }
    if (detail::wants_grad(o, 1)) {
      auto& gb = o.inputs[1]->grad_buffer();
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += o.grad[i] * av[i];
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  return detail::unary<T>(
      "scale", x, [factor](T v) { return v * factor; }, [factor](T, T) { return factor; });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::unary<T>(
      "relu", x, [](T v) { return v > T(0) ? v : T(0); },
      [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& x) {
  return detail::unary<T>(
      "tanh", x, [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary<T>(
      "sigmoid", x, [](T v) { return T(1) / (T(1) + std::exp(-v)); },
      [](T, T y) { return y * (T(1) - y); });
}

/// Sum of all elements, shape [1].
template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T s = 0;
  for (T v : x.data()) s += v;
  return make_op<T>("sum", {1}, {s}, {x}, [](Node<T>& o) {
    auto& g = o.inputs[0]->grad_buffer();
    for (auto& v : g) v += o.grad[0];
  });
}

/// Mean of all elements, shape [1].
template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  const T inv = T(1) / static_cast<T>(x.numel());
  T s = 0;
  for (T v : x.data()) s += v;
  return make_op<T>("mean", {1}, {s * inv}, {x}, [inv](Node<T>& o) {
    auto& g = o.inputs[0]->grad_buffer();
    for (auto& v : g) v += o.grad[0] * inv;
  });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  std::vector<T> out(x.data().begin(), x.data().end());
  return make_op<T>("reshape", std::move(shape), std::move(out), {x}, [](Node<T>& o) {
    auto& g = o.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
  });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
  detail::require_rank(x, 2, "transpose");
  const std::size_t r = x.dim(0), c = x.dim(1);
  std::vector<T> out(r * c);
  auto xv = x.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = xv[i * c + j];
  return make_op<T>("transpose", {c, r}, std::move(out), {x}, [r, c](Node<T>& o) {
    auto& g = o.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += o.grad[j * r + i];
  });
}

/// Concatenation along `axis`; all other extents must agree.
template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw DimensionError("concat: axis out of range");
  Shape shape = first;
  shape[axis] = 0;
  for (const auto& p : parts) {
    bool ok = p.rank() == first.size();
    for (std::size_t i = 0; ok && i < first.size(); ++i) ok = i == axis || p.dim(i) == first[i];
    if (!ok) {
      throw DimensionError("concat: " + shape_str(p.shape()) + " does not match " +
                           shape_str(first) + " off axis " + std::to_string(axis));
    }
    shape[axis] += p.dim(axis);
  }
  std::size_t outer, n, inner;
  detail::axis_split(shape, axis, outer, n, inner);
  std::vector<T> out(shape_numel(shape));
  std::vector<std::size_t> widths;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.dim(axis) * inner;
    auto pv = p.data();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(pv.begin() + o * w, w, out.begin() + o * n * inner + offset);
    widths.push_back(w);
    offset += w;
  }
  const std::size_t row = n * inner;
  return make_op<T>("concat", std::move(shape), std::move(out), parts,
                    [widths, outer, row](Node<T>& o) {
                      std::size_t off = 0;
                      for (std::size_t k = 0; k < widths.size(); ++k) {
                        const std::size_t w = widths[k];
                        if (o.inputs[k]->requires_grad) {
                          auto& g = o.inputs[k]->grad_buffer();
                          for (std::size_t r = 0; r < outer; ++r)
                            for (std::size_t i = 0; i < w; ++i) g[r * w + i] += o.grad[r * row + off + i];
                        }
                        off += w;
                      }
                    });
}

/// Half-open range [begin, end) along `axis`.
template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t begin, std::size_t end) {
  if (axis >= x.rank() || begin >= end || end > x.dim(axis)) {
    throw DimensionError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") on axis " + std::to_string(axis) + " of " + shape_str(x.shape()));
  }
  std::size_t outer, n, inner;
  detail::axis_split(x.shape(), axis, outer, n, inner);
  Shape shape = x.shape();
  shape[axis] = end - begin;
  const std::size_t w = (end - begin) * inner, src_row = n * inner, off = begin * inner;
  std::vector<T> out(outer * w);
  auto xv = x.data();
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(xv.begin() + o * src_row + off, w, out.begin() + o * w);
  return make_op<T>("slice", std::move(shape), std::move(out), {x},
                    [outer, w, src_row, off](Node<T>& o) {
                      auto& g = o.inputs[0]->grad_buffer();
                      for (std::size_t r = 0; r < outer; ++r)
                        for (std::size_t i = 0; i < w; ++i) g[r * src_row + off + i] += o.grad[r * w + i];
                    });
}

/// Max-stabilized softmax along `axis`.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  if (axis >= x.rank()) throw DimensionError("softmax: axis out of range for " + shape_str(x.shape()));
  std::size_t outer, n, inner;
  detail::axis_split(x.shape(), axis, outer, n, inner);
  std::vector<T> out(x.numel());
  auto xv = x.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, xv[base + j * inner]);
      T total = 0;
      for (std::size_t j = 0; j < n; ++j) {
        out[base + j * inner] = std::exp(xv[base + j * inner] - mx);
        total += out[base + j * inner];
      }
      for (std::size_t j = 0; j < n; ++j) out[base + j * inner] /= total;
    }
  return make_op<T>("softmax", x.shape(), std::move(out), {x}, [outer, n, inner](Node<T>& o) {
    auto& g = o.inputs[0]->grad_buffer();
    for (std::size_t a = 0; a < outer; ++a)
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = a * n * inner + in;
        T dot = 0;
        for (std::size_t j = 0; j < n; ++j) dot += o.grad[base + j * inner] * o.value[base + j * inner];
        for (std::size_t j = 0; j < n; ++j) {
          const std::size_t idx = base + j * inner;
          g[idx] += o.value[idx] * (o.grad[idx] - dot);
        }
      }
  });
}

/// −log softmax(logits)[gold] for a logit vector (any shape with numel = classes).
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::size_t gold) {
  const std::size_t n = logits.numel();
  if (gold >= n) {
    throw ContractError("cross_entropy: gold index " + std::to_string(gold) + " outside " +
                        std::to_string(n) + " classes");
  }
  auto lv = logits.data();
  const T mx = *std::max_element(lv.begin(), lv.end());
  T total = 0;
  for (T v : lv) total += std::exp(v - mx);
  const T lse = mx + std::log(total);
  return make_op<T>("cross_entropy", {1}, {lse - lv[gold]}, {logits}, [gold, lse](Node<T>& o) {
    auto& g = o.inputs[0]->grad_buffer();
    const auto& lv = o.inputs[0]->value;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T p = std::exp(lv[i] - lse);
      g[i] += o.grad[0] * (p - (i == gold ? T(1) : T(0)));
    }
  });
}

/// Inverted dropout: scales kept units by 1/(1-p) in training, identity otherwise.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, bool training, Rng* rng) {
  if (p < 0.0 || p >= 1.0) throw ContractError("dropout: p must lie in [0, 1)");
  if (!training || p == 0.0) return x;
  if (!rng) throw ContractError("dropout: training mode needs a random source");
  const T keep_scale = T(1) / static_cast<T>(1.0 - p);
  std::vector<T> mask(x.numel());
  for (auto& m : mask) m = rng->bernoulli(p) ? T(0) : keep_scale;
  std::vector<T> out(x.numel());
  auto xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * mask[i];
  return make_op<T>("dropout", x.shape(), std::move(out), {x}, [mask](Node<T>& o) {
    auto& g = o.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * mask[i];
  });
}

/// Rows of `table` [V×d] selected by `ids`, shape [m×d].
template <typename T>
Tensor<T> embedding_lookup(const Tensor<T>& table, std::span<const int> ids) {
  detail::require_rank(table, 2, "embedding_lookup");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  std::vector<T> out(ids.size() * d);
  auto tv = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw DimensionError("embedding_lookup: id " + std::to_string(ids[i]) + " outside vocabulary of " +
                           std::to_string(vocab));
    }
    std::copy_n(tv.begin() + ids[i] * d, d, out.begin() + i * d);
  }
  std::vector<int> idx(ids.begin(), ids.end());
  return make_op<T>("embedding_lookup", {ids.size(), d}, std::move(out), {table},
                    [idx, d](Node<T>& o) {
                      auto& g = o.inputs[0]->grad_buffer();
                      for (std::size_t i = 0; i < idx.size(); ++i)
                        for (std::size_t j = 0; j < d; ++j) g[idx[i] * d + j] += o.grad[i * d + j];
                    });
}

/// Row gather from x [k×d]; index −1 yields a zero row. Shape [len(rows)×d].
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const long> rows) {
  detail::require_rank(x, 2, "gather_rows");
  const std::size_t k = x.dim(0), d = x.dim(1);
  std::vector<T> out(rows.size() * d, T(0));
  auto xv = x.data();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0) continue;
    if (static_cast<std::size_t>(rows[i]) >= k) {
      throw DimensionError("gather_rows: row " + std::to_string(rows[i]) + " outside " +
                           std::to_string(k) + " rows");
    }
    std::copy_n(xv.begin() + rows[i] * d, d, out.begin() + i * d);
  }
  std::vector<long> idx(rows.begin(), rows.end());
  return make_op<T>("gather_rows", {rows.size(), d}, std::move(out), {x}, [idx, d](Node<T>& o) {
    auto& g = o.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < idx.size(); ++i) {
      if (idx[i] < 0) continue;
      for (std::size_t j = 0; j < d; ++j) g[idx[i] * d + j] += o.grad[i * d + j];
    }
  });
}

/// Normalizes each vector along the last axis, then applies gamma/beta.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  const std::size_t d = x.shape().back();
  if (gamma.numel() != d || beta.numel() != d) {
    throw DimensionError("layer_norm: feature width " + std::to_string(d) + " vs gamma " +
                         shape_str(gamma.shape()) + ", beta " + shape_str(beta.shape()));
  }
  if (!(eps > T(0))) throw ContractError("layer_norm: eps must be positive");
  const std::size_t rows = x.numel() / d;
  std::vector<T> xhat(x.numel()), inv_std(rows), out(x.numel());
  auto xv = x.data();
  auto gv = gamma.data();
  auto bv = beta.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv.data() + r * d;
    T mu = 0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<T>(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<T>(d);
    inv_std[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (row[j] - mu) * inv_std[r];
      out[r * d + j] = gv[j] * xhat[r * d + j] + bv[j];
    }
  }
  return make_op<T>(
      "layer_norm", x.shape(), std::move(out), {x, gamma, beta},
      [xhat = std::move(xhat), inv_std = std::move(inv_std), d, rows](Node<T>& o) {
        const auto& gv = o.inputs[1]->value;
        if (detail::wants_grad(o, 1)) {
          auto& gg = o.inputs[1]->grad_buffer();
          for (std::size_t i = 0; i < o.grad.size(); ++i) gg[i % d] += o.grad[i] * xhat[i];
        }
        if (detail::wants_grad(o, 2)) {
          auto& gb = o.inputs[2]->grad_buffer();
          for (std::size_t i = 0; i < o.grad.size(); ++i) gb[i % d] += o.grad[i];
        }
        if (detail::wants_grad(o, 0)) {
          auto& gx = o.inputs[0]->grad_buffer();
          const T inv_d = T(1) / static_cast<T>(d);
          for (std::size_t r = 0; r < rows; ++r) {
            T s1 = 0, s2 = 0;
            for (std::size_t j = 0; j < d; ++j) {
              const T gh = o.grad[r * d + j] * gv[j];
              s1 += gh;
              s2 += gh * xhat[r * d + j];
            }
            for (std::size_t j = 0; j < d; ++j) {
              const T gh = o.grad[r * d + j] * gv[j];
              gx[r * d + j] += inv_std[r] * (gh - inv_d * s1 - xhat[r * d + j] * inv_d * s2);
            }
          }
        }
      });
}

}  // namespace can
