#pragma once

// Scalar-loop reference implementations. Nothing here touches the tape or
// the library ops, so agreement with them is an independent check.

#include <cmath>
#include <cstdint>
#include <vector>

#include "can/attention.hpp"
#include "can/random.hpp"
#include "can/tensor.hpp"

namespace oracle {

struct Mat {
  std::size_t rows = 0, cols = 0;
  std::vector<double> v;

  Mat() = default;
  Mat(std::size_t r, std::size_t c) : rows(r), cols(c), v(r * c, 0.0) {}
  Mat(std::size_t r, std::size_t c, std::vector<double> values) : rows(r), cols(c), v(std::move(values)) {}

  double& operator()(std::size_t i, std::size_t j) { return v[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const { return v[i * cols + j]; }
};

inline Mat of(const can::Tensor<double>& t) {
  const std::size_t r = t.rank() == 1 ? 1 : t.dim(0);
  return Mat(r, t.numel() / r, std::vector<double>(t.data().begin(), t.data().end()));
}

inline can::Tensor<double> tensor(const Mat& m, bool requires_grad = false) {
  return can::Tensor<double>({m.rows, m.cols}, m.v, requires_grad);
}

inline Mat random_mat(std::size_t r, std::size_t c, can::Rng& rng, double scale = 1.0) {
  Mat m(r, c);
  for (auto& x : m.v) x = rng.uniform(-scale, scale);
  return m;
}

inline Mat matmul(const Mat& a, const Mat& b) {
  Mat out(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t j = 0; j < b.cols; ++j) {
      double s = 0;
      for (std::size_t k = 0; k < a.cols; ++k) s += a(i, k) * b(k, j);
      out(i, j) = s;
    }
  return out;
}

inline std::vector<double> softmax(const std::vector<double>& x) {
  double mx = x[0];
  for (double v : x) mx = std::max(mx, v);
  std::vector<double> e(x.size());
  double z = 0;
  for (std::size_t i = 0; i < x.size(); ++i) z += e[i] = std::exp(x[i] - mx);
  for (auto& v : e) v /= z;
  return e;
}

struct Attention {
  Mat out;
  Mat weights;
};

/// Masked keys are dropped from the normalization entirely.
inline Attention sdpa(const Mat& q, const Mat& k, const Mat& v, const std::vector<std::uint8_t>& mask = {}) {
  Attention r{Mat(q.rows, v.cols), Mat(q.rows, k.rows)};
  const double s = 1.0 / std::sqrt(static_cast<double>(q.cols));
  for (std::size_t i = 0; i < q.rows; ++i) {
    double mx = -1e300;
    std::vector<double> score(k.rows);
    for (std::size_t j = 0; j < k.rows; ++j) {
      double dot = 0;
      for (std::size_t c = 0; c < q.cols; ++c) dot += q(i, c) * k(j, c);
      score[j] = dot * s;
      if (mask.empty() || mask[j]) mx = std::max(mx, score[j]);
    }
    double z = 0;
    for (std::size_t j = 0; j < k.rows; ++j) {
      const bool live = mask.empty() || mask[j];
      r.weights(i, j) = live ? std::exp(score[j] - mx) : 0.0;
      z += r.weights(i, j);
    }
    for (std::size_t j = 0; j < k.rows; ++j) r.weights(i, j) /= z;
    for (std::size_t j = 0; j < k.rows; ++j)
      for (std::size_t c = 0; c < v.cols; ++c) r.out(i, c) += r.weights(i, j) * v(j, c);
  }
  return r;
}

struct Heads {
  std::vector<Mat> wq, wk, wv;
  Mat wo;
};

inline Heads heads_of(const can::MhaParams<double>& p) {
  Heads h;
  for (std::size_t i = 0; i < p.heads(); ++i) {
    h.wq.push_back(of(p.w_query[i]));
    h.wk.push_back(of(p.w_key[i]));
    h.wv.push_back(of(p.w_value[i]));
  }
  h.wo = of(p.w_out);
  return h;
}

inline Mat multi_head(const Mat& q, const Mat& k, const Mat& v, const Heads& p,
                      const std::vector<std::uint8_t>& mask = {}) {
  const std::size_t dv = p.wv.front().cols;
  Mat cat(q.rows, dv * p.wq.size());
  for (std::size_t h = 0; h < p.wq.size(); ++h) {
    auto head = sdpa(matmul(q, p.wq[h]), matmul(k, p.wk[h]), matmul(v, p.wv[h]), mask).out;
    for (std::size_t i = 0; i < q.rows; ++i)
      for (std::size_t c = 0; c < dv; ++c) cat(i, h * dv + c) = head(i, c);
  }
  return matmul(cat, p.wo);
}

inline Mat layer_norm(const Mat& x, const std::vector<double>& gamma, const std::vector<double>& beta,
                      double eps = 1e-5) {
  Mat out(x.rows, x.cols);
  for (std::size_t i = 0; i < x.rows; ++i) {
    double mu = 0, var = 0;
    for (std::size_t j = 0; j < x.cols; ++j) mu += x(i, j);
    mu /= static_cast<double>(x.cols);
    for (std::size_t j = 0; j < x.cols; ++j) var += (x(i, j) - mu) * (x(i, j) - mu);
    var /= static_cast<double>(x.cols);
    for (std::size_t j = 0; j < x.cols; ++j) out(i, j) = gamma[j] * (x(i, j) - mu) / std::sqrt(var + eps) + beta[j];
  }
  return out;
}

inline Mat layer_norm(const Mat& x, double eps = 1e-5) {
  return layer_norm(x, std::vector<double>(x.cols, 1.0), std::vector<double>(x.cols, 0.0), eps);
}

/// Linear layers given as (weight, bias) pairs, ReLU between them.
struct Layer {
  Mat w;
  std::vector<double> b;
};

inline std::vector<Layer> layers_of(const can::Mlp<double>& m) {
  std::vector<Layer> out;
  for (const auto& l : m.layers) out.push_back({of(l.weight), {l.bias.data().begin(), l.bias.data().end()}});
  return out;
}

inline Mat linear(const Mat& x, const Layer& l) {
  Mat out = matmul(x, l.w);
  for (std::size_t i = 0; i < out.rows; ++i)
    for (std::size_t j = 0; j < out.cols; ++j) out(i, j) += l.b[j];
  return out;
}

inline Mat mlp(const Mat& x, const std::vector<Layer>& layers) {
  Mat h = x;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    h = linear(h, layers[i]);
    if (i + 1 < layers.size())
      for (auto& v : h.v) v = std::max(0.0, v);
  }
  return h;
}

struct Reduced {
  std::vector<double> pooled;
  std::vector<double> alpha;
};

inline Reduced reduce(const Mat& z, const std::vector<std::uint8_t>& mask, const std::vector<Layer>& score) {
  const Mat s = mlp(z, score);
  double mx = -1e300;
  for (std::size_t i = 0; i < z.rows; ++i)
    if (mask.empty() || mask[i]) mx = std::max(mx, s(i, 0));
  Reduced r{std::vector<double>(z.cols, 0.0), std::vector<double>(z.rows, 0.0)};
  double total = 0;
  for (std::size_t i = 0; i < z.rows; ++i) {
    if (!mask.empty() && !mask[i]) continue;
    total += r.alpha[i] = std::exp(s(i, 0) - mx);
  }
  for (std::size_t i = 0; i < z.rows; ++i) {
    r.alpha[i] /= total;
    for (std::size_t j = 0; j < z.cols; ++j) r.pooled[j] += r.alpha[i] * z(i, j);
  }
  return r;
}

inline std::vector<double> fuse(const std::vector<double>& zq, const std::vector<double>& zr, const Mat& w1,
                                const Mat& w2, const std::vector<double>& gamma, const std::vector<double>& beta) {
  Mat pre(1, w1.cols);
  for (std::size_t j = 0; j < w1.cols; ++j)
    for (std::size_t i = 0; i < w1.rows; ++i) pre(0, j) += zq[i] * w1(i, j) + zr[i] * w2(i, j);
  return layer_norm(pre, gamma, beta).v;
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// One LSTM direction with gate blocks input | forget | cell | output.
inline Mat lstm_direction(const Mat& seq, const Mat& wi, const Mat& wh, const std::vector<double>& b, bool reverse) {
  const std::size_t m = seq.rows, h = wh.rows;
  Mat out(m, h);
  std::vector<double> hp(h, 0.0), cp(h, 0.0);
  for (std::size_t step = 0; step < m; ++step) {
    const std::size_t t = reverse ? m - 1 - step : step;
    std::vector<double> g(4 * h);
    for (std::size_t j = 0; j < 4 * h; ++j) {
      double s = b[j];
      for (std::size_t c = 0; c < seq.cols; ++c) s += seq(t, c) * wi(c, j);
      for (std::size_t c = 0; c < h; ++c) s += hp[c] * wh(c, j);
      g[j] = s;
    }
    for (std::size_t j = 0; j < h; ++j) {
      const double i = sigmoid(g[j]), f = sigmoid(g[h + j]), cand = std::tanh(g[2 * h + j]), o = sigmoid(g[3 * h + j]);
      cp[j] = f * cp[j] + i * cand;
      hp[j] = o * std::tanh(cp[j]);
      out(t, j) = hp[j];
    }
  }
  return out;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double worst = a.size() == b.size() ? 0.0 : 1e300;
  for (std::size_t i = 0; i < std::min(a.size(), b.size()); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

}  // namespace oracle
