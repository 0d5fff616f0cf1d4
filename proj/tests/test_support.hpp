#pragma once
// Test-only oracles and generators. Nothing here calls into the code paths it
// is used to check.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <random>
#include <vector>

#include "starformer/numkernel.hpp"

namespace starformer::testing {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> n(0.0, scale);
  for (double& v : t.data()) v = n(rng);
  return t;
}

// Composite Simpson rule on [a, b] with an even number of panels.
inline double simpson(const std::function<double(double)>& f, double a, double b, int panels = 20000) {
  if (panels % 2) ++panels;
  const double h = (b - a) / panels;
  double s = f(a) + f(b);
  for (int i = 1; i < panels; ++i) s += f(a + i * h) * (i % 2 ? 4.0 : 2.0);
  return s * h / 3.0;
}

inline double normal_cdf_by_quadrature(double x) {
  const auto pdf = [](double t) { return std::exp(-0.5 * t * t) / std::sqrt(2.0 * M_PI); };
  return 0.5 + simpson(pdf, 0.0, x);
}

// Central finite differences of a scalar function over every entry of `param`.
inline Tensor central_differences(Tensor& param, const std::function<double()>& loss, double h = 1e-5) {
  Tensor g(param.shape());
  for (std::size_t i = 0; i < param.numel(); ++i) {
    const double keep = param[i];
    param[i] = keep + h;
    const double up = loss();
    param[i] = keep - h;
    const double down = loss();
    param[i] = keep;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

// Max over entries of |a - b| / max(scale_floor, |a|, |b|).
inline double max_relative_error(const Tensor& a, const Tensor& b, double scale_floor = 1e-6) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double denom = std::max({scale_floor, std::abs(a[i]), std::abs(b[i])});
    worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
  }
  return worst;
}

// Plain multi-head self-attention with explicit loops: per head,
// softmax(Q K^T / sqrt(dh)) V over all tokens, then the output projection.
// Weights are [d, d] with bias vectors, applied as x W + b.
inline Tensor naive_self_attention(const Tensor& x, const Tensor& wq, const Tensor& bq, const Tensor& wk,
                                   const Tensor& bk, const Tensor& wv, const Tensor& bv, const Tensor& wo,
                                   const Tensor& bo, std::size_t heads) {
  const std::size_t n = x.rows(), d = x.cols(), dh = d / heads;
  auto project = [&](const Tensor& w, const Tensor& b) {
    Tensor y = Tensor::zeros(n, d);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) {
        double s = b[j];
        for (std::size_t k = 0; k < d; ++k) s += x.at(i, k) * w.at(k, j);
        y.at(i, j) = s;
      }
    return y;
  };
  const Tensor q = project(wq, bq), k = project(wk, bk), v = project(wv, bv);
  Tensor mixed = Tensor::zeros(n, d);
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> s(n);
      double mx = -1e300;
      for (std::size_t j = 0; j < n; ++j) {
        double dot = 0.0;
        for (std::size_t u = 0; u < dh; ++u) dot += q.at(i, h * dh + u) * k.at(j, h * dh + u);
        s[j] = dot / std::sqrt(static_cast<double>(dh));
        mx = std::max(mx, s[j]);
      }
      double z = 0.0;
      for (double& e : s) z += (e = std::exp(e - mx));
      for (std::size_t j = 0; j < n; ++j)
        for (std::size_t u = 0; u < dh; ++u) mixed.at(i, h * dh + u) += s[j] / z * v.at(j, h * dh + u);
    }
  Tensor out = Tensor::zeros(n, d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      double s = bo[j];
      for (std::size_t k = 0; k < d; ++k) s += mixed.at(i, k) * wo.at(k, j);
      out.at(i, j) = s;
    }
  return out;
}

}  // namespace starformer::testing
