#pragma once
// Pairwise Granger causality and the binary effective-connectivity matrix.
//
// Each test compares two OLS fits of dst(t) on an intercept and lags 1..h:
//   restricted: dst's own lags
//   full:       dst's own lags plus src's lags
// F = ((rss_r - rss_f) / h) / (rss_f / (N - 2h - 1)), N = m - h observations.

#include <cstddef>
#include <span>
#include <vector>

#include "starformer/numkernel.hpp"
#include "starformer/timeseries.hpp"

namespace starformer {

struct OlsFit {
  std::vector<double> coefficients;  // intercept first, then lags per predictor
  std::vector<double> residuals;     // t = lag .. m-1
  double rss = 0.0;
};

constexpr double kGramJitter = 1e-10;

// Regresses target(t) on [1, p(t-1) .. p(t-lag) for each p in predictors].
OlsFit ols_ar_fit(std::span<const double> target, std::span<const std::span<const double>> predictors,
                  std::size_t lag);

struct GCTestResult {
  double f_stat = 0.0;
  double p_value = 1.0;
  bool decision = false;
  std::size_t lag = 1;
  double rss_restricted = 0.0;
  double rss_full = 0.0;
  bool deterministic = false;  // rss_full == 0 < rss_restricted
};

// Upper tail P(X > f) for X ~ F(d1, d2).
double f_distribution_sf(double f, double d1, double d2);

GCTestResult granger_f_test(std::span<const double> src, std::span<const double> dst, std::size_t lag,
                            double alpha);

struct EffectiveConnectivity {
  Tensor g;        // [n, n], entries 0/1, g(i, j) = 1 means i Granger-causes j
  Tensor f_stat;   // per-pair diagnostics; diagonal zero
  Tensor p_value;  // diagonal one
  double alpha = 0.05;
  std::size_t lag = 1;
  std::size_t warnings = 0;  // singular fits reported as decision 0

  std::size_t n() const noexcept { return g.empty() ? 0 : g.rows(); }
};

struct ConnectivityOptions {
  std::size_t lag = 1;
  double alpha = 0.05;
  std::size_t threads = 1;
};

// Per-ROI z-scoring; constant rows become zeros.
Tensor zscore_rows(const Tensor& values);

EffectiveConnectivity build_effective_connectivity(const TimeSeriesMatrix& ts, const ConnectivityOptions& opts = {});

}  // namespace starformer
