#include "starformer/connectivity.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <thread>

#include <boost/math/special_functions/beta.hpp>

#include "starformer/errors.hpp"

namespace starformer {

namespace {

// In-place Cholesky solve of the SPD system A x = b (A is k x k row-major).
std::vector<double> cholesky_solve(std::vector<double> a, std::vector<double> b, std::size_t k) {
  for (std::size_t j = 0; j < k; ++j) {
    double diag = a[j * k + j];
    for (std::size_t p = 0; p < j; ++p) diag -= a[j * k + p] * a[j * k + p];
    if (!(diag > 0.0) || !std::isfinite(diag))
      throw SingularFitError("Gram matrix not positive definite at pivot " + std::to_string(j));
    const double l = std::sqrt(diag);
    a[j * k + j] = l;
    for (std::size_t i = j + 1; i < k; ++i) {
      double s = a[i * k + j];
      for (std::size_t p = 0; p < j; ++p) s -= a[i * k + p] * a[j * k + p];
      a[i * k + j] = s / l;
    }
  }
  for (std::size_t i = 0; i < k; ++i) {
    double s = b[i];
    for (std::size_t p = 0; p < i; ++p) s -= a[i * k + p] * b[p];
    b[i] = s / a[i * k + i];
  }
  for (std::size_t i = k; i-- > 0;) {
    double s = b[i];
    for (std::size_t p = i + 1; p < k; ++p) s -= a[p * k + i] * b[p];
    b[i] = s / a[i * k + i];
  }
  return b;
}

}  // namespace

OlsFit ols_ar_fit(std::span<const double> target, std::span<const std::span<const double>> predictors,
                  std::size_t lag) {
  const std::size_t m = target.size();
  const std::size_t k = 1 + predictors.size() * lag;
  if (lag == 0) throw ContractError("lag must be >= 1");
  if (m < lag || m - lag < k + 2)
    throw ContractError("series of length " + std::to_string(m) + " too short for " + std::to_string(k) +
                        " coefficients at lag " + std::to_string(lag));
  for (const auto& p : predictors)
    if (p.size() != m) throw DimensionError("predictor length differs from target");

  const std::size_t rows = m - lag;
  // Design row for time t: [1, p0(t-1) .. p0(t-lag), p1(t-1) ..].
  std::vector<double> design(rows * k);
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t t = r + lag;
    double* row = design.data() + r * k;
    row[0] = 1.0;
    for (std::size_t p = 0; p < predictors.size(); ++p)
      for (std::size_t l = 1; l <= lag; ++l) row[1 + p * lag + (l - 1)] = predictors[p][t - l];
  }
  std::vector<double> gram(k * k, 0.0), rhs(k, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = design.data() + r * k;
    const double y = target[r + lag];
    for (std::size_t i = 0; i < k; ++i) {
      rhs[i] += row[i] * y;
      for (std::size_t j = 0; j <= i; ++j) gram[i * k + j] += row[i] * row[j];
    }
  }
  for (std::size_t i = 0; i < k; ++i) {
    gram[i * k + i] += kGramJitter;
    for (std::size_t j = 0; j < i; ++j) gram[j * k + i] = gram[i * k + j];
  }
  OlsFit fit;
  fit.coefficients = cholesky_solve(std::move(gram), std::move(rhs), k);
  fit.residuals.resize(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = design.data() + r * k;
    double pred = 0.0;
    for (std::size_t i = 0; i < k; ++i) pred += row[i] * fit.coefficients[i];
    fit.residuals[r] = target[r + lag] - pred;
    fit.rss += fit.residuals[r] * fit.residuals[r];
  }
  return fit;
}

double f_distribution_sf(double f, double d1, double d2) {
  if (!(f > 0.0)) return 1.0;
  if (std::isinf(f)) return 0.0;
  return boost::math::ibeta(d2 / 2.0, d1 / 2.0, d2 / (d2 + d1 * f));
}

namespace {

GCTestResult f_test_from_fits(double rss_r, double rss_f, std::size_t lag, std::size_t m, double alpha) {
  GCTestResult res;
  res.lag = lag;
  res.rss_restricted = rss_r;
  res.rss_full = std::min(rss_f, rss_r);
  const double gain = std::max(0.0, rss_r - rss_f);
  const double df_num = static_cast<double>(lag);
  const double df_den = static_cast<double>(m - lag) - static_cast<double>(2 * lag + 1);
  if (res.rss_full <= 0.0) {
    if (gain > 0.0) {
      res.deterministic = true;
      res.f_stat = std::numeric_limits<double>::infinity();
      res.p_value = 0.0;
      res.decision = true;
    }
    return res;
  }
  res.f_stat = (gain / df_num) / (res.rss_full / df_den);
  res.p_value = f_distribution_sf(res.f_stat, df_num, df_den);
  res.decision = res.p_value < alpha;
  return res;
}

}  // namespace

GCTestResult granger_f_test(std::span<const double> src, std::span<const double> dst, std::size_t lag,
                            double alpha) {
  if (src.size() != dst.size()) throw DimensionError("src and dst lengths differ");
  const std::span<const double> own[] = {dst};
  const std::span<const double> both[] = {dst, src};
  const OlsFit restricted = ols_ar_fit(dst, own, lag);
  const OlsFit full = ols_ar_fit(dst, both, lag);
  return f_test_from_fits(restricted.rss, full.rss, lag, dst.size(), alpha);
}

Tensor zscore_rows(const Tensor& values) {
  Tensor z = values;
  const double m = static_cast<double>(values.cols());
  for (std::size_t r = 0; r < values.rows(); ++r) {
    auto row = z.row(r);
    double mean = 0.0;
    for (double v : row) mean += v;
    mean /= m;
    double var = 0.0;
    for (double v : row) var += (v - mean) * (v - mean);
    const double sd = std::sqrt(var / m);
    for (double& v : row) v = sd > 0.0 ? (v - mean) / sd : 0.0;
  }
  return z;
}

EffectiveConnectivity build_effective_connectivity(const TimeSeriesMatrix& ts, const ConnectivityOptions& opts) {
  ts.validate(opts.lag);
  if (!(opts.alpha > 0.0 && opts.alpha < 1.0)) throw ConfigError("alpha must lie in (0, 1)");
  const std::size_t n = ts.rois(), m = ts.timepoints(), lag = opts.lag;
  const Tensor z = zscore_rows(ts.values());

  EffectiveConnectivity ec;
  ec.alpha = opts.alpha;
  ec.lag = lag;
  ec.g = Tensor::zeros(n, n);
  ec.f_stat = Tensor::zeros(n, n);
  ec.p_value = Tensor({n, n}, 1.0);

  // Each worker owns a disjoint set of destination columns.
  const std::size_t workers = std::clamp<std::size_t>(opts.threads, 1, n);
  std::vector<std::size_t> warnings(workers, 0);
  auto run = [&](std::size_t worker) {
    for (std::size_t j = worker; j < n; j += workers) {
      const std::span<const double> dst = z.row(j);
      const std::span<const double> own[] = {dst};
      double rss_r = 0.0;
      try {
        rss_r = ols_ar_fit(dst, own, lag).rss;
      } catch (const SingularFitError&) {
        warnings[worker] += n - 1;
        continue;
      }
      for (std::size_t i = 0; i < n; ++i) {
        if (i == j) continue;
        const std::span<const double> both[] = {dst, z.row(i)};
        try {
          const OlsFit full = ols_ar_fit(dst, both, lag);
          const GCTestResult res = f_test_from_fits(rss_r, full.rss, lag, m, opts.alpha);
          ec.g.at(i, j) = res.decision ? 1.0 : 0.0;
          ec.f_stat.at(i, j) = std::isinf(res.f_stat) ? std::numeric_limits<double>::max() : res.f_stat;
          ec.p_value.at(i, j) = res.p_value;
        } catch (const SingularFitError&) {
          ++warnings[worker];
        }
      }
    }
  };
  if (workers == 1) {
    run(0);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(run, w);
    for (auto& t : pool) t.join();
  }
  for (auto w : warnings) ec.warnings += w;
  return ec;
}

}  // namespace starformer
