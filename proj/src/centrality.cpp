#include "starformer/centrality.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "starformer/errors.hpp"

namespace starformer {

namespace {

double teleport_weight(const Tensor& g, double teleport) {
  double mx = 0.0;
  for (double v : g.data()) mx = std::max(mx, v);
  return mx > 0.0 ? teleport * mx : teleport;
}

void check_adjacency(const Tensor& g) {
  if (g.rank() != 2 || g.rows() != g.cols() || g.empty())
    throw DimensionError("adjacency must be a non-empty square matrix, got " + shape_string(g.shape()));
  for (std::size_t i = 0; i < g.rows(); ++i) {
    if (g.at(i, i) != 0.0) throw ContractError("adjacency diagonal must be zero");
    for (double v : g.row(i))
      if (!(v >= 0.0) || !std::isfinite(v)) throw ContractError("adjacency entries must be finite and nonnegative");
  }
}

}  // namespace

Tensor regularized_adjacency(const Tensor& g, double teleport) {
  Tensor a = g;
  const double tau = teleport_weight(g, teleport);
  for (double& v : a.data()) v += tau;
  return a;
}

CentralityVector eigenvector_centrality(const Tensor& g, const CentralityOptions& opts) {
  check_adjacency(g);
  const std::size_t n = g.rows();
  const double tau = teleport_weight(g, opts.teleport);
  // A + s I has the same eigenvectors as A; the shift breaks the tie between
  // the Perron root and other eigenvalues on the same circle (periodic graphs).
  double total = 0.0;
  for (double v : g.data()) total += v;
  const double shift = (total + tau * static_cast<double>(n * n)) / static_cast<double>(n);

  std::vector<double> p(n, 1.0 / static_cast<double>(n)), next(n);
  CentralityVector out;
  for (std::size_t it = 1; it <= opts.max_iterations; ++it) {
    // A p = G p + tau * sum(p) * 1, and sum(p) == 1 after normalisation.
    double norm = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      const auto row = g.row(i);
      for (std::size_t j = 0; j < n; ++j) s += row[j] * p[j];
      next[i] = s + tau + shift * p[i];
      norm += next[i];
    }
    double diff = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      next[i] /= norm;
      diff += std::abs(next[i] - p[i]);
    }
    p.swap(next);
    if (diff <= opts.tolerance) {
      out.iterations = it;
      double gp = 0.0;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) gp += g.at(i, j) * p[j];
      out.eigenvalue = gp;
      out.raw_eigenvalue = gp + tau * static_cast<double>(n);
      out.p = std::move(p);
      return out;
    }
  }
  throw ConvergenceError("power iteration did not converge in " + std::to_string(opts.max_iterations) + " steps",
                         std::move(p));
}

CentralityVector average_centrality(std::span<const CentralityVector> per_subject) {
  if (per_subject.empty()) throw ContractError("average_centrality needs at least one vector");
  const std::size_t n = per_subject.front().p.size();
  CentralityVector out;
  out.p.assign(n, 0.0);
  for (const auto& c : per_subject) {
    if (c.p.size() != n) throw ContractError("centrality vectors differ in length");
    for (std::size_t i = 0; i < n; ++i) out.p[i] += c.p[i];
    out.eigenvalue += c.eigenvalue;
    out.raw_eigenvalue += c.raw_eigenvalue;
  }
  const double k = static_cast<double>(per_subject.size());
  for (double& v : out.p) v /= k;
  out.eigenvalue /= k;
  out.raw_eigenvalue /= k;
  const double s = std::accumulate(out.p.begin(), out.p.end(), 0.0);
  if (s > 0.0)
    for (double& v : out.p) v /= s;
  return out;
}

std::string_view network_name(Network net) {
  switch (net) {
    case Network::visual: return "visual";
    case Network::somatomotor: return "somatomotor";
    case Network::dorsal_attention: return "dorsal_attention";
    case Network::ventral_attention: return "ventral_attention";
    case Network::limbic: return "limbic";
    case Network::frontoparietal: return "frontoparietal";
    case Network::default_mode: return "default";
  }
  return "unknown";
}

Network parse_network(std::string_view label) {
  std::string s;
  for (char c : label) {
    if (c == ' ' || c == '-') c = '_';
    s.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  }
  if (s == "visual" || s == "vis") return Network::visual;
  if (s == "somatomotor" || s == "sommot") return Network::somatomotor;
  if (s == "dorsal_attention" || s == "dorsattn") return Network::dorsal_attention;
  if (s == "ventral_attention" || s == "salventattn") return Network::ventral_attention;
  if (s == "limbic") return Network::limbic;
  if (s == "frontoparietal" || s == "cont") return Network::frontoparietal;
  if (s == "default" || s == "default_mode") return Network::default_mode;
  throw AtlasError("unknown network label '" + std::string(label) + "'");
}

void AtlasPartition::validate() const {
  if (roi_ids.size() != network_of.size()) throw AtlasError("roi ids and network labels differ in count");
  std::vector<std::string> sorted = roi_ids;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) throw AtlasError("duplicate roi_id");
}

std::string_view provenance_name(OrderingProvenance p) {
  switch (p) {
    case OrderingProvenance::ec_sorted: return "ec_sorted";
    case OrderingProvenance::random: return "random";
    case OrderingProvenance::identity: return "identity";
  }
  return "unknown";
}

ROIOrdering ROIOrdering::identity(std::size_t n) {
  ROIOrdering o;
  o.perm.resize(n);
  std::iota(o.perm.begin(), o.perm.end(), std::size_t{0});
  return o;
}

ROIOrdering ROIOrdering::random(std::size_t n, std::mt19937_64& rng) {
  ROIOrdering o = identity(n);
  // Fisher-Yates with an explicit draw so the result does not depend on the
  // standard library's shuffle.
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(o.perm[i - 1], o.perm[j]);
  }
  o.provenance = OrderingProvenance::random;
  return o;
}

ROIOrdering ROIOrdering::inverse() const {
  validate();
  ROIOrdering inv;
  inv.provenance = provenance;
  inv.perm.resize(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) inv.perm[perm[i]] = i;
  return inv;
}

void ROIOrdering::validate() const {
  std::vector<bool> seen(perm.size(), false);
  for (auto p : perm) {
    if (p >= perm.size() || seen[p]) throw ContractError("ordering is not a permutation");
    seen[p] = true;
  }
}

ROIOrdering reorder_within_networks(const CentralityVector& pbar, const AtlasPartition& atlas) {
  atlas.validate();
  const std::size_t n = atlas.size();
  if (pbar.p.size() != n)
    throw ContractError("centrality length " + std::to_string(pbar.p.size()) + " vs atlas size " + std::to_string(n));
  // Centralities are compared on a 1e-12 relative grid so that floating-point
  // noise cannot reorder ROIs whose scores agree to that precision.
  const double mx = pbar.p.empty() ? 0.0 : *std::max_element(pbar.p.begin(), pbar.p.end());
  std::vector<long long> key(n, 0);
  if (mx > 0.0)
    for (std::size_t i = 0; i < n; ++i) key[i] = std::llround(pbar.p[i] / mx * 1e12);
  std::vector<int> rank(7);
  for (std::size_t r = 0; r < kNetworkOrder.size(); ++r) rank[static_cast<int>(kNetworkOrder[r])] = static_cast<int>(r);

  ROIOrdering ord = ROIOrdering::identity(n);
  std::stable_sort(ord.perm.begin(), ord.perm.end(), [&](std::size_t a, std::size_t b) {
    const int ra = rank[static_cast<int>(atlas.network_of[a])];
    const int rb = rank[static_cast<int>(atlas.network_of[b])];
    if (ra != rb) return ra < rb;
    return key[a] > key[b];
  });
  ord.provenance = OrderingProvenance::ec_sorted;
  return ord;
}

TimeSeriesMatrix apply_ordering(const TimeSeriesMatrix& ts, const ROIOrdering& ord) {
  if (ord.perm.size() != ts.rois())
    throw ContractError("ordering of length " + std::to_string(ord.perm.size()) + " for " +
                        std::to_string(ts.rois()) + " ROIs");
  ord.validate();
  const std::size_t m = ts.timepoints();
  Tensor out = Tensor::zeros(ts.rois(), m);
  std::vector<std::string> ids(ts.rois());
  for (std::size_t i = 0; i < ord.perm.size(); ++i) {
    const auto src = ts.series(ord.perm[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
    ids[i] = ts.roi_ids()[ord.perm[i]];
  }
  return TimeSeriesMatrix(std::move(out), std::move(ids));
}

std::vector<std::size_t> sample_subset(std::span<const std::size_t> pool, double fraction, std::mt19937_64& rng) {
  if (pool.empty()) throw ContractError("cannot sample from an empty pool");
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("subsample fraction must lie in (0, 1]");
  const std::size_t k = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(fraction * pool.size() - 1e-9)));
  std::vector<std::size_t> items(pool.begin(), pool.end());
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng() % (items.size() - i));
    std::swap(items[i], items[j]);
  }
  items.resize(k);
  std::sort(items.begin(), items.end());
  return items;
}

}  // namespace starformer
