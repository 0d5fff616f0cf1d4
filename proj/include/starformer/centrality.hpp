#pragma once
// Eigenvector centrality on directed connectivity graphs and the
// network-grouped ROI ordering built from it.

#include <array>
#include <cstddef>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "starformer/numkernel.hpp"
#include "starformer/timeseries.hpp"

namespace starformer {

struct CentralityVector {
  std::vector<double> p;        // nonnegative, sums to 1
  double eigenvalue = 0.0;      // dominant eigenvalue with the teleport term removed
  double raw_eigenvalue = 0.0;  // dominant eigenvalue of the regularised matrix
  std::size_t iterations = 0;
};

struct CentralityOptions {
  double teleport = 1e-6;  // tau, relative to the largest entry of G
  double tolerance = 1e-12;
  std::size_t max_iterations = 10000;
};

// Dominant right eigenvector of A = G + tau * J (G p = lambda p, no transpose)
// by power iteration from the uniform vector, L1-normalised. `g` must be
// square, nonnegative, with a zero diagonal.
CentralityVector eigenvector_centrality(const Tensor& g, const CentralityOptions& opts = {});

// The regularised matrix the power iteration runs on.
Tensor regularized_adjacency(const Tensor& g, double teleport);

CentralityVector average_centrality(std::span<const CentralityVector> per_subject);

enum class Network : int {
  visual = 0,
  somatomotor,
  dorsal_attention,
  ventral_attention,
  limbic,
  frontoparietal,
  default_mode,
};

// Canonical concatenation order of the seven networks.
inline constexpr std::array<Network, 7> kNetworkOrder = {
    Network::visual,   Network::somatomotor,    Network::dorsal_attention, Network::ventral_attention,
    Network::limbic,   Network::frontoparietal, Network::default_mode,
};

std::string_view network_name(Network net);
// Accepts the canonical names plus space/dash spellings ("dorsal attention",
// "default"); anything else is an AtlasError.
Network parse_network(std::string_view label);

struct AtlasPartition {
  std::vector<std::string> roi_ids;
  std::vector<Network> network_of;

  std::size_t size() const noexcept { return roi_ids.size(); }
  void validate() const;
};

enum class OrderingProvenance { ec_sorted, random, identity };
std::string_view provenance_name(OrderingProvenance p);

struct ROIOrdering {
  std::vector<std::size_t> perm;  // output row i takes input row perm[i]
  OrderingProvenance provenance = OrderingProvenance::identity;

  static ROIOrdering identity(std::size_t n);
  static ROIOrdering random(std::size_t n, std::mt19937_64& rng);
  ROIOrdering inverse() const;
  void validate() const;  // bijection on 0..n-1
};

ROIOrdering reorder_within_networks(const CentralityVector& pbar, const AtlasPartition& atlas);

TimeSeriesMatrix apply_ordering(const TimeSeriesMatrix& ts, const ROIOrdering& ord);

// Seeded simple random sample of ceil(fraction * pool) items (at least one).
std::vector<std::size_t> sample_subset(std::span<const std::size_t> pool, double fraction, std::mt19937_64& rng);

}  // namespace starformer
