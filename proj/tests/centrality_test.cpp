#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <algorithm>
#include <numeric>
#include <random>
#include <tuple>

#include "starformer/centrality.hpp"
#include "starformer/errors.hpp"
#include "test_support.hpp"

using namespace starformer;

namespace {

Tensor random_digraph(std::size_t n, double density, std::mt19937_64& rng) {
  std::bernoulli_distribution edge(density);
  Tensor g = Tensor::zeros(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (i != j && edge(rng)) g.at(i, j) = 1.0;
  return g;
}

// Dominant eigenvector of G + 1e-6 J from a full nonsymmetric eigendecomposition.
std::vector<double> dense_dominant(const Tensor& g) {
  const std::size_t n = g.rows();
  Eigen::MatrixXd a(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) a(i, j) = g.at(i, j) + 1e-6;
  Eigen::EigenSolver<Eigen::MatrixXd> es(a);
  Eigen::Index best = 0;
  for (Eigen::Index k = 1; k < es.eigenvalues().size(); ++k)
    if (es.eigenvalues()(k).real() > es.eigenvalues()(best).real()) best = k;
  Eigen::VectorXd v = es.eigenvectors().col(best).real();
  v /= v.sum();
  return {v.data(), v.data() + n};
}

AtlasPartition blocked_atlas(std::size_t per_network) {
  AtlasPartition atlas;
  for (std::size_t k = 0; k < 7; ++k)
    for (std::size_t r = 0; r < per_network; ++r) {
      atlas.roi_ids.push_back("R" + std::to_string(atlas.roi_ids.size()));
      atlas.network_of.push_back(kNetworkOrder[k]);
    }
  return atlas;
}

CentralityVector from_p(std::vector<double> p) {
  CentralityVector c;
  c.p = std::move(p);
  return c;
}

}  // namespace

TEST(EigenvectorCentrality, CompleteGraphIsUniform) {
  Tensor g = Tensor({3, 3}, 1.0);
  for (std::size_t i = 0; i < 3; ++i) g.at(i, i) = 0.0;
  const auto c = eigenvector_centrality(g);
  for (double v : c.p) EXPECT_NEAR(v, 1.0 / 3.0, 1e-12);
  EXPECT_NEAR(c.eigenvalue, 2.0, 1e-10);
  EXPECT_NEAR(c.raw_eigenvalue - c.eigenvalue, 3e-6, 1e-15);
}

TEST(EigenvectorCentrality, ZeroMatrixIsUniform) {
  const auto c = eigenvector_centrality(Tensor::zeros(5, 5));
  for (double v : c.p) EXPECT_NEAR(v, 0.2, 1e-12);
}

TEST(EigenvectorCentrality, MatchesDenseEigensolver) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor g = random_digraph(8 + trial, 0.3, rng);
    const auto c = eigenvector_centrality(g);
    const auto oracle = dense_dominant(g);
    for (std::size_t i = 0; i < oracle.size(); ++i) EXPECT_NEAR(c.p[i], oracle[i], 1e-8) << "trial " << trial;
  }
}

TEST(EigenvectorCentrality, DirectedCycleConvergesDespitePeriodicity) {
  Tensor g = Tensor::zeros(4, 4);
  for (std::size_t i = 0; i < 4; ++i) g.at(i, (i + 1) % 4) = 1.0;
  const auto c = eigenvector_centrality(g);
  for (double v : c.p) EXPECT_NEAR(v, 0.25, 1e-12);
  EXPECT_NEAR(c.eigenvalue, 1.0, 1e-10);
}

TEST(EigenvectorCentrality, NormalisedAndNonnegative) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 30; ++trial) {
    const auto c = eigenvector_centrality(random_digraph(20, 0.05 + 0.03 * trial, rng));
    EXPECT_NEAR(std::accumulate(c.p.begin(), c.p.end(), 0.0), 1.0, 1e-10);
    for (double v : c.p) EXPECT_GE(v, 0.0);
  }
}

TEST(EigenvectorCentrality, IterationCapRaisesWithLastIterate) {
  std::mt19937_64 rng(4);
  CentralityOptions o;
  o.max_iterations = 2;
  try {
    eigenvector_centrality(random_digraph(12, 0.3, rng), o);
    FAIL() << "expected a convergence error";
  } catch (const ConvergenceError& e) {
    EXPECT_EQ(e.last_iterate().size(), 12u);
  }
}

TEST(EigenvectorCentrality, RejectsInvalidAdjacency) {
  EXPECT_THROW(eigenvector_centrality(Tensor::zeros(2, 3)), DimensionError);
  Tensor g = Tensor::zeros(3, 3);
  g.at(1, 1) = 1.0;
  EXPECT_THROW(eigenvector_centrality(g), ContractError);
}

TEST(AverageCentrality, SingleSubjectIsIdentity) {
  const auto c = average_centrality(std::vector{from_p({0.2, 0.3, 0.5})});
  EXPECT_EQ(c.p, (std::vector<double>{0.2, 0.3, 0.5}));
}

TEST(AverageCentrality, TwoOppositeSubjects) {
  const auto c = average_centrality(std::vector{from_p({1, 0}), from_p({0, 1})});
  EXPECT_EQ(c.p, (std::vector<double>{0.5, 0.5}));
}

TEST(AverageCentrality, MatchesElementwiseMean) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<CentralityVector> vs;
  for (int k = 0; k < 5; ++k) {
    std::vector<double> p(9);
    for (double& v : p) v = u(rng);
    const double s = std::accumulate(p.begin(), p.end(), 0.0);
    for (double& v : p) v /= s;
    vs.push_back(from_p(p));
  }
  const auto c = average_centrality(vs);
  for (std::size_t i = 0; i < 9; ++i) {
    double mean = 0.0;
    for (const auto& v : vs) mean += v.p[i];
    EXPECT_NEAR(c.p[i], mean / 5.0, 1e-12);
  }
}

TEST(AverageCentrality, EmptyOrRaggedIsContractError) {
  EXPECT_THROW(average_centrality(std::vector<CentralityVector>{}), ContractError);
  EXPECT_THROW(average_centrality(std::vector{from_p({1}), from_p({0.5, 0.5})}), ContractError);
}

TEST(Networks, ParseAcceptsSpellingVariants) {
  EXPECT_EQ(parse_network("dorsal attention"), Network::dorsal_attention);
  EXPECT_EQ(parse_network("Ventral-Attention"), Network::ventral_attention);
  EXPECT_EQ(parse_network("default"), Network::default_mode);
  for (Network n : kNetworkOrder) EXPECT_EQ(parse_network(network_name(n)), n);
  EXPECT_THROW(parse_network("cerebellum"), AtlasError);
}

TEST(ReorderWithinNetworks, EqualScoresKeepAtlasOrder) {
  const auto atlas = blocked_atlas(3);
  const auto ord = reorder_within_networks(from_p(std::vector<double>(21, 1.0 / 21)), atlas);
  EXPECT_EQ(ord.perm, ROIOrdering::identity(21).perm);
  EXPECT_EQ(ord.provenance, OrderingProvenance::ec_sorted);
}

TEST(ReorderWithinNetworks, SingleNetworkDescending) {
  AtlasPartition atlas{{"a", "b", "c"}, {Network::limbic, Network::limbic, Network::limbic}};
  EXPECT_EQ(reorder_within_networks(from_p({0.1, 0.5, 0.4}), atlas).perm, (std::vector<std::size_t>{1, 2, 0}));
}

TEST(ReorderWithinNetworks, GroupsFollowCanonicalNetworkOrder) {
  AtlasPartition atlas{{"a", "b", "c", "d"},
                       {Network::default_mode, Network::visual, Network::limbic, Network::visual}};
  EXPECT_EQ(reorder_within_networks(from_p({0.4, 0.1, 0.3, 0.2}), atlas).perm,
            (std::vector<std::size_t>{3, 1, 2, 0}));
}

TEST(ReorderWithinNetworks, MatchesComparatorOracle) {
  std::mt19937_64 rng(6);
  std::uniform_int_distribution<int> net(0, 6), level(0, 4);
  for (int trial = 0; trial < 20; ++trial) {
    AtlasPartition atlas;
    std::vector<double> p(35);
    for (std::size_t i = 0; i < 35; ++i) {
      atlas.roi_ids.push_back("R" + std::to_string(i));
      atlas.network_of.push_back(static_cast<Network>(net(rng)));
      p[i] = 0.01 * (1 + level(rng));  // few levels, so ties occur
    }
    std::vector<std::size_t> oracle(35);
    std::iota(oracle.begin(), oracle.end(), std::size_t{0});
    auto rank = [&](std::size_t i) {
      return std::find(kNetworkOrder.begin(), kNetworkOrder.end(), atlas.network_of[i]) - kNetworkOrder.begin();
    };
    std::sort(oracle.begin(), oracle.end(), [&](std::size_t a, std::size_t b) {
      return std::make_tuple(rank(a), -p[a], a) < std::make_tuple(rank(b), -p[b], b);
    });
    const auto ord = reorder_within_networks(from_p(p), atlas);
    EXPECT_EQ(ord.perm, oracle);
    EXPECT_NO_THROW(ord.validate());
  }
}

TEST(ReorderWithinNetworks, InvariantToRescalingG) {
  std::mt19937_64 rng(7);
  const auto atlas = blocked_atlas(5);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor g = random_digraph(35, 0.2, rng);
    const auto base = reorder_within_networks(eigenvector_centrality(g), atlas);
    for (double s : {0.001, 3.0, 250.0}) {
      Tensor scaled = g;
      for (double& v : scaled.data()) v *= s;
      EXPECT_EQ(reorder_within_networks(eigenvector_centrality(scaled), atlas).perm, base.perm) << s;
    }
  }
}

TEST(ReorderWithinNetworks, LengthMismatchAndDuplicateIds) {
  const auto atlas = blocked_atlas(1);
  EXPECT_THROW(reorder_within_networks(from_p({1.0}), atlas), ContractError);
  AtlasPartition dup{{"a", "a"}, {Network::visual, Network::visual}};
  EXPECT_THROW(reorder_within_networks(from_p({0.5, 0.5}), dup), AtlasError);
}

TEST(ApplyOrdering, IdentityAndReversal) {
  const TimeSeriesMatrix ts(Tensor::from_rows({{1, 2}, {3, 4}, {5, 6}}), {"A", "B", "C"});
  EXPECT_EQ(apply_ordering(ts, ROIOrdering::identity(3)), ts);
  ROIOrdering rev{{2, 1, 0}, OrderingProvenance::identity};
  const auto out = apply_ordering(ts, rev);
  EXPECT_EQ(out.values(), Tensor::from_rows({{5, 6}, {3, 4}, {1, 2}}));
  EXPECT_EQ(out.roi_ids(), (std::vector<std::string>{"C", "B", "A"}));
}

TEST(ApplyOrdering, InverseRoundTripIsExact) {
  std::mt19937_64 rng(8);
  const TimeSeriesMatrix ts(starformer::testing::random_tensor({12, 7}, rng));
  for (int trial = 0; trial < 10; ++trial) {
    const auto ord = ROIOrdering::random(12, rng);
    EXPECT_EQ(apply_ordering(apply_ordering(ts, ord), ord.inverse()), ts);
  }
}

TEST(ApplyOrdering, RejectsBadOrderings) {
  const TimeSeriesMatrix ts(Tensor::zeros(3, 5));
  EXPECT_THROW(apply_ordering(ts, ROIOrdering::identity(2)), ContractError);
  EXPECT_THROW(apply_ordering(ts, ROIOrdering{{0, 0, 1}, OrderingProvenance::identity}), ContractError);
}

TEST(SampleSubset, SizeDeterminismAndMembership) {
  std::vector<std::size_t> pool(37);
  std::iota(pool.begin(), pool.end(), std::size_t{100});
  std::mt19937_64 a(9), b(9);
  const auto s1 = sample_subset(pool, 0.1, a), s2 = sample_subset(pool, 0.1, b);
  EXPECT_EQ(s1.size(), 4u);
  EXPECT_EQ(s1, s2);
  for (auto v : s1) EXPECT_TRUE(v >= 100 && v < 137);
  EXPECT_EQ(std::adjacent_find(s1.begin(), s1.end()), s1.end());
  std::mt19937_64 c(1);
  EXPECT_EQ(sample_subset(std::vector<std::size_t>{5, 6, 7}, 0.1, c).size(), 1u);
  EXPECT_THROW(sample_subset(pool, 0.0, c), ConfigError);
}
