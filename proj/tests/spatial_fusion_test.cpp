#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "starformer/errors.hpp"
#include "starformer/fusion_model.hpp"
#include "starformer/spatial_branch.hpp"
#include "gradcheck.hpp"
#include "test_support.hpp"

using namespace starformer;
using starformer::testing::random_tensor;

namespace {

Tensor spatial_out(const SpatialParams& p, const Tensor& x, std::size_t heads, const ForwardContext& ctx = {}) {
  Tape tape;
  ParamBinder bind(tape);
  return spatial_forward(bind, p, tape.constant(x), heads, ctx).value();
}

void randomize(SpatialParams& p, std::mt19937_64& rng) {
  visit_params(p, "s", [&](const std::string&, Tensor& t) { t = random_tensor(t.shape(), rng, 0.3); });
}

Tensor permute_rows(const Tensor& x, const std::vector<std::size_t>& perm) {
  Tensor out = x;
  for (std::size_t i = 0; i < perm.size(); ++i)
    for (std::size_t c = 0; c < x.cols(); ++c) out.at(i, c) = x.at(perm[i], c);
  return out;
}

ModelConfig toy_config() {
  ModelConfig c;
  c.n_rois = 8;
  c.timepoints = 32;
  c.geometry = {32, 4, 64};
  c.schedule.tokens_per_layer = {4, 2, 2, 4};
  c.schedule.sequence_length = 32;
  c.mlp_hidden = 16;
  c.dropout = 0.0;
  return c;
}

}  // namespace

TEST(SpatialBranch, ZeroOutputBlockReturnsEmbeddedTokens) {
  std::mt19937_64 rng(1);
  const SpatialParams p = init_spatial(16, 10, {8, 2, 16}, 1, rng, true);
  const Tensor x = random_tensor({6, 16}, rng);
  Tape tape;
  ParamBinder bind(tape);
  const Tensor tokens = spatial_tokens(bind, p, tape.constant(x)).value();
  EXPECT_EQ(spatial_out(p, x, 2), tokens);
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t c = 0; c < 8; ++c) {
      double s = p.embed.b[c] + p.positions.at(i, c);
      for (std::size_t t = 0; t < 16; ++t) s += x.at(i, t) * p.embed.w.at(t, c);
      EXPECT_NEAR(tokens.at(i, c), s, 1e-12);
    }
}

TEST(SpatialBranch, OutputShapeForAtlasSizes) {
  std::mt19937_64 rng(2);
  for (std::size_t n : {116u, 400u}) {
    const SpatialParams p = init_spatial(16, n, {16, 2, 32}, 1, rng, false);
    EXPECT_EQ(spatial_out(p, random_tensor({n, 16}, rng), 2).shape(), (Shape{n, 16}));
  }
}

TEST(SpatialBranch, TooManyRoisRejected) {
  std::mt19937_64 rng(3);
  const SpatialParams p = init_spatial(16, 4, {8, 2, 16}, 1, rng, true);
  EXPECT_THROW(spatial_out(p, Tensor::zeros(5, 16), 2), ConfigError);
}

TEST(SpatialBranch, AttentionRowsSumToOne) {
  std::mt19937_64 rng(4);
  SpatialParams p = init_spatial(16, 12, {8, 2, 16}, 2, rng, false);
  randomize(p, rng);
  std::size_t seen = 0;
  ForwardContext ctx;
  ctx.spatial_observer = [&](std::size_t, std::size_t, const Tensor& w) {
    ++seen;
    for (std::size_t i = 0; i < w.rows(); ++i) {
      double s = 0.0;
      for (double v : w.row(i)) s += v;
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  };
  spatial_out(p, random_tensor({12, 16}, rng), 2, ctx);
  EXPECT_EQ(seen, 4u);
}

TEST(SpatialBranch, PermutingRoisAndPositionsPermutesOutput) {
  std::mt19937_64 rng(5);
  SpatialParams p = init_spatial(16, 9, {8, 2, 16}, 1, rng, false);
  randomize(p, rng);
  const Tensor x = random_tensor({9, 16}, rng);
  const std::vector<std::size_t> perm = {3, 0, 8, 1, 5, 2, 7, 4, 6};
  const Tensor base = spatial_out(p, x, 2);
  SpatialParams q = p;
  q.positions = permute_rows(p.positions, perm);
  const Tensor out = spatial_out(q, permute_rows(x, perm), 2);
  const Tensor expect = permute_rows(base, perm);
  for (std::size_t i = 0; i < out.numel(); ++i) EXPECT_NEAR(out[i], expect[i], 1e-12);
}

TEST(SpatialBranch, PositionsBreakEquivarianceOnlyWhenActive) {
  std::mt19937_64 rng(6);
  SpatialParams p = init_spatial(16, 7, {8, 2, 16}, 1, rng, false);
  randomize(p, rng);
  const Tensor x = random_tensor({7, 16}, rng);
  const std::vector<std::size_t> perm = {6, 5, 4, 3, 2, 1, 0};
  auto max_gap = [&](const SpatialParams& sp) {
    const Tensor a = permute_rows(spatial_out(sp, x, 2), perm);
    const Tensor b = spatial_out(sp, permute_rows(x, perm), 2);
    double gap = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) gap = std::max(gap, std::abs(a[i] - b[i]));
    return gap;
  };
  EXPECT_GT(max_gap(p), 1e-3);
  p.positions.fill(0.0);
  EXPECT_LT(max_gap(p), 1e-12);
}

TEST(FuseFeatures, ConstantBranchesGiveRepeatedVector) {
  Tape tape;
  const Tensor t = Tensor({5, 3}, 2.5), s = Tensor({4, 3}, 2.5);
  const Tensor f = fuse_features(tape.constant(t), tape.constant(s)).value();
  EXPECT_EQ(f.shape(), (Shape{1, 6}));
  for (double v : f.data()) EXPECT_DOUBLE_EQ(v, 2.5);
}

TEST(FuseFeatures, MatchesColumnMeans) {
  std::mt19937_64 rng(7);
  const Tensor t = random_tensor({32, 128}, rng), s = random_tensor({400, 128}, rng);
  Tape tape;
  const Tensor f = fuse_features(tape.constant(t), tape.constant(s)).value();
  ASSERT_EQ(f.numel(), 256u);
  for (std::size_t c = 0; c < 128; ++c) {
    double mt = 0.0, ms = 0.0;
    for (std::size_t r = 0; r < 32; ++r) mt += t.at(r, c);
    for (std::size_t r = 0; r < 400; ++r) ms += s.at(r, c);
    EXPECT_NEAR(f[c], mt / 32, 1e-12);
    EXPECT_NEAR(f[128 + c], ms / 400, 1e-12);
  }
}

TEST(ModelForward, IdenticalInputsIdenticalLogits) {
  std::mt19937_64 rng(8);
  const ModelState st = ModelState::init(toy_config(), rng);
  const Tensor x = random_tensor({8, 32}, rng);
  const Tensor a = predict_proba(st, x), b = predict_proba(st, x);
  EXPECT_EQ(a, b);
  EXPECT_NEAR(a[0] + a[1], 1.0, 1e-12);
}

TEST(ModelForward, ZeroInputGivesHeadConstantPath) {
  std::mt19937_64 rng(9);
  ModelState st = ModelState::init(toy_config(), rng);
  st.spatial.positions.fill(0.0);
  st.head_hidden.b = random_tensor({16}, rng);
  st.head_out.w = random_tensor({16, 2}, rng);
  st.head_out.b = random_tensor({2}, rng);
  Tape tape;
  ParamBinder bind(tape);
  const Tensor logits = model_forward(bind, st, Tensor::zeros(8, 32), {}).logits.value();
  for (std::size_t k = 0; k < 2; ++k) {
    double s = st.head_out.b[k];
    for (std::size_t h = 0; h < 16; ++h) s += std::max(0.0, st.head_hidden.b[h]) * st.head_out.w.at(h, k);
    EXPECT_NEAR(logits[k], s, 1e-12);
  }
}

TEST(ModelForward, EveryParameterReceivesGradient) {
  std::mt19937_64 rng(10);
  ModelConfig c = toy_config();
  c.zero_init_output = false;
  ModelState st = ModelState::init(c, rng);
  // Bias tables and positions start at zero or near it; give them values so
  // every path is live.
  st.visit([&](const std::string&, Tensor& t) {
    for (double& v : t.data())
      if (v == 0.0) v = 0.05 * std::normal_distribution<double>(0.0, 1.0)(rng);
  });
  Tape tape;
  ParamBinder bind(tape);
  const auto r = model_forward(bind, st, random_tensor({8, 32}, rng), {});
  tape.backward(cross_entropy(r.logits, 1));
  st.visit([&](const std::string& name, Tensor& t) {
    const Tensor* g = bind.grad(t);
    ASSERT_NE(g, nullptr) << name;
    double norm = 0.0;
    for (double v : g->data()) norm += v * v;
    EXPECT_GT(norm, 0.0) << name;
  });
}

TEST(ModelForward, FreshModelLossNearLn2) {
  std::mt19937_64 rng(11);
  const ModelState st = ModelState::init(toy_config(), rng);
  Tape tape;
  ParamBinder bind(tape);
  const auto r = model_forward(bind, st, random_tensor({8, 32}, rng), {});
  EXPECT_NEAR(cross_entropy(r.logits, 0).value().item(), std::log(2.0), 0.1);
}

TEST(ModelForward, WrongInputShapeRejected) {
  std::mt19937_64 rng(12);
  const ModelState st = ModelState::init(toy_config(), rng);
  EXPECT_THROW(predict_proba(st, Tensor::zeros(8, 31)), DimensionError);
}

TEST(ModelConfig, JsonRoundTripAndArchitectureHash) {
  ModelConfig c = toy_config();
  const nlohmann::json j = c;
  const ModelConfig back = j.get<ModelConfig>();
  EXPECT_EQ(back.architecture_hash(), c.architecture_hash());
  EXPECT_EQ(nlohmann::json(back), j);
  ModelConfig d = c;
  d.dropout = 0.3;
  EXPECT_EQ(d.architecture_hash(), c.architecture_hash());
  ModelConfig big, small;
  small.schedule.tokens_per_layer = {8, 4, 4, 8};
  EXPECT_NE(big.architecture_hash(), small.architecture_hash());
}

TEST(ModelConfig, InvalidConfigsRejected) {
  ModelConfig c = toy_config();
  c.timepoints = 64;
  EXPECT_THROW(c.validate(), ConfigError);
  c = toy_config();
  c.geometry.heads = 5;
  EXPECT_THROW(c.validate(), ConfigError);
  c = toy_config();
  c.n_max = 4;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(ModelGradients, StagedLossesAgreeWithFullForward) {
  std::mt19937_64 rng(13);
  ModelConfig c = toy_config();
  c.zero_init_output = false;
  ModelState st = ModelState::init(c, rng);
  starformer::testing::randomize_all(st, rng);
  starformer::testing::StagedModelLoss staged(st, random_tensor({8, 32}, rng), 1);
  const double full = staged.full();
  EXPECT_NEAR(staged.after_embed(), full, 1e-12);
  EXPECT_NEAR(staged.after_spatial(), full, 1e-12);
  EXPECT_NEAR(staged.after_fusion(), full, 1e-12);
  for (std::size_t l = 0; l < 4; ++l) EXPECT_NEAR(staged.after_temporal_layer(l), full, 1e-12);
}

TEST(ModelGradients, SampledEntriesMatchFiniteDifferences) {
  std::mt19937_64 rng(14);
  ModelConfig c = toy_config();
  c.zero_init_output = false;
  ModelState st = ModelState::init(c, rng);
  starformer::testing::randomize_all(st, rng);
  const auto report = starformer::testing::check_model_gradients(st, random_tensor({8, 32}, rng), 0, 97);
  EXPECT_GT(report.parameters, 100u);
  EXPECT_LE(report.worst, 1e-4) << report.worst_name << "[" << report.worst_index << "]";
}
