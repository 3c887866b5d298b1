#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "cfcbm/model.hpp"

using namespace cfcbm;

namespace {

Matrix random_matrix(std::mt19937& rng, std::size_t r, std::size_t c, double lo, double hi) {
  std::uniform_real_distribution<double> d(lo, hi);
  Matrix m(r, c);
  for (auto& v : m.values()) v = d(rng);
  return m;
}

Matrix unit_rows(std::mt19937& rng, std::size_t r, std::size_t c) {
  Matrix m = random_matrix(rng, r, c, -1.0, 1.0);
  l2_normalize_rows(m);
  return m;
}

struct Problem {
  ExampleBlock batch;
  ModelParams params;
  ConceptHierarchy hierarchy;
  RelaxedGates gates;
};

// Random problem; amortization weights are random too so the posteriors are not all 0.5.
Problem random_problem(std::mt19937& rng, std::size_t N, std::size_t K, std::size_t H,
                       std::size_t L, std::size_t P, std::size_t C, double temperature) {
  Problem pr;
  std::vector<std::vector<std::string>> attrs(H, std::vector<std::string>(L, "a"));
  pr.hierarchy = build_general(std::vector<std::string>(H, "h"), attrs);
  EmbeddingBundle b;
  b.dataset.n_examples = N;
  b.dataset.embed_dim = K;
  b.dataset.n_patches = P;
  b.dataset.n_classes = C;
  b.dataset.image_embeddings = unit_rows(rng, N, K);
  b.dataset.patch_embeddings = unit_rows(rng, N * P, K);
  for (std::size_t n = 0; n < N; ++n) b.dataset.labels.push_back(static_cast<std::uint32_t>(rng() % C));
  b.concepts = {unit_rows(rng, H, K), unit_rows(rng, H * L, K)};
  pr.batch = prepare_examples(b);
  pr.params = {random_matrix(rng, H, C, -1, 1), random_matrix(rng, H * L, C, -1, 1),
               random_matrix(rng, K, H, -1, 1), random_matrix(rng, K, H * L, -1, 1)};
  pr.gates = {temperature, random_matrix(rng, N, H, 0.05, 0.95),
              random_matrix(rng, N * P, H * L, 0.05, 0.95)};
  return pr;
}

double rel_error(double a, double f) {
  return std::abs(a - f) / std::max(1e-6, std::max(std::abs(a), std::abs(f)));
}

}  // namespace

TEST(ForwardHigh, MaskedLinearHead) {
  const Matrix s{{0.5, 0.25}};
  const Matrix z{{1.0, 0.0}};
  const Matrix w{{4.0, 0.0}, {0.0, 8.0}};
  EXPECT_EQ(forward_high(s, z, w), (Matrix{{2.0, 0.0}}));
  EXPECT_THROW(forward_high(s, Matrix(1, 3), w), DimensionError);
}

TEST(Link, GeneralLayoutGatesBlocks) {
  const auto h = build_general({"a", "b"}, {{"x", "y"}, {"z", "w"}});
  const Matrix z_high{{1.0, 0.0}};
  const Matrix z_low{{1.0, 0.5, 1.0, 0.5}, {0.2, 1.0, 1.0, 1.0}};
  const Matrix z = link_indicators(z_high, z_low, h, 2);
  EXPECT_EQ(z, (Matrix{{1.0, 0.5, 0.0, 0.0}, {0.2, 1.0, 0.0, 0.0}}));
}

TEST(Link, SharedLayoutClampsAtOne) {
  const auto h = build_shared({"a", "b"}, {"p", "q", "r"}, {{0, {0, 1}}, {1, {1, 2}}});
  const Matrix z = link_indicators(Matrix{{0.75, 0.5}}, Matrix(1, 3, 1.0), h, 1);
  EXPECT_EQ(z, (Matrix{{0.75, 1.0, 0.5}}));
  EXPECT_THROW(link_indicators(Matrix{{1.0}}, Matrix(1, 3, 1.0), h, 1), DimensionError);
  EXPECT_THROW(link_indicators(Matrix{{1.0, 1.0}}, Matrix(2, 3, 1.0), h, 1), DimensionError);
}

TEST(Link, ExhaustiveBinaryAgreesWithDefinition) {
  const auto h = build_shared({"a", "b", "c"}, {"p", "q", "r", "s"},
                              {{0, {0, 1}}, {1, {1, 2}}, {2, {3}}});
  for (unsigned hi = 0; hi < 8; ++hi) {
    for (unsigned lo = 0; lo < 16; ++lo) {
      Matrix zh(1, 3), zl(1, 4);
      for (std::size_t i = 0; i < 3; ++i) zh(0, i) = (hi >> i) & 1u;
      for (std::size_t i = 0; i < 4; ++i) zl(0, i) = (lo >> i) & 1u;
      const Matrix z = link_indicators(zh, zl, h, 1);
      for (std::size_t l = 0; l < 4; ++l) {
        bool any = false;
        for (std::size_t c = 0; c < 3; ++c) any = any || (h.membership(l, c) && zh(0, c) == 1.0);
        EXPECT_EQ(z(0, l), (any && zl(0, l) == 1.0) ? 1.0 : 0.0);
      }
    }
  }
}

TEST(Link, MaskingNeverIncreases) {
  std::mt19937 rng(8);
  const auto h = build_shared({"a", "b"}, {"p", "q", "r"}, {{0, {0, 1}}, {1, {1, 2}}});
  for (int i = 0; i < 200; ++i) {
    const Matrix zh = random_matrix(rng, 2, 2, 0.0, 1.0);
    const Matrix zl = random_matrix(rng, 4, 3, 0.0, 1.0);
    const Matrix z = link_indicators(zh, zl, h, 2);
    for (std::size_t k = 0; k < z.size(); ++k) {
      EXPECT_LE(z[k], zl[k]);
      EXPECT_GE(z[k], 0.0);
    }
  }
}

TEST(ForwardLow, MaxOverPatchesAndArgmax) {
  const Matrix s{{1.0}, {2.0}};
  const Matrix z(2, 1, 1.0);
  const Matrix w{{2.0, -1.5}};
  const auto out = forward_low(s, z, w, 2);
  EXPECT_EQ(out.logits, (Matrix{{4.0, -1.5}}));
  EXPECT_EQ(out.argmax_patch, (std::vector<std::uint32_t>{1, 0}));
}

TEST(ForwardLow, AllZeroIndicatorsGiveZeroLogits) {
  const auto out = forward_low(Matrix(4, 3, 0.7), Matrix(4, 3), Matrix(3, 2, 1.0), 4);
  EXPECT_EQ(out.logits, Matrix(1, 2));
  EXPECT_EQ(out.argmax_patch, (std::vector<std::uint32_t>{0, 0}));
  EXPECT_THROW(forward_low(Matrix(3, 3), Matrix(3, 3), Matrix(3, 2), 2), DimensionError);
}

TEST(ForwardLow, MaxDominatesEveryPatch) {
  std::mt19937 rng(12);
  for (int i = 0; i < 50; ++i) {
    const Matrix s = random_matrix(rng, 12, 5, -1, 1);
    const Matrix z = random_matrix(rng, 12, 5, 0, 1);
    const Matrix w = random_matrix(rng, 5, 3, -1, 1);
    const auto out = forward_low(s, z, w, 4);
    const Matrix per_patch = matmul(hadamard(z, s), w);
    for (std::size_t n = 0; n < 3; ++n) {
      for (std::size_t c = 0; c < 3; ++c) {
        for (std::size_t p = 0; p < 4; ++p) EXPECT_GE(out.logits(n, c), per_patch(n * 4 + p, c));
        EXPECT_EQ(out.logits(n, c), per_patch(n * 4 + out.argmax_patch[n * 3 + c], c));
      }
    }
  }
}

TEST(Loss, NoDiscoveryWithoutKlIsPlainCrossEntropy) {
  std::mt19937 rng(13);
  auto pr = random_problem(rng, 5, 4, 2, 2, 4, 3, 0.1);
  const Linkage link(pr.hierarchy);
  const auto t = forward(pr.batch, pr.params, link, Mode::kNoDiscovery, pr.gates);
  const auto loss = compute_loss(t, pr.batch.labels, {1e-4, 1e-4, 0.0, Mode::kNoDiscovery});
  const Matrix lh = matmul(pr.batch.s_high, pr.params.w_hc);
  const auto ll = forward_low(pr.batch.s_low, Matrix(20, 4, 1.0), pr.params.w_lc, 4).logits;
  double expect = 0.0;
  for (std::size_t n = 0; n < 5; ++n) {
    expect += softmax_cross_entropy(lh.row(n), pr.batch.labels[n]).loss;
    expect += softmax_cross_entropy(ll.row(n), pr.batch.labels[n]).loss;
  }
  EXPECT_NEAR(loss.total, expect / 5.0, 1e-12);
  EXPECT_EQ(loss.kl_high, 0.0);
  EXPECT_EQ(loss.kl_low, 0.0);
}

TEST(Loss, ModesZeroTheUntrainedHead) {
  std::mt19937 rng(14);
  auto pr = random_problem(rng, 3, 4, 2, 2, 1, 2, 0.5);
  const Linkage link(pr.hierarchy);
  const auto hi = compute_loss(forward(pr.batch, pr.params, link, Mode::kHighOnly, pr.gates),
                               pr.batch.labels, {1e-4, 1e-4, 1e-4, Mode::kHighOnly});
  EXPECT_EQ(hi.ce_low, 0.0);
  EXPECT_EQ(hi.kl_low, 0.0);
  EXPECT_GT(hi.kl_high, 0.0);
  const auto lo = compute_loss(forward(pr.batch, pr.params, link, Mode::kLowOnly, pr.gates),
                               pr.batch.labels, {1e-4, 1e-4, 1e-4, Mode::kLowOnly});
  EXPECT_EQ(lo.ce_high, 0.0);
  EXPECT_EQ(lo.kl_high, 0.0);
  EXPECT_GT(lo.ce_low, 0.0);
}

TEST(Forward, ThresholdedNoDiscoveryIgnoresTau) {
  std::mt19937 rng(15);
  auto pr = random_problem(rng, 4, 4, 2, 2, 4, 2, 0.1);
  const Linkage link(pr.hierarchy);
  const auto a = forward(pr.batch, pr.params, link, Mode::kNoDiscovery, ThresholdedGates{0.0});
  const auto b = forward(pr.batch, pr.params, link, Mode::kNoDiscovery, ThresholdedGates{1.0});
  EXPECT_EQ(a.logits_high, b.logits_high);
  EXPECT_EQ(a.low.logits, b.low.logits);
  const auto j = forward(pr.batch, pr.params, link, Mode::kJoint, ThresholdedGates{0.0});
  EXPECT_EQ(j.logits_high, a.logits_high);
  EXPECT_EQ(j.low.logits, a.low.logits);
}

class GradientCheck : public ::testing::TestWithParam<Mode> {};

TEST_P(GradientCheck, AllFourMatricesMatchFiniteDifferences) {
  const Mode mode = GetParam();
  std::mt19937 rng(100 + static_cast<unsigned>(mode));
  for (int instance = 0; instance < 5; ++instance) {
    auto pr = random_problem(rng, 4, 3, 2, 2, 4, 2, 0.5);
    const Linkage link(pr.hierarchy);
    const LossConfig cfg{0.05, 0.05, 0.3, mode};
    const auto trace = forward(pr.batch, pr.params, link, mode, pr.gates);
    const auto grads = backward(trace, pr.batch, pr.params, link, cfg);

    auto check = [&](Matrix ModelParams::*field, const Matrix& analytic, const char* name) {
      const auto fd = finite_difference_gradient(
          [&](const Matrix& m) {
            ModelParams p = pr.params;
            p.*field = m;
            return compute_loss(forward(pr.batch, p, link, mode, pr.gates), pr.batch.labels, cfg)
                .total;
          },
          pr.params.*field, 1e-5);
      for (std::size_t i = 0; i < fd.size(); ++i) {
        EXPECT_LT(rel_error(analytic[i], fd[i]), 1e-4)
            << name << "[" << i << "] analytic " << analytic[i] << " fd " << fd[i];
      }
    };
    check(&ModelParams::w_hc, grads.w_hc, "w_hc");
    check(&ModelParams::w_lc, grads.w_lc, "w_lc");
    check(&ModelParams::w_hs, grads.w_hs, "w_hs");
    check(&ModelParams::w_ls, grads.w_ls, "w_ls");
  }
}

INSTANTIATE_TEST_SUITE_P(Modes, GradientCheck,
                         ::testing::Values(Mode::kJoint, Mode::kHighOnly, Mode::kLowOnly,
                                           Mode::kNoDiscovery),
                         [](const auto& info) {
                           auto s = to_string(info.param);
                           std::erase(s, '-');
                           return s;
                         });

TEST(Init, DeterministicBoundedAndAmortizationZero) {
  const auto a = init_params(8, 3, 6, 4, 7);
  EXPECT_EQ(a, init_params(8, 3, 6, 4, 7));
  EXPECT_NE(a, init_params(8, 3, 6, 4, 8));
  for (double v : a.w_hc.values()) EXPECT_LE(std::abs(v), 1.0 / std::sqrt(3.0));
  for (double v : a.w_lc.values()) EXPECT_LE(std::abs(v), 1.0 / std::sqrt(6.0));
  EXPECT_EQ(a.w_hs, Matrix(8, 3));
  EXPECT_EQ(a.w_ls, Matrix(8, 6));
}

TEST(ModeNames, RoundTrip) {
  for (auto m : {Mode::kJoint, Mode::kHighOnly, Mode::kLowOnly, Mode::kNoDiscovery}) {
    EXPECT_EQ(mode_from_string(to_string(m)), m);
  }
  EXPECT_THROW(mode_from_string("both"), ParameterError);
}
