#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "offseg/gradcheck.hpp"
#include "offseg/heads.hpp"

using namespace offseg;

namespace {

template <class T = double>
Matrix<T> randn(std::size_t r, std::size_t c, std::mt19937_64& rng, double sd = 1.0) {
  Matrix<T> m(r, c);
  fill_normal(m, rng, sd);
  return m;
}

template <class T = double>
OffsetHeadParams<T> random_head(std::size_t k, std::size_t c, std::size_t h, std::mt19937_64& rng,
                                HeadFlags flags = {}) {
  auto p = init_params<T>(k, c, h, rng(), flags);
  fill_normal(p.mlp_cls.w2, rng, 0.5);
  fill_normal(p.mlp_cls.b2, rng, 0.1);
  fill_normal(p.mlp_pos.w2, rng, 0.5);
  fill_normal(p.mlp_pos.b2, rng, 0.1);
  fill_normal(p.mlp_cls.b1, rng, 0.1);
  fill_normal(p.mlp_pos.b1, rng, 0.1);
  return p;
}

// Scalar re-derivation of the head for 2×2 inputs: attention pooling in both
// directions, identity MLPs, M = (W + ΔW)(E + ΔE)ᵀ.
std::array<std::array<double, 2>, 2> scalar_oracle_identity_case() {
  const double w[2][2] = {{1, 0}, {0, 1}}, e[2][2] = {{1, 0}, {0, 1}};
  double ac[2][2];
  for (int k = 0; k < 2; ++k)
    for (int j = 0; j < 2; ++j) ac[k][j] = w[k][0] * e[j][0] + w[k][1] * e[j][1];
  double acls[2][2], apos[2][2];
  for (int k = 0; k < 2; ++k) {
    const double z = std::exp(ac[k][0]) + std::exp(ac[k][1]);
    for (int j = 0; j < 2; ++j) acls[k][j] = std::exp(ac[k][j]) / z;
  }
  for (int j = 0; j < 2; ++j) {
    const double z = std::exp(ac[0][j]) + std::exp(ac[1][j]);
    for (int k = 0; k < 2; ++k) apos[j][k] = std::exp(ac[k][j]) / z;
  }
  double wadj[2][2], eadj[2][2];
  for (int k = 0; k < 2; ++k)
    for (int c = 0; c < 2; ++c) {
      const double fcls = acls[k][0] * e[0][c] + acls[k][1] * e[1][c];
      wadj[k][c] = w[k][c] + std::max(fcls, 0.0);
    }
  for (int j = 0; j < 2; ++j)
    for (int c = 0; c < 2; ++c) {
      const double fpos = apos[j][0] * w[0][c] + apos[j][1] * w[1][c];
      eadj[j][c] = e[j][c] + std::max(fpos, 0.0);
    }
  std::array<std::array<double, 2>, 2> m{};
  for (int k = 0; k < 2; ++k)
    for (int j = 0; j < 2; ++j) m[k][j] = wadj[k][0] * eadj[j][0] + wadj[k][1] * eadj[j][1];
  return m;
}

}  // namespace

TEST(PerPixel, IdentityInputs) {
  const auto i2 = Matrix<double>::identity(2);
  EXPECT_EQ(perpixel_forward(i2, i2), i2);
}

TEST(PerPixel, BilinearInFeatures) {
  std::mt19937_64 rng(1);
  const auto w = randn(4, 6, rng), e = randn(9, 6, rng);
  EXPECT_EQ(perpixel_forward(w, e * 2.0), perpixel_forward(w, e) * 2.0);
  EXPECT_EQ(perpixel_forward(w, e * 0.25), perpixel_forward(w, e) * 0.25);
}

TEST(PerPixel, HandExample) {
  const Matrix<double> w{{1, 0}, {0, 1}}, e{{2, 3}, {4, 5}};
  EXPECT_EQ(perpixel_forward(w, e), (Matrix<double>{{2, 4}, {3, 5}}));
}

TEST(PerPixel, ChannelMismatchRejected) {
  EXPECT_THROW(perpixel_forward(Matrix<double>(2, 3), Matrix<double>(4, 2)), ShapeError);
}

TEST(OffsetForward, ZeroSecondLayersReproduceBaselineBitForBit) {
  std::mt19937_64 rng(2);
  for (int rep = 0; rep < 20; ++rep) {
    const auto p = init_params<float>(5, 8, 4, rng());
    const auto e = randn<float>(16, 8, rng);
    EXPECT_EQ(offset_forward(p, e).m, perpixel_forward(p.w, e));
  }
}

TEST(OffsetForward, FlagsOffIsBaselineBitForBit) {
  std::mt19937_64 rng(3);
  const auto p = random_head(5, 8, 4, rng, {false, false});
  const auto e = randn(16, 8, rng);
  const auto tr = offset_forward(p, e);
  EXPECT_EQ(tr.m, perpixel_forward(p.w, e));
  for (double v : tr.delta_w.data()) EXPECT_EQ(v, 0.0);
  for (double v : tr.delta_e.data()) EXPECT_EQ(v, 0.0);
}

TEST(OffsetForward, IdentityMlpTwoByTwoCase) {
  OffsetHeadParams<double> p;
  p.w = Matrix<double>::identity(2);
  p.mlp_cls = MLPParams<double>(2, 2, 2);
  p.mlp_cls.w1 = p.mlp_cls.w2 = Matrix<double>::identity(2);
  p.mlp_pos = p.mlp_cls;
  const auto tr = offset_forward(p, Matrix<double>::identity(2));

  const double a = std::exp(1.0) / (std::exp(1.0) + 1.0);
  EXPECT_NEAR(tr.a_cls(0, 0), a, 1e-12);
  EXPECT_NEAR(tr.a_cls(0, 1), 1.0 - a, 1e-12);
  EXPECT_NEAR(a, 0.731059, 1e-6);

  const auto oracle = scalar_oracle_identity_case();
  // (1+a)² + b² on the diagonal, 2(1+a)b off it
  const double want[2][2] = {{3.068894, 0.931107}, {0.931107, 3.068894}};
  for (int k = 0; k < 2; ++k)
    for (int j = 0; j < 2; ++j) {
      EXPECT_NEAR(tr.m(k, j), oracle[k][j], 1e-12);
      EXPECT_NEAR(tr.m(k, j), want[k][j], 1e-5);
    }
}

TEST(OffsetForward, TraceInvariantsInNarrowPrecision) {
  std::mt19937_64 rng(4);
  for (int rep = 0; rep < 10; ++rep) {
    const auto p = random_head<float>(6, 12, 6, rng);
    const auto e = randn<float>(40, 12, rng, 2.0);
    const auto tr = offset_forward(p, e);
    for (const auto* a : {&tr.a_cls, &tr.a_pos})
      for (std::size_t i = 0; i < a->rows(); ++i) {
        float s = 0;
        for (float v : a->row(i)) s += v;
        EXPECT_NEAR(s, 1.0f, 1e-6f);
      }
    EXPECT_EQ(tr.a_pos.rows(), 40u);
    EXPECT_EQ(tr.w_adj, p.w + tr.delta_w);
    EXPECT_EQ(tr.e_adj, e + tr.delta_e);
  }
}

TEST(OffsetForward, HighTemperatureFlattensSpatialAttention) {
  std::mt19937_64 rng(5);
  auto p = random_head(4, 8, 4, rng);
  p.temperature = 1e6;
  const auto tr = offset_forward(p, randn(16, 8, rng));
  for (double v : tr.a_cls.data()) EXPECT_NEAR(v, 1.0 / 16.0, 1e-6);
}

TEST(OffsetForward, PixelPermutationEquivariance) {
  std::mt19937_64 rng(6);
  const std::size_t hw = 24;
  for (auto flags : {HeadFlags{true, true}, HeadFlags{false, true}, HeadFlags{true, false}}) {
    const auto p = random_head(5, 8, 4, rng, flags);
    const auto e = randn(hw, 8, rng);
    std::vector<std::size_t> perm(hw);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Matrix<double> ep(hw, 8);
    for (std::size_t j = 0; j < hw; ++j) std::copy(e.row(perm[j]).begin(), e.row(perm[j]).end(), ep.row(j).begin());

    const auto a = offset_forward(p, e), b = offset_forward(p, ep);
    for (std::size_t j = 0; j < hw; ++j) {
      // Feature offsets are per pixel, so they move with the pixel exactly.
      for (std::size_t c = 0; c < 8; ++c) EXPECT_EQ(b.delta_e(j, c), a.delta_e(perm[j], c));
      for (std::size_t k = 0; k < 5; ++k) {
        if (!flags.class_offset)
          EXPECT_EQ(b.m(k, j), a.m(k, perm[j]));
        else  // ΔW sums over pixels, so reordering changes rounding only
          EXPECT_NEAR(b.m(k, j), a.m(k, perm[j]), 1e-12 * (1 + std::abs(a.m(k, perm[j]))));
      }
    }
  }
}

TEST(OffsetForward, NonFiniteStageIsNamed) {
  std::mt19937_64 rng(7);
  auto p = random_head(3, 4, 2, rng);
  auto e = randn(5, 4, rng);
  e(2, 1) = std::numeric_limits<double>::infinity();
  try {
    offset_forward(p, e);
    FAIL();
  } catch (const NumericError& err) {
    EXPECT_NE(std::string(err.what()).find("A_c"), std::string::npos) << err.what();
  }
  e(2, 1) = 0.0;
  p.mlp_cls.w2 = Matrix<double>(2, 4, 1e308);
  p.mlp_cls.b1 = Matrix<double>(1, 2, 1e10);
  try {
    offset_forward(p, e);
    FAIL();
  } catch (const NumericError& err) {
    EXPECT_NE(std::string(err.what()).find("dW"), std::string::npos) << err.what();
  }
}

TEST(OffsetForward, ShapeMismatchRejected) {
  std::mt19937_64 rng(8);
  const auto p = random_head(3, 4, 2, rng);
  EXPECT_THROW(offset_forward(p, Matrix<double>(5, 3)), ShapeError);
}

TEST(OffsetBackward, ZeroCotangentGivesZeroGrads) {
  std::mt19937_64 rng(9);
  const auto p = random_head(5, 8, 4, rng);
  const auto tr = offset_forward(p, randn(16, 8, rng));
  const auto g = offset_backward(p, tr, Matrix<double>(5, 16));
  for (const auto* m : {&g.w, &g.e, &g.mlp_cls.w1, &g.mlp_cls.b1, &g.mlp_cls.w2, &g.mlp_cls.b2, &g.mlp_pos.w1,
                        &g.mlp_pos.b1, &g.mlp_pos.w2, &g.mlp_pos.b2})
    for (double v : m->data()) EXPECT_EQ(v, 0.0);
}

TEST(OffsetBackward, ZeroOffsetReducesToBaselineGradients) {
  std::mt19937_64 rng(10);
  const auto p = init_params<double>(5, 8, 4, 3);
  const auto e = randn(16, 8, rng), dm = randn(5, 16, rng);
  const auto g = offset_backward(p, offset_forward(p, e), dm);
  const auto base = vjp_matmul(p.w, transpose(e), dm);
  EXPECT_EQ(g.w, base.da);
  EXPECT_EQ(g.e, transpose(base.db));

  auto off = p;
  off.flags = {false, false};
  const auto g0 = offset_backward(off, offset_forward(off, e), dm);
  EXPECT_EQ(g0.w, base.da);
  EXPECT_EQ(g0.e, transpose(base.db));
}

TEST(OffsetBackward, SumOfSquaresPassesGradCheckOver20Seeds) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto r = check_scope("head", seed);
    EXPECT_TRUE(r.report.passed) << "seed " << seed << " " << r.coordinate << " rel " << r.report.max_rel_error;
  }
}

TEST(OffsetBackward, GradCheckWithTemperature) {
  GradCheckShape s;
  s.temperature = 0.5;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    EXPECT_TRUE(check_scope("head", seed, false, s).report.passed) << seed;
    EXPECT_TRUE(check_scope("loss", seed, false, s).report.passed) << seed;
  }
}

TEST(OffsetBackward, InjectedFaultIsCaught) {
  const auto r = check_scope("head", 0, true);
  EXPECT_FALSE(r.report.passed);
  EXPECT_FALSE(r.coordinate.empty());
}

TEST(ParamCount, BaselineIsKTimesC) {
  EXPECT_EQ(param_count(150, 256, 128, {false, false}), 150u * 256u);
}

TEST(ParamCount, DefaultScaleOverhead) {
  EXPECT_EQ(param_count(150, 256, 128, {true, true}), 170240u);
  EXPECT_EQ(param_count(150, 256, 128, {true, true}) - param_count(150, 256, 128, {false, false}), 131840u);
}

TEST(ParamCount, HandCount) { EXPECT_EQ(param_count(2, 2, 1, {true, true}), 18u); }

TEST(ParamCount, MatchesStoredTensors) {
  for (auto flags : {HeadFlags{false, false}, HeadFlags{true, false}, HeadFlags{false, true}, HeadFlags{true, true}}) {
    const auto p = init_params<float>(7, 10, 3, 0, flags);
    EXPECT_EQ(enumerate_active_params(p), param_count(7, 10, 3, flags));
  }
}

TEST(InitParams, DeterministicPerSeed) {
  EXPECT_EQ(init_params<float>(6, 32, 16, 42), init_params<float>(6, 32, 16, 42));
  EXPECT_NE(init_params<float>(6, 32, 16, 42), init_params<float>(6, 32, 16, 43));
}

TEST(InitParams, FreshHeadIsBaseline) {
  std::mt19937_64 rng(11);
  const auto p = init_params<double>(6, 32, 16, 5);
  const auto e = randn(64, 32, rng);
  EXPECT_EQ(offset_forward(p, e).m, matmul_nt(p.w, e));
  for (double v : p.mlp_cls.w2.data()) EXPECT_EQ(v, 0.0);
  for (double v : p.mlp_pos.b2.data()) EXPECT_EQ(v, 0.0);
}

TEST(InitParams, ClassEmbeddingVarianceIsOneOverC) {
  const auto p = init_params<double>(100, 100, 8, 9);
  double mean = 0;
  for (double v : p.w.data()) mean += v;
  mean /= static_cast<double>(p.w.size());
  double var = 0;
  for (double v : p.w.data()) var += (v - mean) * (v - mean);
  var /= static_cast<double>(p.w.size() - 1);
  EXPECT_NEAR(var, 0.01, 0.001);
}

TEST(InitParams, RejectsDegenerateShapes) {
  EXPECT_THROW(init_params<float>(1, 4, 2, 0), ConfigError);
  EXPECT_THROW(init_params<float>(3, 0, 2, 0), ConfigError);
}
