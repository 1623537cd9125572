#include <gtest/gtest.h>

#include <cmath>
#include <cstring>

#include "mea/bundle.hpp"
#include "mea/error.hpp"
#include "mea/linalg.hpp"
#include "mea/tensor.hpp"

using namespace mea;

namespace {

Tensor loop_matmul(const Tensor& a, const Tensor& b) {
  Tensor out({a.dim(0), b.dim(1)});
  for (std::size_t i = 0; i < a.dim(0); ++i)
    for (std::size_t j = 0; j < b.dim(1); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.dim(1); ++k) s += a.at(i, k) * b.at(k, j);
      out.at(i, j) = s;
    }
  return out;
}

}  // namespace

TEST(Tensor, ShapeInvariant) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), DimensionError);
  EXPECT_THROW(Tensor({2, 0}), DimensionError);
  Tensor t({2, 3, 4});
  EXPECT_EQ(t.size(), 24u);
  EXPECT_THROW(t.reshaped({5, 5}), DimensionError);
}

TEST(Matmul, IdentityAndProjector) {
  Tensor m = Tensor::matrix({{1, 2}, {3, 4}});
  EXPECT_EQ(matmul(Tensor::identity(2), m), m);
  Tensor p = Tensor::matrix({{1, 0}, {0, 0}});
  EXPECT_EQ(matmul(p, Tensor::matrix({{5, 6}, {7, 8}})), Tensor::matrix({{5, 6}, {0, 0}}));
}

TEST(Matmul, MatchesTripleLoop) {
  Rng rng(7);
  Tensor a = Tensor::randn({5, 7}, rng), b = Tensor::randn({7, 3}, rng);
  EXPECT_LT(max_abs_diff(matmul(a, b), loop_matmul(a, b)), 1e-12);
}

TEST(Matmul, ShapeMismatchThrows) {
  EXPECT_THROW(matmul(Tensor({2, 3}), Tensor({2, 3})), DimensionError);
}

TEST(Matmul, Associativity) {
  for (int seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    Tensor a = Tensor::randn({4, 6}, rng), b = Tensor::randn({6, 5}, rng),
           c = Tensor::randn({5, 3}, rng);
    Tensor l = matmul(matmul(a, b), c), r = matmul(a, matmul(b, c));
    EXPECT_LT(frobenius_norm(sub(l, r)) / frobenius_norm(l), 1e-9);
  }
}

TEST(Softmax, UniformAndStabilized) {
  Tensor s = softmax_rows(Tensor::matrix({{0, 0, 0}}));
  for (int i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(s[i], 1.0 / 3.0);
  Tensor big = softmax_rows(Tensor::matrix({{1000, 0}}));
  EXPECT_TRUE(big.all_finite());
  EXPECT_DOUBLE_EQ(big[0], 1.0);
  EXPECT_LT(big[1], 1e-300);
}

TEST(Softmax, MatchesDirectEvaluation) {
  Tensor s = softmax_rows(Tensor::matrix({{1, 2, 3}}));
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  EXPECT_NEAR(s[0], std::exp(1.0) / z, 1e-12);
  EXPECT_NEAR(s[1], std::exp(2.0) / z, 1e-12);
  EXPECT_NEAR(s[2], std::exp(3.0) / z, 1e-12);
}

TEST(Softmax, RowsSumToOneAndCausalZeros) {
  Rng rng(3);
  Tensor a = Tensor::randn({3, 5, 5}, rng, 4.0);
  Tensor s = softmax_rows(a, true);
  for (std::size_t b = 0; b < 3; ++b)
    for (std::size_t r = 0; r < 5; ++r) {
      double total = 0.0;
      for (std::size_t c = 0; c < 5; ++c) {
        total += s.at(b, r, c);
        if (c > r) {
          EXPECT_EQ(s.at(b, r, c), 0.0);
        }
      }
      EXPECT_NEAR(total, 1.0, 1e-12);
    }
}

TEST(RmsNorm, KnownValues) {
  Tensor ones({1, 4}, 1.0);
  EXPECT_EQ(rms_norm(ones, Tensor({4}, 1.0), 0.0), ones);
  Tensor r = rms_norm(Tensor::matrix({{3, 4}}), Tensor({2}, 1.0), 0.0);
  EXPECT_NEAR(r[0], 3.0 / std::sqrt(12.5), 1e-15);
  EXPECT_NEAR(r[1], 4.0 / std::sqrt(12.5), 1e-15);
}

TEST(RmsNorm, ScaleInvariant) {
  Rng rng(11);
  Tensor x = Tensor::randn({6, 8}, rng);
  Tensor gain = Tensor::randn({8}, rng);
  for (double c : {0.01, 3.0, 250.0})
    EXPECT_LT(max_abs_diff(rms_norm(scale(x, c), gain, 0.0), rms_norm(x, gain, 0.0)), 1e-12);
}

TEST(RmsNorm, GainMustBeSuffix) {
  EXPECT_THROW(rms_norm(Tensor({2, 3, 4}), Tensor({2, 4}), 0.0), DimensionError);
}

TEST(HeadMix, IdentityAndSmallCase) {
  Rng rng(5);
  Tensor t = Tensor::randn({3, 4, 2}, rng);
  EXPECT_EQ(head_mix(t, Tensor::identity(4)), t);
  Tensor small({1, 2, 1}, std::vector<double>{1, 2});
  Tensor w = Tensor::matrix({{3}, {4}});
  EXPECT_EQ(head_mix(small, w).item(), 11.0);
}

TEST(HeadMix, MatchesLoopOracleAndIsLinear) {
  Rng rng(9);
  Tensor t = Tensor::randn({4, 3, 5}, rng);
  Tensor w1 = Tensor::randn({3, 6}, rng), w2 = Tensor::randn({3, 6}, rng);
  Tensor out = head_mix(t, w1);
  double worst = 0.0;
  for (std::size_t n = 0; n < 4; ++n)
    for (std::size_t j = 0; j < 6; ++j)
      for (std::size_t k = 0; k < 5; ++k) {
        double s = 0.0;
        for (std::size_t i = 0; i < 3; ++i) s += t.at(n, i, k) * w1.at(i, j);
        worst = std::max(worst, std::abs(s - out.at(n, j, k)));
      }
  EXPECT_LT(worst, 1e-12);
  const double a = 0.7, b = -1.3;
  Tensor lhs = head_mix(t, add(scale(w1, a), scale(w2, b)));
  Tensor rhs = add(scale(head_mix(t, w1), a), scale(head_mix(t, w2), b));
  EXPECT_LT(max_abs_diff(lhs, rhs), 1e-12);
  EXPECT_THROW(head_mix(t, Tensor({4, 2})), DimensionError);
}

TEST(Svd, DiagonalCases) {
  SvdResult id = svd(Tensor::identity(3));
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(id.sigma[i], 1.0, 1e-15);
  SvdResult d = svd(Tensor::matrix({{3, 0}, {0, 2}}));
  EXPECT_NEAR(d.sigma[0], 3.0, 1e-15);
  EXPECT_NEAR(d.sigma[1], 2.0, 1e-15);
}

namespace {

void expect_orthonormal_columns(const Tensor& u, double tol) {
  Tensor gram = matmul(transpose(u), u);
  EXPECT_LT(max_abs_diff(gram, Tensor::identity(u.dim(1))), tol);
}

}  // namespace

TEST(Svd, InvariantsAndEckartYoung) {
  for (int seed = 0; seed < 10; ++seed) {
    Rng rng(100 + seed);
    Tensor a = Tensor::randn({12, 4}, rng);
    SvdResult s = svd(a);
    expect_orthonormal_columns(s.u, 1e-8);
    expect_orthonormal_columns(transpose(s.vt), 1e-8);
    for (std::size_t i = 0; i + 1 < 4; ++i) EXPECT_GE(s.sigma[i], s.sigma[i + 1]);
    EXPECT_GE(s.sigma[3], 0.0);
    EXPECT_LT(frobenius_norm(sub(svd_reconstruct(s, 4), a)), 1e-8);
    for (std::size_t k = 0; k <= 4; ++k) {
      double tail = 0.0;
      for (std::size_t i = k; i < 4; ++i) tail += s.sigma[i] * s.sigma[i];
      EXPECT_NEAR(frobenius_norm(sub(svd_reconstruct(s, k), a)), std::sqrt(tail), 1e-8);
    }
  }
}

TEST(Svd, WideAndRankDeficient) {
  Rng rng(4);
  Tensor wide = Tensor::randn({3, 7}, rng);
  SvdResult s = svd(wide);
  EXPECT_EQ(s.u.shape(), (Shape{3, 3}));
  EXPECT_EQ(s.vt.shape(), (Shape{3, 7}));
  EXPECT_LT(frobenius_norm(sub(svd_reconstruct(s, 3), wide)), 1e-8);

  Tensor col = Tensor::randn({6, 1}, rng);
  Tensor dup({6, 3});
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 3; ++j) dup.at(i, j) = col[i] * static_cast<double>(j + 1);
  SvdResult r = svd(dup);
  expect_orthonormal_columns(r.u, 1e-8);
  EXPECT_LT(r.sigma[1], 1e-12);
  EXPECT_LT(frobenius_norm(sub(svd_reconstruct(r, 1), dup)), 1e-8);
}

TEST(Svd, SweepCapReportsResidual) {
  Rng rng(1);
  Tensor a = Tensor::randn({8, 5}, rng);
  try {
    svd(a, SvdOptions{1, 1e-15});
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_GT(e.residual(), 0.0);
  }
}

TEST(Bundle, BitExactRoundTrip) {
  for (int seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    TensorBundle b;
    b.set("wq", Tensor::randn({4, 6}, rng, 1e-3));
    b.set("odd", Tensor::vector({0.1, -0.0, 1e-310, 1e300, -7.25}));
    b.set("cube", Tensor::randn({2, 3, 2}, rng));
    if (seed % 2) b.attributes()["note"] = "x";
    TensorBundle back = TensorBundle::deserialize(b.serialize());
    ASSERT_EQ(back.size(), b.size());
    for (std::size_t i = 0; i < b.size(); ++i) {
      EXPECT_EQ(back.entries()[i].first, b.entries()[i].first);
      const auto& x = b.entries()[i].second;
      const auto& y = back.entries()[i].second;
      ASSERT_EQ(x.shape(), y.shape());
      EXPECT_EQ(std::memcmp(x.data().data(), y.data().data(), x.size() * 8), 0);
    }
    EXPECT_EQ(back.attributes(), b.attributes());
    EXPECT_EQ(back.serialize(), b.serialize());
  }
}

TEST(Bundle, ManifestLayout) {
  TensorBundle b;
  b.set("a", Tensor::vector({1.0, 2.0}));
  b.set("b", Tensor::scalar(3.0));
  const std::string s = b.serialize();
  const std::string expect_head =
      "{\"dtype\":\"f64\",\"len\":16,\"name\":\"a\",\"offset\":0,\"shape\":[2]}\n"
      "{\"dtype\":\"f64\",\"len\":8,\"name\":\"b\",\"offset\":16,\"shape\":[1]}\n\n";
  EXPECT_EQ(s.substr(0, expect_head.size()), expect_head);
  EXPECT_EQ(s.size(), expect_head.size() + 24);
  // 1.0 little-endian
  EXPECT_EQ(static_cast<unsigned char>(s[expect_head.size() + 7]), 0x3F);
  EXPECT_EQ(static_cast<unsigned char>(s[expect_head.size() + 6]), 0xF0);
  EXPECT_THROW(TensorBundle::deserialize("{\"name\":\"a\"}\n"), DataError);
}
