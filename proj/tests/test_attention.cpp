#include <gtest/gtest.h>

#include <cmath>

#include "vara/attention.hpp"
#include "vara/errors.hpp"

using namespace vara;

namespace {

Tensor randn(Rng& rng, Shape shape, double s = 1.0, bool param = false) {
  std::vector<double> v(shape_size(shape));
  for (auto& x : v) x = s * rng.normal();
  return param ? Tensor::parameter(std::move(shape), std::move(v)) : Tensor(std::move(shape), std::move(v));
}

void expect_row_stochastic(const Tensor& a, double tol = 1e-6) {
  for (std::size_t r = 0; r < a.rows(); ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < a.cols(); ++c) {
      EXPECT_GE(a.at(r, c), 0.0);
      s += a.at(r, c);
    }
    EXPECT_NEAR(s, 1.0, tol);
  }
}

}  // namespace

TEST(InitialAlignment, DiagonalPeak) {
  Tensor a = initial_alignment(7, 7, 0.1);
  for (std::size_t t = 0; t < 7; ++t) {
    std::size_t best = 0;
    for (std::size_t l = 1; l < 7; ++l)
      if (a.at(t, l) > a.at(t, best)) best = l;
    EXPECT_EQ(best, t);
  }
  expect_row_stochastic(a, 1e-12);
}

TEST(InitialAlignment, WideBandwidthIsUniform) {
  Tensor a = initial_alignment(5, 9, 1e3);
  for (double v : a.values()) EXPECT_NEAR(v, 1.0 / 9.0, 1e-6);
}

TEST(InitialAlignment, TwoByTwoScalarOracle) {
  const double g = 0.2;
  Tensor a = initial_alignment(2, 2, g);
  auto s = [&](double t, double l) { return std::exp(-(t / 2 - l / 2) * (t / 2 - l / 2) / (2 * g * g)); };
  for (int t = 0; t < 2; ++t) {
    const double z = s(t, 0) + s(t, 1);
    for (int l = 0; l < 2; ++l) EXPECT_NEAR(a.at(t, l), s(t, l) / z, 1e-15);
  }
}

TEST(InitialAlignment, TinyBandwidthStaysFinite) {
  Tensor a = initial_alignment(50, 3, 0.001);
  expect_row_stochastic(a, 1e-12);
  EXPECT_THROW(initial_alignment(3, 3, 0.0), InvalidArgument);
}

TEST(InitialAlignment, ScaleInvariance) {
  Rng rng(1);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t T = rng.uniform_int(1, 12), L = rng.uniform_int(1, 12), c = rng.uniform_int(2, 4);
    const double g = 0.05 + 0.3 * rng.uniform();
    Tensor a = initial_alignment(T, L, g), b = initial_alignment(c * T, c * L, g);
    // Row normalizers differ, so compare unnormalized ratios within a row.
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t l = 1; l < L; ++l)
        EXPECT_NEAR(a.at(t, l) / a.at(t, 0), b.at(c * t, c * l) / b.at(c * t, 0),
                    1e-9 * std::max(1.0, a.at(t, l) / a.at(t, 0)));
  }
}

TEST(InitialContext, OneHotValuesReproduceAlignment) {
  const std::size_t L = 4;
  std::vector<double> eye(L * L, 0.0);
  for (std::size_t i = 0; i < L; ++i) eye[i * L + i] = 1.0;
  Tensor v(Shape{L, L}, eye);
  const std::vector<double> g{0.1};
  Tensor w(Shape{L, L}), b(Shape{L});
  InitialContext ic = initial_context(v, 6, g, w, b);
  Tensor a = initial_alignment(6, L, 0.1);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_DOUBLE_EQ(ic.concat[i], a[i]);
}

TEST(InitialContext, EqualRowsAndConcatWidth) {
  Tensor v = Tensor::matrix(3, 2, {5, -1, 5, -1, 5, -1});
  const std::vector<double> g{0.01, 0.05, 0.1, 0.2};
  Tensor w(Shape{8, 2}), b(Shape{2});
  InitialContext ic = initial_context(v, 5, g, w, b);
  EXPECT_EQ(ic.concat.cols(), 8u);
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t c = 0; c < 8; ++c) EXPECT_NEAR(ic.concat.at(r, c), c % 2 == 0 ? 5.0 : -1.0, 1e-12);
  expect_row_stochastic(ic.alignment);
}

TEST(ResidualHead, ZeroQueryOneHotPrev) {
  const std::size_t T = 3, L = 5;
  Tensor q(Shape{T, 2}), k = Tensor(Shape{L, 2}, 0.7), v = Tensor(Shape{L, 1}, 1.0);
  std::vector<double> prev(T * L, 0.0);
  for (std::size_t t = 0; t < T; ++t) prev[t * L + t] = 1.0;
  HeadOutput o = residual_attention_head(q, k, v, Tensor(Shape{T, L}, prev));
  const double e = std::exp(1.0);
  for (std::size_t t = 0; t < T; ++t) EXPECT_NEAR(o.weights.at(t, t), e / (e + L - 1), 1e-14);
}

TEST(ResidualHead, ZeroPrevIsPlainAttention) {
  Rng rng(2);
  Tensor q = randn(rng, {4, 3}), k = randn(rng, {6, 3}), v = randn(rng, {6, 2});
  HeadOutput o = residual_attention_head(q, k, v, Tensor(Shape{4, 6}));
  Tensor ref = softmax_rows(scale(matmul(q, transpose(k)), 1.0 / std::sqrt(3.0)));
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_EQ(o.weights[i], ref[i]);
  // Output rows are convex combinations of value rows.
  for (std::size_t t = 0; t < 4; ++t)
    for (std::size_t c = 0; c < 2; ++c) {
      double lo = 1e9, hi = -1e9;
      for (std::size_t l = 0; l < 6; ++l) {
        lo = std::min(lo, v.at(l, c));
        hi = std::max(hi, v.at(l, c));
      }
      EXPECT_GE(o.out.at(t, c), lo - 1e-12);
      EXPECT_LE(o.out.at(t, c), hi + 1e-12);
    }
  EXPECT_THROW(residual_attention_head(q, k, v, Tensor(Shape{4, 5})), InvalidArgument);
}

TEST(ResidualHead, GradientsThroughQKVAndPrev) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(seed);
    std::vector<Tensor> ps{randn(rng, {3, 2}, 1, true), randn(rng, {4, 2}, 1, true), randn(rng, {4, 3}, 1, true),
                           randn(rng, {3, 4}, 0.3, true)};
    Tensor probe = randn(rng, {3, 3});
    auto f = [&] {
      HeadOutput o = residual_attention_head(ps[0], ps[1], ps[2], ps[3]);
      return add(sum(mul(o.out, probe)), sum(square(o.weights)));
    };
    EXPECT_LT(grad_check(f, ps, 1e-5), 1e-5);
  }
}

TEST(MultiHead, RowStochasticAndShapes) {
  Rng rng(3);
  ParamStore s;
  AttentionParams p = make_attention(s, "a", 3, 6, 8, 5, 4, rng);
  for (std::size_t T : {1u, 4u, 9u}) {
    for (std::size_t L : {1u, 3u, 7u}) {
      Tensor q = randn(rng, {T, 3}), kv = randn(rng, {L, 6});
      MultiHeadOutput o = residual_multi_head(q, kv, kv, initial_alignment(T, L, 0.1), p);
      EXPECT_EQ(o.context.rows(), T);
      EXPECT_EQ(o.context.cols(), 5u);
      expect_row_stochastic(o.alignment);
    }
  }
}

TEST(MultiHead, SingleHeadMatchesManualProjection) {
  Rng rng(4);
  ParamStore s;
  AttentionParams p = make_attention(s, "a", 3, 4, 4, 2, 1, rng);
  Tensor q = randn(rng, {5, 3}), kv = randn(rng, {6, 4}), prev = initial_alignment(5, 6, 0.2);
  MultiHeadOutput o = residual_multi_head(q, kv, kv, prev, p);
  HeadOutput h = residual_attention_head(matmul(q, p.wq), matmul(kv, p.wk), matmul(kv, p.wv), prev);
  Tensor ctx = linear(h.out, p.wo, p.bo);
  for (std::size_t i = 0; i < ctx.size(); ++i) EXPECT_EQ(o.context[i], ctx[i]);
}

TEST(MultiHead, ZeroPrevMatchesStandardAttentionBitForBit) {
  Rng rng(5);
  ParamStore s;
  AttentionParams p = make_attention(s, "a", 3, 4, 8, 2, 2, rng);
  Tensor q = randn(rng, {5, 3}), kv = randn(rng, {6, 4});
  MultiHeadOutput o = residual_multi_head(q, kv, kv, Tensor(Shape{5, 6}), p);
  // Standard multi-head attention written out without any prior term.
  Tensor qp = matmul(q, p.wq), kp = matmul(kv, p.wk), vp = matmul(kv, p.wv);
  std::vector<Tensor> outs;
  for (int h = 0; h < 2; ++h) {
    const std::size_t b = static_cast<std::size_t>(h) * 4;
    Tensor w = softmax_rows(scale(matmul(slice_cols(qp, b, b + 4), transpose(slice_cols(kp, b, b + 4))), 0.5));
    outs.push_back(matmul(w, slice_cols(vp, b, b + 4)));
  }
  Tensor ref = linear(concat_cols(outs), p.wo, p.bo);
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_EQ(o.context[i], ref[i]);
}

TEST(Refine, IdentityKernel) {
  Tensor a = Tensor::matrix(2, 2, {0.7, 0.3, 0.1, 0.9});
  Tensor id = Tensor::vector({0, 1, 0});
  Tensor same = refine_prev_alignment(a, 2, id);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(same[i], a[i]);
  Tensor dup = refine_prev_alignment(a, 4, id);
  const double expect[] = {0.7, 0.3, 0.7, 0.3, 0.1, 0.9, 0.1, 0.9};
  for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(dup[i], expect[i]);
  EXPECT_THROW(refine_prev_alignment(a, 1, id), InvalidArgument);
}

TEST(Refine, AveragingKernelHandConvolution) {
  // 3 x 2 input upsampled by 2 gives 6 rows; then [.25,.5,.25] with zero padding.
  Tensor a = Tensor::matrix(3, 2, {1, 0, 0, 1, 0.5, 0.5});
  Tensor k = Tensor::vector({0.25, 0.5, 0.25});
  Tensor r = refine_prev_alignment(a, 6, k);
  const double up[6][2] = {{1, 0}, {1, 0}, {0, 1}, {0, 1}, {0.5, 0.5}, {0.5, 0.5}};
  for (int t = 0; t < 6; ++t)
    for (int c = 0; c < 2; ++c) {
      const double prev = t > 0 ? up[t - 1][c] : 0.0, next = t < 5 ? up[t + 1][c] : 0.0;
      EXPECT_DOUBLE_EQ(r.at(t, c), 0.25 * prev + 0.5 * up[t][c] + 0.25 * next);
    }
}

TEST(Entropy, UniformAndOneHot) {
  EXPECT_NEAR(mean_row_entropy(Tensor(Shape{2, 4}, 0.25)), std::log(4.0), 1e-15);
  EXPECT_EQ(mean_row_entropy(Tensor::matrix(1, 3, {0, 1, 0})), 0.0);
}
