#include "phydi/errors.hpp"
#include "phydi/grad_check.hpp"
#include "phydi/ops.hpp"
#include "phydi/ph_algebra.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

#include <numeric>

namespace phydi {
namespace {

using testing::max_abs_diff;
using testing::random_tensor;

std::vector<double> naive_kron(const Tensor& a, const Tensor& b) {
    const std::size_t m = a.dim(0), p = a.dim(1), q = b.dim(0), r = b.dim(1);
    std::vector<double> out(m * q * p * r);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < p; ++j)
            for (std::size_t k = 0; k < q; ++k)
                for (std::size_t l = 0; l < r; ++l)
                    out[(i * q + k) * (p * r) + j * r + l] = a.data()[i * p + j] * b.data()[k * r + l];
    return out;
}

// Brute-force H[row, col] = sum_i A_i[row / bo, col / bi] * F_i[row % bo, col % bi].
std::vector<double> naive_H(const PHWeightSpec& spec) {
    const std::size_t n = spec.n(), bo = spec.d_out() / n, bi = spec.d_in() / n;
    std::vector<double> out(spec.d_out() * spec.d_in(), 0.0);
    for (std::size_t s = 0; s < n; ++s)
        for (std::size_t row = 0; row < spec.d_out(); ++row)
            for (std::size_t col = 0; col < spec.d_in(); ++col)
                out[row * spec.d_in() + col] += spec.a()[s].data()[(row / bo) * n + col / bi] *
                                                spec.f()[s].data()[(row % bo) * bi + col % bi];
    return out;
}

PHWeightSpec spec_from(std::size_t n, std::vector<std::vector<double>> a, std::size_t bo, std::size_t bi,
                       std::uint64_t seed) {
    std::vector<Tensor> as, fs;
    for (std::size_t i = 0; i < n; ++i) {
        as.push_back(Tensor::from_data({n, n}, a[i], true));
        fs.push_back(random_tensor({bo, bi}, seed + i, true));
    }
    return PHWeightSpec::from_factors(PHKind::dense, as, fs);
}

TEST(Kron, IdentityTimesIdentity) {
    Tensor eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
    Tensor k = kron(eye, eye);
    ASSERT_EQ(k.shape(), (Shape{4, 4}));
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(k.data()[i * 4 + j], i == j ? 1.0 : 0.0);
}

TEST(Kron, ScalarRightFactor) {
    Tensor swap = Tensor::from_data({2, 2}, {0, 1, 1, 0});
    Tensor k = kron(swap, Tensor::from_data({1, 1}, {1}));
    EXPECT_EQ(max_abs_diff(k.data(), swap.data()), 0.0);
}

TEST(Kron, MatchesIndexFormulaExactly) {
    Tensor a = random_tensor({2, 3}, 1);
    Tensor b = random_tensor({3, 2}, 2);
    Tensor k = kron(a, b);
    EXPECT_EQ(k.shape(), (Shape{6, 6}));
    EXPECT_EQ(max_abs_diff(k.data(), naive_kron(a, b)), 0.0);
}

TEST(Kron, RankErrorsAndGradients) {
    EXPECT_THROW(kron(Tensor::zeros({2}), Tensor::zeros({2, 2})), ShapeError);
    Tensor a = random_tensor({2, 3}, 3, true);
    Tensor b = random_tensor({2, 2}, 4, true);
    Tensor r = random_tensor({4, 6}, 5);
    auto f = [&](const Tensor&) { return sum(mul(kron(a, b), r)); };
    EXPECT_LT(finite_diff_check(f, a), 1e-4);
    EXPECT_LT(finite_diff_check(f, b), 1e-4);
}

TEST(DenseH, DegenerateAlgebraScalesBlock) {
    PHWeightSpec spec = spec_from(1, {{2.5}}, 3, 4, 10);
    Tensor h = build_dense_H(spec);
    std::vector<double> want(spec.f()[0].data().begin(), spec.f()[0].data().end());
    for (double& v : want) v *= 2.5;
    EXPECT_LT(max_abs_diff(h.data(), want), 1e-15);
}

TEST(DenseH, IdentityAlgebraIsBlockDiagonal) {
    PHWeightSpec spec = spec_from(2, {{1, 0, 0, 1}, {0, 0, 0, 0}}, 2, 3, 11);
    Tensor h = build_dense_H(spec);
    const auto& f = spec.f()[0].data();
    for (std::size_t r = 0; r < 4; ++r)
        for (std::size_t c = 0; c < 6; ++c) {
            const bool same_block = (r / 2) == (c / 3);
            const double want = same_block ? f[(r % 2) * 3 + c % 3] : 0.0;
            EXPECT_EQ(h.data()[r * 6 + c], want);
        }
}

TEST(DenseH, RandomSpecMatchesLoopedKroneckerSum) {
    PHWeightSpec spec = PHWeightSpec::dense(4, 8, 12, 12);
    std::vector<double> want(8 * 12, 0.0);
    for (std::size_t i = 0; i < 4; ++i) {
        auto k = naive_kron(spec.a()[i], spec.f()[i]);
        for (std::size_t j = 0; j < want.size(); ++j) want[j] += k[j];
    }
    EXPECT_LT(max_abs_diff(build_dense_H(spec).data(), want), 1e-12);
}

class OracleEquivalence : public ::testing::TestWithParam<std::size_t> {};

TEST_P(OracleEquivalence, HundredRandomSpecs) {
    const std::size_t n = GetParam();
    for (std::uint64_t s = 0; s < 100; ++s) {
        const std::size_t out = n * (1 + s % 3), in = n * (1 + (s / 3) % 3);
        PHWeightSpec spec = PHWeightSpec::dense(n, out, in, 1000 * n + s);
        ASSERT_LT(max_abs_diff(build_dense_H(spec).data(), naive_H(spec)), 1e-12) << "seed " << s;
    }
}

INSTANTIATE_TEST_SUITE_P(N, OracleEquivalence, ::testing::Values(1, 2, 3, 4));

TEST(DenseH, BilinearInEachFactor) {
    const std::size_t n = 3;
    PHWeightSpec base = PHWeightSpec::dense(n, 6, 9, 20);
    Tensor other_f = random_tensor({2, 3}, 21, true);
    Tensor other_a = random_tensor({3, 3}, 22, true);
    for (std::size_t slot = 0; slot < n; ++slot) {
        auto with = [&](Tensor a, Tensor f) {
            auto as = base.a();
            auto fs = base.f();
            as[slot] = a;
            fs[slot] = f;
            return build_dense_H(PHWeightSpec::from_factors(PHKind::dense, as, fs));
        };
        const Tensor& a0 = base.a()[slot];
        const Tensor& f0 = base.f()[slot];
        const double c1 = 0.7, c2 = -1.3;
        auto lin = [&](const Tensor& x, const Tensor& y) {
            Tensor t = Tensor::from_data(x.shape(), std::vector<double>(x.data().begin(), x.data().end()), true);
            for (std::size_t i = 0; i < t.numel(); ++i) t.mutable_data()[i] = c1 * x.data()[i] + c2 * y.data()[i];
            return t;
        };
        Tensor zero_a = Tensor::zeros(a0.shape(), true);
        Tensor zero_f = Tensor::zeros(f0.shape(), true);
        // H(c1 F + c2 F') - H(0) == c1 (H(F) - H(0)) + c2 (H(F') - H(0)), likewise for A.
        auto check = [&](Tensor h_mix, Tensor h1, Tensor h2, Tensor h0) {
            for (std::size_t i = 0; i < h_mix.numel(); ++i) {
                const double want = c1 * (h1.data()[i] - h0.data()[i]) + c2 * (h2.data()[i] - h0.data()[i]);
                ASSERT_NEAR(h_mix.data()[i] - h0.data()[i], want, 1e-12);
            }
        };
        check(with(a0, lin(f0, other_f)), with(a0, f0), with(a0, other_f), with(a0, zero_f));
        check(with(lin(a0, other_a), f0), with(a0, f0), with(other_a, f0), with(zero_a, f0));
    }
}

TEST(DenseH, GradientFlowsToBothFactors) {
    PHWeightSpec spec = PHWeightSpec::dense(2, 4, 6, 30);
    Tensor x = random_tensor({6, 3}, 31);
    Tensor r = random_tensor({4, 3}, 32);
    auto f = [&](const Tensor&) { return sum(mul(matmul(build_dense_H(spec), x), r)); };
    for (const Tensor& a : spec.a()) EXPECT_LT(finite_diff_check(f, a), 1e-4);
    for (const Tensor& fb : spec.f()) EXPECT_LT(finite_diff_check(f, fb), 1e-4);
}

TEST(DenseH, SummandWeightsScaleTerms) {
    PHWeightSpec spec = PHWeightSpec::dense(2, 4, 4, 33);
    std::vector<Tensor> ones{Tensor::scalar(1.0, true), Tensor::scalar(1.0, true)};
    EXPECT_LT(max_abs_diff(build_dense_H(spec, ones).data(), build_dense_H(spec).data()), 1e-15);
    std::vector<Tensor> first_only{Tensor::scalar(1.0, true), Tensor::scalar(0.0, true)};
    auto k = naive_kron(spec.a()[0], spec.f()[0]);
    EXPECT_LT(max_abs_diff(build_dense_H(spec, first_only).data(), k), 1e-15);
}

TEST(Spec, DivisibilityAndShapeErrors) {
    EXPECT_THROW(PHWeightSpec::dense(3, 4, 6, 0), ShapeError);
    EXPECT_THROW(PHWeightSpec::dense(3, 6, 4, 0), ShapeError);
    EXPECT_THROW(PHWeightSpec::conv(2, 3, 4, 3, 0), ShapeError);
    EXPECT_THROW(PHWeightSpec::dense(0, 4, 4, 0), ShapeError);
    std::vector<Tensor> a{Tensor::zeros({2, 2}, true)};
    std::vector<Tensor> f{Tensor::zeros({2, 2}, true)};
    EXPECT_THROW(PHWeightSpec::from_factors(PHKind::dense, a, f), Error);
}

TEST(Spec, FactorsAreLearnableAndCounted) {
    PHWeightSpec spec = PHWeightSpec::conv(4, 8, 12, 3, 40);
    ASSERT_EQ(spec.a().size(), 4u);
    ASSERT_EQ(spec.f().size(), 4u);
    for (const Tensor& t : spec.a()) {
        EXPECT_TRUE(t.requires_grad());
        EXPECT_EQ(t.shape(), (Shape{4, 4}));
    }
    for (const Tensor& t : spec.f()) {
        EXPECT_TRUE(t.requires_grad());
        EXPECT_EQ(t.shape(), (Shape{2, 3, 3, 3}));
    }
}

TEST(Spec, InitialisationBounds) {
    const std::size_t n = 4, out = 16, in = 32;
    PHWeightSpec spec = PHWeightSpec::dense(n, out, in, 41);
    const double a_bound = 1.0 / std::sqrt(double(n));
    const double f_bound = std::sqrt(6.0 / double(out + in)) * std::sqrt(double(n));
    for (const Tensor& t : spec.a())
        for (double v : t.data()) EXPECT_LE(std::abs(v), a_bound);
    double f_max = 0.0;
    for (const Tensor& t : spec.f())
        for (double v : t.data()) {
            EXPECT_LE(std::abs(v), f_bound);
            f_max = std::max(f_max, std::abs(v));
        }
    EXPECT_GT(f_max, 0.8 * f_bound);
}

TEST(Spec, SameSeedSameFactors) {
    PHWeightSpec a = PHWeightSpec::dense(2, 4, 4, 42);
    PHWeightSpec b = PHWeightSpec::dense(2, 4, 4, 42);
    PHWeightSpec c = PHWeightSpec::dense(2, 4, 4, 43);
    EXPECT_EQ(max_abs_diff(build_dense_H(a).data(), build_dense_H(b).data()), 0.0);
    EXPECT_GT(max_abs_diff(build_dense_H(a).data(), build_dense_H(c).data()), 0.0);
}

// Per offset (u, v) the channel matrix must equal sum_i kron(A_i, F_i[:, :, u, v]).
void expect_conv_matches_offsets(const PHWeightSpec& spec, Tensor kernel) {
    const std::size_t n = spec.n(), co = spec.d_out(), ci = spec.d_in(), k = spec.kernel();
    const std::size_t bo = co / n, bi = ci / n;
    for (std::size_t u = 0; u < k; ++u)
        for (std::size_t v = 0; v < k; ++v) {
            std::vector<double> want(co * ci, 0.0);
            for (std::size_t s = 0; s < n; ++s) {
                std::vector<double> block(bo * bi);
                for (std::size_t r = 0; r < bo; ++r)
                    for (std::size_t c = 0; c < bi; ++c)
                        block[r * bi + c] = spec.f()[s].data()[((r * bi + c) * k + u) * k + v];
                auto kr = naive_kron(spec.a()[s], Tensor::from_data({bo, bi}, block));
                for (std::size_t j = 0; j < want.size(); ++j) want[j] += kr[j];
            }
            for (std::size_t r = 0; r < co; ++r)
                for (std::size_t c = 0; c < ci; ++c)
                    ASSERT_NEAR(kernel.data()[((r * ci + c) * k + u) * k + v], want[r * ci + c], 1e-12);
        }
}

TEST(ConvKernel, RandomSpecMatchesPerOffsetOracle) {
    PHWeightSpec spec = PHWeightSpec::conv(3, 6, 9, 3, 50);
    Tensor kernel = build_conv_kernel(spec);
    EXPECT_EQ(kernel.shape(), (Shape{6, 9, 3, 3}));
    expect_conv_matches_offsets(spec, kernel);
}

TEST(ConvKernel, PointwiseEqualsDenseH) {
    PHWeightSpec conv = PHWeightSpec::conv(2, 4, 6, 1, 51);
    std::vector<Tensor> fs;
    for (const Tensor& f : conv.f()) fs.push_back(reshape(f, {f.dim(0), f.dim(1)}).detach());
    for (Tensor& f : fs) f = Tensor::from_data(f.shape(), {f.data().begin(), f.data().end()}, true);
    PHWeightSpec dense = PHWeightSpec::from_factors(PHKind::dense, conv.a(), fs);
    EXPECT_EQ(max_abs_diff(build_conv_kernel(conv).data(), build_dense_H(dense).data()), 0.0);
}

TEST(ConvKernel, IdentityAlgebraHasNoCrossBlockCoupling) {
    std::vector<Tensor> as{Tensor::from_data({2, 2}, {1, 0, 0, 1}, true), Tensor::zeros({2, 2}, true)};
    std::vector<Tensor> fs{random_tensor({2, 3, 3, 3}, 52, true), random_tensor({2, 3, 3, 3}, 53, true)};
    Tensor kernel = build_conv_kernel(PHWeightSpec::from_factors(PHKind::conv, as, fs));
    for (std::size_t o = 0; o < 4; ++o)
        for (std::size_t c = 0; c < 6; ++c)
            if (o / 2 != c / 3)
                for (std::size_t e = 0; e < 9; ++e) EXPECT_EQ(kernel.data()[(o * 6 + c) * 9 + e], 0.0);
}

TEST(ConvKernel, GradientsThroughConvolution) {
    PHWeightSpec spec = PHWeightSpec::conv(2, 4, 2, 3, 54);
    Tensor x = random_tensor({1, 2, 4, 4}, 55);
    Tensor r = random_tensor({1, 4, 4, 4}, 56);
    auto f = [&](const Tensor&) { return sum(mul(conv2d(x, build_conv_kernel(spec), 1, 1), r)); };
    EXPECT_LT(finite_diff_check(f, spec.a()[1]), 1e-4);
    EXPECT_LT(finite_diff_check(f, spec.f()[0]), 1e-4);
}

TEST(CountParams, DenseSixtyFourByFour) {
    ParamCount c = count_params(PHWeightSpec::dense(4, 64, 64, 0));
    EXPECT_EQ(c.ph_params, 1088u);
    EXPECT_EQ(c.dense_equivalent, 4096u);
    EXPECT_DOUBLE_EQ(c.ratio_value(), 0.265625);
    EXPECT_EQ(c.ratio(), (std::pair<std::uint64_t, std::uint64_t>{17, 64}));
}

TEST(CountParams, NEqualsOneIsAlmostDense) {
    ParamCount c = count_params(PHWeightSpec::dense(1, 5, 7, 0));
    EXPECT_EQ(c.ph_params, 36u);
    EXPECT_EQ(c.dense_equivalent, 35u);
    EXPECT_DOUBLE_EQ(c.ratio_value(), 1.0 + 1.0 / 35.0);
}

TEST(CountParams, ConvFormula) {
    ParamCount c = count_params(PHWeightSpec::conv(2, 8, 4, 3, 0));
    EXPECT_EQ(c.ph_params, 2u * 4 * 2 * 9 + 2 * 4);
    EXPECT_EQ(c.dense_equivalent, 8u * 4 * 9);
}

TEST(CountParams, OverheadIsNCubedExactly) {
    for (std::size_t n = 1; n <= 4; ++n)
        for (std::size_t mult = 1; mult <= 4; ++mult)
            for (std::size_t k : {1, 3}) {
                PHWeightSpec spec = k == 1 ? PHWeightSpec::dense(n, n * mult, n * (mult + 1), 0)
                                           : PHWeightSpec::conv(n, n * mult, n * (mult + 1), k, 0);
                ParamCount c = count_params(spec);
                // ph/dense - 1/n == n^3/dense  <=>  n*ph - dense == n^4
                EXPECT_EQ(n * c.ph_params - c.dense_equivalent, n * n * n * n);
            }
}

TEST(CountParams, SumsAndReducesRatio) {
    ParamCount a{6, 8}, b{2, 8};
    ParamCount s = a + b;
    EXPECT_EQ(s.ph_params, 8u);
    EXPECT_EQ(s.dense_equivalent, 16u);
    EXPECT_EQ(s.ratio(), (std::pair<std::uint64_t, std::uint64_t>{1, 2}));
}

}  // namespace
}  // namespace phydi
