#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "comma/numerics/gradcheck.hpp"
#include "comma/numerics/ops.hpp"
#include "gradient_cases.hpp"
#include "test_util.hpp"

namespace comma {
namespace {

using testing::max_abs_diff;
using testing::random_tensor;

// Triple-loop reference product.
std::vector<double> naive_matmul(const Tensor& a, const Tensor& b) {
  const auto m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < k; ++p) c[i * n + j] += a.at(i, p) * b.at(p, j);
  return c;
}

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  std::mt19937_64 rng(1);
  auto x = random_tensor({2, 2}, rng);
  auto eye = Tensor::matrix(2, 2, {1, 0, 0, 1});
  auto y = matmul(eye, x);
  EXPECT_EQ(max_abs_diff(y.data(), x.data()), 0.0);
}

TEST(Matmul, ScalarProduct) {
  auto y = matmul(Tensor::matrix(1, 1, {2}), Tensor::matrix(1, 1, {3}));
  EXPECT_EQ(y.item(), 6.0);
}

TEST(Matmul, MatchesTripleLoop) {
  std::mt19937_64 rng(2);
  auto a = random_tensor({3, 4}, rng);
  auto b = random_tensor({4, 2}, rng);
  EXPECT_LT(max_abs_diff(matmul(a, b).data(), naive_matmul(a, b)), 1e-12);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  auto a = Tensor::zeros({2, 3});
  auto b = Tensor::zeros({2, 3});
  try {
    matmul(a, b);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos);
    EXPECT_NE(msg.find("·"), std::string::npos);
  }
}

TEST(Matmul, Associative) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    auto a = random_tensor({3, 5}, rng);
    auto b = random_tensor({5, 4}, rng);
    auto c = random_tensor({4, 2}, rng);
    EXPECT_LT(max_abs_diff(matmul(matmul(a, b), c).data(), matmul(a, matmul(b, c)).data()), 1e-9);
  }
}

TEST(Softmax, SymmetricInputIsUniform) {
  auto y = softmax(Tensor::vector({0.0, 0.0}));
  EXPECT_DOUBLE_EQ(y[0], 0.5);
  EXPECT_DOUBLE_EQ(y[1], 0.5);
}

TEST(Softmax, ShiftInvariant) {
  std::mt19937_64 rng(4);
  auto x = random_tensor({7}, rng, 3.0);
  auto y = softmax(x);
  auto y2 = softmax(add_scalar(x, 123.456));
  EXPECT_LT(max_abs_diff(y.data(), y2.data()), 1e-12);
}

TEST(Softmax, MatchesDirectFormula) {
  auto y = softmax(Tensor::vector({1.0, 2.0, 3.0}));
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  EXPECT_NEAR(y[0], std::exp(1.0) / z, 1e-15);
  EXPECT_NEAR(y[1], std::exp(2.0) / z, 1e-15);
  EXPECT_NEAR(y[2], std::exp(3.0) / z, 1e-15);
}

TEST(Softmax, SlicesSumToOneAlongEitherAxis) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    auto x = random_tensor({4, 6}, rng, 20.0);
    for (int axis : {0, 1}) {
      auto y = softmax(x, axis);
      const std::size_t outer = axis == 0 ? 6 : 4, len = axis == 0 ? 4 : 6;
      for (std::size_t o = 0; o < outer; ++o) {
        double s = 0.0;
        for (std::size_t k = 0; k < len; ++k) {
          const double v = axis == 0 ? y.at(k, o) : y.at(o, k);
          EXPECT_GE(v, 0.0);
          s += v;
        }
        EXPECT_NEAR(s, 1.0, 1e-12);
      }
    }
  }
}

TEST(Softmax, LargeLogitsDoNotOverflow) {
  auto y = softmax(Tensor::vector({1000.0, 999.0, -1000.0}));
  EXPECT_NEAR(y[0] + y[1] + y[2], 1.0, 1e-12);
}

TEST(CosineSim, SelfSimilarityIsOne) {
  auto u = Tensor::vector({0.3, -1.2, 4.0});
  EXPECT_NEAR(cosine_sim(u, u).item(), 1.0, 1e-15);
}

TEST(CosineSim, OrthogonalIsZero) {
  EXPECT_EQ(cosine_sim(Tensor::vector({1, 0}), Tensor::vector({0, 1})).item(), 0.0);
}

TEST(CosineSim, MatchesDirectFormula) {
  std::mt19937_64 rng(6);
  auto u = random_tensor({9}, rng);
  auto v = random_tensor({9}, rng);
  double uv = 0, uu = 0, vv = 0;
  for (int i = 0; i < 9; ++i) {
    uv += u[i] * v[i];
    uu += u[i] * u[i];
    vv += v[i] * v[i];
  }
  EXPECT_NEAR(cosine_sim(u, v).item(), uv / std::sqrt(uu * vv), 1e-12);
}

TEST(CosineSim, ZeroNormIsDegenerate) {
  EXPECT_THROW(cosine_sim(Tensor::vector({0, 0}), Tensor::vector({1, 0})), DegenerateInputError);
}

TEST(CrossEntropy, UniformLogitsGiveLogC) {
  for (std::size_t c : {2u, 5u, 17u}) {
    auto loss = cross_entropy(Tensor::zeros({c}), 1);
    EXPECT_NEAR(loss.item(), std::log(static_cast<double>(c)), 1e-14);
  }
}

TEST(CrossEntropy, SaturatedLabelIsNearZero) {
  auto loss = cross_entropy(Tensor::vector({0.0, 50.0, 0.0}), 1);
  EXPECT_LT(loss.item(), 1e-9);
  EXPECT_GE(loss.item(), 0.0);
}

TEST(CrossEntropy, MatchesDirectFormula) {
  std::mt19937_64 rng(7);
  auto logits = random_tensor({6}, rng, 2.0);
  double z = 0;
  for (int i = 0; i < 6; ++i) z += std::exp(logits[i]);
  EXPECT_NEAR(cross_entropy(logits, 4).item(), -std::log(std::exp(logits[4]) / z), 1e-12);
}

TEST(CrossEntropy, LabelOutOfRange) {
  EXPECT_THROW(cross_entropy(Tensor::zeros({3}), 3), IndexError);
}

TEST(Backward, SquareAtThree) {
  auto x = Tensor::scalar(3.0, true);
  backward(mul(x, x));
  EXPECT_DOUBLE_EQ(x.grad()[0], 6.0);
}

TEST(Backward, UnreachableLeafGetsZero) {
  auto x = Tensor::scalar(3.0, true);
  auto unused = Tensor::vector({1.0, 2.0}, true);
  std::vector<Tensor> leaves{x, unused};
  backward(mul(x, x), leaves);
  ASSERT_TRUE(unused.has_grad());
  EXPECT_EQ(unused.grad()[0], 0.0);
  EXPECT_EQ(unused.grad()[1], 0.0);
}

TEST(Backward, NonScalarRootIsContractError) {
  auto x = Tensor::vector({1.0, 2.0}, true);
  EXPECT_THROW(backward(scale(x, 2.0)), ContractError);
}

TEST(Backward, SoftmaxCrossEntropyCompositeMatchesFiniteDifferences) {
  std::mt19937_64 rng(8);
  auto theta = random_tensor({5}, rng);
  auto f = [](const Tensor& t) { return cross_entropy(scale(softmax(t), 3.0), 2); };
  EXPECT_LT(finite_diff_check(f, theta), 1e-6);
}

TEST(Backward, GradientsAreLinearInTheLoss) {
  std::mt19937_64 rng(9);
  auto a = random_tensor({3, 4}, rng, 1.0, true);
  auto b = random_tensor({4, 2}, rng, 1.0, true);
  auto loss1 = [&] { return sum(gelu(matmul(a, b))); };
  auto loss2 = [&] { return cross_entropy(reshape(slice_rows(matmul(a, b), 1, 1), {2}), 0); };

  backward(add(loss1(), loss2()));
  std::vector<double> ga(a.grad().begin(), a.grad().end());
  std::vector<double> gb(b.grad().begin(), b.grad().end());
  a.zero_grad();
  b.zero_grad();
  backward(loss1());
  backward(loss2());
  EXPECT_LT(max_abs_diff(a.grad(), ga), 1e-12);
  EXPECT_LT(max_abs_diff(b.grad(), gb), 1e-12);
}

TEST(Backward, NoGradGuardSuppressesRecording) {
  auto x = Tensor::scalar(2.0, true);
  NoGradGuard guard;
  auto y = mul(x, x);
  EXPECT_FALSE(y.requires_grad());
}

TEST(FiniteDiffCheck, LinearFunctionIsExact) {
  std::mt19937_64 rng(10);
  auto w = random_tensor({6}, rng);
  auto theta = random_tensor({6}, rng);
  EXPECT_LT(finite_diff_check([&](const Tensor& t) { return dot(w, t); }, theta), 1e-10);
}

TEST(FiniteDiffCheck, QuadraticFunction) {
  std::mt19937_64 rng(11);
  auto theta = random_tensor({6}, rng);
  EXPECT_LT(finite_diff_check([](const Tensor& t) { return dot(t, t); }, theta, 1e-6), 1e-8);
}

// Every differentiable primitive against central differences on 10 random inputs.
class PrimitiveGradients : public ::testing::TestWithParam<int> {};

TEST_P(PrimitiveGradients, PassFiniteDifferenceCheck) {
  for (const auto& r : testing::primitive_gradient_errors(100 + GetParam())) {
    EXPECT_LT(r.max_rel_error, 1e-6) << r.name;
  }
}

INSTANTIATE_TEST_SUITE_P(TenSeeds, PrimitiveGradients, ::testing::Range(0, 10));

TEST(CrossEntropyRows, EqualsMeanOfPerRowLoss) {
  std::mt19937_64 rng(12);
  auto logits = random_tensor({4, 5}, rng, 2.0);
  const std::vector<std::size_t> labels{0, 4, 2, 2};
  double expected = 0.0;
  for (std::size_t i = 0; i < 4; ++i) expected += cross_entropy(row(logits, i), labels[i]).item();
  EXPECT_NEAR(cross_entropy_rows(logits, labels).item(), expected / 4.0, 1e-14);
}

TEST(NormalizeRows, RowsHaveUnitNorm) {
  std::mt19937_64 rng(13);
  auto y = normalize_rows(random_tensor({3, 7}, rng, 5.0));
  for (std::size_t i = 0; i < 3; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < 7; ++j) s += y.at(i, j) * y.at(i, j);
    EXPECT_NEAR(s, 1.0, 1e-14);
  }
  EXPECT_THROW(normalize_rows(Tensor::zeros({2, 2})), DegenerateInputError);
}

TEST(Tensor, OverflowIsAnError) {
  auto x = Tensor::vector({1e300});
  EXPECT_THROW(mul(x, x), NumericError);
}

TEST(Tensor, ShapeMustMatchData) {
  EXPECT_THROW(Tensor::from({2, 2}, {1.0, 2.0, 3.0}), DimensionError);
}

}  // namespace
}  // namespace comma
