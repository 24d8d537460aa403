#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "lrdb/gradcheck.hpp"
#include "lrdb/ops.hpp"
#include "lrdb/sgd.hpp"
#include "lrdb/tape.hpp"
#include "test_util.hpp"

using namespace lrdb;
using lrdb::testing::random_tensor;
using lrdb::testing::tensor;

namespace {

// Quadruple-loop cross-correlation.
std::vector<double> naive_conv(const Tensor<double>& in, const Tensor<double>& w, Index stride, Index pad) {
  const Index B = in.dim(0), C = in.dim(1), H = in.dim(2), W = in.dim(3);
  const Index O = w.dim(0), K = w.dim(2);
  const Index Ho = (H + 2 * pad - K) / stride + 1, Wo = (W + 2 * pad - K) / stride + 1;
  std::vector<double> out(static_cast<std::size_t>(B * O * Ho * Wo), 0.0);
  for (Index b = 0; b < B; ++b)
    for (Index o = 0; o < O; ++o)
      for (Index y = 0; y < Ho; ++y)
        for (Index x = 0; x < Wo; ++x) {
          double acc = 0.0;
          for (Index c = 0; c < C; ++c)
            for (Index ky = 0; ky < K; ++ky)
              for (Index kx = 0; kx < K; ++kx) {
                const Index iy = y * stride - pad + ky, ix = x * stride - pad + kx;
                if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                acc += in[((b * C + c) * H + iy) * W + ix] * w[((o * C + c) * K + ky) * K + kx];
              }
          out[static_cast<std::size_t>(((b * O + o) * Ho + y) * Wo + x)] = acc;
        }
  return out;
}

}  // namespace

TEST(Conv2d, AllOnesOverlapCount) {
  auto in = make_tensor<float>(Shape{1, 1, 2, 2}, 1.0f);
  auto w = make_tensor<float>(Shape{1, 1, 3, 3}, 1.0f);
  auto out = conv2d<float>(nullptr, in, w, 1, 1);
  ASSERT_EQ(out->shape(), (Shape{1, 1, 2, 2}));
  for (float v : out->values()) EXPECT_EQ(v, 4.0f);
}

TEST(Conv2d, UnitKernelIsIdentity) {
  std::mt19937_64 rng(3);
  auto in = random_tensor<float>({2, 1, 5, 5}, rng);
  auto w = make_tensor<float>(Shape{1, 1, 1, 1}, 1.0f);
  auto out = conv2d<float>(nullptr, in, w, 1, 0);
  ASSERT_EQ(out->shape(), in->shape());
  for (Index i = 0; i < in->size(); ++i) EXPECT_EQ((*out)[i], (*in)[i]);
}

TEST(Conv2d, StridedMatchesLoopOracle) {
  std::vector<double> iv(32), wv(54);
  for (int i = 0; i < 32; ++i) iv[i] = i;
  for (int i = 0; i < 54; ++i) wv[i] = i * 0.01;
  Tensor<double> in(Shape{1, 2, 4, 4}, iv), w(Shape{3, 2, 3, 3}, wv);
  const auto expected = naive_conv(in, w, 2, 1);
  auto out = conv2d<float>(nullptr, make_tensor<float>(in.cast<float>()), make_tensor<float>(w.cast<float>()), 2, 1);
  ASSERT_EQ(out->shape(), (Shape{1, 3, 2, 2}));
  for (std::size_t i = 0; i < expected.size(); ++i) {
    EXPECT_NEAR((*out)[static_cast<Index>(i)], expected[i], 1e-5 * std::max(1.0, std::abs(expected[i])));
  }
}

TEST(Conv2d, RandomShapesMatchLoopOracle) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const Index stride = 1 + trial % 2, k = trial % 3 == 0 ? 1 : 3, pad = k / 2;
    auto in = random_tensor<double>({2, 3, 7, 6}, rng);
    auto w = random_tensor<double>({4, 3, k, k}, rng);
    const auto expected = naive_conv(*in, *w, stride, pad);
    auto out = conv2d<double>(nullptr, in, w, stride, pad);
    for (std::size_t i = 0; i < expected.size(); ++i) EXPECT_NEAR((*out)[static_cast<Index>(i)], expected[i], 1e-12);
  }
}

TEST(Conv2d, ChannelMismatchNamesBothShapes) {
  auto in = make_tensor<float>(Shape{1, 2, 4, 4});
  auto w = make_tensor<float>(Shape{1, 3, 3, 3});
  try {
    conv2d<float>(nullptr, in, w, 1, 1);
    FAIL();
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[1x2x4x4]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[1x3x3x3]"), std::string::npos) << msg;
  }
}

TEST(BatchNorm, ConstantInputTrainModeIsZero) {
  auto in = make_tensor<float>(Shape{2, 2, 3, 3}, 0.7f);
  auto gamma = make_tensor<float>(Shape{2}, 1.0f), beta = make_tensor<float>(Shape{2});
  BatchNormState<float> state(2);
  auto out = batchnorm<float>(nullptr, in, gamma, beta, state, Mode::train);
  for (float v : out->values()) EXPECT_EQ(v, 0.0f);
}

TEST(BatchNorm, ZeroGammaGivesBeta) {
  std::mt19937_64 rng(5);
  auto in = random_tensor<float>({3, 2, 2, 2}, rng);
  auto gamma = make_tensor<float>(Shape{2}), beta = tensor<float>({2}, {0.25f, -1.5f});
  for (Mode mode : {Mode::train, Mode::eval}) {
    BatchNormState<float> state(2);
    auto out = batchnorm<float>(nullptr, in, gamma, beta, state, mode);
    for (Index b = 0; b < 3; ++b)
      for (Index c = 0; c < 2; ++c)
        for (Index i = 0; i < 4; ++i) EXPECT_EQ((*out)[(b * 2 + c) * 4 + i], (*beta)[c]);
  }
}

TEST(BatchNorm, ScalarOracleAndRunningUpdate) {
  std::vector<float> values{1, 2, 3, 4, 5, 6, 7, 8};
  auto in = tensor<float>({2, 1, 2, 2}, values);
  auto gamma = make_tensor<float>(Shape{1}, 1.0f), beta = make_tensor<float>(Shape{1});
  BatchNormState<float> state(1);
  auto out = batchnorm<float>(nullptr, in, gamma, beta, state, Mode::train);
  const double mean = 4.5;
  double ss = 0.0;
  for (float v : values) ss += (v - mean) * (v - mean);
  const double var = ss / 8.0;
  for (int i = 0; i < 8; ++i) EXPECT_NEAR((*out)[i], (values[i] - mean) / std::sqrt(var + 1e-5), 1e-6);
  EXPECT_NEAR(state.running_mean[0], 0.1 * mean, 1e-6);
  EXPECT_NEAR(state.running_var[0], 0.9 + 0.1 * ss / 7.0, 1e-6);
}

TEST(BatchNorm, TrainOutputIsStandardized) {
  std::mt19937_64 rng(9);
  auto in = random_tensor<float>({8, 3, 4, 4}, rng, 3.0);
  for (auto& v : in->values()) v += 2.0f;
  auto gamma = make_tensor<float>(Shape{3}, 1.0f), beta = make_tensor<float>(Shape{3});
  BatchNormState<float> state(3);
  auto out = batchnorm<float>(nullptr, in, gamma, beta, state, Mode::train);
  for (Index c = 0; c < 3; ++c) {
    double s = 0, s2 = 0;
    for (Index b = 0; b < 8; ++b)
      for (Index i = 0; i < 16; ++i) {
        const double v = (*out)[(b * 3 + c) * 16 + i];
        s += v;
        s2 += v * v;
      }
    EXPECT_LT(std::abs(s / 128), 1e-5);
    EXPECT_NEAR(s2 / 128, 1.0, 1e-3);
  }
}

TEST(BatchNorm, EvalModeLeavesStateAlone) {
  std::mt19937_64 rng(2);
  auto in = random_tensor<float>({2, 2, 2, 2}, rng);
  auto gamma = make_tensor<float>(Shape{2}, 1.0f), beta = make_tensor<float>(Shape{2});
  BatchNormState<float> state(2);
  state.running_mean = {0.5f, -0.5f};
  state.running_var = {2.0f, 0.5f};
  const auto before = state.running_mean;
  batchnorm<float>(nullptr, in, gamma, beta, state, Mode::eval);
  EXPECT_EQ(state.running_mean, before);
}

TEST(BatchNorm, DegenerateBatchRejected) {
  auto in = make_tensor<float>(Shape{1, 2, 1, 1});
  auto gamma = make_tensor<float>(Shape{2}, 1.0f), beta = make_tensor<float>(Shape{2});
  BatchNormState<float> state(2);
  EXPECT_THROW(batchnorm<float>(nullptr, in, gamma, beta, state, Mode::train), ContractError);
  EXPECT_NO_THROW(batchnorm<float>(nullptr, in, gamma, beta, state, Mode::eval));
}

TEST(Relu, ValuesAndSubgradient) {
  auto x = tensor<float>({3}, {-1, 0, 2});
  x->enable_grad();
  Tape<float> tape;
  auto y = relu(&tape, x);
  EXPECT_EQ((*y)[0], 0.0f);
  EXPECT_EQ((*y)[1], 0.0f);
  EXPECT_EQ((*y)[2], 2.0f);
  auto s = sum(&tape, y);
  tape.backward(*s);
  EXPECT_EQ(x->grad()[0], 0.0f);
  EXPECT_EQ(x->grad()[1], 0.0f);
  EXPECT_EQ(x->grad()[2], 1.0f);
}

TEST(GlobalAvgPool, Mean) {
  auto out = global_avg_pool<float>(nullptr, tensor<float>({1, 1, 2, 2}, {1, 3, 5, 7}));
  ASSERT_EQ(out->shape(), (Shape{1, 1}));
  EXPECT_EQ((*out)[0], 4.0f);
  auto c = global_avg_pool<float>(nullptr, make_tensor<float>(Shape{2, 3, 4, 4}, 1.25f));
  for (float v : c->values()) EXPECT_EQ(v, 1.25f);
}

TEST(Linear, ArithmeticAndOracle) {
  auto out = linear<float>(nullptr, tensor<float>({1, 2}, {1, 2}), tensor<float>({2, 2}, {1, 1, 1, -1}),
                           tensor<float>({2}, {0, 0}));
  EXPECT_EQ((*out)[0], 3.0f);
  EXPECT_EQ((*out)[1], -1.0f);

  std::mt19937_64 rng(4);
  auto x = random_tensor<double>({4, 8}, rng), w = random_tensor<double>({10, 8}, rng), b = random_tensor<double>({10}, rng);
  auto y = linear<double>(nullptr, x, w, b);
  for (Index r = 0; r < 4; ++r)
    for (Index o = 0; o < 10; ++o) {
      double acc = (*b)[o];
      for (Index i = 0; i < 8; ++i) acc += (*x)[r * 8 + i] * (*w)[o * 8 + i];
      EXPECT_NEAR((*y)[r * 10 + o], acc, 1e-12);
    }
  EXPECT_THROW(linear<double>(nullptr, x, random_tensor<double>({10, 7}, rng), b), ShapeError);
}

TEST(SoftmaxT, Examples) {
  auto half = softmax_t<double>(nullptr, tensor<double>({1, 2}, {0, 0}), 3.7);
  EXPECT_DOUBLE_EQ((*half)[0], 0.5);
  auto thirds = softmax_t<double>(nullptr, tensor<double>({1, 2}, {std::log(2.0), 0}), 1.0);
  EXPECT_NEAR((*thirds)[0], 2.0 / 3.0, 1e-15);
  auto a = softmax_t<double>(nullptr, tensor<double>({1, 2}, {4, 0}), 4.0);
  auto b = softmax_t<double>(nullptr, tensor<double>({1, 2}, {1, 0}), 1.0);
  EXPECT_NEAR((*a)[0], (*b)[0], 1e-15);
  EXPECT_THROW(softmax_t<double>(nullptr, tensor<double>({1, 2}, {1, 0}), 0.0), ParameterError);
}

TEST(SoftmaxT, RowsSumToOneAndShiftInvariant) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    auto x = random_tensor<float>({3, 10}, rng, 5.0);
    auto shifted = make_tensor<float>(*x);
    for (Index i = 0; i < 10; ++i) (*shifted)[10 + i] += 7.0f;
    auto p = softmax_t<float>(nullptr, x, 2.0), q = softmax_t<float>(nullptr, shifted, 2.0);
    for (Index r = 0; r < 3; ++r) {
      double s = 0;
      for (Index i = 0; i < 10; ++i) {
        s += (*p)[r * 10 + i];
        EXPECT_NEAR((*p)[r * 10 + i], (*q)[r * 10 + i], 1e-6);
      }
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  }
}

TEST(Tape, SumGradientIsOnes) {
  auto x = make_tensor<float>(Shape{2, 3, 2});
  x->enable_grad();
  Tape<float> tape;
  auto s = sum(&tape, x);
  tape.backward(*s);
  for (float g : x->grad()) EXPECT_EQ(g, 1.0f);
}

TEST(Tape, NonScalarLossRejected) {
  auto x = make_tensor<float>(Shape{2});
  x->enable_grad();
  Tape<float> tape;
  auto y = relu(&tape, x);
  EXPECT_THROW(tape.backward(*y), ContractError);
}

TEST(Tape, ResidualAddSplitsGradientExactly) {
  std::mt19937_64 rng(1);
  auto x = random_tensor<double>({2, 2, 3, 3}, rng);
  auto w = random_tensor<double>({2, 2, 3, 3}, rng);
  x->enable_grad();
  Tape<double> tape;
  auto branch = conv2d(&tape, relu(&tape, x), w, 1, 1);
  auto y = sum(&tape, add(&tape, x, branch));
  tape.backward(*y);
  const std::vector<double> total(x->grad().begin(), x->grad().end());

  x->zero_grad();
  Tape<double> branch_tape;
  auto only = sum(&branch_tape, conv2d(&branch_tape, relu(&branch_tape, x), w, 1, 1));
  branch_tape.backward(*only);
  for (std::size_t i = 0; i < total.size(); ++i) EXPECT_EQ(total[i], 1.0 + x->grad()[i]);
}

TEST(Sgd, Examples) {
  std::vector<float> p{1.0f}, g{1.0f}, v{0.0f};
  sgd_step<float>(p, g, v, 0.1, 0.0, 0.0);
  EXPECT_FLOAT_EQ(p[0], 0.9f);

  std::vector<double> q{0.0}, g1{1.0}, u{0.0};
  sgd_step<double>(q, g1, u, 0.1, 0.9, 0.0);
  sgd_step<double>(q, g1, u, 0.1, 0.9, 0.0);
  EXPECT_NEAR(q[0], -0.29, 1e-15);

  std::vector<double> r{3.0}, zero{0.0}, vel{2.0};
  for (int k = 1; k <= 4; ++k) {
    sgd_step<double>(r, zero, vel, 0.1, 0.5, 0.0);
    EXPECT_DOUBLE_EQ(vel[0], 2.0 * std::pow(0.5, k));
  }
}

TEST(Sgd, DecayOnlyOnFlaggedSlots) {
  Sgd<double> opt(0.0, 0.5);
  auto a = make_tensor<double>(Shape{1}, 2.0), b = make_tensor<double>(Shape{1}, 2.0);
  a->enable_grad();
  b->enable_grad();
  opt.add("a", a, true);
  opt.add("b", b, false);
  opt.step(1.0);
  EXPECT_DOUBLE_EQ((*a)[0], 1.0);
  EXPECT_DOUBLE_EQ((*b)[0], 2.0);
}

TEST(GradCheck, OpsSuitePasses) {
  for (const auto& r : run_gradcheck_suite(GradCheckScope::ops, 3, 100)) {
    EXPECT_TRUE(r.passed) << r.name << " " << r.max_rel_error;
    EXPECT_GT(r.checked, 0) << r.name;
  }
}

TEST(GradCheck, DetectsWrongGradient) {
  std::mt19937_64 rng(0);
  auto x = random_tensor<double>({5}, rng);
  x->enable_grad();
  // x^2 with a doubled backward rule
  auto forward = [&](Tape<double>* tape) {
    auto out = make_tensor<double>(x->shape());
    for (Index i = 0; i < x->size(); ++i) (*out)[i] = (*x)[i] * (*x)[i];
    if (tape) {
      out->enable_grad();
      tape->record([x, out] {
        for (Index i = 0; i < x->size(); ++i) x->grad()[i] += 4.0 * (*x)[i] * out->grad()[i];
      });
    }
    return out;
  };
  GradCheckOptions opt;
  opt.eps = 1e-5;
  const auto report = check_gradients<double>("square", forward, {x}, opt);
  EXPECT_FALSE(report.passed);
}
