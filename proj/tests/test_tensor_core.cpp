#include <cmath>
#include <limits>
#include <numbers>

#include <gtest/gtest.h>

#include "mfpam/grad_check.hpp"
#include "mfpam/ops.hpp"
#include "test_util.hpp"

using namespace mfpam;
using mfpam::testing::probe;
using mfpam::testing::random_tensor;
using mfpam::testing::random_var;

namespace {

Var<double> vec_var(std::vector<double> v, Shape shape, bool grad = false) {
  return make_var(Tensor<double>(std::move(shape), std::move(v)), grad);
}

// direct nested-loop cross-correlation
Tensor<double> naive_conv(const Tensor<double>& x, const Tensor<double>& w,
                          const Tensor<double>* b, std::size_t stride, std::size_t dil,
                          Padding pad) {
  const std::size_t cin = x.extent(0), len = x.extent(1), cout = w.extent(0), k = w.extent(2);
  const std::size_t tout = (len + pad.left + pad.right - dil * (k - 1) - 1) / stride + 1;
  Tensor<double> out(Shape{cout, tout});
  for (std::size_t o = 0; o < cout; ++o)
    for (std::size_t t = 0; t < tout; ++t) {
      double acc = b ? (*b)[o] : 0.0;
      for (std::size_t c = 0; c < cin; ++c)
        for (std::size_t kk = 0; kk < k; ++kk) {
          const long src = long(t * stride + kk * dil) - long(pad.left);
          if (src >= 0 && src < long(len)) acc += w(o, c, kk) * x(c, std::size_t(src));
        }
      out(o, t) = acc;
    }
  return out;
}

}  // namespace

TEST(Tensor, ShapeAndIndexing) {
  Tensor<float> t(Shape{2, 3, 4}, 1.5f);
  EXPECT_EQ(t.size(), 24u);
  EXPECT_EQ(t.rank(), 3u);
  t(1, 2, 3) = 7.0f;
  EXPECT_EQ(t[23], 7.0f);
  EXPECT_THROW(Tensor<float>(Shape{2, 2}, std::vector<float>(3)), ConfigError);
  EXPECT_THROW(Tensor<float>(Shape{1, 1, 1, 1}), ConfigError);
}

TEST(Tape, SumGivesOnes) {
  auto p = random_var({3, 4}, 1);
  Tape<double> tape;
  backward(tape, sum(tape, p));
  for (double g : p->grad.data()) EXPECT_EQ(g, 1.0);
}

TEST(Tape, HalfSquaredNormGivesValue) {
  auto p = random_var({5}, 2);
  Tape<double> tape;
  auto loss = scale(tape, sum(tape, mul(tape, p, p)), 0.5);
  backward(tape, loss);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_DOUBLE_EQ(p->grad[i], p->value[i]);
}

TEST(Tape, SecondBackwardDoublesExactly) {
  auto x = random_var({2, 9}, 3);
  auto w = random_var({3, 2, 3}, 4);
  auto b = random_var({3}, 5);
  Tape<double> tape;
  auto y = activation(tape, conv1d(tape, x, w, b, 2, 1, Padding::same(3)), Activation::snake(5));
  auto loss = probe(tape, y);
  tape.backward(loss);
  const auto once_w = w->grad, once_x = x->grad;
  tape.backward(loss);
  for (std::size_t i = 0; i < w->grad.size(); ++i) EXPECT_EQ(w->grad[i], 2.0 * once_w[i]);
  for (std::size_t i = 0; i < x->grad.size(); ++i) EXPECT_EQ(x->grad[i], 2.0 * once_x[i]);
}

TEST(Tape, ZeroGradClears) {
  auto p = make_parameter<double>("p", random_tensor({4}, 6));
  Tape<double> tape;
  tape.backward(sum(tape, p.var));
  std::vector<Parameter<double>> ps{p};
  zero_grad(ps);
  for (double g : p.var->grad.data()) EXPECT_EQ(g, 0.0);
}

TEST(Tape, NonScalarLossRejected) {
  auto p = random_var({3}, 7);
  Tape<double> tape;
  auto y = scale(tape, p, 2.0);
  EXPECT_THROW(tape.backward(y), UsageError);
}

TEST(Tape, NonRecordingTapeKeepsNothing) {
  auto p = random_var({3}, 8);
  Tape<double> tape;
  tape.set_recording(false);
  auto y = activation(tape, p, Activation::swish());
  EXPECT_EQ(tape.size(), 0u);
  EXPECT_EQ(y->value.size(), 3u);
}

TEST(Conv1d, IdentityKernel) {
  auto x = vec_var({1, 2, 3}, {1, 3});
  auto w = vec_var({1}, {1, 1, 1});
  auto b = vec_var({0}, {1});
  Tape<double> tape;
  auto y = conv1d(tape, x, w, b);
  EXPECT_EQ(y->value.shape(), (Shape{1, 3}));
  EXPECT_EQ(y->value[0], 1.0);
  EXPECT_EQ(y->value[1], 2.0);
  EXPECT_EQ(y->value[2], 3.0);
}

TEST(Conv1d, OutputLengthArithmetic) {
  EXPECT_EQ(conv_output_length(16, 4, 4, 1, {}), 4u);
  EXPECT_EQ(conv_output_length(16, 4, 4, 1, Padding::same(4)), 4u);
  EXPECT_EQ(conv_output_length(65536, 4, 4, 1, Padding::same(4)), 16384u);
  EXPECT_EQ(conv_output_length(1024, 12, 4, 1, Padding::same(12)), 256u);
  EXPECT_EQ(conv_output_length(10, 3, 1, 2, Padding::symmetric(2)), 10u);
  EXPECT_THROW(conv_output_length(3, 5, 1, 1, {}), ConfigError);
}

TEST(Conv1d, ChannelMismatchIsConfigError) {
  Tape<double> tape;
  EXPECT_THROW(conv1d(tape, random_var({2, 8}, 1), random_var({3, 4, 3}, 2), Var<double>{}),
               ConfigError);
}

TEST(Conv1d, MatchesNestedLoops) {
  for (auto [stride, dil, k] : {std::tuple{1, 1, 3}, {4, 1, 4}, {2, 3, 3}, {4, 1, 12}}) {
    auto x = random_tensor({3, 37}, 10 + k);
    auto w = random_tensor({5, 3, std::size_t(k)}, 20 + k);
    auto b = random_tensor({5}, 30 + k);
    const Padding pad = Padding::same(std::size_t(k), std::size_t(dil));
    Tape<double> tape;
    auto y = conv1d(tape, constant(x), constant(w), constant(b), std::size_t(stride),
                    std::size_t(dil), pad);
    auto ref = naive_conv(x, w, &b, std::size_t(stride), std::size_t(dil), pad);
    ASSERT_EQ(y->value.shape(), ref.shape());
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y->value[i], ref[i], 1e-12);
  }
}

TEST(Conv1d, KernelOneIsPerStepLinearMap) {
  auto x = random_tensor({4, 11}, 40);
  auto w = random_tensor({3, 4, 1}, 41);
  auto b = random_tensor({3}, 42);
  Tape<double> tape;
  auto y = conv1d(tape, constant(x), constant(w), constant(b));
  auto xt = transpose(tape, constant(x));
  auto lin = linear(tape, xt, constant(w.reshaped({3, 4})), constant(b));
  auto back = transpose(tape, lin);
  for (std::size_t i = 0; i < y->value.size(); ++i)
    EXPECT_NEAR(y->value[i], back->value[i], 1e-12);
}

TEST(Conv1d, GradCheckSpecCase) {
  auto x = random_var({2, 7}, 50);
  auto w = random_var({3, 2, 3}, 51);
  auto b = random_var({3}, 52);
  auto rep = grad_check(
      [&](Tape<double>& t) { return probe(t, conv1d(t, x, w, b, 1, 1, Padding::same(3))); },
      {x, w, b}, {.tolerance = 1e-5});
  EXPECT_TRUE(rep.pass) << rep.max_rel_err;
}

TEST(Conv1d, GradCheckModelSchedule) {
  // strided, even and odd kernels as used by the analysis blocks
  for (auto [cin, cout, k] : {std::tuple{1, 6, 4}, {6, 6, 4}, {12, 24, 8}, {48, 96, 12}}) {
    auto x = random_var({std::size_t(cin), 48}, 60 + k);
    auto w = random_var({std::size_t(cout), std::size_t(cin), std::size_t(k)}, 61 + k);
    auto b = random_var({std::size_t(cout)}, 62 + k);
    auto rep = grad_check(
        [&](Tape<double>& t) {
          return probe(t, conv1d(t, x, w, b, 4, 1, Padding::same(std::size_t(k))));
        },
        {x, w, b}, {.subsample = 400, .seed = std::uint64_t(k)});
    EXPECT_TRUE(rep.pass) << cin << "x" << cout << "x" << k << ": " << rep.max_rel_err;
  }
}

TEST(Conv1d, CorruptedBackwardIsCaught) {
  auto x = random_var({2, 7}, 70);
  auto w = random_var({3, 2, 3}, 71);
  auto corrupted = [&](Tape<double>& t) {
    auto y = conv1d(t, x, w, Var<double>{}, 1, 1, Padding::same(3));
    // pass-through node whose backward scales the gradient by 1.5
    auto z = make_var(Tensor<double>(y->value), true);
    t.record(
        z,
        [y, z]() {
          auto& g = y->ensure_grad();
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += 1.5 * z->grad[i];
        },
        {y});
    return probe(t, z);
  };
  auto rep = grad_check(corrupted, {x, w});
  EXPECT_FALSE(rep.pass);
  EXPECT_GT(rep.max_rel_err, 0.1);
}

TEST(DepthwiseSeparable, DeltaAndIdentityReproduceInput) {
  const std::size_t c = 4, k = 5;
  auto x = random_tensor({c, 20}, 80);
  Tensor<double> dw(Shape{c, k});
  for (std::size_t i = 0; i < c; ++i) dw(i, k / 2) = 1.0;
  Tensor<double> pw(Shape{c, c});
  for (std::size_t i = 0; i < c; ++i) pw(i, i) = 1.0;
  Tape<double> tape;
  auto y = depthwise_separable_conv1d(tape, constant(x), constant(dw),
                                      constant(Tensor<double>(Shape{c})), constant(pw),
                                      constant(Tensor<double>(Shape{c})));
  ASSERT_EQ(y->value.shape(), x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_DOUBLE_EQ(y->value[i], x[i]);
}

TEST(DepthwiseSeparable, ParameterArithmetic) {
  const std::size_t cin = 32, cout = 32, k = 5;
  EXPECT_EQ(cin * k + cout * cin + cin + cout, 1248u);
}

TEST(DepthwiseSeparable, EqualsTwoStageConvComposition) {
  const std::size_t cin = 3, cout = 4, k = 5;
  auto x = random_tensor({cin, 17}, 90);
  auto dw = random_tensor({cin, k}, 91);
  auto dwb = random_tensor({cin}, 92);
  auto pw = random_tensor({cout, cin}, 93);
  auto pwb = random_tensor({cout}, 94);
  Tape<double> tape;
  auto y = depthwise_separable_conv1d(tape, constant(x), constant(dw), constant(dwb),
                                      constant(pw), constant(pwb));
  // depthwise as a block-diagonal dense conv, then a 1-tap conv
  Tensor<double> dense(Shape{cin, cin, k});
  for (std::size_t c = 0; c < cin; ++c)
    for (std::size_t kk = 0; kk < k; ++kk) dense(c, c, kk) = dw(c, kk);
  auto mid = naive_conv(x, dense, &dwb, 1, 1, Padding::same(k));
  auto ref = naive_conv(mid, pw.reshaped({cout, cin, 1}), &pwb, 1, 1, {});
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y->value[i], ref[i], 1e-12);
}

TEST(DepthwiseSeparable, GradCheck) {
  auto x = random_var({4, 13}, 100);
  auto dw = random_var({4, 5}, 101);
  auto dwb = random_var({4}, 102);
  auto pw = random_var({3, 4}, 103);
  auto pwb = random_var({3}, 104);
  auto rep = grad_check(
      [&](Tape<double>& t) { return probe(t, depthwise_separable_conv1d(t, x, dw, dwb, pw, pwb)); },
      {x, dw, dwb, pw, pwb});
  EXPECT_TRUE(rep.pass) << rep.max_rel_err;
  auto rep2 = grad_check(
      [&](Tape<double>& t) { return probe(t, depthwise_conv1d(t, x, dw, dwb, 2, Padding::same(5))); },
      {x, dw, dwb});
  EXPECT_TRUE(rep2.pass) << rep2.max_rel_err;
}

TEST(Linear, IdentityAndBiasOnly) {
  auto x = random_tensor({5, 3}, 110);
  Tensor<double> eye(Shape{3, 3});
  for (std::size_t i = 0; i < 3; ++i) eye(i, i) = 1.0;
  Tape<double> tape;
  auto y = linear(tape, constant(x), constant(eye), constant(Tensor<double>(Shape{3})));
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(y->value[i], x[i]);
  auto b = random_tensor({3}, 111);
  auto z = linear(tape, constant(x), constant(Tensor<double>(Shape{3, 3})), constant(b));
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(z->value(r, c), b[c]);
  EXPECT_THROW(linear(tape, constant(x), constant(Tensor<double>(Shape{2, 4})), Var<double>{}),
               ConfigError);
}

TEST(Linear, GradCheckTight) {
  auto x = random_var({6, 4}, 120);
  auto w = random_var({3, 4}, 121);
  auto b = random_var({3}, 122);
  auto rep = grad_check([&](Tape<double>& t) { return probe(t, linear(t, x, w, b)); },
                        {x, w, b}, {.tolerance = 1e-6});
  EXPECT_TRUE(rep.pass) << rep.max_rel_err;
  auto v = random_var({4}, 123);
  auto rep1 = grad_check([&](Tape<double>& t) { return probe(t, linear(t, v, w, b)); },
                         {v, w, b}, {.tolerance = 1e-6});
  EXPECT_TRUE(rep1.pass) << rep1.max_rel_err;
}

TEST(Activation, SnakeExamples) {
  for (double a : {0.2, 5.0, 17.0}) EXPECT_EQ(snake_value(a, 0.0), 0.0);
  EXPECT_NEAR(snake_value(1.0, std::numbers::pi / 2), std::numbers::pi / 2 + 1.0, 1e-12);
  Rng rng(130);
  for (int i = 0; i < 200; ++i) {
    const double x = rng.uniform(-10, 10);
    EXPECT_NEAR(snake_value(17.0, x + std::numbers::pi / 17) - snake_value(17.0, x),
                std::numbers::pi / 17, 1e-9);
  }
}

TEST(Activation, SnakeBounds) {
  Rng rng(131);
  for (double a : {0.2, 5.0, 7.0, 11.0, 13.0, 17.0})
    for (int i = 0; i < 500; ++i) {
      const double x = rng.uniform(-20, 20);
      const double y = snake_value(a, x);
      EXPECT_GE(y, x);
      EXPECT_LE(y, x + 1.0 / a + 1e-12);
    }
}

TEST(Activation, SnakeRejectsNonPositiveA) {
  Tape<double> tape;
  EXPECT_THROW(activation(tape, random_var({3}, 1), Activation::snake(0.0)), ConfigError);
  EXPECT_THROW(activation(tape, random_var({3}, 1), Activation::snake(-1.0)), ConfigError);
}

TEST(Activation, SwishValue) {
  Tape<double> tape;
  auto y = activation(tape, vec_var({-1.0, 0.0, 2.0}, {3}), Activation::swish());
  EXPECT_NEAR(y->value[0], -1.0 / (1.0 + std::exp(1.0)), 1e-15);
  EXPECT_EQ(y->value[1], 0.0);
  EXPECT_NEAR(y->value[2], 2.0 / (1.0 + std::exp(-2.0)), 1e-15);
}

TEST(Activation, GradChecks) {
  auto x = random_var({3, 8}, 140, -2.0, 2.0);
  for (auto act : {Activation::relu(), Activation::swish(), Activation::sigmoid(),
                   Activation::snake(0.2), Activation::snake(5)}) {
    auto rep = grad_check([&](Tape<double>& t) { return probe(t, activation(t, x, act)); }, {x},
                          {.tolerance = 1e-6});
    EXPECT_TRUE(rep.pass) << int(act.kind) << " a=" << act.a << ": " << rep.max_rel_err;
  }
  // truncation error of the central difference grows like (a*step)^2
  for (double a : {7.0, 11.0, 13.0, 17.0}) {
    auto act = Activation::snake(a);
    auto rep = grad_check([&](Tape<double>& t) { return probe(t, activation(t, x, act)); }, {x});
    EXPECT_TRUE(rep.pass) << int(act.kind) << " a=" << act.a << ": " << rep.max_rel_err;
  }
}

TEST(Resample, SpecExamples) {
  Tape<double> tape;
  auto n = resample_time(tape, vec_var({1, 2}, {1, 2}), 4, ResampleMode::nearest);
  EXPECT_EQ(n->value.to_vector(), (std::vector<double>{1, 1, 2, 2}));
  auto l = resample_time(tape, vec_var({0, 2}, {1, 2}), 3, ResampleMode::linear);
  EXPECT_EQ(l->value.to_vector(), (std::vector<double>{0, 1, 2}));
  auto c = resample_time(tape, vec_var(std::vector<double>(64, 3.25), {1, 64}), 512,
                         ResampleMode::linear);
  for (double v : c->value.data()) EXPECT_EQ(v, 3.25);
}

TEST(Resample, SameLengthIsIdentity) {
  auto x = random_tensor({3, 10}, 150);
  Tape<double> tape;
  for (auto mode : {ResampleMode::nearest, ResampleMode::linear})
    EXPECT_EQ(resample_time(tape, constant(x), 10, mode)->value, x);
}

TEST(Resample, GradChecks) {
  auto x = random_var({2, 9}, 160);
  for (auto mode : {ResampleMode::nearest, ResampleMode::linear})
    for (std::size_t target : {4u, 9u, 20u, 512u}) {
      auto rep = grad_check(
          [&](Tape<double>& t) { return probe(t, resample_time(t, x, target, mode)); }, {x});
      EXPECT_TRUE(rep.pass) << target << ": " << rep.max_rel_err;
    }
}

TEST(Elementwise, GradChecks) {
  auto a = random_var({2, 5}, 170);
  auto b = random_var({2, 5}, 171);
  auto c = random_var({3, 5}, 172);
  EXPECT_TRUE(grad_check([&](Tape<double>& t) { return probe(t, add(t, a, b)); }, {a, b}).pass);
  EXPECT_TRUE(grad_check([&](Tape<double>& t) { return probe(t, mul(t, a, b)); }, {a, b}).pass);
  EXPECT_TRUE(grad_check([&](Tape<double>& t) { return probe(t, scale(t, a, -0.3)); }, {a}).pass);
  EXPECT_TRUE(grad_check([&](Tape<double>& t) { return probe(t, transpose(t, c)); }, {c}).pass);
  EXPECT_TRUE(
      grad_check([&](Tape<double>& t) { return probe(t, concat_channels(t, {a, c, b})); }, {a, b, c})
          .pass);
}

TEST(WeightedBlend, EqualInputsAndZeroWeight) {
  auto x = random_tensor({2, 6}, 180);
  Tape<double> tape;
  auto y = weighted_blend(tape, {constant(x), constant(x)}, vec_var({1, 1}, {2}), 1e-4);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(y->value[i], x[i] * 2.0 / 2.0001, 1e-15);
  auto x2 = random_tensor({2, 6}, 181);
  auto z = weighted_blend(tape, {constant(x), constant(x2)}, vec_var({1, 0}, {2}), 1e-4);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(z->value[i], x[i] / 1.0001, 1e-15);
  // negative raw weights act as zero
  auto n = weighted_blend(tape, {constant(x), constant(x2)}, vec_var({1, -3}, {2}), 1e-4);
  EXPECT_EQ(n->value, z->value);
}

TEST(WeightedBlend, AllZeroWeightsAreFinite) {
  Tape<double> tape;
  auto y = weighted_blend(tape, {random_var({2, 3}, 1), random_var({2, 3}, 2)},
                          vec_var({0, 0}, {2}), 1e-4);
  for (double v : y->value.data()) EXPECT_EQ(v, 0.0);
}

TEST(WeightedBlend, GradCheck) {
  auto a = random_var({3, 7}, 190);
  auto b = random_var({3, 7}, 191);
  auto c = random_var({3, 7}, 192);
  auto w = random_var({3}, 193, 0.2, 2.0);
  auto rep = grad_check(
      [&](Tape<double>& t) { return probe(t, weighted_blend(t, {a, b, c}, w, 1e-4)); },
      {a, b, c, w});
  EXPECT_TRUE(rep.pass) << rep.max_rel_err;
}

TEST(Lstm, ZeroParametersGiveZeroOutput) {
  LstmWeights<double> p{constant(Tensor<double>(Shape{12, 4})),
                        constant(Tensor<double>(Shape{12, 3})), constant(Tensor<double>(Shape{12}))};
  Tape<double> tape;
  auto y = lstm_sequence(tape, random_var({4, 6}, 200), p, std::optional{p});
  EXPECT_EQ(y->value.shape(), (Shape{3, 6}));
  for (double v : y->value.data()) EXPECT_EQ(v, 0.0);
}

TEST(Lstm, SingleStepMatchesCellEquations) {
  const std::size_t c = 4, h = 3;
  auto x = random_tensor({c, 1}, 210);
  auto wih = random_tensor({4 * h, c}, 211);
  auto whh = random_tensor({4 * h, h}, 212);
  auto bias = random_tensor({4 * h}, 213);
  Tape<double> tape;
  auto y = lstm_sequence(tape, constant(x), {constant(wih), constant(whh), constant(bias)});
  auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
  for (std::size_t j = 0; j < h; ++j) {
    double z[4];
    for (std::size_t g = 0; g < 4; ++g) {
      z[g] = bias[g * h + j];
      for (std::size_t i = 0; i < c; ++i) z[g] += wih(g * h + j, i) * x[i];
    }
    const double cell = sig(z[0]) * std::tanh(z[2]);
    EXPECT_NEAR(y->value[j], sig(z[3]) * std::tanh(cell), 1e-14);
  }
}

TEST(Lstm, GradCheckSpecCase) {
  auto x = random_var({4, 5}, 220);
  LstmWeights<double> f{random_var({12, 4}, 221), random_var({12, 3}, 222), random_var({12}, 223)};
  LstmWeights<double> b{random_var({12, 4}, 224), random_var({12, 3}, 225), random_var({12}, 226)};
  auto rep = grad_check([&](Tape<double>& t) { return probe(t, lstm_sequence(t, x, f)); },
                        {x, f.w_ih, f.w_hh, f.bias});
  EXPECT_TRUE(rep.pass) << rep.max_rel_err;
  auto rep2 = grad_check([&](Tape<double>& t) { return probe(t, lstm_sequence(t, x, f, std::optional{b})); },
                         {x, f.w_ih, f.w_hh, f.bias, b.w_ih, b.w_hh, b.bias});
  EXPECT_TRUE(rep2.pass) << rep2.max_rel_err;
}

TEST(Bce, UniformHalfIsNLog2) {
  Tensor<double> y(Shape{1, 360});
  y[180] = 1.0;
  Tape<double> tape;
  auto loss = bce_loss(tape, constant(Tensor<double>(Shape{1, 360}, 0.5)), y);
  EXPECT_NEAR(loss->value[0], 360.0 * std::log(2.0), 1e-10);
  EXPECT_NEAR(loss->value[0], 249.53, 0.01);
}

TEST(Bce, SaturatedTowardTargetIsNearZero) {
  Tensor<double> y(Shape{2, 360});
  y[7] = 1.0;
  Tensor<double> q(Shape{2, 360}, 1e-9);
  q[7] = 1.0 - 1e-9;
  Tape<double> tape;
  EXPECT_LT(bce_loss(tape, constant(q), y)->value[0], 1e-3);
}

TEST(Bce, MatchesDirectSummation) {
  auto q = random_tensor({5, 360}, 230, 0.01, 0.99);
  Tensor<double> y(Shape{5, 360});
  Rng rng(231);
  for (auto& v : y.storage()) v = rng.uniform() < 0.1 ? 1.0 : 0.0;
  double direct = 0.0;
  for (std::size_t f = 0; f < 5; ++f) {
    double frame = 0.0;
    for (std::size_t i = 0; i < 360; ++i) {
      const double p = q(f, i), t = y(f, i);
      frame += -t * std::log(p) - (1 - t) * std::log(1 - p);
    }
    direct += frame;
  }
  Tape<double> tape;
  EXPECT_NEAR(bce_loss(tape, constant(q), y)->value[0], direct / 5.0, 1e-9);
}

TEST(Bce, AccurateOnManySmallProbabilities) {
  auto q = random_tensor({64, 360}, 235, 1e-4, 2e-2);
  Tensor<double> y(Shape{64, 360});
  for (std::size_t f = 0; f < 64; ++f) y(f, 5 * f) = 1.0;
  long double oracle = 0.0L;
  for (std::size_t i = 0; i < q.size(); ++i) {
    const long double p = q[i];
    oracle += y[i] > 0 ? -std::log(p) : -std::log1p(-p);
  }
  oracle /= 64.0L;
  Tape<double> tape;
  const double loss = bce_loss(tape, constant(q), y)->value[0];
  EXPECT_LE(std::abs(loss - double(oracle)), 4.0 * std::numeric_limits<double>::epsilon() * loss);
}

TEST(Bce, GradientIsAnalytic) {
  auto q = random_var({3, 360}, 240, 0.05, 0.95);
  Tensor<double> y(Shape{3, 360});
  y[10] = y[400] = 1.0;
  Tape<double> tape;
  tape.backward(bce_loss(tape, q, y));
  for (std::size_t i = 0; i < q->value.size(); ++i) {
    const double p = q->value[i];
    EXPECT_NEAR(q->grad[i], (p - y[i]) / (p * (1 - p)) / 3.0, 1e-6);
  }
  auto rep = grad_check([&](Tape<double>& t) { return bce_loss(t, q, y); }, {q},
                        {.subsample = 200, .seed = 1});
  EXPECT_TRUE(rep.pass) << rep.max_rel_err;
}
