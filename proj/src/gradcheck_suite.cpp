#include <array>
#include <random>
#include <type_traits>
#include <string>
#include <vector>

#include "lrdb/gradcheck.hpp"
#include "lrdb/losses.hpp"
#include "lrdb/network.hpp"
#include "lrdb/ops.hpp"

namespace lrdb {
namespace {

template <typename Scalar>
TensorPtr<Scalar> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  auto t = make_tensor<Scalar>(std::move(shape));
  std::uniform_real_distribution<double> uniform(lo, hi);
  for (auto& v : t->values()) v = static_cast<Scalar>(uniform(rng));
  return t;
}

// Entries uniform in +-[0.1, 1], keeping ReLU kinks out of the difference stencil.
template <typename Scalar>
TensorPtr<Scalar> away_from_zero(Shape shape, std::mt19937_64& rng) {
  auto t = random_tensor<Scalar>(std::move(shape), rng, 0.1, 1.0);
  std::bernoulli_distribution coin(0.5);
  for (auto& v : t->values()) v = coin(rng) ? v : -v;
  return t;
}

template <typename Scalar>
TensorPtr<Scalar> one_hot(Index rows, Index classes, std::mt19937_64& rng) {
  auto t = make_tensor<Scalar>(Shape{rows, classes});
  std::uniform_int_distribution<Index> pick(0, classes - 1);
  for (Index r = 0; r < rows; ++r) (*t)[r * classes + pick(rng)] = Scalar(1);
  return t;
}

struct ImageShape {
  Index batch, channels, height, width;
};

ImageShape random_image_shape(std::mt19937_64& rng) {
  std::uniform_int_distribution<Index> batch(1, 2), channels(1, 4), extent(3, 8);
  return {batch(rng), channels(rng), extent(rng), extent(rng)};
}

constexpr double kF32Eps = 1e-2, kF32Floor = 1e-1;
constexpr double kF64Eps = 1e-5, kF64Floor = 1e-4;
// smaller step through whole networks, where ReLU kinks sit densely
constexpr double kNetEps = 1e-6;  // refined once to 1e-7

template <typename Scalar>
constexpr bool kDouble = std::is_same_v<Scalar, double>;

template <typename Scalar>
GradCheckOptions options_for(std::uint64_t seed) {
  GradCheckOptions opt;
  opt.seed = seed;
  opt.eps = kDouble<Scalar> ? kF64Eps : kF32Eps;
  opt.floor = kDouble<Scalar> ? kF64Floor : kF32Floor;
  return opt;
}

template <typename Scalar>
void ops_suite(std::uint64_t seed, std::vector<GradCheckReport>& out, const std::string& tag) {
  std::mt19937_64 rng(seed);
  const GradCheckOptions opt = options_for<Scalar>(seed);
  const ImageShape s = random_image_shape(rng);
  std::uniform_int_distribution<Index> cout_pick(1, 4), kernel_pick(1, 3), stride_pick(1, 2), pad_pick(0, 1);

  {
    const Index k = std::min<Index>(kernel_pick(rng), std::min(s.height, s.width));
    const Index stride = stride_pick(rng), pad = pad_pick(rng);
    auto x = random_tensor<Scalar>({s.batch, s.channels, s.height, s.width}, rng);
    auto w = random_tensor<Scalar>({cout_pick(rng), s.channels, k, k}, rng);
    out.push_back(check_gradients<Scalar>(
        "conv2d" + tag, [&](Tape<Scalar>* t) { return conv2d(t, x, w, stride, pad); }, {x, w}, opt));
  }
  for (Mode mode : {Mode::train, Mode::eval}) {
    auto x = random_tensor<Scalar>({s.batch, s.channels, s.height, s.width}, rng, -2.0, 2.0);
    auto gamma = random_tensor<Scalar>({s.channels}, rng, 0.5, 1.5);
    auto beta = random_tensor<Scalar>({s.channels}, rng);
    BatchNormState<Scalar> state(s.channels);
    for (auto& v : state.running_mean) v = static_cast<Scalar>(0.1);
    for (auto& v : state.running_var) v = static_cast<Scalar>(1.5);
    const std::string name = mode == Mode::train ? "batchnorm(train)" : "batchnorm(eval)";
    out.push_back(check_gradients<Scalar>(
        name + tag,
        [&](Tape<Scalar>* t) {
          BatchNormState<Scalar> scratch = state;
          return batchnorm(t, x, gamma, beta, scratch, mode);
        },
        {x, gamma, beta}, opt));
  }
  {
    auto x = away_from_zero<Scalar>({s.batch, s.channels, s.height, s.width}, rng);
    out.push_back(check_gradients<Scalar>("relu" + tag, [&](Tape<Scalar>* t) { return relu(t, x); }, {x}, opt));
  }
  {
    auto a = away_from_zero<Scalar>({s.batch, s.channels, s.height, s.width}, rng);
    auto b = random_tensor<Scalar>({s.batch, s.channels, s.height, s.width}, rng);
    // residual merge where the skip input also feeds the branch
    out.push_back(check_gradients<Scalar>(
        "add(residual)" + tag, [&](Tape<Scalar>* t) { return add(t, a, add(t, relu(t, a), b)); }, {a, b}, opt));
  }
  {
    auto x = random_tensor<Scalar>({s.batch, s.channels, s.height, s.width}, rng);
    out.push_back(check_gradients<Scalar>(
        "global_avg_pool" + tag, [&](Tape<Scalar>* t) { return global_avg_pool(t, x); }, {x}, opt));
  }
  {
    const Index din = s.channels * 2, dout = cout_pick(rng) + 1;
    auto x = random_tensor<Scalar>({s.batch, din}, rng);
    auto w = random_tensor<Scalar>({dout, din}, rng);
    auto b = random_tensor<Scalar>({dout}, rng);
    out.push_back(check_gradients<Scalar>(
        "linear" + tag, [&](Tape<Scalar>* t) { return linear(t, x, w, b); }, {x, w, b}, opt));
  }
  {
    std::uniform_real_distribution<double> temp(0.5, 5.0);
    const double temperature = temp(rng);
    auto x = random_tensor<Scalar>({s.batch, 10}, rng, -3.0, 3.0);
    out.push_back(check_gradients<Scalar>(
        "softmax_t" + tag, [&](Tape<Scalar>* t) { return softmax_t(t, x, temperature); }, {x}, opt));
  }
}

// Block features of at most 2x4x8x8, with per-block channel counts.
template <typename Scalar>
ForwardResult<Scalar> fake_forward(Index batch, const std::array<Index, 3>& channels, std::mt19937_64& rng) {
  ForwardResult<Scalar> r;
  r.feat1 = random_tensor<Scalar>({batch, channels[0], 8, 8}, rng);
  r.feat2 = random_tensor<Scalar>({batch, channels[1], 4, 4}, rng);
  r.feat3 = random_tensor<Scalar>({batch, channels[2], 2, 2}, rng);
  r.pooled = random_tensor<Scalar>({batch, channels[2]}, rng);
  r.logits = random_tensor<Scalar>({batch, 10}, rng, -3.0, 3.0);
  return r;
}

template <typename Scalar>
void losses_suite(std::uint64_t seed, std::vector<GradCheckReport>& out, const std::string& tag) {
  std::mt19937_64 rng(seed + 7919);
  const GradCheckOptions opt = options_for<Scalar>(seed);
  const ImageShape s = random_image_shape(rng);
  // single precision rounding swamps the cubic map and the T^2-scaled terms
  std::uniform_int_distribution<int> p_pick(1, kDouble<Scalar> ? 3 : 2);
  std::uniform_real_distribution<double> unit(0.0, 1.0), temp(1.0, 6.0);

  {
    const int p = p_pick(rng);
    auto x = p == 1 ? away_from_zero<Scalar>({s.batch, s.channels, s.height, s.width}, rng)
                    : random_tensor<Scalar>({s.batch, s.channels, s.height, s.width}, rng);
    out.push_back(check_gradients<Scalar>(
        "attention_map(p=" + std::to_string(p) + ")" + tag, [&](Tape<Scalar>* t) { return attention_map(t, x, p); },
        {x}, opt));
  }
  {
    auto hr = random_tensor<Scalar>({s.batch, s.channels + 1, s.height, s.width}, rng);
    auto lr = random_tensor<Scalar>({s.batch, s.channels, s.height, s.width}, rng);
    out.push_back(check_gradients<Scalar>(
        "attention_loss_block" + tag, [&](Tape<Scalar>* t) { return attention_loss_block(t, hr, lr, 2); }, {hr, lr},
        opt));
  }
  {
    const ForwardResult<Scalar> teacher = fake_forward<Scalar>(s.batch, {4, 4, 4}, rng);
    const ForwardResult<Scalar> student = fake_forward<Scalar>(s.batch, {2, 3, 3}, rng);
    const double beta = unit(rng);
    const std::array<double, 3> omega{unit(rng) * 2, unit(rng) * 2, unit(rng) * 2};
    out.push_back(check_gradients<Scalar>(
        "attention_loss_total" + tag,
        [&](Tape<Scalar>* t) {
          return attention_loss_total(t, {teacher.feat1, teacher.feat2, teacher.feat3},
                                      {student.feat1, student.feat2, student.feat3}, beta, omega, 2)
              .total;
        },
        {student.feat1, student.feat2, student.feat3}, opt));
  }
  auto labels = one_hot<Scalar>(s.batch, 10, rng);
  {
    auto x = random_tensor<Scalar>({s.batch, 10}, rng, -3.0, 3.0);
    out.push_back(check_gradients<Scalar>(
        "hard_loss" + tag, [&](Tape<Scalar>* t) { return hard_loss(t, x, labels); }, {x}, opt));
  }
  const double temperature = temp(rng);
  {
    auto teacher = random_tensor<Scalar>({s.batch, 10}, rng, -3.0, 3.0);
    auto student = random_tensor<Scalar>({s.batch, 10}, rng, -3.0, 3.0);
    out.push_back(check_gradients<Scalar>(
        "soft_loss" + tag, [&](Tape<Scalar>* t) { return soft_loss(t, teacher, student, temperature); }, {student},
        opt));
    const double alpha = unit(rng);
    if (kDouble<Scalar>)
      out.push_back(check_gradients<Scalar>(
          "kd_loss" + tag,
          [&](Tape<Scalar>* t) { return kd_loss(t, teacher, student, labels, alpha, temperature).total; }, {student},
          opt));
  }
  {
    std::vector<TensorPtr<Scalar>> weights{random_tensor<Scalar>({3, 4}, rng), random_tensor<Scalar>({2, 2, 3, 3}, rng)};
    const double lambda = unit(rng);
    out.push_back(check_gradients<Scalar>(
        "reg_loss" + tag, [&](Tape<Scalar>* t) { return reg_loss(t, weights, lambda); }, weights, opt));
  }
  {
    auto fh = random_tensor<Scalar>({s.batch, 8}, rng);
    auto fl = random_tensor<Scalar>({s.batch, 8}, rng);
    out.push_back(check_gradients<Scalar>(
        "feature_mse" + tag, [&](Tape<Scalar>* t) { return feature_mse(t, fh, fl); }, {fl}, opt));
  }
  if (kDouble<Scalar>) {
    const ForwardResult<Scalar> teacher = fake_forward<Scalar>(s.batch, {4, 4, 4}, rng);
    const ForwardResult<Scalar> student = fake_forward<Scalar>(s.batch, {2, 3, 3}, rng);
    std::vector<TensorPtr<Scalar>> weights{random_tensor<Scalar>({4, 3}, rng)};
    auto adapter = random_tensor<Scalar>({4, 3}, rng);
    DistillConfig cfg;
    cfg.alpha = unit(rng);
    cfg.temperature = temperature;
    cfg.beta = unit(rng);
    cfg.omega = {unit(rng) * 2, unit(rng) * 2, unit(rng) * 2};
    cfg.lambda = unit(rng) * 0.1;
    cfg.mu = unit(rng) * 0.1;
    out.push_back(check_gradients<Scalar>(
        "joint_loss" + tag,
        [&](Tape<Scalar>* t) { return joint_loss(t, teacher, student, labels, weights, cfg, adapter).total; },
        {student.feat1, student.feat2, student.feat3, student.pooled, student.logits, weights[0], adapter}, opt));
  }
}

// Full joint objective through a small student network, double precision.
void net_suite(std::uint64_t seed, std::vector<GradCheckReport>& out) {
  static const char* const kStudents[] = {"r8-2-1-1", "r8-2-2-2", "r8-2-1-3", "p8", "r8-1-1-2"};
  std::mt19937_64 rng(seed + 104729);
  const std::string spec_text = kStudents[seed % std::size(kStudents)];
  auto student = Network<double>::build(parse_spec(spec_text), seed);
  auto teacher = Network<double>::build(parse_spec("r8-2-2-1"), seed + 1);
  teacher.set_requires_grad(false);

  const Index batch = 2;
  auto hr = random_tensor<double>({batch, 3, 32, 32}, rng);
  auto lr = random_tensor<double>({batch, 3, 32, 32}, rng);
  auto labels = one_hot<double>(batch, 10, rng);
  const ForwardResult<double> teacher_out = teacher.forward(nullptr, hr, Mode::eval);

  DistillConfig cfg;
  cfg.alpha = 0.9;
  cfg.temperature = 4.0;
  cfg.beta = 0.1 + static_cast<double>(seed % 3);
  cfg.omega = {0.5, 1.0, 1.5};
  cfg.lambda = 0.005;

  std::vector<TensorPtr<double>> params;
  for (const auto& name : student.parameter_names()) params.push_back(student.parameter(name));

  GradCheckOptions opt;
  opt.seed = seed;
  opt.eps = kNetEps;
  opt.floor = kF64Floor;
  opt.max_entries = 3;
  opt.refinements = 1;
  out.push_back(check_gradients<double>(
      "joint_loss[" + spec_text + "]",
      [&](Tape<double>* t) {
        // train-mode batch norm; the running averages it updates do not enter the loss
        const ForwardResult<double> s = student.forward(t, lr, Mode::train);
        return joint_loss(t, teacher_out, s, labels, student.decayed_weights(), cfg).total;
      },
      params, opt));
}

}  // namespace

std::vector<GradCheckReport> run_gradcheck_suite(GradCheckScope scope, int seeds, std::uint64_t base_seed) {
  std::vector<GradCheckReport> reports;
  for (int k = 0; k < seeds; ++k) {
    const std::uint64_t seed = base_seed + static_cast<std::uint64_t>(k);
    switch (scope) {
      case GradCheckScope::ops:
        ops_suite<float>(seed, reports, "/f32");
        ops_suite<double>(seed, reports, "/f64");
        break;
      case GradCheckScope::losses:
        losses_suite<float>(seed, reports, "/f32");
        losses_suite<double>(seed, reports, "/f64");
        break;
      case GradCheckScope::net:
        net_suite(seed, reports);
        break;
    }
  }
  return reports;
}

}  // namespace lrdb
