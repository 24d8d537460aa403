#pragma once

#include <span>
#include <string>
#include <vector>

#include "lrdb/tensor.hpp"

namespace lrdb {

/// One momentum-SGD update over flat buffers:
///   v <- momentum * v + grad + weight_decay * param
///   param <- param - lr * v
template <typename Scalar>
void sgd_step(std::span<Scalar> params, std::span<const Scalar> grads, std::span<Scalar> velocity, double lr,
              double momentum, double weight_decay) {
  if (params.size() != grads.size() || params.size() != velocity.size()) {
    throw ShapeError("sgd_step: parameter, gradient and velocity buffers differ in length");
  }
  const auto m = static_cast<Scalar>(momentum);
  const auto wd = static_cast<Scalar>(weight_decay);
  const auto rate = static_cast<Scalar>(lr);
  for (std::size_t i = 0; i < params.size(); ++i) {
    velocity[i] = m * velocity[i] + grads[i] + wd * params[i];
    params[i] -= rate * velocity[i];
  }
}

/// Momentum SGD over a fixed set of named parameters.
///
/// Parameters registered with `decay = false` (batch-norm affine terms,
/// biases) are updated without the weight-decay term.
template <typename Scalar>
class Sgd {
 public:
  struct Slot {
    std::string name;
    TensorPtr<Scalar> param;
    bool decay = true;
    std::vector<Scalar> velocity;
  };

  Sgd(double momentum, double weight_decay) : momentum_(momentum), weight_decay_(weight_decay) {}

  void add(std::string name, TensorPtr<Scalar> param, bool decay) {
    std::vector<Scalar> velocity(static_cast<std::size_t>(param->size()), Scalar(0));
    slots_.push_back(Slot{std::move(name), std::move(param), decay, std::move(velocity)});
  }

  void zero_grad() {
    for (auto& slot : slots_) slot.param->zero_grad();
  }

  void step(double lr) {
    for (auto& slot : slots_) {
      if (!slot.param->requires_grad()) continue;
      sgd_step<Scalar>(slot.param->values(), slot.param->grad(), slot.velocity, lr, momentum_,
                       slot.decay ? weight_decay_ : 0.0);
    }
  }

  /// Largest absolute gradient entry across all slots.
  double max_abs_grad() const {
    double best = 0.0;
    for (const auto& slot : slots_) {
      for (Scalar g : slot.param->grad()) best = std::max(best, static_cast<double>(std::abs(g)));
    }
    return best;
  }

  std::vector<Slot>& slots() noexcept { return slots_; }
  const std::vector<Slot>& slots() const noexcept { return slots_; }

 private:
  double momentum_;
  double weight_decay_;
  std::vector<Slot> slots_;
};

}  // namespace lrdb
