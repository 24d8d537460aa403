#pragma once

#include <functional>
#include <initializer_list>
#include <span>
#include <vector>

#include "lrdb/tensor.hpp"

namespace lrdb {

/// Ordered record of differentiable operations.
///
/// Each op that sees at least one gradient-carrying input pushes a backward
/// rule holding shared references to its operands. `backward` seeds the
/// output gradient and replays the rules newest-first, so every rule runs
/// after all consumers of its output have accumulated into that output's
/// gradient. Gradients accumulate additively; a tensor feeding two ops (a
/// residual skip, for instance) receives the sum of both contributions.
template <typename Scalar>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) noexcept = default;
  Tape& operator=(Tape&&) noexcept = default;

  void record(std::function<void()> rule) { rules_.push_back(std::move(rule)); }

  std::size_t size() const noexcept { return rules_.size(); }
  bool empty() const noexcept { return rules_.empty(); }
  void clear() { rules_.clear(); }

  /// Backpropagates from a scalar loss (seed 1).
  void backward(Tensor<Scalar>& loss) {
    if (loss.size() != 1) {
      throw ContractError("backward needs a scalar loss, got shape " + shape_string(loss.shape()));
    }
    const Scalar one(1);
    backward(loss, std::span<const Scalar>(&one, 1));
  }

  /// Backpropagates from an arbitrary output with an explicit upstream gradient.
  void backward(Tensor<Scalar>& output, std::span<const Scalar> seed) {
    if (!output.requires_grad()) {
      throw ContractError("backward from a tensor that was not produced by recorded operations");
    }
    if (static_cast<Index>(seed.size()) != output.size()) {
      throw ContractError("backward seed has " + std::to_string(seed.size()) + " entries for output of size " +
                          std::to_string(output.size()));
    }
    auto grad = output.grad();
    for (std::size_t i = 0; i < seed.size(); ++i) grad[i] += seed[i];
    for (auto it = rules_.rbegin(); it != rules_.rend(); ++it) (*it)();
    rules_.clear();
  }

 private:
  std::vector<std::function<void()>> rules_;
};

/// True when `tape` is recording and any of `inputs` carries a gradient slot.
template <typename Scalar>
bool tracks(const Tape<Scalar>* tape, std::initializer_list<const Tensor<Scalar>*> inputs) {
  if (tape == nullptr) return false;
  for (const auto* input : inputs) {
    if (input != nullptr && input->requires_grad()) return true;
  }
  return false;
}

}  // namespace lrdb
