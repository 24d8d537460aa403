#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "lrdb/net_spec.hpp"
#include "lrdb/ops.hpp"

namespace lrdb {

/// One contiguous run of conv layers inside a module, optionally wrapped by a skip.
struct SkipSegment {
  int begin = 0;  // first layer index (inclusive)
  int end = 0;    // last layer index (exclusive)
  bool skip = false;
  bool projected = false;  // skip goes through the module's 1x1 projection
};

/// Skip wiring of one module: chained segments plus an optional outer skip.
struct ModuleTopology {
  std::vector<SkipSegment> segments;
  bool outer_skip = false;
  bool outer_projected = false;
};

/// Interlink rule. For i <= d the d layers are cut into i near-equal
/// contiguous segments, each wrapped by its own skip. For i = d + 1 an outer
/// skip additionally spans the whole module. In a transition module only the
/// outermost skip leaving the module input is projected; an inner skip that
/// would also leave the input is dropped. Plain networks get no skips.
ModuleTopology interlink_topology(int depth, int interlinks, bool transition, bool residual);

/// Pre-activation layer: BN(in) -> ReLU -> conv3x3(in -> out, stride).
struct ConvUnit {
  std::string prefix;
  Index in_channels = 0;
  Index out_channels = 0;
  Index stride = 1;
  Index out_size = 0;  // output spatial extent at 32x32 input
};

struct ModulePlan {
  std::string name;  // "block<g>.<m>"
  int group = 0;     // 1..3
  int index = 0;     // 0..N-1
  bool transition = false;
  Index in_channels = 0;
  Index out_channels = 0;
  Index stride = 1;
  Index out_size = 0;
  std::vector<ConvUnit> layers;
  ModuleTopology topology;
  std::string projection;  // weight name, empty when the module has none
};

/// Block-group outputs, pooled features and class scores of one forward pass.
template <typename Scalar>
struct ForwardResult {
  TensorPtr<Scalar> feat1;   // [B, 16w, 32, 32]
  TensorPtr<Scalar> feat2;   // [B, 32w, 16, 16]
  TensorPtr<Scalar> feat3;   // [B, 64w, 8, 8]
  TensorPtr<Scalar> pooled;  // [B, 64w]
  TensorPtr<Scalar> logits;  // [B, classes]
};

inline constexpr Index kInputSize = 32;
inline constexpr Index kInputChannels = 3;
inline constexpr Index kStemChannels = 16;

/// Residual (or plain) CIFAR-style network built from a NetSpec.
///
/// Parameter and batch-norm names are stable across builds of the same spec
/// and are the keys used by checkpoints.
template <typename Scalar>
class Network {
 public:
  static Network build(const NetSpec& spec, std::uint64_t seed);

  Network(Network&&) noexcept = default;
  Network& operator=(Network&&) noexcept = default;
  Network(const Network&) = delete;
  Network& operator=(const Network&) = delete;

  /// Deep copy: parameters and running statistics are not shared.
  Network clone() const;

  ForwardResult<Scalar> forward(Tape<Scalar>* tape, const TensorPtr<Scalar>& batch, Mode mode);

  const NetSpec& spec() const noexcept { return spec_; }
  const std::vector<ModulePlan>& modules() const noexcept { return modules_; }

  const std::vector<std::string>& parameter_names() const noexcept { return param_order_; }
  bool has_parameter(const std::string& name) const { return params_.count(name) != 0; }
  const TensorPtr<Scalar>& parameter(const std::string& name) const;
  /// Conv and fc weights; batch-norm affine terms and biases are excluded.
  bool decays(const std::string& name) const;
  std::vector<TensorPtr<Scalar>> decayed_weights() const;

  const std::vector<std::string>& batchnorm_names() const noexcept { return bn_order_; }
  BatchNormState<Scalar>& batchnorm_state(const std::string& name);
  const BatchNormState<Scalar>& batchnorm_state(const std::string& name) const;

  void set_requires_grad(bool enabled);
  void zero_grad();

  /// Stem + module convs + classifier; projections are not counted.
  int layer_count() const;
  int projection_count() const;

 private:
  Network() = default;

  TensorPtr<Scalar>& add_param(const std::string& name, Shape shape);
  void add_batchnorm(const std::string& prefix, Index channels);
  TensorPtr<Scalar> pre_activation(Tape<Scalar>* tape, const ConvUnit& unit, TensorPtr<Scalar> x, Mode mode);

  NetSpec spec_;
  std::vector<ModulePlan> modules_;
  std::map<std::string, TensorPtr<Scalar>> params_;
  std::vector<std::string> param_order_;
  std::map<std::string, BatchNormState<Scalar>> bn_;
  std::vector<std::string> bn_order_;
  Index final_channels_ = 0;
};

/// Trainable scalar count (conv, projection, batch-norm affine, fc weight and bias).
template <typename Scalar>
std::int64_t count_params(const Network<Scalar>& net);

/// Multiply-accumulates of every conv (projections included) and the fc
/// layer for one 3x32x32 image. Batch-norm, ReLU, pooling and additions are
/// not counted.
template <typename Scalar>
std::int64_t count_flops(const Network<Scalar>& net);

// ---------------------------------------------------------------------------

template <typename Scalar>
TensorPtr<Scalar>& Network<Scalar>::add_param(const std::string& name, Shape shape) {
  if (params_.count(name)) throw ContractError("duplicate parameter name " + name);
  param_order_.push_back(name);
  return params_[name] = make_tensor<Scalar>(std::move(shape));
}

template <typename Scalar>
void Network<Scalar>::add_batchnorm(const std::string& prefix, Index channels) {
  add_param(prefix + ".gamma", Shape{channels}) = make_tensor<Scalar>(Shape{channels}, Scalar(1));
  add_param(prefix + ".beta", Shape{channels});
  bn_order_.push_back(prefix);
  bn_.emplace(prefix, BatchNormState<Scalar>(channels));
}

template <typename Scalar>
Network<Scalar> Network<Scalar>::build(const NetSpec& spec, std::uint64_t seed) {
  validate(spec);
  Network net;
  net.spec_ = spec;
  std::mt19937_64 rng(seed);
  auto he_init = [&rng](Tensor<Scalar>& w, Index fan_in) {
    std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
    for (auto& v : w.values()) v = static_cast<Scalar>(normal(rng));
  };

  auto& stem = net.add_param("stem.conv.weight", Shape{kStemChannels, kInputChannels, 3, 3});
  he_init(*stem, kInputChannels * 9);

  const int n = spec.modules_per_block();
  const Index width = spec.residual() ? spec.width : 1;
  Index channels = kStemChannels;
  Index size = kInputSize;
  for (int group = 1; group <= 3; ++group) {
    const Index group_channels = kStemChannels * width * (Index{1} << (group - 1));
    for (int m = 0; m < n; ++m) {
      ModulePlan plan;
      plan.group = group;
      plan.index = m;
      plan.name = "block" + std::to_string(group) + "." + std::to_string(m);
      plan.in_channels = channels;
      plan.out_channels = group_channels;
      plan.stride = (group > 1 && m == 0) ? 2 : 1;
      plan.out_size = plan.stride == 2 ? size / 2 : size;
      plan.transition = plan.stride != 1 || plan.in_channels != plan.out_channels;
      plan.topology = interlink_topology(spec.depth, spec.interlinks, plan.transition, spec.residual());

      Index layer_in = channels;
      for (int l = 0; l < spec.depth; ++l) {
        ConvUnit unit;
        unit.prefix = plan.name + ".layer" + std::to_string(l);
        unit.in_channels = layer_in;
        unit.out_channels = group_channels;
        unit.stride = l == 0 ? plan.stride : 1;
        unit.out_size = plan.out_size;
        net.add_batchnorm(unit.prefix + ".bn", unit.in_channels);
        auto& w = net.add_param(unit.prefix + ".conv.weight", Shape{unit.out_channels, unit.in_channels, 3, 3});
        he_init(*w, unit.in_channels * 9);
        plan.layers.push_back(unit);
        layer_in = group_channels;
      }

      bool projected = plan.topology.outer_projected;
      for (const auto& seg : plan.topology.segments) projected = projected || seg.projected;
      if (projected) {
        plan.projection = plan.name + ".proj.weight";
        auto& w = net.add_param(plan.projection, Shape{plan.out_channels, plan.in_channels, 1, 1});
        he_init(*w, plan.in_channels);
      }
      net.modules_.push_back(std::move(plan));
      channels = group_channels;
      size = net.modules_.back().out_size;
    }
  }
  net.final_channels_ = channels;
  net.add_batchnorm("head.bn", channels);
  auto& fc = net.add_param("head.fc.weight", Shape{spec.num_classes, channels});
  he_init(*fc, channels);
  net.add_param("head.fc.bias", Shape{spec.num_classes});
  net.set_requires_grad(true);
  return net;
}

template <typename Scalar>
Network<Scalar> Network<Scalar>::clone() const {
  Network copy;
  copy.spec_ = spec_;
  copy.modules_ = modules_;
  copy.param_order_ = param_order_;
  copy.bn_ = bn_;
  copy.bn_order_ = bn_order_;
  copy.final_channels_ = final_channels_;
  for (const auto& [name, tensor] : params_) copy.params_[name] = std::make_shared<Tensor<Scalar>>(*tensor);
  return copy;
}

template <typename Scalar>
const TensorPtr<Scalar>& Network<Scalar>::parameter(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw ContractError("unknown parameter " + name);
  return it->second;
}

template <typename Scalar>
bool Network<Scalar>::decays(const std::string& name) const {
  const std::string suffix = ".weight";
  return name.size() > suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
}

template <typename Scalar>
std::vector<TensorPtr<Scalar>> Network<Scalar>::decayed_weights() const {
  std::vector<TensorPtr<Scalar>> out;
  for (const auto& name : param_order_) {
    if (decays(name)) out.push_back(params_.at(name));
  }
  return out;
}

template <typename Scalar>
BatchNormState<Scalar>& Network<Scalar>::batchnorm_state(const std::string& name) {
  auto it = bn_.find(name);
  if (it == bn_.end()) throw ContractError("unknown batch-norm layer " + name);
  return it->second;
}

template <typename Scalar>
const BatchNormState<Scalar>& Network<Scalar>::batchnorm_state(const std::string& name) const {
  auto it = bn_.find(name);
  if (it == bn_.end()) throw ContractError("unknown batch-norm layer " + name);
  return it->second;
}

template <typename Scalar>
void Network<Scalar>::set_requires_grad(bool enabled) {
  for (auto& [name, tensor] : params_) {
    if (enabled) {
      tensor->enable_grad();
    } else {
      tensor->disable_grad();
    }
  }
}

template <typename Scalar>
void Network<Scalar>::zero_grad() {
  for (auto& [name, tensor] : params_) tensor->zero_grad();
}

template <typename Scalar>
int Network<Scalar>::layer_count() const {
  int convs = 1;
  for (const auto& m : modules_) convs += static_cast<int>(m.layers.size());
  return convs + 1;
}

template <typename Scalar>
int Network<Scalar>::projection_count() const {
  int count = 0;
  for (const auto& m : modules_) count += m.projection.empty() ? 0 : 1;
  return count;
}

template <typename Scalar>
TensorPtr<Scalar> Network<Scalar>::pre_activation(Tape<Scalar>* tape, const ConvUnit& unit, TensorPtr<Scalar> x,
                                                  Mode mode) {
  const std::string bn = unit.prefix + ".bn";
  x = batchnorm(tape, x, params_.at(bn + ".gamma"), params_.at(bn + ".beta"), bn_.at(bn), mode);
  x = relu(tape, x);
  return conv2d(tape, x, params_.at(unit.prefix + ".conv.weight"), unit.stride, Index{1});
}

template <typename Scalar>
ForwardResult<Scalar> Network<Scalar>::forward(Tape<Scalar>* tape, const TensorPtr<Scalar>& batch, Mode mode) {
  const Shape& s = batch->shape();
  if (s.size() != 4 || s[1] != kInputChannels || s[2] != kInputSize || s[3] != kInputSize) {
    throw ContractError("network input must be [B,3,32,32], got " + shape_string(s));
  }
  ForwardResult<Scalar> result;
  TensorPtr<Scalar> x = conv2d(tape, batch, params_.at("stem.conv.weight"), Index{1}, Index{1});
  for (std::size_t k = 0; k < modules_.size(); ++k) {
    const ModulePlan& plan = modules_[k];
    auto shortcut = [&](const TensorPtr<Scalar>& from, bool projected) {
      return projected ? conv2d(tape, from, params_.at(plan.projection), plan.stride, Index{0}) : from;
    };
    const TensorPtr<Scalar> module_in = x;
    for (const auto& seg : plan.topology.segments) {
      const TensorPtr<Scalar> seg_in = x;
      for (int l = seg.begin; l < seg.end; ++l) x = pre_activation(tape, plan.layers[static_cast<std::size_t>(l)], x, mode);
      if (seg.skip) x = add(tape, x, shortcut(seg_in, seg.projected));
    }
    if (plan.topology.outer_skip) x = add(tape, x, shortcut(module_in, plan.topology.outer_projected));

    const bool group_end = k + 1 == modules_.size() || modules_[k + 1].group != plan.group;
    if (group_end) {
      if (plan.group == 1) result.feat1 = x;
      if (plan.group == 2) result.feat2 = x;
      if (plan.group == 3) result.feat3 = x;
    }
  }
  TensorPtr<Scalar> h = batchnorm(tape, x, params_.at("head.bn.gamma"), params_.at("head.bn.beta"), bn_.at("head.bn"), mode);
  h = relu(tape, h);
  result.pooled = global_avg_pool(tape, h);
  result.logits = linear(tape, result.pooled, params_.at("head.fc.weight"), params_.at("head.fc.bias"));
  return result;
}

template <typename Scalar>
std::int64_t count_params(const Network<Scalar>& net) {
  std::int64_t total = 0;
  for (const auto& name : net.parameter_names()) total += net.parameter(name)->size();
  return total;
}

template <typename Scalar>
std::int64_t count_flops(const Network<Scalar>& net) {
  std::int64_t macs = static_cast<std::int64_t>(9 * kInputChannels * kStemChannels * kInputSize * kInputSize);
  for (const auto& m : net.modules()) {
    for (const auto& unit : m.layers) macs += 9 * unit.in_channels * unit.out_channels * unit.out_size * unit.out_size;
    if (!m.projection.empty()) macs += m.in_channels * m.out_channels * m.out_size * m.out_size;
  }
  const auto& fc = net.parameter("head.fc.weight");
  return macs + fc->size();
}

extern template class Network<float>;
extern template class Network<double>;

}  // namespace lrdb
