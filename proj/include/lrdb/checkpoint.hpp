#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lrdb/network.hpp"
#include "lrdb/sgd.hpp"

namespace lrdb {

inline constexpr std::uint16_t kCheckpointVersion = 1;

/// Parameters, batch-norm running statistics (`<bn>.running_mean`,
/// `<bn>.running_var`) and optional optimizer velocity (`velocity/<param>`).
struct Checkpoint {
  std::string spec;
  std::int64_t step = 0;
  double best_accuracy = 0.0;
  std::string fingerprint;  // normalization statistics the network was trained with
  std::vector<std::pair<std::string, Tensor<float>>> tensors;

  const Tensor<float>* find(const std::string& name) const;
};

/// Layout (little-endian): "LRDB", u16 version, u32-prefixed spec, u64 step,
/// f64 best accuracy, u32-prefixed fingerprint, u32 record count, then per
/// record u32-prefixed name, u32 rank, u32 dims, f32 payload.
std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint parse_checkpoint(std::span<const std::uint8_t> bytes, const std::string& source = "<memory>");

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

template <typename Scalar>
Checkpoint make_checkpoint(const Network<Scalar>& net, std::int64_t step, double best_accuracy,
                           std::string fingerprint, const Sgd<Scalar>* optimizer = nullptr);

/// Overwrites every parameter and running statistic of `net`. FormatError on a
/// spec mismatch, a missing or unknown name, or a shape mismatch.
template <typename Scalar>
void apply_checkpoint(const Checkpoint& ckpt, Network<Scalar>& net, Sgd<Scalar>* optimizer = nullptr);

template <typename Scalar>
Network<Scalar> network_from_checkpoint(const Checkpoint& ckpt);

/// FNV-1a over all parameter and running-statistic bytes, in name order.
template <typename Scalar>
std::string state_hash(const Network<Scalar>& net);

}  // namespace lrdb
