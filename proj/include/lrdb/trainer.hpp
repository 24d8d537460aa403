#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "lrdb/checkpoint.hpp"
#include "lrdb/datapipe.hpp"
#include "lrdb/losses.hpp"
#include "lrdb/net_spec.hpp"

namespace lrdb {

struct Milestone {
  std::int64_t step;
  double lr;
  bool operator==(const Milestone&) const = default;
};

struct TrainConfig {
  std::int64_t total_steps = 64000;
  Index batch_size = 128;
  double base_lr = 0.1;
  std::vector<Milestone> lr_milestones{{32000, 0.01}, {48000, 0.001}};
  double momentum = 0.9;
  double weight_decay = 1e-4;  // optimizer-side, conv and fc weights only
  std::uint64_t seed = 0;
  std::int64_t eval_every = 1000;
  std::string checkpoint_path;  // best-accuracy checkpoint; empty skips writing
  std::string metrics_path;     // CSV; empty skips writing
  bool augment = true;
  bool deterministic = false;  // zeroes the wall-clock column

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

/// The student stage regularizes through the joint loss instead of the optimizer.
TrainConfig distill_train_defaults();

double lr_at(std::int64_t step, const TrainConfig& cfg);

struct MetricsRow {
  std::int64_t step = 0;
  std::string split;  // "train" or "test"
  double e_kdh = 0, e_kds = 0;
  std::array<double, 3> e_at{0, 0, 0};
  double e_reg = 0, total = 0, accuracy = 0, lr = 0, seconds = 0;
};

inline constexpr const char* kMetricsHeader = "step,split,e_kdh,e_kds,e_at1,e_at2,e_at3,e_reg,total,accuracy,lr,seconds";

/// Append-only CSV with `# key=value` config lines ahead of the header.
class MetricsLog {
 public:
  MetricsLog() = default;
  MetricsLog(const std::string& path, const std::vector<std::pair<std::string, std::string>>& echo);

  void append(const MetricsRow& row);
  const std::vector<MetricsRow>& rows() const noexcept { return rows_; }

 private:
  std::ofstream out_;
  std::vector<MetricsRow> rows_;
};

std::string format_row(const MetricsRow& row);
/// Shortest round-trip decimal form.
std::string format_number(double value);

struct EvalResult {
  double accuracy = 0.0;
  double mean_loss = 0.0;  // cross-entropy
  std::array<Index, kNumClasses> correct{};
  std::array<Index, kNumClasses> total{};
};

/// Eval-mode pass over the whole split; touches no network state.
EvalResult evaluate(Network<float>& net, const Dataset& data, const NormStats& stats, Index batch_size = 128);

struct StepInfo {
  std::int64_t step;
  const MetricsRow& train;
  const MetricsRow* test;  // set on evaluation steps
};

/// Returning false stops training after the current step.
using StepHook = std::function<bool(const StepInfo&, Network<float>&)>;

struct TrainResult {
  Checkpoint best;  // highest test accuracy, ties keep the earlier step
  Checkpoint last;
  double final_accuracy = 0.0;
  std::int64_t steps = 0;
  std::vector<MetricsRow> metrics;
};

using ConfigEcho = std::vector<std::pair<std::string, std::string>>;

/// Cross-entropy plus optimizer weight decay on an HR (or any single-view) split.
TrainResult train_hr(const NetSpec& spec, const PreparedSplit& train, const PreparedSplit& test,
                     const TrainConfig& cfg, const StepHook& hook = {}, const ConfigEcho& echo = {});

/// Student on the LR view under the joint loss, teacher frozen in eval mode on
/// the paired HR view. Warns through `warn` when the teacher was trained on
/// other normalization statistics than `hr_train`.
TrainResult train_lr_distill(Network<float>& teacher, const std::string& teacher_fingerprint,
                             const NetSpec& student_spec, const PreparedSplit& hr_train,
                             const PreparedSplit& lr_train, const PreparedSplit& lr_test, const DistillConfig& dcfg,
                             const TrainConfig& cfg, const StepHook& hook = {}, const ConfigEcho& echo = {},
                             const WarningSink& warn = {});

struct OmegaCalibration {
  std::array<double, 3> omega{1.0, 1.0, 1.0};
  std::array<double, 3> raw{0.0, 0.0, 0.0};
};

inline constexpr double kOmegaFallbackThreshold = 1e-9;

/// omega_j proportional to 1/E_j, summing to 3; (1,1,1) if any E_j < 1e-9.
std::array<double, 3> omega_from_losses(const std::array<double, 3>& raw);

/// Mean per-block attention loss between the HR network on the HR view and
/// the LR network on the LR view, both in eval mode.
OmegaCalibration calibrate_omega(Network<float>& hr_net, Network<float>& lr_net, const PreparedSplit& hr,
                                 const PreparedSplit& lr, int p = 2, Index batch_size = 128);

}  // namespace lrdb
