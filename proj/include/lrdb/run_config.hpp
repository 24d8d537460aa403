#pragma once

#include <optional>
#include <string>

#include "lrdb/datapipe.hpp"
#include "lrdb/losses.hpp"
#include "lrdb/trainer.hpp"

namespace lrdb {

/// Everything a run needs; each field is optional in JSON and defaults as below.
struct RunConfig {
  std::string spec = "r20-2-1-1";          // network for `train`
  std::string student_spec = "r20-2-1-1";  // student for `distill`
  std::string teacher;                     // teacher checkpoint
  std::string cifar_dir;
  std::string data;
  std::string hr_data;
  std::string lr_data;
  std::string out;
  TrainConfig train;                   // checkpoint/metrics paths are not serialized
  std::optional<double> weight_decay;  // unset: 1e-4 for train, 0 for distill
  DistillConfig distill;
  DegradeConfig degrade;

  /// Train settings for one stage, with the stage's weight-decay default.
  TrainConfig train_config(bool distill_stage) const;
  bool operator==(const RunConfig&) const = default;
};

/// Rejects unknown keys and ill-typed values with ValidationError.
RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::string& path);
std::string serialize_run_config(const RunConfig& cfg);

}  // namespace lrdb
