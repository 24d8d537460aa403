// lrdb: data preparation, training, distillation and diagnostics.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>

#include "CLI11.hpp"

#include "lrdb/checkpoint.hpp"
#include "lrdb/datapipe.hpp"
#include "lrdb/errors.hpp"
#include "lrdb/gradcheck.hpp"
#include "lrdb/io.hpp"
#include "lrdb/losses.hpp"
#include "lrdb/run_config.hpp"
#include "lrdb/trainer.hpp"

namespace fs = std::filesystem;
using namespace lrdb;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

struct UsageError : Error {
  using Error::Error;
};

/// Flags that may override RunConfig fields; unset flags leave the file value.
struct TrainFlags {
  std::optional<std::int64_t> steps, eval_every;
  std::optional<Index> batch_size;
  std::optional<double> lr, momentum, weight_decay;
  std::optional<std::string> milestones;
  std::optional<std::uint64_t> seed;
  bool no_augment = false;
  bool deterministic = false;

  void attach(CLI::App* cmd) {
    cmd->add_option("--steps", steps, "Total SGD steps (default 64000)");
    cmd->add_option("--batch-size", batch_size, "Mini-batch size (default 128)");
    cmd->add_option("--lr", lr, "Initial learning rate (default 0.1)");
    cmd->add_option("--milestones", milestones, "Rate drops as step:lr pairs, comma separated (default 32000:0.01,48000:0.001)");
    cmd->add_option("--momentum", momentum, "SGD momentum (default 0.9)");
    cmd->add_option("--weight-decay", weight_decay, "Optimizer weight decay (default 1e-4 for train, 0 for distill)");
    cmd->add_option("--seed", seed, "Seed for initialization, shuffling and augmentation (default 0)");
    cmd->add_option("--eval-every", eval_every, "Steps between test evaluations (default 1000)");
    cmd->add_flag("--no-augment", no_augment, "Disable random crop and flip");
    cmd->add_flag("--deterministic", deterministic, "Write 0 in the wall-clock column so equal seeds give equal logs");
  }

  void apply(RunConfig& cfg) const {
    if (steps) cfg.train.total_steps = *steps;
    if (batch_size) cfg.train.batch_size = *batch_size;
    if (lr) cfg.train.base_lr = *lr;
    if (milestones) cfg.train.lr_milestones = parse_milestones(*milestones);
    if (momentum) cfg.train.momentum = *momentum;
    if (weight_decay) cfg.weight_decay = *weight_decay;
    if (seed) cfg.train.seed = *seed;
    if (eval_every) cfg.train.eval_every = *eval_every;
    if (no_augment) cfg.train.augment = false;
    if (deterministic) cfg.train.deterministic = true;
  }

  static std::vector<Milestone> parse_milestones(const std::string& text) {
    std::vector<Milestone> out;
    if (text.empty() || text == "none") return out;
    std::stringstream in(text);
    std::string item;
    while (std::getline(in, item, ',')) {
      const auto colon = item.find(':');
      if (colon == std::string::npos) throw UsageError("milestone '" + item + "' is not step:lr");
      try {
        out.push_back({std::stoll(item.substr(0, colon)), std::stod(item.substr(colon + 1))});
      } catch (const std::exception&) {
        throw UsageError("milestone '" + item + "' is not step:lr");
      }
    }
    return out;
  }
};

RunConfig base_config(const std::string& path) { return path.empty() ? RunConfig{} : load_run_config(path); }

std::string require(const std::string& value, const char* flag) {
  if (value.empty()) throw UsageError(std::string("missing ") + flag);
  return value;
}

/// A split directory, or the `sub` split of a prepared root.
PreparedSplit load_split(const fs::path& dir, const char* sub) {
  if (fs::exists(dir / sub / "stats.json")) return load_prepared_split(dir / sub);
  return load_prepared_split(dir);
}

void write_outputs(const fs::path& out, const RunConfig& cfg, const TrainResult& result) {
  write_file_atomic(out / "config.json", serialize_run_config(cfg));
  save_checkpoint(result.last, out / "last.lrdb");
}

void warn(const std::string& msg) { std::cerr << "warning: " << msg << '\n'; }

void print_accuracy(double accuracy) { std::cout << "accuracy=" << format_number(accuracy) << '\n'; }

std::string pgm(const std::vector<double>& map, Index side) {
  const auto [lo, hi] = std::minmax_element(map.begin(), map.end());
  const double range = *hi - *lo;
  std::string out = "P5\n" + std::to_string(side) + " " + std::to_string(side) + "\n255\n";
  for (double v : map) {
    const double scaled = range > 0.0 ? (v - *lo) / range * 255.0 : 0.0;
    out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(scaled))));
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  retain_freed_memory();
  CLI::App app{"Low-resolution recognition with dual-branch residual networks: data preparation, training, "
               "distillation and diagnostics"};
  app.require_subcommand(1);

  // prepare-data
  auto* prep = app.add_subcommand("prepare-data", "Degrade CIFAR-10 binaries and write a prepared dataset directory");
  std::string prep_config, prep_cifar, prep_out;
  std::optional<int> prep_res;
  std::optional<double> prep_sigma;
  std::optional<std::uint64_t> prep_seed;
  Index train_limit = -1, test_limit = -1;
  prep->add_option("--config", prep_config, "RunConfig JSON file (flags override it)");
  prep->add_option("--cifar-dir", prep_cifar, "Directory with data_batch_1..5.bin and test_batch.bin");
  prep->add_option("--out", prep_out, "Output directory (train/ and test/ are created)");
  prep->add_option("--resolution", prep_res, "Target resolution: 32, 16 or 8 (default 32)");
  prep->add_option("--noise-sigma", prep_sigma, "Gaussian noise std on the [0,1] scale (default 0.02)");
  prep->add_option("--seed", prep_seed, "Noise seed (default 0)");
  prep->add_option("--train-limit", train_limit, "Keep only the first N training images");
  prep->add_option("--test-limit", test_limit, "Keep only the first N test images");

  // synth-cifar
  auto* synth = app.add_subcommand("synth-cifar", "Write synthetic CIFAR-format binaries (class-dependent stripe patterns)");
  std::string synth_out;
  Index synth_train = 5000, synth_test = 1000;
  std::uint64_t synth_seed = 0;
  synth->add_option("--out", synth_out, "Output directory")->required();
  synth->add_option("--train", synth_train, "Training images (default 5000)");
  synth->add_option("--test", synth_test, "Test images (default 1000)");
  synth->add_option("--seed", synth_seed, "Seed (default 0)");

  // train
  auto* train = app.add_subcommand("train", "Train a network with cross-entropy and weight decay");
  std::string train_config, train_spec, train_data, train_out;
  TrainFlags train_flags;
  train->add_option("--config", train_config, "RunConfig JSON file (flags override it)");
  train->add_option("--spec", train_spec, "Network spec, e.g. r20-2-1-1 or p20 (default r20-2-1-1)");
  train->add_option("--data", train_data, "Prepared dataset directory with train/ and test/");
  train->add_option("--out", train_out, "Run directory for best.lrdb, last.lrdb, metrics.csv, config.json");
  train_flags.attach(train);

  // distill
  auto* distill = app.add_subcommand("distill", "Train a low-resolution student against a frozen teacher");
  std::string dist_config, dist_teacher, dist_student, dist_hr, dist_lr, dist_out;
  TrainFlags dist_flags;
  std::optional<double> alpha, temperature, beta, lambda, mu;
  std::optional<std::vector<double>> omega;
  std::optional<int> p_exp;
  distill->add_option("--config", dist_config, "RunConfig JSON file (flags override it)");
  distill->add_option("--teacher", dist_teacher, "Teacher checkpoint");
  distill->add_option("--student-spec", dist_student, "Student spec (default r20-2-1-1)");
  distill->add_option("--hr-data", dist_hr, "Prepared high-resolution dataset directory");
  distill->add_option("--lr-data", dist_lr, "Prepared low-resolution dataset directory");
  distill->add_option("--out", dist_out, "Run directory for best.lrdb, last.lrdb, metrics.csv, config.json");
  distill->add_option("--alpha", alpha, "Soft-target weight in [0,1] (default 0.9)");
  distill->add_option("--temperature", temperature, "Softening temperature T (default 4)");
  distill->add_option("--beta", beta, "Attention-transfer weight (default 0.1)");
  distill->add_option("--omega", omega, "Three per-block attention weights (default 1 1 1)")->expected(3);
  distill->add_option("--lambda", lambda, "Explicit L2 weight on student conv/fc weights (default 0.005)");
  distill->add_option("--mu", mu, "Pooled-feature MSE weight (default 0)");
  distill->add_option("--p", p_exp, "Attention-map exponent (default 2)");
  dist_flags.attach(distill);

  // eval
  auto* eval = app.add_subcommand("eval", "Test accuracy of a checkpoint");
  std::string eval_ckpt, eval_data;
  Index eval_batch = 128;
  eval->add_option("--ckpt", eval_ckpt, "Checkpoint file")->required();
  eval->add_option("--data", eval_data, "Prepared split directory, or a prepared root (its test/ split is used)")->required();
  eval->add_option("--batch-size", eval_batch, "Evaluation batch size (default 128)");

  // flops
  auto* flops = app.add_subcommand("flops", "Parameter and multiply-accumulate counts of a spec");
  std::string flops_spec;
  flops->add_option("--spec", flops_spec, "Network spec")->required();

  // gradcheck
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient check; exits 3 on any failure");
  std::string scope = "ops";
  int gc_seeds = 20;
  std::uint64_t gc_seed = 0;
  gradcheck->add_option("--scope", scope, "ops, losses or net (default ops)")
      ->check(CLI::IsMember({"ops", "losses", "net"}));
  gradcheck->add_option("--seeds", gc_seeds, "Number of random seeds (default 20)");
  gradcheck->add_option("--seed", gc_seed, "First seed (default 0)");

  // attention
  auto* attention = app.add_subcommand("attention", "Write the three block attention maps of one image as PGM files");
  std::string att_ckpt, att_data, att_out;
  Index att_index = 0;
  int att_p = 2;
  attention->add_option("--ckpt", att_ckpt, "Checkpoint file")->required();
  attention->add_option("--data", att_data, "Prepared split directory, or a prepared root (its test/ split is used)")->required();
  attention->add_option("--index", att_index, "Image index (default 0)");
  attention->add_option("--out", att_out, "Output directory for block1.pgm, block2.pgm, block3.pgm")->required();
  attention->add_option("--p", att_p, "Attention-map exponent (default 2)");

  // calibrate
  auto* calibrate = app.add_subcommand("calibrate", "Per-block attention loss between an HR and an LR network, and the inverse-loss omega");
  std::string cal_hr_ckpt, cal_lr_ckpt, cal_hr_data, cal_lr_data;
  int cal_p = 2;
  Index cal_batch = 128;
  calibrate->add_option("--hr-ckpt", cal_hr_ckpt, "Checkpoint trained on high-resolution data")->required();
  calibrate->add_option("--lr-ckpt", cal_lr_ckpt, "Checkpoint trained on low-resolution data")->required();
  calibrate->add_option("--hr-data", cal_hr_data, "Prepared HR split directory or root (test/ is used)")->required();
  calibrate->add_option("--lr-data", cal_lr_data, "Prepared LR split directory or root (test/ is used)")->required();
  calibrate->add_option("--p", cal_p, "Attention-map exponent (default 2)");
  calibrate->add_option("--batch-size", cal_batch, "Batch size (default 128)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*prep) {
      RunConfig cfg = base_config(prep_config);
      if (!prep_cifar.empty()) cfg.cifar_dir = prep_cifar;
      if (!prep_out.empty()) cfg.out = prep_out;
      if (prep_res) cfg.degrade.target_res = *prep_res;
      if (prep_sigma) cfg.degrade.noise_sigma = *prep_sigma;
      if (prep_seed) cfg.degrade.seed = *prep_seed;
      PrepareOptions options{cfg.degrade, train_limit, test_limit};
      prepare_dataset(require(cfg.cifar_dir, "--cifar-dir"), require(cfg.out, "--out"), options);
      const PreparedSplit tr = load_prepared_split(fs::path(cfg.out) / "train");
      std::cout << "train=" << tr.data.size() << "\nfingerprint=" << tr.stats.fingerprint << '\n';
    } else if (*synth) {
      write_synthetic_cifar(synth_out, synth_train, synth_test, synth_seed);
    } else if (*train) {
      RunConfig cfg = base_config(train_config);
      if (!train_spec.empty()) cfg.spec = train_spec;
      if (!train_data.empty()) cfg.data = train_data;
      if (!train_out.empty()) cfg.out = train_out;
      train_flags.apply(cfg);
      const NetSpec spec = parse_spec(cfg.spec, warn);
      const fs::path data = require(cfg.data, "--data"), out = require(cfg.out, "--out");
      const PreparedSplit tr = load_prepared_split(data / "train"), te = load_prepared_split(data / "test");
      fs::create_directories(out);
      TrainConfig tc = cfg.train_config(false);
      tc.checkpoint_path = (out / "best.lrdb").string();
      tc.metrics_path = (out / "metrics.csv").string();
      const TrainResult result = train_hr(spec, tr, te, tc, {}, {{"data", cfg.data}});
      write_outputs(out, cfg, result);
      print_accuracy(result.final_accuracy);
    } else if (*distill) {
      RunConfig cfg = base_config(dist_config);
      if (!dist_teacher.empty()) cfg.teacher = dist_teacher;
      if (!dist_student.empty()) cfg.student_spec = dist_student;
      if (!dist_hr.empty()) cfg.hr_data = dist_hr;
      if (!dist_lr.empty()) cfg.lr_data = dist_lr;
      if (!dist_out.empty()) cfg.out = dist_out;
      if (alpha) cfg.distill.alpha = *alpha;
      if (temperature) cfg.distill.temperature = *temperature;
      if (beta) cfg.distill.beta = *beta;
      if (omega) std::copy(omega->begin(), omega->end(), cfg.distill.omega.begin());
      if (lambda) cfg.distill.lambda = *lambda;
      if (mu) cfg.distill.mu = *mu;
      if (p_exp) cfg.distill.p = *p_exp;
      dist_flags.apply(cfg);
      cfg.distill.validate();
      const NetSpec student = parse_spec(cfg.student_spec, warn);
      const Checkpoint teacher_ckpt = load_checkpoint(require(cfg.teacher, "--teacher"));
      Network<float> teacher = network_from_checkpoint<float>(teacher_ckpt);
      const fs::path hr = require(cfg.hr_data, "--hr-data"), lr = require(cfg.lr_data, "--lr-data");
      const fs::path out = require(cfg.out, "--out");
      const PreparedSplit hr_train = load_prepared_split(hr / "train");
      const PreparedSplit lr_train = load_prepared_split(lr / "train"), lr_test = load_prepared_split(lr / "test");
      fs::create_directories(out);
      TrainConfig tc = cfg.train_config(true);
      tc.checkpoint_path = (out / "best.lrdb").string();
      tc.metrics_path = (out / "metrics.csv").string();
      const TrainResult result = train_lr_distill(teacher, teacher_ckpt.fingerprint, student, hr_train, lr_train,
                                                  lr_test, cfg.distill, tc, {},
                                                  {{"teacher", cfg.teacher}, {"hr_data", cfg.hr_data},
                                                   {"lr_data", cfg.lr_data}},
                                                  warn);
      write_outputs(out, cfg, result);
      print_accuracy(result.final_accuracy);
    } else if (*eval) {
      const Checkpoint ckpt = load_checkpoint(eval_ckpt);
      Network<float> net = network_from_checkpoint<float>(ckpt);
      const PreparedSplit split = load_split(eval_data, "test");
      if (split.stats.fingerprint != ckpt.fingerprint) {
        warn("checkpoint was trained with normalization statistics " + ckpt.fingerprint + " but the data carries " +
             split.stats.fingerprint);
      }
      const EvalResult result = evaluate(net, split.data, split.stats, eval_batch);
      print_accuracy(result.accuracy);
      for (int k = 0; k < kNumClasses; ++k) {
        std::cout << "class" << k << "=" << result.correct[k] << "/" << result.total[k] << '\n';
      }
    } else if (*flops) {
      const NetSpec spec = parse_spec(flops_spec, warn);
      const Network<float> net = Network<float>::build(spec, 0);
      std::cout << "spec=" << spec.to_string() << "\nlayers=" << net.layer_count() << "\nprojections="
                << net.projection_count() << "\nparams=" << count_params(net) << "\nmacs=" << count_flops(net)
                << "\nconvention=multiply-accumulates per 3x32x32 image over convolutions, projections and the "
                   "classifier\n";
    } else if (*gradcheck) {
      const GradCheckScope s = scope == "ops" ? GradCheckScope::ops
                               : scope == "losses" ? GradCheckScope::losses
                                                   : GradCheckScope::net;
      const auto reports = run_gradcheck_suite(s, gc_seeds, gc_seed);
      std::map<std::string, GradCheckReport> worst;
      bool ok = true;
      for (const auto& r : reports) {
        ok = ok && r.passed;
        auto& w = worst[r.name];
        if (w.name.empty() || r.max_rel_error > w.max_rel_error) w = r;
      }
      for (const auto& [name, r] : worst) {
        std::cout << (r.passed ? "pass " : "FAIL ") << name << " max_rel_error=" << format_number(r.max_rel_error)
                  << '\n';
      }
      std::cout << "checks=" << reports.size() << "\nresult=" << (ok ? "pass" : "fail") << '\n';
      if (!ok) return kNumeric;
    } else if (*attention) {
      const Checkpoint ckpt = load_checkpoint(att_ckpt);
      Network<float> net = network_from_checkpoint<float>(ckpt);
      const PreparedSplit split = load_split(att_data, "test");
      if (att_index < 0 || att_index >= split.data.size()) {
        throw UsageError("--index " + std::to_string(att_index) + " outside [0, " + std::to_string(split.data.size()) + ")");
      }
      const std::vector<Sample> one{Sample{att_index, {}}};
      const Batch<float> batch = gather_batch<float>(split.data, split.stats, one);
      const ForwardResult<float> fwd = net.forward(nullptr, batch.images, Mode::eval);
      fs::create_directories(att_out);
      int block = 1;
      for (const auto& feat : {fwd.feat1, fwd.feat2, fwd.feat3}) {
        const auto map = attention_map<float>(nullptr, feat, att_p);
        const Index side = map->dim(1);
        std::vector<double> values(map->values().begin(), map->values().end());
        const fs::path file = fs::path(att_out) / ("block" + std::to_string(block++) + ".pgm");
        write_file_atomic(file, pgm(values, side));
        std::cout << file.string() << '\n';
      }
    } else if (*calibrate) {
      Network<float> hr_net = network_from_checkpoint<float>(load_checkpoint(cal_hr_ckpt));
      Network<float> lr_net = network_from_checkpoint<float>(load_checkpoint(cal_lr_ckpt));
      const PreparedSplit hr = load_split(cal_hr_data, "test"), lr = load_split(cal_lr_data, "test");
      const OmegaCalibration c = calibrate_omega(hr_net, lr_net, hr, lr, cal_p, cal_batch);
      for (int j = 0; j < 3; ++j) std::cout << "raw" << j + 1 << "=" << format_number(c.raw[j]) << '\n';
      for (int j = 0; j < 3; ++j) std::cout << "omega" << j + 1 << "=" << format_number(c.omega[j]) << '\n';
    }
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const ParseError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const ParameterError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kData;
  }
  return kOk;
}
