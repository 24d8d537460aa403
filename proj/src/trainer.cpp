#include "lrdb/trainer.hpp"

#include <charconv>
#include <chrono>
#include <cmath>
#include <iostream>

#include "lrdb/errors.hpp"
#include "lrdb/io.hpp"

namespace lrdb {

namespace {

double batch_accuracy(const Tensor<float>& logits, const Tensor<float>& labels, Index* correct_out = nullptr) {
  const Index b = logits.dim(0), k = logits.dim(1);
  Index correct = 0;
  for (Index r = 0; r < b; ++r) {
    Index best = 0;
    for (Index c = 1; c < k; ++c) {
      if (logits[r * k + c] > logits[r * k + best]) best = c;
    }
    correct += labels[r * k + best] == 1.0f ? 1 : 0;
  }
  if (correct_out) *correct_out = correct;
  return static_cast<double>(correct) / static_cast<double>(b);
}

double sum_squares(const std::vector<TensorPtr<float>>& weights) {
  double acc = 0.0;
  for (const auto& w : weights) {
    for (float v : w->values()) acc += static_cast<double>(v) * v;
  }
  return acc;
}

Sgd<float> make_optimizer(const Network<float>& net, const TrainConfig& cfg) {
  Sgd<float> opt(cfg.momentum, cfg.weight_decay);
  for (const auto& name : net.parameter_names()) opt.add(name, net.parameter(name), net.decays(name));
  return opt;
}

BatchOptions train_batches(const TrainConfig& cfg) {
  return BatchOptions{cfg.batch_size, mix_seed(cfg.seed, 1), Mode::train, cfg.augment};
}

ConfigEcho with_train_echo(ConfigEcho echo, const TrainConfig& cfg) {
  echo.emplace_back("total_steps", std::to_string(cfg.total_steps));
  echo.emplace_back("batch_size", std::to_string(cfg.batch_size));
  echo.emplace_back("base_lr", format_number(cfg.base_lr));
  std::string milestones;
  for (const auto& m : cfg.lr_milestones) {
    milestones += (milestones.empty() ? "" : ";") + std::to_string(m.step) + ":" + format_number(m.lr);
  }
  echo.emplace_back("lr_milestones", milestones);
  echo.emplace_back("momentum", format_number(cfg.momentum));
  echo.emplace_back("weight_decay", format_number(cfg.weight_decay));
  echo.emplace_back("seed", std::to_string(cfg.seed));
  echo.emplace_back("eval_every", std::to_string(cfg.eval_every));
  echo.emplace_back("augment", cfg.augment ? "true" : "false");
  return echo;
}

// Shared SGD loop. `step_fn` runs forward and backward for one batch and
// returns the train row with its loss terms filled in.
template <typename StepFn>
TrainResult run_loop(Network<float>& net, Sgd<float>& opt, const TrainConfig& cfg, const PreparedSplit& test,
                     const std::string& fingerprint, MetricsLog& log, const StepHook& hook, StepFn&& step_fn) {
  const auto start = std::chrono::steady_clock::now();
  auto elapsed = [&] {
    return cfg.deterministic ? 0.0 : std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  };
  TrainResult result;
  double best = -1.0;
  bool evaluated_last = false;
  std::int64_t step = 0;
  auto run_eval = [&](std::int64_t at, double lr) {
    const EvalResult e = evaluate(net, test.data, test.stats, cfg.batch_size);
    MetricsRow row;
    row.step = at;
    row.split = "test";
    row.e_kdh = e.mean_loss;
    row.total = e.mean_loss;
    row.accuracy = e.accuracy;
    row.lr = lr;
    row.seconds = elapsed();
    log.append(row);
    result.final_accuracy = e.accuracy;
    if (e.accuracy > best) {
      best = e.accuracy;
      result.best = make_checkpoint(net, at + 1, best, fingerprint, &opt);
      if (!cfg.checkpoint_path.empty()) save_checkpoint(result.best, cfg.checkpoint_path);
    }
    return row;
  };

  for (; step < cfg.total_steps; ++step) {
    const double lr = lr_at(step, cfg);
    MetricsRow row = step_fn(step);
    if (!std::isfinite(row.total) || !std::isfinite(opt.max_abs_grad())) {
      throw NumericError("non-finite loss at step " + std::to_string(step) + " (lr=" + format_number(lr) +
                         ", loss=" + format_number(row.total) + ", max|grad|=" + format_number(opt.max_abs_grad()) +
                         ")");
    }
    opt.step(lr);
    row.step = step;
    row.split = "train";
    row.lr = lr;
    row.seconds = elapsed();
    log.append(row);

    evaluated_last = (step + 1) % cfg.eval_every == 0 || step + 1 == cfg.total_steps;
    MetricsRow test_row;
    if (evaluated_last) test_row = run_eval(step, lr);
    if (hook && !hook(StepInfo{step, row, evaluated_last ? &test_row : nullptr}, net)) {
      ++step;
      break;
    }
  }
  if (!evaluated_last) run_eval(step - 1, lr_at(step - 1, cfg));
  result.steps = step;
  result.last = make_checkpoint(net, step, std::max(best, 0.0), fingerprint, &opt);
  result.metrics = log.rows();
  return result;
}

}  // namespace

void TrainConfig::validate() const {
  if (total_steps < 1) throw ValidationError("total_steps must be at least 1");
  if (batch_size < 1) throw ValidationError("batch_size must be at least 1");
  if (!(base_lr > 0.0)) throw ValidationError("base_lr must be positive");
  for (std::size_t k = 0; k < lr_milestones.size(); ++k) {
    if (lr_milestones[k].step < 0 || !(lr_milestones[k].lr > 0.0)) {
      throw ValidationError("milestones need a nonnegative step and a positive rate");
    }
    if (k > 0 && lr_milestones[k].step <= lr_milestones[k - 1].step) {
      throw ValidationError("milestones must be strictly increasing in step");
    }
  }
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ValidationError("momentum must lie in [0,1)");
  if (!(weight_decay >= 0.0)) throw ValidationError("weight_decay must be nonnegative");
  if (eval_every < 1) throw ValidationError("eval_every must be at least 1");
}

TrainConfig distill_train_defaults() {
  TrainConfig cfg;
  cfg.weight_decay = 0.0;
  return cfg;
}

double lr_at(std::int64_t step, const TrainConfig& cfg) {
  double lr = cfg.base_lr;
  for (const auto& m : cfg.lr_milestones) {
    if (step >= m.step) lr = m.lr;
  }
  return lr;
}

std::string format_number(double value) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, value);
  return std::string(buf, res.ptr);
}

std::string format_row(const MetricsRow& r) {
  std::string out = std::to_string(r.step) + "," + r.split;
  for (double v : {r.e_kdh, r.e_kds, r.e_at[0], r.e_at[1], r.e_at[2], r.e_reg, r.total, r.accuracy, r.lr, r.seconds}) {
    out += "," + format_number(v);
  }
  return out;
}

MetricsLog::MetricsLog(const std::string& path, const std::vector<std::pair<std::string, std::string>>& echo) {
  if (path.empty()) return;
  if (auto parent = std::filesystem::path(path).parent_path(); !parent.empty()) std::filesystem::create_directories(parent);
  out_.open(path, std::ios::trunc);
  if (!out_) throw FormatError("cannot write metrics file " + path);
  for (const auto& [key, value] : echo) out_ << "# " << key << "=" << value << '\n';
  out_ << kMetricsHeader << '\n';
  out_.flush();
}

void MetricsLog::append(const MetricsRow& row) {
  if (!rows_.empty() && row.step < rows_.back().step) throw ContractError("metrics steps must be non-decreasing");
  rows_.push_back(row);
  if (out_.is_open()) {
    out_ << format_row(row) << '\n';
    out_.flush();
  }
}

EvalResult evaluate(Network<float>& net, const Dataset& data, const NormStats& stats, Index batch_size) {
  EvalResult result;
  if (data.size() == 0) return result;
  BatchIterator<float> it(data, stats, BatchOptions{std::min(batch_size, data.size()), 0, Mode::eval, false});
  Batch<float> batch;
  double loss = 0.0;
  Index correct_total = 0;
  while (it.next(batch)) {
    const ForwardResult<float> out = net.forward(nullptr, batch.images, Mode::eval);
    const Index b = batch.images->dim(0);
    loss += static_cast<double>(hard_loss<float>(nullptr, out.logits, batch.labels)->item()) * b;
    for (Index r = 0; r < b; ++r) {
      Index best = 0;
      for (Index c = 1; c < kNumClasses; ++c) {
        if ((*out.logits)[r * kNumClasses + c] > (*out.logits)[r * kNumClasses + best]) best = c;
      }
      const int label = data.label(batch.indices[static_cast<std::size_t>(r)]);
      ++result.total[static_cast<std::size_t>(label)];
      if (best == label) {
        ++result.correct[static_cast<std::size_t>(label)];
        ++correct_total;
      }
    }
  }
  result.accuracy = static_cast<double>(correct_total) / static_cast<double>(data.size());
  result.mean_loss = loss / static_cast<double>(data.size());
  return result;
}

TrainResult train_hr(const NetSpec& spec, const PreparedSplit& train, const PreparedSplit& test,
                     const TrainConfig& cfg, const StepHook& hook, const ConfigEcho& echo) {
  cfg.validate();
  ConfigEcho full{{"mode", "train"}, {"spec", spec.to_string()}};
  full.insert(full.end(), echo.begin(), echo.end());
  MetricsLog log(cfg.metrics_path, with_train_echo(full, cfg));

  Network<float> net = Network<float>::build(spec, cfg.seed);
  Sgd<float> opt = make_optimizer(net, cfg);
  BatchIterator<float> batches(train.data, train.stats, train_batches(cfg));
  const std::vector<TensorPtr<float>> decayed = net.decayed_weights();
  Batch<float> batch;

  return run_loop(net, opt, cfg, test, train.stats.fingerprint, log, hook, [&](std::int64_t) {
    batches.next(batch);
    net.zero_grad();
    Tape<float> tape;
    const ForwardResult<float> out = net.forward(&tape, batch.images, Mode::train);
    const TensorPtr<float> loss = hard_loss(&tape, out.logits, batch.labels);
    tape.backward(*loss);
    MetricsRow row;
    row.e_kdh = loss->item();
    row.e_reg = 0.5 * cfg.weight_decay * sum_squares(decayed);
    row.total = row.e_kdh + row.e_reg;
    row.accuracy = batch_accuracy(*out.logits, *batch.labels);
    return row;
  });
}

TrainResult train_lr_distill(Network<float>& teacher, const std::string& teacher_fingerprint,
                             const NetSpec& student_spec, const PreparedSplit& hr_train,
                             const PreparedSplit& lr_train, const PreparedSplit& lr_test, const DistillConfig& dcfg,
                             const TrainConfig& cfg, const StepHook& hook, const ConfigEcho& echo,
                             const WarningSink& warn) {
  cfg.validate();
  dcfg.validate();
  if (teacher_fingerprint != hr_train.stats.fingerprint) {
    const std::string note = "teacher was trained with normalization statistics " + teacher_fingerprint +
                             " but the HR data carries " + hr_train.stats.fingerprint;
    if (warn) {
      warn(note);
    } else {
      std::cerr << "warning: " << note << '\n';
    }
  }
  ConfigEcho full{{"mode", "distill"},
                  {"teacher_spec", teacher.spec().to_string()},
                  {"student_spec", student_spec.to_string()},
                  {"alpha", format_number(dcfg.alpha)},
                  {"temperature", format_number(dcfg.temperature)},
                  {"beta", format_number(dcfg.beta)},
                  {"omega", format_number(dcfg.omega[0]) + ";" + format_number(dcfg.omega[1]) + ";" +
                                format_number(dcfg.omega[2])},
                  {"lambda", format_number(dcfg.lambda)},
                  {"mu", format_number(dcfg.mu)},
                  {"p", std::to_string(dcfg.p)},
                  {"noise_sigma", format_number(lr_train.degrade.noise_sigma)},
                  {"resolution", std::to_string(lr_train.degrade.target_res)}};
  full.insert(full.end(), echo.begin(), echo.end());
  MetricsLog log(cfg.metrics_path, with_train_echo(full, cfg));

  Network<float> student = Network<float>::build(student_spec, cfg.seed);
  Sgd<float> opt = make_optimizer(student, cfg);
  teacher.set_requires_grad(false);
  PairedBatchIterator<float> batches(hr_train.data, hr_train.stats, lr_train.data, lr_train.stats,
                                     train_batches(cfg));
  TensorPtr<float> adapter;
  if (dcfg.mu > 0.0) {
    // fixed random map from student to teacher pooled width
    const Index from = student.parameter("head.fc.weight")->dim(1), to = teacher.parameter("head.fc.weight")->dim(1);
    if (from != to) {
      adapter = make_tensor<float>(Shape{to, from});
      std::mt19937_64 rng(mix_seed(cfg.seed, 2));
      std::normal_distribution<double> normal(0.0, std::sqrt(1.0 / static_cast<double>(from)));
      for (auto& v : adapter->values()) v = static_cast<float>(normal(rng));
    }
  }
  Batch<float> hr, lr;

  return run_loop(student, opt, cfg, lr_test, lr_train.stats.fingerprint, log, hook, [&](std::int64_t) {
    batches.next(hr, lr);
    const ForwardResult<float> t = teacher.forward(nullptr, hr.images, Mode::eval);
    student.zero_grad();
    Tape<float> tape;
    const ForwardResult<float> s = student.forward(&tape, lr.images, Mode::train);
    const JointLoss<float> loss = joint_loss(&tape, t, s, lr.labels, student.decayed_weights(), dcfg, adapter);
    tape.backward(*loss.total);
    MetricsRow row;
    row.e_kdh = loss.hard->item();
    row.e_kds = loss.soft->item();
    for (std::size_t j = 0; j < 3; ++j) row.e_at[j] = loss.attention.blocks[j]->item();
    row.e_reg = loss.reg->item();
    row.total = loss.total->item();
    row.accuracy = batch_accuracy(*s.logits, *lr.labels);
    return row;
  });
}

std::array<double, 3> omega_from_losses(const std::array<double, 3>& raw) {
  for (double e : raw) {
    if (!(e >= kOmegaFallbackThreshold)) return {1.0, 1.0, 1.0};
  }
  const double inv_sum = 1.0 / raw[0] + 1.0 / raw[1] + 1.0 / raw[2];
  std::array<double, 3> omega{};
  for (std::size_t j = 0; j < 3; ++j) omega[j] = 3.0 * (1.0 / raw[j]) / inv_sum;
  return omega;
}

OmegaCalibration calibrate_omega(Network<float>& hr_net, Network<float>& lr_net, const PreparedSplit& hr,
                                 const PreparedSplit& lr, int p, Index batch_size) {
  const BatchOptions options{std::min(batch_size, hr.data.size()), 0, Mode::eval, false};
  PairedBatchIterator<float> batches(hr.data, hr.stats, lr.data, lr.stats, options);
  Batch<float> hb, lb;
  std::array<double, 3> sums{0.0, 0.0, 0.0};
  while (batches.next(hb, lb)) {
    const ForwardResult<float> a = hr_net.forward(nullptr, hb.images, Mode::eval);
    const ForwardResult<float> b = lr_net.forward(nullptr, lb.images, Mode::eval);
    const std::array<TensorPtr<float>, 3> fa{a.feat1, a.feat2, a.feat3}, fb{b.feat1, b.feat2, b.feat3};
    const double weight = static_cast<double>(hb.images->dim(0));
    for (std::size_t j = 0; j < 3; ++j) {
      sums[j] += weight * attention_loss_block<float>(nullptr, fa[j], fb[j], p)->item();
    }
  }
  OmegaCalibration out;
  for (std::size_t j = 0; j < 3; ++j) out.raw[j] = sums[j] / static_cast<double>(hr.data.size());
  out.omega = omega_from_losses(out.raw);
  return out;
}

}  // namespace lrdb
