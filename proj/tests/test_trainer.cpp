#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "lrdb/errors.hpp"
#include "lrdb/io.hpp"
#include "lrdb/run_config.hpp"
#include "lrdb/trainer.hpp"
#include "test_util.hpp"

using namespace lrdb;
using lrdb::testing::TempDir;

namespace {

PreparedSplit synthetic_split(Index count, std::uint64_t seed, const DegradeConfig& degrade = {}) {
  PreparedSplit s;
  s.degrade = degrade;
  s.degrade.seed = seed;
  s.data = degrade_dataset(make_synthetic_dataset(count, seed), s.degrade);
  s.stats = compute_norm_stats(s.data);
  return s;
}

DegradeConfig low_res(int res) {
  DegradeConfig d;
  d.target_res = res;
  return d;
}

TrainConfig small_config(std::int64_t steps) {
  TrainConfig cfg;
  cfg.total_steps = steps;
  cfg.batch_size = 8;
  cfg.eval_every = 4;
  cfg.base_lr = 0.05;
  cfg.deterministic = true;
  return cfg;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST(Schedule, PaperMilestones) {
  const TrainConfig cfg;
  EXPECT_EQ(lr_at(0, cfg), 0.1);
  EXPECT_EQ(lr_at(31999, cfg), 0.1);
  EXPECT_EQ(lr_at(32000, cfg), 0.01);
  EXPECT_EQ(lr_at(47999, cfg), 0.01);
  EXPECT_EQ(lr_at(48000, cfg), 0.001);
  EXPECT_EQ(lr_at(63999, cfg), 0.001);
  EXPECT_EQ(cfg.total_steps, 64000);
  EXPECT_EQ(cfg.batch_size, 128);
  EXPECT_EQ(cfg.momentum, 0.9);
  EXPECT_EQ(cfg.weight_decay, 1e-4);
  EXPECT_EQ(distill_train_defaults().weight_decay, 0.0);
}

TEST(Schedule, ValidationRejectsBadConfigs) {
  TrainConfig cfg;
  cfg.lr_milestones = {{10, 0.1}, {5, 0.01}};
  EXPECT_THROW(cfg.validate(), ValidationError);
  cfg = TrainConfig{};
  cfg.momentum = 1.0;
  EXPECT_THROW(cfg.validate(), ValidationError);
  cfg = TrainConfig{};
  cfg.total_steps = 0;
  EXPECT_THROW(cfg.validate(), ValidationError);
}

TEST(Omega, InverseLossRule) {
  const auto w = omega_from_losses({0.003, 0.002, 0.001});
  EXPECT_NEAR(w[0], 6.0 / 11.0, 1e-12);
  EXPECT_NEAR(w[1], 9.0 / 11.0, 1e-12);
  EXPECT_NEAR(w[2], 18.0 / 11.0, 1e-12);
  EXPECT_EQ(omega_from_losses({0.0, 0.0, 0.0}), (std::array<double, 3>{1, 1, 1}));
  EXPECT_EQ(omega_from_losses({0.1, 1e-10, 0.2}), (std::array<double, 3>{1, 1, 1}));
}

TEST(Omega, IdenticalNetworksFallBack) {
  const PreparedSplit data = synthetic_split(20, 1);
  Network<float> a = Network<float>::build(parse_spec("r8-1-1-1"), 3);
  Network<float> b = a.clone();
  const OmegaCalibration c = calibrate_omega(a, b, data, data, 2, 8);
  for (int j = 0; j < 3; ++j) EXPECT_EQ(c.raw[j], 0.0);
  EXPECT_EQ(c.omega, (std::array<double, 3>{1, 1, 1}));
}

TEST(Omega, RawLossesAreSampleMeans) {
  const PreparedSplit hr = synthetic_split(13, 1);
  const PreparedSplit lr = synthetic_split(13, 1, low_res(8));
  Network<float> a = Network<float>::build(parse_spec("r8-1-1-1"), 3);
  Network<float> b = Network<float>::build(parse_spec("r8-1-1-1"), 4);
  const OmegaCalibration batched = calibrate_omega(a, b, hr, lr, 2, 5);
  const OmegaCalibration whole = calibrate_omega(a, b, hr, lr, 2, 13);
  for (int j = 0; j < 3; ++j) {
    EXPECT_GT(whole.raw[j], 0.0);
    EXPECT_NEAR(batched.raw[j], whole.raw[j], 1e-6 * whole.raw[j]);
  }
}

TEST(Evaluate, MatchesArgmaxCountOracle) {
  const PreparedSplit data = synthetic_split(32, 5);
  Network<float> net = Network<float>::build(parse_spec("r8-1-1-1"), 1);
  const std::string before = state_hash(net);
  const EvalResult r = evaluate(net, data.data, data.stats, 7);
  EXPECT_EQ(state_hash(net), before);

  Index correct = 0;
  std::array<Index, 10> per_class{};
  for (Index i = 0; i < data.data.size(); ++i) {
    const std::vector<Sample> one{Sample{i, {}}};
    const Batch<float> b = gather_batch<float>(data.data, data.stats, one);
    const auto logits = net.forward(nullptr, b.images, Mode::eval).logits;
    Index best = 0;
    for (Index k = 1; k < 10; ++k) best = (*logits)[k] > (*logits)[best] ? k : best;
    if (best == data.data.label(i)) {
      ++correct;
      ++per_class[static_cast<std::size_t>(best)];
    }
  }
  EXPECT_DOUBLE_EQ(r.accuracy, static_cast<double>(correct) / 32.0);
  EXPECT_EQ(r.correct, per_class);
  Index total = 0;
  for (Index t : r.total) total += t;
  EXPECT_EQ(total, 32);
  EXPECT_EQ(evaluate(net, data.data, data.stats, 32).accuracy, r.accuracy);
}

TEST(Evaluate, UntrainedNetworkNearChance) {
  const PreparedSplit data = synthetic_split(500, 8);
  double mean = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Network<float> net = Network<float>::build(parse_spec("r8-1-1-1"), seed);
    mean += evaluate(net, data.data, data.stats).accuracy / 5;
  }
  EXPECT_NEAR(mean, 0.1, 0.03);
}

TEST(TrainHr, LogsScheduleAndReducesLoss) {
  TempDir dir("train_hr");
  const PreparedSplit train = synthetic_split(64, 1), test = synthetic_split(24, 2);
  TrainConfig cfg = small_config(24);
  cfg.lr_milestones = {{8, 0.01}, {16, 0.001}};
  cfg.metrics_path = (dir / "m.csv").string();
  cfg.checkpoint_path = (dir / "best.lrdb").string();
  const TrainResult r = train_hr(parse_spec("r8-1-1-1"), train, test, cfg);
  EXPECT_EQ(r.steps, 24);
  std::int64_t train_rows = 0, test_rows = 0;
  double best = -1;
  for (const auto& row : r.metrics) {
    EXPECT_EQ(row.lr, lr_at(row.step, cfg)) << row.step;
    EXPECT_EQ(row.seconds, 0.0);
    if (row.split == "train") {
      EXPECT_EQ(row.step, train_rows++);
      EXPECT_NEAR(row.total, row.e_kdh + row.e_reg, 1e-12);
    } else {
      ++test_rows;
      EXPECT_EQ((row.step + 1) % 4, 0);
      best = std::max(best, row.accuracy);
    }
  }
  EXPECT_EQ(train_rows, 24);
  EXPECT_EQ(test_rows, 6);
  EXPECT_EQ(r.best.best_accuracy, best);
  EXPECT_EQ(load_checkpoint(cfg.checkpoint_path).best_accuracy, best);
  EXPECT_EQ(r.best.fingerprint, train.stats.fingerprint);

  double first = 0, last = 0;
  for (int k = 0; k < 4; ++k) {
    first += r.metrics[static_cast<std::size_t>(k)].e_kdh;
  }
  std::vector<double> tail;
  for (const auto& row : r.metrics) {
    if (row.split == "train" && row.step >= 20) tail.push_back(row.e_kdh);
  }
  for (double v : tail) last += v;
  EXPECT_LT(last / tail.size(), first / 4);

  const std::string csv = slurp(cfg.metrics_path);
  EXPECT_NE(csv.find(std::string(kMetricsHeader) + "\n"), std::string::npos);
  EXPECT_NE(csv.find("# spec=r8-1-1-1\n"), std::string::npos);
  EXPECT_NE(csv.find("\n" + format_row(r.metrics.back()) + "\n"), std::string::npos);
}

TEST(TrainHr, DeterministicMetricsFiles) {
  TempDir dir("det");
  const PreparedSplit train = synthetic_split(40, 1), test = synthetic_split(16, 2);
  TrainConfig cfg = small_config(10);
  cfg.metrics_path = (dir / "a.csv").string();
  const TrainResult a = train_hr(parse_spec("r8-1-1-1"), train, test, cfg);
  cfg.metrics_path = (dir / "b.csv").string();
  const TrainResult b = train_hr(parse_spec("r8-1-1-1"), train, test, cfg);
  EXPECT_EQ(slurp(dir / "a.csv"), slurp(dir / "b.csv"));
  EXPECT_EQ(serialize_checkpoint(a.last), serialize_checkpoint(b.last));
  cfg.seed = 1;
  cfg.metrics_path = (dir / "c.csv").string();
  train_hr(parse_spec("r8-1-1-1"), train, test, cfg);
  EXPECT_NE(slurp(dir / "a.csv"), slurp(dir / "c.csv"));
}

TEST(TrainHr, HookStopsEarlyAndFinalEvalRuns) {
  const PreparedSplit train = synthetic_split(40, 1), test = synthetic_split(16, 2);
  TrainConfig cfg = small_config(50);
  cfg.eval_every = 100;
  const TrainResult r = train_hr(parse_spec("r8-1-1-1"), train, test, cfg, [](const StepInfo& s, Network<float>&) {
    return s.step < 5;
  });
  EXPECT_EQ(r.steps, 6);
  EXPECT_EQ(r.metrics.back().split, "test");
  EXPECT_EQ(r.metrics.back().step, 5);
  EXPECT_EQ(r.last.step, 6);
}

TEST(TrainHr, NonFiniteLossAborts) {
  const PreparedSplit train = synthetic_split(40, 1), test = synthetic_split(16, 2);
  TrainConfig cfg = small_config(40);
  cfg.base_lr = 1e30;
  try {
    train_hr(parse_spec("r8-1-1-1"), train, test, cfg);
    FAIL();
  } catch (const NumericError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("step"), std::string::npos);
    EXPECT_NE(msg.find("lr=1e+30"), std::string::npos) << msg;
    EXPECT_NE(msg.find("max|grad|"), std::string::npos);
  }
}

TEST(Distill, TeacherFrozenAndEchoed) {
  TempDir dir("distill");
  const PreparedSplit hr = synthetic_split(40, 1), lr = synthetic_split(40, 1, low_res(8));
  const PreparedSplit lr_test = synthetic_split(16, 2, low_res(8));
  Network<float> teacher = Network<float>::build(parse_spec("r8-1-2-1"), 9);
  const std::string before = state_hash(teacher);
  TrainConfig cfg = small_config(8);
  cfg.weight_decay = 0.0;
  cfg.metrics_path = (dir / "m.csv").string();
  DistillConfig dcfg;
  dcfg.mu = 0.5;
  std::vector<std::string> warnings;
  const TrainResult r = train_lr_distill(teacher, hr.stats.fingerprint, parse_spec("r8-1-1-1"), hr, lr, lr_test, dcfg,
                                         cfg, {}, {}, [&](const std::string& w) { warnings.push_back(w); });
  EXPECT_EQ(state_hash(teacher), before);
  EXPECT_TRUE(warnings.empty());
  EXPECT_EQ(r.best.fingerprint, lr.stats.fingerprint);
  for (const auto& row : r.metrics) {
    if (row.split != "train") continue;
    EXPECT_GT(row.e_kds, 0.0);
    EXPECT_GT(row.e_at[0], 0.0);
    EXPECT_GT(row.e_reg, 0.0);
  }
  const std::string csv = slurp(cfg.metrics_path);
  for (const char* line : {"# alpha=0.9\n", "# temperature=4\n", "# beta=0.1\n", "# lambda=0.005\n", "# resolution=8\n",
                           "# teacher_spec=r8-1-2-1\n"}) {
    EXPECT_NE(csv.find(line), std::string::npos) << line;
  }

  train_lr_distill(teacher, "0000", parse_spec("r8-1-1-1"), hr, lr, lr_test, dcfg, small_config(1), {}, {},
                   [&](const std::string& w) { warnings.push_back(w); });
  EXPECT_EQ(warnings.size(), 1u);
}

TEST(Distill, DegenerateConfigMatchesTrainHr) {
  const PreparedSplit hr = synthetic_split(48, 1), lr = synthetic_split(48, 1, low_res(16));
  const PreparedSplit lr_test = synthetic_split(16, 2, low_res(16));
  Network<float> teacher = Network<float>::build(parse_spec("r8-1-1-1"), 9);
  DistillConfig dcfg;
  dcfg.alpha = dcfg.beta = dcfg.lambda = 0.0;
  for (double wd : {0.0, 1e-4}) {
    TrainConfig cfg = small_config(12);
    cfg.weight_decay = wd;
    const TrainResult a = train_hr(parse_spec("r8-1-1-1"), lr, lr_test, cfg);
    const TrainResult b = train_lr_distill(teacher, hr.stats.fingerprint, parse_spec("r8-1-1-1"), hr, lr, lr_test,
                                           dcfg, cfg);
    ASSERT_EQ(a.metrics.size(), b.metrics.size());
    for (std::size_t k = 0; k < a.metrics.size(); ++k) {
      EXPECT_EQ(a.metrics[k].e_kdh, b.metrics[k].e_kdh) << k;
      EXPECT_EQ(a.metrics[k].accuracy, b.metrics[k].accuracy) << k;
    }
    EXPECT_EQ(serialize_checkpoint(a.last), serialize_checkpoint(b.last));
  }
}

TEST(Metrics, NonDecreasingSteps) {
  MetricsLog log;
  MetricsRow row;
  row.step = 3;
  log.append(row);
  row.step = 3;
  log.append(row);
  row.step = 2;
  EXPECT_THROW(log.append(row), ContractError);
  EXPECT_EQ(format_number(0.1), "0.1");
  EXPECT_EQ(format_number(1e-4), "1e-04");
}

TEST(RunConfig, DefaultsAndRoundTrip) {
  const RunConfig defaults = parse_run_config("{}");
  EXPECT_EQ(defaults, RunConfig{});
  EXPECT_EQ(defaults.train_config(false).weight_decay, 1e-4);
  EXPECT_EQ(defaults.train_config(true).weight_decay, 0.0);

  RunConfig cfg;
  cfg.spec = "r38-4-8-1";
  cfg.data = "/tmp/x";
  cfg.train.total_steps = 123;
  cfg.train.lr_milestones = {{5, 0.5}};
  cfg.train.seed = 77;
  cfg.weight_decay = 0.25;
  cfg.distill.omega = {0.5, 1.0, 1.5};
  cfg.distill.p = 3;
  cfg.degrade.target_res = 8;
  cfg.degrade.noise_sigma = 0.0;
  const std::string text = serialize_run_config(cfg);
  const RunConfig back = parse_run_config(text);
  EXPECT_EQ(back, cfg);
  EXPECT_EQ(serialize_run_config(back), text);
  EXPECT_EQ(back.train_config(true).weight_decay, 0.25);
}

TEST(RunConfig, UnknownKeysAndBadValuesRejected) {
  EXPECT_THROW(parse_run_config("{\"spce\": \"r20-2-1-1\"}"), ValidationError);
  EXPECT_THROW(parse_run_config("{\"train\": {\"stepz\": 1}}"), ValidationError);
  EXPECT_THROW(parse_run_config("{\"distill\": {\"gamma\": 1}}"), ValidationError);
  EXPECT_THROW(parse_run_config("{\"degrade\": {\"interp\": \"nearest\"}}"), ValidationError);
  EXPECT_THROW(parse_run_config("{\"train\": {\"total_steps\": \"many\"}}"), ValidationError);
  EXPECT_THROW(parse_run_config("[1, 2]"), ValidationError);
  EXPECT_THROW(parse_run_config("{"), ValidationError);
}

TEST(RunConfig, LoadsFromFile) {
  TempDir dir("runcfg");
  write_file_atomic(dir / "c.json", std::string_view("{\"spec\": \"p20\", \"distill\": {\"alpha\": 0.5}}"));
  const RunConfig cfg = load_run_config((dir / "c.json").string());
  EXPECT_EQ(cfg.spec, "p20");
  EXPECT_EQ(cfg.distill.alpha, 0.5);
  EXPECT_THROW(load_run_config((dir / "missing.json").string()), FormatError);
}
