#include "lrdb/run_config.hpp"

#include <set>

#include "json.hpp"

#include "lrdb/errors.hpp"
#include "lrdb/io.hpp"

namespace lrdb {

namespace {

using Json = nlohmann::ordered_json;

void reject_unknown(const Json& obj, const std::string& where, const std::set<std::string>& allowed) {
  if (!obj.is_object()) throw ValidationError(where + " must be a JSON object");
  for (const auto& [key, value] : obj.items()) {
    if (!allowed.count(key)) throw ValidationError("unknown key '" + key + "' in " + where);
  }
}

template <typename T>
void read(const Json& obj, const char* key, T& out, const std::string& where) {
  if (!obj.contains(key)) return;
  try {
    out = obj.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ValidationError(where + "." + key + " has the wrong type");
  }
}

}  // namespace

TrainConfig RunConfig::train_config(bool distill_stage) const {
  TrainConfig cfg = train;
  cfg.weight_decay = weight_decay.value_or(distill_stage ? 0.0 : 1e-4);
  return cfg;
}

RunConfig parse_run_config(const std::string& text) {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError(std::string("config is not valid JSON: ") + e.what());
  }
  RunConfig cfg;
  reject_unknown(j, "config",
                 {"spec", "student_spec", "teacher", "cifar_dir", "data", "hr_data", "lr_data", "out", "train",
                  "distill", "degrade"});
  for (auto [key, field] : {std::pair{"spec", &cfg.spec}, std::pair{"student_spec", &cfg.student_spec},
                            std::pair{"teacher", &cfg.teacher}, std::pair{"cifar_dir", &cfg.cifar_dir},
                            std::pair{"data", &cfg.data}, std::pair{"hr_data", &cfg.hr_data},
                            std::pair{"lr_data", &cfg.lr_data}, std::pair{"out", &cfg.out}}) {
    read(j, key, *field, "config");
  }
  if (j.contains("train")) {
    const Json& t = j.at("train");
    reject_unknown(t, "train",
                   {"total_steps", "batch_size", "base_lr", "lr_milestones", "momentum", "weight_decay", "seed",
                    "eval_every", "augment", "deterministic"});
    read(t, "total_steps", cfg.train.total_steps, "train");
    read(t, "batch_size", cfg.train.batch_size, "train");
    read(t, "base_lr", cfg.train.base_lr, "train");
    if (t.contains("lr_milestones")) {
      std::vector<std::pair<std::int64_t, double>> pairs;
      read(t, "lr_milestones", pairs, "train");
      cfg.train.lr_milestones.clear();
      for (const auto& [step, lr] : pairs) cfg.train.lr_milestones.push_back({step, lr});
    }
    read(t, "momentum", cfg.train.momentum, "train");
    if (t.contains("weight_decay")) {
      double wd = 0.0;
      read(t, "weight_decay", wd, "train");
      cfg.weight_decay = wd;
    }
    read(t, "seed", cfg.train.seed, "train");
    read(t, "eval_every", cfg.train.eval_every, "train");
    read(t, "augment", cfg.train.augment, "train");
    read(t, "deterministic", cfg.train.deterministic, "train");
  }
  if (j.contains("distill")) {
    const Json& d = j.at("distill");
    reject_unknown(d, "distill", {"alpha", "temperature", "beta", "omega", "lambda", "mu", "p"});
    read(d, "alpha", cfg.distill.alpha, "distill");
    read(d, "temperature", cfg.distill.temperature, "distill");
    read(d, "beta", cfg.distill.beta, "distill");
    read(d, "omega", cfg.distill.omega, "distill");
    read(d, "lambda", cfg.distill.lambda, "distill");
    read(d, "mu", cfg.distill.mu, "distill");
    read(d, "p", cfg.distill.p, "distill");
  }
  if (j.contains("degrade")) {
    const Json& g = j.at("degrade");
    reject_unknown(g, "degrade", {"resolution", "noise_sigma", "interp", "seed"});
    read(g, "resolution", cfg.degrade.target_res, "degrade");
    read(g, "noise_sigma", cfg.degrade.noise_sigma, "degrade");
    read(g, "seed", cfg.degrade.seed, "degrade");
    if (g.contains("interp") && g.at("interp") != "bicubic") throw ValidationError("degrade.interp must be \"bicubic\"");
  }
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  const auto bytes = read_file(path);
  return parse_run_config(std::string(bytes.begin(), bytes.end()));
}

std::string serialize_run_config(const RunConfig& cfg) {
  Json j;
  j["spec"] = cfg.spec;
  j["student_spec"] = cfg.student_spec;
  j["teacher"] = cfg.teacher;
  j["cifar_dir"] = cfg.cifar_dir;
  j["data"] = cfg.data;
  j["hr_data"] = cfg.hr_data;
  j["lr_data"] = cfg.lr_data;
  j["out"] = cfg.out;
  Json t;
  t["total_steps"] = cfg.train.total_steps;
  t["batch_size"] = cfg.train.batch_size;
  t["base_lr"] = cfg.train.base_lr;
  t["lr_milestones"] = Json::array();
  for (const auto& m : cfg.train.lr_milestones) t["lr_milestones"].push_back(Json::array({m.step, m.lr}));
  t["momentum"] = cfg.train.momentum;
  if (cfg.weight_decay) t["weight_decay"] = *cfg.weight_decay;
  t["seed"] = cfg.train.seed;
  t["eval_every"] = cfg.train.eval_every;
  t["augment"] = cfg.train.augment;
  t["deterministic"] = cfg.train.deterministic;
  j["train"] = t;
  j["distill"] = {{"alpha", cfg.distill.alpha},   {"temperature", cfg.distill.temperature},
                  {"beta", cfg.distill.beta},     {"omega", cfg.distill.omega},
                  {"lambda", cfg.distill.lambda}, {"mu", cfg.distill.mu},
                  {"p", cfg.distill.p}};
  j["degrade"] = {{"resolution", cfg.degrade.target_res},
                  {"noise_sigma", cfg.degrade.noise_sigma},
                  {"interp", "bicubic"},
                  {"seed", cfg.degrade.seed}};
  return j.dump(2) + "\n";
}

}  // namespace lrdb
