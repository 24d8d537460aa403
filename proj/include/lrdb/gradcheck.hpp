#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "lrdb/tape.hpp"

namespace lrdb {

struct GradCheckOptions {
  double eps = 1e-3;        // central-difference step
  double tolerance = 1e-3;  // max accepted relative error
  double floor = 1e-2;      // denominator floor of the relative error
  Index max_entries = -1;   // per tensor; -1 checks every entry
  int refinements = 0;      // failing entries are retried with eps / 10, this many times
  std::uint64_t seed = 0;
};

struct GradCheckReport {
  std::string name;
  double max_rel_error = 0.0;
  double worst_analytic = 0.0;  // gradient pair at the worst entry
  double worst_numeric = 0.0;
  Index checked = 0;
  bool passed = true;
};

/// Relative error |a - n| / max(|a|, |n|, floor).
inline double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Compares reverse-mode gradients of L = <forward(), R> against central
/// differences, R being a fixed random projection (or 1 for scalar outputs).
///
/// `forward(tape)` must rebuild the computation from the tensors in `wrt`
/// each call; it is invoked with a null tape for the perturbed evaluations.
template <typename Scalar, typename Forward>
GradCheckReport check_gradients(std::string name, Forward&& forward, const std::vector<TensorPtr<Scalar>>& wrt,
                                const GradCheckOptions& opt) {
  for (const auto& t : wrt) {
    t->enable_grad();
    t->zero_grad();
  }
  Tape<Scalar> tape;
  TensorPtr<Scalar> out = forward(&tape);

  std::mt19937_64 rng(opt.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<Scalar> projection(static_cast<std::size_t>(out->size()), Scalar(1));
  if (out->size() > 1) {
    std::uniform_real_distribution<double> uniform(-1.0, 1.0);
    for (auto& r : projection) r = static_cast<Scalar>(uniform(rng));
  }
  auto project = [&projection](const Tensor<Scalar>& t) {
    double acc = 0.0;
    for (Index i = 0; i < t.size(); ++i) acc += static_cast<double>(t[i]) * static_cast<double>(projection[static_cast<std::size_t>(i)]);
    return acc;
  };
  tape.backward(*out, projection);

  GradCheckReport report;
  report.name = std::move(name);
  for (const auto& t : wrt) {
    const std::vector<Scalar> analytic(t->grad().begin(), t->grad().end());
    std::vector<Index> entries(static_cast<std::size_t>(t->size()));
    for (Index i = 0; i < t->size(); ++i) entries[static_cast<std::size_t>(i)] = i;
    if (opt.max_entries >= 0 && t->size() > opt.max_entries) {
      std::shuffle(entries.begin(), entries.end(), rng);
      entries.resize(static_cast<std::size_t>(opt.max_entries));
    }
    for (Index i : entries) {
      const Scalar original = (*t)[i];
      const double a = static_cast<double>(analytic[static_cast<std::size_t>(i)]);
      auto central = [&](double eps) {
        (*t)[i] = static_cast<Scalar>(static_cast<double>(original) + eps);
        const double up = project(*forward(nullptr));
        (*t)[i] = static_cast<Scalar>(static_cast<double>(original) - eps);
        const double down = project(*forward(nullptr));
        (*t)[i] = original;
        return (up - down) / (2.0 * eps);
      };
      // retry stencils that straddle a kink
      double eps = opt.eps;
      double numeric = central(eps);
      double err = relative_error(a, numeric, opt.floor);
      for (int r = 0; r < opt.refinements && err >= opt.tolerance; ++r) {
        eps /= 10.0;
        numeric = central(eps);
        err = relative_error(a, numeric, opt.floor);
      }
      if (err > report.max_rel_error) {
        report.max_rel_error = err;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
      ++report.checked;
    }
  }
  report.passed = report.max_rel_error < opt.tolerance;
  return report;
}

enum class GradCheckScope { ops, losses, net };

/// Runs the finite-difference suite of one scope over `seeds` random seeds.
std::vector<GradCheckReport> run_gradcheck_suite(GradCheckScope scope, int seeds, std::uint64_t base_seed = 0);

}  // namespace lrdb
