#pragma once

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "lrdb/network.hpp"
#include "lrdb/ops.hpp"

namespace lrdb {

inline constexpr double kAttentionNormEps = 1e-12;

/// Weights of the student's joint objective.
struct DistillConfig {
  double alpha = 0.9;        // soft/hard mix
  double temperature = 4.0;  // softening temperature T
  double beta = 0.1;         // attention-transfer weight
  std::array<double, 3> omega{1.0, 1.0, 1.0};
  double lambda = 0.005;  // explicit L2 penalty on student conv/fc weights
  double mu = 0.0;        // pooled-feature MSE weight, off by default
  int p = 2;              // attention-map exponent

  /// Throws ParameterError on out-of-range fields.
  void validate() const {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ParameterError("alpha must lie in [0,1]");
    if (!(temperature > 0.0)) throw ParameterError("temperature must be positive");
    if (!(beta >= 0.0)) throw ParameterError("beta must be nonnegative");
    for (double w : omega) {
      if (!(w >= 0.0)) throw ParameterError("omega weights must be nonnegative");
    }
    if (!(lambda >= 0.0)) throw ParameterError("lambda must be nonnegative");
    if (!(mu >= 0.0)) throw ParameterError("mu must be nonnegative");
    if (p < 1) throw ParameterError("attention exponent p must be >= 1");
  }

  bool operator==(const DistillConfig&) const = default;
};

/// out[b,h,w] = (1/D) * sum_d |features[b,d,h,w]|^p.
template <typename Scalar>
TensorPtr<Scalar> attention_map(Tape<Scalar>* tape, const TensorPtr<Scalar>& features, int p) {
  detail::require_rank(features->shape(), 4, "attention_map", "features");
  if (p < 1) throw ParameterError("attention_map: exponent p must be >= 1");
  const Index batch = features->dim(0), depth = features->dim(1);
  const Index plane = features->dim(2) * features->dim(3);
  auto out = make_tensor<Scalar>(Shape{batch, features->dim(2), features->dim(3)});
  const double inv_depth = 1.0 / static_cast<double>(depth);
  for (Index b = 0; b < batch; ++b) {
    for (Index i = 0; i < plane; ++i) {
      double acc = 0.0;
      for (Index d = 0; d < depth; ++d) {
        acc += std::pow(std::abs(static_cast<double>((*features)[(b * depth + d) * plane + i])), p);
      }
      (*out)[b * plane + i] = static_cast<Scalar>(acc * inv_depth);
    }
  }
  if (tracks(tape, {features.get()})) {
    out->enable_grad();
    tape->record([features, out, batch, depth, plane, p, inv_depth] {
      auto dx = features->grad();
      for (Index b = 0; b < batch; ++b) {
        for (Index i = 0; i < plane; ++i) {
          const double g = static_cast<double>(out->grad()[static_cast<std::size_t>(b * plane + i)]) * inv_depth * p;
          for (Index d = 0; d < depth; ++d) {
            const Index k = (b * depth + d) * plane + i;
            const double x = static_cast<double>((*features)[k]);
            const double sign = x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0);
            dx[static_cast<std::size_t>(k)] += static_cast<Scalar>(g * std::pow(std::abs(x), p - 1) * sign);
          }
        }
      }
    });
  }
  return out;
}

/// Batch mean of (1/q) * || Q_hr/||Q_hr|| - Q_lr/||Q_lr|| ||_2 over flattened
/// attention maps of length q. A zero-norm map is replaced by map + 1e-12.
template <typename Scalar>
TensorPtr<Scalar> attention_distance(Tape<Scalar>* tape, const TensorPtr<Scalar>& maps_hr,
                                     const TensorPtr<Scalar>& maps_lr) {
  if (maps_hr->shape() != maps_lr->shape()) {
    throw ContractError("attention loss: map shapes differ, " + shape_string(maps_hr->shape()) + " vs " +
                        shape_string(maps_lr->shape()));
  }
  const Index batch = maps_hr->dim(0);
  const Index q = maps_hr->size() / batch;

  // unit vectors and their pre-normalization norms, per image
  auto units = std::make_shared<std::array<std::vector<double>, 2>>();
  auto norms = std::make_shared<std::array<std::vector<double>, 2>>();
  auto diff_norm = std::make_shared<std::vector<double>>(static_cast<std::size_t>(batch));
  const std::array<const Tensor<Scalar>*, 2> maps{maps_hr.get(), maps_lr.get()};
  for (int side = 0; side < 2; ++side) {
    (*units)[side].resize(static_cast<std::size_t>(maps_hr->size()));
    (*norms)[side].resize(static_cast<std::size_t>(batch));
    for (Index b = 0; b < batch; ++b) {
      const Scalar* src = maps[side]->data() + b * q;
      double* dst = (*units)[side].data() + b * q;
      double sq = 0.0;
      for (Index i = 0; i < q; ++i) sq += static_cast<double>(src[i]) * static_cast<double>(src[i]);
      double shift = 0.0;
      if (sq == 0.0) {
        shift = kAttentionNormEps;
        sq = static_cast<double>(q) * shift * shift;
      }
      const double norm = std::sqrt(sq);
      for (Index i = 0; i < q; ++i) dst[i] = (static_cast<double>(src[i]) + shift) / norm;
      (*norms)[side][static_cast<std::size_t>(b)] = norm;
    }
  }
  double total = 0.0;
  for (Index b = 0; b < batch; ++b) {
    double sq = 0.0;
    for (Index i = 0; i < q; ++i) {
      const double d = (*units)[0][static_cast<std::size_t>(b * q + i)] - (*units)[1][static_cast<std::size_t>(b * q + i)];
      sq += d * d;
    }
    (*diff_norm)[static_cast<std::size_t>(b)] = std::sqrt(sq);
    total += std::sqrt(sq) / static_cast<double>(q);
  }
  auto out = make_tensor<Scalar>(Tensor<Scalar>::scalar(static_cast<Scalar>(total / static_cast<double>(batch))));

  if (tracks(tape, {maps_hr.get(), maps_lr.get()})) {
    out->enable_grad();
    tape->record([maps_hr, maps_lr, out, units, norms, diff_norm, batch, q] {
      const double upstream = static_cast<double>(out->grad()[0]) / (static_cast<double>(batch) * static_cast<double>(q));
      std::vector<double> g(static_cast<std::size_t>(q));
      const std::array<Tensor<Scalar>*, 2> targets{maps_hr.get(), maps_lr.get()};
      for (Index b = 0; b < batch; ++b) {
        const double n = (*diff_norm)[static_cast<std::size_t>(b)];
        if (n == 0.0) continue;
        for (int side = 0; side < 2; ++side) {
          if (!targets[side]->requires_grad()) continue;
          const double sign = side == 0 ? 1.0 : -1.0;
          const double* u = (*units)[side].data() + b * q;
          double dot = 0.0;
          for (Index i = 0; i < q; ++i) {
            const double d = (*units)[0][static_cast<std::size_t>(b * q + i)] - (*units)[1][static_cast<std::size_t>(b * q + i)];
            g[static_cast<std::size_t>(i)] = sign * upstream * d / n;
            dot += g[static_cast<std::size_t>(i)] * u[i];
          }
          const double inv_norm = 1.0 / (*norms)[side][static_cast<std::size_t>(b)];
          auto dx = targets[side]->grad();
          for (Index i = 0; i < q; ++i) {
            dx[static_cast<std::size_t>(b * q + i)] += static_cast<Scalar>((g[static_cast<std::size_t>(i)] - u[i] * dot) * inv_norm);
          }
        }
      }
    });
  }
  return out;
}

/// Attention-transfer loss of one block pair; channel counts may differ.
template <typename Scalar>
TensorPtr<Scalar> attention_loss_block(Tape<Scalar>* tape, const TensorPtr<Scalar>& feat_hr,
                                       const TensorPtr<Scalar>& feat_lr, int p) {
  detail::require_rank(feat_hr->shape(), 4, "attention_loss_block", "high-resolution features");
  detail::require_rank(feat_lr->shape(), 4, "attention_loss_block", "low-resolution features");
  if (feat_hr->dim(0) != feat_lr->dim(0) || feat_hr->dim(2) != feat_lr->dim(2) || feat_hr->dim(3) != feat_lr->dim(3)) {
    throw ContractError("attention_loss_block: spatial/batch mismatch between " + shape_string(feat_hr->shape()) +
                        " and " + shape_string(feat_lr->shape()));
  }
  return attention_distance(tape, attention_map(tape, feat_hr, p), attention_map(tape, feat_lr, p));
}

template <typename Scalar>
struct AttentionLoss {
  TensorPtr<Scalar> total;                  // (beta/2) * sum_j omega_j * block_j
  std::array<TensorPtr<Scalar>, 3> blocks;  // unweighted per-block losses
};

template <typename Scalar>
AttentionLoss<Scalar> attention_loss_total(Tape<Scalar>* tape, const std::array<TensorPtr<Scalar>, 3>& feats_hr,
                                           const std::array<TensorPtr<Scalar>, 3>& feats_lr, double beta,
                                           const std::array<double, 3>& omega, int p) {
  AttentionLoss<Scalar> out;
  std::vector<TensorPtr<Scalar>> terms;
  std::vector<double> weights;
  for (std::size_t j = 0; j < 3; ++j) {
    out.blocks[j] = attention_loss_block(tape, feats_hr[j], feats_lr[j], p);
    terms.push_back(out.blocks[j]);
    weights.push_back(0.5 * beta * omega[j]);
  }
  out.total = weighted_sum(tape, terms, weights);
  return out;
}

namespace detail {

template <typename Scalar>
void check_logits(const Tensor<Scalar>& a, const Tensor<Scalar>& b, const char* op) {
  require_rank(a.shape(), 2, op, "logits");
  if (a.shape() != b.shape()) {
    throw ContractError(std::string(op) + ": shapes differ, " + shape_string(a.shape()) + " vs " +
                        shape_string(b.shape()));
  }
}

// log-softmax of row / temperature, in double
template <typename Scalar>
void log_softmax_row(const Scalar* x, Index n, double temperature, double* out) {
  double top = static_cast<double>(x[0]) / temperature;
  for (Index j = 1; j < n; ++j) top = std::max(top, static_cast<double>(x[j]) / temperature);
  double total = 0.0;
  for (Index j = 0; j < n; ++j) total += std::exp(static_cast<double>(x[j]) / temperature - top);
  const double lse = top + std::log(total);
  for (Index j = 0; j < n; ++j) out[j] = static_cast<double>(x[j]) / temperature - lse;
}

}  // namespace detail

/// Mean cross-entropy against one-hot labels.
template <typename Scalar>
TensorPtr<Scalar> hard_loss(Tape<Scalar>* tape, const TensorPtr<Scalar>& logits, const TensorPtr<Scalar>& labels) {
  detail::check_logits(*logits, *labels, "hard_loss");
  const Index rows = logits->dim(0), n = logits->dim(1);
  std::vector<Index> target(static_cast<std::size_t>(rows));
  for (Index r = 0; r < rows; ++r) {
    int ones = 0;
    for (Index j = 0; j < n; ++j) {
      const Scalar v = (*labels)[r * n + j];
      if (v == Scalar(1)) {
        ++ones;
        target[static_cast<std::size_t>(r)] = j;
      } else if (v != Scalar(0)) {
        ones = -1;
        break;
      }
    }
    if (ones != 1) throw ContractError("hard_loss: label row " + std::to_string(r) + " is not one-hot");
  }
  auto log_probs = std::make_shared<std::vector<double>>(static_cast<std::size_t>(rows * n));
  double total = 0.0;
  for (Index r = 0; r < rows; ++r) {
    detail::log_softmax_row(logits->data() + r * n, n, 1.0, log_probs->data() + r * n);
    total -= (*log_probs)[static_cast<std::size_t>(r * n + target[static_cast<std::size_t>(r)])];
  }
  auto out = make_tensor<Scalar>(Tensor<Scalar>::scalar(static_cast<Scalar>(total / static_cast<double>(rows))));
  if (tracks(tape, {logits.get()})) {
    out->enable_grad();
    tape->record([logits, labels, out, log_probs, rows, n] {
      const double scale = static_cast<double>(out->grad()[0]) / static_cast<double>(rows);
      auto dx = logits->grad();
      for (Index k = 0; k < rows * n; ++k) {
        const double prob = std::exp((*log_probs)[static_cast<std::size_t>(k)]);
        dx[static_cast<std::size_t>(k)] += static_cast<Scalar>(scale * (prob - static_cast<double>((*labels)[k])));
      }
    });
  }
  return out;
}

/// Mean cross-entropy between temperature-softened teacher and student
/// distributions. Teacher logits are constants: no gradient ever reaches them.
template <typename Scalar>
TensorPtr<Scalar> soft_loss(Tape<Scalar>* tape, const TensorPtr<Scalar>& teacher_logits,
                            const TensorPtr<Scalar>& student_logits, double temperature) {
  if (!(temperature > 0.0)) throw ParameterError("soft_loss: temperature must be positive");
  detail::check_logits(*teacher_logits, *student_logits, "soft_loss");
  const Index rows = student_logits->dim(0), n = student_logits->dim(1);
  auto teacher_probs = std::make_shared<std::vector<double>>(static_cast<std::size_t>(rows * n));
  auto student_log = std::make_shared<std::vector<double>>(static_cast<std::size_t>(rows * n));
  double total = 0.0;
  for (Index r = 0; r < rows; ++r) {
    detail::log_softmax_row(teacher_logits->data() + r * n, n, temperature, teacher_probs->data() + r * n);
    detail::log_softmax_row(student_logits->data() + r * n, n, temperature, student_log->data() + r * n);
    for (Index j = 0; j < n; ++j) {
      auto& t = (*teacher_probs)[static_cast<std::size_t>(r * n + j)];
      t = std::exp(t);
      total -= t * (*student_log)[static_cast<std::size_t>(r * n + j)];
    }
  }
  auto out = make_tensor<Scalar>(Tensor<Scalar>::scalar(static_cast<Scalar>(total / static_cast<double>(rows))));
  if (tracks(tape, {student_logits.get()})) {
    out->enable_grad();
    tape->record([student_logits, out, teacher_probs, student_log, rows, n, temperature] {
      const double scale = static_cast<double>(out->grad()[0]) / (static_cast<double>(rows) * temperature);
      auto dx = student_logits->grad();
      for (Index k = 0; k < rows * n; ++k) {
        const auto i = static_cast<std::size_t>(k);
        dx[i] += static_cast<Scalar>(scale * (std::exp((*student_log)[i]) - (*teacher_probs)[i]));
      }
    });
  }
  return out;
}

template <typename Scalar>
struct KdLoss {
  TensorPtr<Scalar> total;  // (1 - alpha) * hard + alpha * T^2 * soft
  TensorPtr<Scalar> hard;
  TensorPtr<Scalar> soft;
};

template <typename Scalar>
KdLoss<Scalar> kd_loss(Tape<Scalar>* tape, const TensorPtr<Scalar>& teacher_logits,
                       const TensorPtr<Scalar>& student_logits, const TensorPtr<Scalar>& labels, double alpha,
                       double temperature) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ParameterError("kd_loss: alpha must lie in [0,1]");
  KdLoss<Scalar> out;
  out.hard = hard_loss(tape, student_logits, labels);
  out.soft = soft_loss(tape, teacher_logits, student_logits, temperature);
  out.total = weighted_sum(tape, {out.hard, out.soft}, {1.0 - alpha, alpha * temperature * temperature});
  return out;
}

/// (lambda / 2) * sum of squared entries of `weights`.
template <typename Scalar>
TensorPtr<Scalar> reg_loss(Tape<Scalar>* tape, const std::vector<TensorPtr<Scalar>>& weights, double lambda) {
  double total = 0.0;
  bool tracked = false;
  for (const auto& w : weights) {
    for (Scalar v : w->values()) total += static_cast<double>(v) * static_cast<double>(v);
    tracked = tracked || tracks(tape, {w.get()});
  }
  auto out = make_tensor<Scalar>(Tensor<Scalar>::scalar(static_cast<Scalar>(0.5 * lambda * total)));
  if (tracked) {
    out->enable_grad();
    tape->record([weights, out, lambda] {
      const auto scale = static_cast<Scalar>(lambda) * out->grad()[0];
      for (const auto& w : weights) {
        if (!w->requires_grad()) continue;
        auto dw = w->grad();
        for (Index i = 0; i < w->size(); ++i) dw[static_cast<std::size_t>(i)] += scale * (*w)[i];
      }
    });
  }
  return out;
}

/// Penalty over a network's conv and fc weights.
template <typename Scalar>
TensorPtr<Scalar> reg_loss(Tape<Scalar>* tape, const Network<Scalar>& net, double lambda) {
  return reg_loss(tape, net.decayed_weights(), lambda);
}

/// sum_i || F_H(x_i) - F_L(x_i) ||^2. The gradient with respect to F_L is -2 (F_H - F_L).
template <typename Scalar>
TensorPtr<Scalar> feature_mse(Tape<Scalar>* tape, const TensorPtr<Scalar>& features_hr,
                              const TensorPtr<Scalar>& features_lr) {
  if (features_hr->shape() != features_lr->shape()) {
    throw ContractError("feature_mse: shapes differ, " + shape_string(features_hr->shape()) + " vs " +
                        shape_string(features_lr->shape()) + " (insert a width adapter)");
  }
  double total = 0.0;
  for (Index i = 0; i < features_hr->size(); ++i) {
    const double d = static_cast<double>((*features_hr)[i]) - static_cast<double>((*features_lr)[i]);
    total += d * d;
  }
  auto out = make_tensor<Scalar>(Tensor<Scalar>::scalar(static_cast<Scalar>(total)));
  if (tracks(tape, {features_hr.get(), features_lr.get()})) {
    out->enable_grad();
    tape->record([features_hr, features_lr, out] {
      const Scalar g = out->grad()[0];
      for (Index i = 0; i < features_hr->size(); ++i) {
        const Scalar d = Scalar(2) * ((*features_hr)[i] - (*features_lr)[i]) * g;
        if (features_lr->requires_grad()) features_lr->grad()[static_cast<std::size_t>(i)] -= d;
        if (features_hr->requires_grad()) features_hr->grad()[static_cast<std::size_t>(i)] += d;
      }
    });
  }
  return out;
}

template <typename Scalar>
struct JointLoss {
  TensorPtr<Scalar> total;
  TensorPtr<Scalar> hard;  // E_KDh
  TensorPtr<Scalar> soft;  // E_KDs
  AttentionLoss<Scalar> attention;
  TensorPtr<Scalar> reg;
  TensorPtr<Scalar> feature;  // null when mu == 0
};

/// E_KD + E_AT + E_REG (+ mu * feature MSE when mu > 0).
///
/// `adapter`, when given, maps the student's pooled features to the
/// teacher's width before the feature term.
template <typename Scalar>
JointLoss<Scalar> joint_loss(Tape<Scalar>* tape, const ForwardResult<Scalar>& teacher,
                             const ForwardResult<Scalar>& student, const TensorPtr<Scalar>& labels,
                             const std::vector<TensorPtr<Scalar>>& reg_weights, const DistillConfig& cfg,
                             const TensorPtr<Scalar>& adapter = nullptr) {
  cfg.validate();
  JointLoss<Scalar> out;
  const KdLoss<Scalar> kd = kd_loss(tape, teacher.logits, student.logits, labels, cfg.alpha, cfg.temperature);
  out.hard = kd.hard;
  out.soft = kd.soft;
  out.attention = attention_loss_total(tape, {teacher.feat1, teacher.feat2, teacher.feat3},
                                       {student.feat1, student.feat2, student.feat3}, cfg.beta, cfg.omega, cfg.p);
  out.reg = reg_loss(tape, reg_weights, cfg.lambda);
  std::vector<TensorPtr<Scalar>> terms{kd.total, out.attention.total, out.reg};
  std::vector<double> weights{1.0, 1.0, 1.0};
  if (cfg.mu > 0.0) {
    const TensorPtr<Scalar> mapped = adapter ? linear(tape, student.pooled, adapter, TensorPtr<Scalar>{}) : student.pooled;
    out.feature = feature_mse(tape, teacher.pooled, mapped);
    terms.push_back(out.feature);
    weights.push_back(cfg.mu);
  }
  out.total = weighted_sum(tape, terms, weights);
  return out;
}

}  // namespace lrdb
