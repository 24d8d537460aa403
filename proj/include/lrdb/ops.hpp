#pragma once

#include <algorithm>
#include <cmath>
#include <utility>
#include <string>
#include <vector>

#include "lrdb/tape.hpp"
#include "lrdb/tensor.hpp"

namespace lrdb {

enum class Mode { train, eval };

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.9;

/// Per-channel running statistics of one batch-norm layer.
template <typename Scalar>
struct BatchNormState {
  std::vector<Scalar> running_mean;
  std::vector<Scalar> running_var;

  BatchNormState() = default;
  explicit BatchNormState(Index channels)
      : running_mean(static_cast<std::size_t>(channels), Scalar(0)),
        running_var(static_cast<std::size_t>(channels), Scalar(1)) {}

  Index channels() const noexcept { return static_cast<Index>(running_mean.size()); }
};

namespace detail {

struct ConvGeometry {
  Index batch, in_channels, height, width;
  Index out_channels, kernel, stride, pad;
  Index out_height, out_width;

  Index patch() const { return in_channels * kernel * kernel; }
  Index out_plane() const { return out_height * out_width; }
  bool pointwise() const { return kernel == 1 && stride == 1 && pad == 0; }
};

// col is (Cin*k*k) x (Ho*Wo), row-major, rows ordered (channel, ky, kx).
// Output columns [lo, hi) whose input column ox * stride - pad + kx is in range.
inline std::pair<Index, Index> valid_columns(const ConvGeometry& g, Index kx) {
  const Index shift = kx - g.pad;
  Index lo = shift >= 0 ? 0 : (-shift + g.stride - 1) / g.stride;
  Index hi = (g.width - 1 - shift) >= 0 ? (g.width - 1 - shift) / g.stride + 1 : 0;
  hi = std::min(hi, g.out_width);
  return {std::min(lo, hi), hi};
}

template <typename Scalar>
void im2col(const Scalar* image, const ConvGeometry& g, Scalar* col) {
  const Index cols = g.out_plane();
  for (Index c = 0; c < g.in_channels; ++c) {
    const Scalar* plane = image + c * g.height * g.width;
    for (Index ky = 0; ky < g.kernel; ++ky) {
      for (Index kx = 0; kx < g.kernel; ++kx) {
        Scalar* row = col + ((c * g.kernel + ky) * g.kernel + kx) * cols;
        const auto [lo, hi] = valid_columns(g, kx);
        const Index shift = kx - g.pad;
        for (Index oy = 0; oy < g.out_height; ++oy) {
          const Index iy = oy * g.stride - g.pad + ky;
          Scalar* dst = row + oy * g.out_width;
          if (iy < 0 || iy >= g.height) {
            std::fill(dst, dst + g.out_width, Scalar(0));
            continue;
          }
          const Scalar* src = plane + iy * g.width;
          std::fill(dst, dst + lo, Scalar(0));
          if (g.stride == 1) {
            std::copy(src + lo + shift, src + hi + shift, dst + lo);
          } else {
            for (Index ox = lo; ox < hi; ++ox) dst[ox] = src[ox * g.stride + shift];
          }
          std::fill(dst + hi, dst + g.out_width, Scalar(0));
        }
      }
    }
  }
}

template <typename Scalar>
void col2im_add(const Scalar* col, const ConvGeometry& g, Scalar* image) {
  const Index cols = g.out_plane();
  for (Index c = 0; c < g.in_channels; ++c) {
    Scalar* plane = image + c * g.height * g.width;
    for (Index ky = 0; ky < g.kernel; ++ky) {
      for (Index kx = 0; kx < g.kernel; ++kx) {
        const Scalar* row = col + ((c * g.kernel + ky) * g.kernel + kx) * cols;
        const auto [lo, hi] = valid_columns(g, kx);
        const Index shift = kx - g.pad;
        for (Index oy = 0; oy < g.out_height; ++oy) {
          const Index iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.height) continue;
          const Scalar* src = row + oy * g.out_width;
          Scalar* dst = plane + iy * g.width;
          if (g.stride == 1) {
            for (Index ox = lo; ox < hi; ++ox) dst[ox + shift] += src[ox];
          } else {
            for (Index ox = lo; ox < hi; ++ox) dst[ox * g.stride + shift] += src[ox];
          }
        }
      }
    }
  }
}

inline void require_rank(const Shape& shape, std::size_t rank, const char* op, const char* what) {
  if (shape.size() != rank) {
    throw ShapeError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) + ", got " +
                     shape_string(shape));
  }
}

}  // namespace detail

/// Cross-correlation without bias. Output extent is floor((H + 2*pad - k) / stride) + 1.
template <typename Scalar>
TensorPtr<Scalar> conv2d(Tape<Scalar>* tape, const TensorPtr<Scalar>& input, const TensorPtr<Scalar>& weight,
                         Index stride, Index pad) {
  detail::require_rank(input->shape(), 4, "conv2d", "input");
  detail::require_rank(weight->shape(), 4, "conv2d", "weight");
  if (weight->dim(2) != weight->dim(3)) {
    throw ShapeError("conv2d: kernel must be square, weight shape " + shape_string(weight->shape()));
  }
  if (input->dim(1) != weight->dim(1)) {
    throw ShapeError("conv2d: input " + shape_string(input->shape()) + " has " + std::to_string(input->dim(1)) +
                     " channels but weight " + shape_string(weight->shape()) + " expects " +
                     std::to_string(weight->dim(1)));
  }
  if (stride != 1 && stride != 2) throw ContractError("conv2d: stride must be 1 or 2");
  if (pad < 0) throw ContractError("conv2d: negative padding");

  detail::ConvGeometry g{};
  g.batch = input->dim(0);
  g.in_channels = input->dim(1);
  g.height = input->dim(2);
  g.width = input->dim(3);
  g.out_channels = weight->dim(0);
  g.kernel = weight->dim(2);
  g.stride = stride;
  g.pad = pad;
  const Index span_h = g.height + 2 * pad - g.kernel;
  const Index span_w = g.width + 2 * pad - g.kernel;
  if (span_h < 0 || span_w < 0) {
    throw ShapeError("conv2d: kernel " + shape_string(weight->shape()) + " larger than padded input " +
                     shape_string(input->shape()));
  }
  g.out_height = span_h / stride + 1;
  g.out_width = span_w / stride + 1;

  auto out = make_tensor<Scalar>(Shape{g.batch, g.out_channels, g.out_height, g.out_width});
  const Index in_image = g.in_channels * g.height * g.width;
  const Index out_image = g.out_channels * g.out_plane();
  const auto w = weight->matrix(g.out_channels, g.patch());

  RowMatrix<Scalar> col;
  if (!g.pointwise()) col.resize(g.patch(), g.out_plane());
  for (Index b = 0; b < g.batch; ++b) {
    auto y = out->matrix(g.out_channels, g.out_plane(), b * out_image);
    if (g.pointwise()) {
      y.noalias() = w * input->matrix(g.in_channels, g.out_plane(), b * in_image);
    } else {
      detail::im2col(input->data() + b * in_image, g, col.data());
      y.noalias() = w * col;
    }
  }

  if (tracks(tape, {input.get(), weight.get()})) {
    out->enable_grad();
    tape->record([input, weight, out, g, in_image, out_image] {
      RowMatrix<Scalar> col_buf;
      RowMatrix<Scalar> dcol;
      if (!g.pointwise()) col_buf.resize(g.patch(), g.out_plane());
      const auto w = weight->matrix(g.out_channels, g.patch());
      for (Index b = 0; b < g.batch; ++b) {
        const auto dy = out->grad_matrix(g.out_channels, g.out_plane(), b * out_image);
        if (weight->requires_grad()) {
          auto dw = weight->grad_matrix(g.out_channels, g.patch());
          if (g.pointwise()) {
            dw.noalias() += dy * input->matrix(g.in_channels, g.out_plane(), b * in_image).transpose();
          } else {
            detail::im2col(input->data() + b * in_image, g, col_buf.data());
            dw.noalias() += dy * col_buf.transpose();
          }
        }
        if (input->requires_grad()) {
          if (g.pointwise()) {
            input->grad_matrix(g.in_channels, g.out_plane(), b * in_image).noalias() += w.transpose() * dy;
          } else {
            dcol.noalias() = w.transpose() * dy;
            detail::col2im_add(dcol.data(), g, input->grad_data() + b * in_image);
          }
        }
      }
    });
  }
  return out;
}

/// Per-channel batch normalization over (batch, height, width).
///
/// Train mode normalizes by the batch statistics and folds them into the
/// running averages (new = 0.9 * old + 0.1 * batch, variance unbiased);
/// eval mode normalizes by the running averages and leaves them untouched.
template <typename Scalar>
TensorPtr<Scalar> batchnorm(Tape<Scalar>* tape, const TensorPtr<Scalar>& input, const TensorPtr<Scalar>& gamma,
                            const TensorPtr<Scalar>& beta, BatchNormState<Scalar>& state, Mode mode) {
  detail::require_rank(input->shape(), 4, "batchnorm", "input");
  const Index batch = input->dim(0), channels = input->dim(1);
  const Index plane = input->dim(2) * input->dim(3);
  if (gamma->size() != channels || beta->size() != channels || state.channels() != channels) {
    throw ShapeError("batchnorm: input " + shape_string(input->shape()) + " vs gamma " +
                     shape_string(gamma->shape()) + ", beta " + shape_string(beta->shape()) + ", state of " +
                     std::to_string(state.channels()) + " channels");
  }
  const Index count = batch * plane;
  if (mode == Mode::train && count < 2) {
    throw ContractError("batchnorm: degenerate batch, train mode needs batch*height*width >= 2, got " +
                        std::to_string(count));
  }

  auto out = make_tensor<Scalar>(input->shape());
  auto normalized = std::make_shared<std::vector<Scalar>>(static_cast<std::size_t>(input->size()));
  auto inv_std = std::make_shared<std::vector<Scalar>>(static_cast<std::size_t>(channels));
  const Scalar* x = input->data();

  using Plane = Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>>;
  using MutPlane = Eigen::Map<Eigen::Array<Scalar, Eigen::Dynamic, 1>>;
  for (Index c = 0; c < channels; ++c) {
    double mean = 0.0;
    double var = 0.0;
    if (mode == Mode::train) {
      for (Index b = 0; b < batch; ++b) mean += Plane(x + (b * channels + c) * plane, plane).template cast<double>().sum();
      mean /= static_cast<double>(count);
      for (Index b = 0; b < batch; ++b) {
        var += (Plane(x + (b * channels + c) * plane, plane).template cast<double>() - mean).square().sum();
      }
      const double unbiased = var / static_cast<double>(count - 1);
      var /= static_cast<double>(count);
      auto& rm = state.running_mean[static_cast<std::size_t>(c)];
      auto& rv = state.running_var[static_cast<std::size_t>(c)];
      rm = static_cast<Scalar>(kBatchNormMomentum * static_cast<double>(rm) + (1.0 - kBatchNormMomentum) * mean);
      rv = static_cast<Scalar>(kBatchNormMomentum * static_cast<double>(rv) +
                               (1.0 - kBatchNormMomentum) * unbiased);
    } else {
      mean = static_cast<double>(state.running_mean[static_cast<std::size_t>(c)]);
      var = static_cast<double>(state.running_var[static_cast<std::size_t>(c)]);
    }
    const Scalar mu = static_cast<Scalar>(mean);
    const Scalar inv = static_cast<Scalar>(1.0 / std::sqrt(var + kBatchNormEps));
    (*inv_std)[static_cast<std::size_t>(c)] = inv;
    const Scalar g = (*gamma)[c], bt = (*beta)[c];
    for (Index b = 0; b < batch; ++b) {
      const Index off = (b * channels + c) * plane;
      MutPlane xhat(normalized->data() + off, plane);
      xhat = (Plane(x + off, plane) - mu) * inv;
      MutPlane(out->data() + off, plane) = g * xhat + bt;
    }
  }

  if (tracks(tape, {input.get(), gamma.get(), beta.get()})) {
    out->enable_grad();
    tape->record([input, gamma, beta, out, normalized, inv_std, mode, batch, channels, plane, count] {
      const Scalar* dy = out->grad_data();
      const Scalar* xhat = normalized->data();
      for (Index c = 0; c < channels; ++c) {
        double sum_dy = 0.0;
        double sum_dy_xhat = 0.0;
        for (Index b = 0; b < batch; ++b) {
          const Index off = (b * channels + c) * plane;
          const auto g = Plane(dy + off, plane).template cast<double>();
          sum_dy += g.sum();
          sum_dy_xhat += (g * Plane(xhat + off, plane).template cast<double>()).sum();
        }
        if (gamma->requires_grad()) gamma->grad()[static_cast<std::size_t>(c)] += static_cast<Scalar>(sum_dy_xhat);
        if (beta->requires_grad()) beta->grad()[static_cast<std::size_t>(c)] += static_cast<Scalar>(sum_dy);
        if (!input->requires_grad()) continue;
        const Scalar scale = (*gamma)[c] * (*inv_std)[static_cast<std::size_t>(c)];
        const Scalar mean_dy = static_cast<Scalar>(sum_dy / static_cast<double>(count));
        const Scalar mean_dy_xhat = static_cast<Scalar>(sum_dy_xhat / static_cast<double>(count));
        for (Index b = 0; b < batch; ++b) {
          const Index off = (b * channels + c) * plane;
          MutPlane dx(input->grad_data() + off, plane);
          if (mode == Mode::train) {
            dx += scale * (Plane(dy + off, plane) - mean_dy - Plane(xhat + off, plane) * mean_dy_xhat);
          } else {
            dx += scale * Plane(dy + off, plane);
          }
        }
      }
    });
  }
  return out;
}

/// max(0, x); the subgradient at 0 is 0.
template <typename Scalar>
TensorPtr<Scalar> relu(Tape<Scalar>* tape, const TensorPtr<Scalar>& input) {
  auto out = make_tensor<Scalar>(input->shape());
  const Index n = input->size();
  {
    const Scalar* x = input->data();
    Scalar* y = out->data();
    for (Index i = 0; i < n; ++i) y[i] = x[i] > Scalar(0) ? x[i] : Scalar(0);
  }
  if (tracks(tape, {input.get()})) {
    out->enable_grad();
    tape->record([input, out, n] {
      const Scalar* x = input->data();
      const Scalar* dy = out->grad_data();
      Scalar* dx = input->grad_data();
      for (Index i = 0; i < n; ++i) dx[i] += x[i] > Scalar(0) ? dy[i] : Scalar(0);
    });
  }
  return out;
}

/// Elementwise sum of two equally shaped tensors (the residual merge).
template <typename Scalar>
TensorPtr<Scalar> add(Tape<Scalar>* tape, const TensorPtr<Scalar>& lhs, const TensorPtr<Scalar>& rhs) {
  if (lhs->shape() != rhs->shape()) {
    throw ShapeError("add: " + shape_string(lhs->shape()) + " vs " + shape_string(rhs->shape()));
  }
  auto out = make_tensor<Scalar>(lhs->shape());
  const Index n = lhs->size();
  {
    const Scalar* a = lhs->data();
    const Scalar* b = rhs->data();
    Scalar* y = out->data();
    for (Index i = 0; i < n; ++i) y[i] = a[i] + b[i];
  }
  if (tracks(tape, {lhs.get(), rhs.get()})) {
    out->enable_grad();
    tape->record([lhs, rhs, out, n] {
      const Scalar* dy = out->grad_data();
      for (const auto& operand : {lhs, rhs}) {
        if (!operand->requires_grad()) continue;
        Scalar* dx = operand->grad_data();
        for (Index i = 0; i < n; ++i) dx[i] += dy[i];
      }
    });
  }
  return out;
}

/// Per-channel spatial mean: [B,C,H,W] -> [B,C].
template <typename Scalar>
TensorPtr<Scalar> global_avg_pool(Tape<Scalar>* tape, const TensorPtr<Scalar>& input) {
  detail::require_rank(input->shape(), 4, "global_avg_pool", "input");
  const Index rows = input->dim(0) * input->dim(1);
  const Index plane = input->dim(2) * input->dim(3);
  auto out = make_tensor<Scalar>(Shape{input->dim(0), input->dim(1)});
  for (Index r = 0; r < rows; ++r) {
    double sum = 0.0;
    for (Index i = 0; i < plane; ++i) sum += static_cast<double>((*input)[r * plane + i]);
    (*out)[r] = static_cast<Scalar>(sum / static_cast<double>(plane));
  }
  if (tracks(tape, {input.get()})) {
    out->enable_grad();
    tape->record([input, out, rows, plane] {
      auto dx = input->grad();
      const Scalar inv = Scalar(1) / static_cast<Scalar>(plane);
      for (Index r = 0; r < rows; ++r) {
        const Scalar g = out->grad()[static_cast<std::size_t>(r)] * inv;
        for (Index i = 0; i < plane; ++i) dx[static_cast<std::size_t>(r * plane + i)] += g;
      }
    });
  }
  return out;
}

/// Affine map: [B,Din] x [Dout,Din]^T + [Dout] -> [B,Dout]. `bias` may be null.
template <typename Scalar>
TensorPtr<Scalar> linear(Tape<Scalar>* tape, const TensorPtr<Scalar>& input, const TensorPtr<Scalar>& weight,
                         const TensorPtr<Scalar>& bias) {
  detail::require_rank(input->shape(), 2, "linear", "input");
  detail::require_rank(weight->shape(), 2, "linear", "weight");
  const Index batch = input->dim(0), in = input->dim(1), outs = weight->dim(0);
  if (weight->dim(1) != in) {
    throw ShapeError("linear: input " + shape_string(input->shape()) + " does not match weight " +
                     shape_string(weight->shape()));
  }
  if (bias && bias->size() != outs) {
    throw ShapeError("linear: bias " + shape_string(bias->shape()) + " does not match weight " +
                     shape_string(weight->shape()));
  }
  auto out = make_tensor<Scalar>(Shape{batch, outs});
  auto y = out->matrix(batch, outs);
  y.noalias() = input->matrix(batch, in) * weight->matrix(outs, in).transpose();
  if (bias) {
    for (Index b = 0; b < batch; ++b)
      for (Index o = 0; o < outs; ++o) y(b, o) += (*bias)[o];
  }
  if (tracks(tape, {input.get(), weight.get(), bias.get()})) {
    out->enable_grad();
    tape->record([input, weight, bias, out, batch, in, outs] {
      const auto dy = out->grad_matrix(batch, outs);
      if (input->requires_grad()) input->grad_matrix(batch, in).noalias() += dy * weight->matrix(outs, in);
      if (weight->requires_grad()) {
        weight->grad_matrix(outs, in).noalias() += dy.transpose() * input->matrix(batch, in);
      }
      if (bias && bias->requires_grad()) {
        for (Index b = 0; b < batch; ++b)
          for (Index o = 0; o < outs; ++o) bias->grad()[static_cast<std::size_t>(o)] += dy(b, o);
      }
    });
  }
  return out;
}

/// Row-wise softmax of logits / temperature, computed with max subtraction.
template <typename Scalar>
TensorPtr<Scalar> softmax_t(Tape<Scalar>* tape, const TensorPtr<Scalar>& logits, double temperature) {
  detail::require_rank(logits->shape(), 2, "softmax", "logits");
  if (!(temperature > 0.0)) throw ParameterError("softmax: temperature must be positive");
  const Index rows = logits->dim(0), n = logits->dim(1);
  auto out = make_tensor<Scalar>(logits->shape());
  for (Index r = 0; r < rows; ++r) {
    const Scalar* x = logits->data() + r * n;
    double top = static_cast<double>(x[0]) / temperature;
    for (Index j = 1; j < n; ++j) top = std::max(top, static_cast<double>(x[j]) / temperature);
    double total = 0.0;
    std::vector<double> e(static_cast<std::size_t>(n));
    for (Index j = 0; j < n; ++j) total += e[static_cast<std::size_t>(j)] = std::exp(static_cast<double>(x[j]) / temperature - top);
    for (Index j = 0; j < n; ++j) (*out)[r * n + j] = static_cast<Scalar>(e[static_cast<std::size_t>(j)] / total);
  }
  if (tracks(tape, {logits.get()})) {
    out->enable_grad();
    tape->record([logits, out, rows, n, temperature] {
      for (Index r = 0; r < rows; ++r) {
        double dot = 0.0;
        for (Index j = 0; j < n; ++j) {
          dot += static_cast<double>(out->grad()[static_cast<std::size_t>(r * n + j)]) * (*out)[r * n + j];
        }
        for (Index j = 0; j < n; ++j) {
          const auto k = static_cast<std::size_t>(r * n + j);
          const double s = (*out)[r * n + j];
          logits->grad()[k] += static_cast<Scalar>(s * (static_cast<double>(out->grad()[k]) - dot) / temperature);
        }
      }
    });
  }
  return out;
}

/// Sum of all entries as a rank-1 scalar.
template <typename Scalar>
TensorPtr<Scalar> sum(Tape<Scalar>* tape, const TensorPtr<Scalar>& input) {
  double total = 0.0;
  for (Scalar v : input->values()) total += static_cast<double>(v);
  auto out = make_tensor<Scalar>(Tensor<Scalar>::scalar(static_cast<Scalar>(total)));
  if (tracks(tape, {input.get()})) {
    out->enable_grad();
    tape->record([input, out] {
      const Scalar g = out->grad()[0];
      for (auto& dx : input->grad()) dx += g;
    });
  }
  return out;
}

/// Σ_k weights[k] * terms[k] over scalar terms. Zero-weight terms still
/// receive a (zero) gradient contribution but never alter the value.
template <typename Scalar>
TensorPtr<Scalar> weighted_sum(Tape<Scalar>* tape, const std::vector<TensorPtr<Scalar>>& terms,
                               const std::vector<double>& weights) {
  if (terms.size() != weights.size()) throw ContractError("weighted_sum: terms and weights differ in length");
  Scalar total(0);
  bool tracked = false;
  for (std::size_t k = 0; k < terms.size(); ++k) {
    total += static_cast<Scalar>(weights[k]) * terms[k]->item();
    tracked = tracked || tracks(tape, {terms[k].get()});
  }
  auto out = make_tensor<Scalar>(Tensor<Scalar>::scalar(total));
  if (tracked) {
    out->enable_grad();
    tape->record([terms, weights, out] {
      for (std::size_t k = 0; k < terms.size(); ++k) {
        if (terms[k]->requires_grad()) terms[k]->grad()[0] += static_cast<Scalar>(weights[k]) * out->grad()[0];
      }
    });
  }
  return out;
}

}  // namespace lrdb
