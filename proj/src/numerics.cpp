#include "hytune/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

namespace hytune {

std::string shape_string(const std::vector<std::size_t>& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    out << (i ? "," : "") << shape[i];
  }
  out << ']';
  return out.str();
}

namespace {

void require_finite(double x, const char* what) {
  if (!std::isfinite(x)) {
    throw ValidationError(std::string(what) + ": non-finite input");
  }
}

void require_same_length(std::size_t a, std::size_t b, const char* what) {
  if (a != b) {
    throw ValidationError(std::string(what) + ": length mismatch (" + std::to_string(a) +
                          " vs " + std::to_string(b) + ")");
  }
}

}  // namespace

double gelu(double x) {
  require_finite(x, "gelu");
  return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2));
}

double gelu_grad(double x) {
  require_finite(x, "gelu_grad");
  const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

double gelu_tanh(double x) {
  require_finite(x, "gelu_tanh");
  const double c = std::sqrt(2.0 / std::numbers::pi);
  return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x)));
}

Tensor gelu(const Tensor& x) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = gelu(x[i]);
  }
  return out;
}

void softmax_inplace(std::span<double> v) {
  if (v.empty()) {
    throw ValidationError("softmax: empty vector");
  }
  const double peak = *std::max_element(v.begin(), v.end());
  if (!std::isfinite(peak)) {
    throw ValidationError("softmax: non-finite input");
  }
  double total = 0.0;
  for (double& x : v) {
    x = std::exp(x - peak);
    total += x;
  }
  const double inv = 1.0 / total;
  for (double& x : v) {
    x *= inv;
  }
}

std::vector<double> softmax(std::span<const double> v) {
  for (double x : v) {
    require_finite(x, "softmax");
  }
  std::vector<double> out(v.begin(), v.end());
  softmax_inplace(out);
  return out;
}

std::vector<double> softmax_backward(std::span<const double> y, std::span<const double> dy) {
  require_same_length(y.size(), dy.size(), "softmax_backward");
  double dot = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    dot += y[i] * dy[i];
  }
  std::vector<double> dx(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) {
    dx[i] = y[i] * (dy[i] - dot);
  }
  return dx;
}

double layer_norm_row(std::span<const double> v, std::span<const double> gain,
                      std::span<const double> bias, double eps, std::span<double> out,
                      std::span<double> normalized) {
  const std::size_t n = v.size();
  double mean = 0.0;
  for (double x : v) {
    mean += x;
  }
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (double x : v) {
    var += (x - mean) * (x - mean);
  }
  var /= static_cast<double>(n);
  const double denom = var + eps;
  // Zero variance with eps = 0: the centered input is all zeros, so the
  // normalized row is defined as zeros.
  const double rstd = denom > 0.0 ? 1.0 / std::sqrt(denom) : 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double xhat = (v[i] - mean) * rstd;
    normalized[i] = xhat;
    out[i] = gain[i] * xhat + bias[i];
  }
  return rstd;
}

void layer_norm_row_backward(std::span<const double> dy, std::span<const double> normalized,
                             double rstd, std::span<const double> gain, std::span<double> dv,
                             std::span<double> dgain, std::span<double> dbias) {
  const std::size_t n = dy.size();
  double mean_dxhat = 0.0;
  double mean_dxhat_xhat = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dxhat = dy[i] * gain[i];
    dgain[i] += dy[i] * normalized[i];
    dbias[i] += dy[i];
    mean_dxhat += dxhat;
    mean_dxhat_xhat += dxhat * normalized[i];
  }
  mean_dxhat /= static_cast<double>(n);
  mean_dxhat_xhat /= static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double dxhat = dy[i] * gain[i];
    dv[i] = rstd * (dxhat - mean_dxhat - normalized[i] * mean_dxhat_xhat);
  }
}

std::vector<double> layer_norm(std::span<const double> v, std::span<const double> gain,
                               std::span<const double> bias, double eps) {
  require_same_length(v.size(), gain.size(), "layer_norm gain");
  require_same_length(v.size(), bias.size(), "layer_norm bias");
  if (v.empty()) {
    throw ValidationError("layer_norm: empty vector");
  }
  for (double x : v) {
    require_finite(x, "layer_norm");
  }
  std::vector<double> out(v.size());
  std::vector<double> normalized(v.size());
  layer_norm_row(v, gain, bias, eps, out, normalized);
  return out;
}

LayerNormGrads layer_norm_backward(std::span<const double> v, std::span<const double> gain,
                                   double eps, std::span<const double> dy) {
  require_same_length(v.size(), gain.size(), "layer_norm_backward gain");
  require_same_length(v.size(), dy.size(), "layer_norm_backward dy");
  const std::vector<double> zero_bias(v.size(), 0.0);
  std::vector<double> out(v.size());
  std::vector<double> normalized(v.size());
  const double rstd = layer_norm_row(v, gain, zero_bias, eps, out, normalized);
  LayerNormGrads grads{std::vector<double>(v.size()), std::vector<double>(v.size(), 0.0),
                       std::vector<double>(v.size(), 0.0)};
  layer_norm_row_backward(dy, normalized, rstd, gain, grads.dv, grads.dgain, grads.dbias);
  return grads;
}

double cross_entropy(std::span<const double> logits, std::size_t target) {
  if (target >= logits.size()) {
    throw ValidationError("cross_entropy: target " + std::to_string(target) +
                          " out of range for " + std::to_string(logits.size()) + " logits");
  }
  const double peak = *std::max_element(logits.begin(), logits.end());
  double total = 0.0;
  for (double x : logits) {
    total += std::exp(x - peak);
  }
  // log-sum-exp minus the target logit; clamp rounding below zero.
  return std::max(0.0, std::log(total) + peak - logits[target]);
}

std::vector<double> cross_entropy_grad(std::span<const double> logits, std::size_t target) {
  if (target >= logits.size()) {
    throw ValidationError("cross_entropy_grad: target out of range");
  }
  std::vector<double> grad(logits.begin(), logits.end());
  softmax_inplace(grad);
  grad[target] -= 1.0;
  return grad;
}

// ---------------------------------------------------------------------------

void matmul(ConstMatrix a, ConstMatrix b, Matrix out) {
  std::fill(out.data, out.data + out.rows * out.cols, 0.0);
  for (std::size_t i = 0; i < a.rows; ++i) {
    double* orow = out.data + i * out.cols;
    const double* arow = a.data + i * a.cols;
    for (std::size_t k = 0; k < a.cols; ++k) {
      const double aik = arow[k];
      if (aik == 0.0) {
        continue;
      }
      const double* brow = b.data + k * b.cols;
      for (std::size_t j = 0; j < b.cols; ++j) {
        orow[j] += aik * brow[j];
      }
    }
  }
}

void matmul_bt(ConstMatrix a, ConstMatrix b, Matrix out) {
  for (std::size_t i = 0; i < a.rows; ++i) {
    const double* arow = a.data + i * a.cols;
    double* orow = out.data + i * out.cols;
    for (std::size_t j = 0; j < b.rows; ++j) {
      const double* brow = b.data + j * b.cols;
      double acc = 0.0;
      for (std::size_t k = 0; k < a.cols; ++k) {
        acc += arow[k] * brow[k];
      }
      orow[j] = acc;
    }
  }
}

void matmul_at_acc(ConstMatrix a, ConstMatrix b, Matrix out) {
  for (std::size_t r = 0; r < a.rows; ++r) {
    const double* arow = a.data + r * a.cols;
    const double* brow = b.data + r * b.cols;
    for (std::size_t i = 0; i < a.cols; ++i) {
      const double ai = arow[i];
      if (ai == 0.0) {
        continue;
      }
      double* orow = out.data + i * out.cols;
      for (std::size_t j = 0; j < b.cols; ++j) {
        orow[j] += ai * brow[j];
      }
    }
  }
}

void add_row_bias(Matrix out, std::span<const double> bias) {
  for (std::size_t i = 0; i < out.rows; ++i) {
    double* row = out.data + i * out.cols;
    for (std::size_t j = 0; j < out.cols; ++j) {
      row[j] += bias[j];
    }
  }
}

void column_sum_acc(ConstMatrix d, std::span<double> dbias) {
  for (std::size_t i = 0; i < d.rows; ++i) {
    const double* row = d.data + i * d.cols;
    for (std::size_t j = 0; j < d.cols; ++j) {
      dbias[j] += row[j];
    }
  }
}

// ---------------------------------------------------------------------------

OptimizerState OptimizerState::zeros_like(std::span<const Tensor* const> params) {
  OptimizerState state;
  state.m.reserve(params.size());
  state.v.reserve(params.size());
  for (const Tensor* p : params) {
    state.m.emplace_back(p->shape());
    state.v.emplace_back(p->shape());
  }
  return state;
}

void adam_step(std::span<Tensor* const> params, std::span<const Tensor* const> grads,
               OptimizerState& state, const AdamHyper& hyper, std::span<const bool> decay) {
  if (params.size() != grads.size() || params.size() != state.m.size() ||
      params.size() != state.v.size()) {
    throw ValidationError("adam_step: parameter, gradient and state counts differ");
  }
  if (!decay.empty() && decay.size() != params.size()) {
    throw ValidationError("adam_step: decay mask length differs from parameter count");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i]->same_shape(*grads[i]) || !params[i]->same_shape(state.m[i]) ||
        !params[i]->same_shape(state.v[i])) {
      throw ValidationError("adam_step: shape mismatch at tensor " + std::to_string(i) + " (" +
                            shape_string(params[i]->shape()) + " vs " +
                            shape_string(grads[i]->shape()) + ")");
    }
  }
  if (hyper.lr < 0.0) {
    throw ValidationError("adam_step: negative learning rate");
  }

  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(hyper.beta1, t);
  const double bc2 = 1.0 - std::pow(hyper.beta2, t);

  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i]->data();
    auto g = grads[i]->data();
    auto m = state.m[i].data();
    auto v = state.v[i].data();
    const double wd = (decay.empty() || decay[i]) ? hyper.weight_decay : 0.0;
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = hyper.beta1 * m[j] + (1.0 - hyper.beta1) * g[j];
      v[j] = hyper.beta2 * v[j] + (1.0 - hyper.beta2) * g[j] * g[j];
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      p[j] -= hyper.lr * wd * p[j];
      p[j] -= hyper.lr * mhat / (std::sqrt(vhat) + hyper.eps);
    }
  }
}

double global_norm(std::span<const Tensor* const> grads) {
  double sq = 0.0;
  for (const Tensor* g : grads) {
    for (double x : g->data()) {
      sq += x * x;
    }
  }
  return std::sqrt(sq);
}

ClipResult clip_grad_norm(std::span<Tensor* const> grads, double max_norm) {
  if (!(max_norm > 0.0)) {
    throw ValidationError("clip_grad_norm: max_norm must be positive");
  }
  std::vector<const Tensor*> view(grads.begin(), grads.end());
  ClipResult result;
  result.norm = global_norm(view);
  if (!std::isfinite(result.norm)) {
    throw ValidationError("clip_grad_norm: non-finite gradient");
  }
  if (result.norm <= max_norm) {
    return result;
  }
  result.scale = max_norm / result.norm;
  for (Tensor* g : grads) {
    for (double& x : g->data()) {
      x *= result.scale;
    }
  }
  return result;
}

// ---------------------------------------------------------------------------

std::string to_string(DecayStyle style) {
  return style == DecayStyle::cosine ? "cosine" : "constant";
}

DecayStyle parse_decay_style(const std::string& text) {
  if (text == "cosine") {
    return DecayStyle::cosine;
  }
  if (text == "constant") {
    return DecayStyle::constant;
  }
  throw ValidationError("unknown decay style '" + text + "' (expected cosine or constant)");
}

void Schedule::validate() const {
  if (!(peak_lr > 0.0) || !(min_lr > 0.0)) {
    throw ValidationError("schedule: learning rates must be positive");
  }
  if (min_lr > peak_lr) {
    throw ValidationError("schedule: min_lr exceeds peak_lr");
  }
  if (warmup_tokens < 0.0 || decay_tokens < 0.0) {
    throw ValidationError("schedule: token counts must be non-negative");
  }
  if (style == DecayStyle::cosine && !(warmup_tokens < decay_tokens)) {
    throw ValidationError("schedule: cosine decay requires warmup_tokens < decay_tokens");
  }
}

double lr_at(const Schedule& schedule, double tokens_seen) {
  const double n = std::max(0.0, tokens_seen);
  if (n < schedule.warmup_tokens) {
    return schedule.peak_lr * n / schedule.warmup_tokens;
  }
  if (schedule.style == DecayStyle::constant) {
    return schedule.peak_lr;
  }
  if (n >= schedule.decay_tokens) {
    return schedule.min_lr;
  }
  const double progress =
      (n - schedule.warmup_tokens) / (schedule.decay_tokens - schedule.warmup_tokens);
  const double drop = 0.5 * (1.0 - std::cos(std::numbers::pi * progress));
  return schedule.peak_lr - (schedule.peak_lr - schedule.min_lr) * drop;
}

}  // namespace hytune
