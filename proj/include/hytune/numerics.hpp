#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "hytune/tensor.hpp"

namespace hytune {

// ---------------------------------------------------------------------------
// Elementwise and row kernels

/// Exact GELU, x * Phi(x) with Phi the standard normal CDF.
double gelu(double x);
/// d/dx of the exact GELU.
double gelu_grad(double x);
/// tanh approximation of GELU. Not used by the model.
double gelu_tanh(double x);
Tensor gelu(const Tensor& x);

std::vector<double> softmax(std::span<const double> v);
/// In-place, numerically stable softmax of a row.
void softmax_inplace(std::span<double> v);
/// Vector-Jacobian product of softmax given its output y and upstream dy.
std::vector<double> softmax_backward(std::span<const double> y, std::span<const double> dy);

std::vector<double> layer_norm(std::span<const double> v, std::span<const double> gain,
                               std::span<const double> bias, double eps);

/// Row layer norm that also records the normalized input for the backward pass.
/// Returns 1/sqrt(var + eps).
double layer_norm_row(std::span<const double> v, std::span<const double> gain,
                      std::span<const double> bias, double eps, std::span<double> out,
                      std::span<double> normalized);

/// Backward of layer_norm_row. Accumulates into dgain/dbias, writes dv.
void layer_norm_row_backward(std::span<const double> dy, std::span<const double> normalized,
                             double rstd, std::span<const double> gain, std::span<double> dv,
                             std::span<double> dgain, std::span<double> dbias);

struct LayerNormGrads {
  std::vector<double> dv;
  std::vector<double> dgain;
  std::vector<double> dbias;
};

LayerNormGrads layer_norm_backward(std::span<const double> v, std::span<const double> gain,
                                   double eps, std::span<const double> dy);

/// -log softmax(logits)[target].
double cross_entropy(std::span<const double> logits, std::size_t target);
/// Gradient of cross_entropy with respect to the logits: softmax - onehot(target).
std::vector<double> cross_entropy_grad(std::span<const double> logits, std::size_t target);

// ---------------------------------------------------------------------------
// Matrix products on row-major buffers

struct ConstMatrix {
  const double* data;
  std::size_t rows;
  std::size_t cols;
};

struct Matrix {
  double* data;
  std::size_t rows;
  std::size_t cols;

  operator ConstMatrix() const { return {data, rows, cols}; }
};

inline ConstMatrix view(const Tensor& t) { return {t.data().data(), t.dim(0), t.dim(1)}; }
inline Matrix view(Tensor& t) { return {t.data().data(), t.dim(0), t.dim(1)}; }

/// out = a * b
void matmul(ConstMatrix a, ConstMatrix b, Matrix out);
/// out = a * b^T
void matmul_bt(ConstMatrix a, ConstMatrix b, Matrix out);
/// out += a^T * b
void matmul_at_acc(ConstMatrix a, ConstMatrix b, Matrix out);
/// Adds bias to every row of out.
void add_row_bias(Matrix out, std::span<const double> bias);
/// dbias += column sums of d.
void column_sum_acc(ConstMatrix d, std::span<double> dbias);

// ---------------------------------------------------------------------------
// Optimization

struct AdamHyper {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

struct OptimizerState {
  std::uint64_t step = 0;
  std::vector<Tensor> m;
  std::vector<Tensor> v;

  /// Zero moments shaped like params.
  static OptimizerState zeros_like(std::span<const Tensor* const> params);
};

/// One bias-corrected Adam step with decoupled weight decay.
/// `decay` selects which tensors receive weight decay; empty means all of them.
void adam_step(std::span<Tensor* const> params, std::span<const Tensor* const> grads,
               OptimizerState& state, const AdamHyper& hyper, std::span<const bool> decay = {});

struct ClipResult {
  double norm = 0.0;   // global norm before clipping
  double scale = 1.0;  // factor applied to every gradient
};

ClipResult clip_grad_norm(std::span<Tensor* const> grads, double max_norm);

double global_norm(std::span<const Tensor* const> grads);

// ---------------------------------------------------------------------------
// Learning-rate schedules measured in tokens

enum class DecayStyle { cosine, constant };

std::string to_string(DecayStyle style);
DecayStyle parse_decay_style(const std::string& text);

struct Schedule {
  double peak_lr = 0.0;
  double min_lr = 0.0;
  double warmup_tokens = 0.0;
  double decay_tokens = 0.0;
  DecayStyle style = DecayStyle::cosine;

  void validate() const;
};

/// Linear warmup to the peak, then cosine from the warmup end to decay_tokens
/// (held at min_lr beyond), or constant at the peak.
double lr_at(const Schedule& schedule, double tokens_seen);

}  // namespace hytune
