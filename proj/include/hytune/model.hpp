#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "hytune/tensor.hpp"
#include "hytune/token.hpp"

namespace hytune {

inline constexpr double kLayerNormEps = 1e-5;

struct ModelConfig {
  std::size_t layers = 2;
  std::size_t hidden_dim = 32;
  std::size_t attention_heads = 2;
  std::size_t vocab_size = 259;
  /// Rows allocated in the embedding table; >= vocab_size, padded for alignment.
  std::size_t embedding_rows = 259;
  std::size_t seq_len = 64;
  bool tied_embeddings = true;

  std::size_t head_dim() const { return hidden_dim / attention_heads; }
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct LayerParams {
  Tensor input_ln_gain, input_ln_bias;  // [h]
  Tensor qkv_weight, qkv_bias;          // [h, 3h], [3h]; columns are [q | k | v], head-major
  Tensor attn_out_weight, attn_out_bias;  // [h, h], [h]
  Tensor post_ln_gain, post_ln_bias;    // [h]
  Tensor mlp_up_weight, mlp_up_bias;    // [h, 4h], [4h]
  Tensor mlp_down_weight, mlp_down_bias;  // [4h, h], [h]

  friend bool operator==(const LayerParams&, const LayerParams&) = default;
};

struct NamedTensor {
  std::string name;
  Tensor* tensor;
};

struct ConstNamedTensor {
  std::string name;
  const Tensor* tensor;
};

struct ModelParams {
  Tensor embedding;  // [embedding_rows, h]; also the output projection when tied
  Tensor embedding_ln_gain, embedding_ln_bias;
  std::vector<LayerParams> layers;
  Tensor final_ln_gain, final_ln_bias;
  Tensor lm_head;  // [embedding_rows, h] when untied, empty otherwise

  /// Every tensor zero, including layer-norm gains.
  static ModelParams zeros(const ModelConfig& config);
  /// Seeded init: N(0, 0.02) embeddings, N(0, 0.02/sqrt(2L)) projections,
  /// unit LN gains, zero biases.
  static ModelParams init(const ModelConfig& config, std::uint64_t seed);

  /// Tensors in canonical order (checkpoint order, optimizer order).
  std::vector<NamedTensor> named();
  std::vector<ConstNamedTensor> named() const;
  std::vector<Tensor*> tensors();
  std::vector<const Tensor*> tensors() const;

  void set_zero();
  std::size_t total_size() const;

  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

/// ALiBi head slopes, including the non-power-of-two extension.
std::vector<double> alibi_slopes(std::size_t n_heads);

/// [head, query, key] bias: -slope * (q - k) for k <= q, -infinity for k > q.
Tensor alibi_bias(std::size_t seq_len, std::size_t n_heads);

/// Next-token logits [T, vocab_size]; row t conditions on tokens 0..t.
Tensor forward_logits(const ModelParams& params, const ModelConfig& config,
                      std::span<const Token> tokens);

/// log p(w_2..w_T | w_1): sum of next-token log-probabilities, first token context-only.
double sequence_log_prob(const ModelParams& params, const ModelConfig& config,
                         std::span<const Token> tokens);

struct MaskedLoss {
  double sum = 0.0;          // summed cross-entropy over scored positions
  std::uint64_t count = 0;   // scored positions
};

/// Position t >= 1 is scored when mask[t] != 0, predicting tokens[t] from logits row t-1.
MaskedLoss masked_loss(const ModelParams& params, const ModelConfig& config,
                       std::span<const Token> tokens, std::span<const std::uint8_t> mask);

/// Same as masked_loss and accumulates d(sum)/d(params) into grads.
MaskedLoss masked_loss_and_grad(const ModelParams& params, const ModelConfig& config,
                                std::span<const Token> tokens,
                                std::span<const std::uint8_t> mask, ModelParams& grads);

/// Exact parameter total. Tied embeddings contribute a single matrix.
std::uint64_t count_params(const ModelConfig& config);

/// Greedy continuation, keeping the last seq_len tokens as context.
TokenSequence generate_greedy(const ModelParams& params, const ModelConfig& config,
                              TokenSequence prompt, std::size_t new_tokens);

}  // namespace hytune
