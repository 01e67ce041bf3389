#include "hytune/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "hytune/numerics.hpp"
#include "hytune/rng.hpp"

namespace hytune {

void ModelConfig::validate() const {
  if (layers == 0 || hidden_dim == 0 || attention_heads == 0 || vocab_size == 0 || seq_len == 0) {
    throw ValidationError("model config: layers, hidden_dim, attention_heads, vocab_size and "
                          "seq_len must all be positive");
  }
  if (hidden_dim % attention_heads != 0) {
    throw ValidationError("model config: hidden_dim " + std::to_string(hidden_dim) +
                          " is not divisible by attention_heads " +
                          std::to_string(attention_heads));
  }
  if (embedding_rows < vocab_size) {
    throw ValidationError("model config: embedding_rows " + std::to_string(embedding_rows) +
                          " is smaller than vocab_size " + std::to_string(vocab_size));
  }
}

// ---------------------------------------------------------------------------
// Parameters

namespace {

LayerParams make_layer(std::size_t h) {
  LayerParams l;
  l.input_ln_gain = Tensor({h});
  l.input_ln_bias = Tensor({h});
  l.qkv_weight = Tensor({h, 3 * h});
  l.qkv_bias = Tensor({3 * h});
  l.attn_out_weight = Tensor({h, h});
  l.attn_out_bias = Tensor({h});
  l.post_ln_gain = Tensor({h});
  l.post_ln_bias = Tensor({h});
  l.mlp_up_weight = Tensor({h, 4 * h});
  l.mlp_up_bias = Tensor({4 * h});
  l.mlp_down_weight = Tensor({4 * h, h});
  l.mlp_down_bias = Tensor({h});
  return l;
}

void fill_normal(Tensor& t, Rng& rng, double stddev) {
  for (double& x : t.data()) {
    x = stddev * rng.normal();
  }
}

}  // namespace

ModelParams ModelParams::zeros(const ModelConfig& config) {
  config.validate();
  const std::size_t h = config.hidden_dim;
  ModelParams p;
  p.embedding = Tensor({config.embedding_rows, h});
  p.embedding_ln_gain = Tensor({h});
  p.embedding_ln_bias = Tensor({h});
  for (std::size_t i = 0; i < config.layers; ++i) {
    p.layers.push_back(make_layer(h));
  }
  p.final_ln_gain = Tensor({h});
  p.final_ln_bias = Tensor({h});
  if (!config.tied_embeddings) {
    p.lm_head = Tensor({config.embedding_rows, h});
  }
  return p;
}

ModelParams ModelParams::init(const ModelConfig& config, std::uint64_t seed) {
  ModelParams p = zeros(config);
  Rng rng(mix_seed(seed, 0x1417ULL));
  const double embed_std = 0.02;
  const double proj_std = 0.02 / std::sqrt(2.0 * static_cast<double>(config.layers));
  fill_normal(p.embedding, rng, embed_std);
  p.embedding_ln_gain.fill(1.0);
  for (LayerParams& l : p.layers) {
    l.input_ln_gain.fill(1.0);
    fill_normal(l.qkv_weight, rng, proj_std);
    fill_normal(l.attn_out_weight, rng, proj_std);
    l.post_ln_gain.fill(1.0);
    fill_normal(l.mlp_up_weight, rng, proj_std);
    fill_normal(l.mlp_down_weight, rng, proj_std);
  }
  p.final_ln_gain.fill(1.0);
  if (!config.tied_embeddings) {
    fill_normal(p.lm_head, rng, proj_std);
  }
  return p;
}

std::vector<NamedTensor> ModelParams::named() {
  std::vector<NamedTensor> out;
  out.push_back({"embedding", &embedding});
  out.push_back({"embedding_ln.gain", &embedding_ln_gain});
  out.push_back({"embedding_ln.bias", &embedding_ln_bias});
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string prefix = "layers." + std::to_string(i) + ".";
    LayerParams& l = layers[i];
    out.push_back({prefix + "input_ln.gain", &l.input_ln_gain});
    out.push_back({prefix + "input_ln.bias", &l.input_ln_bias});
    out.push_back({prefix + "attn.qkv.weight", &l.qkv_weight});
    out.push_back({prefix + "attn.qkv.bias", &l.qkv_bias});
    out.push_back({prefix + "attn.out.weight", &l.attn_out_weight});
    out.push_back({prefix + "attn.out.bias", &l.attn_out_bias});
    out.push_back({prefix + "post_ln.gain", &l.post_ln_gain});
    out.push_back({prefix + "post_ln.bias", &l.post_ln_bias});
    out.push_back({prefix + "mlp.up.weight", &l.mlp_up_weight});
    out.push_back({prefix + "mlp.up.bias", &l.mlp_up_bias});
    out.push_back({prefix + "mlp.down.weight", &l.mlp_down_weight});
    out.push_back({prefix + "mlp.down.bias", &l.mlp_down_bias});
  }
  out.push_back({"final_ln.gain", &final_ln_gain});
  out.push_back({"final_ln.bias", &final_ln_bias});
  if (lm_head.size() > 0) {
    out.push_back({"lm_head", &lm_head});
  }
  return out;
}

std::vector<ConstNamedTensor> ModelParams::named() const {
  std::vector<ConstNamedTensor> out;
  for (const NamedTensor& n : const_cast<ModelParams*>(this)->named()) {
    out.push_back({n.name, n.tensor});
  }
  return out;
}

std::vector<Tensor*> ModelParams::tensors() {
  std::vector<Tensor*> out;
  for (const NamedTensor& n : named()) {
    out.push_back(n.tensor);
  }
  return out;
}

std::vector<const Tensor*> ModelParams::tensors() const {
  std::vector<const Tensor*> out;
  for (const ConstNamedTensor& n : named()) {
    out.push_back(n.tensor);
  }
  return out;
}

void ModelParams::set_zero() {
  for (Tensor* t : tensors()) {
    t->fill(0.0);
  }
}

std::size_t ModelParams::total_size() const {
  std::size_t n = 0;
  for (const Tensor* t : tensors()) {
    n += t->size();
  }
  return n;
}

std::uint64_t count_params(const ModelConfig& config) {
  config.validate();
  const std::uint64_t h = config.hidden_dim;
  const std::uint64_t rows = config.embedding_rows;
  const std::uint64_t per_layer = 12 * h * h + 13 * h;
  std::uint64_t total = rows * h + 2 * h + config.layers * per_layer + 2 * h;
  if (!config.tied_embeddings) {
    total += rows * h;
  }
  return total;
}

// ---------------------------------------------------------------------------
// ALiBi

std::vector<double> alibi_slopes(std::size_t n_heads) {
  if (n_heads == 0) {
    throw ValidationError("alibi_slopes: n_heads must be at least 1");
  }
  std::size_t base_count = 1;
  while (base_count * 2 <= n_heads) {
    base_count *= 2;
  }
  std::vector<double> slopes;
  slopes.reserve(n_heads);
  const double n = static_cast<double>(base_count);
  for (std::size_t i = 1; i <= base_count; ++i) {
    slopes.push_back(std::exp2(-8.0 * static_cast<double>(i) / n));
  }
  // Odd powers of the doubled-length sequence fill the remaining heads.
  for (std::size_t k = 1; slopes.size() < n_heads; k += 2) {
    slopes.push_back(std::exp2(-8.0 * static_cast<double>(k) / (2.0 * n)));
  }
  return slopes;
}

Tensor alibi_bias(std::size_t seq_len, std::size_t n_heads) {
  if (seq_len == 0) {
    throw ValidationError("alibi_bias: seq_len must be at least 1");
  }
  const std::vector<double> slopes = alibi_slopes(n_heads);
  Tensor bias({n_heads, seq_len, seq_len});
  const double masked = -std::numeric_limits<double>::infinity();
  for (std::size_t hd = 0; hd < n_heads; ++hd) {
    for (std::size_t q = 0; q < seq_len; ++q) {
      for (std::size_t k = 0; k < seq_len; ++k) {
        bias[(hd * seq_len + q) * seq_len + k] =
            k <= q ? -slopes[hd] * static_cast<double>(q - k) : masked;
      }
    }
  }
  return bias;
}

// ---------------------------------------------------------------------------
// Forward / backward

namespace {

struct RowNorm {
  Tensor normalized;         // [T, h]
  std::vector<double> rstd;  // [T]
};

struct LayerCache {
  Tensor input;    // [T, h]
  Tensor ln1_out;  // [T, h]
  RowNorm ln1;
  Tensor qkv;      // [T, 3h]
  Tensor probs;    // [H, T, T], zero above the diagonal
  Tensor ctx;      // [T, h]
  Tensor mid;      // [T, h] residual after attention
  Tensor ln2_out;  // [T, h]
  RowNorm ln2;
  Tensor up;       // [T, 4h] pre-activation
  Tensor act;      // [T, 4h]
};

struct ForwardCache {
  RowNorm embedding_ln;
  std::vector<LayerCache> layers;
  RowNorm final_ln;
  Tensor hidden;  // [T, h] final LN output
};

void validate_tokens(const ModelConfig& config, std::span<const Token> tokens) {
  if (tokens.empty()) {
    throw ValidationError("model: empty token sequence");
  }
  if (tokens.size() > config.seq_len) {
    throw ValidationError("model: sequence length " + std::to_string(tokens.size()) +
                          " exceeds seq_len " + std::to_string(config.seq_len));
  }
  for (Token t : tokens) {
    if (t >= config.vocab_size) {
      throw ValidationError("model: token " + std::to_string(t) + " >= vocab_size " +
                            std::to_string(config.vocab_size));
    }
  }
}

Tensor norm_rows(const Tensor& x, const Tensor& gain, const Tensor& bias, RowNorm& cache) {
  const std::size_t rows = x.dim(0);
  Tensor out(x.shape());
  cache.normalized = Tensor(x.shape());
  cache.rstd.assign(rows, 0.0);
  for (std::size_t t = 0; t < rows; ++t) {
    cache.rstd[t] = layer_norm_row(x.row(t), gain.data(), bias.data(), kLayerNormEps,
                                   out.row(t), cache.normalized.row(t));
  }
  return out;
}

/// Returns dx and accumulates the gain/bias gradients.
Tensor norm_rows_backward(const Tensor& dy, const RowNorm& cache, const Tensor& gain,
                          Tensor& dgain, Tensor& dbias) {
  Tensor dx(dy.shape());
  for (std::size_t t = 0; t < dy.dim(0); ++t) {
    layer_norm_row_backward(dy.row(t), cache.normalized.row(t), cache.rstd[t], gain.data(),
                            dx.row(t), dgain.data(), dbias.data());
  }
  return dx;
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  Tensor out({x.dim(0), weight.dim(1)});
  matmul(view(x), view(weight), view(out));
  add_row_bias(view(out), bias.data());
  return out;
}

void add_inplace(Tensor& a, const Tensor& b) {
  for (std::size_t i = 0; i < a.size(); ++i) {
    a[i] += b[i];
  }
}

void attention_forward(const ModelConfig& config, const std::vector<double>& slopes,
                       LayerCache& lc) {
  const std::size_t T = lc.qkv.dim(0);
  const std::size_t h = config.hidden_dim;
  const std::size_t H = config.attention_heads;
  const std::size_t d = config.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  lc.probs = Tensor({H, T, T});
  lc.ctx = Tensor({T, h});
  std::vector<double> scores(T);
  for (std::size_t hd = 0; hd < H; ++hd) {
    const std::size_t qo = hd * d;
    const std::size_t ko = h + hd * d;
    const std::size_t vo = 2 * h + hd * d;
    for (std::size_t t = 0; t < T; ++t) {
      const double* q = &lc.qkv.at(t, qo);
      for (std::size_t u = 0; u <= t; ++u) {
        const double* k = &lc.qkv.at(u, ko);
        double dot = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
          dot += q[i] * k[i];
        }
        scores[u] = dot * scale - slopes[hd] * static_cast<double>(t - u);
      }
      std::span<double> row(scores.data(), t + 1);
      softmax_inplace(row);
      double* p = &lc.probs[(hd * T + t) * T];
      double* out = &lc.ctx.at(t, qo);
      for (std::size_t u = 0; u <= t; ++u) {
        p[u] = row[u];
        const double* v = &lc.qkv.at(u, vo);
        for (std::size_t i = 0; i < d; ++i) {
          out[i] += row[u] * v[i];
        }
      }
    }
  }
}

Tensor attention_backward(const ModelConfig& config, const LayerCache& lc, const Tensor& dctx) {
  const std::size_t T = lc.qkv.dim(0);
  const std::size_t h = config.hidden_dim;
  const std::size_t H = config.attention_heads;
  const std::size_t d = config.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  Tensor dqkv({T, 3 * h});
  std::vector<double> dp(T);
  for (std::size_t hd = 0; hd < H; ++hd) {
    const std::size_t qo = hd * d;
    const std::size_t ko = h + hd * d;
    const std::size_t vo = 2 * h + hd * d;
    for (std::size_t t = 0; t < T; ++t) {
      const double* p = &lc.probs[(hd * T + t) * T];
      const double* dout = &dctx.at(t, qo);
      double weighted = 0.0;
      for (std::size_t u = 0; u <= t; ++u) {
        const double* v = &lc.qkv.at(u, vo);
        double* dv = &dqkv.at(u, vo);
        double acc = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
          acc += dout[i] * v[i];
          dv[i] += p[u] * dout[i];
        }
        dp[u] = acc;
        weighted += p[u] * acc;
      }
      const double* q = &lc.qkv.at(t, qo);
      double* dq = &dqkv.at(t, qo);
      for (std::size_t u = 0; u <= t; ++u) {
        const double ds = p[u] * (dp[u] - weighted) * scale;
        if (ds == 0.0) {
          continue;
        }
        const double* k = &lc.qkv.at(u, ko);
        double* dk = &dqkv.at(u, ko);
        for (std::size_t i = 0; i < d; ++i) {
          dq[i] += ds * k[i];
          dk[i] += ds * q[i];
        }
      }
    }
  }
  return dqkv;
}

void run_forward(const ModelParams& params, const ModelConfig& config,
                 std::span<const Token> tokens, ForwardCache& cache) {
  config.validate();
  validate_tokens(config, tokens);
  const std::size_t T = tokens.size();
  const std::size_t h = config.hidden_dim;

  Tensor x({T, h});
  for (std::size_t t = 0; t < T; ++t) {
    std::ranges::copy(params.embedding.row(tokens[t]), x.row(t).begin());
  }
  x = norm_rows(x, params.embedding_ln_gain, params.embedding_ln_bias, cache.embedding_ln);

  const std::vector<double> slopes = alibi_slopes(config.attention_heads);
  cache.layers.resize(config.layers);
  for (std::size_t l = 0; l < config.layers; ++l) {
    const LayerParams& lp = params.layers[l];
    LayerCache& lc = cache.layers[l];
    lc.input = x;
    lc.ln1_out = norm_rows(lc.input, lp.input_ln_gain, lp.input_ln_bias, lc.ln1);
    lc.qkv = linear(lc.ln1_out, lp.qkv_weight, lp.qkv_bias);
    attention_forward(config, slopes, lc);
    lc.mid = linear(lc.ctx, lp.attn_out_weight, lp.attn_out_bias);
    add_inplace(lc.mid, lc.input);
    lc.ln2_out = norm_rows(lc.mid, lp.post_ln_gain, lp.post_ln_bias, lc.ln2);
    lc.up = linear(lc.ln2_out, lp.mlp_up_weight, lp.mlp_up_bias);
    lc.act = Tensor(lc.up.shape());
    for (std::size_t i = 0; i < lc.up.size(); ++i) {
      lc.act[i] = gelu(lc.up[i]);
    }
    x = linear(lc.act, lp.mlp_down_weight, lp.mlp_down_bias);
    add_inplace(x, lc.mid);
  }
  cache.hidden = norm_rows(x, params.final_ln_gain, params.final_ln_bias, cache.final_ln);
}

const Tensor& output_matrix(const ModelParams& params, const ModelConfig& config) {
  return config.tied_embeddings ? params.embedding : params.lm_head;
}

Tensor& output_matrix(ModelParams& params, const ModelConfig& config) {
  return config.tied_embeddings ? params.embedding : params.lm_head;
}

void logits_row(const Tensor& out_matrix, std::size_t vocab, std::span<const double> hidden,
                std::span<double> logits) {
  matmul_bt({hidden.data(), 1, hidden.size()}, {out_matrix.data().data(), vocab, hidden.size()},
            {logits.data(), 1, vocab});
}

void backward(const ModelParams& params, const ModelConfig& config,
              std::span<const Token> tokens, const ForwardCache& cache, Tensor dhidden,
              ModelParams& grads) {
  Tensor dx = norm_rows_backward(dhidden, cache.final_ln, params.final_ln_gain,
                                 grads.final_ln_gain, grads.final_ln_bias);
  for (std::size_t l = config.layers; l-- > 0;) {
    const LayerParams& lp = params.layers[l];
    LayerParams& lg = grads.layers[l];
    const LayerCache& lc = cache.layers[l];

    // MLP branch; dx is also the gradient of the residual into `mid`.
    matmul_at_acc(view(lc.act), view(dx), view(lg.mlp_down_weight));
    column_sum_acc(view(dx), lg.mlp_down_bias.data());
    Tensor dact(lc.act.shape());
    matmul_bt(view(dx), view(lp.mlp_down_weight), view(dact));
    for (std::size_t i = 0; i < dact.size(); ++i) {
      dact[i] *= gelu_grad(lc.up[i]);
    }
    matmul_at_acc(view(lc.ln2_out), view(dact), view(lg.mlp_up_weight));
    column_sum_acc(view(dact), lg.mlp_up_bias.data());
    Tensor dln2(lc.ln2_out.shape());
    matmul_bt(view(dact), view(lp.mlp_up_weight), view(dln2));
    Tensor dmid = norm_rows_backward(dln2, lc.ln2, lp.post_ln_gain, lg.post_ln_gain,
                                     lg.post_ln_bias);
    add_inplace(dmid, dx);

    // Attention branch.
    matmul_at_acc(view(lc.ctx), view(dmid), view(lg.attn_out_weight));
    column_sum_acc(view(dmid), lg.attn_out_bias.data());
    Tensor dctx(lc.ctx.shape());
    matmul_bt(view(dmid), view(lp.attn_out_weight), view(dctx));
    const Tensor dqkv = attention_backward(config, lc, dctx);
    matmul_at_acc(view(lc.ln1_out), view(dqkv), view(lg.qkv_weight));
    column_sum_acc(view(dqkv), lg.qkv_bias.data());
    Tensor dln1(lc.ln1_out.shape());
    matmul_bt(view(dqkv), view(lp.qkv_weight), view(dln1));
    dx = norm_rows_backward(dln1, lc.ln1, lp.input_ln_gain, lg.input_ln_gain,
                            lg.input_ln_bias);
    add_inplace(dx, dmid);
  }
  const Tensor demb = norm_rows_backward(dx, cache.embedding_ln, params.embedding_ln_gain,
                                         grads.embedding_ln_gain, grads.embedding_ln_bias);
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    auto dst = grads.embedding.row(tokens[t]);
    auto src = demb.row(t);
    for (std::size_t i = 0; i < dst.size(); ++i) {
      dst[i] += src[i];
    }
  }
}

void validate_mask(std::span<const Token> tokens, std::span<const std::uint8_t> mask) {
  if (mask.size() != tokens.size()) {
    throw ValidationError("masked_loss: mask length " + std::to_string(mask.size()) +
                          " differs from token count " + std::to_string(tokens.size()));
  }
}

}  // namespace

Tensor forward_logits(const ModelParams& params, const ModelConfig& config,
                      std::span<const Token> tokens) {
  ForwardCache cache;
  run_forward(params, config, tokens, cache);
  const Tensor& out = output_matrix(params, config);
  Tensor logits({tokens.size(), config.vocab_size});
  matmul_bt(view(cache.hidden), {out.data().data(), config.vocab_size, config.hidden_dim},
            view(logits));
  return logits;
}

double sequence_log_prob(const ModelParams& params, const ModelConfig& config,
                         std::span<const Token> tokens) {
  if (tokens.size() < 2) {
    throw ValidationError("sequence_log_prob: need at least two tokens");
  }
  const Tensor logits = forward_logits(params, config, tokens);
  double total = 0.0;
  for (std::size_t t = 1; t < tokens.size(); ++t) {
    total -= cross_entropy(logits.row(t - 1), tokens[t]);
  }
  return total;
}

MaskedLoss masked_loss(const ModelParams& params, const ModelConfig& config,
                       std::span<const Token> tokens, std::span<const std::uint8_t> mask) {
  validate_mask(tokens, mask);
  ForwardCache cache;
  run_forward(params, config, tokens, cache);
  const Tensor& out = output_matrix(params, config);
  std::vector<double> logits(config.vocab_size);
  MaskedLoss loss;
  for (std::size_t t = 1; t < tokens.size(); ++t) {
    if (!mask[t]) {
      continue;
    }
    logits_row(out, config.vocab_size, cache.hidden.row(t - 1), logits);
    loss.sum += cross_entropy(logits, tokens[t]);
    loss.count += 1;
  }
  return loss;
}

MaskedLoss masked_loss_and_grad(const ModelParams& params, const ModelConfig& config,
                                std::span<const Token> tokens,
                                std::span<const std::uint8_t> mask, ModelParams& grads) {
  validate_mask(tokens, mask);
  ForwardCache cache;
  run_forward(params, config, tokens, cache);
  const Tensor& out = output_matrix(params, config);
  Tensor& dout = output_matrix(grads, config);
  const std::size_t h = config.hidden_dim;
  Tensor dhidden({tokens.size(), h});
  std::vector<double> logits(config.vocab_size);
  MaskedLoss loss;
  for (std::size_t t = 1; t < tokens.size(); ++t) {
    if (!mask[t]) {
      continue;
    }
    const auto hidden = cache.hidden.row(t - 1);
    logits_row(out, config.vocab_size, hidden, logits);
    loss.sum += cross_entropy(logits, tokens[t]);
    loss.count += 1;
    softmax_inplace(logits);
    logits[tokens[t]] -= 1.0;
    auto dh = dhidden.row(t - 1);
    for (std::size_t v = 0; v < config.vocab_size; ++v) {
      const double g = logits[v];
      const auto wrow = out.row(v);
      auto dwrow = dout.row(v);
      for (std::size_t i = 0; i < h; ++i) {
        dh[i] += g * wrow[i];
        dwrow[i] += g * hidden[i];
      }
    }
  }
  if (loss.count > 0) {
    backward(params, config, tokens, cache, std::move(dhidden), grads);
  }
  return loss;
}

TokenSequence generate_greedy(const ModelParams& params, const ModelConfig& config,
                              TokenSequence prompt, std::size_t new_tokens) {
  if (prompt.empty()) {
    throw ValidationError("generate_greedy: empty prompt");
  }
  for (std::size_t n = 0; n < new_tokens; ++n) {
    const std::size_t start = prompt.size() > config.seq_len ? prompt.size() - config.seq_len : 0;
    const std::span<const Token> context(prompt.data() + start, prompt.size() - start);
    const Tensor logits = forward_logits(params, config, context);
    const auto last = logits.row(context.size() - 1);
    prompt.push_back(
        static_cast<Token>(std::distance(last.begin(), std::ranges::max_element(last))));
  }
  return prompt;
}

}  // namespace hytune
