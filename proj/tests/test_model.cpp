#include <doctest.h>

#include <cmath>
#include <limits>

#include "hytune/errors.hpp"
#include "hytune/model.hpp"
#include "hytune/planner.hpp"
#include "hytune/rng.hpp"
#include "test_util.hpp"

using namespace hytune;

namespace {

using Vec = std::vector<double>;
using Mat = std::vector<Vec>;

ModelConfig tiny_config() {
  ModelConfig c;
  c.layers = 1;
  c.hidden_dim = 4;
  c.attention_heads = 2;
  c.vocab_size = 8;
  c.embedding_rows = 8;
  c.seq_len = 8;
  return c;
}

ModelConfig small_config(bool tied = true) {
  ModelConfig c;
  c.layers = 2;
  c.hidden_dim = 8;
  c.attention_heads = 2;
  c.vocab_size = 11;
  c.embedding_rows = 12;
  c.seq_len = 8;
  c.tied_embeddings = tied;
  return c;
}

// Reference slopes written directly from the closed form.
double reference_slope(std::size_t head, std::size_t n_heads) {
  const double cp = std::exp2(std::floor(std::log2(static_cast<double>(n_heads))));
  const auto i = static_cast<double>(head + 1);
  if (i <= cp) {
    return std::pow(2.0, -8.0 * i / cp);
  }
  const double k = 2.0 * (i - cp) - 1.0;
  return std::pow(2.0, -8.0 * k / (2.0 * cp));
}

Vec oracle_ln(const Vec& x, const Tensor& g, const Tensor& b) {
  const double n = static_cast<double>(x.size());
  double mean = 0;
  for (double v : x) mean += v;
  mean /= n;
  double var = 0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= n;
  Vec y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    y[i] = g[i] * (x[i] - mean) / std::sqrt(var + 1e-5) + b[i];
  }
  return y;
}

Vec oracle_affine(const Vec& x, const Tensor& w, const Tensor& b) {
  Vec y(w.dim(1));
  for (std::size_t j = 0; j < y.size(); ++j) {
    double s = b[j];
    for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * w.at(i, j);
    y[j] = s;
  }
  return y;
}

// Straight-line forward pass with per-position vectors and explicit loops.
Mat oracle_logits(const ModelParams& p, const ModelConfig& c, const std::vector<Token>& tok) {
  const std::size_t T = tok.size();
  const std::size_t h = c.hidden_dim;
  const std::size_t H = c.attention_heads;
  const std::size_t d = h / H;
  Mat x(T, Vec(h));
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t i = 0; i < h; ++i) x[t][i] = p.embedding.at(tok[t], i);
    x[t] = oracle_ln(x[t], p.embedding_ln_gain, p.embedding_ln_bias);
  }
  for (const LayerParams& l : p.layers) {
    Mat qkv(T);
    for (std::size_t t = 0; t < T; ++t) {
      qkv[t] = oracle_affine(oracle_ln(x[t], l.input_ln_gain, l.input_ln_bias), l.qkv_weight,
                             l.qkv_bias);
    }
    Mat ctx(T, Vec(h, 0.0));
    for (std::size_t head = 0; head < H; ++head) {
      const double m = reference_slope(head, H);
      for (std::size_t t = 0; t < T; ++t) {
        Vec w(t + 1);
        double top = -std::numeric_limits<double>::infinity();
        for (std::size_t u = 0; u <= t; ++u) {
          double dot = 0;
          for (std::size_t i = 0; i < d; ++i) dot += qkv[t][head * d + i] * qkv[u][h + head * d + i];
          w[u] = dot / std::sqrt(static_cast<double>(d)) - m * static_cast<double>(t - u);
          top = std::max(top, w[u]);
        }
        double z = 0;
        for (double& v : w) z += (v = std::exp(v - top));
        for (std::size_t u = 0; u <= t; ++u) {
          for (std::size_t i = 0; i < d; ++i) ctx[t][head * d + i] += w[u] / z * qkv[u][2 * h + head * d + i];
        }
      }
    }
    for (std::size_t t = 0; t < T; ++t) {
      const Vec a = oracle_affine(ctx[t], l.attn_out_weight, l.attn_out_bias);
      for (std::size_t i = 0; i < h; ++i) x[t][i] += a[i];
      Vec up = oracle_affine(oracle_ln(x[t], l.post_ln_gain, l.post_ln_bias), l.mlp_up_weight,
                             l.mlp_up_bias);
      for (double& v : up) v = 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0)));
      const Vec down = oracle_affine(up, l.mlp_down_weight, l.mlp_down_bias);
      for (std::size_t i = 0; i < h; ++i) x[t][i] += down[i];
    }
  }
  const Tensor& out = c.tied_embeddings ? p.embedding : p.lm_head;
  Mat logits(T, Vec(c.vocab_size));
  for (std::size_t t = 0; t < T; ++t) {
    const Vec y = oracle_ln(x[t], p.final_ln_gain, p.final_ln_bias);
    for (std::size_t v = 0; v < c.vocab_size; ++v) {
      double s = 0;
      for (std::size_t i = 0; i < h; ++i) s += y[i] * out.at(v, i);
      logits[t][v] = s;
    }
  }
  return logits;
}

// Random non-trivial parameters: init plus perturbed LN gains and biases.
ModelParams random_params(const ModelConfig& c, std::uint64_t seed, double scale = 0.5) {
  ModelParams p = ModelParams::init(c, seed);
  Rng rng(seed ^ 0xabcdef);
  for (Tensor* t : p.tensors()) {
    for (double& v : t->data()) v += scale * (2.0 * rng.uniform() - 1.0);
  }
  return p;
}

std::vector<Token> random_tokens(Rng& rng, std::size_t n, std::size_t vocab) {
  std::vector<Token> t(n);
  for (auto& v : t) v = static_cast<Token>(rng.below(vocab));
  return t;
}

}  // namespace

TEST_CASE("alibi slopes") {
  const auto s8 = alibi_slopes(8);
  REQUIRE(s8.size() == 8);
  for (std::size_t i = 0; i < 8; ++i) {
    CHECK(s8[i] == std::ldexp(1.0, -static_cast<int>(i + 1)));
  }
  CHECK(alibi_slopes(1) == std::vector<double>{1.0 / 256.0});
  const auto s112 = alibi_slopes(112);
  REQUIRE(s112.size() == 112);
  for (std::size_t i = 0; i < 112; ++i) {
    CHECK(std::abs(s112[i] - reference_slope(i, 112)) < 1e-15 * s112[i] + 1e-300);
  }
  CHECK(s112[0] == doctest::Approx(std::pow(2.0, -0.125)).epsilon(1e-15));
  CHECK(s112[64] == doctest::Approx(std::pow(2.0, -1.0 / 16.0)).epsilon(1e-15));
  CHECK_THROWS_AS(alibi_slopes(0), ValidationError);

  for (std::size_t n = 1; n <= 130; ++n) {
    const auto s = alibi_slopes(n);
    CHECK(s.size() == n);
    for (std::size_t i = 0; i < n; ++i) {
      CHECK(s[i] > 0.0);
      CHECK(s[i] < 1.0);
      CHECK(std::abs(s[i] - reference_slope(i, n)) <= 1e-15 * s[i]);
    }
  }
}

TEST_CASE("alibi bias") {
  const Tensor b = alibi_bias(3, 1);
  const double m = 1.0 / 256.0;
  const double inf = std::numeric_limits<double>::infinity();
  const double expected[3][3] = {{0, -inf, -inf}, {-m, 0, -inf}, {-2 * m, -m, 0}};
  for (std::size_t q = 0; q < 3; ++q) {
    for (std::size_t k = 0; k < 3; ++k) {
      CHECK(b[q * 3 + k] == expected[q][k]);
    }
  }
  const Tensor one = alibi_bias(1, 4);
  for (double v : one.data()) CHECK(v == 0.0);
  CHECK_THROWS_AS(alibi_bias(0, 2), ValidationError);
}

TEST_CASE("forward matches the straight-line oracle") {
  Rng rng(21);
  SUBCASE("tiny") {
    const ModelConfig c = tiny_config();
    for (int trial = 0; trial < 5; ++trial) {
      const ModelParams p = random_params(c, 100 + trial);
      const auto tok = random_tokens(rng, 1 + rng.below(c.seq_len), c.vocab_size);
      const Tensor got = forward_logits(p, c, tok);
      const Mat want = oracle_logits(p, c, tok);
      REQUIRE(got.dim(0) == tok.size());
      REQUIRE(got.dim(1) == c.vocab_size);
      for (std::size_t t = 0; t < tok.size(); ++t) {
        for (std::size_t v = 0; v < c.vocab_size; ++v) {
          CHECK(std::abs(got.at(t, v) - want[t][v]) < 1e-9);
        }
      }
    }
  }
  SUBCASE("untied, padded rows, two layers") {
    for (bool tied : {true, false}) {
      const ModelConfig c = small_config(tied);
      const ModelParams p = random_params(c, 7);
      const auto tok = random_tokens(rng, c.seq_len, c.vocab_size);
      const Tensor got = forward_logits(p, c, tok);
      const Mat want = oracle_logits(p, c, tok);
      for (std::size_t t = 0; t < tok.size(); ++t) {
        for (std::size_t v = 0; v < c.vocab_size; ++v) {
          CHECK(std::abs(got.at(t, v) - want[t][v]) < 1e-9);
        }
      }
    }
  }
}

TEST_CASE("forward errors") {
  const ModelConfig c = tiny_config();
  const ModelParams p = ModelParams::init(c, 1);
  CHECK_THROWS_AS(forward_logits(p, c, std::vector<Token>{}), ValidationError);
  CHECK_THROWS_AS(forward_logits(p, c, std::vector<Token>{1, 8}), ValidationError);
  CHECK_THROWS_AS(forward_logits(p, c, std::vector<Token>(9, 1)), ValidationError);
  ModelConfig bad = c;
  bad.attention_heads = 3;
  CHECK_THROWS_AS(bad.validate(), ValidationError);
  bad = c;
  bad.embedding_rows = 7;
  CHECK_THROWS_AS(bad.validate(), ValidationError);
}

TEST_CASE("causality") {
  const ModelConfig c = small_config();
  const ModelParams p = random_params(c, 3);
  Rng rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    auto tok = random_tokens(rng, c.seq_len, c.vocab_size);
    const Tensor a = forward_logits(p, c, tok);
    const std::size_t pos = rng.below(c.seq_len);
    tok[pos] = static_cast<Token>((tok[pos] + 1 + rng.below(c.vocab_size - 1)) % c.vocab_size);
    const Tensor b = forward_logits(p, c, tok);
    for (std::size_t t = 0; t < pos; ++t) {
      for (std::size_t v = 0; v < c.vocab_size; ++v) {
        CHECK(a.at(t, v) == b.at(t, v));
      }
    }
  }
}

TEST_CASE("zero parameters give a uniform model") {
  const ModelConfig c = tiny_config();
  const ModelParams p = ModelParams::zeros(c);
  const std::vector<Token> tok{1, 2, 3};
  const Tensor logits = forward_logits(p, c, tok);
  for (double v : logits.data()) CHECK(v == 0.0);
  CHECK(sequence_log_prob(p, c, tok) == doctest::Approx(-2.0 * std::log(4.0 * 2.0)).epsilon(1e-14));
  CHECK(std::abs(sequence_log_prob(p, c, tok) + 4.158883) < 1e-6);
  CHECK_THROWS_AS(sequence_log_prob(p, c, std::vector<Token>{5}), ValidationError);
}

TEST_CASE("sequence_log_prob") {
  SUBCASE("matches the zero-model value for a 3-token vocabulary") {
    ModelConfig c = tiny_config();
    const ModelParams p = ModelParams::zeros(c);
    // Two predicted tokens over a vocabulary of 8: -2 ln 8; with vocab 4 it is -2 ln 4.
    c.vocab_size = 4;
    CHECK(std::abs(sequence_log_prob(p, c, std::vector<Token>{0, 1, 2}) + 2.7726) < 1e-4);
  }
  SUBCASE("two tokens give one log-softmax entry") {
    const ModelConfig c = tiny_config();
    const ModelParams p = random_params(c, 8);
    const Tensor logits = forward_logits(p, c, std::vector<Token>{3, 5});
    double z = 0.0;
    for (std::size_t v = 0; v < c.vocab_size; ++v) z += std::exp(logits.at(0, v));
    CHECK(std::abs(sequence_log_prob(p, c, std::vector<Token>{3, 5}) -
                   (logits.at(0, 5) - std::log(z))) < 1e-12);
  }
  SUBCASE("continuations of fixed length sum to one") {
    const ModelConfig c = tiny_config();
    const ModelParams p = random_params(c, 9);
    for (Token first = 0; first < 3; ++first) {
      double total = 0.0;
      for (Token a = 0; a < c.vocab_size; ++a) {
        for (Token b = 0; b < c.vocab_size; ++b) {
          total += std::exp(sequence_log_prob(p, c, std::vector<Token>{first, a, b}));
        }
      }
      CHECK(std::abs(total - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("count_params") {
  const ModelConfig tiny = tiny_config();
  CHECK(count_params(tiny) == 292);
  CHECK(ModelParams::zeros(tiny).total_size() == 292);
  for (bool tied : {true, false}) {
    const ModelConfig c = small_config(tied);
    CHECK(count_params(c) == ModelParams::zeros(c).total_size());
  }
  CHECK(count_params(small_config(false)) - count_params(small_config(true)) == 12 * 8);
  CHECK(count_params(load_preset("bloom-7b").model) == 7'069'016'064ULL);
  CHECK(count_params(load_preset("bloom-176b").model) == 176'247'271'424ULL);
}

TEST_CASE("init is seeded") {
  const ModelConfig c = small_config();
  CHECK(ModelParams::init(c, 5) == ModelParams::init(c, 5));
  CHECK_FALSE(ModelParams::init(c, 5) == ModelParams::init(c, 6));
  const ModelParams p = ModelParams::init(c, 5);
  for (double g : p.final_ln_gain.data()) CHECK(g == 1.0);
  for (double b : p.final_ln_bias.data()) CHECK(b == 0.0);
}

TEST_CASE("masked loss gradient matches finite differences") {
  Rng rng(31);
  for (bool tied : {true, false}) {
    const ModelConfig c = small_config(tied);
    const ModelParams base = random_params(c, tied ? 41 : 42, 0.3);
    const auto tok = random_tokens(rng, c.seq_len, c.vocab_size);
    std::vector<std::uint8_t> mask(c.seq_len, 1);
    mask[3] = 0;

    ModelParams grads = ModelParams::zeros(c);
    const MaskedLoss ml = masked_loss_and_grad(base, c, tok, mask, grads);
    CHECK(ml.count == c.seq_len - 2);
    CHECK(std::abs(ml.sum - masked_loss(base, c, tok, mask).sum) < 1e-12);

    ModelParams probe = base;
    auto probe_named = probe.named();
    const auto grad_named = grads.named();
    REQUIRE(probe_named.size() == grad_named.size());
    for (std::size_t n = 0; n < probe_named.size(); ++n) {
      Tensor& t = *probe_named[n].tensor;
      const Tensor& g = *grad_named[n].tensor;
      CHECK(probe_named[n].name == grad_named[n].name);
      // Sample a few coordinates per tensor.
      std::vector<double> analytic;
      std::vector<double> numeric;
      for (int s = 0; s < 4; ++s) {
        const std::size_t i = rng.below(t.size());
        const double saved = t[i];
        const double h = 1e-5;
        auto at = [&](double x) {
          t[i] = x;
          return masked_loss(probe, c, tok, mask).sum;
        };
        const double fd =
            (8.0 * (at(saved + h) - at(saved - h)) - (at(saved + 2 * h) - at(saved - 2 * h))) /
            (12.0 * h);
        t[i] = saved;
        analytic.push_back(g[i]);
        numeric.push_back(fd);
      }
      INFO(probe_named[n].name);
      CHECK(testutil::relative_error(analytic, numeric) < 1e-4);
    }
  }
}

TEST_CASE("tied embedding gradient combines input and output paths") {
  const ModelConfig c = small_config(true);
  ModelConfig untied = c;
  untied.tied_embeddings = false;
  const ModelParams tied_params = random_params(c, 51);
  ModelParams untied_params = ModelParams::zeros(untied);
  auto dst = untied_params.named();
  const auto src = tied_params.named();
  for (std::size_t i = 0; i < src.size(); ++i) *dst[i].tensor = *src[i].tensor;
  untied_params.lm_head = tied_params.embedding;

  Rng rng(52);
  const auto tok = random_tokens(rng, c.seq_len, c.vocab_size);
  const std::vector<std::uint8_t> mask(c.seq_len, 1);
  ModelParams g_tied = ModelParams::zeros(c);
  ModelParams g_untied = ModelParams::zeros(untied);
  const auto l1 = masked_loss_and_grad(tied_params, c, tok, mask, g_tied);
  const auto l2 = masked_loss_and_grad(untied_params, untied, tok, mask, g_untied);
  CHECK(std::abs(l1.sum - l2.sum) < 1e-12);
  for (std::size_t i = 0; i < g_tied.embedding.size(); ++i) {
    CHECK(std::abs(g_tied.embedding[i] - (g_untied.embedding[i] + g_untied.lm_head[i])) < 1e-12);
  }
  // Padding rows never receive gradient.
  for (std::size_t r = c.vocab_size; r < c.embedding_rows; ++r) {
    for (std::size_t j = 0; j < c.hidden_dim; ++j) CHECK(g_tied.embedding.at(r, j) == 0.0);
  }
}

TEST_CASE("generate_greedy") {
  const ModelConfig c = tiny_config();
  const ModelParams p = random_params(c, 61);
  const TokenSequence out = generate_greedy(p, c, {1, 2}, 10);
  REQUIRE(out.size() == 12);
  CHECK(out[0] == 1);
  CHECK(out[1] == 2);
  // The third token is the argmax of the last row.
  const Tensor logits = forward_logits(p, c, std::vector<Token>{1, 2});
  Token best = 0;
  for (Token v = 1; v < c.vocab_size; ++v) {
    if (logits.at(1, v) > logits.at(1, best)) best = v;
  }
  CHECK(out[2] == best);
  CHECK_THROWS_AS(generate_greedy(p, c, {}, 3), ValidationError);
}
