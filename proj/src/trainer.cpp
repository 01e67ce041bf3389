#include "hytune/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iomanip>
#include <memory>
#include <sstream>
#include <utility>

#include <json.hpp>

#include "hytune/errors.hpp"
#include "hytune/rng.hpp"

namespace hytune {

void TrainRunConfig::validate() const {
  model.validate();
  hyper.validate();
  if (model.seq_len < 2) {
    throw ValidationError("training needs seq_len >= 2");
  }
}

TrainState fresh_state(const TrainRunConfig& run) {
  run.validate();
  return state_from_params(ModelParams::init(run.model, mix_seed(run.seed, 0x696e6974ULL)));
}

TrainState state_from_params(ModelParams params) {
  TrainState state;
  state.params = std::move(params);
  const std::vector<const Tensor*> tensors = std::as_const(state.params).tensors();
  state.optimizer = OptimizerState::zeros_like(tensors);
  return state;
}

bool finished(const TrainRunConfig& run, const TrainState& state) {
  return state.tokens_seen >= run.hyper.total_tokens;
}

namespace {

std::uint64_t data_seed(std::uint64_t seed) { return mix_seed(seed, 0x64617461ULL); }

/// Packed sequences of successive shuffled epochs, addressable by (epoch, cursor).
class SequenceStream {
 public:
  SequenceStream(std::span<const Document> corpus, std::uint64_t seed, std::size_t seq_len,
                 LossPolicy policy, std::uint64_t epoch, std::uint64_t cursor)
      : corpus_(corpus), seed_(seed), seq_len_(seq_len), policy_(policy), epoch_(epoch),
        cursor_(cursor) {
    for (const Document& doc : corpus_) {
      domains_[doc.id] = doc.domain;
    }
    load();
  }

  PackedSequence next() {
    while (cursor_ >= sequences_.size()) {
      ++epoch_;
      cursor_ = 0;
      load();
    }
    return sequences_[cursor_++];
  }

  std::uint64_t epoch() const { return epoch_; }
  std::uint64_t cursor() const { return cursor_; }

  Domain domain_of(const std::string& id) const { return domains_.at(id); }

 private:
  void load() {
    const std::vector<Document> order = hybrid_shuffle(make_plan(corpus_, seed_, epoch_));
    sequences_ = pack(order, seq_len_, policy_).sequences;
    std::uint64_t scored = 0;
    for (const PackedSequence& s : sequences_) {
      for (std::size_t t = 1; t < s.mask.size(); ++t) {
        scored += s.mask[t];
      }
    }
    if (scored == 0) {
      throw Error("training corpus yields zero masked tokens");
    }
  }

  std::span<const Document> corpus_;
  std::uint64_t seed_;
  std::size_t seq_len_;
  LossPolicy policy_;
  std::uint64_t epoch_;
  std::uint64_t cursor_;
  std::vector<PackedSequence> sequences_;
  std::unordered_map<std::string, Domain> domains_;
};

std::uint64_t scored_positions(const PackedSequence& s) {
  std::uint64_t n = 0;
  for (std::size_t t = 1; t < s.mask.size(); ++t) {
    n += s.mask[t];
  }
  return n;
}

Domain position_domain(const SequenceStream& stream, const PackedSequence& s, std::size_t t) {
  for (const Segment& seg : s.segments) {
    if (t >= seg.offset && t < seg.offset + seg.length) {
      return stream.domain_of(seg.doc_id);
    }
  }
  throw Error("scored position outside every segment");
}

std::vector<bool> decay_mask(const ModelParams& params) {
  std::vector<bool> mask;
  for (const Tensor* t : params.tensors()) {
    mask.push_back(t->rank() == 2);
  }
  return mask;
}

}  // namespace

TrainState train(const TrainRunConfig& run, std::span<const Document> corpus, TrainState state,
                 const TrainOptions& options) {
  run.validate();
  if (corpus.empty()) {
    throw ValidationError("train: empty corpus");
  }
  SequenceStream stream(corpus, data_seed(run.seed), run.model.seq_len, run.loss_policy,
                        state.epoch, state.cursor);
  ModelParams grads = ModelParams::zeros(run.model);
  const std::vector<Tensor*> param_tensors = state.params.tensors();
  const std::vector<Tensor*> grad_tensors = grads.tensors();
  const std::vector<const Tensor*> grad_view(grad_tensors.begin(), grad_tensors.end());
  const std::vector<bool> decay_vec = decay_mask(state.params);
  const std::unique_ptr<bool[]> decay(new bool[decay_vec.size()]);
  std::copy(decay_vec.begin(), decay_vec.end(), decay.get());

  while (state.tokens_seen < run.hyper.total_tokens) {
    if (options.max_steps && state.step >= *options.max_steps) {
      break;
    }
    std::vector<PackedSequence> batch;
    std::uint64_t scored = 0;
    for (std::uint64_t i = 0; i < run.hyper.global_batch; ++i) {
      batch.push_back(stream.next());
      scored += scored_positions(batch.back());
    }
    state.epoch = stream.epoch();
    state.cursor = stream.cursor();
    if (scored == 0) {
      continue;
    }
    // Trim the final step to land exactly on the budget.
    const std::uint64_t remaining = run.hyper.total_tokens - state.tokens_seen;
    for (std::size_t b = batch.size(); b-- > 0 && scored > remaining;) {
      auto& mask = batch[b].mask;
      for (std::size_t t = mask.size(); t-- > 1 && scored > remaining;) {
        if (mask[t]) {
          mask[t] = 0;
          --scored;
        }
      }
    }

    grads.set_zero();
    double loss_sum = 0.0;
    for (const PackedSequence& s : batch) {
      loss_sum += masked_loss_and_grad(state.params, run.model, s.tokens, s.mask, grads).sum;
      for (std::size_t t = 1; t < s.mask.size(); ++t) {
        if (s.mask[t]) {
          state.domain_tokens[position_domain(stream, s, t) == Domain::general ? 0 : 1] += 1;
        }
      }
    }
    const double inv = 1.0 / static_cast<double>(scored);
    for (Tensor* g : grad_tensors) {
      for (double& x : g->data()) {
        x *= inv;
      }
    }
    const ClipResult clip = clip_grad_norm(grad_tensors, run.hyper.grad_clip);
    AdamHyper hyper;
    hyper.lr = lr_at(run.hyper.schedule, static_cast<double>(state.tokens_seen));
    hyper.beta1 = run.hyper.beta1;
    hyper.beta2 = run.hyper.beta2;
    hyper.eps = run.hyper.adam_eps;
    hyper.weight_decay = run.hyper.weight_decay;
    adam_step(param_tensors, grad_view, state.optimizer, hyper,
              std::span<const bool>(decay.get(), decay_vec.size()));

    state.tokens_seen += scored;
    state.step += 1;
    const LossPoint point{state.step, state.tokens_seen, loss_sum * inv, hyper.lr, clip.norm};
    state.trajectory.push_back(point);
    if (options.on_step) {
      options.on_step(point);
    }
  }
  return state;
}

TrainState train(const TrainRunConfig& run, std::span<const Document> corpus) {
  return train(run, corpus, fresh_state(run));
}

// ---------------------------------------------------------------------------

CheckpointData state_checkpoint(const ModelConfig& config, const TrainState& state) {
  CheckpointData data = model_checkpoint(config, state.params);
  const auto named = state.params.named();
  for (std::size_t i = 0; i < named.size(); ++i) {
    data.arrays.emplace_back("optim.m." + named[i].name, state.optimizer.m.at(i));
  }
  for (std::size_t i = 0; i < named.size(); ++i) {
    data.arrays.emplace_back("optim.v." + named[i].name, state.optimizer.v.at(i));
  }
  Tensor trajectory({state.trajectory.size(), 5});
  for (std::size_t i = 0; i < state.trajectory.size(); ++i) {
    const LossPoint& p = state.trajectory[i];
    trajectory.at(i, 0) = static_cast<double>(p.step);
    trajectory.at(i, 1) = static_cast<double>(p.tokens_seen);
    trajectory.at(i, 2) = p.loss;
    trajectory.at(i, 3) = p.lr;
    trajectory.at(i, 4) = p.grad_norm;
  }
  data.arrays.emplace_back("train.trajectory", std::move(trajectory));
  auto meta = [&](const char* key, std::uint64_t v) {
    data.metadata.emplace_back(key, static_cast<std::int64_t>(v));
  };
  meta("train.step", state.step);
  meta("train.tokens_seen", state.tokens_seen);
  meta("train.tokens_general", state.domain_tokens[0]);
  meta("train.tokens_financial", state.domain_tokens[1]);
  meta("train.epoch", state.epoch);
  meta("train.cursor", state.cursor);
  meta("optim.step", state.optimizer.step);
  return data;
}

TrainState state_from_checkpoint(const CheckpointData& data) {
  TrainState state = state_from_params(params_from_checkpoint(data));
  const auto named = state.params.named();
  for (std::size_t i = 0; i < named.size(); ++i) {
    const Tensor* m = data.array("optim.m." + named[i].name);
    const Tensor* v = data.array("optim.v." + named[i].name);
    if (m == nullptr || v == nullptr) {
      throw ValidationError("checkpoint has no optimizer state for '" + named[i].name + "'");
    }
    state.optimizer.m[i] = *m;
    state.optimizer.v[i] = *v;
  }
  auto meta = [&](const char* key) -> std::uint64_t {
    const auto v = data.meta(key);
    if (!v) {
      throw ValidationError(std::string("checkpoint is missing metadata '") + key + "'");
    }
    return static_cast<std::uint64_t>(*v);
  };
  state.step = meta("train.step");
  state.tokens_seen = meta("train.tokens_seen");
  state.domain_tokens = {meta("train.tokens_general"), meta("train.tokens_financial")};
  state.epoch = meta("train.epoch");
  state.cursor = meta("train.cursor");
  state.optimizer.step = meta("optim.step");
  if (const Tensor* t = data.array("train.trajectory")) {
    for (std::size_t i = 0; i < t->dim(0); ++i) {
      state.trajectory.push_back({static_cast<std::uint64_t>(t->at(i, 0)),
                                  static_cast<std::uint64_t>(t->at(i, 1)), t->at(i, 2),
                                  t->at(i, 3), t->at(i, 4)});
    }
  }
  return state;
}

double perplexity(const ModelParams& params, const ModelConfig& config,
                  std::span<const Document> eval_docs, LossPolicy policy) {
  const PackResult packed = pack(eval_docs, config.seq_len, policy);
  double sum = 0.0;
  std::uint64_t count = 0;
  for (const PackedSequence& s : packed.sequences) {
    const MaskedLoss loss = masked_loss(params, config, s.tokens, s.mask);
    sum += loss.sum;
    count += loss.count;
  }
  if (count == 0) {
    throw ValidationError("perplexity: evaluation set yields zero masked tokens");
  }
  return std::exp(sum / static_cast<double>(count));
}

// ---------------------------------------------------------------------------
// Forgetting experiment

std::string to_string(Regime r) { return r == Regime::sequential ? "sequential" : "hybrid"; }

std::uint64_t RegimeSpec::total_budget() const {
  std::uint64_t total = 0;
  for (const StageSpec& s : stages) {
    total += s.hyper.total_tokens;
  }
  return total;
}

void RegimeSpec::validate() const {
  if (regime == Regime::sequential && stages.size() < 2) {
    throw ValidationError("sequential regime needs at least two stages");
  }
  if (regime == Regime::hybrid && stages.size() != 1) {
    throw ValidationError("hybrid regime has exactly one stage");
  }
  for (const StageSpec& s : stages) {
    if (s.corpus.empty()) {
      throw ValidationError("stage '" + s.name + "' has an empty corpus");
    }
    s.hyper.validate();
  }
}

std::size_t ForgettingReport::sequential_rise_count() const {
  std::size_t n = 0;
  for (const RegimeResult& r : results) {
    if (r.regime == Regime::sequential && r.stages.size() >= 2 &&
        r.stages.back().ppl_general > r.stages[r.stages.size() - 2].ppl_general) {
      ++n;
    }
  }
  return n;
}

std::size_t ForgettingReport::hybrid_better_count() const {
  std::size_t n = 0;
  for (std::uint64_t seed : seeds) {
    if (result(Regime::hybrid, seed).ppl_general < result(Regime::sequential, seed).ppl_general) {
      ++n;
    }
  }
  return n;
}

const RegimeResult& ForgettingReport::result(Regime regime, std::uint64_t seed) const {
  for (const RegimeResult& r : results) {
    if (r.regime == regime && r.seed == seed) {
      return r;
    }
  }
  throw Error("no " + to_string(regime) + " result for seed " + std::to_string(seed));
}

namespace {

StageResult evaluate_stage(const std::string& name, const ExperimentSpec& spec,
                           const TrainState& state) {
  StageResult r;
  r.name = name;
  r.tokens = state.tokens_seen;
  r.ppl_general = perplexity(state.params, spec.model, spec.eval_general, spec.loss_policy);
  r.ppl_financial = perplexity(state.params, spec.model, spec.eval_financial, spec.loss_policy);
  r.final_loss = state.trajectory.empty() ? 0.0 : state.trajectory.back().loss;
  return r;
}

}  // namespace

ForgettingReport run_forgetting_experiment(const ExperimentSpec& spec,
                                           const std::function<void(const std::string&)>& log) {
  spec.model.validate();
  spec.sequential.validate();
  spec.hybrid.validate();
  if (spec.sequential.regime != Regime::sequential || spec.hybrid.regime != Regime::hybrid) {
    throw ValidationError("experiment needs one sequential and one hybrid regime");
  }
  if (spec.sequential.total_budget() != spec.hybrid.total_budget()) {
    throw ValidationError("regime budgets differ: sequential " +
                          std::to_string(spec.sequential.total_budget()) + " vs hybrid " +
                          std::to_string(spec.hybrid.total_budget()) + " tokens");
  }
  if (spec.seeds.empty()) {
    throw ValidationError("experiment needs at least one seed");
  }
  if (spec.eval_general.empty() || spec.eval_financial.empty()) {
    throw ValidationError("experiment needs general and financial evaluation sets");
  }
  auto note = [&](const std::string& msg) {
    if (log) {
      log(msg);
    }
  };

  ForgettingReport report;
  report.seeds = spec.seeds;
  report.budget = spec.hybrid.total_budget();
  for (std::uint64_t seed : spec.seeds) {
    // Sequential: continue training stage by stage, resetting the optimizer.
    {
      RegimeResult result;
      result.regime = Regime::sequential;
      result.seed = seed;
      std::optional<TrainState> state;
      for (const StageSpec& stage : spec.sequential.stages) {
        const TrainRunConfig run{spec.model, stage.hyper, seed, spec.loss_policy};
        TrainState start = state ? state_from_params(std::move(state->params)) : fresh_state(run);
        state = train(run, stage.corpus, std::move(start));
        result.general_tokens += state->domain_tokens[0];
        result.stages.push_back(evaluate_stage(stage.name, spec, *state));
        note("seed " + std::to_string(seed) + " sequential/" + stage.name + ": general ppl " +
             std::to_string(result.stages.back().ppl_general) + ", financial ppl " +
             std::to_string(result.stages.back().ppl_financial));
      }
      result.ppl_general = result.stages.back().ppl_general;
      result.ppl_financial = result.stages.back().ppl_financial;
      // The first stage is the general-only model with equal general exposure.
      result.ppl_general_reference = result.stages.front().ppl_general;
      result.forgetting_delta = result.ppl_general - result.ppl_general_reference;
      report.results.push_back(std::move(result));
    }
    // Hybrid: one stage over the shuffled union.
    {
      const StageSpec& stage = spec.hybrid.stages.front();
      const TrainRunConfig run{spec.model, stage.hyper, seed, spec.loss_policy};
      const TrainState state = train(run, stage.corpus);
      RegimeResult result;
      result.regime = Regime::hybrid;
      result.seed = seed;
      result.stages.push_back(evaluate_stage(stage.name, spec, state));
      result.ppl_general = result.stages.back().ppl_general;
      result.ppl_financial = result.stages.back().ppl_financial;
      result.general_tokens = state.domain_tokens[0];
      note("seed " + std::to_string(seed) + " hybrid: general ppl " +
           std::to_string(result.ppl_general) + ", financial ppl " +
           std::to_string(result.ppl_financial));

      // Reference: general documents only, same schedule shape compressed to
      // the hybrid run's general-token exposure.
      std::vector<Document> general;
      for (const Document& d : stage.corpus) {
        if (d.domain == Domain::general) {
          general.push_back(d);
        }
      }
      if (!general.empty() && result.general_tokens > 0) {
        TrainRunConfig ref = run;
        const double ratio = static_cast<double>(result.general_tokens) /
                             static_cast<double>(stage.hyper.total_tokens);
        ref.hyper.total_tokens = result.general_tokens;
        ref.hyper.schedule.warmup_tokens = stage.hyper.schedule.warmup_tokens * ratio;
        ref.hyper.schedule.decay_tokens = stage.hyper.schedule.decay_tokens * ratio;
        const TrainState ref_state = train(ref, general);
        result.ppl_general_reference =
            perplexity(ref_state.params, spec.model, spec.eval_general, spec.loss_policy);
        result.forgetting_delta = result.ppl_general - result.ppl_general_reference;
      }
      report.results.push_back(std::move(result));
    }
  }
  return report;
}

std::string report_json(const ForgettingReport& report) {
  nlohmann::json j;
  j["seeds"] = report.seeds;
  j["token_budget"] = report.budget;
  j["sequential_rise_count"] = report.sequential_rise_count();
  j["hybrid_better_count"] = report.hybrid_better_count();
  nlohmann::json results = nlohmann::json::array();
  for (const RegimeResult& r : report.results) {
    nlohmann::json jr;
    jr["regime"] = to_string(r.regime);
    jr["seed"] = r.seed;
    jr["ppl_general"] = r.ppl_general;
    jr["ppl_financial"] = r.ppl_financial;
    jr["general_tokens"] = r.general_tokens;
    jr["ppl_general_reference"] = r.ppl_general_reference;
    jr["forgetting_delta"] = r.forgetting_delta;
    nlohmann::json stages = nlohmann::json::array();
    for (const StageResult& s : r.stages) {
      stages.push_back({{"name", s.name},
                        {"tokens", s.tokens},
                        {"ppl_general", s.ppl_general},
                        {"ppl_financial", s.ppl_financial},
                        {"final_loss", s.final_loss}});
    }
    jr["stages"] = stages;
    results.push_back(jr);
  }
  j["results"] = results;
  return j.dump(2);
}

std::string report_table(const ForgettingReport& report) {
  std::ostringstream out;
  out << std::left << std::setw(12) << "regime" << std::setw(8) << "seed" << std::setw(22)
      << "stage" << std::right << std::setw(12) << "tokens" << std::setw(12) << "ppl_gen"
      << std::setw(12) << "ppl_fin" << '\n';
  out << std::fixed << std::setprecision(4);
  for (const RegimeResult& r : report.results) {
    for (const StageResult& s : r.stages) {
      out << std::left << std::setw(12) << to_string(r.regime) << std::setw(8) << r.seed
          << std::setw(22) << s.name << std::right << std::setw(12) << s.tokens << std::setw(12)
          << s.ppl_general << std::setw(12) << s.ppl_financial << '\n';
    }
  }
  out << '\n'
      << std::left << std::setw(12) << "regime" << std::setw(8) << "seed" << std::right
      << std::setw(14) << "gen_tokens" << std::setw(12) << "ppl_gen" << std::setw(12) << "ref_gen"
      << std::setw(12) << "delta" << '\n';
  for (const RegimeResult& r : report.results) {
    out << std::left << std::setw(12) << to_string(r.regime) << std::setw(8) << r.seed
        << std::right << std::setw(14) << r.general_tokens << std::setw(12) << r.ppl_general
        << std::setw(12) << r.ppl_general_reference << std::setw(12) << r.forgetting_delta
        << '\n';
  }
  out << "\nsequential general ppl rose in last stage: " << report.sequential_rise_count() << "/"
      << report.seeds.size() << "\nhybrid final general ppl below sequential: "
      << report.hybrid_better_count() << "/" << report.seeds.size() << '\n';
  return out.str();
}

std::string trajectory_json(std::span<const LossPoint> trajectory) {
  nlohmann::json j = nlohmann::json::array();
  for (const LossPoint& p : trajectory) {
    j.push_back({{"step", p.step},
                 {"tokens_seen", p.tokens_seen},
                 {"loss", p.loss},
                 {"lr", p.lr},
                 {"grad_norm", p.grad_norm}});
  }
  return j.dump(2);
}

std::string trajectory_table(std::span<const LossPoint> trajectory) {
  std::ostringstream out;
  out << std::right << std::setw(8) << "step" << std::setw(14) << "tokens" << std::setw(12)
      << "loss" << std::setw(14) << "lr" << std::setw(12) << "grad_norm" << '\n';
  for (const LossPoint& p : trajectory) {
    out << std::setw(8) << p.step << std::setw(14) << p.tokens_seen << std::setw(12)
        << std::fixed << std::setprecision(5) << p.loss << std::setw(14) << std::scientific
        << std::setprecision(4) << p.lr << std::setw(12) << std::fixed << std::setprecision(4)
        << p.grad_norm << '\n';
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Synthetic corpora

namespace {

struct Language {
  std::vector<std::string> words;
  std::vector<std::array<std::size_t, 2>> successors;
};

Language make_language(Domain domain) {
  const char first = domain == Domain::general ? 'a' : 'n';
  Rng rng(mix_seed(0x6c616e67ULL, static_cast<std::uint64_t>(domain)));
  Language lang;
  while (lang.words.size() < 24) {
    const std::size_t len = 2 + rng.below(4);
    std::string w;
    for (std::size_t i = 0; i < len; ++i) {
      w.push_back(static_cast<char>(first + rng.below(13)));
    }
    if (std::find(lang.words.begin(), lang.words.end(), w) == lang.words.end()) {
      lang.words.push_back(w);
    }
  }
  for (std::size_t i = 0; i < lang.words.size(); ++i) {
    lang.successors.push_back({rng.below(lang.words.size()), rng.below(lang.words.size())});
  }
  return lang;
}

std::string chain(const Language& lang, Rng& rng, std::size_t start, std::size_t n) {
  std::string out;
  std::size_t w = start;
  for (std::size_t i = 0; i < n; ++i) {
    if (i) {
      out.push_back(' ');
    }
    out += lang.words[w];
    w = rng.uniform() < 0.9 ? lang.successors[w][rng.below(2)] : rng.below(lang.words.size());
  }
  return out;
}

}  // namespace

std::vector<Document> synthetic_corpus(Domain domain, const SyntheticCorpusSpec& spec,
                                       const std::string& id_prefix) {
  const Language lang = make_language(domain);
  Rng rng(mix_seed(spec.seed, 0x73796e00ULL + static_cast<std::uint64_t>(domain)));
  std::vector<Document> docs;
  for (std::size_t i = 0; i < spec.pretrain_docs; ++i) {
    Document d;
    d.id = id_prefix + "-pt-" + std::to_string(i);
    d.domain = domain;
    d.kind = Kind::pretrain;
    d.text = chain(lang, rng, rng.below(lang.words.size()), spec.words_per_doc);
    docs.push_back(std::move(d));
  }
  for (std::size_t i = 0; i < spec.instruction_docs; ++i) {
    InstructionRecord rec;
    const std::size_t start = rng.below(lang.words.size());
    rec.instruction = chain(lang, rng, start, 3);
    rec.output = chain(lang, rng, lang.successors[start][0], 5);
    docs.push_back(instruction_document(id_prefix + "-in-" + std::to_string(i), domain, rec));
  }
  return docs;
}

}  // namespace hytune
