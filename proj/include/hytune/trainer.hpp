#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "hytune/checkpoint.hpp"
#include "hytune/corpus.hpp"
#include "hytune/hyperparams.hpp"
#include "hytune/model.hpp"
#include "hytune/numerics.hpp"

namespace hytune {

struct TrainRunConfig {
  ModelConfig model;
  TrainingHyperparams hyper;
  std::uint64_t seed = 0;
  LossPolicy loss_policy = LossPolicy::full;

  void validate() const;
};

struct LossPoint {
  std::uint64_t step = 0;
  std::uint64_t tokens_seen = 0;  // after this step
  double loss = 0.0;              // mean masked cross-entropy of the step's batch
  double lr = 0.0;
  double grad_norm = 0.0;         // before clipping

  friend bool operator==(const LossPoint&, const LossPoint&) = default;
};

/// Everything needed to continue a run exactly where it stopped.
struct TrainState {
  ModelParams params;
  OptimizerState optimizer;
  std::uint64_t step = 0;
  std::uint64_t tokens_seen = 0;
  /// Scored tokens per domain (general, financial).
  std::array<std::uint64_t, 2> domain_tokens{};
  std::uint64_t epoch = 0;
  std::uint64_t cursor = 0;  // next packed sequence within the epoch
  std::vector<LossPoint> trajectory;
};

/// Seeded initial parameters and zero optimizer state.
TrainState fresh_state(const TrainRunConfig& run);
/// Continues from existing parameters with a reset optimizer and data stream.
TrainState state_from_params(ModelParams params);

struct TrainOptions {
  /// Stop after this many total steps even if the budget is not reached.
  std::optional<std::uint64_t> max_steps;
  std::function<void(const LossPoint&)> on_step;
};

/// Token-budget loop. Each step takes global_batch packed sequences, averages
/// masked cross-entropy, clips, and applies Adam at lr_at(tokens_seen). The
/// last step scores only as many tokens as remain in the budget, so a finished
/// run has tokens_seen == total_tokens. Epoch e shuffles with hybrid_shuffle
/// under (seed, e).
TrainState train(const TrainRunConfig& run, std::span<const Document> corpus, TrainState state,
                 const TrainOptions& options = {});
TrainState train(const TrainRunConfig& run, std::span<const Document> corpus);

bool finished(const TrainRunConfig& run, const TrainState& state);

/// Training-state checkpoint: model arrays, "optim.m.*"/"optim.v.*" moments,
/// a "trajectory" array [steps, 5] and counters as metadata.
CheckpointData state_checkpoint(const ModelConfig& config, const TrainState& state);
TrainState state_from_checkpoint(const CheckpointData& data);

/// exp(total masked cross-entropy / masked tokens) over docs packed in order.
double perplexity(const ModelParams& params, const ModelConfig& config,
                  std::span<const Document> eval_docs, LossPolicy policy);

// ---------------------------------------------------------------------------
// Forgetting experiment

enum class Regime { sequential, hybrid };
std::string to_string(Regime r);

struct StageSpec {
  std::string name;
  std::vector<Document> corpus;
  TrainingHyperparams hyper;
};

struct RegimeSpec {
  Regime regime = Regime::hybrid;
  std::vector<StageSpec> stages;

  std::uint64_t total_budget() const;
  void validate() const;
};

struct ExperimentSpec {
  ModelConfig model;
  LossPolicy loss_policy = LossPolicy::full;
  RegimeSpec sequential;
  RegimeSpec hybrid;
  std::vector<Document> eval_general;
  std::vector<Document> eval_financial;
  std::vector<std::uint64_t> seeds;
};

struct StageResult {
  std::string name;
  std::uint64_t tokens = 0;
  double ppl_general = 0.0;
  double ppl_financial = 0.0;
  double final_loss = 0.0;
};

struct RegimeResult {
  Regime regime = Regime::hybrid;
  std::uint64_t seed = 0;
  std::vector<StageResult> stages;
  double ppl_general = 0.0;    // final model
  double ppl_financial = 0.0;  // final model
  std::uint64_t general_tokens = 0;
  /// General-eval perplexity after general-only training with the same general-token exposure.
  double ppl_general_reference = 0.0;
  double forgetting_delta = 0.0;  // ppl_general - ppl_general_reference
};

struct ForgettingReport {
  std::vector<std::uint64_t> seeds;
  std::uint64_t budget = 0;
  std::vector<RegimeResult> results;

  /// Seeds where the sequential regime's general perplexity rose during its last stage.
  std::size_t sequential_rise_count() const;
  /// Seeds where hybrid ends with lower general perplexity than sequential.
  std::size_t hybrid_better_count() const;
  const RegimeResult& result(Regime regime, std::uint64_t seed) const;
};

ForgettingReport run_forgetting_experiment(const ExperimentSpec& spec,
                                           const std::function<void(const std::string&)>& log = {});

std::string report_json(const ForgettingReport& report);
std::string report_table(const ForgettingReport& report);
std::string trajectory_json(std::span<const LossPoint> trajectory);
std::string trajectory_table(std::span<const LossPoint> trajectory);

// ---------------------------------------------------------------------------
// Synthetic two-domain corpora

struct SyntheticCorpusSpec {
  std::uint64_t seed = 0;
  std::size_t pretrain_docs = 200;
  std::size_t instruction_docs = 100;
  std::size_t words_per_doc = 24;
};

/// Documents whose letters come only from the domain's alphabet: a..m for
/// general, n..z for financial. Both domains share the structure: a fixed
/// lexicon and a word-successor chain derived from the domain alone, so
/// corpora drawn with different seeds are samples of one language.
std::vector<Document> synthetic_corpus(Domain domain, const SyntheticCorpusSpec& spec,
                                       const std::string& id_prefix);

}  // namespace hytune
