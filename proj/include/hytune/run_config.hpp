#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "hytune/corpus.hpp"
#include "hytune/hyperparams.hpp"
#include "hytune/model.hpp"

namespace hytune {

/// Run configuration read from a sectioned key-value text file whose section
/// and key names follow the rows of the published hyperparameter table:
///
///   [Architecture hyperparameters]
///   Layers = 2
///   Hidden dim. = 32
///   ...
///   [Pretraining hyperparameters]
///   Learning rate = 3e-3
///   Adam (beta1, beta2) = (0.9, 0.95)
///   ...
///   [Multitask finetuning hyperparameters]
///   ...
///   [Run]
///   Seed = 7
///
/// Lines starting with '#' are comments. Unknown sections or keys, missing
/// required keys and badly typed values are validation errors naming the
/// file, line and field.
struct RunSection {
  std::uint64_t seed = 0;
  std::vector<std::uint64_t> seeds;
  std::string phase = "pretrain";
  LossPolicy loss_policy = LossPolicy::full;
  std::optional<std::filesystem::path> corpus;
  std::optional<std::filesystem::path> general_corpus;
  std::optional<std::filesystem::path> financial_corpus;
  std::optional<std::filesystem::path> general_eval;
  std::optional<std::filesystem::path> financial_eval;
  bool synthetic = false;
  std::size_t synthetic_pretrain_docs = 200;
  std::size_t synthetic_instruction_docs = 100;
  std::size_t synthetic_words_per_doc = 24;
  std::uint64_t checkpoint_every = 0;
};

struct RunConfig {
  ModelConfig model;
  TrainingHyperparams pretrain;
  std::optional<TrainingHyperparams> finetune;
  RunSection run;

  /// Hyperparameters for run.phase.
  const TrainingHyperparams& phase_hyper() const;
};

RunConfig parse_run_config(const std::string& text, const std::string& source = "<config>",
                           const std::filesystem::path& base_dir = {});
RunConfig load_run_config(const std::filesystem::path& path);

/// Canonical text rendering; parse_run_config(render_run_config(c)) == c.
std::string render_run_config(const RunConfig& config);

}  // namespace hytune
