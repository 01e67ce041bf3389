#pragma once

#include <vector>

#include "hytune/corpus.hpp"
#include "hytune/run_config.hpp"
#include "hytune/trainer.hpp"

namespace hytune {

/// Training documents named by a run config: the Corpus directory, the two
/// per-domain directories, or synthetic corpora drawn from the run seed.
std::vector<Document> load_training_corpus(const RunConfig& config);

/// Sequential versus hybrid comparison described by a run config.
///
/// Sequential trains on the general documents under the pretraining block,
/// then continues on the financial documents under the finetuning block
/// (the pretraining block when absent). Hybrid trains once on all documents
/// with the pretraining block stretched to the combined budget: total,
/// warmup and decay tokens are scaled by the same factor.
ExperimentSpec build_experiment(const RunConfig& config);

}  // namespace hytune
