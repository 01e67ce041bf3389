#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hytune/hyperparams.hpp"
#include "hytune/model.hpp"

namespace hytune {

/// Bytes per parameter under mixed-precision Adam: fp16 weights and grads,
/// fp32 master weights plus two fp32 moments.
struct PrecisionBytes {
  std::uint64_t weight = 2;
  std::uint64_t grad = 2;
  std::uint64_t optimizer = 12;
};

struct ParallelPlan {
  std::vector<std::size_t> stages;  // layers per pipeline stage
  std::size_t dp_ranks = 1;
  PrecisionBytes bytes;
};

struct MemoryEstimate {
  double weights = 0.0;
  double gradients = 0.0;
  double optimizer_shard = 0.0;
  double total = 0.0;
};

/// Balanced contiguous split: the first (layers % stages) stages take one extra layer.
std::vector<std::size_t> pipeline_partition(std::size_t layers, std::size_t stages);

/// Per-rank bytes under ZeRO stage 1: weights and gradients replicated,
/// optimizer states sharded over dp_ranks.
MemoryEstimate zero1_memory(std::uint64_t param_count, std::size_t dp_ranks,
                            const PrecisionBytes& bytes = {});

struct Preset {
  std::string name;
  std::string phase;
  ModelConfig model;
  TrainingHyperparams training;
};

std::vector<std::string> preset_names();

/// Table values for a named model; phase is "pretrain" or "finetune".
Preset load_preset(const std::string& name, const std::string& phase = "pretrain");

struct StageReport {
  std::size_t first_layer = 0;
  std::size_t layers = 0;
  std::uint64_t params = 0;
  MemoryEstimate memory;
};

struct PlanReport {
  Preset preset;
  std::uint64_t param_count = 0;
  ParallelPlan plan;
  MemoryEstimate full_model;  // ZeRO-1 estimate for the unsplit model
  std::vector<StageReport> stages;
};

/// Stage 0 also holds the embedding and its LayerNorm, the last stage the final LayerNorm.
PlanReport make_plan_report(const Preset& preset, std::size_t stages, std::size_t dp_ranks);

std::string plan_report_json(const PlanReport& report);
std::string plan_report_table(const PlanReport& report);

}  // namespace hytune
