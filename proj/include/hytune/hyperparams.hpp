#pragma once

#include <cstdint>

#include "hytune/numerics.hpp"

namespace hytune {

/// Optimization settings of one training phase.
struct TrainingHyperparams {
  std::uint64_t global_batch = 8;   // sequences per step
  std::uint64_t total_tokens = 0;   // masked-token budget
  Schedule schedule;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double adam_eps = 1e-8;
  double weight_decay = 0.1;
  double grad_clip = 1.0;

  void validate() const;
};

}  // namespace hytune
