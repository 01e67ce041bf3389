#include "hytune/planner.hpp"

#include <cstdio>
#include <iomanip>
#include <sstream>

#include <json.hpp>

#include "hytune/errors.hpp"

namespace hytune {

void TrainingHyperparams::validate() const {
  if (global_batch == 0) {
    throw ValidationError("global batch size must be at least 1");
  }
  if (total_tokens == 0) {
    throw ValidationError("total token budget must be positive");
  }
  schedule.validate();
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ValidationError("Adam betas must lie in [0, 1)");
  }
  if (weight_decay < 0.0) {
    throw ValidationError("weight decay must be non-negative");
  }
  if (!(grad_clip > 0.0)) {
    throw ValidationError("gradient clipping threshold must be positive");
  }
}

std::vector<std::size_t> pipeline_partition(std::size_t layers, std::size_t stages) {
  if (stages == 0) {
    throw ValidationError("pipeline_partition: need at least one stage");
  }
  if (stages > layers) {
    throw ValidationError("pipeline_partition: " + std::to_string(stages) +
                          " stages for only " + std::to_string(layers) + " layers");
  }
  std::vector<std::size_t> out(stages, layers / stages);
  for (std::size_t i = 0; i < layers % stages; ++i) {
    out[i] += 1;
  }
  return out;
}

MemoryEstimate zero1_memory(std::uint64_t param_count, std::size_t dp_ranks,
                            const PrecisionBytes& bytes) {
  if (param_count == 0) {
    throw ValidationError("zero1_memory: parameter count must be positive");
  }
  if (dp_ranks == 0) {
    throw ValidationError("zero1_memory: need at least one data-parallel rank");
  }
  const double p = static_cast<double>(param_count);
  MemoryEstimate m;
  m.weights = static_cast<double>(bytes.weight) * p;
  m.gradients = static_cast<double>(bytes.grad) * p;
  m.optimizer_shard = static_cast<double>(bytes.optimizer) * p / static_cast<double>(dp_ranks);
  m.total = m.weights + m.gradients + m.optimizer_shard;
  return m;
}

// ---------------------------------------------------------------------------

std::vector<std::string> preset_names() { return {"bloom-7b", "bloom-176b"}; }

Preset load_preset(const std::string& name, const std::string& phase) {
  Preset p;
  p.name = name;
  p.phase = phase;
  p.model.vocab_size = 250'680;
  p.model.embedding_rows = 250'880;
  p.model.seq_len = 2048;
  p.model.tied_embeddings = true;

  TrainingHyperparams& t = p.training;
  t.beta1 = 0.9;
  t.beta2 = 0.95;
  t.grad_clip = 1.0;

  if (name == "bloom-7b") {
    p.model.layers = 30;
    p.model.hidden_dim = 4096;
    p.model.attention_heads = 32;
    t.global_batch = 512;
    t.schedule.peak_lr = 1.2e-4;
    t.schedule.min_lr = 1e-5;
    t.total_tokens = 341'000'000'000ULL;
  } else if (name == "bloom-176b") {
    p.model.layers = 70;
    p.model.hidden_dim = 14336;
    p.model.attention_heads = 112;
    t.global_batch = 2048;
    t.schedule.peak_lr = 6e-5;
    t.schedule.min_lr = 6e-6;
    t.total_tokens = 366'000'000'000ULL;
  } else {
    std::string valid;
    for (const std::string& n : preset_names()) {
      valid += (valid.empty() ? "" : ", ") + n;
    }
    throw ValidationError("unknown preset '" + name + "'; valid presets: " + valid);
  }

  if (phase == "pretrain") {
    t.schedule.warmup_tokens = 375e6;
    t.schedule.decay_tokens = 410e9;
    t.schedule.style = DecayStyle::cosine;
    t.weight_decay = 1e-1;
  } else if (phase == "finetune") {
    t.global_batch = 2048;
    t.total_tokens = 13'000'000'000ULL;
    t.schedule.peak_lr = 2.0e-5;
    t.schedule.min_lr = 2.0e-5;
    t.schedule.warmup_tokens = 0;
    t.schedule.decay_tokens = 13e9;
    t.schedule.style = DecayStyle::constant;
    t.weight_decay = 1e-4;
  } else {
    throw ValidationError("unknown phase '" + phase + "'; valid phases: pretrain, finetune");
  }
  p.model.validate();
  t.validate();
  return p;
}

// ---------------------------------------------------------------------------

PlanReport make_plan_report(const Preset& preset, std::size_t stages, std::size_t dp_ranks) {
  PlanReport r;
  r.preset = preset;
  r.param_count = count_params(preset.model);
  r.plan.stages = pipeline_partition(preset.model.layers, stages);
  r.plan.dp_ranks = dp_ranks;
  r.full_model = zero1_memory(r.param_count, dp_ranks, r.plan.bytes);

  const std::uint64_t h = preset.model.hidden_dim;
  const std::uint64_t per_layer = 12 * h * h + 13 * h;
  const std::uint64_t embedding =
      preset.model.embedding_rows * h * (preset.model.tied_embeddings ? 1 : 2) + 2 * h;
  std::size_t first = 0;
  for (std::size_t s = 0; s < r.plan.stages.size(); ++s) {
    StageReport st;
    st.first_layer = first;
    st.layers = r.plan.stages[s];
    st.params = st.layers * per_layer;
    if (s == 0) {
      st.params += embedding;
    }
    if (s + 1 == r.plan.stages.size()) {
      st.params += 2 * h;
    }
    st.memory = zero1_memory(st.params, dp_ranks, r.plan.bytes);
    r.stages.push_back(st);
    first += st.layers;
  }
  return r;
}

namespace {

nlohmann::json memory_json(const MemoryEstimate& m) {
  return {{"weights_bytes", m.weights},
          {"gradients_bytes", m.gradients},
          {"optimizer_shard_bytes", m.optimizer_shard},
          {"total_bytes", m.total}};
}

std::string with_commas(std::uint64_t v) {
  std::string digits = std::to_string(v);
  std::string out;
  for (std::size_t i = 0; i < digits.size(); ++i) {
    if (i > 0 && (digits.size() - i) % 3 == 0) {
      out.push_back(',');
    }
    out.push_back(digits[i]);
  }
  return out;
}

std::string gb(double bytes) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f GB", bytes / 1e9);
  return buf;
}

}  // namespace

std::string plan_report_json(const PlanReport& r) {
  nlohmann::json j;
  j["preset"] = r.preset.name;
  j["phase"] = r.preset.phase;
  j["parameters"] = r.param_count;
  j["parameters_millions"] = static_cast<std::uint64_t>((r.param_count + 500'000) / 1'000'000);
  j["layers"] = r.preset.model.layers;
  j["hidden_dim"] = r.preset.model.hidden_dim;
  j["attention_heads"] = r.preset.model.attention_heads;
  j["vocab_size"] = r.preset.model.vocab_size;
  j["embedding_rows"] = r.preset.model.embedding_rows;
  j["pipeline_stages"] = r.plan.stages;
  j["dp_ranks"] = r.plan.dp_ranks;
  j["bytes_per_param"] = {{"weight", r.plan.bytes.weight},
                          {"grad", r.plan.bytes.grad},
                          {"optimizer", r.plan.bytes.optimizer}};
  j["zero1_full_model"] = memory_json(r.full_model);
  j["zero1_full_model"]["bytes_per_param"] = r.full_model.total / static_cast<double>(r.param_count);
  nlohmann::json stages = nlohmann::json::array();
  for (const StageReport& s : r.stages) {
    nlohmann::json js = memory_json(s.memory);
    js["first_layer"] = s.first_layer;
    js["layers"] = s.layers;
    js["parameters"] = s.params;
    stages.push_back(js);
  }
  j["stages"] = stages;
  return j.dump(2);
}

std::string plan_report_table(const PlanReport& r) {
  std::ostringstream out;
  const double per_param = r.full_model.total / static_cast<double>(r.param_count);
  out << "preset            " << r.preset.name << " (" << r.preset.phase << ")\n";
  out << "parameters        " << with_commas(r.param_count) << " ("
      << with_commas((r.param_count + 500'000) / 1'000'000) << "M)\n";
  out << "pipeline stages   " << r.plan.stages.size() << " x dp ranks " << r.plan.dp_ranks << "\n";
  out << "zero-1 per rank   " << std::setprecision(4) << per_param << "P = " << gb(r.full_model.total)
      << " (weights " << gb(r.full_model.weights) << ", grads " << gb(r.full_model.gradients)
      << ", optimizer shard " << gb(r.full_model.optimizer_shard) << ")\n\n";
  out << std::left << std::setw(7) << "stage" << std::setw(9) << "layers" << std::setw(18)
      << "parameters" << std::setw(14) << "weights" << std::setw(14) << "grads" << std::setw(14)
      << "opt shard" << "total\n";
  for (std::size_t i = 0; i < r.stages.size(); ++i) {
    const StageReport& s = r.stages[i];
    out << std::left << std::setw(7) << i << std::setw(9)
        << (std::to_string(s.first_layer) + "-" + std::to_string(s.first_layer + s.layers - 1))
        << std::setw(18) << with_commas(s.params) << std::setw(14) << gb(s.memory.weights)
        << std::setw(14) << gb(s.memory.gradients) << std::setw(14) << gb(s.memory.optimizer_shard)
        << gb(s.memory.total) << "\n";
  }
  return out.str();
}

}  // namespace hytune
