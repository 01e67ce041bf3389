#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "hytune/model.hpp"
#include "hytune/tensor.hpp"

namespace hytune {

/// Binary checkpoint container, format version 1. All multi-byte fields are
/// little-endian regardless of host:
///
///   magic     8 bytes  "HYTCKPT\0"
///   version   u32      1
///   endian    u8       1 (little)
///   config    7 x u64  layers, hidden_dim, attention_heads, vocab_size,
///                      embedding_rows, seq_len, tied_embeddings
///   n_meta    u32      then per entry: u16 name length, name bytes, i64 value
///   n_arrays  u32      then per entry: u16 name length, name bytes, u32 rank,
///                      rank x u64 extents, f64 values in row-major order
///
/// Model arrays follow ModelParams::named() order.
struct CheckpointData {
  ModelConfig config;
  std::vector<std::pair<std::string, std::int64_t>> metadata;
  std::vector<std::pair<std::string, Tensor>> arrays;

  std::optional<std::int64_t> meta(const std::string& name) const;
  const Tensor* array(const std::string& name) const;

  friend bool operator==(const CheckpointData&, const CheckpointData&) = default;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::string encode_checkpoint(const CheckpointData& data);
CheckpointData decode_checkpoint(const std::string& bytes);

void write_checkpoint(const std::filesystem::path& path, const CheckpointData& data);
CheckpointData read_checkpoint(const std::filesystem::path& path);

/// Model-only checkpoint data.
CheckpointData model_checkpoint(const ModelConfig& config, const ModelParams& params);
/// Rebuilds params from the model arrays of a checkpoint; extra arrays are ignored.
ModelParams params_from_checkpoint(const CheckpointData& data);

}  // namespace hytune
