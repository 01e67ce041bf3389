#include "hytune/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace hytune {

namespace {

constexpr char kMagic[8] = {'H', 'Y', 'T', 'C', 'K', 'P', 'T', '\0'};

template <typename T>
void put(std::string& out, T value) {
  static_assert(std::is_integral_v<T>);
  using U = std::make_unsigned_t<T>;
  auto bits = static_cast<U>(value);
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out.push_back(static_cast<char>(bits & 0xffu));
    bits = static_cast<U>(bits >> 8);
  }
}

void put_name(std::string& out, const std::string& name) {
  if (name.size() > 0xffff) {
    throw ValidationError("checkpoint: name too long: " + name.substr(0, 32) + "...");
  }
  put<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
  out += name;
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    using U = std::make_unsigned_t<T>;
    U bits = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      bits |= static_cast<U>(static_cast<U>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i));
    }
    pos_ += sizeof(T);
    return static_cast<T>(bits);
  }

  std::string get_bytes(std::size_t n) {
    need(n);
    std::string out = bytes_.substr(pos_, n);
    pos_ += n;
    return out;
  }

  std::string get_name() { return get_bytes(get<std::uint16_t>()); }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) {
      throw ValidationError("checkpoint: truncated at byte " + std::to_string(pos_));
    }
  }

  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::optional<std::int64_t> CheckpointData::meta(const std::string& name) const {
  for (const auto& [key, value] : metadata) {
    if (key == name) {
      return value;
    }
  }
  return std::nullopt;
}

const Tensor* CheckpointData::array(const std::string& name) const {
  for (const auto& [key, value] : arrays) {
    if (key == name) {
      return &value;
    }
  }
  return nullptr;
}

std::string encode_checkpoint(const CheckpointData& data) {
  std::string out(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint8_t>(out, 1);
  const ModelConfig& c = data.config;
  for (std::uint64_t field : {std::uint64_t{c.layers}, std::uint64_t{c.hidden_dim},
                              std::uint64_t{c.attention_heads}, std::uint64_t{c.vocab_size},
                              std::uint64_t{c.embedding_rows}, std::uint64_t{c.seq_len},
                              std::uint64_t{c.tied_embeddings ? 1u : 0u}}) {
    put<std::uint64_t>(out, field);
  }
  put<std::uint32_t>(out, static_cast<std::uint32_t>(data.metadata.size()));
  for (const auto& [name, value] : data.metadata) {
    put_name(out, name);
    put<std::int64_t>(out, value);
  }
  put<std::uint32_t>(out, static_cast<std::uint32_t>(data.arrays.size()));
  for (const auto& [name, tensor] : data.arrays) {
    put_name(out, name);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(tensor.rank()));
    for (std::size_t extent : tensor.shape()) {
      put<std::uint64_t>(out, extent);
    }
    for (double x : tensor.data()) {
      put<std::uint64_t>(out, std::bit_cast<std::uint64_t>(x));
    }
  }
  return out;
}

CheckpointData decode_checkpoint(const std::string& bytes) {
  Reader in(bytes);
  if (in.get_bytes(sizeof(kMagic)) != std::string(kMagic, sizeof(kMagic))) {
    throw ValidationError("checkpoint: bad magic");
  }
  const auto version = in.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw ValidationError("checkpoint: unsupported format version " + std::to_string(version));
  }
  if (in.get<std::uint8_t>() != 1) {
    throw ValidationError("checkpoint: unsupported endianness marker");
  }
  CheckpointData data;
  ModelConfig& c = data.config;
  c.layers = in.get<std::uint64_t>();
  c.hidden_dim = in.get<std::uint64_t>();
  c.attention_heads = in.get<std::uint64_t>();
  c.vocab_size = in.get<std::uint64_t>();
  c.embedding_rows = in.get<std::uint64_t>();
  c.seq_len = in.get<std::uint64_t>();
  c.tied_embeddings = in.get<std::uint64_t>() != 0;
  c.validate();

  const auto n_meta = in.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_meta; ++i) {
    std::string name = in.get_name();
    data.metadata.emplace_back(std::move(name), in.get<std::int64_t>());
  }
  const auto n_arrays = in.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_arrays; ++i) {
    std::string name = in.get_name();
    const auto rank = in.get<std::uint32_t>();
    std::vector<std::size_t> shape(rank);
    for (auto& extent : shape) {
      extent = in.get<std::uint64_t>();
    }
    Tensor tensor(shape);
    for (double& x : tensor.data()) {
      x = std::bit_cast<double>(in.get<std::uint64_t>());
    }
    data.arrays.emplace_back(std::move(name), std::move(tensor));
  }
  if (!in.done()) {
    throw ValidationError("checkpoint: trailing bytes after last array");
  }
  return data;
}

void write_checkpoint(const std::filesystem::path& path, const CheckpointData& data) {
  const std::string bytes = encode_checkpoint(data);
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) {
      throw Error("cannot open " + tmp.string() + " for writing");
    }
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
      throw Error("failed writing " + tmp.string());
    }
  }
  std::filesystem::rename(tmp, path);
}

CheckpointData read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw ValidationError("cannot open checkpoint " + path.string());
  }
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return decode_checkpoint(buffer.str());
}

CheckpointData model_checkpoint(const ModelConfig& config, const ModelParams& params) {
  CheckpointData data;
  data.config = config;
  for (const ConstNamedTensor& n : params.named()) {
    data.arrays.emplace_back(n.name, *n.tensor);
  }
  return data;
}

ModelParams params_from_checkpoint(const CheckpointData& data) {
  ModelParams params = ModelParams::zeros(data.config);
  for (const NamedTensor& n : params.named()) {
    const Tensor* stored = data.array(n.name);
    if (stored == nullptr) {
      throw ValidationError("checkpoint: missing array '" + n.name + "'");
    }
    if (!stored->same_shape(*n.tensor)) {
      throw ValidationError("checkpoint: array '" + n.name + "' has shape " +
                            shape_string(stored->shape()) + ", expected " +
                            shape_string(n.tensor->shape()));
    }
    *n.tensor = *stored;
  }
  return params;
}

}  // namespace hytune
