// SPDX-License-Identifier: Apache-2.0
#include "cbn/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <set>

#include <json.hpp>

namespace cbn {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

using json = nlohmann::json;

namespace {

class Writer {
 public:
  template <typename U>
  void put(U value) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&value);
    bytes.insert(bytes.end(), p, p + sizeof(U));
  }
  void put_bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    bytes.insert(bytes.end(), p, p + n);
  }
  void put_string(const std::string& s) {
    put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    put_bytes(s.data(), s.size());
  }
  std::vector<std::uint8_t> bytes;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

  template <typename U>
  U get(const char* what) {
    U value;
    std::memcpy(&value, take(sizeof(U), what), sizeof(U));
    return value;
  }
  const std::uint8_t* take(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      throw CheckpointError(CheckpointError::Kind::truncated,
                            std::string("checkpoint truncated while reading ") + what);
    }
    const auto* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::string get_string(const char* what) {
    const auto n = get<std::uint32_t>(what);
    const auto* p = take(n, what);
    return std::string(reinterpret_cast<const char*>(p), n);
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

template <typename T>
StoredTensor stored(std::string name, const Shape& shape, std::span<const T> values) {
  return {std::move(name), dtype_of<T>(), shape, std::vector<double>(values.begin(), values.end())};
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const CheckpointFile& file) {
  Writer w;
  w.put_bytes(kCheckpointMagic, 4);
  w.put<std::uint16_t>(kCheckpointVersion);
  w.put_string(file.header_json);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(file.tensors.size()));
  for (const auto& t : file.tensors) {
    w.put_string(t.name);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(t.dtype));
    w.put<std::uint8_t>(static_cast<std::uint8_t>(t.shape.size()));
    for (auto e : t.shape) w.put<std::uint32_t>(static_cast<std::uint32_t>(e));
    if (t.dtype == DType::f32) {
      for (double v : t.values) w.put<float>(static_cast<float>(v));
    } else {
      for (double v : t.values) w.put<double>(v);
    }
  }
  return std::move(w.bytes);
}

CheckpointFile decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  const auto* magic = r.take(4, "magic");
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0) {
    throw CheckpointError(CheckpointError::Kind::bad_magic, "not a checkpoint: bad magic bytes");
  }
  const auto version = r.get<std::uint16_t>("version");
  if (version != kCheckpointVersion) {
    throw CheckpointError(CheckpointError::Kind::version_mismatch,
                          "checkpoint format version " + std::to_string(version) + ", expected " +
                              std::to_string(kCheckpointVersion));
  }
  CheckpointFile file;
  file.header_json = r.get_string("header");
  const auto count = r.get<std::uint32_t>("tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    StoredTensor t;
    t.name = r.get_string("tensor name");
    const auto code = r.get<std::uint8_t>("dtype");
    if (code > 1) {
      throw CheckpointError(CheckpointError::Kind::bad_header,
                            "tensor '" + t.name + "' has unknown dtype code " + std::to_string(code));
    }
    t.dtype = static_cast<DType>(code);
    const auto rank = r.get<std::uint8_t>("rank");
    for (std::uint8_t d = 0; d < rank; ++d) t.shape.push_back(r.get<std::uint32_t>("extent"));
    const std::size_t n = shape_numel(t.shape);
    const std::size_t width = t.dtype == DType::f32 ? 4 : 8;
    if (n > (std::size_t{1} << 40) / width) {
      throw CheckpointError(CheckpointError::Kind::bad_header, "tensor '" + t.name + "' has absurd extents");
    }
    const auto* p = r.take(n * width, "tensor payload");
    t.values.resize(n);
    for (std::size_t j = 0; j < n; ++j) {
      if (t.dtype == DType::f32) {
        float v;
        std::memcpy(&v, p + 4 * j, 4);
        t.values[j] = v;
      } else {
        std::memcpy(&t.values[j], p + 8 * j, 8);
      }
    }
    file.tensors.push_back(std::move(t));
  }
  if (!r.done()) throw CheckpointError(CheckpointError::Kind::bad_header, "trailing bytes after last tensor");
  return file;
}

void write_checkpoint_file(const std::filesystem::path& path, const CheckpointFile& file) {
  const auto bytes = encode_checkpoint(file);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

CheckpointFile read_checkpoint_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

template <typename T>
CheckpointFile make_checkpoint(const Model<T>& model, const TrainingState<T>* state) {
  CheckpointFile file;
  json header;
  header["format"] = "cbn-checkpoint";
  header["model"] = json::parse(model.config.to_json());
  header["step"] = state ? state->step : 0;
  header["epoch"] = state ? state->epoch : 0;
  header["optimizer"] = state != nullptr && !state->first_moment.empty();
  file.header_json = header.dump();

  const auto params = model.parameters();
  for (const auto& p : params) file.tensors.push_back(stored<T>(p.name, p.tensor.shape(), p.tensor.data()));
  for (const auto& [name, stats] : model.norm_stats()) {
    const Shape shape{stats->running_mean.size()};
    file.tensors.push_back(stored<T>(name + ".running_mean", shape, std::span<const T>(stats->running_mean)));
    file.tensors.push_back(stored<T>(name + ".running_var", shape, std::span<const T>(stats->running_var)));
  }
  if (state && !state->first_moment.empty()) {
    for (const auto& p : params) {
      const auto m = state->first_moment.find(p.name);
      const auto v = state->second_moment.find(p.name);
      if (m == state->first_moment.end() || v == state->second_moment.end()) continue;
      file.tensors.push_back(stored<T>("adam.m." + p.name, p.tensor.shape(), std::span<const T>(m->second)));
      file.tensors.push_back(stored<T>("adam.v." + p.name, p.tensor.shape(), std::span<const T>(v->second)));
    }
  }
  return file;
}

template <typename T>
Model<T> restore_checkpoint(const CheckpointFile& file, TrainingState<T>* state) {
  json header;
  try {
    header = json::parse(file.header_json);
  } catch (const json::exception& e) {
    throw CheckpointError(CheckpointError::Kind::bad_header, std::string("checkpoint header is not JSON: ") + e.what());
  }
  if (!header.contains("model") || !header["model"].is_object()) {
    throw CheckpointError(CheckpointError::Kind::bad_header, "checkpoint header has no model config");
  }
  const ModelConfig config = ModelConfig::from_json(header["model"].dump());
  Model<T> model = init_model<T>(config, config.seed);

  std::map<std::string, const StoredTensor*> by_name;
  for (const auto& t : file.tensors) {
    if (!by_name.emplace(t.name, &t).second) {
      throw CheckpointError(CheckpointError::Kind::bad_header, "duplicate tensor '" + t.name + "'");
    }
  }
  std::set<std::string> used;
  auto fetch = [&](const std::string& name, const Shape& shape, bool required) -> const StoredTensor* {
    const auto it = by_name.find(name);
    if (it == by_name.end()) {
      if (required) throw CheckpointError(CheckpointError::Kind::missing_tensor, "checkpoint lacks tensor '" + name + "'");
      return nullptr;
    }
    if (it->second->shape != shape) {
      throw CheckpointError(CheckpointError::Kind::shape_mismatch, "tensor '" + name + "' stored as " +
                                                                      shape_str(it->second->shape) + ", model expects " +
                                                                      shape_str(shape));
    }
    used.insert(name);
    return it->second;
  };

  const auto params = model.parameters();
  for (const auto& p : params) {
    auto t = p.tensor;
    const auto* src = fetch(p.name, t.shape(), true);
    std::copy(src->values.begin(), src->values.end(), t.data().begin());
  }
  for (auto& s : model.norm_stats()) {
    const Shape shape{s.stats->running_mean.size()};
    const auto* mean = fetch(s.name + ".running_mean", shape, true);
    const auto* var = fetch(s.name + ".running_var", shape, true);
    std::copy(mean->values.begin(), mean->values.end(), s.stats->running_mean.begin());
    std::copy(var->values.begin(), var->values.end(), s.stats->running_var.begin());
  }
  TrainingState<T> restored;
  for (const auto& p : params) {
    const auto* m = fetch("adam.m." + p.name, p.tensor.shape(), false);
    const auto* v = fetch("adam.v." + p.name, p.tensor.shape(), false);
    if (m && v) {
      restored.first_moment[p.name].assign(m->values.begin(), m->values.end());
      restored.second_moment[p.name].assign(v->values.begin(), v->values.end());
    }
  }
  for (const auto& t : file.tensors) {
    if (!used.contains(t.name)) {
      throw CheckpointError(CheckpointError::Kind::unknown_tensor, "checkpoint has unknown tensor '" + t.name + "'");
    }
  }
  restored.step = header.value("step", std::uint64_t{0});
  restored.epoch = header.value("epoch", std::uint64_t{0});
  if (state) *state = std::move(restored);
  return model;
}

template <typename T>
void save_checkpoint(const Model<T>& model, const std::filesystem::path& path, const TrainingState<T>* state) {
  write_checkpoint_file(path, make_checkpoint(model, state));
}

template <typename T>
Model<T> load_checkpoint(const std::filesystem::path& path, TrainingState<T>* state) {
  return restore_checkpoint<T>(read_checkpoint_file(path), state);
}

#define CBN_INSTANTIATE_CHECKPOINT(T)                                                             \
  template CheckpointFile make_checkpoint(const Model<T>&, const TrainingState<T>*);              \
  template Model<T> restore_checkpoint(const CheckpointFile&, TrainingState<T>*);                 \
  template void save_checkpoint(const Model<T>&, const std::filesystem::path&, const TrainingState<T>*); \
  template Model<T> load_checkpoint(const std::filesystem::path&, TrainingState<T>*);

CBN_INSTANTIATE_CHECKPOINT(float)
CBN_INSTANTIATE_CHECKPOINT(double)

}  // namespace cbn
