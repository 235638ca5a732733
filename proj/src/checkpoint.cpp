#include "mexp/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>

namespace mexp {

namespace {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

using Tensors = std::vector<std::pair<std::string, const Matrix<float>*>>;

nlohmann::json shape_list(const Tensors& tensors) {
  auto out = nlohmann::json::array();
  for (const auto& [name, m] : tensors) {
    out.push_back({{"name", name}, {"rows", m->rows()}, {"cols", m->cols()}});
  }
  return out;
}

void write_tensors(std::ofstream& out, const Tensors& tensors) {
  for (const auto& [name, m] : tensors) {
    out.write(reinterpret_cast<const char*>(m->data()),
              static_cast<std::streamsize>(m->size() * sizeof(float)));
  }
}

void read_tensors(std::ifstream& in, Parameters<float>& params, const std::filesystem::path& path) {
  for (auto& [name, m] : parameter_list(params)) {
    in.read(reinterpret_cast<char*>(m->data()), static_cast<std::streamsize>(m->size() * sizeof(float)));
    if (!in) {
      throw DataError("checkpoint: truncated payload at '" + name + "' in " + path.string());
    }
  }
}

nlohmann::json read_header(std::ifstream& in, const std::filesystem::path& path) {
  std::array<char, 5> magic{};
  in.read(magic.data(), magic.size());
  if (!in || std::memcmp(magic.data(), kCheckpointMagic, magic.size()) != 0) {
    throw DataError("checkpoint: bad magic in " + path.string());
  }
  std::array<unsigned char, 4> len_bytes{};
  in.read(reinterpret_cast<char*>(len_bytes.data()), len_bytes.size());
  if (!in) {
    throw DataError("checkpoint: truncated header in " + path.string());
  }
  const std::uint32_t len = len_bytes[0] | (len_bytes[1] << 8U) | (len_bytes[2] << 16U) |
                            (static_cast<std::uint32_t>(len_bytes[3]) << 24U);
  std::string text(len, '\0');
  in.read(text.data(), len);
  if (!in) {
    throw DataError("checkpoint: truncated header in " + path.string());
  }
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error&) {
    throw DataError("checkpoint: malformed header in " + path.string());
  }
  if (header.value("version", 0) != kCheckpointVersion) {
    throw DataError("checkpoint: unsupported version in " + path.string());
  }
  return header;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Model<float>& model,
                     const AdamState<float>* optimizer, const CheckpointMeta& meta) {
  const Tensors tensors = parameter_list(model.params);
  nlohmann::json header = {{"version", kCheckpointVersion},
                           {"model", model.config},
                           {"epoch", meta.epoch},
                           {"run", meta.run},
                           {"parameters", shape_list(tensors)},
                           {"optimizer", optimizer != nullptr}};
  if (optimizer != nullptr) {
    header["adam"] = optimizer->hyper;
    header["step"] = optimizer->step;
  }
  const std::string text = header.dump();
  const auto len = static_cast<std::uint32_t>(text.size());

  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) {
      throw DataError("checkpoint: cannot write " + tmp.string());
    }
    out.write(kCheckpointMagic, 5);
    const std::array<unsigned char, 4> len_bytes{
        static_cast<unsigned char>(len & 0xFFU), static_cast<unsigned char>((len >> 8U) & 0xFFU),
        static_cast<unsigned char>((len >> 16U) & 0xFFU), static_cast<unsigned char>(len >> 24U)};
    out.write(reinterpret_cast<const char*>(len_bytes.data()), len_bytes.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    write_tensors(out, tensors);
    if (optimizer != nullptr) {
      write_tensors(out, parameter_list(optimizer->m));
      write_tensors(out, parameter_list(optimizer->v));
    }
    if (!out) {
      throw DataError("checkpoint: write failed on " + tmp.string());
    }
  }
  std::filesystem::rename(tmp, path);
}

nlohmann::json read_checkpoint_header(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw DataError("checkpoint: cannot open " + path.string());
  }
  return read_header(in, path);
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw DataError("checkpoint: cannot open " + path.string());
  }
  const auto header = read_header(in, path);
  LoadedCheckpoint ck;
  ModelConfig config;
  try {
    config = header.at("model").get<ModelConfig>();
    config.validate();
  } catch (const std::exception& e) {
    throw DataError("checkpoint: invalid model config in " + path.string() + ": " + e.what());
  }
  ck.model = init_model<float>(config);
  const Tensors expected = parameter_list(std::as_const(ck.model.params));
  if (header.at("parameters") != shape_list(expected)) {
    throw DataError("checkpoint: parameter names or shapes do not match the model config in " +
                    path.string());
  }
  read_tensors(in, ck.model.params, path);
  ck.has_optimizer = header.value("optimizer", false);
  if (ck.has_optimizer) {
    ck.optimizer = make_adam(ck.model, header.at("adam").get<AdamConfig>());
    ck.optimizer.step = header.at("step").get<std::uint64_t>();
    read_tensors(in, ck.optimizer.m, path);
    read_tensors(in, ck.optimizer.v, path);
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw DataError("checkpoint: trailing bytes in " + path.string());
  }
  ck.meta.epoch = header.at("epoch").get<std::uint64_t>();
  ck.meta.run = header.value("run", nlohmann::json::object());
  return ck;
}

}  // namespace mexp
