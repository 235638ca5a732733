#include "mexp/dataset_io.hpp"

#include <fstream>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "mexp/numtheory.hpp"

namespace mexp {

std::string to_jsonl_line(const ModExpInstance& inst) {
  return fmt::format("{{\"a\":{},\"b\":{},\"c\":{},\"d\":{}}}", inst.a, inst.b, inst.c, inst.d);
}

ModExpInstance parse_jsonl_line(const std::string& line) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(std::string("dataset: invalid JSON: ") + e.what());
  }
  if (!j.is_object() || j.size() != 4) {
    throw DataError("dataset: expected an object with fields a, b, c, d");
  }
  auto field = [&j](const char* name) {
    const auto it = j.find(name);
    if (it == j.end() || !it->is_number_unsigned()) {
      throw DataError(std::string("dataset: field '") + name + "' missing or not a nonnegative integer");
    }
    return it->get<std::uint64_t>();
  };
  ModExpInstance inst{field("a"), field("b"), field("c"), field("d")};
  if (inst.c == 0) {
    throw DataError("dataset: modulus c must be >= 1");
  }
  return inst;
}

std::vector<ModExpInstance> read_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw DataError("dataset: cannot open " + path.string());
  }
  std::vector<ModExpInstance> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) {
      continue;
    }
    try {
      out.push_back(parse_jsonl_line(line));
    } catch (const DataError& e) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

std::filesystem::path metadata_path(const std::filesystem::path& dataset) {
  return std::filesystem::path(dataset.string() + ".meta.json");
}

GenerationStats write_dataset(const std::filesystem::path& path, const SamplerSpec& spec,
                              std::uint64_t count, Stream stream, unsigned threads) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw DataError("dataset: cannot write " + path.string());
  }
  std::string line;
  const auto stats = generate_dataset(
      spec, count,
      [&](const ModExpInstance& inst) {
        line = to_jsonl_line(inst);
        line += '\n';
        out.write(line.data(), static_cast<std::streamsize>(line.size()));
        if (!out) {
          throw DataError("dataset: write failed on " + path.string());
        }
      },
      stream, 0, threads);
  out.close();

  nlohmann::json meta = {{"format", kDatasetFormat},
                         {"count", count},
                         {"stream", static_cast<std::uint64_t>(stream)},
                         {"spec", spec},
                         {"stats", stats}};
  std::ofstream meta_out(metadata_path(path), std::ios::trunc);
  if (!meta_out) {
    throw DataError("dataset: cannot write " + metadata_path(path).string());
  }
  meta_out << meta.dump(2) << '\n';
  return stats;
}

void write_dataset(const std::filesystem::path& path, std::span<const ModExpInstance> instances) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw DataError("dataset: cannot write " + path.string());
  }
  for (const auto& inst : instances) {
    out << to_jsonl_line(inst) << '\n';
  }
  if (!out) {
    throw DataError("dataset: write failed on " + path.string());
  }
}

std::vector<DatasetViolation> validate_dataset(std::span<const ModExpInstance> instances,
                                               std::size_t max_reports) {
  std::vector<DatasetViolation> out;
  for (std::size_t i = 0; i < instances.size() && out.size() < max_reports; ++i) {
    const auto& inst = instances[i];
    if (inst.c == 0) {
      out.push_back({i + 1, "c = 0"});
    } else if (inst.d >= inst.c) {
      out.push_back({i + 1, "d >= c"});
    } else if (numtheory::modpow(inst.a, inst.b, inst.c) != inst.d) {
      out.push_back({i + 1, "d != a^b mod c"});
    }
  }
  return out;
}

}  // namespace mexp
