#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "mexp/sampler.hpp"

namespace mexp {

inline constexpr const char* kDatasetFormat = "mexp-ds-1";

/// One line: {"a":A,"b":B,"c":C,"d":D}. Byte-stable for a given instance.
std::string to_jsonl_line(const ModExpInstance& inst);

/// Parses one JSONL line; throws DataError unless it holds exactly the four
/// nonnegative integer fields with c >= 1.
ModExpInstance parse_jsonl_line(const std::string& line);

std::vector<ModExpInstance> read_dataset(const std::filesystem::path& path);

/// Writes `count` instances of `stream` to `path` plus the `<path>.meta.json`
/// sidecar. Returns the generation statistics.
GenerationStats write_dataset(const std::filesystem::path& path, const SamplerSpec& spec,
                              std::uint64_t count, Stream stream = Stream::dataset,
                              unsigned threads = 1);

void write_dataset(const std::filesystem::path& path, std::span<const ModExpInstance> instances);

std::filesystem::path metadata_path(const std::filesystem::path& dataset);

struct DatasetViolation {
  std::size_t line = 0;
  std::string reason;
};

/// Every row must satisfy d = a^b mod c and 0 <= d < c. Returns the first
/// violations found (empty when the dataset is valid).
std::vector<DatasetViolation> validate_dataset(std::span<const ModExpInstance> instances,
                                               std::size_t max_reports = 10);

}  // namespace mexp
