#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mexp/sampler.hpp"

namespace mexp {

using TokenId = std::int32_t;

/// Digit tokens 0..base-1 followed by "+", "V3", "<pad>", "<eos>".
class Vocabulary {
 public:
  explicit Vocabulary(std::uint32_t base);

  std::uint32_t base() const { return base_; }
  std::size_t size() const { return base_ + 4; }

  TokenId digit(std::uint32_t value) const;
  TokenId plus() const { return static_cast<TokenId>(base_); }
  TokenId v3() const { return static_cast<TokenId>(base_ + 1); }
  TokenId pad() const { return static_cast<TokenId>(base_ + 2); }
  TokenId eos() const { return static_cast<TokenId>(base_ + 3); }

  bool is_digit(TokenId id) const { return id >= 0 && static_cast<std::uint32_t>(id) < base_; }
  std::string name(TokenId id) const;
  /// Inverse of name(); throws DataError for unknown tokens.
  TokenId id(const std::string& name) const;

 private:
  std::uint32_t base_;
};

Vocabulary build_vocabulary(std::uint32_t base);

enum class SeqRole { source, target };

struct TokenSeq {
  std::vector<TokenId> ids;
  SeqRole role = SeqRole::source;
};

/// Most significant digit first, no leading zeros, 0 -> [0].
std::vector<std::uint32_t> encode_int(std::uint64_t n, std::uint32_t base);

/// Throws DataError on an empty list, an out-of-range digit, overflow, or
/// (strict mode) a leading zero.
std::uint64_t decode_int(std::span<const std::uint32_t> digits, std::uint32_t base,
                         bool strict = true);

std::size_t digit_count(std::uint64_t n, std::uint32_t base);

/// source = V3 + a.. + b.. + c..; target = + d.. <eos>.
std::pair<TokenSeq, TokenSeq> encode_instance(const ModExpInstance& inst, const Vocabulary& vocab);

/// Strict inverse of encode_instance.
ModExpInstance decode_instance(const TokenSeq& source, const TokenSeq& target,
                               const Vocabulary& vocab);

/// Lenient readout of a generated answer. Drops one leading "+", truncates
/// at the first <eos>, drops trailing <pad>; the rest must be a canonical
/// digit run. Anything else is malformed (nullopt).
std::optional<std::uint64_t> decode_prediction(std::span<const TokenId> ids,
                                               const Vocabulary& vocab);

/// Space-separated token names, e.g. "V3 + 750 178 + 996 884 + 95".
std::string render(const TokenSeq& seq, const Vocabulary& vocab);

/// Full training string in compact form: "V3 +750 178 +996 884 +95 +1".
std::string render_template(const ModExpInstance& inst, std::uint32_t base);

/// Longest source for operands <= max_int and moduli <= c_max.
std::size_t max_source_len(std::uint64_t max_int, std::uint64_t c_max, std::uint32_t base);
/// Longest target (including "+" and <eos>) for d < c_max.
std::size_t max_target_len(std::uint64_t c_max, std::uint32_t base);

inline constexpr const char* kTokenizedFormat = "mexp-tok-1";

/// Pre-tokenized dataset: one JSON header line, then fixed-width rows of
/// little-endian uint16 ids (source padded to max_src, then target padded to
/// max_tgt).
void write_tokenized(const std::filesystem::path& path, std::span<const ModExpInstance> instances,
                     const Vocabulary& vocab, std::size_t max_src, std::size_t max_tgt);

struct TokenizedDataset {
  std::uint32_t base = 0;
  std::size_t max_src = 0;
  std::size_t max_tgt = 0;
  std::vector<TokenSeq> sources;
  std::vector<TokenSeq> targets;
};

TokenizedDataset read_tokenized(const std::filesystem::path& path);

}  // namespace mexp
