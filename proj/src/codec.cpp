#include "mexp/codec.hpp"

#include <algorithm>
#include <fstream>
#include <limits>

#include <nlohmann/json.hpp>

namespace mexp {

Vocabulary::Vocabulary(std::uint32_t base) : base_(base) {
  if (base < 2) {
    throw UsageError("vocabulary: base must be >= 2");
  }
}

TokenId Vocabulary::digit(std::uint32_t value) const {
  if (value >= base_) {
    throw DataError("vocabulary: digit " + std::to_string(value) + " out of range for base " +
                    std::to_string(base_));
  }
  return static_cast<TokenId>(value);
}

std::string Vocabulary::name(TokenId id) const {
  if (is_digit(id)) {
    return std::to_string(id);
  }
  if (id == plus()) {
    return "+";
  }
  if (id == v3()) {
    return "V3";
  }
  if (id == pad()) {
    return "<pad>";
  }
  if (id == eos()) {
    return "<eos>";
  }
  throw DataError("vocabulary: token id " + std::to_string(id) + " out of range");
}

TokenId Vocabulary::id(const std::string& name) const {
  if (name == "+") {
    return plus();
  }
  if (name == "V3") {
    return v3();
  }
  if (name == "<pad>") {
    return pad();
  }
  if (name == "<eos>") {
    return eos();
  }
  if (!name.empty() && std::all_of(name.begin(), name.end(), [](char ch) { return ch >= '0' && ch <= '9'; })) {
    if (name.size() > 1 && name[0] == '0') {
      throw DataError("vocabulary: non-canonical digit token '" + name + "'");
    }
    const auto value = std::stoull(name);
    if (value < base_) {
      return static_cast<TokenId>(value);
    }
  }
  throw DataError("vocabulary: unknown token '" + name + "'");
}

Vocabulary build_vocabulary(std::uint32_t base) { return Vocabulary(base); }

std::vector<std::uint32_t> encode_int(std::uint64_t n, std::uint32_t base) {
  if (base < 2) {
    throw UsageError("encode_int: base must be >= 2");
  }
  std::vector<std::uint32_t> digits;
  do {
    digits.push_back(static_cast<std::uint32_t>(n % base));
    n /= base;
  } while (n > 0);
  std::reverse(digits.begin(), digits.end());
  return digits;
}

std::uint64_t decode_int(std::span<const std::uint32_t> digits, std::uint32_t base, bool strict) {
  if (base < 2) {
    throw UsageError("decode_int: base must be >= 2");
  }
  if (digits.empty()) {
    throw DataError("decode_int: empty digit list");
  }
  if (strict && digits.size() > 1 && digits.front() == 0) {
    throw DataError("decode_int: leading zero digit");
  }
  std::uint64_t value = 0;
  for (const std::uint32_t d : digits) {
    if (d >= base) {
      throw DataError("decode_int: digit " + std::to_string(d) + " out of range for base " +
                      std::to_string(base));
    }
    if (value > (std::numeric_limits<std::uint64_t>::max() - d) / base) {
      throw DataError("decode_int: value overflows 64 bits");
    }
    value = value * base + d;
  }
  return value;
}

std::size_t digit_count(std::uint64_t n, std::uint32_t base) {
  std::size_t count = 1;
  while (n >= base) {
    n /= base;
    ++count;
  }
  return count;
}

namespace {

void append_group(std::vector<TokenId>& ids, std::uint64_t n, const Vocabulary& vocab) {
  ids.push_back(vocab.plus());
  for (const std::uint32_t digit : encode_int(n, vocab.base())) {
    ids.push_back(vocab.digit(digit));
  }
}

// Splits "+ d.. + d.." into integer groups; strict about structure.
std::vector<std::uint64_t> parse_groups(std::span<const TokenId> ids, const Vocabulary& vocab) {
  std::vector<std::uint64_t> values;
  std::vector<std::uint32_t> digits;
  bool open = false;
  auto close = [&] {
    if (open) {
      values.push_back(decode_int(digits, vocab.base(), true));
      digits.clear();
    }
  };
  for (const TokenId id : ids) {
    if (id == vocab.plus()) {
      close();
      open = true;
    } else if (vocab.is_digit(id) && open) {
      digits.push_back(static_cast<std::uint32_t>(id));
    } else {
      throw DataError("decode_instance: unexpected token '" + vocab.name(id) + "'");
    }
  }
  close();
  return values;
}

}  // namespace

std::pair<TokenSeq, TokenSeq> encode_instance(const ModExpInstance& inst, const Vocabulary& vocab) {
  TokenSeq source{{vocab.v3()}, SeqRole::source};
  append_group(source.ids, inst.a, vocab);
  append_group(source.ids, inst.b, vocab);
  append_group(source.ids, inst.c, vocab);
  TokenSeq target{{}, SeqRole::target};
  append_group(target.ids, inst.d, vocab);
  target.ids.push_back(vocab.eos());
  return {std::move(source), std::move(target)};
}

ModExpInstance decode_instance(const TokenSeq& source, const TokenSeq& target,
                               const Vocabulary& vocab) {
  if (source.ids.empty() || source.ids.front() != vocab.v3()) {
    throw DataError("decode_instance: source must start with V3");
  }
  const auto operands = parse_groups(std::span(source.ids).subspan(1), vocab);
  if (operands.size() != 3) {
    throw DataError("decode_instance: source must hold exactly three integer groups");
  }
  if (target.ids.empty() || target.ids.back() != vocab.eos()) {
    throw DataError("decode_instance: target must end with <eos>");
  }
  const auto result =
      parse_groups(std::span(target.ids).first(target.ids.size() - 1), vocab);
  if (result.size() != 1) {
    throw DataError("decode_instance: target must hold exactly one integer group");
  }
  return {operands[0], operands[1], operands[2], result[0]};
}

std::optional<std::uint64_t> decode_prediction(std::span<const TokenId> ids,
                                               const Vocabulary& vocab) {
  std::size_t begin = 0;
  if (!ids.empty() && ids.front() == vocab.plus()) {
    begin = 1;
  }
  std::size_t end = ids.size();
  for (std::size_t i = begin; i < ids.size(); ++i) {
    if (ids[i] == vocab.eos()) {
      end = i;
      break;
    }
  }
  while (end > begin && ids[end - 1] == vocab.pad()) {
    --end;
  }
  if (end == begin) {
    return std::nullopt;
  }
  std::vector<std::uint32_t> digits;
  digits.reserve(end - begin);
  for (std::size_t i = begin; i < end; ++i) {
    if (!vocab.is_digit(ids[i])) {
      return std::nullopt;
    }
    digits.push_back(static_cast<std::uint32_t>(ids[i]));
  }
  if (digits.size() > 1 && digits.front() == 0) {
    return std::nullopt;
  }
  try {
    return decode_int(digits, vocab.base(), true);
  } catch (const DataError&) {
    return std::nullopt;
  }
}

std::string render(const TokenSeq& seq, const Vocabulary& vocab) {
  std::string out;
  for (std::size_t i = 0; i < seq.ids.size(); ++i) {
    if (i > 0) {
      out += ' ';
    }
    out += vocab.name(seq.ids[i]);
  }
  return out;
}

std::string render_template(const ModExpInstance& inst, std::uint32_t base) {
  std::string out = "V3";
  for (const std::uint64_t n : {inst.a, inst.b, inst.c, inst.d}) {
    out += " +";
    const auto digits = encode_int(n, base);
    for (std::size_t i = 0; i < digits.size(); ++i) {
      if (i > 0) {
        out += ' ';
      }
      out += std::to_string(digits[i]);
    }
  }
  return out;
}

std::size_t max_source_len(std::uint64_t max_int, std::uint64_t c_max, std::uint32_t base) {
  return 1 + 2 * (1 + digit_count(max_int, base)) + 1 + digit_count(c_max, base);
}

std::size_t max_target_len(std::uint64_t c_max, std::uint32_t base) {
  return 1 + digit_count(c_max == 0 ? 0 : c_max - 1, base) + 1;
}

namespace {

void put_u16(std::string& buf, std::uint16_t v) {
  buf.push_back(static_cast<char>(v & 0xFFU));
  buf.push_back(static_cast<char>(v >> 8U));
}

std::uint16_t get_u16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8U));
}

}  // namespace

void write_tokenized(const std::filesystem::path& path, std::span<const ModExpInstance> instances,
                     const Vocabulary& vocab, std::size_t max_src, std::size_t max_tgt) {
  if (vocab.size() > 65536) {
    throw UsageError("tokenized: vocabulary does not fit 16-bit ids");
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw DataError("tokenized: cannot write " + path.string());
  }
  const nlohmann::json header = {{"format", kTokenizedFormat},
                                 {"base", vocab.base()},
                                 {"max_src", max_src},
                                 {"max_tgt", max_tgt},
                                 {"rows", instances.size()}};
  out << header.dump() << '\n';
  std::string row;
  for (const auto& inst : instances) {
    const auto [src, tgt] = encode_instance(inst, vocab);
    if (src.ids.size() > max_src || tgt.ids.size() > max_tgt) {
      throw DataError("tokenized: instance exceeds configured maximum lengths");
    }
    row.clear();
    for (std::size_t i = 0; i < max_src; ++i) {
      put_u16(row, static_cast<std::uint16_t>(i < src.ids.size() ? src.ids[i] : vocab.pad()));
    }
    for (std::size_t i = 0; i < max_tgt; ++i) {
      put_u16(row, static_cast<std::uint16_t>(i < tgt.ids.size() ? tgt.ids[i] : vocab.pad()));
    }
    out.write(row.data(), static_cast<std::streamsize>(row.size()));
  }
  if (!out) {
    throw DataError("tokenized: write failed on " + path.string());
  }
}

TokenizedDataset read_tokenized(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw DataError("tokenized: cannot open " + path.string());
  }
  std::string line;
  std::getline(in, line);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error&) {
    throw DataError("tokenized: malformed header in " + path.string());
  }
  if (header.value("format", "") != kTokenizedFormat) {
    throw DataError("tokenized: unsupported format in " + path.string());
  }
  TokenizedDataset ds;
  ds.base = header.at("base").get<std::uint32_t>();
  ds.max_src = header.at("max_src").get<std::size_t>();
  ds.max_tgt = header.at("max_tgt").get<std::size_t>();
  const auto rows = header.at("rows").get<std::size_t>();
  const Vocabulary vocab(ds.base);
  std::vector<unsigned char> buf((ds.max_src + ds.max_tgt) * 2);
  for (std::size_t r = 0; r < rows; ++r) {
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!in) {
      throw DataError("tokenized: truncated file " + path.string());
    }
    TokenSeq src{{}, SeqRole::source};
    TokenSeq tgt{{}, SeqRole::target};
    for (std::size_t i = 0; i < ds.max_src; ++i) {
      const auto id = static_cast<TokenId>(get_u16(&buf[2 * i]));
      if (id != vocab.pad()) {
        src.ids.push_back(id);
      }
    }
    for (std::size_t i = 0; i < ds.max_tgt; ++i) {
      const auto id = static_cast<TokenId>(get_u16(&buf[2 * (ds.max_src + i)]));
      if (id != vocab.pad()) {
        tgt.ids.push_back(id);
      }
    }
    ds.sources.push_back(std::move(src));
    ds.targets.push_back(std::move(tgt));
  }
  return ds;
}

}  // namespace mexp
