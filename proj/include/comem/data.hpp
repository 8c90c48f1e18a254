#pragma once

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "comem/decoders.hpp"
#include "comem/error.hpp"
#include "comem/tensor.hpp"

namespace comem {

/// Unit-level features of one modality of one video: [L x D] float32.
using FeatureSequence = Tensor<float>;

/// Truncate to the first `target` rows or right-pad with zero rows.
inline FeatureSequence pad_or_truncate(const FeatureSequence& seq, std::size_t target) {
  if (target < 1) throw DomainError("pad_or_truncate: target length must be >= 1");
  const std::size_t width = seq.shape().cols();
  const std::size_t keep = std::min(seq.shape().rows(), target);
  FeatureSequence out(Shape{target, width});
  std::copy_n(seq.storage().begin(), keep * width, out.storage().begin());
  return out;
}

// Binary feature file, little-endian:
//   "CMF1" | u32 version = 1 | u32 L | u32 D | L*D float32 row-major
inline constexpr std::array<char, 4> kFeatureMagic{'C', 'M', 'F', '1'};
inline constexpr std::uint32_t kFeatureVersion = 1;

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xFF));
}

inline std::uint32_t get_u32(const unsigned char* p) {
  return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) | (std::uint32_t(p[2]) << 16) | (std::uint32_t(p[3]) << 24);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Write through a temporary file and rename, so readers never observe a partial file.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write '" + tmp.string() + "'");
    out.write(bytes.data(), std::streamsize(bytes.size()));
    if (!out) throw FormatError("short write to '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace detail

inline std::string encode_features(const FeatureSequence& seq) {
  const auto rows = seq.shape().rows(), cols = seq.shape().cols();
  std::string out(kFeatureMagic.begin(), kFeatureMagic.end());
  detail::put_u32(out, kFeatureVersion);
  detail::put_u32(out, std::uint32_t(rows));
  detail::put_u32(out, std::uint32_t(cols));
  out.reserve(out.size() + rows * cols * 4);
  for (float v : seq.storage()) detail::put_u32(out, std::bit_cast<std::uint32_t>(v));
  return out;
}

inline FeatureSequence decode_features(const std::string& bytes, const std::string& origin = "<memory>") {
  auto fail = [&](const std::string& field, const std::string& msg) {
    return FormatError(origin + ": " + field + ": " + msg);
  };
  if (bytes.size() < 16) throw fail("header", "truncated header (" + std::to_string(bytes.size()) + " bytes)");
  if (std::memcmp(bytes.data(), kFeatureMagic.data(), 4) != 0) throw fail("magic", "bad magic '" + bytes.substr(0, 4) + "'");
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::uint32_t version = detail::get_u32(p + 4);
  if (version != kFeatureVersion) throw fail("version", "unsupported version " + std::to_string(version));
  const std::uint32_t rows = detail::get_u32(p + 8), cols = detail::get_u32(p + 12);
  if (rows == 0) throw fail("L", "must be >= 1");
  if (cols == 0) throw fail("D", "must be >= 1");
  const std::uint64_t expected = std::uint64_t(rows) * cols * 4;
  if (bytes.size() - 16 != expected)
    throw fail("payload", "size " + std::to_string(bytes.size() - 16) + " bytes does not match L*D*4 = " + std::to_string(expected));
  FeatureSequence seq(Shape{rows, cols});
  for (std::size_t k = 0; k < seq.size(); ++k) {
    const float v = std::bit_cast<float>(detail::get_u32(p + 16 + 4 * k));
    if (!std::isfinite(v)) throw fail("payload", "non-finite value at element " + std::to_string(k));
    seq[k] = v;
  }
  return seq;
}

inline void write_feature_file(const std::filesystem::path& path, const FeatureSequence& seq) {
  detail::write_file_atomic(path, encode_features(seq));
}

inline FeatureSequence read_feature_file(const std::filesystem::path& path) {
  return decode_features(detail::read_file(path), path.string());
}

/// One question-answer pair. `answer` is a candidate index (multiple
/// choice), a count in 0..10, or an answer-vocabulary index (frame).
struct QAItem {
  std::string id;
  TaskKind task = TaskKind::RepetitionCount;
  std::string video;
  std::vector<std::size_t> question;
  std::vector<std::vector<std::size_t>> candidates;
  int answer = 0;

  bool operator==(const QAItem&) const = default;
};

inline void validate_qa(const QAItem& item) {
  if (item.question.empty()) throw FormatError("empty question");
  if (is_multiple_choice(item.task)) {
    if (item.candidates.size() != kNumCandidates)
      throw FormatError("expected 5 candidates, got " + std::to_string(item.candidates.size()));
    for (const auto& c : item.candidates)
      if (c.empty()) throw FormatError("empty candidate");
    if (item.answer < 0 || item.answer >= int(kNumCandidates))
      throw FormatError("answer " + std::to_string(item.answer) + " out of range (0-4)");
  } else {
    if (!item.candidates.empty()) throw FormatError("candidates given for open-ended task '" + std::string(task_tag(item.task)) + "'");
    if (item.task == TaskKind::RepetitionCount && (item.answer < 0 || item.answer > kMaxCount))
      throw FormatError("answer " + std::to_string(item.answer) + " out of range (0-10)");
    if (item.task == TaskKind::FrameQA && item.answer < 0)
      throw FormatError("answer " + std::to_string(item.answer) + " out of range (>= 0)");
  }
}

inline nlohmann::ordered_json qa_to_json(const QAItem& item) {
  nlohmann::ordered_json j;
  j["id"] = item.id;
  j["task"] = task_tag(item.task);
  j["video"] = item.video;
  j["question"] = item.question;
  if (is_multiple_choice(item.task)) j["candidates"] = item.candidates;
  j["answer"] = item.answer;
  return j;
}

inline QAItem qa_from_json(const nlohmann::json& j) {
  auto field = [&](const char* name) -> const nlohmann::json& {
    if (!j.is_object() || !j.contains(name)) throw FormatError(std::string("missing field '") + name + "'");
    return j.at(name);
  };
  QAItem item;
  try {
    item.id = field("id").get<std::string>();
    item.task = parse_task(field("task").get<std::string>());
    item.video = field("video").get<std::string>();
    item.question = field("question").get<std::vector<std::size_t>>();
    if (j.contains("candidates")) item.candidates = j.at("candidates").get<std::vector<std::vector<std::size_t>>>();
    else if (is_multiple_choice(item.task)) throw FormatError("missing field 'candidates'");
    item.answer = field("answer").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("wrong field type: ") + e.what());
  }
  validate_qa(item);
  return item;
}

/// Parse one-object-per-line QA data. Errors carry the line number.
inline std::vector<QAItem> parse_qa_lines(std::istream& in, const std::string& origin) {
  std::vector<QAItem> items;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      items.push_back(qa_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError(origin + ":" + std::to_string(lineno) + ": invalid JSON: " + e.what());
    } catch (const FormatError& e) {
      throw FormatError(origin + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return items;
}

inline std::vector<QAItem> load_qa_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open '" + path.string() + "'");
  return parse_qa_lines(in, path.string());
}

inline std::string encode_qa_lines(const std::vector<QAItem>& items) {
  std::string out;
  for (const auto& item : items) {
    out += qa_to_json(item).dump();
    out += '\n';
  }
  return out;
}

inline void write_qa_file(const std::filesystem::path& path, const std::vector<QAItem>& items) {
  detail::write_file_atomic(path, encode_qa_lines(items));
}

/// Token string -> id.
using Vocabulary = std::map<std::string, std::size_t>;

inline Vocabulary load_vocabulary(const std::filesystem::path& path) {
  try {
    return nlohmann::json::parse(detail::read_file(path)).get<Vocabulary>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": invalid vocabulary: " + e.what());
  }
}

inline std::size_t vocabulary_size(const Vocabulary& vocab) {
  std::size_t n = 0;
  for (const auto& [tok, id] : vocab) n = std::max(n, id + 1);
  return n;
}

}  // namespace comem
