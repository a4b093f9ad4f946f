#pragma once

// File formats: rollout JSON Lines, corpus JSON Lines, prediction JSON
// Lines, plus atomic report writing and content digests.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unistd.h>
#include <vector>

#include <json.hpp>

#include "cmig/hash.hpp"
#include "cmig/metrics.hpp"
#include "cmig/retrieval.hpp"
#include "cmig/text.hpp"
#include "cmig/trajectory.hpp"

namespace cmig::io {

struct InputSchemaError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::string file_digest(const std::string& path) { return sha256_hex(read_file(path)); }

/// Calls fn(line_number, object) for each non-blank line.
inline void for_each_jsonl(const std::string& path, const std::function<void(std::size_t, const nlohmann::json&)>& fn) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw InputSchemaError(path + ":" + std::to_string(lineno) + ": invalid JSON: " + e.what());
    }
    if (!j.is_object()) throw InputSchemaError(path + ":" + std::to_string(lineno) + ": expected a JSON object");
    fn(lineno, j);
  }
}

namespace detail {

inline std::string required_string(const nlohmann::json& j, const char* key, const std::string& where) {
  if (!j.contains(key)) throw InputSchemaError(where + ": missing field \"" + key + "\"");
  if (!j[key].is_string()) throw InputSchemaError(where + ": field \"" + key + "\" must be a string");
  return j[key].get<std::string>();
}

}  // namespace detail

/// One rollout interchange record, parsed.
struct RolloutRecord {
  Rollout rollout;
  std::string question_id;  // explicit "question_id", else a digest of the question
};

inline std::vector<TokenOffset> parse_token_offsets(const nlohmann::json& arr, std::size_t text_chars,
                                                    const std::string& where) {
  if (!arr.is_array()) throw InputSchemaError(where + ": token_offsets must be an array");
  std::vector<TokenOffset> out;
  out.reserve(arr.size());
  for (const auto& t : arr) {
    if (!t.is_array() || t.size() != 3) throw InputSchemaError(where + ": each token offset must be [index, start, end]");
    for (const auto& v : t)
      if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0))
        throw InputSchemaError(where + ": token offsets must be non-negative integers");
    TokenOffset o{t[0].get<std::size_t>(), t[1].get<std::size_t>(), t[2].get<std::size_t>()};
    if (o.char_start > o.char_end || o.char_end > text_chars)
      throw InputSchemaError(where + ": token offset outside rollout text");
    if (!out.empty() && o.char_start < out.back().char_end)
      throw InputSchemaError(where + ": token offsets overlap or are unsorted");
    out.push_back(o);
  }
  return out;
}

inline RolloutRecord rollout_from_json(const nlohmann::json& j, const std::string& where) {
  RolloutRecord rec;
  const std::string id = detail::required_string(j, "id", where);
  const std::string question = detail::required_string(j, "question", where);
  const std::string gold = detail::required_string(j, "gold_answer", where);
  const std::string text = detail::required_string(j, "rollout_text", where);
  rec.rollout = parse_rollout(text, id, question, gold);
  if (j.contains("token_offsets") && !j["token_offsets"].is_null())
    rec.rollout.token_offsets = parse_token_offsets(j["token_offsets"], text::char_length(text), where + " (" + id + ")");
  if (j.contains("question_id") && j["question_id"].is_string()) {
    rec.question_id = j["question_id"].get<std::string>();
  } else {
    rec.question_id = sha256_hex(question).substr(0, 16);
  }
  return rec;
}

inline nlohmann::json rollout_to_json(const Rollout& r) {
  nlohmann::json j = {{"id", r.id}, {"question", r.question}, {"gold_answer", r.gold_answer}, {"rollout_text", r.raw_text}};
  if (r.token_offsets) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& t : *r.token_offsets) arr.push_back({t.token_index, t.char_start, t.char_end});
    j["token_offsets"] = std::move(arr);
  }
  return j;
}

inline std::vector<RolloutRecord> read_rollouts(const std::string& path) {
  std::vector<RolloutRecord> out;
  for_each_jsonl(path, [&](std::size_t lineno, const nlohmann::json& j) {
    out.push_back(rollout_from_json(j, path + ":" + std::to_string(lineno)));
  });
  return out;
}

inline std::vector<retrieval::Document> read_corpus(const std::string& path) {
  std::vector<retrieval::Document> docs;
  for_each_jsonl(path, [&](std::size_t lineno, const nlohmann::json& j) {
    const std::string where = path + ":" + std::to_string(lineno);
    retrieval::Document d;
    d.doc_id = detail::required_string(j, "doc_id", where);
    d.body = detail::required_string(j, "body", where);
    if (j.contains("title") && !j["title"].is_null()) {
      if (!j["title"].is_string()) throw InputSchemaError(where + ": field \"title\" must be a string");
      d.title = j["title"].get<std::string>();
    }
    docs.push_back(std::move(d));
  });
  return docs;
}

inline std::vector<metrics::EvalInput> read_predictions(const std::string& path) {
  std::vector<metrics::EvalInput> out;
  for_each_jsonl(path, [&](std::size_t lineno, const nlohmann::json& j) {
    const std::string where = path + ":" + std::to_string(lineno);
    metrics::EvalInput in;
    in.id = detail::required_string(j, "id", where);
    in.pred = detail::required_string(j, "pred", where);
    in.gold = detail::required_string(j, "gold", where);
    try {
      if (j.contains("docs") && !j["docs"].is_null()) in.docs = j["docs"].get<std::vector<std::string>>();
      if (j.contains("pred_embedding") && !j["pred_embedding"].is_null())
        in.pred_embedding = j["pred_embedding"].get<std::vector<double>>();
      if (j.contains("gold_embedding") && !j["gold_embedding"].is_null())
        in.gold_embedding = j["gold_embedding"].get<std::vector<double>>();
    } catch (const nlohmann::json::exception& e) {
      throw InputSchemaError(where + ": " + e.what());
    }
    out.push_back(std::move(in));
  });
  return out;
}

/// Writes to a sibling temp file and renames over the target, so readers see
/// either the old file or the complete new one. The temp file is removed if
/// the writer throws.
inline void write_atomic(const std::string& path, const std::function<void(std::ostream&)>& writer) {
  const std::string tmp = path + ".tmp." + std::to_string(::getpid());
  try {
    {
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      if (!out) throw IoError("cannot write " + tmp);
      writer(out);
      out.flush();
      if (!out) throw IoError("failed writing " + tmp);
    }
    std::filesystem::rename(tmp, path);
  } catch (...) {
    std::error_code ec;
    std::filesystem::remove(tmp, ec);
    throw;
  }
}

inline void write_atomic(const std::string& path, const std::string& content) {
  write_atomic(path, [&](std::ostream& os) { os << content; });
}

}  // namespace cmig::io
