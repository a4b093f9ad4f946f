#pragma once

// Run configuration. One JSON file; every key is optional and falls back to
// the defaults below. Unknown keys are rejected so typos cannot silently
// change a run.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "cmig/grpo.hpp"
#include "cmig/hash.hpp"
#include "cmig/retrieval.hpp"
#include "cmig/rewards.hpp"
#include "cmig/scorer.hpp"
#include "cmig/trajectory.hpp"

namespace cmig {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class TopMode { multi_top1, single_topk };

struct RetrievalConfig {
  double k1 = retrieval::kDefaultK1;
  double b = retrieval::kDefaultB;
  int k_max = 3;
  TopMode top_mode = TopMode::multi_top1;
  int top_k = 3;
  bool dedupe = false;
};

struct GrpoConfig {
  int group_size = grpo::kDefaultGroupSize;
  double epsilon = grpo::kDefaultClipEpsilon;
  double beta = grpo::kDefaultKlBeta;
  double eps_std = grpo::kDefaultEpsStd;
};

/// Recorded in manifests only; nothing here trains.
struct TrainingRecord {
  double learning_rate = 6e-7;
  int batch_size = 64;
  std::string optimizer = "adam";
  int max_response_tokens = 2048;
};

struct PathsConfig {
  std::optional<std::string> corpus;
  std::optional<std::string> icd_tree;
  std::optional<std::string> cache;
  std::optional<std::string> output;
};

struct RunConfig {
  RewardWeights weights;
  DocRewardDivisor doc_divisor = DocRewardDivisor::turn_count;
  ScorerConfig scorer;
  std::string context_separator = std::string(kDefaultContextSeparator);
  RetrievalConfig retrieval;
  GrpoConfig grpo;
  CompositionRule composition_rule = CompositionRule::nonlinear_autorefine;
  int t_max = kDefaultMaxTurns;
  int workers = 0;  // 0 = hardware concurrency
  TrainingRecord training;
  PathsConfig paths;
};

namespace detail {

inline void reject_unknown(const nlohmann::json& j, std::initializer_list<std::string_view> known, std::string_view where) {
  if (!j.is_object()) throw ConfigError(std::string(where) + " must be an object");
  for (const auto& [k, _] : j.items()) {
    bool ok = false;
    for (auto kk : known) ok = ok || kk == k;
    if (!ok) throw ConfigError("unknown config key: " + std::string(where) + (where.empty() ? "" : ".") + k);
  }
}

inline std::optional<std::string> opt_string(const nlohmann::json& j, const char* key) {
  if (!j.contains(key) || j[key].is_null()) return std::nullopt;
  return j[key].get<std::string>();
}

}  // namespace detail

inline nlohmann::json to_json(const RunConfig& c) {
  auto opt = [](const std::optional<std::string>& s) { return s ? nlohmann::json(*s) : nlohmann::json(nullptr); };
  return {
      {"weights",
       {{"w_f", c.weights.w_f},
        {"w_d", c.weights.w_d},
        {"alpha_d", c.weights.alpha_d},
        {"w_r", c.weights.w_r},
        {"w_hard", c.weights.w_hard},
        {"diag_weight", c.weights.diag_weight}}},
      {"doc_reward_divisor", c.doc_divisor == DocRewardDivisor::turn_count ? "turn_count" : "summed_terms"},
      {"scorer",
       {{"backend", to_string(c.scorer.backend)},
        {"endpoint", opt(c.scorer.endpoint)},
        {"smoothing_lambda", c.scorer.smoothing_lambda},
        {"vocab_mode", to_string(c.scorer.vocab_mode)},
        {"max_in_flight", c.scorer.max_in_flight},
        {"max_retries", c.scorer.max_retries},
        {"backoff_ms", c.scorer.backoff_ms},
        {"timeout_ms", c.scorer.timeout_ms}}},
      {"context_separator", c.context_separator},
      {"retrieval",
       {{"k1", c.retrieval.k1},
        {"b", c.retrieval.b},
        {"k_max", c.retrieval.k_max},
        {"top_mode", c.retrieval.top_mode == TopMode::multi_top1 ? "multi_top1" : "single_topk"},
        {"top_k", c.retrieval.top_k},
        {"dedupe", c.retrieval.dedupe}}},
      {"grpo",
       {{"G", c.grpo.group_size}, {"epsilon", c.grpo.epsilon}, {"beta", c.grpo.beta}, {"eps_std", c.grpo.eps_std}}},
      {"composition_rule", to_string(c.composition_rule)},
      {"t_max", c.t_max},
      {"workers", c.workers},
      {"training",
       {{"learning_rate", c.training.learning_rate},
        {"batch_size", c.training.batch_size},
        {"optimizer", c.training.optimizer},
        {"max_response_tokens", c.training.max_response_tokens}}},
      {"paths",
       {{"corpus", opt(c.paths.corpus)},
        {"icd_tree", opt(c.paths.icd_tree)},
        {"cache", opt(c.paths.cache)},
        {"output", opt(c.paths.output)}}},
  };
}

/// Parses a full or partial config object on top of the defaults.
inline RunConfig config_from_json(const nlohmann::json& patch) {
  nlohmann::json j = to_json(RunConfig{});
  detail::reject_unknown(patch, {"weights", "doc_reward_divisor", "scorer", "context_separator", "retrieval", "grpo",
                                 "composition_rule", "t_max", "workers", "training", "paths"},
                         "");
  j.merge_patch(patch);

  RunConfig c;
  try {
    const auto& w = j.at("weights");
    detail::reject_unknown(w, {"w_f", "w_d", "alpha_d", "w_r", "w_hard", "diag_weight"}, "weights");
    c.weights = {w.at("w_f").get<double>(),    w.at("w_d").get<double>(),    w.at("alpha_d").get<double>(),
                 w.at("w_r").get<double>(),    w.at("w_hard").get<double>(), w.at("diag_weight").get<double>()};

    const auto div = j.at("doc_reward_divisor").get<std::string>();
    if (div == "turn_count") c.doc_divisor = DocRewardDivisor::turn_count;
    else if (div == "summed_terms") c.doc_divisor = DocRewardDivisor::summed_terms;
    else throw ConfigError("doc_reward_divisor must be turn_count or summed_terms");

    const auto& s = j.at("scorer");
    detail::reject_unknown(s, {"backend", "endpoint", "smoothing_lambda", "vocab_mode", "max_in_flight", "max_retries",
                               "backoff_ms", "timeout_ms"},
                           "scorer");
    const auto backend = s.at("backend").get<std::string>();
    if (backend == "unigram_oracle") c.scorer.backend = ScorerBackend::unigram_oracle;
    else if (backend == "remote") c.scorer.backend = ScorerBackend::remote;
    else throw ConfigError("scorer.backend must be unigram_oracle or remote");
    c.scorer.endpoint = detail::opt_string(s, "endpoint");
    c.scorer.smoothing_lambda = s.at("smoothing_lambda").get<double>();
    const auto vocab = s.at("vocab_mode").get<std::string>();
    if (vocab == "whitespace_tokens") c.scorer.vocab_mode = VocabMode::whitespace_tokens;
    else if (vocab == "byte_tokens") c.scorer.vocab_mode = VocabMode::byte_tokens;
    else throw ConfigError("scorer.vocab_mode must be whitespace_tokens or byte_tokens");
    c.scorer.max_in_flight = s.at("max_in_flight").get<int>();
    c.scorer.max_retries = s.at("max_retries").get<int>();
    c.scorer.backoff_ms = s.at("backoff_ms").get<int>();
    c.scorer.timeout_ms = s.at("timeout_ms").get<int>();

    c.context_separator = j.at("context_separator").get<std::string>();

    const auto& r = j.at("retrieval");
    detail::reject_unknown(r, {"k1", "b", "k_max", "top_mode", "top_k", "dedupe"}, "retrieval");
    c.retrieval.k1 = r.at("k1").get<double>();
    c.retrieval.b = r.at("b").get<double>();
    c.retrieval.k_max = r.at("k_max").get<int>();
    const auto mode = r.at("top_mode").get<std::string>();
    if (mode == "multi_top1") c.retrieval.top_mode = TopMode::multi_top1;
    else if (mode == "single_topk") c.retrieval.top_mode = TopMode::single_topk;
    else throw ConfigError("retrieval.top_mode must be multi_top1 or single_topk");
    c.retrieval.top_k = r.at("top_k").get<int>();
    c.retrieval.dedupe = r.at("dedupe").get<bool>();

    const auto& g = j.at("grpo");
    detail::reject_unknown(g, {"G", "epsilon", "beta", "eps_std"}, "grpo");
    c.grpo = {g.at("G").get<int>(), g.at("epsilon").get<double>(), g.at("beta").get<double>(),
              g.at("eps_std").get<double>()};

    const auto rule = j.at("composition_rule").get<std::string>();
    if (rule == "linear") c.composition_rule = CompositionRule::linear;
    else if (rule == "nonlinear_autorefine") c.composition_rule = CompositionRule::nonlinear_autorefine;
    else throw ConfigError("composition_rule must be linear or nonlinear_autorefine");

    c.t_max = j.at("t_max").get<int>();
    c.workers = j.at("workers").get<int>();

    const auto& t = j.at("training");
    detail::reject_unknown(t, {"learning_rate", "batch_size", "optimizer", "max_response_tokens"}, "training");
    c.training = {t.at("learning_rate").get<double>(), t.at("batch_size").get<int>(),
                  t.at("optimizer").get<std::string>(), t.at("max_response_tokens").get<int>()};

    const auto& p = j.at("paths");
    detail::reject_unknown(p, {"corpus", "icd_tree", "cache", "output"}, "paths");
    c.paths = {detail::opt_string(p, "corpus"), detail::opt_string(p, "icd_tree"), detail::opt_string(p, "cache"),
               detail::opt_string(p, "output")};
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid config: ") + e.what());
  }
  c.scorer.cache_path = c.paths.cache;
  return c;
}

/// Range checks; read inputs that are named must exist.
inline void validate_config(const RunConfig& c) {
  try {
    c.weights.validate();
    c.scorer.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (c.grpo.group_size < 1) throw ConfigError("grpo.G must be >= 1");
  if (!(c.grpo.epsilon > 0.0 && c.grpo.epsilon < 1.0)) throw ConfigError("grpo.epsilon must be in (0, 1)");
  if (!(c.grpo.beta >= 0.0)) throw ConfigError("grpo.beta must be >= 0");
  if (!(c.grpo.eps_std > 0.0)) throw ConfigError("grpo.eps_std must be > 0");
  if (c.t_max < 1) throw ConfigError("t_max must be >= 1");
  if (c.retrieval.k_max < 1) throw ConfigError("retrieval.k_max must be >= 1");
  if (c.retrieval.top_k < 1) throw ConfigError("retrieval.top_k must be >= 1");
  if (c.workers < 0) throw ConfigError("workers must be >= 0");
  for (const auto* p : {&c.paths.corpus, &c.paths.icd_tree})
    if (*p && !std::filesystem::exists(**p)) throw ConfigError("input path does not exist: " + **p);
}

/// Applies one "a.b.c=value" override. The value is parsed as JSON when it
/// parses, otherwise taken as a string.
inline void apply_override(nlohmann::json& patch, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0) throw ConfigError("override must look like key.path=value");
  const std::string key(assignment.substr(0, eq));
  const std::string raw(assignment.substr(eq + 1));
  nlohmann::json value;
  try {
    value = nlohmann::json::parse(raw);
  } catch (const nlohmann::json::exception&) {
    value = raw;
  }
  nlohmann::json* node = &patch;
  std::size_t pos = 0;
  while (true) {
    const auto dot = key.find('.', pos);
    const std::string part = key.substr(pos, dot == std::string::npos ? std::string::npos : dot - pos);
    if (part.empty()) throw ConfigError("bad override key: " + key);
    if (dot == std::string::npos) {
      (*node)[part] = value;
      break;
    }
    if (!node->contains(part) || !(*node)[part].is_object()) (*node)[part] = nlohmann::json::object();
    node = &(*node)[part];
    pos = dot + 1;
  }
}

inline nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file: " + path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path + " is not valid JSON: " + e.what());
  }
}

/// Loads a config file (or defaults when path is empty), applies overrides,
/// then the CMIG_CACHE environment variable, then validates.
inline RunConfig load_config(const std::optional<std::string>& path, const std::vector<std::string>& overrides = {}) {
  nlohmann::json patch = path ? read_json_file(*path) : nlohmann::json::object();
  for (const auto& o : overrides) apply_override(patch, o);
  RunConfig c = config_from_json(patch);
  if (const char* env = std::getenv("CMIG_CACHE"); env && *env) {
    c.paths.cache = env;
    c.scorer.cache_path = env;
  }
  validate_config(c);
  return c;
}

/// Digest of everything that affects computed values. Paths, worker count and
/// scorer transport settings are excluded.
inline std::string config_digest(const RunConfig& c) {
  nlohmann::json j = to_json(c);
  j.erase("paths");
  j.erase("workers");
  for (const char* k : {"max_in_flight", "max_retries", "backoff_ms", "timeout_ms"}) j["scorer"].erase(k);
  return sha256_hex(j.dump());
}

}  // namespace cmig
