#pragma once

// Frozen-reference answer scoring: LogitP(a | I), the mean token
// log-probability of the gold answer given a context.
//
// Scorer is the only entry point reward code uses. It fronts a backend (the
// built-in smoothed-unigram oracle, or a remote server speaking the
// /v1/logprob protocol) with a content-addressed cache. Cached values are
// never silently replaced: a backend that returns a different value for a
// known request hash raises DeterminismViolation.

#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <future>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <shared_mutex>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "cmig/hash.hpp"
#include "cmig/text.hpp"

namespace cmig {

struct ScoreRequest {
  std::string context;
  std::string answer;
};

struct ScoreResult {
  double avg_logprob = 0.0;
  std::vector<double> token_logprobs;
  std::string tokenizer_id;

  /// Bitwise equality, the comparison the determinism guard needs.
  bool identical(const ScoreResult& o) const {
    if (tokenizer_id != o.tokenizer_id || token_logprobs.size() != o.token_logprobs.size()) return false;
    auto same = [](double a, double b) { return std::memcmp(&a, &b, sizeof(double)) == 0; };
    if (!same(avg_logprob, o.avg_logprob)) return false;
    for (std::size_t i = 0; i < token_logprobs.size(); ++i)
      if (!same(token_logprobs[i], o.token_logprobs[i])) return false;
    return true;
  }
};

enum class ScorerBackend { unigram_oracle, remote };
enum class VocabMode { whitespace_tokens, byte_tokens };

inline std::string_view to_string(ScorerBackend b) { return b == ScorerBackend::remote ? "remote" : "unigram_oracle"; }
inline std::string_view to_string(VocabMode v) { return v == VocabMode::byte_tokens ? "byte_tokens" : "whitespace_tokens"; }

struct ScorerConfig {
  ScorerBackend backend = ScorerBackend::unigram_oracle;
  std::optional<std::string> endpoint;
  double smoothing_lambda = 1.0;
  VocabMode vocab_mode = VocabMode::whitespace_tokens;
  std::optional<std::string> cache_path;
  int max_in_flight = 4;
  int max_retries = 3;
  int backoff_ms = 50;
  int timeout_ms = 30000;

  void validate() const {
    if (backend == ScorerBackend::remote && (!endpoint || endpoint->empty()))
      throw std::invalid_argument("remote scorer requires an endpoint");
    if (!(smoothing_lambda > 0.0)) throw std::invalid_argument("smoothing_lambda must be > 0");
    if (max_in_flight < 1) throw std::invalid_argument("max_in_flight must be >= 1");
    if (max_retries < 0) throw std::invalid_argument("max_retries must be >= 0");
  }

  /// Digest over every setting that can change a score. Cache paths, retry
  /// policy and concurrency limits are excluded.
  std::string digest() const {
    nlohmann::json j = {{"backend", to_string(backend)}};
    if (backend == ScorerBackend::unigram_oracle) {
      j["smoothing_lambda"] = smoothing_lambda;
      j["vocab_mode"] = to_string(vocab_mode);
    } else {
      j["endpoint"] = endpoint.value_or("");
    }
    return sha256_hex(j.dump());
  }
};

class ScorerError : public std::runtime_error {
 public:
  ScorerError(const std::string& what, std::string request_hash)
      : std::runtime_error(what), request_hash_(std::move(request_hash)) {}
  const std::string& request_hash() const noexcept { return request_hash_; }

 private:
  std::string request_hash_;
};

struct RemoteUnavailable : ScorerError {
  using ScorerError::ScorerError;
};
struct ProtocolError : ScorerError {
  using ScorerError::ScorerError;
};
struct DeterminismViolation : ScorerError {
  using ScorerError::ScorerError;
};

inline constexpr double kMeanTolerance = 1e-9;

/// Checks the ScoreResult invariants; throws ProtocolError on violation.
inline void check_score_result(const ScoreResult& r, const std::string& request_hash = {}) {
  if (r.token_logprobs.empty()) throw ProtocolError("token_logprobs is empty", request_hash);
  if (r.tokenizer_id.empty()) throw ProtocolError("tokenizer_id is empty", request_hash);
  double sum = 0.0;
  for (double v : r.token_logprobs) {
    if (!std::isfinite(v)) throw ProtocolError("non-finite token logprob", request_hash);
    if (v > 0.0) throw ProtocolError("positive token logprob", request_hash);
    sum += v;
  }
  if (!std::isfinite(r.avg_logprob)) throw ProtocolError("non-finite avg_logprob", request_hash);
  const double mean = sum / static_cast<double>(r.token_logprobs.size());
  if (std::fabs(mean - r.avg_logprob) > kMeanTolerance)
    throw ProtocolError("avg_logprob does not equal mean of token_logprobs", request_hash);
}

inline nlohmann::json to_json(const ScoreResult& r) {
  return {{"avg_logprob", r.avg_logprob}, {"token_logprobs", r.token_logprobs}, {"tokenizer_id", r.tokenizer_id}};
}

/// Parses a wire/cache object. Shape errors become ProtocolError.
inline ScoreResult score_result_from_json(const nlohmann::json& j, const std::string& request_hash = {}) {
  try {
    ScoreResult r;
    r.avg_logprob = j.at("avg_logprob").get<double>();
    r.token_logprobs = j.at("token_logprobs").get<std::vector<double>>();
    r.tokenizer_id = j.at("tokenizer_id").get<std::string>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw ProtocolError(std::string("malformed score result: ") + e.what(), request_hash);
  }
}

// ---------------------------------------------------------------------------
// Smoothed-unigram oracle

inline std::vector<std::string> oracle_tokens(std::string_view s, VocabMode mode) {
  if (mode == VocabMode::whitespace_tokens) return text::split_whitespace(s);
  std::vector<std::string> out;
  out.reserve(s.size());
  for (char c : s) out.emplace_back(1, c);
  return out;
}

inline std::string oracle_tokenizer_id(VocabMode mode) {
  return mode == VocabMode::byte_tokens ? "unigram-byte" : "unigram-whitespace";
}

/// logprob(t) = ln((c(t) + lambda) / (n + lambda * V)) with c(t) the count of
/// t in the context, n the context length in tokens and V the number of
/// distinct tokens in context and answer combined. Averaged over answer tokens.
inline ScoreResult unigram_oracle_logprob(std::string_view context, std::string_view answer, double lambda,
                                          VocabMode mode) {
  if (!(lambda > 0.0)) throw std::invalid_argument("lambda must be > 0");
  const auto ctx = oracle_tokens(context, mode);
  const auto ans = oracle_tokens(answer, mode);
  if (ans.empty()) throw std::invalid_argument("answer has no tokens");

  std::unordered_map<std::string, std::size_t> counts;
  for (const auto& t : ctx) ++counts[t];
  std::set<std::string> vocab(ctx.begin(), ctx.end());
  vocab.insert(ans.begin(), ans.end());

  const double n = static_cast<double>(ctx.size());
  const double denom = n + lambda * static_cast<double>(vocab.size());
  ScoreResult r;
  r.tokenizer_id = oracle_tokenizer_id(mode);
  r.token_logprobs.reserve(ans.size());
  double sum = 0.0;
  for (const auto& t : ans) {
    const auto it = counts.find(t);
    const double c = it == counts.end() ? 0.0 : static_cast<double>(it->second);
    const double lp = std::log((c + lambda) / denom);
    r.token_logprobs.push_back(lp);
    sum += lp;
  }
  r.avg_logprob = sum / static_cast<double>(ans.size());
  return r;
}

// ---------------------------------------------------------------------------
// Backends

class ScoringBackend {
 public:
  virtual ~ScoringBackend() = default;
  virtual ScoreResult score(const ScoreRequest& req, const std::string& request_hash) = 0;
  virtual std::string backend_id() const = 0;
};

class UnigramOracleBackend final : public ScoringBackend {
 public:
  UnigramOracleBackend(double lambda, VocabMode mode) : lambda_(lambda), mode_(mode) {}

  ScoreResult score(const ScoreRequest& req, const std::string&) override {
    return unigram_oracle_logprob(req.context, req.answer, lambda_, mode_);
  }
  std::string backend_id() const override { return "unigram_oracle"; }

 private:
  double lambda_;
  VocabMode mode_;
};

// ---------------------------------------------------------------------------
// Persistent cache

/// Content-addressed score cache, optionally mirrored to an append-only JSON
/// Lines file. Concurrent readers, serialized writers.
class ScoreCache {
 public:
  ScoreCache() = default;

  explicit ScoreCache(std::optional<std::string> path) : path_(std::move(path)) {
    if (!path_) return;
    std::ifstream in(*path_);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(line);
      } catch (const nlohmann::json::exception&) {
        // A torn final line from an interrupted writer is tolerated.
        if (in.peek() == EOF) break;
        throw std::runtime_error("corrupt cache record at line " + std::to_string(lineno) + " of " + *path_);
      }
      const std::string key = j.at("key").get<std::string>();
      insert_memory(key, score_result_from_json(j, key));
    }
  }

  std::optional<ScoreResult> find(const std::string& key) const {
    std::shared_lock lock(mu_);
    const auto it = entries_.find(key);
    if (it == entries_.end()) return std::nullopt;
    return it->second;
  }

  /// Inserts or confirms an entry. Throws DeterminismViolation if the key is
  /// already bound to a different value.
  void insert(const std::string& key, const ScoreResult& r) {
    std::unique_lock lock(mu_);
    if (const auto it = entries_.find(key); it != entries_.end()) {
      if (!it->second.identical(r)) throw DeterminismViolation(drift_message(it->second, r), key);
      return;
    }
    entries_.emplace(key, r);
    if (path_) {
      std::ofstream out(*path_, std::ios::app);
      nlohmann::json j = to_json(r);
      j["key"] = key;
      out << j.dump() << '\n';
      out.flush();
      if (!out) throw std::runtime_error("failed to append to cache file " + *path_);
    }
  }

  std::size_t size() const {
    std::shared_lock lock(mu_);
    return entries_.size();
  }

 private:
  static std::string drift_message(const ScoreResult& cached, const ScoreResult& fresh) {
    return "score drift: cached avg_logprob " + nlohmann::json(cached.avg_logprob).dump() + " vs fresh " +
           nlohmann::json(fresh.avg_logprob).dump();
  }

  void insert_memory(const std::string& key, const ScoreResult& r) {
    if (const auto it = entries_.find(key); it != entries_.end()) {
      if (!it->second.identical(r)) throw DeterminismViolation("cache file disagrees with itself: " + drift_message(it->second, r), key);
      return;
    }
    entries_.emplace(key, r);
  }

  std::optional<std::string> path_;
  mutable std::shared_mutex mu_;
  std::unordered_map<std::string, ScoreResult> entries_;
};

// ---------------------------------------------------------------------------
// Scorer front

struct ScorerStats {
  std::uint64_t hits = 0;
  std::uint64_t misses = 0;
};

class Scorer {
 public:
  Scorer(ScorerConfig cfg, std::unique_ptr<ScoringBackend> backend)
      : cfg_(std::move(cfg)), backend_(std::move(backend)), cache_(cfg_.cache_path), digest_(cfg_.digest()) {
    cfg_.validate();
  }

  const ScorerConfig& config() const { return cfg_; }
  std::string backend_id() const { return backend_->backend_id(); }

  std::string request_hash(const ScoreRequest& req) const {
    return sha256_fields({backend_->backend_id(), digest_, req.context, req.answer});
  }

  /// LogitP(answer | context). Served from cache when possible; concurrent
  /// callers asking for the same hash share one backend call.
  ScoreResult logitp(const ScoreRequest& req) {
    if (req.answer.empty()) throw std::invalid_argument("score request answer is empty");
    const std::string key = request_hash(req);
    if (auto hit = cache_.find(key)) {
      hits_.fetch_add(1, std::memory_order_relaxed);
      return *hit;
    }

    std::shared_future<ScoreResult> fut;
    std::promise<ScoreResult> mine;
    bool owner = false;
    {
      std::lock_guard lock(flight_mu_);
      if (auto hit = cache_.find(key)) {
        hits_.fetch_add(1, std::memory_order_relaxed);
        return *hit;
      }
      if (const auto it = in_flight_.find(key); it != in_flight_.end()) {
        fut = it->second;
      } else {
        fut = mine.get_future().share();
        in_flight_.emplace(key, fut);
        owner = true;
      }
    }
    if (!owner) {
      hits_.fetch_add(1, std::memory_order_relaxed);
      return fut.get();
    }

    misses_.fetch_add(1, std::memory_order_relaxed);
    try {
      ScoreResult r = backend_->score(req, key);
      check_score_result(r, key);
      cache_.insert(key, r);
      mine.set_value(r);
      erase_flight(key);
      return r;
    } catch (...) {
      mine.set_exception(std::current_exception());
      erase_flight(key);
      throw;
    }
  }

  /// Always asks the backend and reconciles with the cache: a fresh value that
  /// differs from a cached one raises DeterminismViolation.
  ScoreResult score_fresh(const ScoreRequest& req) {
    if (req.answer.empty()) throw std::invalid_argument("score request answer is empty");
    const std::string key = request_hash(req);
    misses_.fetch_add(1, std::memory_order_relaxed);
    ScoreResult r = backend_->score(req, key);
    check_score_result(r, key);
    cache_.insert(key, r);
    return r;
  }

  ScorerStats stats() const { return {hits_.load(), misses_.load()}; }
  const ScoreCache& cache() const { return cache_; }

 private:
  void erase_flight(const std::string& key) {
    std::lock_guard lock(flight_mu_);
    in_flight_.erase(key);
  }

  ScorerConfig cfg_;
  std::unique_ptr<ScoringBackend> backend_;
  ScoreCache cache_;
  std::string digest_;
  std::mutex flight_mu_;
  std::unordered_map<std::string, std::shared_future<ScoreResult>> in_flight_;
  std::atomic<std::uint64_t> hits_{0};
  std::atomic<std::uint64_t> misses_{0};
};

}  // namespace cmig
