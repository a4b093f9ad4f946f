#pragma once

// Client for the remote scoring protocol:
//
//   POST /v1/logprob  {"context": str, "answer": str}
//   200 -> {"avg_logprob": number, "token_logprobs": [number...], "tokenizer_id": str}
//   >=400 -> {"error": str}
//
// Transport failures and 5xx responses are retried with exponential backoff;
// 4xx responses and malformed bodies are protocol errors and are not retried.

#include <chrono>
#include <memory>
#include <semaphore>
#include <string>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "cmig/scorer.hpp"

namespace cmig {

class RemoteBackend final : public ScoringBackend {
 public:
  static constexpr std::ptrdiff_t kMaxInFlight = 1024;

  explicit RemoteBackend(const ScorerConfig& cfg)
      : endpoint_(cfg.endpoint.value_or("")),
        max_retries_(cfg.max_retries),
        backoff_ms_(cfg.backoff_ms),
        timeout_ms_(cfg.timeout_ms),
        slots_(std::min<std::ptrdiff_t>(cfg.max_in_flight, kMaxInFlight)) {
    if (endpoint_.empty()) throw std::invalid_argument("remote scorer requires an endpoint");
    while (!endpoint_.empty() && endpoint_.back() == '/') endpoint_.pop_back();
  }

  std::string backend_id() const override { return "remote"; }

  ScoreResult score(const ScoreRequest& req, const std::string& request_hash) override {
    const std::string body = nlohmann::json{{"context", req.context}, {"answer", req.answer}}.dump();
    std::string last_error = "no attempt made";
    for (int attempt = 0; attempt <= max_retries_; ++attempt) {
      if (attempt > 0)
        std::this_thread::sleep_for(std::chrono::milliseconds(static_cast<long>(backoff_ms_) << (attempt - 1)));

      httplib::Result res;
      {
        slots_.acquire();
        struct Release {
          std::counting_semaphore<kMaxInFlight>& s;
          ~Release() { s.release(); }
        } release{slots_};
        httplib::Client cli(endpoint_);
        const auto timeout = std::chrono::milliseconds(timeout_ms_);
        cli.set_connection_timeout(timeout);
        cli.set_read_timeout(timeout);
        cli.set_write_timeout(timeout);
        res = cli.Post("/v1/logprob", body, "application/json");
      }

      if (!res) {
        last_error = "transport error: " + httplib::to_string(res.error());
        continue;
      }
      if (res->status >= 500) {
        last_error = "server error " + std::to_string(res->status) + ": " + error_text(res->body);
        continue;
      }
      if (res->status >= 400)
        throw ProtocolError("request rejected with status " + std::to_string(res->status) + ": " + error_text(res->body),
                            request_hash);
      if (res->status != 200)
        throw ProtocolError("unexpected status " + std::to_string(res->status), request_hash);

      nlohmann::json j;
      try {
        j = nlohmann::json::parse(res->body);
      } catch (const nlohmann::json::exception& e) {
        throw ProtocolError(std::string("response is not JSON: ") + e.what(), request_hash);
      }
      ScoreResult r = score_result_from_json(j, request_hash);
      check_score_result(r, request_hash);
      return r;
    }
    throw RemoteUnavailable("scorer at " + endpoint_ + " unavailable after " + std::to_string(max_retries_ + 1) +
                                " attempts: " + last_error,
                            request_hash);
  }

 private:
  static std::string error_text(const std::string& body) {
    try {
      const auto j = nlohmann::json::parse(body);
      if (j.contains("error") && j["error"].is_string()) return j["error"].get<std::string>();
    } catch (const nlohmann::json::exception&) {
    }
    return body.substr(0, 200);
  }

  std::string endpoint_;
  int max_retries_;
  int backoff_ms_;
  int timeout_ms_;
  std::counting_semaphore<kMaxInFlight> slots_;
};

inline std::unique_ptr<ScoringBackend> make_backend(const ScorerConfig& cfg) {
  cfg.validate();
  if (cfg.backend == ScorerBackend::remote) return std::make_unique<RemoteBackend>(cfg);
  return std::make_unique<UnigramOracleBackend>(cfg.smoothing_lambda, cfg.vocab_mode);
}

inline std::unique_ptr<Scorer> make_scorer(const ScorerConfig& cfg) {
  return std::make_unique<Scorer>(cfg, make_backend(cfg));
}

}  // namespace cmig
