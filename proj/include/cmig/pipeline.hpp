#pragma once

// Batch commands behind the CLI. Each run_* function is usable in-process;
// the CLI only parses flags and maps exceptions to exit codes.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <ctime>
#include <exception>
#include <fstream>
#include <iomanip>
#include <memory>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "cmig/analytics.hpp"
#include "cmig/config.hpp"
#include "cmig/grpo.hpp"
#include "cmig/io.hpp"
#include "cmig/metrics.hpp"
#include "cmig/remote_scorer.hpp"
#include "cmig/retrieval.hpp"
#include "cmig/rewards.hpp"
#include "cmig/scorer.hpp"
#include "cmig/trajectory.hpp"

namespace cmig::pipeline {

inline constexpr std::string_view kToolVersion = "0.3.0";

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

/// Runs fn(i) for i in [0, n) on up to `workers` threads. The first exception
/// stops further work and is rethrown.
template <typename Fn>
void parallel_for(std::size_t n, int workers, Fn&& fn) {
  std::size_t threads = workers > 0 ? static_cast<std::size_t>(workers) : std::max(1u, std::thread::hardware_concurrency());
  threads = std::min(threads, n);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::exception_ptr error;
  std::mutex error_mu;
  std::vector<std::jthread> pool;
  pool.reserve(threads);
  for (std::size_t w = 0; w < threads; ++w) {
    pool.emplace_back([&] {
      while (!failed.load()) {
        const std::size_t i = next.fetch_add(1);
        if (i >= n) return;
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mu);
          if (!error) error = std::current_exception();
          failed.store(true);
        }
      }
    });
  }
  pool.clear();
  if (error) std::rethrow_exception(error);
}

// ---------------------------------------------------------------------------
// Reward scoring

struct TrajectoryScore {
  std::string id;
  std::string question_id;
  FormatVerdict verdict;
  GainRecord gains;
  std::size_t rounds = 0;
  RewardBreakdown rewards;
};

/// Per-round documents: the evidence body of every turn that has one.
inline std::vector<std::string> round_documents(const Rollout& r) {
  std::vector<std::string> docs;
  for (const auto& t : r.turns)
    if (t.evidence) docs.push_back(*t.evidence);
  return docs;
}

inline std::vector<std::string> search_texts(const Rollout& r) {
  std::vector<std::string> out;
  for (const auto& t : r.turns)
    if (t.search) out.push_back(*t.search);
  return out;
}

/// All refinements of a rollout joined by newlines; absent if there are none.
inline std::optional<std::string> refine_text(const Rollout& r) {
  std::optional<std::string> out;
  for (const auto& t : r.turns) {
    if (!t.refine) continue;
    if (out) *out += '\n';
    else out.emplace();
    *out += *t.refine;
  }
  return out;
}

/// Everything except the batch-relative refine reward, for one trajectory.
inline TrajectoryScore score_one(const io::RolloutRecord& rec, const RunConfig& cfg, Scorer& scorer) {
  const Rollout& r = rec.rollout;
  TrajectoryScore ts;
  ts.id = r.id;
  ts.question_id = rec.question_id;
  ts.verdict = validate_format(r, cfg.t_max);

  const auto docs = round_documents(r);
  ts.rounds = docs.size();
  if (!docs.empty()) doc_gain_series(ts.gains, r.question, docs, r.gold_answer, scorer, cfg.context_separator);
  if (const auto refine = refine_text(r))
    refine_gain(ts.gains, r.question, *refine, r.gold_answer, scorer, cfg.context_separator);

  auto& b = ts.rewards;
  b.r_format = reward_format(ts.verdict, cfg.weights);
  b.r_diag = cfg.weights.diag_weight * reward_diag(r.diagnosis.value_or(""), r.gold_answer);
  b.r_doc = reward_doc(ts.gains, cfg.weights, cfg.doc_divisor);
  b.r_hard_search = cfg.weights.w_hard * hard_search_reward(search_texts(r), r.gold_answer);
  b.r_hard_doc = cfg.weights.w_hard * hard_doc_reward(docs, r.gold_answer);
  return ts;
}

/// Scores a batch: trajectories in parallel, then the refine batch-rank
/// step over the whole batch, then composition.
inline std::vector<TrajectoryScore> score_batch(const std::vector<io::RolloutRecord>& recs, const RunConfig& cfg,
                                                Scorer& scorer) {
  std::vector<TrajectoryScore> out(recs.size());
  parallel_for(recs.size(), cfg.workers, [&](std::size_t i) { out[i] = score_one(recs[i], cfg, scorer); });

  std::vector<double> deltas;
  deltas.reserve(out.size());
  for (const auto& ts : out) deltas.push_back(ts.gains.has_refine ? ts.gains.delta_refine : 0.0);
  const auto refine = reward_refine_batch(deltas, cfg.weights);
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i].rewards.r_refine = refine[i];
    out[i].rewards = compose_total(out[i].rewards, cfg.composition_rule);
  }
  return out;
}

inline nlohmann::json to_json(const TrajectoryScore& ts, const std::string& config_digest) {
  const auto& g = ts.gains;
  auto opt = [&](double v) { return g.has_refine ? nlohmann::json(v) : nlohmann::json(nullptr); };
  const auto& b = ts.rewards;
  return {
      {"id", ts.id},
      {"question_id", ts.question_id},
      {"config_digest", config_digest},
      {"tokenizer_id", g.tokenizer_id.empty() ? nlohmann::json(nullptr) : nlohmann::json(g.tokenizer_id)},
      {"format", {{"ok", ts.verdict.ok}, {"findings", ts.verdict.findings}}},
      {"rounds", ts.rounds},
      {"gains",
       {{"logitp_base_per_turn", g.logitp_base_per_turn},
        {"logitp_doc_per_turn", g.logitp_doc_per_turn},
        {"delta_doc", g.delta_doc},
        {"delta_k", g.delta_k},
        {"logitp_q", opt(g.logitp_q)},
        {"logitp_refine", opt(g.logitp_refine)},
        {"delta_refine", opt(g.delta_refine)}}},
      {"rewards",
       {{"r_format", b.r_format},
        {"r_diag", b.r_diag},
        {"r_doc", b.r_doc},
        {"r_refine", b.r_refine},
        {"r_hard_search", b.r_hard_search},
        {"r_hard_doc", b.r_hard_doc},
        {"r_total", b.r_total},
        {"composition_rule", to_string(b.composition_rule)}}},
  };
}

struct ScoreRun {
  std::vector<TrajectoryScore> scores;
  ScorerStats cache;
  nlohmann::json manifest;
};

inline std::string manifest_path(const std::string& report_path) { return report_path + ".manifest.json"; }

inline nlohmann::json base_manifest(std::string_view command, const RunConfig& cfg) {
  nlohmann::json m = {
      {"tool", "cmig"},
      {"tool_version", kToolVersion},
      {"command", command},
      {"config_digest", config_digest(cfg)},
      {"config", to_json(cfg)},
      {"started_at", utc_timestamp()},
  };
  m["corpus_digest"] = cfg.paths.corpus ? nlohmann::json(io::file_digest(*cfg.paths.corpus)) : nlohmann::json(nullptr);
  return m;
}

/// Full reward pipeline over a rollout file. The report is JSON Lines, one
/// record per trajectory in input order; the manifest (with timestamps) goes
/// to a sidecar so the report bytes depend only on config and inputs.
inline ScoreRun run_score(const std::string& trajectories_path, const RunConfig& cfg, const std::string& output_path) {
  nlohmann::json manifest = base_manifest("score", cfg);
  manifest["input_digest"] = io::file_digest(trajectories_path);
  const auto recs = io::read_rollouts(trajectories_path);

  auto scorer = make_scorer(cfg.scorer);
  ScoreRun run;
  run.scores = score_batch(recs, cfg, *scorer);
  run.cache = scorer->stats();

  const std::string digest = config_digest(cfg);
  std::string tokenizer;
  for (const auto& s : run.scores)
    if (!s.gains.tokenizer_id.empty()) tokenizer = s.gains.tokenizer_id;

  io::write_atomic(output_path, [&](std::ostream& os) {
    for (const auto& s : run.scores) os << to_json(s, digest).dump() << '\n';
  });

  manifest["scorer_backend"] = scorer->backend_id();
  manifest["scorer_config_digest"] = cfg.scorer.digest();
  manifest["scorer_tokenizer_id"] = tokenizer.empty() ? nlohmann::json(nullptr) : nlohmann::json(tokenizer);
  manifest["records"] = run.scores.size();
  manifest["scorer_cache"] = {{"hits", run.cache.hits}, {"misses", run.cache.misses}};
  manifest["report_digest"] = io::file_digest(output_path);
  manifest["finished_at"] = utc_timestamp();
  io::write_atomic(manifest_path(output_path), manifest.dump(2) + "\n");
  run.manifest = std::move(manifest);
  return run;
}

// ---------------------------------------------------------------------------
// Advantages

struct AdvantageRecord {
  std::string id;
  std::string question_id;
  std::size_t group = 0;
  double reward = 0.0;
  double advantage = 0.0;
  std::optional<grpo::SurrogateResult> surrogate;
  std::optional<std::size_t> masked_tokens;
};

struct RewardRow {
  std::string id;
  std::string question_id;
  double r_total = 0.0;
};

/// Reads a reward report, rejecting records produced under another config.
inline std::vector<RewardRow> read_reward_report(const std::string& path, const std::string& expected_digest) {
  std::vector<RewardRow> rows;
  io::for_each_jsonl(path, [&](std::size_t lineno, const nlohmann::json& j) {
    const std::string where = path + ":" + std::to_string(lineno);
    try {
      const auto digest = j.at("config_digest").get<std::string>();
      if (digest != expected_digest)
        throw ConfigError(where + ": report was produced under a different config (digest " + digest.substr(0, 12) +
                          "..., expected " + expected_digest.substr(0, 12) + "...)");
      rows.push_back({j.at("id").get<std::string>(), j.at("question_id").get<std::string>(),
                      j.at("rewards").at("r_total").get<double>()});
    } catch (const nlohmann::json::exception& e) {
      throw io::InputSchemaError(where + ": " + e.what());
    }
  });
  return rows;
}

struct TokenLogprobs {
  std::vector<double> logprob_new;
  std::vector<double> logprob_old;
  std::vector<double> logprob_ref;
};

inline std::unordered_map<std::string, TokenLogprobs> read_logprobs(const std::string& path) {
  std::unordered_map<std::string, TokenLogprobs> out;
  io::for_each_jsonl(path, [&](std::size_t lineno, const nlohmann::json& j) {
    try {
      out[j.at("id").get<std::string>()] = {j.at("logprob_new").get<std::vector<double>>(),
                                            j.at("logprob_old").get<std::vector<double>>(),
                                            j.at("logprob_ref").get<std::vector<double>>()};
    } catch (const nlohmann::json::exception& e) {
      throw io::InputSchemaError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  });
  return out;
}

/// Group-relative advantages over consecutive blocks of G records. Every
/// member of a block must share a question_id.
inline std::vector<AdvantageRecord> compute_advantages(const std::vector<RewardRow>& rows, const RunConfig& cfg) {
  const auto g = static_cast<std::size_t>(cfg.grpo.group_size);
  if (rows.size() % g != 0)
    throw io::InputSchemaError("record count " + std::to_string(rows.size()) + " is not divisible by group size " +
                               std::to_string(g));
  std::vector<AdvantageRecord> out;
  out.reserve(rows.size());
  for (std::size_t start = 0; start < rows.size(); start += g) {
    std::vector<double> rewards;
    for (std::size_t i = start; i < start + g; ++i) {
      if (rows[i].question_id != rows[start].question_id)
        throw io::InputSchemaError("group " + std::to_string(start / g) + " mixes questions: " + rows[start].id + " and " +
                                   rows[i].id);
      rewards.push_back(rows[i].r_total);
    }
    const auto adv = grpo::group_advantages(rewards, cfg.grpo.eps_std);
    for (std::size_t i = 0; i < g; ++i)
      out.push_back({rows[start + i].id, rows[start + i].question_id, start / g, rewards[i], adv[i], std::nullopt, std::nullopt});
  }
  return out;
}

/// Adds the per-token surrogate audit using rollouts (for evidence masks) and
/// per-token log-probabilities.
inline void attach_surrogates(std::vector<AdvantageRecord>& recs, const std::vector<io::RolloutRecord>& rollouts,
                              const std::unordered_map<std::string, TokenLogprobs>& logprobs, const RunConfig& cfg) {
  std::unordered_map<std::string, const Rollout*> by_id;
  for (const auto& r : rollouts) by_id[r.rollout.id] = &r.rollout;
  for (auto& rec : recs) {
    const auto lp = logprobs.find(rec.id);
    if (lp == logprobs.end()) continue;
    const auto ro = by_id.find(rec.id);
    if (ro == by_id.end()) throw io::InputSchemaError("no rollout for id " + rec.id + " (needed for its loss mask)");
    const auto mask = grpo::evidence_loss_mask(*ro->second);
    grpo::SurrogateInputs in{lp->second.logprob_new, lp->second.logprob_old, lp->second.logprob_ref, rec.advantage,
                             cfg.grpo.epsilon, cfg.grpo.beta};
    rec.surrogate = grpo::token_surrogate(in, mask);
    rec.masked_tokens = mask.masked_count();
  }
}

inline nlohmann::json to_json(const AdvantageRecord& a) {
  nlohmann::json j = {{"id", a.id},
                      {"question_id", a.question_id},
                      {"group", a.group},
                      {"reward", a.reward},
                      {"advantage", a.advantage},
                      {"mean_surrogate", nullptr},
                      {"kl", nullptr},
                      {"objective", nullptr},
                      {"masked_token_count", nullptr}};
  if (a.surrogate) {
    j["mean_surrogate"] = a.surrogate->mean;
    j["kl"] = a.surrogate->kl;
    j["objective"] = a.surrogate->objective;
    j["masked_token_count"] = *a.masked_tokens;
  }
  return j;
}

inline std::vector<AdvantageRecord> run_advantage(const std::string& rewards_path, const RunConfig& cfg,
                                                  const std::string& output_path,
                                                  const std::optional<std::string>& logprobs_path = std::nullopt,
                                                  const std::optional<std::string>& trajectories_path = std::nullopt) {
  nlohmann::json manifest = base_manifest("advantage", cfg);
  manifest["input_digest"] = io::file_digest(rewards_path);
  const auto rows = read_reward_report(rewards_path, config_digest(cfg));
  auto recs = compute_advantages(rows, cfg);
  if (logprobs_path) {
    if (!trajectories_path) throw ConfigError("surrogate audit needs --trajectories for evidence masks");
    attach_surrogates(recs, io::read_rollouts(*trajectories_path), read_logprobs(*logprobs_path), cfg);
  }
  io::write_atomic(output_path, [&](std::ostream& os) {
    for (const auto& r : recs) os << to_json(r).dump() << '\n';
  });
  manifest["records"] = recs.size();
  manifest["groups"] = cfg.grpo.group_size > 0 ? recs.size() / static_cast<std::size_t>(cfg.grpo.group_size) : 0;
  manifest["finished_at"] = utc_timestamp();
  io::write_atomic(manifest_path(output_path), manifest.dump(2) + "\n");
  return recs;
}

// ---------------------------------------------------------------------------
// Evaluation

inline nlohmann::json to_json(const metrics::EvalRecord& r) {
  auto opt_code = [](const std::optional<metrics::Code>& c) { return c ? nlohmann::json(*c) : nlohmann::json(nullptr); };
  nlohmann::json j = {{"id", r.id},       {"pred", r.pred},
                      {"gold", r.gold},   {"pred_code", opt_code(r.pred_code)},
                      {"gold_code", opt_code(r.gold_code)}, {"em", r.em},
                      {"kg", r.kg}};
  j["doc_hit"] = r.doc_hit ? nlohmann::json(*r.doc_hit) : nlohmann::json(nullptr);
  if (r.emb) j["emb"] = *r.emb;
  return j;
}

inline nlohmann::json run_eval(const std::string& predictions_path, const std::string& icd_tree_path,
                               const std::optional<std::string>& output_path = std::nullopt,
                               const metrics::IcdFallback& fallback = {}) {
  std::ifstream tree_in(icd_tree_path);
  if (!tree_in) throw io::IoError("cannot read ICD tree " + icd_tree_path);
  const auto tree = metrics::IcdTree::load_tsv(tree_in);
  const auto preds = io::read_predictions(predictions_path);
  std::vector<metrics::EvalRecord> recs;
  recs.reserve(preds.size());
  for (const auto& p : preds) recs.push_back(metrics::evaluate_record(p, tree, fallback));
  const auto agg = metrics::aggregate(recs);

  nlohmann::json per = nlohmann::json::array();
  for (const auto& r : recs) per.push_back(to_json(r));
  nlohmann::json report = {
      {"per_record", per},
      {"aggregate",
       {{"records", agg.records},
        {"em_pct", agg.em_pct},
        {"kg_pct", agg.kg_pct},
        {"avg", agg.avg},
        {"doc_hit_pct", agg.doc_hit_pct ? nlohmann::json(*agg.doc_hit_pct) : nlohmann::json(nullptr)}}},
      {"manifest",
       {{"tool", "cmig"},
        {"tool_version", kToolVersion},
        {"command", "eval"},
        {"finished_at", utc_timestamp()},
        {"input_digest", io::file_digest(predictions_path)},
        {"icd_tree_digest", io::file_digest(icd_tree_path)}}},
  };
  if (output_path) io::write_atomic(*output_path, report.dump(2) + "\n");
  return report;
}

// ---------------------------------------------------------------------------
// Retrieval

inline retrieval::InvertedIndex run_index(const std::string& corpus_path, const RunConfig& cfg,
                                          const std::string& index_path) {
  auto idx = retrieval::InvertedIndex::build(io::read_corpus(corpus_path), cfg.retrieval.k1, cfg.retrieval.b);
  io::write_atomic(index_path, [&](std::ostream& os) { idx.save(os); });
  return idx;
}

inline nlohmann::json hits_to_json(const std::vector<retrieval::RetrievalHit>& hits) {
  nlohmann::json results = nlohmann::json::array();
  for (const auto& h : hits) {
    nlohmann::json r = {{"subquery", h.subquery}, {"score", h.score}};
    r["doc_id"] = h.document ? nlohmann::json(h.document->doc_id) : nlohmann::json(nullptr);
    r["body"] = h.document ? nlohmann::json(h.document->body) : nlohmann::json(nullptr);
    results.push_back(std::move(r));
  }
  return {{"results", results}};
}

inline std::vector<retrieval::RetrievalHit> search(const retrieval::InvertedIndex& idx,
                                                   const std::vector<std::string>& subqueries, const RunConfig& cfg) {
  if (cfg.retrieval.top_mode == TopMode::single_topk) {
    std::string joined;
    for (const auto& s : subqueries) joined += (joined.empty() ? "" : " ") + s;
    return idx.retrieve_top_k(joined, static_cast<std::size_t>(cfg.retrieval.top_k));
  }
  std::vector<std::string> sq(subqueries.begin(),
                              subqueries.begin() + std::min<std::ptrdiff_t>(cfg.retrieval.k_max, static_cast<std::ptrdiff_t>(subqueries.size())));
  return idx.retrieve_multi(sq, cfg.retrieval.dedupe);
}

struct HttpReply {
  int status = 200;
  nlohmann::json body;
};

/// Handles a POST /v1/search body: {"subqueries": [str, ...]}.
inline HttpReply handle_search_request(const retrieval::InvertedIndex& idx, const std::string& body,
                                       const RunConfig& cfg) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(body);
  } catch (const nlohmann::json::exception&) {
    return {400, {{"error", "request body is not JSON"}}};
  }
  if (!j.is_object() || !j.contains("subqueries") || !j["subqueries"].is_array())
    return {400, {{"error", "expected {\"subqueries\": [str, ...]}"}}};
  std::vector<std::string> sq;
  for (const auto& s : j["subqueries"]) {
    if (!s.is_string()) return {400, {{"error", "subqueries must be strings"}}};
    std::string t = text::trim(s.get<std::string>());
    if (!t.empty()) sq.push_back(std::move(t));
  }
  return {200, hits_to_json(search(idx, sq, cfg))};
}

/// Search service: POST /v1/search plus GET /healthz. The caller owns the
/// index and must keep it alive while the server runs.
inline std::unique_ptr<httplib::Server> make_search_server(const retrieval::InvertedIndex& idx, const RunConfig& cfg) {
  auto srv = std::make_unique<httplib::Server>();
  srv->Post("/v1/search", [&idx, cfg](const httplib::Request& req, httplib::Response& res) {
    const auto reply = handle_search_request(idx, req.body, cfg);
    res.status = reply.status;
    res.set_content(reply.body.dump(), "application/json");
  });
  srv->Get("/healthz", [&idx](const httplib::Request&, httplib::Response& res) {
    res.set_content(nlohmann::json{{"status", "ok"}, {"documents", idx.doc_count()}}.dump(), "application/json");
  });
  return srv;
}

}  // namespace cmig::pipeline
