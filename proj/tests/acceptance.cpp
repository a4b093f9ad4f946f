// One PASS/FAIL line per top-level acceptance criterion. Exit status is the
// number of failures.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "cmig/analytics.hpp"
#include "cmig/grpo.hpp"
#include "cmig/metrics.hpp"
#include "cmig/pipeline.hpp"
#include "cmig/retrieval.hpp"
#include "cmig/rewards.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace cmig;

namespace {

struct Failure {
  std::string what;
};

void require(bool ok, const std::string& what) {
  if (!ok) throw Failure{what};
}

bool close(double a, double b, double tol) { return std::fabs(a - b) <= tol; }

GainRecord gains(double first, const std::vector<double>& deltas) {
  GainRecord g;
  g.delta_doc = {first};
  for (double d : deltas) g.delta_doc.push_back(g.delta_doc.back() + d);
  g.delta_k = deltas;
  return g;
}

void reward_formula() {
  const RewardWeights w;
  const double got = reward_doc(gains(0.3, {0.5, -0.2}), w);
  require(close(got, oracle::tanh_series(0.5) / 3.0, 1e-12), "worked example");
  require(reward_doc(gains(0.0, {0.5, 0.5}), w) == 0.0, "gate at zero first gain");
  require(reward_doc(gains(-0.1, {0.5, 0.5}), w) == 0.0, "gate at negative first gain");
  require(reward_doc(gains(0.3, {}), w) == 0.0, "gate at one round");
}

void batch_rank() {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const RewardWeights w;
  for (int i = 0; i < 1000; ++i) {
    std::vector<double> d(1 + rng() % 64);
    for (auto& x : d) x = rng() % 5 == 0 ? std::round(u(rng) * 4) / 4 : u(rng);
    require(reward_refine_batch(d, w) == oracle::refine_rewards(d, w.w_r), "batch " + std::to_string(i));
  }
  require(reward_refine_batch({0.1, 0.2, 0.3, 0.4}, w) == std::vector<double>{0, 0, 0.1, 0.1}, "even count");
  require(reward_refine_batch({0.2, 0.2, 0.2}, w) == std::vector<double>{0.1, 0.1, 0.1}, "ties");
}

void grpo_numerics() {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(-3.0, 3.0), ratio(0.0, 3.0), eps(0.01, 0.99), lp(-20.0, 0.0);
  for (int i = 0; i < 2000; ++i) {
    std::vector<double> r(1 + rng() % 16);
    for (auto& x : r) x = u(rng);
    const auto a = grpo::group_advantages(r);
    double m = 0.0;
    for (double x : a) m += x;
    require(std::fabs(m / static_cast<double>(a.size())) <= 1e-12, "group mean");
  }
  for (int i = 0; i < 10000; ++i) {
    const double q = ratio(rng), A = u(rng), e = eps(rng);
    const double c = q < 1 - e ? 1 - e : (q > 1 + e ? 1 + e : q);
    require(grpo::clipped_term(q, A, e) == std::min(q * A, c * A), "clip");
    require(grpo::kl_k3(lp(rng), lp(rng)) >= 0.0, "kl sign");
  }
  require(grpo::kDefaultClipEpsilon == 0.2 && grpo::kDefaultKlBeta == 0.001, "defaults");
}

void masking() {
  std::mt19937_64 rng(3);
  const std::vector<std::string> words = {"fever", "x", "\xC3\xA9t\xC3\xA9", "a b", ""};
  for (int i = 0; i < 500; ++i) {
    std::string text;
    for (int t = 1 + static_cast<int>(rng() % 3); t > 0; --t) {
      text += wrap_tag(TagKind::search, words[rng() % words.size()]);
      if (rng() % 3) text += wrap_tag(TagKind::evidence, words[rng() % words.size()]);
    }
    text += wrap_tag(TagKind::diagnosis, "d");
    const std::size_t len = text::char_length(text);
    auto r = parse_rollout(text, "r", "q", "g");
    r.token_offsets.emplace();
    for (std::size_t pos = 0; pos < len;) {
      const std::size_t w = std::min<std::size_t>(1 + rng() % 5, len - pos);
      r.token_offsets->push_back({r.token_offsets->size(), pos, pos + w});
      pos += w;
    }
    std::vector<std::pair<std::size_t, std::size_t>> ev;
    for (const auto& s : oracle::regex_spans(text))
      if (s.kind == "evidence") ev.emplace_back(s.inner_start, s.inner_end);
    const auto mask = grpo::evidence_loss_mask(r);
    const std::size_t n = r.token_offsets->size();
    for (std::size_t k = 0; k < n; ++k)
      require((mask.mask[k] == 0) == oracle::mask_token(ev, (*r.token_offsets)[k].char_start, (*r.token_offsets)[k].char_end),
              "mask rollout " + std::to_string(i));
    std::vector<double> base(n, -1.0), moved = base;
    for (std::size_t k = 0; k < n; ++k)
      if (!mask.mask[k]) moved[k] = -7.0;
    const auto a = grpo::token_surrogate({base, base, base, 0.5, 0.2, 0.001}, mask);
    const auto b = grpo::token_surrogate({moved, base, base, 0.5, 0.2, 0.001}, mask);
    require(a.mean == b.mean && a.kl == b.kl, "masked tokens contribute");
  }
}

void bm25() {
  std::mt19937_64 rng(4);
  const std::vector<std::string> vocab = {"fever", "cough", "rash", "pain", "chest", "lobar", "viral", "acute"};
  std::vector<retrieval::Document> docs;
  std::vector<std::vector<std::string>> terms;
  for (int i = 0; i < 200; ++i) {
    std::vector<std::string> t;
    for (auto n = 1 + rng() % 20; n > 0; --n) t.push_back(vocab[rng() % vocab.size()]);
    char id[16];
    std::snprintf(id, sizeof id, "d%03d", i);
    docs.push_back({id, std::nullopt, test::join(t)});
    terms.push_back(t);
  }
  const auto idx = retrieval::InvertedIndex::build(docs);
  for (int q = 0; q < 50; ++q) {
    std::vector<std::string> query;
    for (auto n = 1 + rng() % 3; n > 0; --n) query.push_back(vocab[rng() % vocab.size()]);
    std::size_t best = 0;
    double best_score = -1.0;
    for (std::size_t d = 0; d < docs.size(); ++d) {
      const double want = oracle::bm25(terms, query, d);
      require(close(idx.bm25_score(query, docs[d].doc_id), want, 1e-9), "score");
      if (want > best_score + 1e-12) best = d, best_score = want;
    }
    const auto hit = idx.retrieve_multi({test::join(query)});
    require(hit[0].document && hit[0].document->doc_id == docs[best].doc_id, "argmax");
  }
  std::vector<retrieval::Document> big;
  for (int i = 0; i < 10000; ++i) {
    std::string body;
    for (int w = 0; w < 60; ++w) body += "w" + std::to_string(rng() % 5000) + " ";
    big.push_back({"d" + std::to_string(i), std::nullopt, body});
  }
  const auto t0 = std::chrono::steady_clock::now();
  retrieval::InvertedIndex::build(std::move(big));
  require(std::chrono::steady_clock::now() - t0 < std::chrono::seconds(5), "10k build time");
}

void metrics_criteria() {
  require(metrics::kg_from_distance(0) == 1.0 && metrics::kg_from_distance(3) == 0.4 &&
              metrics::kg_from_distance(5) == 0.0 && metrics::kg_from_distance(7) == 0.0,
          "kg values");
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 3; ++trial) {
    const auto parent = oracle::random_tree(100, rng);
    metrics::IcdTree t;
    for (const auto& [c, p] : parent) t.add(c, p, "");
    t.finalize();
    for (const auto& [a, _] : parent)
      for (const auto& [b, __] : parent)
        require(metrics::icd_tree_distance(a, b, t) == oracle::bfs_distance(parent, a, b), "tree distance");
  }
  for (int i = 0; i < 10000; ++i) {
    const auto n = text::normalize_text(oracle::random_text(rng, 20));
    require(text::normalize_text(n) == n, "idempotence");
  }
  for (int i = 0; i < 5000; ++i) {
    std::vector<std::string> docs(rng() % 4);
    for (auto& d : docs) d = oracle::random_text(rng, 12);
    const auto gold = oracle::random_text(rng, 3);
    require(static_cast<double>(metrics::doc_hit(gold, docs)) == hard_doc_reward(docs, gold), "doc_hit");
  }
}

void end_to_end() {
  const std::string e2e = std::string(CMIG_SOURCE_DIR) + "/tests/data/e2e";
  test::TempDir dir;
  RunConfig cfg;
  cfg.paths.cache = dir.file("cache.jsonl");
  cfg.scorer.cache_path = cfg.paths.cache;
  pipeline::run_score(e2e + "/trajectories.jsonl", cfg, dir.file("a.jsonl"));
  const auto second = pipeline::run_score(e2e + "/trajectories.jsonl", cfg, dir.file("b.jsonl"));
  require(test::slurp(dir.file("a.jsonl")) == test::slurp(dir.file("b.jsonl")), "byte stability");
  require(second.cache.misses == 0 && second.cache.hits > 0, "cache hits");
  const auto want = nlohmann::json::parse(test::slurp(e2e + "/expected_rewards.json"));
  require(want.size() == second.scores.size(), "record count");
  for (std::size_t i = 0; i < want.size(); ++i)
    require(close(second.scores[i].rewards.r_total, want[i]["r_total"].get<double>(), 1e-12), "golden r_total");
}

void analytics_criteria() {
  std::vector<analytics::Point> line, flat;
  for (int i = 1; i <= 10; ++i) {
    line.push_back({static_cast<double>(i), 2.0 * i + 1.0});
    flat.push_back({static_cast<double>(i), 3.0});
  }
  const auto f = analytics::linear_fit(line);
  require(close(f.slope, 2.0, 1e-12) && f.r2 && close(*f.r2, 1.0, 1e-12), "linear fit");
  const auto s = analytics::analyze(line, line);
  require(s.pearson && close(*s.pearson, 1.0, 1e-12), "pearson");
  const auto c = analytics::analyze(flat);
  require(c.fit.slope == 0.0 && c.late_std == 0.0, "constant series");
  require(analytics::late_window_size(10) == 3 && analytics::late_window_size(11) == 4, "late window");
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<void()>>> criteria = {
      {"reward formula fixtures", reward_formula},
      {"batch-rank oracle equivalence", batch_rank},
      {"grpo numerics", grpo_numerics},
      {"evidence masking", masking},
      {"bm25 oracle equivalence", bm25},
      {"metrics", metrics_criteria},
      {"end-to-end determinism", end_to_end},
      {"analytics", analytics_criteria},
  };
  int failures = 0;
  for (const auto& [name, fn] : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    std::string detail;
    try {
      fn();
    } catch (const Failure& f) {
      detail = f.what;
    } catch (const std::exception& e) {
      detail = std::string("exception: ") + e.what();
    }
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    std::printf("%s  %-32s %8.1f ms%s%s\n", detail.empty() ? "PASS" : "FAIL", name.c_str(), ms,
                detail.empty() ? "" : "  ", detail.c_str());
    failures += !detail.empty();
  }
  return failures;
}
