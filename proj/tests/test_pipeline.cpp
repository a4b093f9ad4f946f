#include <gtest/gtest.h>

#include <filesystem>

#include "cmig/pipeline.hpp"
#include "test_util.hpp"

using namespace cmig;
using nlohmann::json;

namespace {

const std::string kRoot = CMIG_SOURCE_DIR;
const std::string kE2e = kRoot + "/tests/data/e2e";

std::vector<json> read_jsonl(const std::string& path) {
  std::vector<json> out;
  io::for_each_jsonl(path, [&](std::size_t, const json& j) { out.push_back(j); });
  return out;
}

RunConfig config_with_cache(const test::TempDir& dir) {
  RunConfig cfg;
  cfg.paths.cache = dir.file("cache.jsonl");
  cfg.scorer.cache_path = cfg.paths.cache;
  return cfg;
}

std::string reward_report(const test::TempDir& dir, const std::vector<std::pair<std::string, double>>& rows,
                          const std::string& digest, std::size_t per_question = 4) {
  std::string body;
  for (std::size_t i = 0; i < rows.size(); ++i)
    body += json{{"id", rows[i].first},
                 {"question_id", "q" + std::to_string(i / per_question)},
                 {"config_digest", digest},
                 {"rewards", {{"r_total", rows[i].second}}}}
                .dump() +
            "\n";
  return dir.write("rewards.jsonl", body);
}

}  // namespace

TEST(ScoreCommand, MatchesIndependentGoldenValues) {
  test::TempDir dir;
  const auto cfg = config_with_cache(dir);
  pipeline::run_score(kE2e + "/trajectories.jsonl", cfg, dir.file("report.jsonl"));
  const auto got = read_jsonl(dir.file("report.jsonl"));
  const auto want = json::parse(test::slurp(kE2e + "/expected_rewards.json"));
  ASSERT_EQ(got.size(), want.size());
  for (std::size_t i = 0; i < got.size(); ++i) {
    const auto& g = got[i];
    const auto& w = want[i];
    SCOPED_TRACE(w["id"].get<std::string>());
    EXPECT_EQ(g["id"], w["id"]);
    EXPECT_EQ(g["config_digest"], config_digest(cfg));
    const auto dd = g["gains"]["delta_doc"].get<std::vector<double>>();
    const auto wd = w["delta_doc"].get<std::vector<double>>();
    ASSERT_EQ(dd.size(), wd.size());
    for (std::size_t k = 0; k < dd.size(); ++k) EXPECT_NEAR(dd[k], wd[k], 1e-12);
    const auto dk = g["gains"]["delta_k"].get<std::vector<double>>();
    const auto wk = w["delta_k"].get<std::vector<double>>();
    ASSERT_EQ(dk.size(), wk.size());
    for (std::size_t k = 0; k < dk.size(); ++k) EXPECT_NEAR(dk[k], wk[k], 1e-12);
    if (w["delta_refine"].is_null()) {
      EXPECT_TRUE(g["gains"]["delta_refine"].is_null());
    } else {
      EXPECT_NEAR(g["gains"]["delta_refine"].get<double>(), w["delta_refine"].get<double>(), 1e-12);
    }
    for (const char* k : {"r_format", "r_diag", "r_doc", "r_hard_search", "r_hard_doc", "r_refine", "r_total"})
      EXPECT_NEAR(g["rewards"][k].get<double>(), w[k].get<double>(), 1e-12) << k;
  }
}

TEST(ScoreCommand, RerunIsByteStableAndServedFromCache) {
  test::TempDir dir;
  const auto cfg = config_with_cache(dir);
  const auto first = pipeline::run_score(kE2e + "/trajectories.jsonl", cfg, dir.file("a.jsonl"));
  EXPECT_GT(first.cache.misses, 0u);
  const auto second = pipeline::run_score(kE2e + "/trajectories.jsonl", cfg, dir.file("b.jsonl"));
  EXPECT_EQ(second.cache.misses, 0u);
  EXPECT_EQ(second.cache.hits, first.cache.hits + first.cache.misses);
  EXPECT_EQ(test::slurp(dir.file("a.jsonl")), test::slurp(dir.file("b.jsonl")));

  const auto m = json::parse(test::slurp(pipeline::manifest_path(dir.file("b.jsonl"))));
  EXPECT_EQ(m["tool_version"], "0.3.0");
  EXPECT_EQ(m["config_digest"], config_digest(cfg));
  EXPECT_EQ(m["scorer_cache"]["misses"], 0);
  EXPECT_EQ(m["report_digest"], io::file_digest(dir.file("b.jsonl")));
}

TEST(ScoreCommand, WorkerCountDoesNotChangeOutput) {
  test::TempDir dir;
  auto cfg = config_with_cache(dir);
  cfg.workers = 1;
  pipeline::run_score(kE2e + "/trajectories.jsonl", cfg, dir.file("serial.jsonl"));
  cfg.workers = 8;
  cfg.paths.cache.reset();
  cfg.scorer.cache_path.reset();
  pipeline::run_score(kE2e + "/trajectories.jsonl", cfg, dir.file("parallel.jsonl"));
  EXPECT_EQ(test::slurp(dir.file("serial.jsonl")), test::slurp(dir.file("parallel.jsonl")));
}

TEST(ScoreCommand, MissingGoldAnswerIsASchemaError) {
  test::TempDir dir;
  const auto in = dir.write("t.jsonl", R"({"id":"x","question":"q","rollout_text":"<think>a</think>"})" "\n");
  EXPECT_THROW(pipeline::run_score(in, RunConfig{}, dir.file("out.jsonl")), io::InputSchemaError);
  EXPECT_FALSE(std::filesystem::exists(dir.file("out.jsonl")));
}

TEST(ScoreCommand, ScorerFailureLeavesNoOutput) {
  int port;
  {
    test::LocalServer srv;
    port = srv.start();
  }
  test::TempDir dir;
  RunConfig cfg;
  cfg.scorer.backend = ScorerBackend::remote;
  cfg.scorer.endpoint = "http://127.0.0.1:" + std::to_string(port);
  cfg.scorer.max_retries = 0;
  EXPECT_THROW(pipeline::run_score(kE2e + "/trajectories.jsonl", cfg, dir.file("out.jsonl")), ScorerError);
  EXPECT_FALSE(std::filesystem::exists(dir.file("out.jsonl")));
  EXPECT_FALSE(std::filesystem::exists(pipeline::manifest_path(dir.file("out.jsonl"))));
}

TEST(AdvantageCommand, GroupsOfFour) {
  test::TempDir dir;
  const RunConfig cfg;
  const auto in = reward_report(dir, {{"a", 2}, {"b", 0}, {"c", 2}, {"d", 0}, {"e", 1}, {"f", 1}, {"g", 1}, {"h", 1}},
                                config_digest(cfg));
  const auto recs = pipeline::run_advantage(in, cfg, dir.file("adv.jsonl"));
  ASSERT_EQ(recs.size(), 8u);
  EXPECT_EQ(recs[0].group, 0u);
  EXPECT_EQ(recs[4].group, 1u);
  EXPECT_NEAR(recs[0].advantage, 1.0, 1e-7);
  EXPECT_NEAR(recs[1].advantage, -1.0, 1e-7);
  for (std::size_t i = 4; i < 8; ++i) EXPECT_EQ(recs[i].advantage, 0.0);
  const auto out = read_jsonl(dir.file("adv.jsonl"));
  ASSERT_EQ(out.size(), 8u);
  EXPECT_TRUE(out[0]["mean_surrogate"].is_null());
  EXPECT_EQ(json::parse(test::slurp(pipeline::manifest_path(dir.file("adv.jsonl"))))["groups"], 2);
}

TEST(AdvantageCommand, RejectsBadInput) {
  test::TempDir dir;
  const RunConfig cfg;
  const auto uneven = reward_report(dir, {{"a", 1}, {"b", 0}, {"c", 1}}, config_digest(cfg));
  EXPECT_THROW(pipeline::run_advantage(uneven, cfg, dir.file("o.jsonl")), io::InputSchemaError);

  const auto other = reward_report(dir, {{"a", 1}, {"b", 0}, {"c", 1}, {"d", 0}}, std::string(64, '0'));
  EXPECT_THROW(pipeline::run_advantage(other, cfg, dir.file("o.jsonl")), ConfigError);

  const auto mixed = reward_report(dir, {{"a", 1}, {"b", 0}, {"c", 1}, {"d", 0}}, config_digest(cfg), 2);
  EXPECT_THROW(pipeline::run_advantage(mixed, cfg, dir.file("o.jsonl")), io::InputSchemaError);
  EXPECT_FALSE(std::filesystem::exists(dir.file("o.jsonl")));
}

TEST(AdvantageCommand, SurrogateAuditMasksEvidence) {
  test::TempDir dir;
  const RunConfig cfg;
  // "<search>q</search>" is 18 chars; the evidence body "doc" spans [28, 31).
  const std::string text = "<search>q</search><evidence>doc</evidence><diagnosis>x</diagnosis>";
  std::string traj, lp;
  for (const char* id : {"a", "b", "c", "d"}) {
    traj += json{{"id", id}, {"question", "q"}, {"gold_answer", "x"}, {"rollout_text", text},
                 {"token_offsets", {{0, 0, 18}, {1, 18, 28}, {2, 28, 31}, {3, 31, 66}}}}
                .dump() +
            "\n";
    lp += json{{"id", id},
               {"logprob_new", {-1.0, -1.0, -9.0, -1.0}},
               {"logprob_old", {-1.0, -1.0, -1.0, -1.0}},
               {"logprob_ref", {-1.0, -1.0, -1.0, -1.0}}}
              .dump() +
          "\n";
  }
  const auto rewards = reward_report(dir, {{"a", 2}, {"b", 0}, {"c", 2}, {"d", 0}}, config_digest(cfg));
  const auto recs = pipeline::run_advantage(rewards, cfg, dir.file("adv.jsonl"), dir.write("lp.jsonl", lp),
                                            dir.write("t.jsonl", traj));
  for (const auto& r : recs) {
    ASSERT_TRUE(r.surrogate);
    EXPECT_EQ(*r.masked_tokens, 1u);
    EXPECT_EQ(r.surrogate->active_tokens, 3u);
    EXPECT_NEAR(r.surrogate->mean, r.advantage, 1e-12);
    EXPECT_EQ(r.surrogate->kl, 0.0);
  }
  const auto out = read_jsonl(dir.file("adv.jsonl"));
  EXPECT_EQ(out[0]["masked_token_count"], 1);

  EXPECT_THROW(pipeline::run_advantage(rewards, cfg, dir.file("x.jsonl"), dir.file("lp.jsonl")), ConfigError);
}

TEST(EvalCommand, SamplePredictions) {
  test::TempDir dir;
  const auto report = pipeline::run_eval(kRoot + "/data/predictions.jsonl", kRoot + "/data/icd10_tree.tsv",
                                         dir.file("eval.json"));
  EXPECT_EQ(report["aggregate"]["records"], 10);
  EXPECT_EQ(json::parse(test::slurp(dir.file("eval.json")))["aggregate"], report["aggregate"]);
  const auto& per = report["per_record"];
  EXPECT_EQ(per[0]["em"], 1);
  EXPECT_EQ(per[0]["kg"], 1.0);
  EXPECT_EQ(per[1]["kg"], 0.6);  // J18.1 vs J18.9
  EXPECT_EQ(per[9]["kg"], 0.0);  // unmappable prediction
  EXPECT_EQ(per[7]["doc_hit"], nullptr);
}

TEST(EvalCommand, IdenticalPredictionsScoreFull) {
  test::TempDir dir;
  const auto preds = dir.write("p.jsonl", R"({"id":"1","pred":"J18.9","gold":"J18.9"})" "\n"
                                          R"({"id":"2","pred":"Asthma unspecified","gold":"asthma, unspecified"})" "\n");
  const auto r = pipeline::run_eval(preds, kRoot + "/data/icd10_tree.tsv");
  EXPECT_EQ(r["aggregate"]["em_pct"], 100.0);
  EXPECT_EQ(r["aggregate"]["kg_pct"], 100.0);
  EXPECT_EQ(r["aggregate"]["avg"], 100.0);
}

TEST(SearchService, WireRequest) {
  test::TempDir dir;
  RunConfig cfg;
  const auto idx = pipeline::run_index(kRoot + "/data/corpus.jsonl", cfg, dir.file("idx.bin"));
  EXPECT_EQ(retrieval::InvertedIndex::load(dir.file("idx.bin")).doc_count(), idx.doc_count());

  test::LocalServer srv(pipeline::make_search_server(idx, cfg));
  srv.start();
  httplib::Client cli(srv.url());
  auto res = cli.Post("/v1/search", R"({"subqueries": ["productive cough fever", "zzzz"]})", "application/json");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 200);
  const auto body = json::parse(res->body);
  ASSERT_EQ(body["results"].size(), 2u);
  EXPECT_EQ(body["results"][0]["doc_id"], "pm-0001");
  EXPECT_TRUE(body["results"][1]["doc_id"].is_null());

  res = cli.Post("/v1/search", "nope", "application/json");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 400);
  res = cli.Post("/v1/search", R"({"subqueries": [1]})", "application/json");
  EXPECT_EQ(res->status, 400);
  res = cli.Get("/healthz");
  ASSERT_TRUE(res);
  EXPECT_EQ(json::parse(res->body)["documents"], 20);
}

TEST(SearchService, ModesAndLimits) {
  RunConfig cfg;
  cfg.retrieval.k_max = 2;
  const auto idx = retrieval::InvertedIndex::build(io::read_corpus(kRoot + "/data/corpus.jsonl"));
  EXPECT_EQ(pipeline::search(idx, {"cough", "fever", "rash"}, cfg).size(), 2u);
  cfg.retrieval.top_mode = TopMode::single_topk;
  cfg.retrieval.top_k = 5;
  const auto hits = pipeline::search(idx, {"cough", "fever"}, cfg);
  EXPECT_LE(hits.size(), 5u);
  EXPECT_GT(hits.size(), 1u);
}
