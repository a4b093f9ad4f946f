// cmig: command-line front end for the reward, advantage, retrieval and
// metrics toolkit.

#include <csignal>
#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "cmig/analytics.hpp"
#include "cmig/pipeline.hpp"

namespace {

enum Exit : int { kOk = 0, kValidation = 1, kInput = 2, kScorer = 3 };

struct Common {
  std::optional<std::string> config;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("-c,--config", c.config, "JSON config file");
  cmd->add_option("--set", c.overrides, "override a config key, e.g. --set weights.w_r=0.2")->take_all();
}

cmig::RunConfig load(const Common& c) { return cmig::load_config(c.config, c.overrides); }

int cmd_validate(const std::string& path, const Common& common, const std::optional<std::string>& out) {
  const auto cfg = load(common);
  const auto recs = cmig::io::read_rollouts(path);
  std::size_t bad = 0;
  std::string report;
  for (const auto& rec : recs) {
    const auto v = cmig::validate_format(rec.rollout, cfg.t_max);
    if (!v.ok) ++bad;
    report += nlohmann::json{{"id", rec.rollout.id}, {"ok", v.ok}, {"findings", v.findings}}.dump() + "\n";
  }
  if (out) cmig::io::write_atomic(*out, report);
  else std::cout << report;
  std::cerr << recs.size() << " records, " << bad << " with findings\n";
  return bad == 0 ? kOk : kValidation;
}

int cmd_score(const std::string& trajectories, const Common& common, std::optional<std::string> out) {
  const auto cfg = load(common);
  if (!out) out = cfg.paths.output;
  if (!out) throw cmig::ConfigError("no output path: pass --out or set paths.output");
  const auto run = cmig::pipeline::run_score(trajectories, cfg, *out);
  std::cerr << run.scores.size() << " trajectories scored; cache hits " << run.cache.hits << ", misses "
            << run.cache.misses << "\n";
  return kOk;
}

int cmd_advantage(const std::string& rewards, const Common& common, const std::string& out,
                  const std::optional<std::string>& logprobs, const std::optional<std::string>& trajectories) {
  const auto cfg = load(common);
  const auto recs = cmig::pipeline::run_advantage(rewards, cfg, out, logprobs, trajectories);
  std::cerr << recs.size() << " advantages in " << recs.size() / static_cast<std::size_t>(cfg.grpo.group_size)
            << " groups\n";
  return kOk;
}

int cmd_index(const std::string& corpus, const Common& common, const std::string& out) {
  const auto cfg = load(common);
  const auto idx = cmig::pipeline::run_index(corpus, cfg, out);
  std::cerr << "indexed " << idx.doc_count() << " documents\n";
  return kOk;
}

cmig::retrieval::InvertedIndex open_index(const std::string& path) {
  if (!std::filesystem::exists(path))
    throw cmig::io::IoError("index not found: " + path + " (build it with `cmig index`)");
  return cmig::retrieval::InvertedIndex::load(path);
}

int cmd_search(const std::string& index, const Common& common, const std::vector<std::string>& queries) {
  const auto cfg = load(common);
  const auto idx = open_index(index);
  std::cout << cmig::pipeline::hits_to_json(cmig::pipeline::search(idx, queries, cfg)).dump(2) << "\n";
  return kOk;
}

int cmd_serve(const std::string& index, const Common& common, const std::string& host, int port) {
  const auto cfg = load(common);
  const auto idx = open_index(index);
  auto srv = cmig::pipeline::make_search_server(idx, cfg);
  if (port == 0) port = srv->bind_to_any_port(host);
  else if (!srv->bind_to_port(host, port)) throw cmig::io::IoError("cannot bind " + host + ":" + std::to_string(port));
  std::cerr << "listening on " << host << ":" << port << "\n";
  std::cout << port << std::endl;
  srv->listen_after_bind();
  return kOk;
}

int cmd_eval(const std::string& predictions, const Common& common, std::optional<std::string> tree,
             const std::optional<std::string>& out) {
  const auto cfg = load(common);
  if (!tree) tree = cfg.paths.icd_tree;
  if (!tree) throw cmig::ConfigError("no ICD tree: pass --icd-tree or set paths.icd_tree");
  const auto report = cmig::pipeline::run_eval(predictions, *tree, out);
  if (!out) std::cout << report.dump(2) << "\n";
  const auto& a = report["aggregate"];
  std::cerr << "EM " << a["em_pct"].get<double>() << "  KG " << a["kg_pct"].get<double>() << "  Avg "
            << a["avg"].get<double>() << "\n";
  return kOk;
}

std::vector<cmig::analytics::Point> read_series(const std::string& path) {
  std::vector<cmig::analytics::Point> pts;
  cmig::io::for_each_jsonl(path, [&](std::size_t lineno, const nlohmann::json& j) {
    try {
      pts.push_back({j.at("step").get<double>(), j.at("value").get<double>()});
    } catch (const nlohmann::json::exception& e) {
      throw cmig::io::InputSchemaError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  });
  return pts;
}

int cmd_analyze(const std::string& series, const std::optional<std::string>& paired) {
  const auto pts = read_series(series);
  std::vector<cmig::analytics::Point> other;
  if (paired) other = read_series(*paired);
  const auto s = cmig::analytics::analyze(pts, other);
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  nlohmann::json j = {{"points", pts.size()},
                      {"slope", s.fit.slope},
                      {"intercept", s.fit.intercept},
                      {"r2", opt(s.fit.r2)},
                      {"pearson_r", opt(s.pearson)},
                      {"late_points", s.late_points},
                      {"late_mean", s.late_mean},
                      {"late_std", s.late_std},
                      {"cv", opt(s.cv)}};
  std::cout << j.dump(2) << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cmig: C-MIG reward, advantage, retrieval and metrics toolkit"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(cmig::pipeline::kToolVersion));

  Common common;
  std::string input;
  std::string output;
  std::optional<std::string> opt_out;
  std::optional<std::string> logprobs;
  std::optional<std::string> trajectories;
  std::optional<std::string> tree;
  std::optional<std::string> paired;
  std::vector<std::string> queries;
  std::string host = "127.0.0.1";
  int port = 8090;

  auto* validate = app.add_subcommand("validate", "check tag grammar and format of a rollout file");
  validate->add_option("trajectories", input, "rollout JSON Lines")->required();
  validate->add_option("-o,--out", opt_out, "write the report here instead of stdout");
  add_common(validate, common);

  auto* score = app.add_subcommand("score", "compute reward breakdowns for a rollout batch");
  score->add_option("trajectories", input, "rollout JSON Lines")->required();
  score->add_option("-o,--out", opt_out, "reward report (JSON Lines)");
  add_common(score, common);

  auto* advantage = app.add_subcommand("advantage", "group z-score advantages from a reward report");
  advantage->add_option("rewards", input, "reward report from `cmig score`")->required();
  advantage->add_option("-o,--out", output, "advantage report (JSON Lines)")->required();
  advantage->add_option("--logprobs", logprobs, "per-token logprobs for the surrogate audit");
  advantage->add_option("--trajectories", trajectories, "rollouts, needed for evidence masks");
  add_common(advantage, common);

  auto* index = app.add_subcommand("index", "build a BM25 index from a corpus");
  index->add_option("corpus", input, "corpus JSON Lines")->required();
  index->add_option("-o,--out", output, "index file")->required();
  add_common(index, common);

  auto* search = app.add_subcommand("search", "query an index with one or more subqueries");
  search->add_option("-i,--index", input, "index file")->required();
  search->add_option("-q,--query", queries, "subquery (repeatable)")->required();
  add_common(search, common);

  auto* serve = app.add_subcommand("serve", "serve POST /v1/search over HTTP");
  serve->add_option("-i,--index", input, "index file")->required();
  serve->add_option("--host", host, "bind address")->capture_default_str();
  serve->add_option("--port", port, "bind port, 0 picks a free one")->capture_default_str();
  add_common(serve, common);

  auto* eval = app.add_subcommand("eval", "EM / KG / Doc_Hit over a prediction file");
  eval->add_option("predictions", input, "prediction JSON Lines")->required();
  eval->add_option("--icd-tree", tree, "ICD tree TSV");
  eval->add_option("-o,--out", opt_out, "report JSON (stdout if omitted)");
  add_common(eval, common);

  auto* analyze = app.add_subcommand("analyze", "trend, correlation and late-window volatility of a series");
  analyze->add_option("series", input, "JSON Lines of {step, value}")->required();
  analyze->add_option("--paired", paired, "second series for Pearson r");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kInput;
  }

  try {
    if (*validate) return cmd_validate(input, common, opt_out);
    if (*score) return cmd_score(input, common, opt_out);
    if (*advantage) return cmd_advantage(input, common, output, logprobs, trajectories);
    if (*index) return cmd_index(input, common, output);
    if (*search) return cmd_search(input, common, queries);
    if (*serve) return cmd_serve(input, common, host, port);
    if (*eval) return cmd_eval(input, common, tree, opt_out);
    if (*analyze) return cmd_analyze(input, paired);
  } catch (const cmig::ScorerError& e) {
    std::cerr << "cmig: scorer error: " << e.what() << "\n";
    return kScorer;
  } catch (const std::exception& e) {
    std::cerr << "cmig: " << e.what() << "\n";
    return kInput;
  }
  return kInput;
}
