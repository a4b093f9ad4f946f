#pragma once

// Information-gain process rewards and outcome rewards.
//
// Every gain is a difference of two LogitP values from the same frozen
// scorer. Document gains compare successive retrieval rounds; the refine gain
// compares the question alone against question plus refinement.

#include <algorithm>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "cmig/scorer.hpp"
#include "cmig/text.hpp"
#include "cmig/trajectory.hpp"

namespace cmig {

struct RewardWeights {
  double w_f = 1.0;
  double w_d = 1.0;
  double alpha_d = 1.0;
  double w_r = 0.1;
  double w_hard = 0.1;
  double diag_weight = 1.0;

  void validate() const {
    for (double v : {w_f, w_d, alpha_d, w_r, w_hard, diag_weight})
      if (!(v >= 0.0) || !std::isfinite(v)) throw std::invalid_argument("reward weights must be finite and >= 0");
  }
};

enum class CompositionRule { linear, nonlinear_autorefine };

inline std::string_view to_string(CompositionRule r) {
  return r == CompositionRule::linear ? "linear" : "nonlinear_autorefine";
}

/// What the document reward divides its sum by: the literal turn count N, or
/// the N - 1 terms actually summed.
enum class DocRewardDivisor { turn_count, summed_terms };

struct GainRecord {
  std::vector<double> logitp_base_per_turn;  // LogitP(a | q, D_{k-1}), D_0 empty
  std::vector<double> logitp_doc_per_turn;   // LogitP(a | q, D_k)
  std::vector<double> delta_doc;             // per-round gain
  std::vector<double> delta_k;               // inter-round improvement, length N-1
  double logitp_q = 0.0;
  double logitp_refine = 0.0;
  double delta_refine = 0.0;
  bool has_refine = false;
  std::string tokenizer_id;

  std::size_t rounds() const { return delta_doc.size(); }
};

struct RewardBreakdown {
  double r_format = 0.0;
  double r_diag = 0.0;
  double r_doc = 0.0;
  double r_refine = 0.0;
  double r_hard_search = 0.0;
  double r_hard_doc = 0.0;
  double r_total = 0.0;
  CompositionRule composition_rule = CompositionRule::nonlinear_autorefine;
};

struct TokenizerMismatch : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline double unified_ig(double logitp_extra, double logitp_base) { return logitp_extra - logitp_base; }

inline double unified_ig(const ScoreResult& extra, const ScoreResult& base) {
  if (extra.tokenizer_id != base.tokenizer_id)
    throw TokenizerMismatch("information gain across tokenizers: " + extra.tokenizer_id + " vs " + base.tokenizer_id);
  return unified_ig(extra.avg_logprob, base.avg_logprob);
}

inline constexpr std::string_view kDefaultContextSeparator = "\n\n";

/// Question, separator, then the extra text verbatim. No extra means the
/// question alone.
inline std::string assemble_context(std::string_view question, const std::string* extra,
                                    std::string_view separator = kDefaultContextSeparator) {
  std::string out(question);
  if (extra) {
    out += separator;
    out += *extra;
  }
  return out;
}

namespace detail {

template <typename F>
ScoreResult score_with_context(F&& f, const std::string& where) {
  try {
    return f();
  } catch (const DeterminismViolation& e) {
    throw DeterminismViolation(where + ": " + e.what(), e.request_hash());
  } catch (const RemoteUnavailable& e) {
    throw RemoteUnavailable(where + ": " + e.what(), e.request_hash());
  } catch (const ProtocolError& e) {
    throw ProtocolError(where + ": " + e.what(), e.request_hash());
  }
}

inline void note_tokenizer(GainRecord& g, const ScoreResult& r) {
  if (g.tokenizer_id.empty()) {
    g.tokenizer_id = r.tokenizer_id;
  } else if (g.tokenizer_id != r.tokenizer_id) {
    throw TokenizerMismatch("scorer changed tokenizer mid-record: " + g.tokenizer_id + " vs " + r.tokenizer_id);
  }
}

}  // namespace detail

/// Fills the document fields of a GainRecord. docs_per_turn[k] is the
/// evidence text of retrieval round k + 1.
inline void doc_gain_series(GainRecord& g, std::string_view question, const std::vector<std::string>& docs_per_turn,
                            const std::string& gold, Scorer& scorer,
                            std::string_view separator = kDefaultContextSeparator) {
  if (docs_per_turn.empty()) throw std::invalid_argument("doc_gain_series needs at least one round");
  const std::size_t n = docs_per_turn.size();
  g.logitp_base_per_turn.assign(n, 0.0);
  g.logitp_doc_per_turn.assign(n, 0.0);
  g.delta_doc.assign(n, 0.0);
  g.delta_k.clear();

  auto score = [&](const std::string* extra, const std::string& where) {
    const ScoreRequest req{assemble_context(question, extra, separator), gold};
    auto r = detail::score_with_context([&] { return scorer.logitp(req); }, where);
    detail::note_tokenizer(g, r);
    return r.avg_logprob;
  };

  double prev = score(nullptr, "turn 0 (question only)");
  for (std::size_t k = 0; k < n; ++k) {
    g.logitp_base_per_turn[k] = prev;
    g.logitp_doc_per_turn[k] = score(&docs_per_turn[k], "turn " + std::to_string(k + 1));
    g.delta_doc[k] = unified_ig(g.logitp_doc_per_turn[k], g.logitp_base_per_turn[k]);
    prev = g.logitp_doc_per_turn[k];
  }
  for (std::size_t k = 1; k < n; ++k) g.delta_k.push_back(g.delta_doc[k] - g.delta_doc[k - 1]);
}

inline GainRecord doc_gain_series(std::string_view question, const std::vector<std::string>& docs_per_turn,
                                  const std::string& gold, Scorer& scorer,
                                  std::string_view separator = kDefaultContextSeparator) {
  GainRecord g;
  doc_gain_series(g, question, docs_per_turn, gold, scorer, separator);
  return g;
}

/// Fills the refine fields: gain of (q, s_refine) over q alone.
inline void refine_gain(GainRecord& g, std::string_view question, const std::string& refine_text,
                        const std::string& gold, Scorer& scorer,
                        std::string_view separator = kDefaultContextSeparator) {
  const ScoreRequest base{assemble_context(question, nullptr, separator), gold};
  const ScoreRequest extra{assemble_context(question, &refine_text, separator), gold};
  const auto rb = detail::score_with_context([&] { return scorer.logitp(base); }, "refine base");
  const auto re = detail::score_with_context([&] { return scorer.logitp(extra); }, "refine");
  detail::note_tokenizer(g, rb);
  detail::note_tokenizer(g, re);
  g.logitp_q = rb.avg_logprob;
  g.logitp_refine = re.avg_logprob;
  g.delta_refine = unified_ig(re, rb);
  g.has_refine = true;
}

/// Truncated-tanh document reward with the first-round quality gate.
inline double reward_doc(const GainRecord& g, const RewardWeights& w,
                         DocRewardDivisor divisor = DocRewardDivisor::turn_count) {
  const std::size_t n = g.delta_doc.size();
  if (n < 2 || g.delta_doc.front() <= 0.0) return 0.0;
  if (g.delta_k.size() != n - 1) throw std::invalid_argument("GainRecord delta_k length must be N - 1");
  double sum = 0.0;
  for (double d : g.delta_k) sum += std::max(std::tanh(w.alpha_d * d), 0.0);
  const double denom = divisor == DocRewardDivisor::turn_count ? static_cast<double>(n) : static_cast<double>(n - 1);
  return w.w_d / denom * sum;
}

/// Median of a non-empty sample; even sizes average the two middle values.
inline double median(std::vector<double> v) {
  if (v.empty()) throw std::invalid_argument("median of empty sample");
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 == 1 ? v[m] : (v[m - 1] + v[m]) / 2.0;
}

/// Batch-rank refine reward: w_r for every positive gain at or above the
/// median of the positive gains in the batch.
inline std::vector<double> reward_refine_batch(const std::vector<double>& deltas, const RewardWeights& w) {
  std::vector<double> positive;
  for (double d : deltas)
    if (d > 0.0) positive.push_back(d);
  std::vector<double> out(deltas.size(), 0.0);
  if (positive.empty()) return out;
  const double threshold = median(std::move(positive));
  for (std::size_t i = 0; i < deltas.size(); ++i)
    if (deltas[i] > 0.0 && deltas[i] >= threshold) out[i] = w.w_r;
  return out;
}

inline double reward_format(const FormatVerdict& v, const RewardWeights& w) { return v.ok ? w.w_f : 0.0; }

/// 1 on normalized exact match, else 0. An empty prediction never matches.
inline double reward_diag(std::string_view pred, std::string_view gold) {
  const std::string p = text::normalize_text(pred);
  if (p.empty()) return 0.0;
  return p == text::normalize_text(gold) ? 1.0 : 0.0;
}

/// Normalized-substring containment. An answer that normalizes to nothing is
/// never contained.
inline bool contains_answer(std::string_view haystack, std::string_view gold) {
  const std::string g = text::normalize_text(gold);
  if (g.empty()) return false;
  return text::normalize_text(haystack).find(g) != std::string::npos;
}

inline double any_contains(const std::vector<std::string>& texts, std::string_view gold) {
  for (const auto& t : texts)
    if (contains_answer(t, gold)) return 1.0;
  return 0.0;
}

/// Baseline: did any search query contain the gold diagnosis.
inline double hard_search_reward(const std::vector<std::string>& searches, std::string_view gold) {
  return any_contains(searches, gold);
}

/// Baseline: did any retrieved document set contain the gold diagnosis.
inline double hard_doc_reward(const std::vector<std::string>& docs, std::string_view gold) {
  return any_contains(docs, gold);
}

/// Baseline: did any refinement contain the gold diagnosis.
inline double hard_refine_reward(const std::vector<std::string>& refines, std::string_view gold) {
  return any_contains(refines, gold);
}

/// Sets r_total. Hard baseline signals are reported but never summed here.
inline RewardBreakdown compose_total(RewardBreakdown b, CompositionRule rule) {
  b.composition_rule = rule;
  if (rule == CompositionRule::linear) {
    b.r_total = b.r_format + b.r_diag + b.r_doc + b.r_refine;
  } else if (b.r_diag > 0.0) {
    b.r_total = b.r_format + b.r_diag + b.r_doc;
  } else {
    b.r_total = b.r_format + b.r_doc + b.r_refine;
  }
  return b;
}

}  // namespace cmig
