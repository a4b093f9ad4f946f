#pragma once

// Diagnosis evaluation: exact match, ICD-10 tree (KG) score, thresholded
// embedding similarity and document hit rate.

#include <algorithm>
#include <cmath>
#include <functional>
#include <istream>
#include <map>
#include <optional>
#include <regex>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "cmig/text.hpp"

namespace cmig::metrics {

using Code = std::string;

struct UnknownCode : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IcdTreeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DimensionMismatch : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ZeroVector : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline constexpr double kKgAlpha = 0.2;
inline constexpr double kEmbTau = 0.6;
inline constexpr double kTermOverlapFloor = 0.5;

inline std::string normalize_text(std::string_view t) { return text::normalize_text(t); }

inline std::vector<std::string> normalized_terms(std::string_view t) {
  std::vector<std::string> out;
  const std::string n = normalize_text(t);
  std::size_t pos = 0;
  while (pos < n.size()) {
    const std::size_t sp = n.find(' ', pos);
    const std::size_t end = sp == std::string::npos ? n.size() : sp;
    if (end > pos) out.push_back(n.substr(pos, end - pos));
    pos = end + 1;
  }
  return out;
}

/// ICD-10 hierarchy. Rows with an empty parent are top-level; all top-level
/// codes hang off one implicit root, so any two codes have a common ancestor.
class IcdTree {
 public:
  void add(Code code, Code parent, std::string description) {
    if (code.empty()) throw IcdTreeError("empty code");
    if (parent_.contains(code)) throw IcdTreeError("duplicate code: " + code);
    parent_.emplace(code, std::move(parent));
    description_.emplace(std::move(code), std::move(description));
    finalized_ = false;
  }

  /// Validates parents and acyclicity, computes depths and the description
  /// indexes. Must be called after the last add().
  void finalize() {
    depth_.clear();
    for (const auto& [code, parent] : parent_)
      if (!parent.empty() && !parent_.contains(parent)) throw IcdTreeError("code " + code + " has unknown parent " + parent);
    for (const auto& [code, _] : parent_) compute_depth(code);

    exact_.clear();
    term_index_.clear();
    desc_terms_.clear();
    for (const auto& [code, desc] : description_) {
      const std::string norm = normalize_text(desc);
      if (norm.empty()) continue;
      auto [it, inserted] = exact_.emplace(norm, code);
      if (!inserted && code < it->second) it->second = code;
      auto terms = normalized_terms(desc);
      std::sort(terms.begin(), terms.end());
      terms.erase(std::unique(terms.begin(), terms.end()), terms.end());
      for (const auto& t : terms) term_index_[t].push_back(code);
      desc_terms_[code] = terms.size();
    }
    finalized_ = true;
  }

  /// Reads "code<TAB>parent<TAB>description" lines; blank lines and lines
  /// starting with '#' are skipped.
  static IcdTree load_tsv(std::istream& in) {
    IcdTree tree;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty() || line[0] == '#') continue;
      const auto t1 = line.find('\t');
      if (t1 == std::string::npos) throw IcdTreeError("line " + std::to_string(lineno) + ": expected tab-separated fields");
      const auto t2 = line.find('\t', t1 + 1);
      Code code = line.substr(0, t1);
      Code parent = t2 == std::string::npos ? line.substr(t1 + 1) : line.substr(t1 + 1, t2 - t1 - 1);
      std::string desc = t2 == std::string::npos ? std::string() : line.substr(t2 + 1);
      tree.add(std::move(code), std::move(parent), std::move(desc));
    }
    tree.finalize();
    return tree;
  }

  bool contains(std::string_view code) const { return parent_.contains(Code(code)); }
  std::size_t size() const { return parent_.size(); }

  /// Top-level codes have depth 1; the implicit root has depth 0.
  int depth(std::string_view code) const {
    require_finalized();
    const auto it = depth_.find(Code(code));
    if (it == depth_.end()) throw UnknownCode("unknown ICD code: " + std::string(code));
    return it->second;
  }

  const Code& parent(std::string_view code) const {
    const auto it = parent_.find(Code(code));
    if (it == parent_.end()) throw UnknownCode("unknown ICD code: " + std::string(code));
    return it->second;
  }

  /// Lowest common ancestor; empty string denotes the implicit root.
  Code lca(std::string_view a, std::string_view b) const {
    Code x(a);
    Code y(b);
    int dx = depth(x);
    int dy = depth(y);
    while (dx > dy) { x = parent(x); --dx; }
    while (dy > dx) { y = parent(y); --dy; }
    while (x != y) {
      x = parent(x);
      y = parent(y);
    }
    return x;
  }

  std::optional<Code> exact_description(std::string_view normalized) const {
    require_finalized();
    const auto it = exact_.find(std::string(normalized));
    if (it == exact_.end()) return std::nullopt;
    return it->second;
  }

  const std::unordered_map<std::string, std::vector<Code>>& term_index() const { return term_index_; }
  std::size_t description_term_count(const Code& code) const {
    const auto it = desc_terms_.find(code);
    return it == desc_terms_.end() ? 0 : it->second;
  }

  std::vector<Code> codes() const {
    std::vector<Code> out;
    for (const auto& [c, _] : parent_) out.push_back(c);
    std::sort(out.begin(), out.end());
    return out;
  }

 private:
  void require_finalized() const {
    if (!finalized_) throw IcdTreeError("IcdTree::finalize() not called");
  }

  int compute_depth(const Code& code) {
    if (const auto it = depth_.find(code); it != depth_.end()) {
      if (it->second < 0) throw IcdTreeError("cycle through code " + code);
      return it->second;
    }
    // Iterative walk so deep chains cannot overflow the stack.
    std::vector<Code> chain;
    Code cur = code;
    int base = 0;
    while (true) {
      if (const auto it = depth_.find(cur); it != depth_.end()) {
        if (it->second < 0) throw IcdTreeError("cycle through code " + cur);
        base = it->second;
        break;
      }
      depth_[cur] = -1;
      chain.push_back(cur);
      const Code& p = parent_.at(cur);
      if (p.empty()) {
        base = 0;
        break;
      }
      cur = p;
    }
    for (auto it = chain.rbegin(); it != chain.rend(); ++it) depth_[*it] = ++base;
    return depth_.at(code);
  }

  std::unordered_map<Code, Code> parent_;
  std::unordered_map<Code, std::string> description_;
  std::unordered_map<Code, int> depth_;
  std::unordered_map<std::string, Code> exact_;
  std::unordered_map<std::string, std::vector<Code>> term_index_;
  std::unordered_map<Code, std::size_t> desc_terms_;
  bool finalized_ = false;
};

/// Path length through the lowest common ancestor.
inline int icd_tree_distance(std::string_view a, std::string_view b, const IcdTree& tree) {
  const Code l = tree.lca(a, b);
  const int dl = l.empty() ? 0 : tree.depth(l);
  return tree.depth(a) + tree.depth(b) - 2 * dl;
}

/// Optional last mapping stage (for example an LLM call). Returning a code
/// that is not in the tree counts as unmapped.
using IcdFallback = std::function<std::optional<Code>(std::string_view diagnosis)>;

enum class MapStage { none, regex, exact, term_overlap, fallback };

struct IcdMapping {
  std::optional<Code> code;
  MapStage stage = MapStage::none;
};

inline IcdMapping icd_map_detailed(std::string_view diagnosis, const IcdTree& tree, const IcdFallback& fallback = {}) {
  // Stage 1: explicit codes such as J30, J30.1, J301.
  static const std::regex kCode(R"(\b([A-Za-z][0-9]{2})(\.?)([0-9]{1,2})?\b)");
  const std::string diag(diagnosis);
  for (auto it = std::sregex_iterator(diag.begin(), diag.end(), kCode); it != std::sregex_iterator(); ++it) {
    const auto& m = *it;
    std::string head = m[1].str();
    head[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(head[0])));
    if (m[2].matched && m[2].length() > 0 && !m[3].matched) continue;  // trailing dot with no digits
    std::vector<Code> candidates;
    if (m[3].matched) {
      candidates.push_back(head + "." + m[3].str());
      candidates.push_back(head + m[3].str());
    } else {
      candidates.push_back(head);
    }
    for (const auto& c : candidates)
      if (tree.contains(c)) return {c, MapStage::regex};
  }

  // Stage 2: exact normalized description.
  const std::string norm = normalize_text(diagnosis);
  if (!norm.empty()) {
    if (auto c = tree.exact_description(norm)) return {*c, MapStage::exact};
  }

  // Stage 3: matched description terms over description length.
  auto terms = normalized_terms(diagnosis);
  std::sort(terms.begin(), terms.end());
  terms.erase(std::unique(terms.begin(), terms.end()), terms.end());
  std::map<Code, std::size_t> matched;
  for (const auto& t : terms) {
    const auto it = tree.term_index().find(t);
    if (it == tree.term_index().end()) continue;
    for (const auto& c : it->second) ++matched[c];
  }
  std::optional<Code> best;
  double best_score = kTermOverlapFloor;
  for (const auto& [code, hits] : matched) {  // ascending code order
    const double score = static_cast<double>(hits) / static_cast<double>(tree.description_term_count(code));
    if (score > best_score) {
      best = code;
      best_score = score;
    }
  }
  if (best) return {best, MapStage::term_overlap};

  // Stage 4: pluggable fallback.
  if (fallback) {
    if (auto c = fallback(diagnosis); c && tree.contains(*c)) return {*c, MapStage::fallback};
  }
  return {std::nullopt, MapStage::none};
}

inline std::optional<Code> icd_map(std::string_view diagnosis, const IcdTree& tree, const IcdFallback& fallback = {}) {
  return icd_map_detailed(diagnosis, tree, fallback).code;
}

/// max(0, 1 - alpha * d).
inline double kg_from_distance(int d, double alpha = kKgAlpha) {
  if (d < 0) throw std::invalid_argument("negative tree distance");
  const double inv = 1.0 / alpha;
  const double k = std::round(inv);
  double v;
  if (std::fabs(inv - k) < 1e-9 && k > 0.0) {
    // (K - d) / K is the correctly rounded value of the exact rational.
    v = (k - static_cast<double>(d)) / k;
  } else {
    v = 1.0 - alpha * static_cast<double>(d);
  }
  return std::max(0.0, v);
}

inline double kg_score(std::string_view pred, std::string_view gold, const IcdTree& tree,
                       const IcdFallback& fallback = {}, double alpha = kKgAlpha) {
  const auto pc = icd_map(pred, tree, fallback);
  if (!pc) return 0.0;
  const auto gc = icd_map(gold, tree, fallback);
  if (!gc) return 0.0;
  return kg_from_distance(icd_tree_distance(*pc, *gc, tree), alpha);
}

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw DimensionMismatch("embedding dimensions differ");
  if (a.empty()) throw ZeroVector("empty embedding");
  double dot = 0.0;
  double na = 0.0;
  double nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) throw ZeroVector("zero-norm embedding");
  return std::clamp(dot / std::sqrt(na * nb), -1.0, 1.0);
}

/// Cosine similarity, zeroed below tau.
inline double emb_score(const std::vector<double>& v_pred, const std::vector<double>& v_gold, double tau = kEmbTau) {
  const double c = cosine(v_pred, v_gold);
  return c >= tau ? c : 0.0;
}

inline int exact_match(std::string_view pred, std::string_view gold) {
  const std::string p = normalize_text(pred);
  return !p.empty() && p == normalize_text(gold) ? 1 : 0;
}

/// 1 iff the normalized gold answer occurs in the union of all retrieved
/// documents. Documents are joined by newline, which normalized text never
/// contains, so a match cannot straddle two documents.
inline int doc_hit(std::string_view gold, const std::vector<std::string>& docs_all_turns) {
  const std::string g = normalize_text(gold);
  if (g.empty() || docs_all_turns.empty()) return 0;
  std::string all;
  for (const auto& d : docs_all_turns) {
    all += normalize_text(d);
    all += '\n';
  }
  return all.find(g) != std::string::npos ? 1 : 0;
}

struct EvalInput {
  std::string id;
  std::string pred;
  std::string gold;
  std::optional<std::vector<std::string>> docs;
  std::optional<std::vector<double>> pred_embedding;
  std::optional<std::vector<double>> gold_embedding;
};

struct EvalRecord {
  std::string id;
  std::string pred;
  std::string gold;
  std::optional<Code> pred_code;
  std::optional<Code> gold_code;
  int em = 0;
  double kg = 0.0;
  std::optional<double> emb;
  std::optional<int> doc_hit;
};

struct EvalAggregate {
  std::size_t records = 0;
  double em_pct = 0.0;
  double kg_pct = 0.0;
  double avg = 0.0;
  std::optional<double> doc_hit_pct;
  std::optional<double> emb_mean;
};

inline EvalRecord evaluate_record(const EvalInput& in, const IcdTree& tree, const IcdFallback& fallback = {},
                                  double tau = kEmbTau) {
  EvalRecord r;
  r.id = in.id;
  r.pred = in.pred;
  r.gold = in.gold;
  r.em = exact_match(in.pred, in.gold);
  r.pred_code = icd_map(in.pred, tree, fallback);
  r.gold_code = icd_map(in.gold, tree, fallback);
  if (r.pred_code && r.gold_code) r.kg = kg_from_distance(icd_tree_distance(*r.pred_code, *r.gold_code, tree));
  if (in.docs) r.doc_hit = doc_hit(in.gold, *in.docs);
  if (in.pred_embedding && in.gold_embedding) r.emb = emb_score(*in.pred_embedding, *in.gold_embedding, tau);
  return r;
}

/// Percentages over all records; avg is the mean of the EM and KG percentages.
inline EvalAggregate aggregate(const std::vector<EvalRecord>& recs) {
  EvalAggregate a;
  a.records = recs.size();
  if (recs.empty()) return a;
  double em = 0.0;
  double kg = 0.0;
  double hits = 0.0;
  std::size_t with_docs = 0;
  double emb = 0.0;
  std::size_t with_emb = 0;
  for (const auto& r : recs) {
    em += r.em;
    kg += r.kg;
    if (r.doc_hit) {
      hits += *r.doc_hit;
      ++with_docs;
    }
    if (r.emb) {
      emb += *r.emb;
      ++with_emb;
    }
  }
  const double n = static_cast<double>(recs.size());
  a.em_pct = 100.0 * em / n;
  a.kg_pct = 100.0 * kg / n;
  a.avg = (a.em_pct + a.kg_pct) / 2.0;
  if (with_docs > 0) a.doc_hit_pct = 100.0 * hits / static_cast<double>(with_docs);
  if (with_emb > 0) a.emb_mean = emb / static_cast<double>(with_emb);
  return a;
}

}  // namespace cmig::metrics
