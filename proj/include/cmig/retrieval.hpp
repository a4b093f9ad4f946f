#pragma once

// BM25 inverted index with multi-subquery, top-1-per-subquery retrieval.
//
//   score(q, d) = sum_t IDF(t) * tf * (k1 + 1) / (tf + k1 * (1 - b + b * len / avglen))
//   IDF(t)      = ln((N - df + 0.5) / (df + 0.5) + 1)
//
// Documents are kept sorted by doc_id, so internal ordinals order the same way
// as ids and "smallest ordinal" is the lexicographic tie-break.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "cmig/text.hpp"

namespace cmig::retrieval {

struct Document {
  std::string doc_id;
  std::optional<std::string> title;
  std::string body;

  friend bool operator==(const Document&, const Document&) = default;
};

struct DuplicateDocId : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct EmptyCorpus : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct UnknownDocId : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IndexFormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline constexpr double kDefaultK1 = 1.2;
inline constexpr double kDefaultB = 0.75;

/// Lowercased, punctuation-stripped whitespace tokens.
inline std::vector<std::string> tokenize(std::string_view s) {
  const std::string norm = text::normalize_text(s);
  std::vector<std::string> out;
  std::size_t pos = 0;
  while (pos < norm.size()) {
    const std::size_t sp = norm.find(' ', pos);
    const std::size_t end = sp == std::string::npos ? norm.size() : sp;
    if (end > pos) out.emplace_back(norm.substr(pos, end - pos));
    pos = end + 1;
  }
  return out;
}

/// Text a document contributes to the index: title (if any) then body.
inline std::string indexed_text(const Document& d) {
  if (d.title && !d.title->empty()) return *d.title + " " + d.body;
  return d.body;
}

struct Posting {
  std::uint32_t doc = 0;  // ordinal
  std::uint32_t tf = 0;

  friend bool operator==(const Posting&, const Posting&) = default;
};

struct RetrievalHit {
  std::string subquery;
  std::optional<Document> document;
  double score = 0.0;
};

class InvertedIndex {
 public:
  static constexpr std::string_view kMagic = "CMIGIDX1";
  static constexpr std::uint32_t kFormatVersion = 1;

  /// Builds from a non-empty corpus; throws DuplicateDocId or EmptyCorpus.
  static InvertedIndex build(std::vector<Document> corpus, double k1 = kDefaultK1, double b = kDefaultB) {
    if (corpus.empty()) throw EmptyCorpus("corpus is empty");
    if (!(k1 >= 0.0) || !(b >= 0.0 && b <= 1.0)) throw std::invalid_argument("BM25 requires k1 >= 0 and b in [0, 1]");
    std::sort(corpus.begin(), corpus.end(), [](const Document& a, const Document& c) { return a.doc_id < c.doc_id; });
    for (std::size_t i = 1; i < corpus.size(); ++i)
      if (corpus[i].doc_id == corpus[i - 1].doc_id) throw DuplicateDocId("duplicate doc_id: " + corpus[i].doc_id);
    if (corpus.size() > UINT32_MAX) throw std::length_error("corpus too large");

    InvertedIndex idx;
    idx.k1_ = k1;
    idx.b_ = b;
    idx.docs_ = std::move(corpus);
    idx.doc_len_.resize(idx.docs_.size());
    std::unordered_map<std::string, std::uint32_t> tf;
    for (std::uint32_t d = 0; d < idx.docs_.size(); ++d) {
      tf.clear();
      const auto toks = tokenize(indexed_text(idx.docs_[d]));
      idx.doc_len_[d] = static_cast<std::uint32_t>(toks.size());
      for (const auto& t : toks) ++tf[t];
      for (auto& [term, count] : tf) idx.postings_[term].push_back({d, count});
    }
    idx.finish();
    return idx;
  }

  std::size_t doc_count() const { return docs_.size(); }
  double avg_doc_len() const { return avg_len_; }
  double k1() const { return k1_; }
  double b() const { return b_; }
  const std::vector<Document>& documents() const { return docs_; }
  std::size_t term_count() const { return postings_.size(); }

  std::uint32_t doc_length(std::string_view doc_id) const { return doc_len_[ordinal(doc_id)]; }

  const std::vector<Posting>& postings(const std::string& term) const {
    static const std::vector<Posting> kEmpty;
    const auto it = postings_.find(term);
    return it == postings_.end() ? kEmpty : it->second;
  }

  std::size_t document_frequency(const std::string& term) const { return postings(term).size(); }

  std::uint32_t ordinal(std::string_view doc_id) const {
    const auto it = std::lower_bound(docs_.begin(), docs_.end(), doc_id,
                                     [](const Document& d, std::string_view id) { return d.doc_id < id; });
    if (it == docs_.end() || it->doc_id != doc_id) throw UnknownDocId("unknown doc_id: " + std::string(doc_id));
    return static_cast<std::uint32_t>(it - docs_.begin());
  }

  double idf(std::size_t df) const {
    const double n = static_cast<double>(docs_.size());
    const double f = static_cast<double>(df);
    return std::log((n - f + 0.5) / (f + 0.5) + 1.0);
  }

  double term_weight(std::uint32_t tf, std::uint32_t doc_len) const {
    const double f = static_cast<double>(tf);
    const double norm = avg_len_ > 0.0 ? static_cast<double>(doc_len) / avg_len_ : 0.0;
    return f * (k1_ + 1.0) / (f + k1_ * (1.0 - b_ + b_ * norm));
  }

  /// BM25 of one document. Repeated query terms count once per occurrence.
  double bm25_score(const std::vector<std::string>& query_terms, std::string_view doc_id) const {
    const std::uint32_t d = ordinal(doc_id);
    double score = 0.0;
    for (const auto& t : query_terms) {
      const auto& plist = postings(t);
      const auto it = std::lower_bound(plist.begin(), plist.end(), d,
                                       [](const Posting& p, std::uint32_t v) { return p.doc < v; });
      if (it == plist.end() || it->doc != d) continue;
      score += idf(plist.size()) * term_weight(it->tf, doc_len_[d]);
    }
    return score;
  }

  /// Term-at-a-time scores for every document; zero where nothing matched.
  std::vector<double> score_all(const std::vector<std::string>& query_terms) const {
    std::vector<double> acc(docs_.size(), 0.0);
    for (const auto& t : query_terms) {
      const auto& plist = postings(t);
      if (plist.empty()) continue;
      const double w = idf(plist.size());
      for (const auto& p : plist) acc[p.doc] += w * term_weight(p.tf, doc_len_[p.doc]);
    }
    return acc;
  }

  /// Top-k documents for one query, descending score, ties by doc_id.
  std::vector<std::pair<std::uint32_t, double>> top_k(const std::vector<std::string>& query_terms, std::size_t k,
                                                      const std::unordered_set<std::uint32_t>& exclude = {}) const {
    const auto acc = score_all(query_terms);
    std::vector<std::pair<std::uint32_t, double>> hits;
    for (std::uint32_t d = 0; d < acc.size(); ++d)
      if (acc[d] > 0.0 && !exclude.contains(d)) hits.emplace_back(d, acc[d]);
    const std::size_t keep = std::min(k, hits.size());
    std::partial_sort(hits.begin(), hits.begin() + static_cast<std::ptrdiff_t>(keep), hits.end(),
                      [](const auto& x, const auto& y) { return x.second != y.second ? x.second > y.second : x.first < y.first; });
    hits.resize(keep);
    return hits;
  }

  /// One best document per subquery, in subquery order. Duplicates across
  /// subqueries are kept unless dedupe is set, in which case a later
  /// subquery takes its best document not already returned.
  std::vector<RetrievalHit> retrieve_multi(const std::vector<std::string>& subqueries, bool dedupe = false) const {
    std::vector<RetrievalHit> out;
    std::unordered_set<std::uint32_t> used;
    for (const auto& sq : subqueries) {
      RetrievalHit hit{sq, std::nullopt, 0.0};
      const auto best = top_k(tokenize(sq), 1, dedupe ? used : std::unordered_set<std::uint32_t>{});
      if (!best.empty()) {
        hit.document = docs_[best.front().first];
        hit.score = best.front().second;
        used.insert(best.front().first);
      }
      out.push_back(std::move(hit));
    }
    return out;
  }

  /// Single-query top-k mode used by the baselines.
  std::vector<RetrievalHit> retrieve_top_k(const std::string& query, std::size_t k) const {
    std::vector<RetrievalHit> out;
    for (const auto& [d, s] : top_k(tokenize(query), k)) out.push_back({query, docs_[d], s});
    return out;
  }

  void save(std::ostream& os) const;
  static InvertedIndex load(std::istream& is);

  void save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open index file for writing: " + path);
    save(os);
    if (!os) throw std::runtime_error("failed writing index file: " + path);
  }
  static InvertedIndex load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open index file: " + path);
    return load(is);
  }

 private:
  void finish() {
    double total = 0.0;
    for (auto len : doc_len_) total += len;
    avg_len_ = docs_.empty() ? 0.0 : total / static_cast<double>(docs_.size());
    for (auto& [term, plist] : postings_)
      std::sort(plist.begin(), plist.end(), [](const Posting& a, const Posting& c) { return a.doc < c.doc; });
  }

  std::vector<Document> docs_;
  std::vector<std::uint32_t> doc_len_;
  std::unordered_map<std::string, std::vector<Posting>> postings_;
  double avg_len_ = 0.0;
  double k1_ = kDefaultK1;
  double b_ = kDefaultB;
};

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  std::array<char, 4> b{};
  for (auto& c : b) {
    c = static_cast<char>(v & 0xFF);
    v >>= 8;
  }
  os.write(b.data(), b.size());
}
inline void put_u64(std::ostream& os, std::uint64_t v) {
  std::array<char, 8> b{};
  for (auto& c : b) {
    c = static_cast<char>(v & 0xFF);
    v >>= 8;
  }
  os.write(b.data(), b.size());
}
inline void put_f64(std::ostream& os, double v) {
  std::uint64_t bits = 0;
  std::memcpy(&bits, &v, sizeof bits);
  put_u64(os, bits);
}
inline void put_str(std::ostream& os, std::string_view s) {
  put_u64(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline void need(std::istream& is) {
  if (!is) throw IndexFormatError("truncated index file");
}
inline std::uint64_t get_u64(std::istream& is) {
  std::array<unsigned char, 8> b{};
  is.read(reinterpret_cast<char*>(b.data()), b.size());
  need(is);
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}
inline std::uint32_t get_u32(std::istream& is) {
  std::array<unsigned char, 4> b{};
  is.read(reinterpret_cast<char*>(b.data()), b.size());
  need(is);
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}
inline double get_f64(std::istream& is) {
  const std::uint64_t bits = get_u64(is);
  double v = 0;
  std::memcpy(&v, &bits, sizeof v);
  return v;
}
inline std::string get_str(std::istream& is) {
  const std::uint64_t n = get_u64(is);
  if (n > (std::uint64_t{1} << 32)) throw IndexFormatError("implausible string length in index file");
  std::string s(n, '\0');
  is.read(s.data(), static_cast<std::streamsize>(n));
  need(is);
  return s;
}

}  // namespace detail

// Layout (little-endian): magic, u32 version, f64 k1, f64 b, u64 ndocs,
// ndocs x {str id, u8 has_title, str title, str body, u32 len}, u64 nterms,
// nterms x {str term, u64 n, n x {u32 ordinal, u32 tf}} with terms sorted.
inline void InvertedIndex::save(std::ostream& os) const {
  os.write(kMagic.data(), static_cast<std::streamsize>(kMagic.size()));
  detail::put_u32(os, kFormatVersion);
  detail::put_f64(os, k1_);
  detail::put_f64(os, b_);
  detail::put_u64(os, docs_.size());
  for (std::size_t d = 0; d < docs_.size(); ++d) {
    detail::put_str(os, docs_[d].doc_id);
    os.put(docs_[d].title ? 1 : 0);
    detail::put_str(os, docs_[d].title.value_or(""));
    detail::put_str(os, docs_[d].body);
    detail::put_u32(os, doc_len_[d]);
  }
  std::vector<const std::string*> terms;
  terms.reserve(postings_.size());
  for (const auto& [t, _] : postings_) terms.push_back(&t);
  std::sort(terms.begin(), terms.end(), [](const std::string* a, const std::string* c) { return *a < *c; });
  detail::put_u64(os, terms.size());
  for (const auto* t : terms) {
    detail::put_str(os, *t);
    const auto& plist = postings_.at(*t);
    detail::put_u64(os, plist.size());
    for (const auto& p : plist) {
      detail::put_u32(os, p.doc);
      detail::put_u32(os, p.tf);
    }
  }
}

inline InvertedIndex InvertedIndex::load(std::istream& is) {
  std::string magic(kMagic.size(), '\0');
  is.read(magic.data(), static_cast<std::streamsize>(magic.size()));
  if (!is || magic != kMagic) throw IndexFormatError("not an index file (bad magic)");
  const std::uint32_t version = detail::get_u32(is);
  if (version != kFormatVersion) throw IndexFormatError("unsupported index version " + std::to_string(version));
  InvertedIndex idx;
  idx.k1_ = detail::get_f64(is);
  idx.b_ = detail::get_f64(is);
  const std::uint64_t ndocs = detail::get_u64(is);
  if (ndocs == 0 || ndocs > UINT32_MAX) throw IndexFormatError("bad document count");
  idx.docs_.reserve(ndocs);
  idx.doc_len_.reserve(ndocs);
  for (std::uint64_t d = 0; d < ndocs; ++d) {
    Document doc;
    doc.doc_id = detail::get_str(is);
    const int has_title = is.get();
    detail::need(is);
    std::string title = detail::get_str(is);
    if (has_title) doc.title = std::move(title);
    doc.body = detail::get_str(is);
    if (!idx.docs_.empty() && !(idx.docs_.back().doc_id < doc.doc_id))
      throw IndexFormatError("documents not sorted by doc_id");
    idx.docs_.push_back(std::move(doc));
    idx.doc_len_.push_back(detail::get_u32(is));
  }
  const std::uint64_t nterms = detail::get_u64(is);
  for (std::uint64_t i = 0; i < nterms; ++i) {
    std::string term = detail::get_str(is);
    const std::uint64_t n = detail::get_u64(is);
    if (n > ndocs) throw IndexFormatError("posting list longer than corpus");
    std::vector<Posting> plist;
    plist.reserve(n);
    for (std::uint64_t k = 0; k < n; ++k) {
      Posting p{detail::get_u32(is), detail::get_u32(is)};
      if (p.doc >= ndocs) throw IndexFormatError("posting references unknown document");
      plist.push_back(p);
    }
    idx.postings_.emplace(std::move(term), std::move(plist));
  }
  idx.finish();
  return idx;
}

/// "Doc i (id): body" per returned document, joined by newlines. Entries
/// without a document are skipped.
inline std::string format_evidence(const std::vector<RetrievalHit>& hits) {
  std::string out;
  int i = 0;
  for (const auto& h : hits) {
    if (!h.document) continue;
    if (!out.empty()) out += '\n';
    out += "Doc " + std::to_string(++i) + " (" + h.document->doc_id + "): " + h.document->body;
  }
  return out;
}

}  // namespace cmig::retrieval
