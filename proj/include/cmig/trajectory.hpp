#pragma once

// Tagged rollout format:
//
//   <think>..</think><search>q1; q2</search><evidence>..</evidence>
//   <refine>..</refine> ... <diagnosis>..</diagnosis>
//
// Tags are literal, case-sensitive ASCII markers and never nest. Parsing is
// total: anything malformed is recorded as a finding on the Rollout and
// surfaced again by validate_format, so reward code can assign a zero format
// reward instead of handling exceptions.

#include <algorithm>
#include <array>
#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "cmig/text.hpp"

namespace cmig {

enum class TagKind { think, search, evidence, refine, diagnosis };

inline constexpr std::array<TagKind, 5> kAllTagKinds = {
    TagKind::think, TagKind::search, TagKind::evidence, TagKind::refine, TagKind::diagnosis};

inline constexpr std::string_view to_string(TagKind k) {
  switch (k) {
    case TagKind::think: return "think";
    case TagKind::search: return "search";
    case TagKind::evidence: return "evidence";
    case TagKind::refine: return "refine";
    case TagKind::diagnosis: return "diagnosis";
  }
  return "?";
}

inline std::optional<TagKind> tag_kind_from_name(std::string_view name) {
  for (TagKind k : kAllTagKinds)
    if (to_string(k) == name) return k;
  return std::nullopt;
}

/// One tagged region. [start, end) covers the markers; [inner_start,
/// inner_end) covers inner_text. All offsets are in characters.
struct TagSpan {
  TagKind kind{};
  std::size_t start = 0;
  std::size_t end = 0;
  std::size_t inner_start = 0;
  std::size_t inner_end = 0;
  std::string inner_text;

  friend bool operator==(const TagSpan&, const TagSpan&) = default;
};

struct Turn {
  int index = 0;  // 1-based
  std::optional<std::string> think;
  std::optional<std::string> search;
  std::optional<std::string> evidence;
  std::optional<std::string> refine;

  friend bool operator==(const Turn&, const Turn&) = default;
};

struct TokenOffset {
  std::size_t token_index = 0;
  std::size_t char_start = 0;
  std::size_t char_end = 0;

  friend bool operator==(const TokenOffset&, const TokenOffset&) = default;
};

struct Rollout {
  std::string id;
  std::string question;
  std::string gold_answer;
  std::string raw_text;
  std::vector<TagSpan> spans;
  std::vector<Turn> turns;
  std::optional<std::string> diagnosis;
  std::optional<std::vector<TokenOffset>> token_offsets;
  /// Malformed-input findings collected while parsing.
  std::vector<std::string> parse_findings;

  std::vector<const TagSpan*> spans_of(TagKind k) const {
    std::vector<const TagSpan*> out;
    for (const auto& s : spans)
      if (s.kind == k) out.push_back(&s);
    return out;
  }
  std::size_t count(TagKind k) const {
    return static_cast<std::size_t>(
        std::count_if(spans.begin(), spans.end(), [k](const TagSpan& s) { return s.kind == k; }));
  }
};

struct FormatVerdict {
  bool ok = true;
  std::vector<std::string> findings;
};

inline constexpr int kDefaultMaxTurns = 3;

namespace detail {

struct TagToken {
  std::size_t begin = 0;  // byte offset of '<'
  std::size_t end = 0;    // byte offset one past '>'
  std::string_view name;
  bool closing = false;
};

inline bool tag_name_char(char c, bool first) {
  const bool alpha = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z');
  if (first) return alpha;
  return alpha || (c >= '0' && c <= '9') || c == '_' || c == '-';
}

/// Next `<name>` or `</name>` at or after byte `pos`.
inline std::optional<TagToken> next_tag(std::string_view s, std::size_t pos) {
  while (true) {
    const std::size_t lt = s.find('<', pos);
    if (lt == std::string_view::npos) return std::nullopt;
    std::size_t i = lt + 1;
    bool closing = false;
    if (i < s.size() && s[i] == '/') {
      closing = true;
      ++i;
    }
    const std::size_t name_begin = i;
    while (i < s.size() && tag_name_char(s[i], i == name_begin)) ++i;
    if (i > name_begin && i < s.size() && s[i] == '>') {
      return TagToken{lt, i + 1, s.substr(name_begin, i - name_begin), closing};
    }
    pos = lt + 1;
  }
}

// Position of a kind inside one think-search-evidence-refine cycle.
inline int turn_rank(TagKind k) {
  switch (k) {
    case TagKind::think: return 0;
    case TagKind::search: return 1;
    case TagKind::evidence: return 2;
    case TagKind::refine: return 3;
    case TagKind::diagnosis: return 4;
  }
  return 4;
}

inline std::optional<std::string>& turn_slot(Turn& t, TagKind k) {
  switch (k) {
    case TagKind::think: return t.think;
    case TagKind::search: return t.search;
    case TagKind::evidence: return t.evidence;
    default: return t.refine;
  }
}

}  // namespace detail

/// Groups think/search/evidence/refine spans into turns. A new turn begins
/// whenever a kind does not come strictly later in the cycle than the last
/// kind seen in the current turn. Evidence with no search in its turn is left
/// out of the turn structure and reported.
inline std::vector<Turn> assemble_turns(const std::vector<TagSpan>& spans,
                                        std::vector<std::string>* findings) {
  std::vector<Turn> turns;
  int last_rank = -1;
  for (const auto& sp : spans) {
    if (sp.kind == TagKind::diagnosis) continue;
    const int rank = detail::turn_rank(sp.kind);
    if (turns.empty() || rank <= last_rank) {
      turns.push_back(Turn{static_cast<int>(turns.size()) + 1, {}, {}, {}, {}});
      last_rank = -1;
    }
    Turn& cur = turns.back();
    if (sp.kind == TagKind::evidence && !cur.search) {
      if (findings) findings->push_back("evidence without search in turn " + std::to_string(cur.index));
      // Keep the turn open so a following refine still lands here.
      last_rank = rank;
      continue;
    }
    detail::turn_slot(cur, sp.kind) = sp.inner_text;
    last_rank = rank;
  }
  // A turn that only held orphaned evidence carries nothing.
  std::erase_if(turns, [](const Turn& t) { return !t.think && !t.search && !t.evidence && !t.refine; });
  for (std::size_t i = 0; i < turns.size(); ++i) turns[i].index = static_cast<int>(i) + 1;
  return turns;
}

inline Rollout parse_rollout(std::string raw, std::string id, std::string question, std::string gold) {
  Rollout r;
  r.id = std::move(id);
  r.question = std::move(question);
  r.gold_answer = std::move(gold);
  r.raw_text = std::move(raw);

  const std::string_view s = r.raw_text;
  const auto to_char = text::byte_to_char_offsets(s);
  auto& findings = r.parse_findings;

  std::size_t pos = 0;
  while (auto tag = detail::next_tag(s, pos)) {
    const auto kind = tag_kind_from_name(tag->name);
    if (!kind) {
      findings.push_back("unknown tag: " + std::string(tag->name));
      pos = tag->end;
      continue;
    }
    if (tag->closing) {
      findings.push_back("unmatched closing tag: " + std::string(tag->name));
      pos = tag->end;
      continue;
    }
    std::vector<std::string> inner_findings;
    std::optional<detail::TagToken> close;
    std::size_t q = tag->end;
    while (auto t = detail::next_tag(s, q)) {
      q = t->end;
      const auto inner_kind = tag_kind_from_name(t->name);
      if (!inner_kind) continue;  // untyped markup inside a span is content
      if (t->closing && *inner_kind == *kind) {
        close = t;
        break;
      }
      if (t->closing) {
        inner_findings.push_back("mismatched closing tag: " + std::string(t->name) + " inside " +
                                 std::string(to_string(*kind)));
      } else {
        inner_findings.push_back("nested tag: " + std::string(t->name) + " inside " +
                                 std::string(to_string(*kind)));
      }
    }
    if (!close) {
      findings.push_back("unclosed tag: " + std::string(to_string(*kind)));
      pos = tag->end;
      continue;
    }
    findings.insert(findings.end(), inner_findings.begin(), inner_findings.end());
    TagSpan sp;
    sp.kind = *kind;
    sp.start = to_char[tag->begin];
    sp.end = to_char[close->end];
    sp.inner_start = to_char[tag->end];
    sp.inner_end = to_char[close->begin];
    sp.inner_text = std::string(s.substr(tag->end, close->begin - tag->end));
    r.spans.push_back(std::move(sp));
    pos = close->end;
  }

  r.turns = assemble_turns(r.spans, &findings);
  for (auto it = r.spans.rbegin(); it != r.spans.rend(); ++it) {
    if (it->kind == TagKind::diagnosis) {
      r.diagnosis = it->inner_text;
      break;
    }
  }
  return r;
}

/// Number of turns that issued a search; this is what the turn budget limits.
inline int retrieval_turn_count(const Rollout& r) {
  return static_cast<int>(std::count_if(r.turns.begin(), r.turns.end(), [](const Turn& t) { return t.search.has_value(); }));
}

inline FormatVerdict validate_format(const Rollout& r, int max_turns = kDefaultMaxTurns) {
  FormatVerdict v;
  v.findings = r.parse_findings;
  if (r.count(TagKind::evidence) > r.count(TagKind::search))
    v.findings.emplace_back("evidence count exceeds search count");
  const std::size_t diagnoses = r.count(TagKind::diagnosis);
  if (diagnoses == 0) {
    v.findings.emplace_back("missing diagnosis");
  } else if (diagnoses > 1) {
    v.findings.emplace_back("multiple diagnosis spans");
  }
  if (diagnoses > 0 && r.spans.back().kind != TagKind::diagnosis)
    v.findings.emplace_back("diagnosis is not the final span");
  if (retrieval_turn_count(r) > max_turns)
    v.findings.push_back("retrieval turn count exceeds " + std::to_string(max_turns));
  v.ok = v.findings.empty();
  return v;
}

/// Inner-text character ranges of all evidence spans, sorted and disjoint.
/// Empty evidence bodies cover no characters and are omitted.
inline std::vector<std::pair<std::size_t, std::size_t>> evidence_char_spans(const Rollout& r) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (const auto& s : r.spans)
    if (s.kind == TagKind::evidence && s.inner_end > s.inner_start) out.emplace_back(s.inner_start, s.inner_end);
  return out;
}

/// Splits a search body on ";" into at most k_max trimmed, non-empty subqueries.
inline std::vector<std::string> split_subqueries(std::string_view search_text, int k_max) {
  if (k_max < 1) throw std::invalid_argument("k_max must be >= 1");
  std::vector<std::string> out;
  std::size_t pos = 0;
  while (pos <= search_text.size() && static_cast<int>(out.size()) < k_max) {
    const std::size_t semi = search_text.find(';', pos);
    const std::size_t end = semi == std::string_view::npos ? search_text.size() : semi;
    std::string frag = text::trim(search_text.substr(pos, end - pos));
    if (!frag.empty()) out.push_back(std::move(frag));
    if (semi == std::string_view::npos) break;
    pos = semi + 1;
  }
  return out;
}

inline std::string wrap_tag(TagKind k, std::string_view inner) {
  std::string out;
  out.reserve(inner.size() + 24);
  out += '<';
  out += to_string(k);
  out += '>';
  out += inner;
  out += "</";
  out += to_string(k);
  out += '>';
  return out;
}

/// Renders turns and an optional diagnosis back into tagged text. Untyped
/// text between tags is not reproduced.
inline std::string render_rollout_text(const std::vector<Turn>& turns, const std::optional<std::string>& diagnosis) {
  std::string out;
  for (const auto& t : turns) {
    if (t.think) out += wrap_tag(TagKind::think, *t.think);
    if (t.search) out += wrap_tag(TagKind::search, *t.search);
    if (t.evidence) out += wrap_tag(TagKind::evidence, *t.evidence);
    if (t.refine) out += wrap_tag(TagKind::refine, *t.refine);
  }
  if (diagnosis) out += wrap_tag(TagKind::diagnosis, *diagnosis);
  return out;
}

inline std::string serialize_rollout_text(const Rollout& r) { return render_rollout_text(r.turns, r.diagnosis); }

}  // namespace cmig
