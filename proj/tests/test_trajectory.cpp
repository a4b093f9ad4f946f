#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "cmig/trajectory.hpp"
#include "oracles.hpp"

using namespace cmig;

namespace {

Rollout parse(const std::string& text) { return parse_rollout(text, "r", "q", "gold"); }

bool has_finding(const FormatVerdict& v, const std::string& needle) {
  return std::any_of(v.findings.begin(), v.findings.end(),
                     [&](const std::string& f) { return f.find(needle) != std::string::npos; });
}

std::string three_turn_fixture() {
  return "<think>fever</think><search>fever cough; chest pain</search><evidence>Doc 1 (a): pneumonia</evidence>"
         "<refine>likely infection</refine>"
         "<think>check embolism</think><refine>no embolism</refine>"
         "<think>confirm</think><search>consolidation</search><evidence>Doc 1 (b): lobar</evidence>"
         "<diagnosis>pneumonia</diagnosis>";
}

}  // namespace

TEST(Parse, MinimalWellFormedRollout) {
  const auto r = parse("<think>t</think><search>q</search><evidence>d</evidence><refine>r</refine><diagnosis>flu</diagnosis>");
  ASSERT_EQ(r.turns.size(), 1u);
  EXPECT_EQ(r.turns[0].index, 1);
  EXPECT_EQ(r.turns[0].think, "t");
  EXPECT_EQ(r.turns[0].search, "q");
  EXPECT_EQ(r.turns[0].evidence, "d");
  EXPECT_EQ(r.turns[0].refine, "r");
  EXPECT_EQ(r.diagnosis, "flu");
  EXPECT_TRUE(validate_format(r).ok);
}

TEST(Parse, UnclosedTagIsAFinding) {
  const auto r = parse("<search>q</search><evidence>d");
  EXPECT_NE(std::find(r.parse_findings.begin(), r.parse_findings.end(), "unclosed tag: evidence"), r.parse_findings.end());
  EXPECT_FALSE(validate_format(r).ok);
}

TEST(Parse, ThreeTurnFixtureMatchesRegexExtractor) {
  const std::string text = three_turn_fixture();
  const auto r = parse(text);
  ASSERT_EQ(r.turns.size(), 3u);
  for (int i = 0; i < 3; ++i) EXPECT_EQ(r.turns[i].index, i + 1);
  EXPECT_EQ(r.count(TagKind::search), 2u);

  const auto expected = oracle::regex_spans(text);
  ASSERT_EQ(r.spans.size(), expected.size());
  for (std::size_t i = 0; i < expected.size(); ++i) {
    EXPECT_EQ(to_string(r.spans[i].kind), expected[i].kind);
    EXPECT_EQ(r.spans[i].inner_start, expected[i].inner_start);
    EXPECT_EQ(r.spans[i].inner_end, expected[i].inner_end);
    EXPECT_EQ(r.spans[i].inner_text, expected[i].inner);
  }
  EXPECT_TRUE(validate_format(r).ok);
}

TEST(Parse, UnknownStrayAndNestedTags) {
  EXPECT_TRUE(has_finding({false, parse("<foo>x</foo><diagnosis>a</diagnosis>").parse_findings}, "unknown tag: foo"));
  EXPECT_TRUE(has_finding({false, parse("</search><diagnosis>a</diagnosis>").parse_findings}, "unmatched closing tag"));
  const auto nested = parse("<think>a <search>b</search> c</think><diagnosis>x</diagnosis>");
  EXPECT_TRUE(has_finding({false, nested.parse_findings}, "nested tag"));
  EXPECT_FALSE(validate_format(nested).ok);
}

TEST(Parse, UntypedMarkupInsideSpansIsContent) {
  const auto r = parse("<search>s</search><evidence>a <b>bold</b> c</evidence>");
  ASSERT_EQ(r.spans.size(), 2u);
  EXPECT_EQ(r.spans[1].inner_text, "a <b>bold</b> c");
  EXPECT_TRUE(r.parse_findings.empty());
}

TEST(Parse, CharacterOffsetsCountCodePoints) {
  const std::string text = "\xC3\xA9\xC3\xA9<evidence>\xE7\x97\x85</evidence>";
  const auto r = parse(text);
  ASSERT_EQ(r.spans.size(), 1u);
  EXPECT_EQ(r.spans[0].start, 2u);
  EXPECT_EQ(r.spans[0].inner_start, 12u);
  EXPECT_EQ(r.spans[0].inner_end, 13u);
  EXPECT_EQ(r.spans[0].end, 24u);
}

TEST(Validate, WellFormedTwoTurns) {
  const auto v = validate_format(parse("<think>a</think><search>b</search><evidence>c</evidence>"
                                       "<think>d</think><search>e</search><evidence>f</evidence><diagnosis>g</diagnosis>"));
  EXPECT_TRUE(v.ok);
  EXPECT_TRUE(v.findings.empty());
}

TEST(Validate, EvidenceExceedingSearches) {
  const auto v = validate_format(parse("<search>b</search><evidence>c</evidence><evidence>d</evidence><diagnosis>g</diagnosis>"));
  EXPECT_FALSE(v.ok);
  EXPECT_TRUE(has_finding(v, "evidence count exceeds search count"));
}

TEST(Validate, DiagnosisBeforeLaterSearchFailsLikeLinearScan) {
  const std::string text = "<search>a</search><evidence>b</evidence><diagnosis>x</diagnosis><search>c</search>";
  const auto v = validate_format(parse(text));
  EXPECT_FALSE(v.ok);
  EXPECT_EQ(v.ok, oracle::scan_format_ok(text, kDefaultMaxTurns));
  EXPECT_TRUE(has_finding(v, "diagnosis is not the final span"));
}

TEST(Validate, MissingAndDuplicateDiagnosis) {
  EXPECT_TRUE(has_finding(validate_format(parse("<think>a</think>")), "missing diagnosis"));
  EXPECT_TRUE(has_finding(validate_format(parse("<diagnosis>a</diagnosis><diagnosis>b</diagnosis>")),
                          "multiple diagnosis spans"));
}

TEST(Validate, RetrievalTurnLimit) {
  std::string text;
  for (int i = 0; i < 4; ++i) text += "<think>t</think><search>s</search><evidence>e</evidence>";
  text += "<diagnosis>d</diagnosis>";
  const auto r = parse(text);
  EXPECT_FALSE(validate_format(r, 3).ok);
  EXPECT_TRUE(validate_format(r, 4).ok);
}

TEST(EvidenceSpans, EmptySingleAndMultiple) {
  EXPECT_TRUE(evidence_char_spans(parse("<think>a</think><diagnosis>b</diagnosis>")).empty());

  const std::string single = "<think>abcdefghijklmnopqr</think><search>s</search><evidence>d</evidence>";
  const auto one = evidence_char_spans(parse(single));
  ASSERT_EQ(one.size(), 1u);
  const auto where = oracle::find_all(single, ">d<");
  ASSERT_EQ(where.size(), 1u);
  EXPECT_EQ(one[0], std::make_pair(where[0].first + 1, where[0].first + 2));
  EXPECT_EQ(one[0], std::make_pair(std::size_t{61}, std::size_t{62}));

  const std::string two = "<search>a</search><evidence>XX</evidence><search>b</search><evidence>YYY</evidence>";
  const auto spans = evidence_char_spans(parse(two));
  ASSERT_EQ(spans.size(), 2u);
  EXPECT_EQ(spans[0], oracle::find_all(two, "XX")[0]);
  EXPECT_EQ(spans[1], oracle::find_all(two, "YYY")[0]);
  EXPECT_LE(spans[0].second, spans[1].first);
}

TEST(Subqueries, SplitTrimAndTruncate) {
  EXPECT_EQ(split_subqueries("a; b ;c", 3), (std::vector<std::string>{"a", "b", "c"}));
  EXPECT_EQ(split_subqueries("a;b;c;d", 3), (std::vector<std::string>{"a", "b", "c"}));
  EXPECT_TRUE(split_subqueries(" ; ; ", 3).empty());
  EXPECT_EQ(split_subqueries(";;x", 1), (std::vector<std::string>{"x"}));
  EXPECT_THROW(split_subqueries("a", 0), std::invalid_argument);
}

TEST(Subqueries, OutputInvariantsOnRandomInput) {
  std::mt19937_64 rng(11);
  for (int i = 0; i < 2000; ++i) {
    std::string s = oracle::random_text(rng, 20);
    for (auto& c : s)
      if (c == ',') c = ';';
    const int k = 1 + static_cast<int>(rng() % 4);
    const auto parts = split_subqueries(s, k);
    ASSERT_LE(parts.size(), static_cast<std::size_t>(k));
    for (const auto& p : parts) {
      ASSERT_FALSE(p.empty());
      ASSERT_EQ(cmig::text::trim(p), p);
    }
  }
}

namespace {

std::string random_rollout(std::mt19937_64& rng) {
  static const std::vector<std::string> words = {"fever", "cough", "x", "\xC3\xA9t\xC3\xA9", "a b", "<b>", "pain", ""};
  auto word = [&] { return words[rng() % words.size()]; };
  std::string s;
  const int turns = 1 + static_cast<int>(rng() % 3);
  for (int t = 0; t < turns; ++t) {
    s += wrap_tag(TagKind::think, word());
    if (rng() % 2) s += wrap_tag(TagKind::search, word()) + wrap_tag(TagKind::evidence, word());
    if (rng() % 2) s += wrap_tag(TagKind::refine, word());
  }
  return s + wrap_tag(TagKind::diagnosis, word());
}

// Inserts a random tag-like fragment at a random position.
std::string corrupt(std::string s, std::mt19937_64& rng) {
  static const std::vector<std::string> junk = {"<think>", "</think>", "<evidence>", "</search>", "<foo>", "<", ">", "</"};
  const auto pos = rng() % (s.size() + 1);
  return s.insert(pos, junk[rng() % junk.size()]);
}

}  // namespace

TEST(Property, RoundTripPreservesSpans) {
  std::mt19937_64 rng(3);
  for (int i = 0; i < 1000; ++i) {
    const auto text = random_rollout(rng);
    const auto r = parse(text);
    ASSERT_TRUE(r.parse_findings.empty()) << text;
    const auto again = parse(serialize_rollout_text(r));
    ASSERT_EQ(again.spans, r.spans) << text;
    ASSERT_EQ(again.turns, r.turns);
  }
}

TEST(Property, SpansAreSortedAndDisjointForAnyInput) {
  std::mt19937_64 rng(5);
  for (int i = 0; i < 3000; ++i) {
    std::string text = random_rollout(rng);
    for (int k = 0; k < 3; ++k) text = corrupt(text, rng);
    const auto r = parse(text);
    const auto len = cmig::text::char_length(text);
    for (std::size_t j = 0; j < r.spans.size(); ++j) {
      ASSERT_LT(r.spans[j].start, r.spans[j].end);
      ASSERT_LE(r.spans[j].end, len);
      if (j > 0) ASSERT_LE(r.spans[j - 1].end, r.spans[j].start) << text;
    }
    if (validate_format(r).ok) ASSERT_LE(r.count(TagKind::evidence), r.count(TagKind::search));
  }
}

TEST(Property, VerdictAgreesWithLinearScanOnWellFormedRollouts) {
  std::mt19937_64 rng(9);
  for (int i = 0; i < 2000; ++i) {
    std::string text = random_rollout(rng);
    if (rng() % 3 == 0) text += wrap_tag(TagKind::search, "late");
    if (rng() % 5 == 0) text = wrap_tag(TagKind::evidence, "orphan") + text;
    ASSERT_EQ(validate_format(parse(text)).ok, oracle::scan_format_ok(text, kDefaultMaxTurns)) << text;
  }
}
