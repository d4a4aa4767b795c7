#include <doctest.h>

#include <string>
#include <vector>

#include "icfg/iccot.hpp"
#include "icfg/rng.hpp"

using namespace icfg;

namespace {

// Random valid traces for the round-trip properties: opaque content with no
// tag delimiters, trimmed, non-empty.
std::string random_content(Rng& rng) {
  static const std::string alphabet =
      "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789 .,;:!?-_'";
  const int len = 1 + rng.uniform_int(30);
  std::string s;
  for (int i = 0; i < len; ++i) s += alphabet[static_cast<size_t>(rng.uniform_int(static_cast<int>(alphabet.size())))];
  // avoid empty-after-trim and keep content canonical
  s = trim(s);
  if (s.empty()) s = "x";
  return s;
}

ReasoningTrace random_trace(Rng& rng, int max_refs = 4) {
  const int n = rng.uniform_int(max_refs + 1);
  std::vector<std::string> relations;
  for (int i = 0; i < n; ++i) relations.push_back(random_content(rng));
  return make_trace(random_content(rng), std::move(relations));
}

}  // namespace

TEST_CASE("parse_trace accepts the canonical single-reference example") {
  const auto r = parse_trace(
      "<out_caption>A red cat on a mat</out_caption><relation_1>provides the cat subject</relation_1>",
      1);
  REQUIRE(r.ok());
  CHECK(r.trace->caption == "A red cat on a mat");
  REQUIRE(r.trace->relations.size() == 1);
  CHECK(r.trace->relations[0] == "provides the cat subject");
}

TEST_CASE("parse_trace reports one RelationCountMismatch per missing relation") {
  const auto r = parse_trace("<out_caption>scene</out_caption>", 2);
  REQUIRE_FALSE(r.ok());
  CHECK(r.report.count(IssueCode::RelationCountMismatch) == 2);
}

TEST_CASE("parse_trace flags duplicate relation tags") {
  const auto r =
      parse_trace("<out_caption>a</out_caption><relation_1>x</relation_1><relation_1>y</relation_1>", 1);
  REQUIRE_FALSE(r.ok());
  CHECK(r.report.count(IssueCode::DuplicateTag) == 1);
}

TEST_CASE("parse_trace flags duplicate caption tags") {
  const auto r = parse_trace("<out_caption>a</out_caption><out_caption>b</out_caption>", 0);
  REQUIRE_FALSE(r.ok());
  CHECK(r.report.count(IssueCode::DuplicateTag) == 1);
}

TEST_CASE("parse_trace error cases") {
  SUBCASE("missing caption") {
    const auto r = parse_trace("<relation_1>x</relation_1>", 1);
    REQUIRE_FALSE(r.ok());
    CHECK(r.report.count(IssueCode::MissingCaption) == 1);
  }
  SUBCASE("empty caption") {
    const auto r = parse_trace("<out_caption>   </out_caption>", 0);
    REQUIRE_FALSE(r.ok());
    CHECK(r.report.count(IssueCode::MissingCaption) == 1);
  }
  SUBCASE("unclosed tag") {
    const auto r = parse_trace("<out_caption>abc", 0);
    REQUIRE_FALSE(r.ok());
    CHECK(r.report.count(IssueCode::MalformedTag) >= 1);
  }
  SUBCASE("nested tag") {
    const auto r = parse_trace("<out_caption>a<relation_1>b</relation_1></out_caption>", 1);
    REQUIRE_FALSE(r.ok());
    CHECK(r.report.count(IssueCode::MalformedTag) >= 1);
  }
  SUBCASE("stray text between tags") {
    const auto r = parse_trace("<out_caption>a</out_caption> hi <relation_1>x</relation_1>", 1);
    REQUIRE_FALSE(r.ok());
    CHECK(r.report.count(IssueCode::StrayText) == 1);
  }
  SUBCASE("relation index out of range") {
    const auto r = parse_trace("<out_caption>a</out_caption><relation_2>x</relation_2>", 1);
    REQUIRE_FALSE(r.ok());
    CHECK(r.report.count(IssueCode::RelationCountMismatch) >= 1);
  }
  SUBCASE("empty relation rejected") {
    const auto r = parse_trace("<out_caption>a</out_caption><relation_1> </relation_1>", 1);
    REQUIRE_FALSE(r.ok());
    CHECK(r.report.count(IssueCode::MalformedTag) == 1);
  }
  SUBCASE("unknown tag") {
    const auto r = parse_trace("<out_caption>a</out_caption><think>b</think>", 0);
    REQUIRE_FALSE(r.ok());
    CHECK(r.report.count(IssueCode::MalformedTag) >= 1);
  }
}

TEST_CASE("inter-tag whitespace is ignored and content is trimmed") {
  const auto r = parse_trace("  <out_caption>  a cat </out_caption>\n\t<relation_1> r </relation_1> ", 1);
  REQUIRE(r.ok());
  CHECK(r.trace->caption == "a cat");
  CHECK(r.trace->relations[0] == "r");
}

TEST_CASE("relations may appear in any order but land at their index") {
  const auto r = parse_trace(
      "<relation_2>two</relation_2><out_caption>c</out_caption><relation_1>one</relation_1>", 2);
  REQUIRE(r.ok());
  CHECK(r.trace->relations[0] == "one");
  CHECK(r.trace->relations[1] == "two");
}

TEST_CASE("render_trace emits canonical order") {
  CHECK(render_trace(make_trace("a", {})) == "<out_caption>a</out_caption>");
  CHECK(render_trace(make_trace("c", {"r1", "r2"})) ==
        "<out_caption>c</out_caption><relation_1>r1</relation_1><relation_2>r2</relation_2>");
}

TEST_CASE("render_trace rejects invalid traces") {
  ReasoningTrace bad;
  bad.caption = "";
  CHECK_THROWS_AS(render_trace(bad), InvalidTrace);
  bad.caption = "a<b";
  CHECK_THROWS_AS(render_trace(bad), InvalidTrace);
  bad.caption = "ok";
  bad.relations = {""};
  CHECK_THROWS_AS(render_trace(bad), InvalidTrace);
}

TEST_CASE("trace_to_json matches the fixed schema") {
  CHECK(trace_to_json(make_trace("a cat", {"subject"})) ==
        R"({"out_caption":"a cat","relations":["subject"]})");
  CHECK(trace_to_json(make_trace("x", {})) == R"({"out_caption":"x","relations":[]})");
}

TEST_CASE("property: parse(render(t)) == t over 1000 random traces") {
  Rng rng(20260811);
  for (int i = 0; i < 1000; ++i) {
    const ReasoningTrace t = random_trace(rng);
    const std::string s = render_trace(t);
    const auto r = parse_trace(s, static_cast<int>(t.relations.size()));
    REQUIRE(r.ok());
    REQUIRE(*r.trace == t);
  }
}

TEST_CASE("property: render(parse(s)) == s on canonical strings") {
  Rng rng(31338);
  for (int i = 0; i < 500; ++i) {
    const ReasoningTrace t = random_trace(rng);
    const std::string s = render_trace(t);
    const auto parsed = parse_trace(s, static_cast<int>(t.relations.size()));
    REQUIRE(parsed.ok());
    CHECK(render_trace(*parsed.trace) == s);
  }
}

TEST_CASE("property: JSON round-trip recovers the trace over 1000 random traces") {
  Rng rng(777);
  for (int i = 0; i < 1000; ++i) {
    const ReasoningTrace t = random_trace(rng);
    CHECK(trace_from_json(trace_to_json(t)) == t);
  }
}
