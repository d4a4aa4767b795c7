#ifndef ICFG_ICCOT_HPP_
#define ICFG_ICCOT_HPP_

#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace icfg {

// Structured reasoning trace: one output caption plus one relation string
// per reference image. Tag content is plain text; '<' and '>' are forbidden
// inside, content is stored trimmed.
struct ReasoningTrace {
  std::string caption;
  std::vector<std::string> relations;

  bool operator==(const ReasoningTrace&) const = default;
};

enum class IssueCode {
  MissingCaption,
  RelationCountMismatch,
  MalformedTag,
  DuplicateTag,
  StrayText,
};

std::string_view issue_code_name(IssueCode code);

struct Issue {
  IssueCode code;
  std::string message;
};

struct ValidationReport {
  bool ok = true;
  std::vector<Issue> issues;

  void add(IssueCode code, std::string message) {
    ok = false;
    issues.push_back({code, std::move(message)});
  }
  int count(IssueCode code) const;
};

// Either a trace (report.ok) or the report explaining the rejection.
struct ParseResult {
  std::optional<ReasoningTrace> trace;
  ValidationReport report;

  bool ok() const { return report.ok; }
};

struct InvalidTrace : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Parses the tagged format: <out_caption>...</out_caption> followed by
// <relation_i>...</relation_i> for exactly i = 1..num_refs, in any order.
// Whitespace between tags is ignored; anything else outside tags isStrayText.
ParseResult parse_trace(std::string_view text, int num_refs);

// Checks trace invariants without parsing: non-empty trimmed caption and
// relations, no tag delimiters inside content.
ValidationReport validate_trace(const ReasoningTrace& trace);

// Canonical form: caption tag first, then relations in ascending index
// order, no separators. Throws InvalidTrace on invariant violations.
std::string render_trace(const ReasoningTrace& trace);

// Deterministic JSON: {"out_caption":...,"relations":[...]}.
std::string trace_to_json(const ReasoningTrace& trace);

// Inverse of trace_to_json. Throws InvalidTrace on schema violations.
ReasoningTrace trace_from_json(std::string_view json_text);

// Builds a trace with trimmed content. Throws InvalidTrace if invalid.
ReasoningTrace make_trace(std::string_view caption, std::vector<std::string> relations);

std::string trim(std::string_view s);

}  // namespace icfg

#endif  // ICFG_ICCOT_HPP_
