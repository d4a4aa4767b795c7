#include "icfg/iccot.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>

#include <nlohmann/json.hpp>

namespace icfg {

namespace {

bool is_space(char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; }

bool has_delimiter(std::string_view s) {
  return s.find_first_of("<>") != std::string_view::npos;
}

// Parses a relation tag name "relation_<k>"; returns k or nullopt.
std::optional<int> relation_index(std::string_view name) {
  constexpr std::string_view prefix = "relation_";
  if (name.size() <= prefix.size() || name.substr(0, prefix.size()) != prefix) return std::nullopt;
  std::string_view digits = name.substr(prefix.size());
  int value = 0;
  auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), value);
  if (ec != std::errc{} || ptr != digits.data() + digits.size()) return std::nullopt;
  return value;
}

}  // namespace

std::string trim(std::string_view s) {
  size_t b = 0, e = s.size();
  while (b < e && is_space(s[b])) ++b;
  while (e > b && is_space(s[e - 1])) --e;
  return std::string(s.substr(b, e - b));
}

std::string_view issue_code_name(IssueCode code) {
  switch (code) {
    case IssueCode::MissingCaption: return "MissingCaption";
    case IssueCode::RelationCountMismatch: return "RelationCountMismatch";
    case IssueCode::MalformedTag: return "MalformedTag";
    case IssueCode::DuplicateTag: return "DuplicateTag";
    case IssueCode::StrayText: return "StrayText";
  }
  return "Unknown";
}

int ValidationReport::count(IssueCode code) const {
  return static_cast<int>(std::count_if(issues.begin(), issues.end(),
                                        [code](const Issue& i) { return i.code == code; }));
}

ParseResult parse_trace(std::string_view text, int num_refs) {
  ValidationReport report;
  std::optional<std::string> caption;
  std::vector<std::pair<int, std::string>> relations;

  size_t pos = 0;
  bool scan_aborted = false;
  while (pos < text.size()) {
    if (is_space(text[pos])) {
      ++pos;
      continue;
    }
    if (text[pos] != '<') {
      // run of non-whitespace outside any tag
      size_t end = pos;
      while (end < text.size() && text[end] != '<' && !is_space(text[end])) ++end;
      report.add(IssueCode::StrayText,
                 "unexpected text outside tags: '" + std::string(text.substr(pos, end - pos)) + "'");
      pos = end;
      continue;
    }
    size_t name_end = text.find('>', pos + 1);
    if (name_end == std::string_view::npos) {
      report.add(IssueCode::MalformedTag, "unterminated tag at offset " + std::to_string(pos));
      scan_aborted = true;
      break;
    }
    std::string name(text.substr(pos + 1, name_end - pos - 1));
    if (name.empty() || name[0] == '/' || has_delimiter(name)) {
      report.add(IssueCode::MalformedTag, "unexpected tag '<" + name + ">'");
      scan_aborted = true;
      break;
    }
    // content runs to the next '<', which must open the matching close tag
    size_t content_begin = name_end + 1;
    size_t close = text.find('<', content_begin);
    if (close == std::string_view::npos) {
      report.add(IssueCode::MalformedTag, "tag '" + name + "' is never closed");
      scan_aborted = true;
      break;
    }
    std::string_view content = text.substr(content_begin, close - content_begin);
    if (content.find('>') != std::string_view::npos) {
      report.add(IssueCode::MalformedTag, "'>' inside content of tag '" + name + "'");
      scan_aborted = true;
      break;
    }
    const std::string close_tag = "</" + name + ">";
    if (text.substr(close, close_tag.size()) != close_tag) {
      report.add(IssueCode::MalformedTag, "tag '" + name + "' is not closed before the next tag");
      scan_aborted = true;
      break;
    }
    pos = close + close_tag.size();

    std::string value = trim(content);
    if (name == "out_caption") {
      if (caption) {
        report.add(IssueCode::DuplicateTag, "repeated <out_caption>");
      } else {
        caption = std::move(value);
      }
      continue;
    }
    if (auto idx = relation_index(name)) {
      const bool duplicate = std::any_of(relations.begin(), relations.end(),
                                         [&](const auto& r) { return r.first == *idx; });
      if (duplicate) {
        report.add(IssueCode::DuplicateTag, "repeated <" + name + ">");
      } else {
        relations.emplace_back(*idx, std::move(value));
      }
      continue;
    }
    report.add(IssueCode::MalformedTag, "unknown tag '<" + name + ">'");
    scan_aborted = true;
    break;
  }

  if (!scan_aborted) {
    if (!caption || caption->empty()) {
      report.add(IssueCode::MissingCaption,
                 caption ? "caption is empty" : "missing <out_caption> tag");
    }
    for (int i = 1; i <= num_refs; ++i) {
      const bool present = std::any_of(relations.begin(), relations.end(),
                                       [i](const auto& r) { return r.first == i; });
      if (!present) {
        report.add(IssueCode::RelationCountMismatch,
                   "missing <relation_" + std::to_string(i) + ">, expected " +
                       std::to_string(num_refs) + " relations");
      }
    }
    for (const auto& [idx, value] : relations) {
      if (idx < 1 || idx > num_refs) {
        report.add(IssueCode::RelationCountMismatch,
                   "<relation_" + std::to_string(idx) + "> out of range, expected 1.." +
                       std::to_string(num_refs));
      } else if (value.empty()) {
        report.add(IssueCode::MalformedTag,
                   "<relation_" + std::to_string(idx) + "> is empty");
      }
    }
  }

  ParseResult result;
  if (report.ok) {
    ReasoningTrace trace;
    trace.caption = std::move(*caption);
    trace.relations.resize(static_cast<size_t>(num_refs));
    for (auto& [idx, value] : relations) trace.relations[static_cast<size_t>(idx - 1)] = std::move(value);
    result.trace = std::move(trace);
  }
  result.report = std::move(report);
  return result;
}

ValidationReport validate_trace(const ReasoningTrace& trace) {
  ValidationReport report;
  if (trim(trace.caption).empty()) {
    report.add(IssueCode::MissingCaption, "caption is empty");
  } else if (trace.caption != trim(trace.caption)) {
    report.add(IssueCode::StrayText, "caption carries surrounding whitespace");
  }
  if (has_delimiter(trace.caption)) {
    report.add(IssueCode::MalformedTag, "caption contains a tag delimiter");
  }
  for (size_t i = 0; i < trace.relations.size(); ++i) {
    const std::string& r = trace.relations[i];
    const std::string tag = "relation_" + std::to_string(i + 1);
    if (trim(r).empty()) {
      report.add(IssueCode::MalformedTag, tag + " is empty");
    } else if (r != trim(r)) {
      report.add(IssueCode::StrayText, tag + " carries surrounding whitespace");
    }
    if (has_delimiter(r)) {
      report.add(IssueCode::MalformedTag, tag + " contains a tag delimiter");
    }
  }
  return report;
}

std::string render_trace(const ReasoningTrace& trace) {
  const ValidationReport report = validate_trace(trace);
  if (!report.ok) {
    throw InvalidTrace("cannot render invalid trace: " + report.issues.front().message);
  }
  std::string out = "<out_caption>" + trace.caption + "</out_caption>";
  for (size_t i = 0; i < trace.relations.size(); ++i) {
    const std::string tag = "relation_" + std::to_string(i + 1);
    out += "<" + tag + ">" + trace.relations[i] + "</" + tag + ">";
  }
  return out;
}

std::string trace_to_json(const ReasoningTrace& trace) {
  const ValidationReport report = validate_trace(trace);
  if (!report.ok) {
    throw InvalidTrace("cannot serialize invalid trace: " + report.issues.front().message);
  }
  nlohmann::ordered_json j;
  j["out_caption"] = trace.caption;
  j["relations"] = trace.relations;
  return j.dump();
}

ReasoningTrace trace_from_json(std::string_view json_text) {
  nlohmann::json j = nlohmann::json::parse(json_text, nullptr, false);
  if (j.is_discarded() || !j.is_object() || !j.contains("out_caption") ||
      !j.contains("relations") || !j["out_caption"].is_string() || !j["relations"].is_array()) {
    throw InvalidTrace("malformed trace JSON");
  }
  ReasoningTrace trace;
  trace.caption = j["out_caption"].get<std::string>();
  for (const auto& r : j["relations"]) {
    if (!r.is_string()) throw InvalidTrace("malformed trace JSON: relation is not a string");
    trace.relations.push_back(r.get<std::string>());
  }
  const ValidationReport report = validate_trace(trace);
  if (!report.ok) throw InvalidTrace("trace JSON violates invariants: " + report.issues.front().message);
  return trace;
}

ReasoningTrace make_trace(std::string_view caption, std::vector<std::string> relations) {
  ReasoningTrace trace;
  trace.caption = trim(caption);
  trace.relations.reserve(relations.size());
  for (auto& r : relations) trace.relations.push_back(trim(r));
  const ValidationReport report = validate_trace(trace);
  if (!report.ok) throw InvalidTrace(std::string(report.issues.front().message));
  return trace;
}

}  // namespace icfg
