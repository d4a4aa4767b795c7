#include "icfg/tokenizer.hpp"

#include <array>
#include <sstream>

namespace icfg {

namespace {

// every word used by instruction templates, captions and relation phrases
constexpr std::array<std::string_view, 42> kTemplateWords = {
    "a",       "scene",   "with",   "and",     "at",        "slot",       "depict",
    "the",     "subject", "from",   "image",   "in",        "this",       "put",
    "them",    "together", "place", "into",    "add",       "to",         "picture",
    "replace", "new",     "one",    "give",    "of",        "apply",      "everything",
    "everywhere", "change", "move",  "provides", "is",      "edit",       "attribute",
    "transfer", "use",    "replacement", "color", "texture", "style",     "pose",
};

}  // namespace

Tokenizer::Tokenizer(const World& world) {
  add("<bos>");
  add("<eos>");
  add("<unk>");
  add("<out_caption>");
  add("</out_caption>");
  for (int i = 1; i <= 4; ++i) {
    add("<relation_" + std::to_string(i) + ">");
    add("</relation_" + std::to_string(i) + ">");
  }
  for (int d = 0; d <= 9; ++d) add(std::to_string(d));
  for (std::string_view w : kTemplateWords) add(std::string(w));
  for (const std::string& w : world.all_words()) add(w);
}

void Tokenizer::add(std::string tok) {
  if (tok_to_id_.count(tok)) return;
  tok_to_id_[tok] = static_cast<int>(id_to_tok_.size());
  id_to_tok_.push_back(std::move(tok));
}

int Tokenizer::token_id(std::string_view word) const {
  auto it = tok_to_id_.find(std::string(word));
  return it == tok_to_id_.end() ? -1 : it->second;
}

std::vector<int> Tokenizer::encode(std::string_view text) const {
  std::vector<int> out;
  auto push_words = [&](std::string_view chunk) {
    std::istringstream in{std::string(chunk)};
    std::string w;
    while (in >> w) {
      const int id = token_id(w);
      out.push_back(id < 0 ? kUnkId : id);
    }
  };
  size_t pos = 0;
  while (pos < text.size()) {
    const size_t lt = text.find('<', pos);
    if (lt == std::string_view::npos) {
      push_words(text.substr(pos));
      break;
    }
    push_words(text.substr(pos, lt - pos));
    const size_t gt = text.find('>', lt);
    if (gt == std::string_view::npos) {
      out.push_back(kUnkId);
      break;
    }
    const int id = token_id(text.substr(lt, gt - lt + 1));
    out.push_back(id < 0 ? kUnkId : id);
    pos = gt + 1;
  }
  return out;
}

std::string Tokenizer::decode(const std::vector<int>& tokens) const {
  std::string out;
  for (int id : tokens) {
    if (id < 0 || id >= size()) continue;
    if (!out.empty()) out += ' ';
    out += id_to_tok_[static_cast<size_t>(id)];
  }
  return out;
}

}  // namespace icfg
