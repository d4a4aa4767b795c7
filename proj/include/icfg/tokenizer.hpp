#ifndef ICFG_TOKENIZER_HPP_
#define ICFG_TOKENIZER_HPP_

#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "icfg/world.hpp"

namespace icfg {

// fixed special-token ids, first entries of every vocabulary
constexpr int kBosId = 0;
constexpr int kEosId = 1;
constexpr int kUnkId = 2;

// Word-level tokenizer over the world's closed vocabulary. Tags of the
// reasoning format are single tokens; anything unknown maps to <unk>.
class Tokenizer {
 public:
  explicit Tokenizer(const World& world);

  int size() const { return static_cast<int>(id_to_tok_.size()); }
  int bos() const { return kBosId; }
  int eos() const { return kEosId; }
  int unk() const { return kUnkId; }

  // -1 when the word is not in the vocabulary
  int token_id(std::string_view word) const;
  const std::string& token_text(int id) const { return id_to_tok_[static_cast<size_t>(id)]; }

  // Tag-aware: "<tag>" substrings become single tokens, the rest splits on
  // whitespace.
  std::vector<int> encode(std::string_view text) const;
  std::string decode(const std::vector<int>& tokens) const;

 private:
  void add(std::string tok);

  std::vector<std::string> id_to_tok_;
  std::unordered_map<std::string, int> tok_to_id_;
};

}  // namespace icfg

#endif  // ICFG_TOKENIZER_HPP_
