#pragma once

// Closed word-level vocabulary and token sequences.
//
// Id layout: 0 [PAD], 1 [CLS], 2 [SEP], 3 [MASK], 4..35 [CTX_0]..[CTX_31],
// then the corpus words in lexicographic order.

#include <algorithm>
#include <cstddef>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace vlmix {

namespace tok {
inline constexpr int kPad = 0;
inline constexpr int kCls = 1;
inline constexpr int kSep = 2;
inline constexpr int kMask = 3;
inline constexpr int kCtx0 = 4;
inline constexpr int kNumCtx = 32;
inline constexpr int kFirstWord = kCtx0 + kNumCtx;
}  // namespace tok

struct UnknownTokenError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

class Vocabulary {
 public:
  static Vocabulary build(const std::vector<std::string>& words) {
    Vocabulary v;
    v.words_ = {"[PAD]", "[CLS]", "[SEP]", "[MASK]"};
    for (int i = 0; i < tok::kNumCtx; ++i) v.words_.push_back("[CTX_" + std::to_string(i) + "]");
    std::set<std::string> sorted(words.begin(), words.end());
    for (const auto& w : sorted) {
      if (w.empty() || w.find(' ') != std::string::npos || w.front() == '[') {
        throw std::invalid_argument("invalid vocabulary word '" + w + "'");
      }
      v.words_.push_back(w);
    }
    for (std::size_t i = 0; i < v.words_.size(); ++i) v.index_[v.words_[i]] = static_cast<int>(i);
    return v;
  }

  std::size_t size() const { return words_.size(); }
  bool contains(const std::string& w) const { return index_.count(w) != 0; }

  int id(const std::string& w) const {
    auto it = index_.find(w);
    if (it == index_.end()) throw UnknownTokenError("unknown token '" + w + "'");
    return it->second;
  }

  const std::string& word(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= words_.size()) {
      throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary");
    }
    return words_[static_cast<std::size_t>(id)];
  }

  // Non-special words in id order.
  std::vector<std::string> words() const { return {words_.begin() + tok::kFirstWord, words_.end()}; }

  static bool is_special(int id) { return id >= tok::kPad && id <= tok::kMask; }
  static bool is_ctx(int id) { return id >= tok::kCtx0 && id < tok::kFirstWord; }
  static int ctx(int i) { return tok::kCtx0 + i; }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> index_;
};

struct Span {
  std::size_t begin = 0;
  std::size_t end = 0;  // exclusive
  bool empty() const { return end <= begin; }
  std::size_t size() const { return empty() ? 0 : end - begin; }
  bool operator==(const Span&) const = default;
};

struct TokenSequence {
  std::vector<int> ids;
  std::vector<bool> visible;  // false at [PAD] positions
  Span prompt_span;
  Span answer_span;
  std::vector<std::size_t> mask_positions;
  std::vector<int> targets;  // original ids at mask_positions

  std::size_t length() const { return ids.size(); }

  static TokenSequence from_ids(std::vector<int> ids) {
    TokenSequence s;
    s.visible.resize(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) s.visible[i] = ids[i] != tok::kPad;
    s.ids = std::move(ids);
    return s;
  }

  void pad_to(std::size_t len) {
    if (ids.size() > len) throw std::length_error("sequence longer than pad length");
    ids.resize(len, tok::kPad);
    visible.resize(len, false);
  }
};

inline std::vector<std::string> split_words(const std::string& text) {
  std::istringstream is(text);
  std::vector<std::string> out;
  for (std::string w; is >> w;) out.push_back(w);
  return out;
}

// Word ids without [CLS]/[SEP].
inline std::vector<int> encode_words(const std::string& text, const Vocabulary& vocab) {
  std::vector<int> ids;
  for (const auto& w : split_words(text)) ids.push_back(vocab.id(w));
  return ids;
}

inline TokenSequence tokenize(const std::string& text, const Vocabulary& vocab) {
  std::vector<int> ids{tok::kCls};
  for (int id : encode_words(text, vocab)) ids.push_back(id);
  ids.push_back(tok::kSep);
  return TokenSequence::from_ids(std::move(ids));
}

inline std::string join_words(const std::vector<int>& ids, const Vocabulary& vocab) {
  std::string out;
  for (int id : ids) {
    if (!out.empty()) out += ' ';
    out += vocab.word(id);
  }
  return out;
}

// Inverse of tokenize: drops [CLS], [SEP] and [PAD]; other specials print
// as their bracketed names.
inline std::string detokenize(const TokenSequence& seq, const Vocabulary& vocab) {
  std::vector<int> words;
  for (int id : seq.ids) {
    if (id == tok::kCls || id == tok::kSep || id == tok::kPad) continue;
    words.push_back(id);
  }
  return join_words(words, vocab);
}

}  // namespace vlmix
