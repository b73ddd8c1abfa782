#pragma once

// Autoregressive decoding by repeatedly appending [MASK] and reading the
// MLM-head distribution there, with beam search.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <vector>

#include "vlmix/config.hpp"
#include "vlmix/encoders.hpp"
#include "vlmix/objectives.hpp"

namespace vlmix {

struct DecodeResult {
  std::vector<int> tokens;  // generated tokens, including the final [SEP] when emitted
  double log_prob = 0;      // sum of token log-probabilities
  double score = 0;         // log_prob, or its per-token mean when normalized
  bool finished = false;    // ended with [SEP]
};

// Tokens the decoder may emit: [SEP] and ordinary words.
inline bool decodable(int id) { return id == tok::kSep || id >= tok::kFirstWord; }

namespace detail {

inline bool beam_before(const DecodeResult& a, const DecodeResult& b) {
  if (a.score != b.score) return a.score > b.score;
  return a.tokens < b.tokens;
}

inline double beam_score(double log_prob, std::size_t len, bool normalize) {
  return normalize && len > 0 ? log_prob / static_cast<double>(len) : log_prob;
}

// Log-softmax rows of the MLM head at the trailing [MASK] of every prefix.
template <typename T>
std::vector<std::vector<double>> next_token_log_probs(const Tensor<T>& visual_one,
                                                      const std::vector<std::vector<int>>& prefixes,
                                                      const TriEncoderParams<T>& params) {
  std::vector<TokenSequence> seqs;
  for (const auto& p : prefixes) {
    auto ids = p;
    ids.push_back(tok::kMask);
    auto s = TokenSequence::from_ids(std::move(ids));
    s.mask_positions = {s.length() - 1};
    seqs.push_back(std::move(s));
  }
  std::vector<const TokenSequence*> ptrs;
  for (const auto& s : seqs) ptrs.push_back(&s);
  auto fwd = mlm_forward(visual_one, std::vector<std::size_t>(seqs.size(), 0), ptrs,
                         std::vector<AttentionMaskKind>(seqs.size(), AttentionMaskKind::Causal), params);
  const std::size_t v = fwd.logits.cols();
  std::vector<std::vector<double>> out(seqs.size(), std::vector<double>(v));
  for (std::size_t r = 0; r < seqs.size(); ++r) {
    const T* x = fwd.logits.data().data() + r * v;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < v; ++j)
      if (decodable(static_cast<int>(j))) mx = std::max(mx, static_cast<double>(x[j]));
    double s = 0;
    for (std::size_t j = 0; j < v; ++j)
      if (decodable(static_cast<int>(j))) s += std::exp(static_cast<double>(x[j]) - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < v; ++j)
      out[r][j] = decodable(static_cast<int>(j)) ? static_cast<double>(x[j]) - lse
                                                 : -std::numeric_limits<double>::infinity();
  }
  return out;
}

}  // namespace detail

// The distribution is renormalized over decodable tokens. Beams that emit
// [SEP] move to the finished set; the search stops when no alive beam can
// still beat the best finished one, or after max_len generated tokens.
template <typename T>
DecodeResult decode(const Image& image, const TokenSequence& prefix, const TriEncoderParams<T>& params,
                    const DecodeConfig& cfg = {}) {
  if (cfg.beam_size < 1) throw ValidationError("beam_size must be at least 1");
  if (cfg.max_len < 1) throw ValidationError("max_len must be at least 1");
  if (prefix.length() == 0 || prefix.ids[0] != tok::kCls) throw ValidationError("decode prefix must start with [CLS]");
  NoGradGuard ng;
  const auto visual = encode_image(image, params);
  std::vector<int> base;
  for (std::size_t i = 0; i < prefix.length(); ++i)
    if (prefix.visible[i]) base.push_back(prefix.ids[i]);
  const std::size_t room = params.config.max_positions() - std::min(params.config.max_positions(), base.size());
  const std::size_t max_len = std::min(cfg.max_len, room);
  if (max_len == 0) throw LengthError("prefix leaves no room for generation");

  std::vector<DecodeResult> alive{DecodeResult{}}, finished;
  for (std::size_t step = 0; step < max_len && !alive.empty(); ++step) {
    std::vector<std::vector<int>> prefixes;
    for (const auto& b : alive) {
      auto p = base;
      p.insert(p.end(), b.tokens.begin(), b.tokens.end());
      prefixes.push_back(std::move(p));
    }
    const auto lp = detail::next_token_log_probs(visual, prefixes, params);
    std::vector<DecodeResult> cand;
    for (std::size_t b = 0; b < alive.size(); ++b)
      for (std::size_t j = 0; j < lp[b].size(); ++j) {
        if (!decodable(static_cast<int>(j))) continue;
        DecodeResult c = alive[b];
        c.tokens.push_back(static_cast<int>(j));
        c.log_prob += lp[b][j];
        c.finished = j == static_cast<std::size_t>(tok::kSep);
        c.score = detail::beam_score(c.log_prob, c.tokens.size(), cfg.length_normalization);
        cand.push_back(std::move(c));
      }
    const std::size_t keep = std::min(cand.size(), 2 * cfg.beam_size);
    std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(keep), cand.end(), detail::beam_before);
    alive.clear();
    for (std::size_t i = 0; i < keep && alive.size() < cfg.beam_size; ++i) {
      if (cand[i].finished) {
        if (i < cfg.beam_size) finished.push_back(cand[i]);
      } else {
        alive.push_back(cand[i]);
      }
    }
    std::sort(finished.begin(), finished.end(), detail::beam_before);
    if (finished.size() > cfg.beam_size) finished.resize(cfg.beam_size);
    // Log-probs only decrease, so without normalization an alive beam that
    // already trails the best finished beam cannot overtake it.
    if (!cfg.length_normalization && !finished.empty() && !alive.empty() &&
        alive.front().score <= finished.front().score)
      break;
  }
  for (auto& a : alive) finished.push_back(a);
  std::sort(finished.begin(), finished.end(), detail::beam_before);
  return finished.front();
}

// Step-by-step argmax decoding, kept separate from the beam implementation.
template <typename T>
DecodeResult greedy_decode(const Image& image, const TokenSequence& prefix, const TriEncoderParams<T>& params,
                           std::size_t max_len = 20) {
  NoGradGuard ng;
  const auto visual = encode_image(image, params);
  std::vector<int> ids(prefix.ids.begin(), prefix.ids.end());
  DecodeResult r;
  const std::size_t room = params.config.max_positions() - std::min(params.config.max_positions(), ids.size());
  for (std::size_t step = 0; step < std::min(max_len, room); ++step) {
    const auto lp = detail::next_token_log_probs(visual, {ids}, params).front();
    int best = -1;
    for (std::size_t j = 0; j < lp.size(); ++j)
      if (decodable(static_cast<int>(j)) && (best < 0 || lp[j] > lp[static_cast<std::size_t>(best)]))
        best = static_cast<int>(j);
    r.tokens.push_back(best);
    r.log_prob += lp[static_cast<std::size_t>(best)];
    ids.push_back(best);
    if (best == tok::kSep) {
      r.finished = true;
      break;
    }
  }
  r.score = r.log_prob;
  return r;
}

// Generated words without the terminating [SEP].
inline std::vector<int> strip_sep(std::vector<int> tokens) {
  if (!tokens.empty() && tokens.back() == tok::kSep) tokens.pop_back();
  return tokens;
}

// Teacher-forced next-token cross-entropy of `target` (words, no specials)
// after `prefix`, summed over the words and the closing [SEP].
template <typename T>
double sequence_cross_entropy(const Image& image, const TokenSequence& prefix, const std::vector<int>& target,
                              const TriEncoderParams<T>& params) {
  NoGradGuard ng;
  const auto visual = encode_image(image, params);
  std::vector<std::vector<int>> prefixes;
  std::vector<int> next;
  std::vector<int> ids(prefix.ids.begin(), prefix.ids.end());
  for (std::size_t k = 0; k <= target.size(); ++k) {
    prefixes.push_back(ids);
    next.push_back(k < target.size() ? target[k] : tok::kSep);
    if (k < target.size()) ids.push_back(target[k]);
  }
  double ce = 0;
  const auto lp = detail::next_token_log_probs(visual, prefixes, params);
  for (std::size_t k = 0; k < next.size(); ++k) ce -= lp[k][static_cast<std::size_t>(next[k])];
  return ce;
}

}  // namespace vlmix
