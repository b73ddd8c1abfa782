#pragma once

// Corpus-level BLEU-4 with one reference per hypothesis and no smoothing.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "vlmix/tensor.hpp"

namespace vlmix {

using Words = std::vector<std::string>;

struct BleuStats {
  std::size_t matched[4] = {0, 0, 0, 0};
  std::size_t total[4] = {0, 0, 0, 0};
  std::size_t hyp_len = 0;
  std::size_t ref_len = 0;
};

namespace detail {
inline std::map<Words, std::size_t> ngram_counts(const Words& w, std::size_t n) {
  std::map<Words, std::size_t> c;
  for (std::size_t i = 0; i + n <= w.size(); ++i) ++c[Words(w.begin() + static_cast<std::ptrdiff_t>(i),
                                                             w.begin() + static_cast<std::ptrdiff_t>(i + n))];
  return c;
}
}  // namespace detail

inline BleuStats bleu_stats(const std::vector<Words>& hyps, const std::vector<Words>& refs) {
  if (hyps.empty()) throw ValidationError("bleu4 needs at least one hypothesis");
  if (hyps.size() != refs.size()) throw ShapeError("bleu4 needs one reference per hypothesis");
  BleuStats s;
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    s.hyp_len += hyps[i].size();
    s.ref_len += refs[i].size();
    for (std::size_t n = 1; n <= 4; ++n) {
      const auto h = detail::ngram_counts(hyps[i], n);
      const auto r = detail::ngram_counts(refs[i], n);
      for (const auto& [g, c] : h) {
        auto it = r.find(g);
        s.matched[n - 1] += it == r.end() ? 0 : std::min(c, it->second);
        s.total[n - 1] += c;
      }
    }
  }
  return s;
}

// Geometric mean of the first `order` modified precisions times the brevity
// penalty; any zero precision gives 0.
inline double bleu_from_stats(const BleuStats& s, std::size_t order = 4) {
  double log_sum = 0;
  for (std::size_t n = 0; n < order; ++n) {
    if (s.total[n] == 0 || s.matched[n] == 0) return 0.0;
    log_sum += std::log(static_cast<double>(s.matched[n]) / static_cast<double>(s.total[n]));
  }
  const double bp = s.hyp_len >= s.ref_len
                        ? 1.0
                        : std::exp(1.0 - static_cast<double>(s.ref_len) / static_cast<double>(s.hyp_len));
  return bp * std::exp(log_sum / static_cast<double>(order));
}

inline double bleu4(const std::vector<Words>& hyps, const std::vector<Words>& refs) {
  return bleu_from_stats(bleu_stats(hyps, refs), 4);
}

inline double bleu1(const std::vector<Words>& hyps, const std::vector<Words>& refs) {
  return bleu_from_stats(bleu_stats(hyps, refs), 1);
}

}  // namespace vlmix
