#pragma once

// Two-stage retrieval: contrastive similarity over every pair, then
// matching-head rerank of the top_k candidates per query.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include "vlmix/config.hpp"
#include "vlmix/encoders.hpp"
#include "vlmix/objectives.hpp"

namespace vlmix {

enum class RetrievalDirection : std::uint8_t { ImageToText, TextToImage };

struct RankedList {
  std::size_t query = 0;
  std::vector<std::size_t> items;  // gallery indices, best first
  std::vector<double> stage1;      // per ranked item
  std::vector<double> stage2;      // matching probability; NaN beyond the reranked prefix
};

struct RetrievalOutput {
  std::vector<RankedList> lists;
  std::vector<std::string> warnings;
};

// Orders candidates by matching probability, then stage-1 score, then index.
inline bool rerank_before(double itm_a, double s1_a, std::size_t a, double itm_b, double s1_b, std::size_t b) {
  if (itm_a != itm_b) return itm_a > itm_b;
  if (s1_a != s1_b) return s1_a > s1_b;
  return a < b;
}

template <typename T>
struct UnimodalCache {
  Tensor<T> visual;  // [n_images*(N+1) x H]
  EncodedText<T> text;
  std::vector<double> similarity;  // [n_images x n_texts]
};

template <typename T>
UnimodalCache<T> encode_for_retrieval(const std::vector<const Image*>& images,
                                      const std::vector<const TokenSequence*>& texts,
                                      const TriEncoderParams<T>& params) {
  NoGradGuard ng;
  UnimodalCache<T> c;
  c.visual = encode_images(images, params);
  c.text = encode_texts(texts, std::vector<AttentionMaskKind>(texts.size(), AttentionMaskKind::Bidirectional), params);
  const std::size_t nv = params.config.num_patches() + 1;
  c.similarity = itc_similarity(gather_rows(c.visual, position_rows(images.size(), nv)),
                                gather_rows(c.text.states, position_rows(texts.size(), c.text.len)),
                                params.contrastive);
  return c;
}

// Positive-class matching probability for each (image, text) index pair.
template <typename T>
std::vector<double> itm_scores(const UnimodalCache<T>& cache, const std::vector<std::pair<std::size_t, std::size_t>>& pairs,
                               const TriEncoderParams<T>& params, std::size_t chunk = 64) {
  NoGradGuard ng;
  const std::size_t nv = params.config.num_patches() + 1, len = cache.text.len, ll = len * len;
  std::vector<double> out;
  out.reserve(pairs.size());
  for (std::size_t start = 0; start < pairs.size(); start += chunk) {
    const std::size_t end = std::min(pairs.size(), start + chunk);
    std::vector<std::size_t> img, txt;
    std::vector<T> mask;
    for (std::size_t i = start; i < end; ++i) {
      img.push_back(pairs[i].first);
      txt.push_back(pairs[i].second);
      mask.insert(mask.end(), cache.text.mask.begin() + static_cast<std::ptrdiff_t>(pairs[i].second * ll),
                  cache.text.mask.begin() + static_cast<std::ptrdiff_t>((pairs[i].second + 1) * ll));
    }
    auto m = encode_multimodal(gather_rows(cache.text.states, sequence_rows(txt, len)),
                               gather_rows(cache.visual, sequence_rows(img, nv)), mask, img.size(), params);
    auto logits = linear(gather_rows(m, position_rows(img.size(), len)), params.itm.w, params.itm.b);
    for (std::size_t r = 0; r < img.size(); ++r) {
      const double a = logits.at(r, 0), b = logits.at(r, 1);
      out.push_back(1.0 / (1.0 + std::exp(a - b)));
    }
  }
  return out;
}

template <typename T>
RetrievalOutput retrieve(const std::vector<const Image*>& images, const std::vector<const TokenSequence*>& texts,
                         RetrievalDirection dir, const TriEncoderParams<T>& params, const RetrievalConfig& cfg = {}) {
  if (images.empty() || texts.empty()) throw ValidationError("retrieval needs non-empty queries and gallery");
  const auto cache = encode_for_retrieval(images, texts, params);
  const bool i2t = dir == RetrievalDirection::ImageToText;
  const std::size_t nq = i2t ? images.size() : texts.size();
  const std::size_t ng = i2t ? texts.size() : images.size();
  RetrievalOutput out;
  std::size_t k = cfg.top_k;
  if (k == 0) throw ValidationError("top_k must be at least 1");
  if (k > ng) {
    out.warnings.push_back("top_k " + std::to_string(k) + " clamped to gallery size " + std::to_string(ng));
    k = ng;
  }
  auto sim = [&](std::size_t q, std::size_t g) {
    return i2t ? cache.similarity[q * texts.size() + g] : cache.similarity[g * texts.size() + q];
  };
  for (std::size_t q = 0; q < nq; ++q) {
    std::vector<std::size_t> order(ng);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      const double sa = sim(q, a), sb = sim(q, b);
      return sa != sb ? sa > sb : a < b;
    });
    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    for (std::size_t i = 0; i < k; ++i) pairs.push_back(i2t ? std::pair{q, order[i]} : std::pair{order[i], q});
    const auto itm = itm_scores(cache, pairs, params);
    std::vector<std::size_t> top(k);
    std::iota(top.begin(), top.end(), 0);
    std::sort(top.begin(), top.end(), [&](std::size_t a, std::size_t b) {
      return rerank_before(itm[a], sim(q, order[a]), order[a], itm[b], sim(q, order[b]), order[b]);
    });
    RankedList list;
    list.query = q;
    for (std::size_t i : top) {
      list.items.push_back(order[i]);
      list.stage1.push_back(sim(q, order[i]));
      list.stage2.push_back(itm[i]);
    }
    for (std::size_t i = k; i < ng; ++i) {
      list.items.push_back(order[i]);
      list.stage1.push_back(sim(q, order[i]));
      list.stage2.push_back(std::numeric_limits<double>::quiet_NaN());
    }
    out.lists.push_back(std::move(list));
  }
  return out;
}

// Fraction of queries with some ground-truth item among the first k.
inline double recall_at_k(const std::vector<std::vector<std::size_t>>& rankings,
                          const std::vector<std::vector<std::size_t>>& ground_truth, std::size_t k) {
  if (k < 1) throw ValidationError("recall@k needs k >= 1");
  if (rankings.size() != ground_truth.size()) throw ShapeError("recall@k: one ground-truth set per query required");
  if (rankings.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t q = 0; q < rankings.size(); ++q) {
    const auto& r = rankings[q];
    const std::size_t n = std::min(k, r.size());
    bool hit = false;
    for (std::size_t i = 0; i < n && !hit; ++i)
      hit = std::find(ground_truth[q].begin(), ground_truth[q].end(), r[i]) != ground_truth[q].end();
    hits += hit;
  }
  return static_cast<double>(hits) / static_cast<double>(rankings.size());
}

inline std::vector<std::vector<std::size_t>> ranked_items(const RetrievalOutput& out) {
  std::vector<std::vector<std::size_t>> r;
  for (const auto& l : out.lists) r.push_back(l.items);
  return r;
}

// query<TAB>rank<TAB>item<TAB>stage1<TAB>stage2, header first; stage2 is "-"
// for items outside the reranked prefix.
inline void write_retrieval_tsv(std::ostream& os, const RetrievalOutput& out) {
  os << "query\trank\titem\tstage1\tstage2\n";
  os.precision(9);
  for (const auto& l : out.lists)
    for (std::size_t i = 0; i < l.items.size(); ++i) {
      os << l.query << '\t' << i + 1 << '\t' << l.items[i] << '\t' << l.stage1[i] << '\t';
      if (std::isnan(l.stage2[i])) os << '-';
      else os << l.stage2[i];
      os << '\n';
    }
}

}  // namespace vlmix
