#pragma once

// Pretraining losses (contrastive, masked language modeling, matching) and
// the mask-mixing pretraining step.

#include <cmath>
#include <cstddef>
#include <vector>

#include "vlmix/config.hpp"
#include "vlmix/corpus.hpp"
#include "vlmix/encoders.hpp"
#include "vlmix/ops.hpp"
#include "vlmix/rng.hpp"

namespace vlmix {

// Contrastive loss over a batch of image/text [CLS] states.
// S = norm(X Wi) norm(Y Wt)^T / sigma; loss = mean_i CE(S_i., i) + mean_j CE(S_.j, j).
template <typename T>
Tensor<T> itc_loss(const Tensor<T>& image_cls, const Tensor<T>& text_cls, const ContrastiveHead<T>& head,
                   double temperature) {
  if (image_cls.rows() == 0 || image_cls.rows() != text_cls.rows()) {
    throw ShapeError("itc_loss: image batch " + shape_str(image_cls.shape()) + " vs text batch " +
                     shape_str(text_cls.shape()));
  }
  if (!(temperature > 0)) throw ValidationError("temperature must be positive");
  const std::size_t b = image_cls.rows();
  auto x = l2_normalize_rows(linear(image_cls, head.image_proj));
  auto y = l2_normalize_rows(linear(text_cls, head.text_proj));
  auto s = scale(linear(x, transpose(y)), static_cast<T>(1.0 / temperature));
  std::vector<int> diag(b);
  for (std::size_t i = 0; i < b; ++i) diag[i] = static_cast<int>(i);
  return add(cross_entropy(s, diag, Reduction::Mean), cross_entropy(transpose(s), diag, Reduction::Mean));
}

// Contrastive similarity matrix without the temperature, used for retrieval.
template <typename T>
std::vector<double> itc_similarity(const Tensor<T>& image_cls, const Tensor<T>& text_cls,
                                   const ContrastiveHead<T>& head) {
  NoGradGuard ng;
  auto x = l2_normalize_rows(linear(image_cls, head.image_proj));
  auto y = l2_normalize_rows(linear(text_cls, head.text_proj));
  auto s = linear(x, transpose(y));
  return {s.data().begin(), s.data().end()};
}

// Sum of cross-entropies at the given rows of the multimodal states.
template <typename T>
Tensor<T> mlm_loss(const Tensor<T>& states, const std::vector<std::size_t>& rows, const std::vector<int>& targets,
                   const MlmHead<T>& head) {
  if (rows.size() != targets.size()) throw ShapeError("mlm_loss: positions and targets differ in count");
  if (rows.empty()) return Tensor<T>::scalar(T(0));
  return cross_entropy(linear(gather_rows(states, rows), head.w, head.b), targets, Reduction::Sum);
}

template <typename T>
Tensor<T> mlm_logits(const Tensor<T>& states, const std::vector<std::size_t>& rows, const MlmHead<T>& head) {
  return linear(gather_rows(states, rows), head.w, head.b);
}

// Sum over the batch of two-class cross-entropies on multimodal [CLS] states.
template <typename T>
Tensor<T> itm_loss(const Tensor<T>& cls, const std::vector<int>& labels, const ItmHead<T>& head) {
  for (int y : labels)
    if (y != 0 && y != 1) throw IndexError("itm label " + std::to_string(y) + " is not 0 or 1");
  return cross_entropy(linear(cls, head.w, head.b), labels, Reduction::Sum);
}

// MLM-head logits at every [MASK]-annotated position of a batch of
// sequences; sequence s attends image image_of[s] (a row block of `visual`).
template <typename T>
struct MaskedForward {
  Tensor<T> logits;                 // one row per annotated position, in order
  std::vector<int> targets;         // empty entries are -1 when unknown
  std::vector<std::size_t> seq_of;  // owning sequence of each row
};

template <typename T>
MaskedForward<T> mlm_forward(const Tensor<T>& visual, const std::vector<std::size_t>& image_of,
                             const std::vector<const TokenSequence*>& seqs, const std::vector<AttentionMaskKind>& kinds,
                             const TriEncoderParams<T>& params) {
  const std::size_t nv = params.config.num_patches() + 1;
  if (image_of.size() != seqs.size()) throw ShapeError("mlm_forward: image index per sequence required");
  auto text = encode_texts(seqs, kinds, params);
  auto vis = gather_rows(visual, sequence_rows(image_of, nv));
  auto m = encode_multimodal(text, vis, params);
  MaskedForward<T> out;
  std::vector<std::size_t> rows;
  for (std::size_t s = 0; s < seqs.size(); ++s) {
    const auto& q = *seqs[s];
    for (std::size_t k = 0; k < q.mask_positions.size(); ++k) {
      rows.push_back(s * text.len + q.mask_positions[k]);
      out.targets.push_back(k < q.targets.size() ? q.targets[k] : -1);
      out.seq_of.push_back(s);
    }
  }
  if (!rows.empty()) out.logits = mlm_logits(m, rows, params.mlm);
  return out;
}

struct MaskMixPolicy {
  double p_causal = 0.5;

  AttentionMaskKind draw(Rng& rng) const {
    if (p_causal < 0.0 || p_causal > 1.0) throw ValidationError("p_causal must lie in [0, 1]");
    return bernoulli(rng, p_causal) ? AttentionMaskKind::Causal : AttentionMaskKind::Bidirectional;
  }
};

struct StepMetrics {
  std::size_t step = 0;
  double itc = 0;
  double mlm = 0;
  double itm = 0;
  double causal_fraction = 0;
  double total() const { return itc + mlm + itm; }
};

template <typename T>
struct StepResult {
  Tensor<T> loss;
  StepMetrics metrics;
  std::vector<AttentionMaskKind> mlm_kinds;  // audit of the per-sample draws
  std::size_t masked_tokens = 0;
  std::size_t masked_correct = 0;
};

struct PretrainOptions {
  double temperature = 0.07;
  double mask_prob = 0.15;
};

// One forward pass over all three objectives; callers run backward on
// result.loss. ITC and ITM always see bidirectional text; only the MLM path
// draws its mask kind from the policy.
template <typename T>
StepResult<T> pretrain_step(const std::vector<const PairedExample*>& batch, const TriEncoderParams<T>& params,
                            const MaskMixPolicy& policy, Rng& rng, const PretrainOptions& opt = {}) {
  const std::size_t b = batch.size();
  if (b < 2) throw ValidationError("pretraining needs a batch of at least 2");
  const std::size_t nv = params.config.num_patches() + 1;

  std::vector<const Image*> images;
  std::vector<const TokenSequence*> captions;
  for (const auto* ex : batch) {
    images.push_back(&ex->image);
    captions.push_back(&ex->caption);
  }
  auto visual = encode_images(images, params);

  // Contrastive.
  auto text = encode_texts(captions, std::vector<AttentionMaskKind>(b, AttentionMaskKind::Bidirectional), params);
  auto l_itc = itc_loss(gather_rows(visual, position_rows(b, nv)), gather_rows(text.states, position_rows(b, text.len)),
                        params.contrastive, opt.temperature);

  // Masked language modeling under the drawn mask kinds.
  std::vector<TokenSequence> plain;
  for (const auto* c : captions) plain.push_back(*c);
  auto masked = make_mlm_batch(plain, opt.mask_prob, rng);
  StepResult<T> res;
  std::vector<const TokenSequence*> mptr;
  for (std::size_t i = 0; i < b; ++i) {
    res.mlm_kinds.push_back(policy.draw(rng));
    mptr.push_back(&masked[i]);
  }
  auto mtext = encode_texts(mptr, res.mlm_kinds, params);
  auto mstates = encode_multimodal(mtext, visual, params);
  std::vector<std::size_t> rows;
  std::vector<int> targets;
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t k = 0; k < masked[i].mask_positions.size(); ++k) {
      rows.push_back(i * mtext.len + masked[i].mask_positions[k]);
      targets.push_back(masked[i].targets[k]);
    }
  Tensor<T> l_mlm = Tensor<T>::scalar(T(0));
  if (!rows.empty()) {
    auto logits = mlm_logits(mstates, rows, params.mlm);
    l_mlm = cross_entropy(logits, targets, Reduction::Sum);
    const std::size_t v = logits.cols();
    for (std::size_t r = 0; r < rows.size(); ++r) {
      const T* x = logits.data().data() + r * v;
      const auto best = static_cast<int>(std::max_element(x, x + v) - x);
      res.masked_correct += best == targets[r];
    }
  }
  res.masked_tokens = rows.size();

  // Matching: positives then one negative each, reusing the unimodal states.
  auto pairs = make_itm_batch(batch, rng);
  std::vector<std::size_t> img_idx, txt_idx;
  std::vector<int> labels;
  std::vector<T> pair_mask;
  const std::size_t ll = text.len * text.len;
  for (const auto& p : pairs) {
    img_idx.push_back(p.image);
    txt_idx.push_back(p.text);
    labels.push_back(p.label);
    pair_mask.insert(pair_mask.end(), text.mask.begin() + static_cast<std::ptrdiff_t>(p.text * ll),
                     text.mask.begin() + static_cast<std::ptrdiff_t>((p.text + 1) * ll));
  }
  auto pm = encode_multimodal(gather_rows(text.states, sequence_rows(txt_idx, text.len)),
                              gather_rows(visual, sequence_rows(img_idx, nv)), pair_mask, pairs.size(), params);
  auto l_itm = itm_loss(gather_rows(pm, position_rows(pairs.size(), text.len)), labels, params.itm);

  res.loss = add_scalars<T>({l_itc, l_mlm, l_itm});
  res.metrics.itc = static_cast<double>(l_itc.item());
  res.metrics.mlm = static_cast<double>(l_mlm.item());
  res.metrics.itm = static_cast<double>(l_itm.item());
  std::size_t causal = 0;
  for (auto k : res.mlm_kinds) causal += k == AttentionMaskKind::Causal;
  res.metrics.causal_fraction = static_cast<double>(causal) / static_cast<double>(b);
  return res;
}

}  // namespace vlmix
