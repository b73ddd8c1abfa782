#pragma once

// Visual (pre-LN), text (post-LN) and multimodal (post-LN with cross
// attention) encoders, their parameters and attention-mask construction.
//
// Batched activations are row-stacked: a batch of B sequences of length L and
// width H is a [B*L x H] tensor, sequence b occupying rows [b*L, (b+1)*L).

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "vlmix/config.hpp"
#include "vlmix/ops.hpp"
#include "vlmix/rng.hpp"
#include "vlmix/scene.hpp"
#include "vlmix/tensor.hpp"
#include "vlmix/vocab.hpp"

namespace vlmix {

enum class AttentionMaskKind : std::uint8_t { Bidirectional, Causal };

struct LengthError : ValidationError {
  using ValidationError::ValidationError;
};

template <typename T>
struct LayerNormParams {
  Tensor<T> gain, bias;
};

template <typename T>
struct AttentionParams {
  Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
};

template <typename T>
struct MlpParams {
  Tensor<T> w1, b1, w2, b2;
};

template <typename T>
struct VisualBlock {
  LayerNormParams<T> ln1;
  AttentionParams<T> attn;
  LayerNormParams<T> ln2;
  MlpParams<T> mlp;
};

template <typename T>
struct TextBlock {
  AttentionParams<T> attn;
  LayerNormParams<T> ln1;
  MlpParams<T> mlp;
  LayerNormParams<T> ln2;
};

template <typename T>
struct MultimodalBlock {
  AttentionParams<T> self_attn;
  LayerNormParams<T> ln1;
  AttentionParams<T> cross_attn;
  LayerNormParams<T> ln_cross;
  MlpParams<T> mlp;
  LayerNormParams<T> ln2;
};

template <typename T>
struct VisualEncoderParams {
  Tensor<T> patch_proj;  // [P*P*C x H]
  Tensor<T> cls;         // [1 x H]
  Tensor<T> pos;         // [(N+1) x H]
  std::vector<VisualBlock<T>> blocks;
};

template <typename T>
struct TextEncoderParams {
  Tensor<T> word_emb;  // [V x H]; row [CLS] is the text start token
  Tensor<T> pos;       // [(L_max+1) x H]
  std::vector<TextBlock<T>> blocks;
};

template <typename T>
struct MultimodalEncoderParams {
  std::vector<MultimodalBlock<T>> blocks;
};

template <typename T>
struct ContrastiveHead {
  Tensor<T> image_proj;  // [H x d_c]
  Tensor<T> text_proj;   // [H x d_c]
};

template <typename T>
struct ItmHead {
  Tensor<T> w;  // [H x 2]
  Tensor<T> b;  // [2]
};

template <typename T>
struct MlmHead {
  Tensor<T> w;  // [H x V]
  Tensor<T> b;  // [V]
};

enum class ParamRole : std::uint8_t { Weight, Bias, LayerNorm, Embedding };

template <typename T>
struct TriEncoderParams {
  EncoderConfig config;
  VisualEncoderParams<T> visual;
  TextEncoderParams<T> text;
  MultimodalEncoderParams<T> multimodal;
  ContrastiveHead<T> contrastive;
  ItmHead<T> itm;
  MlmHead<T> mlm;

  using Visitor = std::function<void(const std::string&, Tensor<T>&, ParamRole)>;

  // Visits every parameter in a fixed order with a stable dotted name.
  // Prefixes: ve. te. me. head.
  void for_each(const Visitor& fn) {
    auto ln = [&](const std::string& p, LayerNormParams<T>& l) {
      fn(p + ".gain", l.gain, ParamRole::LayerNorm);
      fn(p + ".bias", l.bias, ParamRole::LayerNorm);
    };
    auto attn = [&](const std::string& p, AttentionParams<T>& a) {
      fn(p + ".wq", a.wq, ParamRole::Weight);
      fn(p + ".bq", a.bq, ParamRole::Bias);
      fn(p + ".wk", a.wk, ParamRole::Weight);
      fn(p + ".bk", a.bk, ParamRole::Bias);
      fn(p + ".wv", a.wv, ParamRole::Weight);
      fn(p + ".bv", a.bv, ParamRole::Bias);
      fn(p + ".wo", a.wo, ParamRole::Weight);
      fn(p + ".bo", a.bo, ParamRole::Bias);
    };
    auto mlp = [&](const std::string& p, MlpParams<T>& m) {
      fn(p + ".w1", m.w1, ParamRole::Weight);
      fn(p + ".b1", m.b1, ParamRole::Bias);
      fn(p + ".w2", m.w2, ParamRole::Weight);
      fn(p + ".b2", m.b2, ParamRole::Bias);
    };
    fn("ve.patch_proj", visual.patch_proj, ParamRole::Weight);
    fn("ve.cls", visual.cls, ParamRole::Embedding);
    fn("ve.pos", visual.pos, ParamRole::Embedding);
    for (std::size_t i = 0; i < visual.blocks.size(); ++i) {
      const std::string p = "ve.layer" + std::to_string(i);
      ln(p + ".ln1", visual.blocks[i].ln1);
      attn(p + ".attn", visual.blocks[i].attn);
      ln(p + ".ln2", visual.blocks[i].ln2);
      mlp(p + ".mlp", visual.blocks[i].mlp);
    }
    fn("te.word_emb", text.word_emb, ParamRole::Embedding);
    fn("te.pos", text.pos, ParamRole::Embedding);
    for (std::size_t i = 0; i < text.blocks.size(); ++i) {
      const std::string p = "te.layer" + std::to_string(i);
      attn(p + ".attn", text.blocks[i].attn);
      ln(p + ".ln1", text.blocks[i].ln1);
      mlp(p + ".mlp", text.blocks[i].mlp);
      ln(p + ".ln2", text.blocks[i].ln2);
    }
    for (std::size_t i = 0; i < multimodal.blocks.size(); ++i) {
      const std::string p = "me.layer" + std::to_string(i);
      auto& b = multimodal.blocks[i];
      attn(p + ".self", b.self_attn);
      ln(p + ".ln1", b.ln1);
      attn(p + ".cross", b.cross_attn);
      ln(p + ".ln_cross", b.ln_cross);
      mlp(p + ".mlp", b.mlp);
      ln(p + ".ln2", b.ln2);
    }
    fn("head.itc.image", contrastive.image_proj, ParamRole::Weight);
    fn("head.itc.text", contrastive.text_proj, ParamRole::Weight);
    fn("head.itm.w", itm.w, ParamRole::Weight);
    fn("head.itm.b", itm.b, ParamRole::Bias);
    fn("head.mlm.w", mlm.w, ParamRole::Weight);
    fn("head.mlm.b", mlm.b, ParamRole::Bias);
  }

  void for_each(const std::function<void(const std::string&, const Tensor<T>&, ParamRole)>& fn) const {
    const_cast<TriEncoderParams*>(this)->for_each(
        [&](const std::string& n, Tensor<T>& t, ParamRole r) { fn(n, t, r); });
  }

  void zero_grad() {
    for_each([](const std::string&, Tensor<T>& t, ParamRole) { t.zero_grad(); });
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for_each([&](const std::string&, const Tensor<T>& t, ParamRole) { n += t.numel(); });
    return n;
  }

  // Deep copy; the result shares no storage with this.
  TriEncoderParams clone() const {
    TriEncoderParams out = *this;
    out.for_each([](const std::string&, Tensor<T>& t, ParamRole) {
      const bool rg = t.requires_grad();
      t = Tensor<T>::from(t.shape(), t.storage(), rg);
    });
    return out;
  }
};

// Truncated-normal weights and embeddings (std init_std), zero biases, unit
// layer-norm gains.
template <typename T>
TriEncoderParams<T> init_params(const EncoderConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const std::size_t h = cfg.hidden, ff = cfg.hidden * cfg.mlp_ratio;
  TriEncoderParams<T> p;
  p.config = cfg;
  auto mat = [](std::size_t r, std::size_t c) { return Tensor<T>::zeros({r, c}, true); };
  auto vec = [](std::size_t n) { return Tensor<T>::zeros({n}, true); };
  auto ln = [&] { return LayerNormParams<T>{vec(h), vec(h)}; };
  auto attn = [&] { return AttentionParams<T>{mat(h, h), vec(h), mat(h, h), vec(h), mat(h, h), vec(h), mat(h, h), vec(h)}; };
  auto mlp = [&] { return MlpParams<T>{mat(h, ff), vec(ff), mat(ff, h), vec(h)}; };

  p.visual.patch_proj = mat(cfg.patch_dim(), h);
  p.visual.cls = mat(1, h);
  p.visual.pos = mat(cfg.num_patches() + 1, h);
  for (std::size_t i = 0; i < cfg.visual_layers; ++i) p.visual.blocks.push_back({ln(), attn(), ln(), mlp()});
  p.text.word_emb = mat(cfg.vocab_size, h);
  p.text.pos = mat(cfg.max_positions(), h);
  for (std::size_t i = 0; i < cfg.text_layers; ++i) p.text.blocks.push_back({attn(), ln(), mlp(), ln()});
  for (std::size_t i = 0; i < cfg.multimodal_layers; ++i)
    p.multimodal.blocks.push_back({attn(), ln(), attn(), ln(), mlp(), ln()});
  p.contrastive = {mat(h, cfg.contrastive_dim), mat(h, cfg.contrastive_dim)};
  p.itm = {mat(h, 2), vec(2)};
  p.mlm = {mat(h, cfg.vocab_size), vec(cfg.vocab_size)};

  Rng rng(seed);
  p.for_each([&](const std::string& name, Tensor<T>& t, ParamRole role) {
    switch (role) {
      case ParamRole::Weight:
      case ParamRole::Embedding:
        for (auto& v : t.data()) v = static_cast<T>(truncated_normal(rng, cfg.init_std));
        break;
      case ParamRole::Bias: break;
      case ParamRole::LayerNorm:
        if (name.ends_with(".gain")) std::fill(t.data().begin(), t.data().end(), T(1));
        break;
    }
  });
  return p;
}

// ---------------------------------------------------------------------------
// Patches. Patch order is row-major over the patch grid; within a patch the
// layout is channel-major, then pixel row, then pixel column.

template <typename T>
Tensor<T> patchify(const Image& img, std::size_t p) {
  if (p == 0 || img.height % p != 0 || img.width % p != 0) {
    throw ShapeError("image " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                     " not divisible by patch " + std::to_string(p));
  }
  const std::size_t gh = img.height / p, gw = img.width / p, dim = p * p * img.channels;
  std::vector<T> out(gh * gw * dim);
  for (std::size_t py = 0; py < gh; ++py)
    for (std::size_t px = 0; px < gw; ++px) {
      T* dst = out.data() + (py * gw + px) * dim;
      for (std::size_t c = 0; c < img.channels; ++c)
        for (std::size_t y = 0; y < p; ++y)
          for (std::size_t x = 0; x < p; ++x) *dst++ = static_cast<T>(img.at(c, py * p + y, px * p + x));
    }
  return Tensor<T>::from({gh * gw, dim}, std::move(out));
}

template <typename T>
Image unpatchify(const Tensor<T>& patches, std::size_t channels, std::size_t height, std::size_t width,
                 std::size_t p) {
  const std::size_t gw = width / p, dim = p * p * channels;
  if (patches.numel() != channels * height * width || patches.cols() != dim) {
    throw ShapeError("patch tensor " + shape_str(patches.shape()) + " does not match image geometry");
  }
  Image img{channels, height, width, std::vector<float>(channels * height * width)};
  for (std::size_t n = 0; n < patches.rows(); ++n) {
    const std::size_t py = n / gw, px = n % gw;
    std::size_t k = n * dim;
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t y = 0; y < p; ++y)
        for (std::size_t x = 0; x < p; ++x)
          img.pixels[(c * height + py * p + y) * width + px * p + x] = static_cast<float>(patches[k++]);
  }
  return img;
}

// ---------------------------------------------------------------------------
// Masks.

// Row i, column j: 0 when query i may attend key j, kBlocked otherwise.
// Bidirectional: j is not padding. Causal: additionally j <= i.
template <typename T>
std::vector<T> attention_mask_entries(AttentionMaskKind kind, const std::vector<bool>& visible) {
  const std::size_t len = visible.size();
  std::vector<T> m(len * len, T(0));
  for (std::size_t i = 0; i < len; ++i)
    for (std::size_t j = 0; j < len; ++j) {
      const bool ok = visible[j] && (kind == AttentionMaskKind::Bidirectional || j <= i);
      if (!ok) m[i * len + j] = T(kBlocked);
    }
  return m;
}

template <typename T>
Tensor<T> build_attention_mask(AttentionMaskKind kind, std::size_t len, const std::vector<bool>& visible) {
  if (visible.size() != len) {
    throw ShapeError("pad mask of length " + std::to_string(visible.size()) + " for sequence length " +
                     std::to_string(len));
  }
  return Tensor<T>::from({len, len}, attention_mask_entries<T>(kind, visible));
}

// ---------------------------------------------------------------------------
// Blocks.

namespace detail {

template <typename T>
Tensor<T> multi_head(const AttentionParams<T>& a, const Tensor<T>& xq, const Tensor<T>& xkv,
                     const std::vector<T>& mask, std::size_t batch, std::size_t heads) {
  auto q = linear(xq, a.wq, a.bq);
  auto k = linear(xkv, a.wk, a.bk);
  auto v = linear(xkv, a.wv, a.bv);
  return linear(attention(q, k, v, mask, batch, heads), a.wo, a.bo);
}

template <typename T>
Tensor<T> feed_forward(const MlpParams<T>& m, const Tensor<T>& x) {
  return linear(gelu(linear(x, m.w1, m.b1)), m.w2, m.b2);
}

template <typename T>
Tensor<T> norm(const LayerNormParams<T>& l, const Tensor<T>& x, double eps) {
  return layer_norm(x, l.gain, l.bias, static_cast<T>(eps));
}

}  // namespace detail

// Pre-LN: z' = MSA(LN(z)) + z ; z = MLP(LN(z')) + z'.
template <typename T>
Tensor<T> visual_block(const VisualBlock<T>& blk, const Tensor<T>& z, std::size_t batch, const EncoderConfig& cfg) {
  auto a = detail::norm(blk.ln1, z, cfg.ln_eps);
  auto z1 = add(detail::multi_head(blk.attn, a, a, {}, batch, cfg.heads), z);
  return add(detail::feed_forward(blk.mlp, detail::norm(blk.ln2, z1, cfg.ln_eps)), z1);
}

// Post-LN: p' = LN(p + MSA(p)) ; p = LN(p' + MLP(p')).
template <typename T>
Tensor<T> text_block(const TextBlock<T>& blk, const Tensor<T>& x, const std::vector<T>& mask, std::size_t batch,
                     const EncoderConfig& cfg) {
  auto x1 = detail::norm(blk.ln1, add(x, detail::multi_head(blk.attn, x, x, mask, batch, cfg.heads)), cfg.ln_eps);
  return detail::norm(blk.ln2, add(x1, detail::feed_forward(blk.mlp, x1)), cfg.ln_eps);
}

// Post-LN with a cross-attention step whose keys and values are the visual
// states; the image axis is never masked.
template <typename T>
Tensor<T> multimodal_block(const MultimodalBlock<T>& blk, const Tensor<T>& m, const Tensor<T>& visual,
                           const std::vector<T>& mask, std::size_t batch, const EncoderConfig& cfg) {
  auto m2 = detail::norm(blk.ln1, add(m, detail::multi_head(blk.self_attn, m, m, mask, batch, cfg.heads)), cfg.ln_eps);
  auto m1 = detail::norm(blk.ln_cross, add(m2, detail::multi_head(blk.cross_attn, m2, visual, {}, batch, cfg.heads)),
                         cfg.ln_eps);
  return detail::norm(blk.ln2, add(m1, detail::feed_forward(blk.mlp, m1)), cfg.ln_eps);
}

// ---------------------------------------------------------------------------
// Encoders.

// Embedding z0 = [cls; patches * V] + pos for every image, row-stacked.
template <typename T>
Tensor<T> embed_images(const std::vector<const Image*>& images, const TriEncoderParams<T>& params) {
  const auto& cfg = params.config;
  const std::size_t n = cfg.num_patches(), b = images.size();
  if (b == 0) throw ShapeError("encode_image needs at least one image");
  std::vector<T> flat;
  flat.reserve(b * n * cfg.patch_dim());
  for (const Image* img : images) {
    if (img->channels != cfg.channels || img->height != cfg.image_height || img->width != cfg.image_width) {
      throw ShapeError("image " + std::to_string(img->channels) + "x" + std::to_string(img->height) + "x" +
                       std::to_string(img->width) + " does not match encoder geometry");
    }
    auto p = patchify<T>(*img, cfg.patch);
    flat.insert(flat.end(), p.data().begin(), p.data().end());
  }
  auto patches = Tensor<T>::from({b * n, cfg.patch_dim()}, std::move(flat));
  auto tokens = concat_rows(params.visual.cls, linear(patches, params.visual.patch_proj));
  std::vector<std::size_t> order, pos;
  for (std::size_t i = 0; i < b; ++i) {
    order.push_back(0);
    pos.push_back(0);
    for (std::size_t k = 0; k < n; ++k) {
      order.push_back(1 + i * n + k);
      pos.push_back(k + 1);
    }
  }
  return add(gather_rows(tokens, order), gather_rows(params.visual.pos, pos));
}

// [B*(N+1) x H]; row b*(N+1) is image b's [CLS] state.
template <typename T>
Tensor<T> encode_images(const std::vector<const Image*>& images, const TriEncoderParams<T>& params) {
  auto z = embed_images(images, params);
  for (const auto& blk : params.visual.blocks) z = visual_block(blk, z, images.size(), params.config);
  return z;
}

template <typename T>
Tensor<T> encode_image(const Image& image, const TriEncoderParams<T>& params) {
  return encode_images<T>({&image}, params);
}

// Text states for a padded batch, plus the self-attention mask they were
// computed under (reused by the multimodal encoder).
template <typename T>
struct EncodedText {
  Tensor<T> states;  // [batch*len x H]
  std::size_t batch = 0;
  std::size_t len = 0;
  std::vector<T> mask;  // [batch x len x len]
};

template <typename T>
EncodedText<T> encode_texts(const std::vector<const TokenSequence*>& seqs, const std::vector<AttentionMaskKind>& kinds,
                            const TriEncoderParams<T>& params) {
  const auto& cfg = params.config;
  if (seqs.empty() || kinds.size() != seqs.size()) throw ShapeError("encode_text: batch/mask-kind count mismatch");
  std::size_t len = 0;
  for (const auto* s : seqs) len = std::max(len, s->length());
  if (len > cfg.max_positions()) {
    throw LengthError("text of length " + std::to_string(len) + " exceeds the " + std::to_string(cfg.max_positions()) +
                      " available positions");
  }
  EncodedText<T> out;
  out.batch = seqs.size();
  out.len = len;
  std::vector<std::size_t> ids, pos;
  out.mask.reserve(seqs.size() * len * len);
  for (std::size_t b = 0; b < seqs.size(); ++b) {
    const auto* s = seqs[b];
    std::vector<bool> visible(len, false);
    for (std::size_t i = 0; i < len; ++i) {
      const bool real = i < s->length();
      const int id = real ? s->ids[i] : tok::kPad;
      if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab_size) {
        throw IndexError("token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(cfg.vocab_size));
      }
      ids.push_back(static_cast<std::size_t>(id));
      pos.push_back(i);
      visible[i] = real && s->visible[i];
    }
    auto m = attention_mask_entries<T>(kinds[b], visible);
    out.mask.insert(out.mask.end(), m.begin(), m.end());
  }
  auto p = add(gather_rows(params.text.word_emb, ids), gather_rows(params.text.pos, pos));
  for (const auto& blk : params.text.blocks) p = text_block(blk, p, out.mask, out.batch, cfg);
  out.states = p;
  return out;
}

template <typename T>
Tensor<T> encode_text(const TokenSequence& seq, AttentionMaskKind kind, const TriEncoderParams<T>& params) {
  return encode_texts<T>({&seq}, {kind}, params).states;
}

// text: [B*L x H] under `mask`; visual: [B*(N+1) x H] aligned by sequence.
template <typename T>
Tensor<T> encode_multimodal(const Tensor<T>& text, const Tensor<T>& visual, const std::vector<T>& mask,
                            std::size_t batch, const TriEncoderParams<T>& params) {
  if (text.cols() != visual.cols()) {
    throw ShapeError("multimodal width mismatch: text " + shape_str(text.shape()) + ", visual " +
                     shape_str(visual.shape()));
  }
  Tensor<T> m = text;
  for (const auto& blk : params.multimodal.blocks) m = multimodal_block(blk, m, visual, mask, batch, params.config);
  return m;
}

template <typename T>
Tensor<T> encode_multimodal(const EncodedText<T>& text, const Tensor<T>& visual, const TriEncoderParams<T>& params) {
  return encode_multimodal(text.states, visual, text.mask, text.batch, params);
}

// Row indices selecting position `pos` of every sequence in a stacked batch.
inline std::vector<std::size_t> position_rows(std::size_t batch, std::size_t len, std::size_t pos = 0) {
  std::vector<std::size_t> r(batch);
  for (std::size_t b = 0; b < batch; ++b) r[b] = b * len + pos;
  return r;
}

// Rows of whole sequences `which` from a stacked batch with sequence length len.
inline std::vector<std::size_t> sequence_rows(const std::vector<std::size_t>& which, std::size_t len) {
  std::vector<std::size_t> r;
  r.reserve(which.size() * len);
  for (std::size_t w : which)
    for (std::size_t i = 0; i < len; ++i) r.push_back(w * len + i);
  return r;
}

}  // namespace vlmix
