#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace vlmix;
using vlmix::testing::lexicon_vocab;
using vlmix::testing::tiny_config;
using vlmix::testing::values;

namespace {

using P = TriEncoderParams<double>;

Image random_image(Rng& rng, const EncoderConfig& cfg) {
  Image img{cfg.channels, cfg.image_height, cfg.image_width,
            std::vector<float>(cfg.channels * cfg.image_height * cfg.image_width)};
  for (auto& v : img.pixels) v = static_cast<float>(uniform01(rng));
  return img;
}

TokenSequence random_tokens(Rng& rng, std::size_t len, std::size_t vocab) {
  std::vector<int> ids{tok::kCls};
  for (std::size_t i = 1; i < len; ++i)
    ids.push_back(tok::kFirstWord + static_cast<int>(uniform_index(rng, vocab - tok::kFirstWord)));
  return TokenSequence::from_ids(std::move(ids));
}

double max_row_diff(const Tensor<double>& a, const Tensor<double>& b, std::size_t row) {
  double d = 0;
  for (std::size_t c = 0; c < a.cols(); ++c) d = std::max(d, std::abs(a.at(row, c) - b.at(row, c)));
  return d;
}

TEST(Patchify, ShapesAndOrder) {
  Image one{1, 2, 2, {1, 2, 3, 4}};
  auto p = patchify<double>(one, 2);
  EXPECT_EQ(p.shape(), (Shape{1, 4}));
  EXPECT_EQ(values(p), (std::vector<double>{1, 2, 3, 4}));

  Image img{3, 32, 32, std::vector<float>(3 * 32 * 32)};
  EXPECT_EQ(patchify<double>(img, 8).shape(), (Shape{16, 192}));

  // 1x4x4 with P=2: the second patch is the top-right 2x2 block.
  Image g{1, 4, 4, {}};
  for (int i = 0; i < 16; ++i) g.pixels.push_back(static_cast<float>(i));
  auto q = patchify<double>(g, 2);
  EXPECT_EQ(std::vector<double>(q.data().begin() + 4, q.data().begin() + 8), (std::vector<double>{2, 3, 6, 7}));
  EXPECT_THROW(patchify<double>(g, 3), ShapeError);
}

TEST(Patchify, UnpatchifyRoundTripIsBitwise) {
  Rng rng(5);
  auto cfg = tiny_config();
  cfg.patch = 8;
  auto img = random_image(rng, cfg);
  auto back = unpatchify(patchify<float>(img, 8), 3, 32, 32, 8);
  EXPECT_EQ(back.pixels, img.pixels);
}

TEST(AttentionMask, Examples) {
  const double B = kBlocked;
  auto causal = build_attention_mask<double>(AttentionMaskKind::Causal, 3, {true, true, true});
  EXPECT_EQ(values(causal), (std::vector<double>{0, B, B, 0, 0, B, 0, 0, 0}));
  auto bi = build_attention_mask<double>(AttentionMaskKind::Bidirectional, 3, {true, true, true});
  EXPECT_EQ(values(bi), std::vector<double>(9, 0.0));
  auto padded = build_attention_mask<double>(AttentionMaskKind::Causal, 3, {true, true, false});
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(padded.at(i, 2), B);
  EXPECT_EQ(padded.at(1, 0), 0.0);
  auto bpad = build_attention_mask<double>(AttentionMaskKind::Bidirectional, 3, {true, false, true});
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(bpad.at(i, 1), B);
    EXPECT_EQ(bpad.at(i, 2), 0.0);
  }
  EXPECT_THROW(build_attention_mask<double>(AttentionMaskKind::Causal, 3, {true}), ShapeError);
}

TEST(EncodeImage, ShapeAndZeroDepth) {
  Rng rng(1);
  auto cfg = tiny_config();
  auto img = random_image(rng, cfg);
  auto params = init_params<double>(cfg, 3);
  NoGradGuard ng;
  EXPECT_EQ(encode_image(img, params).shape(), (Shape{cfg.num_patches() + 1, cfg.hidden}));

  cfg.visual_layers = 0;
  auto shallow = init_params<double>(cfg, 3);
  auto out = encode_image(img, shallow);
  // z0 by hand: [cls; patches V] + pos.
  auto patches = patchify<double>(img, cfg.patch);
  for (std::size_t c = 0; c < cfg.hidden; ++c)
    EXPECT_DOUBLE_EQ(out.at(0, c), shallow.visual.cls.at(0, c) + shallow.visual.pos.at(0, c));
  for (std::size_t n = 0; n < cfg.num_patches(); ++n)
    for (std::size_t c = 0; c < cfg.hidden; ++c) {
      double acc = 0;
      for (std::size_t k = 0; k < cfg.patch_dim(); ++k) acc += patches.at(n, k) * shallow.visual.patch_proj.at(k, c);
      EXPECT_NEAR(out.at(n + 1, c), acc + shallow.visual.pos.at(n + 1, c), 1e-12);
    }
}

TEST(EncodeImage, SwappingPatchesChangesOutput) {
  Rng rng(2);
  auto cfg = tiny_config();
  auto img = random_image(rng, cfg);
  auto params = init_params<double>(cfg, 4);
  auto swapped = unpatchify(
      [&] {
        auto p = patchify<double>(img, cfg.patch);
        for (std::size_t k = 0; k < p.cols(); ++k) std::swap(p.data()[k], p.data()[p.cols() + k]);
        return p;
      }(),
      cfg.channels, cfg.image_height, cfg.image_width, cfg.patch);
  NoGradGuard ng;
  auto a = encode_image(img, params), b = encode_image(swapped, params);
  EXPECT_GT(max_row_diff(a, b, 0), 1e-6);
  EXPECT_GT(max_row_diff(a, b, 1), 1e-6);
}

TEST(EncodeImage, RejectsWrongGeometry) {
  auto params = init_params<double>(tiny_config(), 0);
  Image small{3, 16, 16, std::vector<float>(3 * 16 * 16)};
  EXPECT_THROW(encode_image(small, params), ShapeError);
}

TEST(EncodeText, ZeroDepthReturnsEmbedding) {
  auto cfg = tiny_config();
  cfg.text_layers = 0;
  auto params = init_params<double>(cfg, 1);
  auto seq = tokenize("a red circle", lexicon_vocab());
  NoGradGuard ng;
  auto out = encode_text(seq, AttentionMaskKind::Causal, params);
  ASSERT_EQ(out.shape(), (Shape{seq.length(), cfg.hidden}));
  for (std::size_t i = 0; i < seq.length(); ++i)
    for (std::size_t c = 0; c < cfg.hidden; ++c)
      EXPECT_DOUBLE_EQ(out.at(i, c), params.text.word_emb.at(static_cast<std::size_t>(seq.ids[i]), c) +
                                         params.text.pos.at(i, c));
}

TEST(EncodeText, LengthLimit) {
  auto cfg = tiny_config();
  auto params = init_params<double>(cfg, 1);
  Rng rng(0);
  NoGradGuard ng;
  EXPECT_NO_THROW(encode_text(random_tokens(rng, cfg.max_positions(), cfg.vocab_size), AttentionMaskKind::Causal, params));
  EXPECT_THROW(encode_text(random_tokens(rng, cfg.max_positions() + 1, cfg.vocab_size), AttentionMaskKind::Causal, params),
               LengthError);
}

TEST(EncodeText, CausalPrefixInvariantBidirectionalNot) {
  auto cfg = tiny_config();
  cfg.text_layers = 2;
  auto params = init_params<double>(cfg, 7);
  Rng rng(8);
  NoGradGuard ng;
  for (int trial = 0; trial < 10; ++trial) {
    auto a = random_tokens(rng, 8, cfg.vocab_size);
    auto b = a;
    const std::size_t j = 1 + uniform_index(rng, 7);
    b.ids[j] = b.ids[j] == tok::kFirstWord ? tok::kFirstWord + 1 : tok::kFirstWord;
    auto ca = encode_text(a, AttentionMaskKind::Causal, params), cb = encode_text(b, AttentionMaskKind::Causal, params);
    for (std::size_t i = 0; i < j; ++i) EXPECT_LE(max_row_diff(ca, cb, i), 1e-6);
    EXPECT_GT(max_row_diff(ca, cb, j), 1e-6);
    auto ba = encode_text(a, AttentionMaskKind::Bidirectional, params);
    auto bb = encode_text(b, AttentionMaskKind::Bidirectional, params);
    EXPECT_GT(max_row_diff(ba, bb, 0), 1e-9);
  }
}

TEST(EncodeText, PaddingIsInvisible) {
  auto cfg = tiny_config();
  auto params = init_params<double>(cfg, 2);
  auto seq = tokenize("a red circle", lexicon_vocab());
  auto padded = seq;
  padded.pad_to(seq.length() + 3);
  NoGradGuard ng;
  for (auto kind : {AttentionMaskKind::Causal, AttentionMaskKind::Bidirectional}) {
    auto a = encode_text(seq, kind, params), b = encode_text(padded, kind, params);
    for (std::size_t i = 0; i < seq.length(); ++i) EXPECT_LE(max_row_diff(a, b, i), 1e-12);
  }
}

TEST(EncodeMultimodal, ZeroDepthAndInformationFlow) {
  auto cfg = tiny_config();
  auto params = init_params<double>(cfg, 9);
  Rng rng(10);
  auto img = random_image(rng, cfg);
  Image black{cfg.channels, cfg.image_height, cfg.image_width, std::vector<float>(img.pixels.size(), 0.f)};
  auto seq = tokenize("a red circle", lexicon_vocab());
  NoGradGuard ng;
  auto text = encode_texts<double>({&seq}, {AttentionMaskKind::Bidirectional}, params);
  auto m1 = encode_multimodal(text, encode_image(img, params), params);
  auto m0 = encode_multimodal(text, encode_image(black, params), params);
  EXPECT_GT(max_row_diff(m1, m0, 0), 1e-6);
  // Text states never see the image, so they are one computation for both.
  auto text_again = encode_texts<double>({&seq}, {AttentionMaskKind::Bidirectional}, params);
  EXPECT_EQ(values(text.states), values(text_again.states));

  cfg.multimodal_layers = 0;
  auto flat = init_params<double>(cfg, 9);
  auto passthrough = encode_multimodal(text, encode_image(img, flat), flat);
  EXPECT_EQ(values(passthrough), values(text.states));

  auto narrow = Tensor<double>::zeros({cfg.num_patches() + 1, cfg.hidden + 1});
  EXPECT_THROW(encode_multimodal(text.states, narrow, text.mask, 1, params), ShapeError);
}

TEST(EncodeMultimodal, CausalPrefixInvariantDespiteImage) {
  auto cfg = tiny_config();
  cfg.multimodal_layers = 2;
  auto params = init_params<double>(cfg, 11);
  Rng rng(12);
  auto img = random_image(rng, cfg);
  NoGradGuard ng;
  auto vis = encode_image(img, params);
  for (int trial = 0; trial < 10; ++trial) {
    auto a = random_tokens(rng, 7, cfg.vocab_size);
    auto b = a;
    const std::size_t j = 1 + uniform_index(rng, 6);
    b.ids[j] = b.ids[j] == tok::kFirstWord ? tok::kFirstWord + 1 : tok::kFirstWord;
    auto ma = encode_multimodal(encode_texts<double>({&a}, {AttentionMaskKind::Causal}, params), vis, params);
    auto mb = encode_multimodal(encode_texts<double>({&b}, {AttentionMaskKind::Causal}, params), vis, params);
    for (std::size_t i = 0; i < j; ++i) EXPECT_LE(max_row_diff(ma, mb, i), 1e-6);
    EXPECT_GT(max_row_diff(ma, mb, j), 1e-6);
  }
}

void zero_gains(P& p, const std::string& prefix) {
  p.for_each([&](const std::string& name, Tensor<double>& t, ParamRole role) {
    if (role == ParamRole::LayerNorm && name.starts_with(prefix) && name.ends_with(".gain"))
      std::fill(t.data().begin(), t.data().end(), 0.0);
  });
}

TEST(LayerNormPlacement, PreLnKeepsResidualPostLnEmitsBias) {
  auto cfg = tiny_config();
  auto params = init_params<double>(cfg, 13);
  zero_gains(params, "ve.");
  zero_gains(params, "te.");
  Rng rng(14);
  for (auto& v : params.text.blocks[0].ln2.bias.data()) v = standard_normal(rng);
  auto img = random_image(rng, cfg);
  auto seq = random_tokens(rng, 6, cfg.vocab_size);
  NoGradGuard ng;

  // With zero gains, LN emits its bias. The visual block then adds attention
  // and MLP outputs of constant rows; the biases are zero, so both vanish.
  auto z0 = embed_images<double>({&img}, params);
  auto z = encode_image(img, params);
  for (std::size_t r = 0; r < z.rows(); ++r) EXPECT_LE(max_row_diff(z, z0, r), 1e-12);

  auto p = encode_text(seq, AttentionMaskKind::Bidirectional, params);
  for (std::size_t r = 0; r < p.rows(); ++r)
    for (std::size_t c = 0; c < cfg.hidden; ++c) EXPECT_DOUBLE_EQ(p.at(r, c), params.text.blocks[0].ln2.bias[c]);
}

TEST(InitParams, RolesFollowTheScheme) {
  auto params = init_params<double>(tiny_config(), 0);
  params.for_each([](const std::string& name, const Tensor<double>& t, ParamRole role) {
    for (double v : t.data()) {
      switch (role) {
        case ParamRole::Bias: EXPECT_EQ(v, 0.0) << name; break;
        case ParamRole::LayerNorm: EXPECT_EQ(v, name.ends_with(".gain") ? 1.0 : 0.0) << name; break;
        default: EXPECT_LE(std::abs(v), 2 * 0.02 + 1e-12) << name; break;
      }
    }
  });
  auto bad = tiny_config();
  bad.heads = 3;
  EXPECT_THROW(init_params<double>(bad, 0), ValidationError);
}

}  // namespace
