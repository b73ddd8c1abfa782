#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace vlmix;
using vlmix::testing::lexicon_vocab;
using vlmix::testing::tiny_config;

namespace {

TokenSequence cls_prefix() { return TokenSequence::from_ids({tok::kCls}); }

TEST(Decode, BeamOneIsGreedy) {
  auto params = init_params<double>(tiny_config(), 1);
  auto corpus = generate_corpus(lexicon_vocab(), 1, 5);
  for (const auto& ex : corpus.examples) {
    DecodeConfig cfg;
    cfg.beam_size = 1;
    cfg.max_len = 8;
    const auto beam = decode(ex.image, cls_prefix(), params, cfg);
    const auto greedy = greedy_decode(ex.image, cls_prefix(), params, 8);
    EXPECT_EQ(beam.tokens, greedy.tokens);
    EXPECT_NEAR(beam.log_prob, greedy.log_prob, 1e-12);
  }
}

TEST(Decode, OnlyDecodableTokensAndDeterministic) {
  auto params = init_params<double>(tiny_config(), 2);
  // Push the special tokens to the top of the MLM head so the filter matters.
  for (int id : {tok::kPad, tok::kCls, tok::kMask, tok::kCtx0}) params.mlm.b.data()[static_cast<std::size_t>(id)] = 50;
  auto corpus = generate_corpus(lexicon_vocab(), 2, 3);
  for (const auto& ex : corpus.examples) {
    DecodeConfig cfg;
    cfg.beam_size = 3;
    cfg.max_len = 6;
    const auto r = decode(ex.image, cls_prefix(), params, cfg);
    for (int id : r.tokens) EXPECT_TRUE(id == tok::kSep || id >= tok::kFirstWord) << id;
    EXPECT_EQ(decode(ex.image, cls_prefix(), params, cfg).tokens, r.tokens);
  }
}

TEST(Decode, LargerBeamsDoNotLoseLogProbOnRandomModels) {
  auto corpus = generate_corpus(lexicon_vocab(), 3, 4);
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    auto params = init_params<double>(tiny_config(), seed);
    for (auto& v : params.mlm.w.data()) v *= 40;
    for (const auto& ex : corpus.examples) {
      double prev = -1e300;
      for (std::size_t b : {1, 2, 4}) {
        DecodeConfig cfg;
        cfg.beam_size = b;
        cfg.max_len = 4;
        const auto r = decode(ex.image, cls_prefix(), params, cfg);
        EXPECT_GE(r.log_prob, prev - 1e-12) << "beam " << b;
        prev = r.log_prob;
      }
    }
  }
}

TEST(Decode, RejectsBadConfig) {
  auto params = init_params<double>(tiny_config(), 0);
  auto corpus = generate_corpus(lexicon_vocab(), 0, 1);
  DecodeConfig zero;
  zero.beam_size = 0;
  EXPECT_THROW(decode(corpus.examples[0].image, cls_prefix(), params, zero), ValidationError);
  EXPECT_THROW(decode(corpus.examples[0].image, TokenSequence{}, params), ValidationError);
}

TEST(Decode, OverfitCaptionIsReproduced) {
  auto corpus = generate_corpus(lexicon_vocab(), 4, 1);
  const auto& ex = corpus.examples[0];
  auto cfg = tiny_config();
  cfg.hidden = 16;
  auto params = init_params<double>(cfg, 4);
  FinetuneSpec spec;
  spec.tpl = make_template(PromptTask::Captioning);
  spec.steps = 80;
  spec.optimizer.lr = 1e-2;
  finetune(params, corpus.examples, lexicon_vocab(), spec);
  const auto r = greedy_decode(ex.image, cls_prefix(), params);
  EXPECT_TRUE(r.finished);
  EXPECT_EQ(join_words(strip_sep(r.tokens), lexicon_vocab()), ex.caption_text);
}

class RetrievalTest : public ::testing::Test {
 protected:
  void SetUp() override {
    corpus = generate_corpus(lexicon_vocab(), 5, 6);
    for (const auto& ex : corpus.examples) {
      images.push_back(&ex.image);
      texts.push_back(&ex.caption);
    }
  }
  Corpus corpus;
  std::vector<const Image*> images;
  std::vector<const TokenSequence*> texts;
};

// Matching probability of one pair computed on its own.
double lone_itm(const Image& img, const TokenSequence& txt, const TriEncoderParams<double>& params) {
  NoGradGuard ng;
  auto text = encode_texts<double>({&txt}, {AttentionMaskKind::Bidirectional}, params);
  auto m = encode_multimodal(text, encode_image(img, params), params);
  auto logits = linear(gather_rows(m, {0}), params.itm.w, params.itm.b);
  return 1.0 / (1.0 + std::exp(logits.at(0, 0) - logits.at(0, 1)));
}

TEST_F(RetrievalTest, FullRerankEqualsExhaustiveMatchingOrder) {
  auto params = init_params<double>(tiny_config(), 6);
  for (auto& v : params.itm.w.data()) v *= 50;
  RetrievalConfig rc;
  rc.top_k = texts.size();
  const auto out = retrieve(images, texts, RetrievalDirection::ImageToText, params, rc);
  ASSERT_TRUE(out.warnings.empty());
  const auto sim = encode_for_retrieval(images, texts, params).similarity;
  for (std::size_t q = 0; q < images.size(); ++q) {
    std::vector<std::size_t> order(texts.size());
    std::iota(order.begin(), order.end(), 0);
    std::vector<double> p;
    for (auto t : order) p.push_back(lone_itm(*images[q], *texts[t], params));
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return rerank_before(p[a], sim[q * texts.size() + a], a, p[b], sim[q * texts.size() + b], b);
    });
    EXPECT_EQ(out.lists[q].items, order);
    for (std::size_t i = 0; i < order.size(); ++i) EXPECT_NEAR(out.lists[q].stage2[i], p[order[i]], 1e-9);
  }
}

TEST_F(RetrievalTest, TopKClampAndTail) {
  auto params = init_params<double>(tiny_config(), 7);
  RetrievalConfig rc;
  rc.top_k = 100;
  auto out = retrieve(images, texts, RetrievalDirection::TextToImage, params, rc);
  EXPECT_EQ(out.warnings.size(), 1u);
  rc.top_k = 2;
  out = retrieve(images, texts, RetrievalDirection::TextToImage, params, rc);
  for (const auto& l : out.lists) {
    ASSERT_EQ(l.items.size(), images.size());
    for (std::size_t i = 2; i < l.items.size(); ++i) {
      EXPECT_TRUE(std::isnan(l.stage2[i]));
      if (i > 2) EXPECT_GE(l.stage1[i - 1], l.stage1[i]);
    }
  }
  rc.top_k = 0;
  EXPECT_THROW(retrieve(images, texts, RetrievalDirection::TextToImage, params, rc), ValidationError);
}

TEST_F(RetrievalTest, GalleryPermutationPermutesResults) {
  auto params = init_params<double>(tiny_config(), 8);
  RetrievalConfig rc;
  rc.top_k = 3;
  const std::vector<std::size_t> perm{4, 2, 0, 5, 1, 3};
  std::vector<const TokenSequence*> shuffled;
  for (auto i : perm) shuffled.push_back(texts[i]);
  const auto a = retrieve(images, texts, RetrievalDirection::ImageToText, params, rc);
  const auto b = retrieve(images, shuffled, RetrievalDirection::ImageToText, params, rc);
  for (std::size_t q = 0; q < images.size(); ++q) {
    std::vector<std::size_t> mapped;
    for (auto i : b.lists[q].items) mapped.push_back(perm[i]);
    EXPECT_EQ(mapped, a.lists[q].items);
  }
}

TEST_F(RetrievalTest, OverfitModelRanksTheMatchFirst) {
  auto tc = vlmix::testing::tiny_train_config();
  tc.encoder.hidden = 16;
  tc.batch_size = images.size();
  tc.optimizer.lr = 5e-3;
  tc.optimizer.warmup_steps = 20;
  auto state = init_training<double>(tc, 10);
  pretrain(state, corpus.examples, 1000);
  const auto gt = caption_ground_truth(corpus.examples);
  for (auto dir : {RetrievalDirection::ImageToText, RetrievalDirection::TextToImage}) {
    const auto out = retrieve(images, texts, dir, state.params, tc.retrieval);
    EXPECT_EQ(recall_at_k(ranked_items(out), gt, 1), 1.0);
  }
}

TEST(Recall, HandCases) {
  const std::vector<std::vector<std::size_t>> gt{{0}, {1}, {2}};
  EXPECT_EQ(recall_at_k({{0, 1, 2}, {1, 0, 2}, {2, 1, 0}}, gt, 1), 1.0);
  std::vector<std::vector<std::size_t>> adversarial, gt20;
  for (std::size_t q = 0; q < 20; ++q) {
    std::vector<std::size_t> r;
    for (std::size_t i = 0; i < 20; ++i)
      if (i != q) r.push_back(i);
    r.push_back(q);
    adversarial.push_back(r);
    gt20.push_back({q});
  }
  EXPECT_EQ(recall_at_k(adversarial, gt20, 10), 0.0);
  EXPECT_EQ(recall_at_k(adversarial, gt20, 20), 1.0);
  EXPECT_NEAR(recall_at_k({{1, 0}, {1, 0}}, {{0}, {0, 1}}, 1), 0.5, 1e-12);
  EXPECT_THROW(recall_at_k(adversarial, gt20, 0), ValidationError);
  EXPECT_THROW(recall_at_k(adversarial, gt, 1), ShapeError);
}

TEST(Recall, RandomRankingsAverageOneInTen) {
  Rng rng(9);
  std::vector<std::vector<std::size_t>> rankings, gt;
  for (int t = 0; t < 1000; ++t) {
    std::vector<std::size_t> r(10);
    std::iota(r.begin(), r.end(), 0);
    shuffle(r.begin(), r.end(), rng);
    rankings.push_back(r);
    gt.push_back({0});
  }
  EXPECT_NEAR(recall_at_k(rankings, gt, 1), 0.1, 0.03);
}

}  // namespace
