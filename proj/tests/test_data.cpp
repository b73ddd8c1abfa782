#include <gtest/gtest.h>

#include <filesystem>
#include <map>
#include <set>

#include "test_util.hpp"

using namespace vlmix;
using vlmix::testing::lexicon_vocab;

namespace {

TEST(Vocabulary, SpecialsFirstThenSortedWords) {
  auto v = Vocabulary::build({"red", "circle", "red"});
  EXPECT_EQ(v.size(), static_cast<std::size_t>(tok::kFirstWord) + 2);
  EXPECT_EQ(v.id("[PAD]"), tok::kPad);
  EXPECT_EQ(v.id("[CLS]"), tok::kCls);
  EXPECT_EQ(v.id("[SEP]"), tok::kSep);
  EXPECT_EQ(v.id("[MASK]"), tok::kMask);
  EXPECT_EQ(v.id("[CTX_0]"), tok::kCtx0);
  EXPECT_EQ(v.id("circle"), tok::kFirstWord);
  EXPECT_EQ(v.id("red"), tok::kFirstWord + 1);
  EXPECT_THROW(v.id("blue"), UnknownTokenError);
}

TEST(Vocabulary, LexiconMatchesEverythingTheGeneratorsEmit) {
  const auto& v = lexicon_vocab();
  std::set<std::string> emitted;
  auto add = [&](const std::string& text) {
    for (const auto& w : split_words(text)) emitted.insert(w);
  };
  auto corpus = generate_corpus(v, 3, 2000);
  for (const auto& ex : corpus.examples) {
    add(ex.caption_text);
    if (ex.qa) add(ex.qa->question + " " + ex.qa->answer);
    if (ex.entailment) add(ex.entailment->hypothesis + " " + label_name(ex.entailment->label));
  }
  for (auto t : {PromptTask::Vqa, PromptTask::Classification, PromptTask::Entailment}) add(natural_prompt(t));
  for (auto l : {EntailmentLabel::Entailment, EntailmentLabel::Neutral, EntailmentLabel::Contradiction})
    add(label_name(l));
  const auto words = v.words();
  EXPECT_EQ(emitted, std::set<std::string>(words.begin(), words.end()));
  EXPECT_EQ(v.size(), emitted.size() + 4 + tok::kNumCtx);
}

TEST(Tokenize, EmptyAndCounts) {
  const auto& v = lexicon_vocab();
  EXPECT_EQ(tokenize("", v).ids, (std::vector<int>{tok::kCls, tok::kSep}));
  EXPECT_EQ(tokenize("a red circle", v).length(), 5u);
  EXPECT_THROW(tokenize("a purple elephant", v), UnknownTokenError);
}

TEST(Tokenize, RoundTripOverGeneratedCaptions) {
  const auto& v = lexicon_vocab();
  auto corpus = generate_corpus(v, 11, 1000);
  for (const auto& ex : corpus.examples) EXPECT_EQ(detokenize(tokenize(ex.caption_text, v), v), ex.caption_text);
}

TEST(RenderScene, EmptySceneIsBackground) {
  const auto img = render_scene({});
  EXPECT_EQ(img.pixels.size(), 3u * 32 * 32);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < 32 * 32; ++i) EXPECT_EQ(img.pixels[c * 1024 + i], kBackground[c]);
}

TEST(RenderScene, RedSquareFillsItsCellInterior) {
  SyntheticScene s;
  s.objects.push_back({ShapeKind::Square, Color::Red, 0, 0});
  const auto img = render_scene(s);
  using S = SyntheticScene;
  for (std::size_t y = 0; y < S::kCanvas; ++y) {
    for (std::size_t x = 0; x < S::kCanvas; ++x) {
      const bool inside = y >= S::kMargin && y < S::kCell - S::kMargin && x >= S::kMargin && x < S::kCell - S::kMargin;
      for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(img.at(c, y, x), inside ? kPalette[0][c] : kBackground[c]);
    }
  }
  EXPECT_EQ(render_scene(s), img);
}

TEST(RenderScene, RejectsOverlapsAndOutOfRange) {
  SyntheticScene s;
  s.objects.push_back({ShapeKind::Square, Color::Red, 0, 0});
  s.objects.push_back({ShapeKind::Circle, Color::Blue, 0, 0});
  EXPECT_THROW(render_scene(s), ValidationError);
  SyntheticScene t;
  t.objects.push_back({ShapeKind::Square, Color::Red, 2, 0});
  EXPECT_THROW(render_scene(t), ValidationError);
}

TEST(Corpus, DeterministicPerSeed) {
  const auto& v = lexicon_vocab();
  auto a = generate_corpus(v, 7, 10), b = generate_corpus(v, 7, 10), c = generate_corpus(v, 8, 10);
  ASSERT_EQ(a.examples.size(), 10u);
  bool differs = false;
  for (std::size_t i = 0; i < 10; ++i) {
    EXPECT_EQ(a.examples[i].image, b.examples[i].image);
    EXPECT_EQ(a.examples[i].caption_text, b.examples[i].caption_text);
    differs = differs || !(a.examples[i].scene == c.examples[i].scene);
  }
  EXPECT_TRUE(differs);
}

TEST(Corpus, EveryAnnotationAgreesWithItsScene) {
  const auto& v = lexicon_vocab();
  auto corpus = generate_corpus(v, 5, 500);
  for (const auto& ex : corpus.examples) {
    EXPECT_TRUE(check_caption(ex.scene, ex.caption_text)) << ex.caption_text;
    EXPECT_EQ(ex.image, render_scene(ex.scene));
    if (ex.qa) EXPECT_EQ(answer_question(ex.scene, ex.qa->question), ex.qa->answer) << ex.qa->question;
    if (ex.entailment) EXPECT_EQ(judge_hypothesis(ex.scene, ex.entailment->hypothesis), ex.entailment->label);
    if (ex.class_label) {
      ASSERT_EQ(ex.scene.objects.size(), 1u);
      EXPECT_EQ(*ex.class_label, object_phrase(ex.scene.objects[0]));
    }
  }
}

TEST(Corpus, CaptionCheckerRejectsWrongClaims) {
  SyntheticScene s;
  s.objects.push_back({ShapeKind::Circle, Color::Red, 0, 0});
  s.objects.push_back({ShapeKind::Square, Color::Blue, 1, 0});
  EXPECT_TRUE(check_caption(s, "a red circle above a blue square"));
  EXPECT_FALSE(check_caption(s, "a red circle left of a blue square"));
  EXPECT_FALSE(check_caption(s, "a blue square above a red circle"));
  EXPECT_FALSE(check_caption(s, "a green circle above a blue square"));
}

TEST(Corpus, TaskMixWithoutQaHasNoQuestions) {
  auto corpus = generate_corpus(lexicon_vocab(), 1, 50, TaskMix{0.25, 0.0, 1.0});
  for (const auto& ex : corpus.examples) EXPECT_FALSE(ex.qa.has_value());
}

TEST(MlmBatch, MaskProbabilityExtremes) {
  auto corpus = generate_corpus(lexicon_vocab(), 2, 20);
  std::vector<TokenSequence> seqs;
  for (const auto& ex : corpus.examples) seqs.push_back(ex.caption);
  Rng rng = stream_rng(0, 0);
  for (const auto& m : make_mlm_batch(seqs, 0.0, rng)) EXPECT_TRUE(m.mask_positions.empty());
  const auto all = make_mlm_batch(seqs, 1.0, rng);
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    for (std::size_t p = 0; p < seqs[i].length(); ++p) {
      const bool content = is_maskable(seqs[i].ids[p]);
      EXPECT_EQ(all[i].ids[p] == tok::kMask, content);
      if (content) EXPECT_NE(std::find(all[i].mask_positions.begin(), all[i].mask_positions.end(), p),
                             all[i].mask_positions.end());
    }
    for (std::size_t k = 0; k < all[i].mask_positions.size(); ++k)
      EXPECT_EQ(all[i].targets[k], seqs[i].ids[all[i].mask_positions[k]]);
  }
  EXPECT_THROW(make_mlm_batch(seqs, 1.5, rng), ValidationError);
}

TEST(MlmBatch, EmpiricalRateConcentrates) {
  auto corpus = generate_corpus(lexicon_vocab(), 4, 2000);
  std::vector<TokenSequence> seqs;
  for (const auto& ex : corpus.examples) seqs.push_back(ex.caption);
  Rng rng = stream_rng(1, 0);
  std::size_t masked = 0, total = 0;
  for (const auto& m : make_mlm_batch(seqs, 0.15, rng)) masked += m.mask_positions.size();
  for (const auto& s : seqs)
    for (int id : s.ids) total += is_maskable(id);
  ASSERT_GE(total, 10000u);
  EXPECT_NEAR(static_cast<double>(masked) / static_cast<double>(total), 0.15, 0.01);
}

TEST(ItmBatch, PairsAndLabels) {
  auto corpus = generate_corpus(lexicon_vocab(), 6, 2);
  Rng rng = stream_rng(2, 0);
  const auto pairs = make_itm_batch(corpus.examples, rng);
  ASSERT_EQ(pairs.size(), 4u);
  std::size_t ones = 0;
  for (const auto& p : pairs) {
    ones += p.label;
    if (p.label == 1) EXPECT_EQ(p.image, p.text);
    else EXPECT_NE(p.image, p.text);
  }
  EXPECT_EQ(ones, 2u);
}

TEST(ItmBatch, SwapDirectionIsBalanced) {
  auto corpus = generate_corpus(lexicon_vocab(), 6, 16);
  Rng rng = stream_rng(3, 0);
  std::size_t image_swaps = 0, negatives = 0;
  for (int it = 0; it < 200; ++it) {
    for (const auto& p : make_itm_batch(corpus.examples, rng)) {
      if (p.label) continue;
      ++negatives;
      image_swaps += p.image_swapped;
    }
  }
  EXPECT_NEAR(static_cast<double>(image_swaps) / static_cast<double>(negatives), 0.5, 0.05);
}

TEST(AnswerLists, HistogramAndDomainSplit) {
  auto corpus = generate_corpus(lexicon_vocab(), 9, 300);
  std::map<std::string, std::size_t> hist;
  for (const auto& ex : corpus.examples)
    if (ex.qa) ++hist[ex.qa->answer];
  const auto lists = build_answer_lists(corpus.examples, static_cast<int>(hist.size()));
  EXPECT_EQ(lists.counts, hist);
  for (std::size_t i = 1; i < lists.inventory.size(); ++i)
    EXPECT_GE(hist[lists.inventory[i - 1]], hist[lists.inventory[i]]);
  for (const auto& ex : corpus.examples)
    if (ex.qa) EXPECT_TRUE(lists.is_in_domain(ex.qa->answer));
  EXPECT_THROW(build_answer_lists(corpus.examples, 0), ValidationError);
  const auto small = build_answer_lists(corpus.examples, 3);
  EXPECT_EQ(small.in_domain.size(), 3u);
}

TEST(CorpusFiles, WriteReadRoundTrip) {
  const auto& v = lexicon_vocab();
  auto corpus = generate_corpus(v, 12, 25);
  const auto dir = std::filesystem::temp_directory_path() / "vlmix_corpus_rt";
  std::filesystem::remove_all(dir);
  write_corpus(dir, corpus, v);
  const auto loaded = read_corpus(dir);
  ASSERT_EQ(loaded.corpus.examples.size(), corpus.examples.size());
  EXPECT_EQ(loaded.vocab.words(), v.words());
  for (std::size_t i = 0; i < corpus.examples.size(); ++i) {
    const auto& a = corpus.examples[i];
    const auto& b = loaded.corpus.examples[i];
    EXPECT_EQ(a.scene, b.scene);
    EXPECT_EQ(a.image, b.image);
    EXPECT_EQ(a.caption.ids, b.caption.ids);
    EXPECT_EQ(a.qa.has_value(), b.qa.has_value());
    if (a.qa) EXPECT_EQ(a.qa->answer, b.qa->answer);
    EXPECT_EQ(a.class_label, b.class_label);
  }
  std::filesystem::remove_all(dir);
  EXPECT_THROW(read_corpus(dir), IoError);
}

}  // namespace
