#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace vlmix;
using vlmix::testing::gradcheck;
using vlmix::testing::lexicon_vocab;
using vlmix::testing::random_tensor;
using vlmix::testing::tiny_config;

namespace {

using D = Tensor<double>;

D identity(std::size_t n) {
  auto t = D::zeros({n, n}, true);
  for (std::size_t i = 0; i < n; ++i) t.data()[i * n + i] = 1;
  return t;
}

// Independent reference: -log softmax(row)[target] in plain doubles.
double ref_ce(const std::vector<double>& row, int target) {
  double mx = *std::max_element(row.begin(), row.end()), z = 0;
  for (double v : row) z += std::exp(v - mx);
  return -(row[static_cast<std::size_t>(target)] - mx - std::log(z));
}

TEST(ItcLoss, SingleCandidateIsZero) {
  Rng rng(0);
  ContrastiveHead<double> head{random_tensor({4, 3}, rng), random_tensor({4, 3}, rng)};
  auto l = itc_loss(random_tensor({1, 4}, rng), random_tensor({1, 4}, rng), head, 0.07);
  EXPECT_NEAR(l.item(), 0.0, 1e-12);
}

TEST(ItcLoss, OrthogonalPairsMatchDirectFormula) {
  ContrastiveHead<double> head{identity(2), identity(2)};
  auto x = D::from({2, 2}, {3, 0, 0, 0.5});
  auto y = D::from({2, 2}, {2, 0, 0, 7});
  // S = I after normalization; each direction contributes -log(e / (e + 1)).
  const double per = -std::log(std::exp(1.0) / (std::exp(1.0) + std::exp(0.0)));
  EXPECT_NEAR(itc_loss(x, y, head, 1.0).item(), 2 * per, 1e-12);
}

TEST(ItcLoss, BatchPermutationInvariant) {
  Rng rng(1);
  ContrastiveHead<double> head{random_tensor({6, 4}, rng), random_tensor({6, 4}, rng)};
  auto x = random_tensor({5, 6}, rng), y = random_tensor({5, 6}, rng);
  const std::vector<std::size_t> perm{3, 0, 4, 1, 2};
  const double a = itc_loss(x, y, head, 0.07).item();
  const double b = itc_loss(gather_rows(x, perm), gather_rows(y, perm), head, 0.07).item();
  EXPECT_NEAR(a, b, 1e-10);
}

TEST(ItcLoss, DecreasesAsMatchedPairsAlign) {
  Rng rng(2);
  ContrastiveHead<double> head{identity(3), identity(3)};
  auto x = random_tensor({3, 3}, rng), y = random_tensor({3, 3}, rng);
  double prev = itc_loss(x, y, head, 0.5).item();
  // Move every text toward its own image: diagonal similarities rise.
  for (int step = 1; step <= 5; ++step) {
    const double t = 0.2 * step;
    std::vector<double> mixed(9);
    for (std::size_t i = 0; i < 9; ++i) mixed[i] = (1 - t) * y.data()[i] + t * x.data()[i];
    const double cur = itc_loss(x, D::from({3, 3}, mixed), head, 0.5).item();
    EXPECT_LT(cur, prev);
    prev = cur;
  }
}

TEST(ItcLoss, RejectsBadInputs) {
  ContrastiveHead<double> head{identity(2), identity(2)};
  auto x = D::zeros({2, 2});
  EXPECT_THROW(itc_loss(x, D::zeros({3, 2}), head, 0.07), ShapeError);
  EXPECT_THROW(itc_loss(D::zeros({0, 2}), D::zeros({0, 2}), head, 0.07), ShapeError);
  EXPECT_THROW(itc_loss(x, x, head, 0.0), ValidationError);
}

TEST(ItcLoss, GradientMatchesFiniteDifferences) {
  Rng rng(3);
  ContrastiveHead<double> head{random_tensor({5, 3}, rng), random_tensor({5, 3}, rng)};
  auto x = random_tensor({4, 5}, rng), y = random_tensor({4, 5}, rng);
  EXPECT_LT(gradcheck({x, y, head.image_proj, head.text_proj}, [&] { return itc_loss(x, y, head, 0.3); }), 1e-6);
}

TEST(MlmLoss, EmptyUniformAndDecomposition) {
  const std::size_t v = 9;
  MlmHead<double> zero{D::zeros({4, v}), D::zeros({v})};
  auto states = D::zeros({5, 4});
  EXPECT_EQ(mlm_loss(states, {}, {}, zero).item(), 0.0);
  EXPECT_NEAR(mlm_loss(states, {2}, {4}, zero).item(), std::log(static_cast<double>(v)), 1e-12);

  Rng rng(4);
  MlmHead<double> head{random_tensor({4, v}, rng), random_tensor({v}, rng)};
  auto s = random_tensor({5, 4}, rng);
  const std::vector<std::size_t> rows{0, 3, 4};
  const std::vector<int> targets{1, 8, 5};
  double expect = 0;
  for (std::size_t k = 0; k < rows.size(); ++k) {
    std::vector<double> logits(v);
    for (std::size_t j = 0; j < v; ++j) {
      logits[j] = head.b[j];
      for (std::size_t c = 0; c < 4; ++c) logits[j] += s.at(rows[k], c) * head.w.at(c, j);
    }
    expect += ref_ce(logits, targets[k]);
  }
  EXPECT_NEAR(mlm_loss(s, rows, targets, head).item(), expect, 1e-10);
  EXPECT_THROW(mlm_loss(s, rows, {1}, head), ShapeError);
}

TEST(ItmLoss, UniformSeparatingAndDecomposition) {
  ItmHead<double> zero{D::zeros({3, 2}), D::zeros({2})};
  auto cls = D::zeros({5, 3});
  EXPECT_NEAR(itm_loss(cls, {0, 1, 1, 0, 1}, zero).item(), 5 * std::log(2.0), 1e-12);

  ItmHead<double> sure{D::zeros({3, 2}), D::from({2}, {-40, 40})};
  EXPECT_LT(itm_loss(cls, {1, 1, 1, 1, 1}, sure).item(), 1e-12);

  Rng rng(5);
  ItmHead<double> head{random_tensor({3, 2}, rng), random_tensor({2}, rng)};
  auto c4 = random_tensor({4, 3}, rng);
  const std::vector<int> labels{1, 0, 0, 1};
  double expect = 0;
  for (std::size_t i = 0; i < 4; ++i) {
    std::vector<double> logits(2);
    for (std::size_t j = 0; j < 2; ++j) {
      logits[j] = head.b[j];
      for (std::size_t k = 0; k < 3; ++k) logits[j] += c4.at(i, k) * head.w.at(k, j);
    }
    expect += ref_ce(logits, labels[i]);
  }
  EXPECT_NEAR(itm_loss(c4, labels, head).item(), expect, 1e-10);
  EXPECT_THROW(itm_loss(c4, {0, 1, 2, 0}, head), IndexError);
}

TEST(MaskMixPolicy, EmpiricalFraction) {
  Rng rng(6);
  std::size_t causal = 0;
  for (int i = 0; i < 10000; ++i) causal += MaskMixPolicy{0.5}.draw(rng) == AttentionMaskKind::Causal;
  EXPECT_NEAR(causal / 10000.0, 0.5, 0.02);
  EXPECT_THROW(MaskMixPolicy{1.5}.draw(rng), ValidationError);
}

class PretrainStepTest : public ::testing::Test {
 protected:
  void SetUp() override {
    corpus = generate_corpus(lexicon_vocab(), 1, 4);
    for (const auto& ex : corpus.examples) batch.push_back(&ex);
  }
  Corpus corpus;
  std::vector<const PairedExample*> batch;
};

TEST_F(PretrainStepTest, PolicyExtremesInAuditLog) {
  auto params = init_params<double>(tiny_config(), 0);
  Rng rng(7);
  for (double p : {0.0, 1.0}) {
    for (int rep = 0; rep < 5; ++rep) {
      auto res = pretrain_step(batch, params, MaskMixPolicy{p}, rng);
      for (auto k : res.mlm_kinds)
        EXPECT_EQ(k, p == 0.0 ? AttentionMaskKind::Bidirectional : AttentionMaskKind::Causal);
      EXPECT_EQ(res.metrics.causal_fraction, p);
      EXPECT_NEAR(res.loss.item(), res.metrics.total(), 1e-9);
    }
  }
  std::vector<const PairedExample*> one{batch[0]};
  EXPECT_THROW(pretrain_step(one, params, MaskMixPolicy{}, rng), ValidationError);
}

TEST_F(PretrainStepTest, CausalMlmPredictionIgnoresLaterTokens) {
  auto cfg = tiny_config();
  auto params = init_params<double>(cfg, 8);
  NoGradGuard ng;
  auto vis = encode_image(batch[0]->image, params);
  auto a = batch[0]->caption;
  a.mask_positions = {2};
  a.targets = {a.ids[2]};
  a.ids[2] = tok::kMask;
  auto b = a;
  for (std::size_t j = 3; j < b.length(); ++j) b.ids[j] = tok::kFirstWord;
  auto fa = mlm_forward<double>(vis, {0}, {&a}, {AttentionMaskKind::Causal}, params);
  auto fb = mlm_forward<double>(vis, {0}, {&b}, {AttentionMaskKind::Causal}, params);
  for (std::size_t j = 0; j < fa.logits.cols(); ++j) EXPECT_NEAR(fa.logits.at(0, j), fb.logits.at(0, j), 1e-9);
  auto ga = mlm_forward<double>(vis, {0}, {&a}, {AttentionMaskKind::Bidirectional}, params);
  auto gb = mlm_forward<double>(vis, {0}, {&b}, {AttentionMaskKind::Bidirectional}, params);
  double diff = 0;
  for (std::size_t j = 0; j < ga.logits.cols(); ++j) diff = std::max(diff, std::abs(ga.logits.at(0, j) - gb.logits.at(0, j)));
  EXPECT_GT(diff, 1e-9);
}

TEST_F(PretrainStepTest, TotalLossGradientMatchesFiniteDifferences) {
  auto params = init_params<double>(tiny_config(), 9);
  // Larger weights than the default init so every path carries signal.
  Rng noise(10);
  params.for_each([&](const std::string&, D& t, ParamRole role) {
    if (role == ParamRole::Weight || role == ParamRole::Embedding)
      for (auto& v : t.data()) v = 0.3 * standard_normal(noise);
  });
  const Rng fixed(11);
  auto loss = [&] {
    Rng r = fixed;
    return pretrain_step(batch, params, MaskMixPolicy{0.5}, r).loss;
  };
  std::vector<D> inputs;
  std::vector<std::vector<std::size_t>> entries;
  Rng pick(12);
  params.for_each([&](const std::string& name, D& t, ParamRole) {
    if (name.find(".layer0.mlp.w1") == std::string::npos && !name.starts_with("head.") && name != "ve.patch_proj" &&
        name != "te.word_emb")
      return;
    inputs.push_back(t);
    std::vector<std::size_t> idx;
    for (int k = 0; k < 10; ++k) idx.push_back(uniform_index(pick, t.numel()));
    entries.push_back(idx);
  });
  // Word embedding rows of tokens that actually occur.
  const auto emb = std::find_if(inputs.begin(), inputs.end(),
                                [&](const D& t) { return t.rows() == params.text.word_emb.rows(); }) - inputs.begin();
  entries[static_cast<std::size_t>(emb)].clear();
  for (int k = 0; k < 10; ++k)
    entries[static_cast<std::size_t>(emb)].push_back(static_cast<std::size_t>(batch[0]->caption.ids[1 + k % 3]) *
                                                        params.config.hidden + static_cast<std::size_t>(k));
  EXPECT_LT(gradcheck(inputs, loss, entries, 1e-5), 1e-3);
}

}  // namespace
