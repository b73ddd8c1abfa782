#pragma once

// Training loops, evaluators and the linear-classifier baseline.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include "vlmix/bleu.hpp"
#include "vlmix/checkpoint.hpp"
#include "vlmix/config.hpp"
#include "vlmix/corpus.hpp"
#include "vlmix/encoders.hpp"
#include "vlmix/generate.hpp"
#include "vlmix/objectives.hpp"
#include "vlmix/optimizer.hpp"
#include "vlmix/prompting.hpp"
#include "vlmix/retrieve.hpp"

namespace vlmix {

inline constexpr std::uint64_t kDataSalt = 0x5052455452414e;  // pretraining data stream

// Distinct indices [0, n) for one batch; all of them (shuffled) when n <= size.
inline std::vector<std::size_t> sample_batch(std::size_t n, std::size_t size, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  const std::size_t k = std::min(n, size);
  for (std::size_t i = 0; i < k; ++i) std::swap(idx[i], idx[i + uniform_index(rng, n - i)]);
  idx.resize(k);
  return idx;
}

template <typename T>
struct TrainState {
  TrainConfig config;
  TriEncoderParams<T> params;
  AdamW<T> optimizer;
  Rng rng;
  std::size_t step = 0;
};

template <typename T>
TrainState<T> init_training(const TrainConfig& cfg, std::uint64_t seed) {
  return {cfg, init_params<T>(cfg.encoder, seed), AdamW<T>(cfg.optimizer), stream_rng(seed, 0, kDataSalt), 0};
}

template <typename T>
Checkpoint to_checkpoint(const TrainState<T>& s) {
  Checkpoint c;
  c.config = config_text(s.config);
  c.tensors = snapshot_params(s.params);
  c.step = s.step;
  c.rng_state = rng_state(s.rng);
  c.optimizer = snapshot_optimizer(s.optimizer.state());
  return c;
}

template <typename T>
TrainState<T> from_checkpoint(const Checkpoint& c) {
  TrainConfig cfg;
  apply_config(cfg, parse_key_values(c.config));
  TrainState<T> s{cfg, init_params<T>(cfg.encoder, 0), AdamW<T>(cfg.optimizer), Rng{}, c.step};
  restore_params(s.params, c.tensors);
  set_rng_state(s.rng, c.rng_state);
  if (c.optimizer) restore_optimizer(s.optimizer.state(), *c.optimizer);
  return s;
}

inline void write_metrics_header(std::ostream& os) { os << "step,L_itc,L_mlm,L_itm,causal_frac\n"; }

inline void write_metrics_line(std::ostream& os, const StepMetrics& m) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g,%.6g\n", m.step, m.itc, m.mlm, m.itm, m.causal_fraction);
  os << buf;
}

struct PretrainHooks {
  std::size_t checkpoint_interval = 0;  // 0: none
  std::string checkpoint_path;          // written at each interval and at the end when set
  std::function<void(const StepMetrics&)> on_step;
};

struct PretrainReport {
  std::vector<StepMetrics> metrics;
  std::size_t masked_tokens = 0;
  std::size_t masked_correct = 0;  // over the final step
};

// Runs `steps` more pretraining steps. The mask-mixing proportion comes from
// state.config.p_causal. A non-finite loss aborts with NumericError before any
// update; checkpoints already written stay as they are.
template <typename T>
PretrainReport pretrain(TrainState<T>& state, const std::vector<PairedExample>& corpus, std::size_t steps,
                        const PretrainHooks& hooks = {}) {
  if (corpus.size() < 2) throw ValidationError("pretraining needs a corpus of at least 2 examples");
  auto part = full_partition(state.params);
  const MaskMixPolicy policy{state.config.p_causal};
  const PretrainOptions opt{state.config.temperature, state.config.mask_prob};
  PretrainReport rep;
  for (std::size_t s = 0; s < steps; ++s) {
    std::vector<const PairedExample*> batch;
    for (auto i : sample_batch(corpus.size(), state.config.batch_size, state.rng)) batch.push_back(&corpus[i]);
    auto res = pretrain_step(batch, state.params, policy, state.rng, opt);
    const double total = res.metrics.total();
    if (!std::isfinite(total)) {
      throw NumericError("non-finite pretraining loss at step " + std::to_string(state.step + 1));
    }
    state.optimizer.zero_grad(part);
    backward(res.loss);
    state.optimizer.step(part);
    ++state.step;
    res.metrics.step = state.step;
    rep.metrics.push_back(res.metrics);
    rep.masked_tokens = res.masked_tokens;
    rep.masked_correct = res.masked_correct;
    if (hooks.on_step) hooks.on_step(res.metrics);
    if (hooks.checkpoint_interval && !hooks.checkpoint_path.empty() && state.step % hooks.checkpoint_interval == 0)
      save_checkpoint(hooks.checkpoint_path, to_checkpoint(state));
  }
  state.optimizer.zero_grad(part);
  if (!hooks.checkpoint_path.empty()) save_checkpoint(hooks.checkpoint_path, to_checkpoint(state));
  return rep;
}

// ---------------------------------------------------------------------------
// Evaluators. All run without recording gradients.

// Masks one content token at a time and checks the argmax prediction.
template <typename T>
double masked_token_accuracy(const TriEncoderParams<T>& params, const std::vector<PairedExample>& examples,
                             AttentionMaskKind kind) {
  NoGradGuard ng;
  std::size_t total = 0, correct = 0;
  for (const auto& ex : examples) {
    std::vector<TokenSequence> seqs;
    for (std::size_t i = 0; i < ex.caption.length(); ++i) {
      if (!is_maskable(ex.caption.ids[i])) continue;
      auto s = ex.caption;
      s.targets = {s.ids[i]};
      s.mask_positions = {i};
      s.ids[i] = tok::kMask;
      seqs.push_back(std::move(s));
    }
    if (seqs.empty()) continue;
    std::vector<const TokenSequence*> ptrs;
    for (const auto& s : seqs) ptrs.push_back(&s);
    auto visual = encode_image(ex.image, params);
    auto fwd = mlm_forward(visual, std::vector<std::size_t>(seqs.size(), 0), ptrs,
                           std::vector<AttentionMaskKind>(seqs.size(), kind), params);
    const std::size_t v = fwd.logits.cols();
    for (std::size_t r = 0; r < fwd.targets.size(); ++r) {
      const T* x = fwd.logits.data().data() + r * v;
      correct += static_cast<int>(std::max_element(x, x + v) - x) == fwd.targets[r];
      ++total;
    }
  }
  return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
}

// Mean per-token teacher-forced cross-entropy of each caption given [CLS].
template <typename T>
double caption_cross_entropy(const TriEncoderParams<T>& params, const std::vector<PairedExample>& examples) {
  double ce = 0;
  std::size_t tokens = 0;
  const auto cls = TokenSequence::from_ids({tok::kCls});
  for (const auto& ex : examples) {
    std::vector<int> words(ex.caption.ids.begin() + 1, ex.caption.ids.end() - 1);
    ce += sequence_cross_entropy(ex.image, cls, words, params);
    tokens += words.size() + 1;
  }
  return tokens ? ce / static_cast<double>(tokens) : 0.0;
}

struct CaptionScores {
  double bleu1 = 0;
  double bleu4 = 0;
  double exact = 0;
};

template <typename T>
CaptionScores caption_scores(const TriEncoderParams<T>& params, const std::vector<PairedExample>& examples,
                             const Vocabulary& vocab, const DecodeConfig& cfg) {
  std::vector<Words> hyps, refs;
  std::size_t exact = 0;
  const auto cls = TokenSequence::from_ids({tok::kCls});
  for (const auto& ex : examples) {
    const auto out = decode(ex.image, cls, params, cfg);
    const std::string text = join_words(strip_sep(out.tokens), vocab);
    exact += text == ex.caption_text;
    hyps.push_back(split_words(text));
    refs.push_back(split_words(ex.caption_text));
  }
  return {bleu1(hyps, refs), bleu4(hyps, refs), static_cast<double>(exact) / static_cast<double>(examples.size())};
}

struct RetrievalScores {
  double i2t_r1 = 0, i2t_r5 = 0, i2t_r10 = 0;
  double t2i_r1 = 0, t2i_r5 = 0, t2i_r10 = 0;
};

// Ground truth for a query is every gallery item carrying the same caption.
inline std::vector<std::vector<std::size_t>> caption_ground_truth(const std::vector<PairedExample>& examples) {
  std::vector<std::vector<std::size_t>> gt(examples.size());
  for (std::size_t i = 0; i < examples.size(); ++i)
    for (std::size_t j = 0; j < examples.size(); ++j)
      if (examples[i].caption_text == examples[j].caption_text) gt[i].push_back(j);
  return gt;
}

template <typename T>
RetrievalScores retrieval_scores(const TriEncoderParams<T>& params, const std::vector<PairedExample>& examples,
                                 const RetrievalConfig& cfg) {
  std::vector<const Image*> images;
  std::vector<const TokenSequence*> texts;
  for (const auto& ex : examples) {
    images.push_back(&ex.image);
    texts.push_back(&ex.caption);
  }
  RetrievalConfig c = cfg;
  c.top_k = std::min(c.top_k, examples.size());
  const auto gt = caption_ground_truth(examples);
  const auto i2t = ranked_items(retrieve(images, texts, RetrievalDirection::ImageToText, params, c));
  const auto t2i = ranked_items(retrieve(images, texts, RetrievalDirection::TextToImage, params, c));
  return {recall_at_k(i2t, gt, 1), recall_at_k(i2t, gt, 5), recall_at_k(i2t, gt, 10),
          recall_at_k(t2i, gt, 1), recall_at_k(t2i, gt, 5), recall_at_k(t2i, gt, 10)};
}

// ---------------------------------------------------------------------------
// Prompt-based fine-tuning.

struct FinetuneSpec {
  PromptTemplate tpl = make_template(PromptTask::Vqa);
  FreezeSpec freeze = FreezeSpec::all();
  std::optional<AttentionMaskKind> mask_kind;  // default: tpl.mask_kind()
  std::size_t steps = 100;
  std::size_t batch_size = 32;  // examples per step
  OptimizerConfig optimizer;
  std::uint64_t seed = 0;

  AttentionMaskKind kind() const { return mask_kind.value_or(tpl.mask_kind()); }
};

struct FinetuneReport {
  std::vector<double> losses;
  std::size_t examples = 0;
};

// Fine-tunes in place on the examples that carry the template's task
// annotation. Frozen tensors are left bitwise untouched.
template <typename T>
FinetuneReport finetune(TriEncoderParams<T>& params, const std::vector<PairedExample>& train, const Vocabulary& vocab,
                        const FinetuneSpec& spec) {
  std::vector<const PairedExample*> usable;
  std::vector<PromptSlots> slots;
  for (const auto& ex : train) {
    if (auto s = example_slots(ex, spec.tpl.task)) {
      usable.push_back(&ex);
      slots.push_back(*s);
    }
  }
  FinetuneReport rep;
  rep.examples = usable.size();
  if (usable.empty()) throw ValidationError("no training example carries a " + task_name(spec.tpl.task) + " annotation");
  auto part = apply_freeze_spec(params, spec.freeze);
  AdamW<T> opt(spec.optimizer);
  Rng rng = stream_rng(spec.seed, 1, kDataSalt);
  const auto kind = spec.kind();
  for (std::size_t step = 0; step < spec.steps; ++step) {
    std::vector<FinetuneItem> items;
    for (auto i : sample_batch(usable.size(), spec.batch_size, rng)) {
      auto more = finetune_items(spec.tpl, vocab, usable[i]->image, slots[i], params.config.max_positions(), kind);
      items.insert(items.end(), std::make_move_iterator(more.begin()), std::make_move_iterator(more.end()));
    }
    auto res = finetune_step(items, params, kind);
    const double loss = static_cast<double>(res.loss.item());
    if (!std::isfinite(loss)) throw NumericError("non-finite fine-tuning loss at step " + std::to_string(step + 1));
    rep.losses.push_back(loss);
    opt.zero_grad(part);
    if (res.loss.requires_grad()) {
      backward(res.loss);
      opt.step(part);
    }
  }
  opt.zero_grad(part);
  params.for_each([](const std::string&, Tensor<T>& t, ParamRole) { t.set_requires_grad(true); });
  return rep;
}

struct TaskAccuracy {
  double overall = 0;
  double in_domain = 0;
  double out_domain = 0;
  std::size_t n = 0, n_in = 0, n_out = 0;
};

// Prompt-based evaluation: restricted ranking when `labels` is given,
// generative decoding of the answer otherwise. `answer_list` splits the
// result into in-/out-of-list questions when non-empty.
template <typename T>
TaskAccuracy evaluate_prompt(const TriEncoderParams<T>& params, const std::vector<PairedExample>& test,
                             const Vocabulary& vocab, const PromptTemplate& tpl, const DecodeConfig& dcfg,
                             const std::optional<LabelSet>& labels = std::nullopt,
                             const std::vector<std::string>& answer_list = {}) {
  TaskAccuracy acc;
  std::size_t hit = 0, hit_in = 0, hit_out = 0;
  for (const auto& ex : test) {
    auto slots = example_slots(ex, tpl.task);
    if (!slots) continue;
    auto prefix = render_prompt(tpl, vocab, *slots, RenderMode::Infer, params.config.max_positions());
    std::string pred;
    if (labels) {
      pred = restricted_rank(ex.image, prefix, *labels, params).label;
    } else {
      prefix.ids.pop_back();  // decode appends its own [MASK]
      prefix.visible.pop_back();
      pred = join_words(strip_sep(decode(ex.image, prefix, params, dcfg).tokens), vocab);
    }
    const bool ok = pred == *slots->answer;
    const bool in = answer_list.empty() ||
                    std::find(answer_list.begin(), answer_list.end(), *slots->answer) != answer_list.end();
    ++acc.n;
    hit += ok;
    if (in) {
      ++acc.n_in;
      hit_in += ok;
    } else {
      ++acc.n_out;
      hit_out += ok;
    }
  }
  auto frac = [](std::size_t a, std::size_t b) { return b ? static_cast<double>(a) / static_cast<double>(b) : 0.0; };
  acc.overall = frac(hit, acc.n);
  acc.in_domain = frac(hit_in, acc.n_in);
  acc.out_domain = frac(hit_out, acc.n_out);
  return acc;
}

// ---------------------------------------------------------------------------
// Linear classifier on the multimodal [CLS] state.

enum class ClassifierTask : std::uint8_t { VqaClosed, Classification, Entailment };

inline PromptTask classifier_prompt_task(ClassifierTask t) {
  switch (t) {
    case ClassifierTask::VqaClosed: return PromptTask::Vqa;
    case ClassifierTask::Classification: return PromptTask::Classification;
    case ClassifierTask::Entailment: return PromptTask::Entailment;
  }
  return PromptTask::Vqa;
}

// Text fed alongside the image: the question, the hypothesis, or nothing.
inline TokenSequence classifier_input(const PairedExample& ex, ClassifierTask task, const Vocabulary& vocab) {
  switch (task) {
    case ClassifierTask::VqaClosed: return tokenize(ex.qa->question, vocab);
    case ClassifierTask::Entailment: return tokenize(ex.entailment->hypothesis, vocab);
    case ClassifierTask::Classification: return tokenize("", vocab);
  }
  return tokenize("", vocab);
}

struct LinearClassifier {
  std::vector<std::string> answers;
  Tensor<float> w;  // [H x K]
  Tensor<float> b;  // [K]
  double train_accuracy = 0;
};

template <typename T>
Tensor<float> classifier_features(const TriEncoderParams<T>& params, const std::vector<const PairedExample*>& examples,
                                  ClassifierTask task, const Vocabulary& vocab) {
  NoGradGuard ng;
  std::vector<float> feats;
  const std::size_t h = params.config.hidden, chunk = 64;
  for (std::size_t start = 0; start < examples.size(); start += chunk) {
    const std::size_t end = std::min(examples.size(), start + chunk);
    std::vector<const Image*> images;
    std::vector<TokenSequence> seqs;
    for (std::size_t i = start; i < end; ++i) {
      images.push_back(&examples[i]->image);
      seqs.push_back(classifier_input(*examples[i], task, vocab));
    }
    std::vector<const TokenSequence*> ptrs;
    for (const auto& s : seqs) ptrs.push_back(&s);
    auto visual = encode_images(images, params);
    auto text = encode_texts(ptrs, std::vector<AttentionMaskKind>(ptrs.size(), AttentionMaskKind::Bidirectional), params);
    auto m = encode_multimodal(text, visual, params);
    auto cls = gather_rows(m, position_rows(ptrs.size(), text.len));
    for (T v : cls.data()) feats.push_back(static_cast<float>(v));
  }
  return Tensor<float>::from({examples.size(), h}, std::move(feats));
}

inline std::string classifier_answer(const PairedExample& ex, ClassifierTask task) {
  switch (task) {
    case ClassifierTask::VqaClosed: return ex.qa->answer;
    case ClassifierTask::Classification: return *ex.class_label;
    case ClassifierTask::Entailment: return label_name(ex.entailment->label);
  }
  return "";
}

// Softmax classifier over `answers` trained on frozen multimodal [CLS]
// features. Examples whose answer is outside the list are skipped in
// training and always count as wrong at test time.
template <typename T>
LinearClassifier linear_classifier_baseline(const TriEncoderParams<T>& params, ClassifierTask task,
                                            const std::vector<PairedExample>& train,
                                            const std::vector<std::string>& answers, const Vocabulary& vocab,
                                            std::size_t steps = 300, double lr = 1e-2, std::uint64_t seed = 0) {
  if (answers.empty()) throw ValidationError("linear classifier needs a non-empty answer list");
  const auto ptask = classifier_prompt_task(task);
  std::vector<const PairedExample*> usable;
  std::vector<int> labels;
  for (const auto& ex : train) {
    if (!example_slots(ex, ptask)) continue;
    auto it = std::find(answers.begin(), answers.end(), classifier_answer(ex, task));
    if (it == answers.end()) continue;
    usable.push_back(&ex);
    labels.push_back(static_cast<int>(it - answers.begin()));
  }
  LinearClassifier clf;
  clf.answers = answers;
  const std::size_t h = params.config.hidden, k = answers.size();
  Rng rng = stream_rng(seed, 2, kDataSalt);
  std::vector<float> w0(h * k);
  for (auto& v : w0) v = static_cast<float>(truncated_normal(rng, params.config.init_std));
  clf.w = Tensor<float>::from({h, k}, std::move(w0), true);
  clf.b = Tensor<float>::zeros({k}, true);
  if (usable.empty()) return clf;
  const auto x = classifier_features(params, usable, task, vocab);
  ParamPartition<float> part;
  part.trainable.push_back({"lc.w", clf.w, {}, true});
  part.trainable.push_back({"lc.b", clf.b, {}, false});
  OptimizerConfig oc;
  oc.lr = lr;
  AdamW<float> opt(oc);
  for (std::size_t s = 0; s < steps; ++s) {
    opt.zero_grad(part);
    auto loss = cross_entropy(linear(x, clf.w, clf.b), labels, Reduction::Mean);
    backward(loss);
    opt.step(part);
  }
  opt.zero_grad(part);
  NoGradGuard ng;
  auto logits = linear(x, clf.w, clf.b);
  std::size_t correct = 0;
  for (std::size_t r = 0; r < usable.size(); ++r) {
    const float* p = logits.data().data() + r * k;
    correct += static_cast<int>(std::max_element(p, p + k) - p) == labels[r];
  }
  clf.train_accuracy = static_cast<double>(correct) / static_cast<double>(usable.size());
  return clf;
}

template <typename T>
std::vector<std::string> classifier_predict(const LinearClassifier& clf, const TriEncoderParams<T>& params,
                                            const std::vector<const PairedExample*>& examples, ClassifierTask task,
                                            const Vocabulary& vocab) {
  if (examples.empty()) return {};
  NoGradGuard ng;
  const auto x = classifier_features(params, examples, task, vocab);
  auto logits = linear(x, clf.w, clf.b);
  const std::size_t k = clf.answers.size();
  std::vector<std::string> out;
  for (std::size_t r = 0; r < examples.size(); ++r) {
    const float* p = logits.data().data() + r * k;
    out.push_back(clf.answers[static_cast<std::size_t>(std::max_element(p, p + k) - p)]);
  }
  return out;
}

template <typename T>
TaskAccuracy evaluate_classifier(const LinearClassifier& clf, const TriEncoderParams<T>& params,
                                 const std::vector<PairedExample>& test, ClassifierTask task, const Vocabulary& vocab,
                                 const std::vector<std::string>& answer_list = {}) {
  std::vector<const PairedExample*> usable;
  for (const auto& ex : test)
    if (example_slots(ex, classifier_prompt_task(task))) usable.push_back(&ex);
  const auto pred = classifier_predict(clf, params, usable, task, vocab);
  TaskAccuracy acc;
  std::size_t hit = 0, hit_in = 0, hit_out = 0;
  for (std::size_t i = 0; i < usable.size(); ++i) {
    const auto gold = classifier_answer(*usable[i], task);
    const bool ok = pred[i] == gold;
    const bool in = answer_list.empty() || std::find(answer_list.begin(), answer_list.end(), gold) != answer_list.end();
    ++acc.n;
    hit += ok;
    if (in) {
      ++acc.n_in;
      hit_in += ok;
    } else {
      ++acc.n_out;
      hit_out += ok;
    }
  }
  auto frac = [](std::size_t a, std::size_t b) { return b ? static_cast<double>(a) / static_cast<double>(b) : 0.0; };
  acc.overall = frac(hit, acc.n);
  acc.in_domain = frac(hit_in, acc.n_in);
  acc.out_domain = frac(hit_out, acc.n_out);
  return acc;
}

}  // namespace vlmix
