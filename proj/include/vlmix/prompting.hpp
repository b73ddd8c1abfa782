#pragma once

// Prompt templates for fine-tuning, restricted 1-in-K ranking at a single
// [MASK], component freezing and the fine-tuning step.
//
// Template text form, one segment per line (`kind:payload`):
//   task:vqa|classification|entailment|captioning
//   position:begin|mid
//   literal:<words>
//   context:<length>[@<first ctx index>]
//   question:
//   sentence:
//   answer:
// The answer slot is the last segment of every template.

#include <algorithm>
#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "vlmix/corpus.hpp"
#include "vlmix/encoders.hpp"
#include "vlmix/objectives.hpp"
#include "vlmix/optimizer.hpp"
#include "vlmix/vocab.hpp"

namespace vlmix {

enum class SegmentKind : std::uint8_t { Literal, Context, Question, Sentence, Answer };
enum class PromptPosition : std::uint8_t { Begin, Mid };
enum class PromptTask : std::uint8_t { Vqa, Classification, Entailment, Captioning };
enum class PromptStyle : std::uint8_t { Natural, Context, ContextNatural };

inline constexpr std::size_t kDefaultContextLength = 16;
inline constexpr std::array<std::size_t, 5> kContextLengths{1, 4, 8, 16, 32};

inline std::string task_name(PromptTask t) {
  switch (t) {
    case PromptTask::Vqa: return "vqa";
    case PromptTask::Classification: return "classification";
    case PromptTask::Entailment: return "entailment";
    case PromptTask::Captioning: return "captioning";
  }
  return "";
}

inline PromptTask parse_task(const std::string& s) {
  for (auto t : {PromptTask::Vqa, PromptTask::Classification, PromptTask::Entailment, PromptTask::Captioning})
    if (task_name(t) == s) return t;
  throw ValidationError("unknown prompt task '" + s + "'");
}

inline std::string position_name(PromptPosition p) { return p == PromptPosition::Begin ? "begin" : "mid"; }

inline PromptPosition parse_position(const std::string& s) {
  if (s == "begin") return PromptPosition::Begin;
  if (s == "mid") return PromptPosition::Mid;
  throw ValidationError("unknown prompt position '" + s + "'");
}

struct PromptSegment {
  SegmentKind kind = SegmentKind::Literal;
  std::string text;          // Literal
  std::size_t ctx_len = 0;   // Context
  std::size_t ctx_first = 0; // Context: first [CTX_i] index
  bool operator==(const PromptSegment&) const = default;
};

struct PromptTemplate {
  PromptTask task = PromptTask::Vqa;
  PromptPosition position = PromptPosition::Mid;
  std::vector<PromptSegment> segments;

  bool operator==(const PromptTemplate&) const = default;

  void validate() const {
    std::size_t answers = 0;
    for (std::size_t i = 0; i < segments.size(); ++i) {
      const auto& s = segments[i];
      if (s.kind == SegmentKind::Answer) ++answers;
      if (s.kind == SegmentKind::Context) {
        if (answers > 0) throw ValidationError("context segment after the answer slot");
        if (s.ctx_len == 0 || s.ctx_first + s.ctx_len > static_cast<std::size_t>(tok::kNumCtx)) {
          throw ValidationError("context segment [" + std::to_string(s.ctx_first) + ", " +
                                std::to_string(s.ctx_first + s.ctx_len) + ") outside the " +
                                std::to_string(tok::kNumCtx) + " context tokens");
        }
      }
    }
    if (answers != 1) throw ValidationError("template needs exactly one answer slot, has " + std::to_string(answers));
    if (segments.back().kind != SegmentKind::Answer) throw ValidationError("answer slot must be the last segment");
  }

  bool has(SegmentKind k) const {
    return std::any_of(segments.begin(), segments.end(), [k](auto& s) { return s.kind == k; });
  }

  std::size_t context_length() const {
    std::size_t n = 0;
    for (const auto& s : segments)
      if (s.kind == SegmentKind::Context) n += s.ctx_len;
    return n;
  }

  // Generative tasks are trained and decoded under the causal mask; single
  // [MASK] ranking tasks use the bidirectional mask.
  AttentionMaskKind mask_kind() const {
    return task == PromptTask::Entailment ? AttentionMaskKind::Bidirectional : AttentionMaskKind::Causal;
  }

  std::string to_text() const {
    std::ostringstream os;
    os << "task:" << task_name(task) << "\nposition:" << position_name(position) << "\n";
    for (const auto& s : segments) {
      switch (s.kind) {
        case SegmentKind::Literal: os << "literal:" << s.text << "\n"; break;
        case SegmentKind::Context:
          os << "context:" << s.ctx_len;
          if (s.ctx_first != 0) os << "@" << s.ctx_first;
          os << "\n";
          break;
        case SegmentKind::Question: os << "question:\n"; break;
        case SegmentKind::Sentence: os << "sentence:\n"; break;
        case SegmentKind::Answer: os << "answer:\n"; break;
      }
    }
    return os.str();
  }

  static PromptTemplate from_text(const std::string& text) {
    PromptTemplate t;
    std::istringstream in(text);
    std::size_t line_no = 0;
    for (std::string line; std::getline(in, line);) {
      ++line_no;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) continue;
      const auto colon = line.find(':');
      if (colon == std::string::npos) {
        throw ValidationError("template line " + std::to_string(line_no) + ": expected 'kind:payload'");
      }
      const std::string kind = line.substr(0, colon), payload = line.substr(colon + 1);
      if (kind == "task") t.task = parse_task(payload);
      else if (kind == "position") t.position = parse_position(payload);
      else if (kind == "literal") t.segments.push_back({SegmentKind::Literal, payload, 0, 0});
      else if (kind == "question") t.segments.push_back({SegmentKind::Question, "", 0, 0});
      else if (kind == "sentence") t.segments.push_back({SegmentKind::Sentence, "", 0, 0});
      else if (kind == "answer") t.segments.push_back({SegmentKind::Answer, "", 0, 0});
      else if (kind == "context") {
        const auto at = payload.find('@');
        try {
          PromptSegment s{SegmentKind::Context, "", std::stoul(payload.substr(0, at)), 0};
          if (at != std::string::npos) s.ctx_first = std::stoul(payload.substr(at + 1));
          t.segments.push_back(s);
        } catch (const std::exception&) {
          throw ValidationError("template line " + std::to_string(line_no) + ": bad context payload '" + payload + "'");
        }
      } else {
        throw ValidationError("template line " + std::to_string(line_no) + ": unknown segment kind '" + kind + "'");
      }
    }
    if (t.segments.empty()) throw ValidationError("template has no segments");
    t.validate();
    return t;
  }
};

inline std::string natural_prompt(PromptTask task) {
  switch (task) {
    case PromptTask::Vqa: return "answer :";
    case PromptTask::Classification: return "a photo of";
    case PromptTask::Entailment: return "relationship :";
    case PromptTask::Captioning: return "";
  }
  return "";
}

// Natural: [slot] <prompt words> [ANSWER]
// Context: learnable context at the begin/mid position instead of words.
// ContextNatural: both; mid context sits between the words and the answer.
inline PromptTemplate make_template(PromptTask task, PromptStyle style = PromptStyle::Natural,
                                    std::size_t ctx_len = kDefaultContextLength,
                                    PromptPosition pos = PromptPosition::Mid) {
  PromptTemplate t;
  t.task = task;
  t.position = pos;
  const PromptSegment ctx{SegmentKind::Context, "", ctx_len, 0};
  const bool use_ctx = style != PromptStyle::Natural && task != PromptTask::Captioning;
  const bool use_words = style != PromptStyle::Context && task != PromptTask::Captioning;
  if (use_ctx && pos == PromptPosition::Begin) t.segments.push_back(ctx);
  if (task == PromptTask::Vqa) t.segments.push_back({SegmentKind::Question, "", 0, 0});
  if (task == PromptTask::Entailment) t.segments.push_back({SegmentKind::Sentence, "", 0, 0});
  if (use_words) t.segments.push_back({SegmentKind::Literal, natural_prompt(task), 0, 0});
  if (use_ctx && pos == PromptPosition::Mid) t.segments.push_back(ctx);
  t.segments.push_back({SegmentKind::Answer, "", 0, 0});
  t.validate();
  return t;
}

struct PromptSlots {
  std::optional<std::string> question;
  std::optional<std::string> sentence;
  std::optional<std::string> answer;
};

enum class RenderMode : std::uint8_t { Train, Infer };

// Train: every answer token becomes [MASK] with its id recorded as target.
// Infer: a single [MASK] follows the prefix. No trailing [SEP] in either mode,
// so both agree on every token before the answer span.
inline TokenSequence render_prompt(const PromptTemplate& tpl, const Vocabulary& vocab, const PromptSlots& slots,
                                   RenderMode mode, std::size_t max_positions) {
  tpl.validate();
  std::vector<int> ids{tok::kCls};
  std::optional<std::size_t> prompt_begin;
  std::size_t prompt_end = 0;
  auto mark_prompt = [&](std::size_t b, std::size_t e) {
    if (!prompt_begin) prompt_begin = b;
    prompt_end = e;
  };
  auto need = [](const std::optional<std::string>& v, const char* what) -> const std::string& {
    if (!v) throw ValidationError(std::string("template requires a ") + what + " but none was given");
    return *v;
  };
  TokenSequence seq;
  for (const auto& s : tpl.segments) {
    const std::size_t start = ids.size();
    switch (s.kind) {
      case SegmentKind::Literal:
        for (int id : encode_words(s.text, vocab)) ids.push_back(id);
        mark_prompt(start, ids.size());
        break;
      case SegmentKind::Context:
        for (std::size_t i = 0; i < s.ctx_len; ++i) ids.push_back(Vocabulary::ctx(static_cast<int>(s.ctx_first + i)));
        mark_prompt(start, ids.size());
        break;
      case SegmentKind::Question:
        for (int id : encode_words(need(slots.question, "question"), vocab)) ids.push_back(id);
        break;
      case SegmentKind::Sentence:
        for (int id : encode_words(need(slots.sentence, "sentence"), vocab)) ids.push_back(id);
        break;
      case SegmentKind::Answer:
        if (mode == RenderMode::Infer) {
          seq.mask_positions.push_back(ids.size());
          ids.push_back(tok::kMask);
        } else {
          const auto answer = encode_words(need(slots.answer, "answer"), vocab);
          if (answer.empty()) throw ValidationError("empty answer");
          for (int id : answer) {
            seq.mask_positions.push_back(ids.size());
            seq.targets.push_back(id);
            ids.push_back(tok::kMask);
          }
        }
        seq.answer_span = {start, ids.size()};
        break;
    }
  }
  if (ids.size() > max_positions) {
    throw LengthError("rendered prompt of length " + std::to_string(ids.size()) + " exceeds " +
                      std::to_string(max_positions) + " positions");
  }
  auto targets = std::move(seq.targets);
  auto masks = std::move(seq.mask_positions);
  const Span answer = seq.answer_span;
  seq = TokenSequence::from_ids(std::move(ids));
  seq.targets = std::move(targets);
  seq.mask_positions = std::move(masks);
  seq.answer_span = answer;
  if (prompt_begin) seq.prompt_span = {*prompt_begin, prompt_end};
  return seq;
}

// Inference-consistent training sequences for a causal generative answer:
// for k = 0..n, prefix + answer[0, k) + [MASK] with target answer[k], and
// [SEP] as the target after the last answer token.
inline std::vector<TokenSequence> teacher_forced_expansion(const PromptTemplate& tpl, const Vocabulary& vocab,
                                                           const PromptSlots& slots, std::size_t max_positions) {
  const auto train = render_prompt(tpl, vocab, slots, RenderMode::Train, max_positions);
  std::vector<int> prefix(train.ids.begin(), train.ids.begin() + static_cast<std::ptrdiff_t>(train.answer_span.begin));
  std::vector<TokenSequence> out;
  const auto& ans = train.targets;
  for (std::size_t k = 0; k <= ans.size(); ++k) {
    std::vector<int> ids = prefix;
    ids.insert(ids.end(), ans.begin(), ans.begin() + static_cast<std::ptrdiff_t>(k));
    if (ids.size() + 1 > max_positions) break;
    ids.push_back(tok::kMask);
    auto s = TokenSequence::from_ids(std::move(ids));
    s.prompt_span = train.prompt_span;
    s.answer_span = {prefix.size(), s.length()};
    s.mask_positions = {s.length() - 1};
    s.targets = {k < ans.size() ? ans[k] : tok::kSep};
    out.push_back(std::move(s));
  }
  return out;
}

struct LabelSet {
  std::vector<std::string> labels;
  std::vector<int> ids;

  static LabelSet build(const std::vector<std::string>& labels, const Vocabulary& vocab) {
    if (labels.empty()) throw ValidationError("label set is empty");
    LabelSet s;
    for (const auto& l : labels) {
      const auto ids = encode_words(l, vocab);
      if (ids.size() != 1) {
        throw ValidationError("label '" + l + "' is " + std::to_string(ids.size()) +
                              " tokens; single-[MASK] ranking needs single-token labels");
      }
      s.labels.push_back(l);
      s.ids.push_back(ids[0]);
    }
    return s;
  }

  std::size_t size() const { return labels.size(); }
};

inline LabelSet entailment_labels(const Vocabulary& vocab) {
  return LabelSet::build({"entailment", "neutral", "contradiction"}, vocab);
}

struct RankResult {
  std::size_t index = 0;
  std::string label;
  std::vector<double> scores;  // raw MLM logits of each label
};

// Argmax over label logits at the single [MASK]; ties go to the lowest token id.
inline RankResult rank_from_logits(const std::vector<double>& scores, const LabelSet& labels) {
  RankResult r;
  r.scores = scores;
  for (std::size_t i = 1; i < scores.size(); ++i) {
    if (scores[i] > scores[r.index] || (scores[i] == scores[r.index] && labels.ids[i] < labels.ids[r.index])) r.index = i;
  }
  r.label = labels.labels[r.index];
  return r;
}

inline std::size_t single_mask_position(const TokenSequence& seq) {
  std::optional<std::size_t> pos;
  for (std::size_t i = 0; i < seq.length(); ++i) {
    if (seq.ids[i] != tok::kMask) continue;
    if (pos) throw ValidationError("restricted ranking needs exactly one [MASK], found several");
    pos = i;
  }
  if (!pos) throw ValidationError("restricted ranking needs exactly one [MASK], found none");
  return *pos;
}

template <typename T>
std::vector<RankResult> restricted_rank_batch(const std::vector<const Image*>& images,
                                              const std::vector<TokenSequence>& seqs, const LabelSet& labels,
                                              const TriEncoderParams<T>& params,
                                              AttentionMaskKind kind = AttentionMaskKind::Bidirectional) {
  if (images.size() != seqs.size()) throw ShapeError("restricted_rank: one image per sequence required");
  if (labels.size() == 0) throw ValidationError("label set is empty");
  NoGradGuard ng;
  std::vector<TokenSequence> local;
  for (const auto& s : seqs) {
    auto q = s;
    q.mask_positions = {single_mask_position(s)};
    q.targets.clear();
    local.push_back(std::move(q));
  }
  std::vector<const TokenSequence*> ptrs;
  std::vector<std::size_t> image_of;
  for (std::size_t i = 0; i < local.size(); ++i) {
    ptrs.push_back(&local[i]);
    image_of.push_back(i);
  }
  auto visual = encode_images(images, params);
  auto fwd = mlm_forward(visual, image_of, ptrs, std::vector<AttentionMaskKind>(ptrs.size(), kind), params);
  std::vector<RankResult> out;
  const std::size_t v = fwd.logits.cols();
  for (std::size_t r = 0; r < local.size(); ++r) {
    std::vector<double> scores;
    for (int id : labels.ids) scores.push_back(static_cast<double>(fwd.logits[r * v + static_cast<std::size_t>(id)]));
    out.push_back(rank_from_logits(scores, labels));
  }
  return out;
}

template <typename T>
RankResult restricted_rank(const Image& image, const TokenSequence& seq, const LabelSet& labels,
                           const TriEncoderParams<T>& params,
                           AttentionMaskKind kind = AttentionMaskKind::Bidirectional) {
  return restricted_rank_batch<T>({&image}, {seq}, labels, params, kind).front();
}

// ---------------------------------------------------------------------------
// Freezing.

enum class Component : std::uint8_t { VisualEncoder, TextEncoder, MultimodalEncoder, Heads, ContextEmbeddings };

inline std::string component_name(Component c) {
  switch (c) {
    case Component::VisualEncoder: return "VE";
    case Component::TextEncoder: return "TE";
    case Component::MultimodalEncoder: return "ME";
    case Component::Heads: return "heads";
    case Component::ContextEmbeddings: return "ctx";
  }
  return "";
}

struct FreezeSpec {
  std::set<Component> trainable;

  bool contains(Component c) const { return trainable.count(c) != 0; }

  // Comma-separated component names, e.g. "VE,ME,heads".
  static FreezeSpec parse(const std::string& text) {
    FreezeSpec s;
    std::stringstream ss(text);
    for (std::string item; std::getline(ss, item, ',');) {
      if (item.empty()) continue;
      bool found = false;
      for (auto c : {Component::VisualEncoder, Component::TextEncoder, Component::MultimodalEncoder, Component::Heads,
                     Component::ContextEmbeddings}) {
        if (component_name(c) == item) {
          s.trainable.insert(c);
          found = true;
        }
      }
      if (!found) throw ValidationError("unknown component '" + item + "'");
    }
    return s;
  }

  std::string to_string() const {
    std::string out;
    for (auto c : trainable) out += (out.empty() ? "" : ",") + component_name(c);
    return out;
  }

  static FreezeSpec all() {
    return {{Component::VisualEncoder, Component::TextEncoder, Component::MultimodalEncoder, Component::Heads,
             Component::ContextEmbeddings}};
  }
};

// Marks frozen tensors as not requiring gradients and returns the trainable
// partition. The [CTX] rows of the word embedding belong to the context
// component; the remaining rows belong to the text encoder.
template <typename T>
ParamPartition<T> apply_freeze_spec(TriEncoderParams<T>& params, const FreezeSpec& spec) {
  if (spec.trainable.empty()) throw ValidationError("freeze spec leaves nothing trainable");
  ParamPartition<T> part;
  params.for_each([&](const std::string& name, Tensor<T>& t, ParamRole role) {
    std::optional<Component> comp;
    std::vector<std::size_t> rows;
    bool train = false;
    if (name == "te.word_emb") {
      const bool te = spec.contains(Component::TextEncoder), ctx = spec.contains(Component::ContextEmbeddings);
      train = te || ctx;
      if (train && !(te && ctx)) {
        for (std::size_t r = 0; r < t.rows(); ++r)
          if (Vocabulary::is_ctx(static_cast<int>(r)) == ctx) rows.push_back(r);
      }
    } else {
      if (name.starts_with("ve.")) comp = Component::VisualEncoder;
      else if (name.starts_with("te.")) comp = Component::TextEncoder;
      else if (name.starts_with("me.")) comp = Component::MultimodalEncoder;
      else comp = Component::Heads;
      train = spec.contains(*comp);
    }
    t.set_requires_grad(train);
    t.zero_grad();
    if (train) part.trainable.push_back({name, t, std::move(rows), decays(role)});
    else part.frozen.push_back(name);
  });
  return part;
}

// ---------------------------------------------------------------------------
// Fine-tuning.

struct FinetuneItem {
  const Image* image = nullptr;
  TokenSequence seq;  // [MASK] positions annotated with targets
};

// Training items for one example under a template: teacher-forced expansion
// when the answer is decoded generatively (causal), the train render otherwise.
inline std::vector<FinetuneItem> finetune_items(const PromptTemplate& tpl, const Vocabulary& vocab, const Image& image,
                                                const PromptSlots& slots, std::size_t max_positions,
                                                AttentionMaskKind kind) {
  std::vector<FinetuneItem> out;
  if (kind == AttentionMaskKind::Causal) {
    for (auto& s : teacher_forced_expansion(tpl, vocab, slots, max_positions)) out.push_back({&image, std::move(s)});
  } else {
    out.push_back({&image, render_prompt(tpl, vocab, slots, RenderMode::Train, max_positions)});
  }
  return out;
}

// Slots an example supplies for a task; nullopt when it lacks the annotation.
inline std::optional<PromptSlots> example_slots(const PairedExample& ex, PromptTask task) {
  switch (task) {
    case PromptTask::Vqa:
      if (!ex.qa) return std::nullopt;
      return PromptSlots{ex.qa->question, std::nullopt, ex.qa->answer};
    case PromptTask::Classification:
      if (!ex.class_label) return std::nullopt;
      return PromptSlots{std::nullopt, std::nullopt, *ex.class_label};
    case PromptTask::Entailment:
      if (!ex.entailment) return std::nullopt;
      return PromptSlots{std::nullopt, ex.entailment->hypothesis, label_name(ex.entailment->label)};
    case PromptTask::Captioning: return PromptSlots{std::nullopt, std::nullopt, ex.caption_text};
  }
  return std::nullopt;
}

template <typename T>
struct FinetuneResult {
  Tensor<T> loss;
  std::size_t targets = 0;
  std::size_t correct = 0;
};

// Summed MLM loss over the annotated answer positions of the batch.
template <typename T>
FinetuneResult<T> finetune_step(const std::vector<FinetuneItem>& items, const TriEncoderParams<T>& params,
                                AttentionMaskKind kind) {
  FinetuneResult<T> res;
  if (items.empty()) {
    res.loss = Tensor<T>::scalar(T(0));
    return res;
  }
  std::vector<const Image*> images;
  std::vector<std::size_t> image_of;
  std::vector<const TokenSequence*> seqs;
  for (const auto& it : items) {
    auto pos = std::find(images.begin(), images.end(), it.image);
    if (pos == images.end()) {
      image_of.push_back(images.size());
      images.push_back(it.image);
    } else {
      image_of.push_back(static_cast<std::size_t>(pos - images.begin()));
    }
    seqs.push_back(&it.seq);
  }
  auto visual = encode_images(images, params);
  auto fwd = mlm_forward(visual, image_of, seqs, std::vector<AttentionMaskKind>(seqs.size(), kind), params);
  if (fwd.targets.empty()) {
    res.loss = Tensor<T>::scalar(T(0));
    return res;
  }
  res.loss = cross_entropy(fwd.logits, fwd.targets, Reduction::Sum);
  res.targets = fwd.targets.size();
  const std::size_t v = fwd.logits.cols();
  for (std::size_t r = 0; r < fwd.targets.size(); ++r) {
    const T* x = fwd.logits.data().data() + r * v;
    res.correct += static_cast<int>(std::max_element(x, x + v) - x) == fwd.targets[r];
  }
  return res;
}

}  // namespace vlmix
