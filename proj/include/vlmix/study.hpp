#pragma once

// Ablation studies as runnable grids. Each study pretrains (or loads) one
// model per seed, then fine-tunes and evaluates a copy per grid cell. Output
// is a tab-separated table with a header row.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "vlmix/train.hpp"

namespace vlmix {

enum class StudyKind : std::uint8_t { MaskMixSweep, PromptLenPos, FewShot, VqaDomainSplit, VeMethods, ClsFreeze };

inline const std::vector<std::pair<StudyKind, std::string>>& study_kinds() {
  static const std::vector<std::pair<StudyKind, std::string>> k{
      {StudyKind::MaskMixSweep, "mask_mix_sweep"}, {StudyKind::PromptLenPos, "prompt_len_pos"},
      {StudyKind::FewShot, "few_shot"},            {StudyKind::VqaDomainSplit, "vqa_domain_split"},
      {StudyKind::VeMethods, "ve_methods"},        {StudyKind::ClsFreeze, "cls_freeze"}};
  return k;
}

inline std::string study_name(StudyKind kind) {
  for (const auto& [k, n] : study_kinds())
    if (k == kind) return n;
  return "";
}

inline StudyKind parse_study_kind(const std::string& s) {
  for (const auto& [k, n] : study_kinds())
    if (n == s) return k;
  throw ValidationError("unknown study kind '" + s + "'");
}

// Grid meaning per kind:
//   mask_mix_sweep    p_causal values (one block of rows per corpus size)
//   prompt_len_pos    context lengths, each at begin and mid
//   few_shot          fractions of the training split
//   vqa_domain_split  in-domain answer list sizes
//   ve_methods        context lengths for the learnable-context rows
//   cls_freeze        fine-tuned components, '+'-joined (e.g. "VE+ME")
struct StudySpec {
  StudyKind kind = StudyKind::MaskMixSweep;
  std::vector<std::string> grid;  // empty: the kind's default grid
  std::vector<std::size_t> corpus_sizes{400};
  std::vector<std::uint64_t> seeds{0};
  TrainConfig config;
  std::string checkpoint;  // start from this model instead of pretraining
  std::size_t pretrain_steps = 200;
  std::size_t finetune_steps = 60;
  std::size_t classifier_steps = 300;
  std::size_t train_size = 400;
  std::size_t test_size = 100;
  int answer_list_size = 8;
  std::string output;
};

inline std::vector<std::string> default_grid(StudyKind kind) {
  switch (kind) {
    case StudyKind::MaskMixSweep: return {"0", "0.33", "0.66", "1.0"};
    case StudyKind::PromptLenPos: return {"1", "4", "8", "16", "32"};
    case StudyKind::FewShot: return {"0.125", "0.25", "0.5", "1"};
    case StudyKind::VqaDomainSplit: return {"8"};
    case StudyKind::VeMethods: return {"16"};
    case StudyKind::ClsFreeze: return {"VE", "TE", "ME", "VE+TE", "VE+ME"};
  }
  return {};
}

struct StudyTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::string to_tsv() const {
    std::ostringstream os;
    auto line = [&](const std::vector<std::string>& cells) {
      for (std::size_t i = 0; i < cells.size(); ++i) os << (i ? "\t" : "") << cells[i];
      os << '\n';
    };
    line(header);
    for (const auto& r : rows) line(r);
    return os.str();
  }
};

namespace detail {

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

inline double grid_number(const std::string& s, const char* what) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos == s.size() && std::isfinite(v)) return v;
  } catch (const std::exception&) {
  }
  throw ValidationError(std::string("grid value '") + s + "' is not a valid " + what);
}

inline std::size_t grid_length(const std::string& s) {
  const double v = grid_number(s, "context length");
  if (v < 1 || v > tok::kNumCtx || v != std::floor(v)) {
    throw ValidationError("context length '" + s + "' must be an integer in [1, " + std::to_string(tok::kNumCtx) + "]");
  }
  return static_cast<std::size_t>(v);
}

struct StudyData {
  Vocabulary vocab;
  std::vector<PairedExample> train, test;
};

inline StudyData study_data(std::uint64_t seed, std::size_t train_size, std::size_t test_size) {
  StudyData d{Vocabulary::build(synthetic_lexicon()), {}, {}};
  auto corpus = generate_corpus(d.vocab, seed, train_size + test_size);
  auto split = corpus.examples.begin() + static_cast<std::ptrdiff_t>(train_size);
  d.train.assign(corpus.examples.begin(), split);
  d.test.assign(split, corpus.examples.end());
  return d;
}

inline TriEncoderParams<float> study_model(const StudySpec& spec, const StudyData& data, std::uint64_t seed,
                                           std::optional<double> p_causal = std::nullopt) {
  if (!spec.checkpoint.empty()) return from_checkpoint<float>(load_checkpoint(spec.checkpoint)).params;
  TrainConfig cfg = spec.config;
  cfg.encoder.vocab_size = data.vocab.size();
  if (p_causal) cfg.p_causal = *p_causal;
  auto state = init_training<float>(cfg, seed);
  pretrain(state, data.train, spec.pretrain_steps);
  return std::move(state.params);
}

// Answers are a few words; a short decode budget keeps evaluation bounded.
inline DecodeConfig answer_decoding(const StudySpec& spec) {
  DecodeConfig d = spec.config.decode;
  d.max_len = std::min<std::size_t>(d.max_len, 6);
  return d;
}

inline TriEncoderParams<float> finetuned(const TriEncoderParams<float>& base, const std::vector<PairedExample>& train,
                                         const Vocabulary& vocab, const PromptTemplate& tpl, const FreezeSpec& freeze,
                                         const StudySpec& spec, std::uint64_t seed) {
  auto p = base.clone();
  FinetuneSpec fs;
  fs.tpl = tpl;
  fs.freeze = freeze;
  fs.steps = spec.finetune_steps;
  fs.batch_size = spec.config.batch_size;
  fs.optimizer = spec.config.optimizer;
  fs.seed = seed;
  finetune(p, train, vocab, fs);
  return p;
}

inline TaskAccuracy prompt_accuracy(const TriEncoderParams<float>& base, const StudyData& d, const PromptTemplate& tpl,
                                    const FreezeSpec& freeze, const StudySpec& spec, std::uint64_t seed,
                                    bool ranked = false, const std::vector<std::string>& answer_list = {}) {
  const auto p = finetuned(base, d.train, d.vocab, tpl, freeze, spec, seed);
  std::optional<LabelSet> labels;
  if (ranked) labels = entailment_labels(d.vocab);
  return evaluate_prompt(p, d.test, d.vocab, tpl, answer_decoding(spec), labels, answer_list);
}

inline std::vector<std::string> entailment_answers() { return {"entailment", "neutral", "contradiction"}; }

inline std::vector<std::string> class_answers(const std::vector<PairedExample>& train) {
  std::set<std::string> s;
  for (const auto& ex : train)
    if (ex.class_label) s.insert(*ex.class_label);
  return {s.begin(), s.end()};
}

inline double classifier_accuracy(const TriEncoderParams<float>& p, const StudyData& d, ClassifierTask task,
                                  const std::vector<std::string>& answers, const StudySpec& spec, std::uint64_t seed,
                                  TaskAccuracy* detail_out = nullptr) {
  if (answers.empty()) return 0.0;
  const auto clf = linear_classifier_baseline(p, task, d.train, answers, d.vocab, spec.classifier_steps, 1e-2, seed);
  const auto acc = evaluate_classifier(clf, p, d.test, task, d.vocab, answers);
  if (detail_out) *detail_out = acc;
  return acc.overall;
}

inline FreezeSpec with_prompt_parts(FreezeSpec f, bool context) {
  f.trainable.insert(Component::Heads);
  if (context) f.trainable.insert(Component::ContextEmbeddings);
  return f;
}

inline std::vector<std::string> answer_list_for(const std::vector<PairedExample>& train, int size) {
  std::set<std::string> distinct;
  for (const auto& ex : train)
    if (ex.qa) distinct.insert(ex.qa->answer);
  if (distinct.empty()) return {};
  const int m = std::min<int>(size, static_cast<int>(distinct.size()));
  return build_answer_lists(train, m).in_domain;
}

// ---------------------------------------------------------------------------

inline StudyTable mask_mix_sweep(const StudySpec& spec, const std::vector<std::string>& grid) {
  StudyTable t{{"pairs", "p_causal", "seed", "B1", "B4", "caption_ce", "VE", "ITR_R1", "TIR_R1", "CLS"}, {}};
  std::vector<double> ps;
  for (const auto& g : grid) {
    const double p = grid_number(g, "p_causal");
    if (p < 0 || p > 1) throw ValidationError("p_causal grid value " + g + " is outside [0, 1]");
    ps.push_back(p);
  }
  if (spec.corpus_sizes.empty()) throw ValidationError("mask_mix_sweep needs at least one corpus size");
  if (!spec.checkpoint.empty()) throw ValidationError("mask_mix_sweep pretrains every cell and takes no checkpoint");
  for (std::size_t n : spec.corpus_sizes) {
    for (std::size_t gi = 0; gi < ps.size(); ++gi) {
      for (auto seed : spec.seeds) {
        const auto d = study_data(seed, n, spec.test_size);
        const auto p = study_model(spec, d, seed, ps[gi]);
        const auto cap = caption_scores(p, d.test, d.vocab, spec.config.decode);
        RetrievalConfig rc = spec.config.retrieval;
        const auto ret = retrieval_scores(p, d.test, rc);
        t.rows.push_back({std::to_string(n), grid[gi], std::to_string(seed), fmt(cap.bleu1), fmt(cap.bleu4),
                          fmt(caption_cross_entropy(p, d.test)),
                          fmt(classifier_accuracy(p, d, ClassifierTask::Entailment, entailment_answers(), spec, seed)),
                          fmt(ret.i2t_r1), fmt(ret.t2i_r1),
                          fmt(classifier_accuracy(p, d, ClassifierTask::Classification, class_answers(d.train), spec,
                                                  seed))});
      }
    }
  }
  return t;
}

inline StudyTable prompt_len_pos(const StudySpec& spec, const std::vector<std::string>& grid) {
  StudyTable t{{"length", "position", "seed", "VQA", "VE", "CLS"}, {}};
  std::vector<std::size_t> lengths;
  for (const auto& g : grid) lengths.push_back(grid_length(g));
  for (auto seed : spec.seeds) {
    const auto d = study_data(seed, spec.train_size, spec.test_size);
    const auto base = study_model(spec, d, seed);
    const auto freeze = FreezeSpec::all();
    for (std::size_t gi = 0; gi < lengths.size(); ++gi) {
      for (auto pos : {PromptPosition::Begin, PromptPosition::Mid}) {
        auto tpl = [&](PromptTask task) { return make_template(task, PromptStyle::Context, lengths[gi], pos); };
        const auto vqa = prompt_accuracy(base, d, tpl(PromptTask::Vqa), freeze, spec, seed);
        const auto ve = prompt_accuracy(base, d, tpl(PromptTask::Entailment), freeze, spec, seed, true);
        // A classification prompt holds only context and the answer, so the
        // context can only sit at the beginning.
        std::string cls = "-";
        if (pos == PromptPosition::Begin)
          cls = fmt(prompt_accuracy(base, d, tpl(PromptTask::Classification), freeze, spec, seed).overall);
        t.rows.push_back({grid[gi], position_name(pos), std::to_string(seed), fmt(vqa.overall), fmt(ve.overall), cls});
      }
    }
  }
  return t;
}

inline StudyTable few_shot(const StudySpec& spec, const std::vector<std::string>& grid) {
  StudyTable t{{"fraction", "samples", "seed", "method", "in_domain", "out_domain"}, {}};
  std::vector<double> fractions;
  for (const auto& g : grid) {
    const double f = grid_number(g, "fraction");
    if (f <= 0 || f > 1) throw ValidationError("few_shot fraction " + g + " is outside (0, 1]");
    fractions.push_back(f);
  }
  std::vector<std::size_t> order(fractions.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return fractions[a] < fractions[b]; });
  for (auto seed : spec.seeds) {
    const auto d = study_data(seed, spec.train_size, spec.test_size);
    const auto base = study_model(spec, d, seed);
    const auto list = answer_list_for(d.train, spec.answer_list_size);
    for (auto gi : order) {
      const auto n = static_cast<std::size_t>(std::ceil(fractions[gi] * static_cast<double>(d.train.size())));
      StudyData sub{d.vocab, {d.train.begin(), d.train.begin() + static_cast<std::ptrdiff_t>(n)}, d.test};
      std::size_t samples = 0;
      for (const auto& ex : sub.train) samples += ex.qa.has_value();
      TaskAccuracy lc;
      classifier_accuracy(base, sub, ClassifierTask::VqaClosed, list, spec, seed, &lc);
      const auto nlp = prompt_accuracy(base, sub, make_template(PromptTask::Vqa, PromptStyle::Natural),
                                       with_prompt_parts(FreezeSpec::all(), false), spec, seed, false, list);
      const auto lcp = prompt_accuracy(base, sub, make_template(PromptTask::Vqa, PromptStyle::Context),
                                       FreezeSpec::all(), spec, seed, false, list);
      for (const auto& [name, acc] : {std::pair{"LC", lc}, std::pair{"NLP", nlp}, std::pair{"LCP", lcp}}) {
        t.rows.push_back({grid[gi], std::to_string(samples), std::to_string(seed), name, fmt(acc.in_domain),
                          fmt(acc.out_domain)});
      }
    }
  }
  return t;
}

inline StudyTable vqa_domain_split(const StudySpec& spec, const std::vector<std::string>& grid) {
  StudyTable t{{"list_size", "seed", "method", "in_domain", "out_domain", "overall"}, {}};
  std::vector<int> sizes;
  for (const auto& g : grid) {
    const double m = grid_number(g, "answer list size");
    if (m < 1 || m != std::floor(m)) throw ValidationError("answer list size " + g + " must be a positive integer");
    sizes.push_back(static_cast<int>(m));
  }
  for (auto seed : spec.seeds) {
    const auto d = study_data(seed, spec.train_size, spec.test_size);
    const auto base = study_model(spec, d, seed);
    // Prompted answers do not depend on the list; fine-tune them once.
    const auto nlp_model = finetuned(base, d.train, d.vocab, make_template(PromptTask::Vqa, PromptStyle::Natural),
                                     FreezeSpec::all(), spec, seed);
    const auto lcp_model = finetuned(base, d.train, d.vocab, make_template(PromptTask::Vqa, PromptStyle::Context),
                                     FreezeSpec::all(), spec, seed);
    for (std::size_t gi = 0; gi < sizes.size(); ++gi) {
      const auto list = build_answer_lists(d.train, sizes[gi]).in_domain;
      TaskAccuracy lc;
      classifier_accuracy(base, d, ClassifierTask::VqaClosed, list, spec, seed, &lc);
      const auto dc = answer_decoding(spec);
      const auto nlp = evaluate_prompt(nlp_model, d.test, d.vocab, make_template(PromptTask::Vqa, PromptStyle::Natural),
                                       dc, std::nullopt, list);
      const auto lcp = evaluate_prompt(lcp_model, d.test, d.vocab, make_template(PromptTask::Vqa, PromptStyle::Context),
                                       dc, std::nullopt, list);
      for (const auto& [name, acc] : {std::pair{"LC", lc}, std::pair{"NLP", nlp}, std::pair{"LCP", lcp}}) {
        t.rows.push_back({grid[gi], std::to_string(seed), name, fmt(acc.in_domain), fmt(acc.out_domain),
                          fmt(acc.overall)});
      }
    }
  }
  return t;
}

inline StudyTable ve_methods(const StudySpec& spec, const std::vector<std::string>& grid) {
  StudyTable t{{"ctx_len", "seed", "method", "val", "test"}, {}};
  std::vector<std::size_t> lengths;
  for (const auto& g : grid) lengths.push_back(grid_length(g));
  for (auto seed : spec.seeds) {
    auto d = study_data(seed, spec.train_size, spec.test_size);
    const auto half = d.test.begin() + static_cast<std::ptrdiff_t>(d.test.size() / 2);
    const std::vector<PairedExample> val(d.test.begin(), half), test(half, d.test.end());
    const auto base = study_model(spec, d, seed);
    const auto labels = entailment_labels(d.vocab);
    const auto dc = answer_decoding(spec);
    auto both = [&](const TriEncoderParams<float>& p, const PromptTemplate& tpl, bool ranked) {
      std::optional<LabelSet> l;
      if (ranked) l = labels;
      return std::pair{evaluate_prompt(p, val, d.vocab, tpl, dc, l).overall,
                       evaluate_prompt(p, test, d.vocab, tpl, dc, l).overall};
    };
    const auto clf = linear_classifier_baseline(base, ClassifierTask::Entailment, d.train, entailment_answers(),
                                                d.vocab, spec.classifier_steps, 1e-2, seed);
    const std::pair lc{evaluate_classifier(clf, base, val, ClassifierTask::Entailment, d.vocab).overall,
                       evaluate_classifier(clf, base, test, ClassifierTask::Entailment, d.vocab).overall};
    const auto nlp_tpl = make_template(PromptTask::Entailment, PromptStyle::Natural);
    const auto nlp_model = finetuned(base, d.train, d.vocab, nlp_tpl, FreezeSpec::all(), spec, seed);
    const auto nlp = both(nlp_model, nlp_tpl, false), nlp_rank = both(nlp_model, nlp_tpl, true);
    for (std::size_t gi = 0; gi < lengths.size(); ++gi) {
      const auto tpl = make_template(PromptTask::Entailment, PromptStyle::Context, lengths[gi]);
      const auto lcp_model = finetuned(base, d.train, d.vocab, tpl, FreezeSpec::all(), spec, seed);
      const auto lcp = both(lcp_model, tpl, false), lcp_rank = both(lcp_model, tpl, true);
      for (const auto& [name, acc] : {std::pair{"LC", lc}, std::pair{"NLP", nlp}, std::pair{"NLP(1in3)", nlp_rank},
                                      std::pair{"LCP", lcp}, std::pair{"LCP(1in3)", lcp_rank}}) {
        t.rows.push_back({grid[gi], std::to_string(seed), name, fmt(acc.first), fmt(acc.second)});
      }
    }
  }
  return t;
}

inline StudyTable cls_freeze(const StudySpec& spec, const std::vector<std::string>& grid) {
  StudyTable t{{"method", "component", "seed", "accuracy"}, {}};
  std::vector<FreezeSpec> specs;
  for (auto g : grid) {
    std::replace(g.begin(), g.end(), '+', ',');
    specs.push_back(FreezeSpec::parse(g));
    if (specs.back().trainable.empty()) throw ValidationError("empty component list in cls_freeze grid");
  }
  for (auto seed : spec.seeds) {
    const auto d = study_data(seed, spec.train_size, spec.test_size);
    const auto base = study_model(spec, d, seed);
    const FreezeSpec ve{{Component::VisualEncoder}};
    const double lc = classifier_accuracy(base, d, ClassifierTask::Classification, class_answers(d.train), spec, seed);
    t.rows.push_back({"LC", "VE", std::to_string(seed), fmt(lc)});
    const auto nlp = prompt_accuracy(base, d, make_template(PromptTask::Classification, PromptStyle::Natural),
                                     with_prompt_parts(ve, false), spec, seed);
    t.rows.push_back({"NLP", "VE", std::to_string(seed), fmt(nlp.overall)});
    for (std::size_t gi = 0; gi < specs.size(); ++gi) {
      const auto acc = prompt_accuracy(base, d, make_template(PromptTask::Classification, PromptStyle::Context),
                                       with_prompt_parts(specs[gi], true), spec, seed);
      std::string comp = grid[gi];
      comp.erase(std::remove(comp.begin(), comp.end(), '+'), comp.end());
      t.rows.push_back({"LCP", comp, std::to_string(seed), fmt(acc.overall)});
    }
  }
  return t;
}

}  // namespace detail

inline StudyTable run_study(const StudySpec& spec) {
  const auto grid = spec.grid.empty() ? default_grid(spec.kind) : spec.grid;
  if (grid.empty()) throw ValidationError("study grid is empty");
  if (spec.seeds.empty()) throw ValidationError("study needs at least one seed");
  if (spec.train_size < 2 || spec.test_size < 2) throw ValidationError("study splits need at least 2 examples each");
  StudyTable t;
  switch (spec.kind) {
    case StudyKind::MaskMixSweep: t = detail::mask_mix_sweep(spec, grid); break;
    case StudyKind::PromptLenPos: t = detail::prompt_len_pos(spec, grid); break;
    case StudyKind::FewShot: t = detail::few_shot(spec, grid); break;
    case StudyKind::VqaDomainSplit: t = detail::vqa_domain_split(spec, grid); break;
    case StudyKind::VeMethods: t = detail::ve_methods(spec, grid); break;
    case StudyKind::ClsFreeze: t = detail::cls_freeze(spec, grid); break;
  }
  if (!spec.output.empty()) {
    std::ofstream out(spec.output, std::ios::binary);
    if (!out) throw IoError("cannot write study report '" + spec.output + "'");
    out << t.to_tsv();
    if (!out) throw IoError("failed writing study report '" + spec.output + "'");
  }
  return t;
}

}  // namespace vlmix
