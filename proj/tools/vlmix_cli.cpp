#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "vlmix/vlmix.hpp"

using namespace vlmix;

namespace {

struct Common {
  std::uint64_t seed = 0;
  std::string config;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c, bool out_required) {
  cmd->add_option("--seed", c.seed, "random seed");
  cmd->add_option("--config", c.config, "key = value config file")->check(CLI::ExistingFile);
  auto* o = cmd->add_option("--out", c.out, "output path");
  if (out_required) o->required();
}

// Output goes to --out when given, stdout otherwise.
template <typename F>
void emit(const std::string& path, F&& write) {
  if (path.empty()) {
    write(std::cout);
    return;
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open '" + path + "' for writing");
  write(os);
  if (!os) throw IoError("failed writing '" + path + "'");
}

// A checkpoint's own config with overrides from --config on top. The
// encoder shape always comes from the checkpoint.
TrainState<float> load_state(const std::string& ckpt, const std::string& config_path) {
  auto state = from_checkpoint<float>(load_checkpoint(ckpt));
  if (!config_path.empty()) {
    auto cfg = load_config_file(config_path, state.config);
    cfg.encoder = state.config.encoder;
    state.config = cfg;
  }
  return state;
}

void check_vocab(const TrainState<float>& s, const Vocabulary& vocab) {
  if (s.config.encoder.vocab_size != vocab.size())
    throw ValidationError("checkpoint vocabulary size " + std::to_string(s.config.encoder.vocab_size) +
                          " does not match the corpus vocabulary (" + std::to_string(vocab.size()) + ")");
}

std::vector<PairedExample> slice(const std::vector<PairedExample>& all, std::size_t first, std::size_t limit) {
  if (first > all.size()) throw ValidationError("--first is past the end of the corpus");
  const std::size_t end = limit ? std::min(all.size(), first + limit) : all.size();
  return {all.begin() + static_cast<std::ptrdiff_t>(first), all.begin() + static_cast<std::ptrdiff_t>(end)};
}

PromptStyle parse_style(const std::string& s) {
  if (s == "natural") return PromptStyle::Natural;
  if (s == "context") return PromptStyle::Context;
  if (s == "context_natural") return PromptStyle::ContextNatural;
  throw ValidationError("unknown prompt style '" + s + "'");
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');)
    if (!item.empty()) out.push_back(item);
  return out;
}

struct PromptArgs {
  std::string task = "vqa", style = "natural", position = "mid";
  std::size_t ctx_len = kDefaultContextLength;

  void add(CLI::App* cmd) {
    cmd->add_option("--task", task, "vqa | classification | entailment | captioning");
    cmd->add_option("--style", style, "natural | context | context_natural");
    cmd->add_option("--ctx-len", ctx_len, "learnable context length");
    cmd->add_option("--position", position, "context position: begin | mid");
  }
  PromptTemplate tpl() const {
    return make_template(parse_task(task), parse_style(style), ctx_len, parse_position(position));
  }
};

int run(int argc, char** argv) {
  CLI::App app{"vlmix: mixed-mask vision-language pretraining at desk scale"};
  app.require_subcommand(1);

  Common gen_c;
  std::size_t gen_n = 1000;
  TaskMix mix;
  auto* gen = app.add_subcommand("gen-data", "render a synthetic paired corpus");
  add_common(gen, gen_c, true);
  gen->add_option("--n", gen_n, "number of pairs");
  gen->add_option("--single-object", mix.single_object, "fraction of single-object scenes");
  gen->add_option("--qa", mix.qa, "fraction of scenes carrying a question");
  gen->add_option("--ve", mix.ve, "fraction of scenes carrying an entailment triple");

  Common pre_c;
  std::string pre_data, pre_resume, pre_metrics;
  std::size_t pre_steps = 100, pre_interval = 0;
  std::optional<double> pre_p;
  auto* pre = app.add_subcommand("pretrain", "pretrain with ITC + MLM + ITM");
  add_common(pre, pre_c, true);
  pre->add_option("--data", pre_data, "corpus directory")->required();
  pre->add_option("--steps", pre_steps, "optimizer steps to run");
  pre->add_option("--p-causal", pre_p, "fraction of MLM samples using the causal mask");
  pre->add_option("--resume", pre_resume, "continue from this checkpoint")->check(CLI::ExistingFile);
  pre->add_option("--checkpoint-interval", pre_interval, "also write --out every k steps");
  pre->add_option("--metrics", pre_metrics, "per-step metrics log (stdout when omitted)");

  Common ft_c;
  std::string ft_ckpt, ft_data, ft_freeze = "VE,TE,ME,heads,ctx";
  std::size_t ft_steps = 100, ft_batch = 32, ft_first = 0, ft_limit = 0;
  double ft_lr = 1e-3;
  PromptArgs ft_prompt;
  auto* ft = app.add_subcommand("finetune", "prompt-based fine-tuning");
  add_common(ft, ft_c, true);
  ft->add_option("--checkpoint", ft_ckpt, "pretrained checkpoint")->required()->check(CLI::ExistingFile);
  ft->add_option("--data", ft_data, "corpus directory")->required();
  ft_prompt.add(ft);
  ft->add_option("--freeze", ft_freeze, "trainable components, e.g. VE,ME,ctx");
  ft->add_option("--steps", ft_steps, "optimizer steps");
  ft->add_option("--batch", ft_batch, "examples per step");
  ft->add_option("--lr", ft_lr, "peak learning rate");
  ft->add_option("--first", ft_first, "first corpus example to use");
  ft->add_option("--limit", ft_limit, "number of examples to use (0: all)");

  Common dec_c;
  std::string dec_ckpt, dec_data;
  std::size_t dec_first = 0, dec_limit = 0;
  auto* dec = app.add_subcommand("decode", "caption images with beam search");
  add_common(dec, dec_c, false);
  dec->add_option("--checkpoint", dec_ckpt, "model checkpoint")->required()->check(CLI::ExistingFile);
  dec->add_option("--data", dec_data, "corpus directory")->required();
  dec->add_option("--first", dec_first, "first example");
  dec->add_option("--limit", dec_limit, "number of examples (0: all)");

  Common ret_c;
  std::string ret_ckpt, ret_data, ret_dir = "i2t";
  std::size_t ret_first = 0, ret_limit = 0;
  std::optional<std::size_t> ret_k;
  auto* ret = app.add_subcommand("retrieve", "two-stage image-text retrieval over a gallery");
  add_common(ret, ret_c, false);
  ret->add_option("--checkpoint", ret_ckpt, "model checkpoint")->required()->check(CLI::ExistingFile);
  ret->add_option("--data", ret_data, "corpus directory")->required();
  ret->add_option("--direction", ret_dir, "i2t | t2i");
  ret->add_option("--top-k", ret_k, "candidates reranked by ITM");
  ret->add_option("--first", ret_first, "first example");
  ret->add_option("--limit", ret_limit, "gallery size (0: all)");

  Common ev_c;
  std::string ev_ckpt, ev_data, ev_metric = "caption";
  std::size_t ev_first = 0, ev_limit = 0;
  PromptArgs ev_prompt;
  bool ev_rank = false;
  auto* ev = app.add_subcommand("eval", "score a checkpoint on a corpus");
  add_common(ev, ev_c, false);
  ev->add_option("--checkpoint", ev_ckpt, "model checkpoint")->required()->check(CLI::ExistingFile);
  ev->add_option("--data", ev_data, "corpus directory")->required();
  ev->add_option("--metric", ev_metric, "caption | retrieval | mlm | prompt");
  ev_prompt.add(ev);
  ev->add_flag("--rank", ev_rank, "prompt metric: 1-in-3 restricted ranking (entailment only)");
  ev->add_option("--first", ev_first, "first example");
  ev->add_option("--limit", ev_limit, "number of examples (0: all)");

  Common st_c;
  std::string st_kind, st_grid, st_ckpt;
  std::vector<std::uint64_t> st_seeds;
  std::vector<std::size_t> st_sizes;
  StudySpec st_spec;
  auto* st = app.add_subcommand("study", "run an ablation grid and write a TSV report");
  add_common(st, st_c, false);
  st->add_option("--kind", st_kind, "mask_mix_sweep | prompt_len_pos | few_shot | vqa_domain_split | ve_methods | cls_freeze")
      ->required();
  st->add_option("--grid", st_grid, "comma-separated grid values (default: the kind's grid)");
  st->add_option("--seeds", st_seeds, "seeds (default: --seed)")->delimiter(',');
  st->add_option("--corpus-sizes", st_sizes, "mask_mix_sweep corpus sizes")->delimiter(',');
  st->add_option("--checkpoint", st_ckpt, "pretrained base model instead of pretraining per seed");
  st->add_option("--pretrain-steps", st_spec.pretrain_steps);
  st->add_option("--finetune-steps", st_spec.finetune_steps);
  st->add_option("--classifier-steps", st_spec.classifier_steps);
  st->add_option("--train-size", st_spec.train_size);
  st->add_option("--test-size", st_spec.test_size);
  st->add_option("--answer-list-size", st_spec.answer_list_size);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  if (*gen) {
    const auto vocab = Vocabulary::build(synthetic_lexicon());
    const auto corpus = generate_corpus(vocab, gen_c.seed, gen_n, mix);
    write_corpus(gen_c.out, corpus, vocab);
    std::cerr << "wrote " << corpus.examples.size() << " pairs to " << gen_c.out << "\n";
  } else if (*pre) {
    const auto data = read_corpus(pre_data);
    TrainState<float> state;
    if (!pre_resume.empty()) {
      state = load_state(pre_resume, pre_c.config);
    } else {
      TrainConfig cfg = pre_c.config.empty() ? TrainConfig{} : load_config_file(pre_c.config);
      cfg.encoder.vocab_size = data.vocab.size();
      if (pre_p) cfg.p_causal = *pre_p;
      state = init_training<float>(cfg, pre_c.seed);
    }
    check_vocab(state, data.vocab);
    std::ofstream log_file;
    if (!pre_metrics.empty()) {
      log_file.open(pre_metrics);
      if (!log_file) throw IoError("cannot open '" + pre_metrics + "' for writing");
    }
    std::ostream& log = pre_metrics.empty() ? std::cout : log_file;
    write_metrics_header(log);
    PretrainHooks hooks;
    hooks.checkpoint_interval = pre_interval;
    hooks.checkpoint_path = pre_c.out;
    hooks.on_step = [&](const StepMetrics& m) { write_metrics_line(log, m); };
    pretrain(state, data.corpus.examples, pre_steps, hooks);
  } else if (*ft) {
    const auto data = read_corpus(ft_data);
    auto state = load_state(ft_ckpt, ft_c.config);
    check_vocab(state, data.vocab);
    FinetuneSpec spec;
    spec.tpl = ft_prompt.tpl();
    spec.freeze = FreezeSpec::parse(ft_freeze);
    spec.steps = ft_steps;
    spec.batch_size = ft_batch;
    spec.optimizer = state.config.optimizer;
    spec.optimizer.lr = ft_lr;
    spec.seed = ft_c.seed;
    const auto rep = finetune(state.params, slice(data.corpus.examples, ft_first, ft_limit), data.vocab, spec);
    auto c = to_checkpoint(state);
    c.optimizer.reset();
    save_checkpoint(ft_c.out, c);
    std::cerr << "fine-tuned on " << rep.examples << " examples, final loss "
              << (rep.losses.empty() ? 0.0 : rep.losses.back()) << "\n";
  } else if (*dec) {
    const auto data = read_corpus(dec_data);
    const auto state = load_state(dec_ckpt, dec_c.config);
    check_vocab(state, data.vocab);
    const auto examples = slice(data.corpus.examples, dec_first, dec_limit);
    const auto cls = TokenSequence::from_ids({tok::kCls});
    std::vector<Words> hyps, refs;
    emit(dec_c.out, [&](std::ostream& os) {
      os << "index\tlog_prob\thypothesis\treference\n";
      for (std::size_t i = 0; i < examples.size(); ++i) {
        const auto r = decode(examples[i].image, cls, state.params, state.config.decode);
        const auto text = join_words(strip_sep(r.tokens), data.vocab);
        hyps.push_back(split_words(text));
        refs.push_back(split_words(examples[i].caption_text));
        os << dec_first + i << '\t' << r.log_prob << '\t' << text << '\t' << examples[i].caption_text << '\n';
      }
    });
    if (!hyps.empty()) std::cerr << "BLEU-1 " << bleu1(hyps, refs) << "  BLEU-4 " << bleu4(hyps, refs) << "\n";
  } else if (*ret) {
    const auto data = read_corpus(ret_data);
    auto state = load_state(ret_ckpt, ret_c.config);
    check_vocab(state, data.vocab);
    if (ret_k) state.config.retrieval.top_k = *ret_k;
    if (ret_dir != "i2t" && ret_dir != "t2i") throw ValidationError("--direction must be i2t or t2i");
    const auto examples = slice(data.corpus.examples, ret_first, ret_limit);
    std::vector<const Image*> images;
    std::vector<const TokenSequence*> texts;
    for (const auto& ex : examples) {
      images.push_back(&ex.image);
      texts.push_back(&ex.caption);
    }
    const auto dir = ret_dir == "i2t" ? RetrievalDirection::ImageToText : RetrievalDirection::TextToImage;
    const auto out = retrieve(images, texts, dir, state.params, state.config.retrieval);
    for (const auto& w : out.warnings) std::cerr << "warning: " << w << "\n";
    emit(ret_c.out, [&](std::ostream& os) { write_retrieval_tsv(os, out); });
    const auto gt = caption_ground_truth(examples);
    std::cerr << "R@1 " << recall_at_k(ranked_items(out), gt, 1) << "  R@5 " << recall_at_k(ranked_items(out), gt, 5)
              << "\n";
  } else if (*ev) {
    const auto data = read_corpus(ev_data);
    const auto state = load_state(ev_ckpt, ev_c.config);
    check_vocab(state, data.vocab);
    const auto examples = slice(data.corpus.examples, ev_first, ev_limit);
    std::vector<std::pair<std::string, double>> rows;
    if (ev_metric == "caption") {
      const auto s = caption_scores(state.params, examples, data.vocab, state.config.decode);
      rows = {{"bleu1", s.bleu1}, {"bleu4", s.bleu4}, {"exact", s.exact},
              {"caption_ce", caption_cross_entropy(state.params, examples)}};
    } else if (ev_metric == "retrieval") {
      const auto s = retrieval_scores(state.params, examples, state.config.retrieval);
      rows = {{"i2t_r1", s.i2t_r1}, {"i2t_r5", s.i2t_r5}, {"i2t_r10", s.i2t_r10},
              {"t2i_r1", s.t2i_r1}, {"t2i_r5", s.t2i_r5}, {"t2i_r10", s.t2i_r10}};
    } else if (ev_metric == "mlm") {
      rows = {{"masked_acc_bidirectional", masked_token_accuracy(state.params, examples, AttentionMaskKind::Bidirectional)},
              {"masked_acc_causal", masked_token_accuracy(state.params, examples, AttentionMaskKind::Causal)}};
    } else if (ev_metric == "prompt") {
      const auto tpl = ev_prompt.tpl();
      std::optional<LabelSet> labels;
      if (ev_rank) {
        if (tpl.task != PromptTask::Entailment) throw ValidationError("--rank applies to the entailment task");
        labels = entailment_labels(data.vocab);
      }
      const auto a = evaluate_prompt(state.params, examples, data.vocab, tpl, state.config.decode, labels);
      rows = {{"accuracy", a.overall}, {"examples", static_cast<double>(a.n)}};
    } else {
      throw ValidationError("unknown metric '" + ev_metric + "'");
    }
    emit(ev_c.out, [&](std::ostream& os) {
      os << "metric\tvalue\n";
      for (const auto& [k, v] : rows) os << k << '\t' << detail::fmt(v) << '\n';
    });
  } else if (*st) {
    st_spec.kind = parse_study_kind(st_kind);
    st_spec.grid = split_list(st_grid);
    st_spec.seeds = st_seeds.empty() ? std::vector<std::uint64_t>{st_c.seed} : st_seeds;
    if (!st_sizes.empty()) st_spec.corpus_sizes = st_sizes;
    st_spec.checkpoint = st_ckpt;
    if (!st_c.config.empty()) st_spec.config = load_config_file(st_c.config);
    st_spec.output = st_c.out;
    const auto table = run_study(st_spec);
    if (st_c.out.empty()) std::cout << table.to_tsv();
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 2;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
