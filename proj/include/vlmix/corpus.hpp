#pragma once

// Deterministic synthetic image-caption corpus with optional question
// answering, classification and entailment annotations, plus the batch
// builders for masked language modeling and image-text matching.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "vlmix/binary_io.hpp"
#include "vlmix/rng.hpp"
#include "vlmix/scene.hpp"
#include "vlmix/vocab.hpp"

namespace vlmix {

enum class EntailmentLabel : std::uint8_t { Entailment, Neutral, Contradiction };

inline std::string label_name(EntailmentLabel l) {
  switch (l) {
    case EntailmentLabel::Entailment: return "entailment";
    case EntailmentLabel::Neutral: return "neutral";
    case EntailmentLabel::Contradiction: return "contradiction";
  }
  return "";
}

struct QaPair {
  std::string question;
  std::string answer;
};

struct EntailmentTriple {
  std::string hypothesis;
  EntailmentLabel label = EntailmentLabel::Entailment;
};

struct PairedExample {
  SyntheticScene scene;
  Image image;
  std::string caption_text;
  TokenSequence caption;
  std::optional<QaPair> qa;
  std::optional<std::string> class_label;
  std::optional<EntailmentTriple> entailment;
};

// Per-example probabilities: `single_object` scenes carry a class label;
// `qa` and `ve` decide whether the annotation is attached.
struct TaskMix {
  double single_object = 0.25;
  double qa = 1.0;
  double ve = 1.0;
};

struct Corpus {
  std::uint64_t seed = 0;
  std::vector<PairedExample> examples;
  std::vector<std::string> class_names;       // sorted
  std::vector<std::string> answer_inventory;  // by frequency, then lexicographic
};

// ---------------------------------------------------------------------------
// Question answering and entailment generators with their checkers.

inline std::optional<std::string> answer_question(const SyntheticScene& scene, const std::string& question) {
  const auto w = split_words(question);
  auto is = [&](std::initializer_list<const char*> prefix) {
    if (w.size() < prefix.size()) return false;
    std::size_t i = 0;
    for (const char* p : prefix)
      if (w[i++] != p) return false;
    return true;
  };
  if (w.size() == 5 && is({"what", "color", "is", "the"})) {
    auto s = parse_shape(w[4]);
    if (!s || scene.count_shape(*s) != 1) return std::nullopt;
    for (const auto& o : scene.objects)
      if (o.shape == *s) return color_name(o.color);
  }
  if (w.size() == 6 && is({"what", "shape", "is", "the"}) && w[5] == "one") {
    auto c = parse_color(w[4]);
    if (!c || scene.count_color(*c) != 1) return std::nullopt;
    for (const auto& o : scene.objects)
      if (o.color == *c) return shape_name(o.shape);
  }
  if (w.size() == 5 && is({"how", "many", "shapes", "are", "there"})) {
    if (scene.objects.size() == 1) return "one";
    if (scene.objects.size() == 2) return "two";
    return std::nullopt;
  }
  if (w.size() == 5 && is({"is", "there", "a"})) {
    auto c = parse_color(w[3]);
    auto s = parse_shape(w[4]);
    if (!c || !s) return std::nullopt;
    return scene.find(*c, *s) ? "yes" : "no";
  }
  if (w.size() == 5 && is({"where", "is", "the"})) {
    auto c = parse_color(w[3]);
    auto s = parse_shape(w[4]);
    if (!c || !s) return std::nullopt;
    const SceneObject* o = scene.find(*c, *s);
    if (!o) return std::nullopt;
    return cell_phrase(*o);
  }
  if (w.size() == 6 && is({"what", "is", "above", "the"})) {
    auto c = parse_color(w[4]);
    auto s = parse_shape(w[5]);
    if (!c || !s) return std::nullopt;
    const SceneObject* b = scene.find(*c, *s);
    if (!b) return std::nullopt;
    for (const auto& o : scene.objects)
      if (o.col == b->col && o.row < b->row) return object_phrase(o);
    return std::nullopt;
  }
  return std::nullopt;
}

inline QaPair make_question(const SyntheticScene& scene, Rng& rng) {
  std::vector<std::string> candidates;
  for (const auto& o : scene.objects) {
    if (scene.count_shape(o.shape) == 1) candidates.push_back("what color is the " + shape_name(o.shape));
    if (scene.count_color(o.color) == 1) candidates.push_back("what shape is the " + color_name(o.color) + " one");
    candidates.push_back("where is the " + object_phrase(o));
    for (const auto& up : scene.objects)
      if (up.col == o.col && up.row < o.row) candidates.push_back("what is above the " + object_phrase(o));
  }
  candidates.push_back("how many shapes are there");
  candidates.push_back("is there a");  // completed below
  std::string q = candidates[uniform_index(rng, candidates.size())];
  if (q == "is there a") {
    if (bernoulli(rng, 0.5)) {
      q += " " + object_phrase(scene.objects[uniform_index(rng, scene.objects.size())]);
    } else {
      for (;;) {
        const auto c = static_cast<Color>(uniform_index(rng, kColorNames.size()));
        const auto s = static_cast<ShapeKind>(uniform_index(rng, kShapeNames.size()));
        if (!scene.find(c, s)) {
          q += " " + color_name(c) + " " + shape_name(s);
          break;
        }
      }
    }
  }
  return {q, *answer_question(scene, q)};
}

inline std::optional<EntailmentLabel> judge_hypothesis(const SyntheticScene& scene, const std::string& hypothesis) {
  const auto w = split_words(hypothesis);
  if (w.size() < 5 || w[0] != "there" || w[1] != "is" || w[2] != "a") return std::nullopt;
  if (w.size() == 6) {
    if (std::find(kNeutralAttributes.begin(), kNeutralAttributes.end(), w[3]) == kNeutralAttributes.end())
      return std::nullopt;
    auto c = parse_color(w[4]);
    auto s = parse_shape(w[5]);
    if (!c || !s || !scene.find(*c, *s)) return std::nullopt;
    return EntailmentLabel::Neutral;
  }
  if (w.size() != 5) return std::nullopt;
  auto c = parse_color(w[3]);
  auto s = parse_shape(w[4]);
  if (!c || !s) return std::nullopt;
  return scene.find(*c, *s) ? EntailmentLabel::Entailment : EntailmentLabel::Contradiction;
}

inline EntailmentTriple make_entailment(const SyntheticScene& scene, Rng& rng) {
  const auto label = static_cast<EntailmentLabel>(uniform_index(rng, 3));
  const SceneObject& o = scene.objects[uniform_index(rng, scene.objects.size())];
  std::string h;
  switch (label) {
    case EntailmentLabel::Entailment: h = "there is a " + object_phrase(o); break;
    case EntailmentLabel::Neutral:
      h = std::string("there is a ") + kNeutralAttributes[uniform_index(rng, kNeutralAttributes.size())] + " " +
          object_phrase(o);
      break;
    case EntailmentLabel::Contradiction: {
      // Flip the color to one that no object of this shape has.
      std::vector<Color> options;
      for (std::size_t c = 0; c < kColorNames.size(); ++c)
        if (!scene.find(static_cast<Color>(c), o.shape)) options.push_back(static_cast<Color>(c));
      h = "there is a " + color_name(options[uniform_index(rng, options.size())]) + " " + shape_name(o.shape);
      break;
    }
  }
  return {h, label};
}

// ---------------------------------------------------------------------------

inline SyntheticScene random_scene(Rng& rng, std::size_t n_objects) {
  SyntheticScene scene;
  std::vector<int> cells{0, 1, 2, 3};
  shuffle(cells.begin(), cells.end(), rng);
  while (scene.objects.size() < n_objects) {
    SceneObject o;
    o.color = static_cast<Color>(uniform_index(rng, kColorNames.size()));
    o.shape = static_cast<ShapeKind>(uniform_index(rng, kShapeNames.size()));
    if (scene.find(o.color, o.shape)) continue;
    const int cell = cells[scene.objects.size()];
    o.row = cell / SyntheticScene::kGrid;
    o.col = cell % SyntheticScene::kGrid;
    scene.objects.push_back(o);
  }
  scene.sort_reading_order();
  return scene;
}

inline PairedExample make_example(const SyntheticScene& scene, const Vocabulary& vocab, Rng& rng,
                                  const TaskMix& mix) {
  PairedExample ex;
  ex.scene = scene;
  ex.image = render_scene(scene);
  ex.caption_text = describe(scene);
  ex.caption = tokenize(ex.caption_text, vocab);
  if (scene.objects.size() == 1) ex.class_label = object_phrase(scene.objects[0]);
  if (mix.qa > 0 && bernoulli(rng, mix.qa)) ex.qa = make_question(scene, rng);
  if (mix.ve > 0 && bernoulli(rng, mix.ve)) ex.entailment = make_entailment(scene, rng);
  return ex;
}

// Examples are drawn from per-index streams. A scene that repeats an earlier
// one is redrawn a bounded number of times; single-object scenes are few, so
// large corpora do contain repeats.
inline Corpus generate_corpus(const Vocabulary& vocab, std::uint64_t seed, std::size_t n, const TaskMix& mix = {}) {
  if (n == 0) throw ValidationError("generate_corpus needs at least one example");
  Corpus corpus;
  corpus.seed = seed;
  std::vector<SyntheticScene> seen;
  for (std::size_t i = 0; i < n; ++i) {
    SyntheticScene scene;
    Rng rng;
    for (std::uint64_t attempt = 0;; ++attempt) {
      rng = stream_rng(seed, i, attempt + 1);
      const std::size_t n_obj = bernoulli(rng, mix.single_object) ? 1 : 2;
      scene = random_scene(rng, n_obj);
      if (attempt >= 16 || std::find(seen.begin(), seen.end(), scene) == seen.end()) break;
    }
    seen.push_back(scene);
    corpus.examples.push_back(make_example(scene, vocab, rng, mix));
  }
  std::map<std::string, std::size_t> answers;
  std::set<std::string> classes;
  for (const auto& ex : corpus.examples) {
    if (ex.qa) ++answers[ex.qa->answer];
    if (ex.class_label) classes.insert(*ex.class_label);
  }
  corpus.class_names.assign(classes.begin(), classes.end());
  std::vector<std::pair<std::string, std::size_t>> sorted(answers.begin(), answers.end());
  std::stable_sort(sorted.begin(), sorted.end(), [](auto& a, auto& b) { return a.second > b.second; });
  for (auto& [a, _] : sorted) corpus.answer_inventory.push_back(a);
  return corpus;
}

// ---------------------------------------------------------------------------
// Masked language modeling.

inline bool is_maskable(int id) { return !Vocabulary::is_special(id) && !Vocabulary::is_ctx(id); }

// Each maskable token is replaced by [MASK] independently with probability
// mask_prob; the original ids are recorded as targets.
inline std::vector<TokenSequence> make_mlm_batch(const std::vector<TokenSequence>& seqs, double mask_prob, Rng& rng) {
  if (mask_prob < 0.0 || mask_prob > 1.0) throw ValidationError("mask_prob must lie in [0, 1]");
  std::vector<TokenSequence> out;
  out.reserve(seqs.size());
  for (const auto& s : seqs) {
    TokenSequence m = s;
    m.mask_positions.clear();
    m.targets.clear();
    for (std::size_t i = 0; i < m.ids.size(); ++i) {
      if (!m.visible[i] || !is_maskable(m.ids[i])) continue;
      if (bernoulli(rng, mask_prob)) {
        m.mask_positions.push_back(i);
        m.targets.push_back(m.ids[i]);
        m.ids[i] = tok::kMask;
      }
    }
    out.push_back(std::move(m));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Image-text matching: every positive gets one negative.

struct ItmPair {
  std::size_t image = 0;  // index into the batch
  std::size_t text = 0;
  int label = 1;  // 1 matched, 0 not matched
  bool image_swapped = false;
};

inline std::vector<ItmPair> make_itm_batch(const std::vector<const PairedExample*>& batch, Rng& rng) {
  if (batch.size() < 2) throw ValidationError("image-text matching needs a batch of at least 2");
  std::vector<ItmPair> pairs;
  for (std::size_t i = 0; i < batch.size(); ++i) pairs.push_back({i, i, 1, false});
  for (std::size_t i = 0; i < batch.size(); ++i) {
    std::vector<std::size_t> donors;
    for (std::size_t j = 0; j < batch.size(); ++j) {
      if (j != i && !(batch[j]->scene == batch[i]->scene) && batch[j]->caption_text != batch[i]->caption_text)
        donors.push_back(j);
    }
    if (donors.empty()) throw ValidationError("no negative source for batch item " + std::to_string(i));
    const bool swap_image = bernoulli(rng, 0.5);
    const std::size_t j = donors[uniform_index(rng, donors.size())];
    pairs.push_back(swap_image ? ItmPair{j, i, 0, true} : ItmPair{i, j, 0, false});
  }
  return pairs;
}

inline std::vector<ItmPair> make_itm_batch(const std::vector<PairedExample>& batch, Rng& rng) {
  std::vector<const PairedExample*> ptrs;
  for (const auto& e : batch) ptrs.push_back(&e);
  return make_itm_batch(ptrs, rng);
}

// ---------------------------------------------------------------------------
// Closed answer lists for discriminative question answering.

struct AnswerLists {
  std::vector<std::string> in_domain;  // top-M answers
  std::vector<std::string> inventory;  // every training answer, same order
  std::map<std::string, std::size_t> counts;

  bool is_in_domain(const std::string& a) const {
    return std::find(in_domain.begin(), in_domain.end(), a) != in_domain.end();
  }
};

inline AnswerLists build_answer_lists(const std::vector<PairedExample>& train, int list_size) {
  if (list_size <= 0) throw ValidationError("answer list size must be positive");
  AnswerLists out;
  for (const auto& ex : train)
    if (ex.qa) ++out.counts[ex.qa->answer];
  if (static_cast<std::size_t>(list_size) > out.counts.size()) {
    throw ValidationError("answer list size " + std::to_string(list_size) + " exceeds " +
                          std::to_string(out.counts.size()) + " distinct training answers");
  }
  std::vector<std::pair<std::string, std::size_t>> sorted(out.counts.begin(), out.counts.end());
  std::stable_sort(sorted.begin(), sorted.end(), [](auto& a, auto& b) { return a.second > b.second; });
  for (auto& [a, _] : sorted) out.inventory.push_back(a);
  out.in_domain.assign(out.inventory.begin(), out.inventory.begin() + list_size);
  return out;
}

// ---------------------------------------------------------------------------
// Export. `manifest.txt` describes the corpus; `records.bin` holds one record
// per example in the layout written into the manifest header.

inline constexpr int kCorpusFormatVersion = 1;

inline const char* kRecordLayout =
    "# records.bin, little-endian, one record per example:\n"
    "#   u32 channels, u32 height, u32 width, f32[channels*height*width] pixels (channel-major)\n"
    "#   u32 n_objects, then per object: u8 shape, u8 color, u8 row, u8 col\n"
    "#   u32 n, i32[n] caption ids (with [CLS]/[SEP])\n"
    "#   u8 has_qa [u32 n, i32[n] question word ids, u32 m, i32[m] answer word ids]\n"
    "#   u8 has_class [u32 n, i32[n] class name word ids]\n"
    "#   u8 has_entailment [u32 n, i32[n] hypothesis word ids, u8 label (0 entailment, 1 neutral, 2 contradiction)]\n";

namespace detail {
inline void put_ids(ByteWriter& w, const std::vector<int>& ids) {
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ids.size()));
  for (int id : ids) w.put<std::int32_t>(id);
}
inline std::vector<int> get_ids(ByteReader& r) {
  const auto n = r.get<std::uint32_t>();
  std::vector<int> ids(n);
  for (auto& id : ids) id = r.get<std::int32_t>();
  return ids;
}
inline std::string join(const std::vector<std::string>& v, char sep) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? std::string(1, sep) : "") + v[i];
  return out;
}
inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  if (s.empty()) return out;
  std::string cur;
  for (char ch : s) {
    if (ch == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += ch;
    }
  }
  out.push_back(cur);
  return out;
}
}  // namespace detail

inline void write_corpus(const std::filesystem::path& dir, const Corpus& corpus, const Vocabulary& vocab) {
  std::filesystem::create_directories(dir);
  std::ostringstream m;
  m << "# vlmix synthetic corpus manifest\n" << kRecordLayout;
  m << "version = " << kCorpusFormatVersion << "\n";
  m << "seed = " << corpus.seed << "\n";
  m << "count = " << corpus.examples.size() << "\n";
  m << "vocab = " << detail::join(vocab.words(), ' ') << "\n";
  m << "class_names = " << detail::join(corpus.class_names, '|') << "\n";
  m << "answer_inventory = " << detail::join(corpus.answer_inventory, '|') << "\n";
  const std::string text = m.str();
  write_file_bytes((dir / "manifest.txt").string(), {text.begin(), text.end()});

  ByteWriter w;
  for (const auto& ex : corpus.examples) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(ex.image.channels));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(ex.image.height));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(ex.image.width));
    for (float p : ex.image.pixels) w.put<float>(p);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(ex.scene.objects.size()));
    for (const auto& o : ex.scene.objects) {
      w.put<std::uint8_t>(static_cast<std::uint8_t>(o.shape));
      w.put<std::uint8_t>(static_cast<std::uint8_t>(o.color));
      w.put<std::uint8_t>(static_cast<std::uint8_t>(o.row));
      w.put<std::uint8_t>(static_cast<std::uint8_t>(o.col));
    }
    detail::put_ids(w, ex.caption.ids);
    w.put<std::uint8_t>(ex.qa ? 1 : 0);
    if (ex.qa) {
      detail::put_ids(w, encode_words(ex.qa->question, vocab));
      detail::put_ids(w, encode_words(ex.qa->answer, vocab));
    }
    w.put<std::uint8_t>(ex.class_label ? 1 : 0);
    if (ex.class_label) detail::put_ids(w, encode_words(*ex.class_label, vocab));
    w.put<std::uint8_t>(ex.entailment ? 1 : 0);
    if (ex.entailment) {
      detail::put_ids(w, encode_words(ex.entailment->hypothesis, vocab));
      w.put<std::uint8_t>(static_cast<std::uint8_t>(ex.entailment->label));
    }
  }
  write_file_bytes((dir / "records.bin").string(), w.bytes());
}

struct LoadedCorpus {
  Corpus corpus;
  Vocabulary vocab;
};

inline LoadedCorpus read_corpus(const std::filesystem::path& dir) {
  const auto mbytes = read_file_bytes((dir / "manifest.txt").string());
  std::istringstream in(std::string(mbytes.begin(), mbytes.end()));
  std::map<std::string, std::string> kv;
  for (std::string line; std::getline(in, line);) {
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find(" = ");
    if (eq == std::string::npos) throw IoError("malformed manifest line: " + line);
    kv[line.substr(0, eq)] = line.substr(eq + 3);
  }
  if (kv["version"] != std::to_string(kCorpusFormatVersion)) {
    throw IoError("unsupported corpus version '" + kv["version"] + "'");
  }
  LoadedCorpus out{{}, Vocabulary::build(split_words(kv["vocab"]))};
  auto& corpus = out.corpus;
  const auto& vocab = out.vocab;
  corpus.seed = std::stoull(kv["seed"]);
  corpus.class_names = detail::split(kv["class_names"], '|');
  corpus.answer_inventory = detail::split(kv["answer_inventory"], '|');
  const std::size_t count = std::stoull(kv["count"]);

  ByteReader r(read_file_bytes((dir / "records.bin").string()));
  for (std::size_t i = 0; i < count; ++i) {
    PairedExample ex;
    ex.image.channels = r.get<std::uint32_t>();
    ex.image.height = r.get<std::uint32_t>();
    ex.image.width = r.get<std::uint32_t>();
    ex.image.pixels.resize(ex.image.channels * ex.image.height * ex.image.width);
    for (auto& p : ex.image.pixels) p = r.get<float>();
    const auto n_obj = r.get<std::uint32_t>();
    for (std::uint32_t k = 0; k < n_obj; ++k) {
      SceneObject o;
      o.shape = static_cast<ShapeKind>(r.get<std::uint8_t>());
      o.color = static_cast<Color>(r.get<std::uint8_t>());
      o.row = r.get<std::uint8_t>();
      o.col = r.get<std::uint8_t>();
      ex.scene.objects.push_back(o);
    }
    ex.caption = TokenSequence::from_ids(detail::get_ids(r));
    ex.caption_text = detokenize(ex.caption, vocab);
    if (r.get<std::uint8_t>()) {
      QaPair qa;
      qa.question = join_words(detail::get_ids(r), vocab);
      qa.answer = join_words(detail::get_ids(r), vocab);
      ex.qa = qa;
    }
    if (r.get<std::uint8_t>()) ex.class_label = join_words(detail::get_ids(r), vocab);
    if (r.get<std::uint8_t>()) {
      EntailmentTriple e;
      e.hypothesis = join_words(detail::get_ids(r), vocab);
      e.label = static_cast<EntailmentLabel>(r.get<std::uint8_t>());
      ex.entailment = e;
    }
    corpus.examples.push_back(std::move(ex));
  }
  if (r.remaining() != 0) throw IoError("records.bin has trailing bytes");
  return out;
}

}  // namespace vlmix
