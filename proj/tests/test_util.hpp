#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "vlmix/vlmix.hpp"

namespace vlmix::testing {

// Worst norm-relative error between analytic and central-difference
// gradients over the listed inputs. `entries[i]`, when non-empty, restricts
// the comparison for input i to those flat indices.
inline double gradcheck(const std::vector<Tensor<double>>& inputs, const std::function<Tensor<double>()>& f,
                        const std::vector<std::vector<std::size_t>>& entries = {}, double h = 1e-6,
                        double floor = 1e-10) {
  for (auto t : inputs) t.zero_grad();
  auto loss = f();
  backward(loss);
  double worst = 0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto x = inputs[k];
    std::vector<std::size_t> idx;
    if (k < entries.size() && !entries[k].empty()) {
      idx = entries[k];
    } else {
      for (std::size_t i = 0; i < x.numel(); ++i) idx.push_back(i);
    }
    double diff2 = 0, a2 = 0, n2 = 0;
    for (auto i : idx) {
      const double analytic = x.has_grad() ? x.grad()[i] : 0.0;
      const double orig = x.data()[i];
      double fp, fm;
      {
        NoGradGuard ng;
        x.data()[i] = orig + h;
        fp = f().item();
        x.data()[i] = orig - h;
        fm = f().item();
        x.data()[i] = orig;
      }
      const double numeric = (fp - fm) / (2 * h);
      diff2 += (analytic - numeric) * (analytic - numeric);
      a2 += analytic * analytic;
      n2 += numeric * numeric;
    }
    const double denom = std::max({std::sqrt(a2), std::sqrt(n2), floor});
    worst = std::max(worst, std::sqrt(diff2) / denom);
  }
  return worst;
}

inline Tensor<double> random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = scale * standard_normal(rng);
  return Tensor<double>::from(std::move(shape), std::move(v), true);
}

inline const Vocabulary& lexicon_vocab() {
  static const Vocabulary v = Vocabulary::build(synthetic_lexicon());
  return v;
}

// Small enough for exhaustive checks, large enough to exercise every path.
inline EncoderConfig tiny_config() {
  EncoderConfig c;
  c.hidden = 8;
  c.heads = 2;
  c.visual_layers = 1;
  c.text_layers = 1;
  c.multimodal_layers = 1;
  c.patch = 16;
  c.mlp_ratio = 2;
  c.contrastive_dim = 4;
  c.vocab_size = lexicon_vocab().size();
  return c;
}

inline TrainConfig tiny_train_config() {
  TrainConfig t;
  t.encoder = tiny_config();
  t.batch_size = 8;
  return t;
}

template <typename T>
std::vector<T> values(const Tensor<T>& t) {
  return {t.data().begin(), t.data().end()};
}

}  // namespace vlmix::testing
