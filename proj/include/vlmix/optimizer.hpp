#pragma once

// AdamW with decoupled weight decay over an explicit list of trainable
// tensors. A trainable entry may be restricted to a subset of rows.

#include <cmath>
#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "vlmix/config.hpp"
#include "vlmix/encoders.hpp"
#include "vlmix/tensor.hpp"

namespace vlmix {

template <typename T>
struct TrainableParam {
  std::string name;
  Tensor<T> tensor;
  std::vector<std::size_t> rows;  // empty: every row
  bool decay = true;
};

template <typename T>
struct ParamPartition {
  std::vector<TrainableParam<T>> trainable;
  std::vector<std::string> frozen;

  const TrainableParam<T>* find(const std::string& name) const {
    for (const auto& p : trainable)
      if (p.name == name) return &p;
    return nullptr;
  }
};

// Decay applies to weight matrices only; biases, layer-norm parameters and
// embeddings are excluded.
inline bool decays(ParamRole role) { return role == ParamRole::Weight; }

template <typename T>
ParamPartition<T> full_partition(TriEncoderParams<T>& params) {
  ParamPartition<T> part;
  params.for_each([&](const std::string& name, Tensor<T>& t, ParamRole role) {
    t.set_requires_grad(true);
    part.trainable.push_back({name, t, {}, decays(role)});
  });
  return part;
}

template <typename T>
struct AdamWState {
  std::size_t step = 0;
  std::map<std::string, std::vector<T>> m;
  std::map<std::string, std::vector<T>> v;
};

template <typename T>
class AdamW {
 public:
  explicit AdamW(OptimizerConfig cfg = {}) : cfg_(cfg) {}

  const OptimizerConfig& config() const { return cfg_; }
  AdamWState<T>& state() { return state_; }
  const AdamWState<T>& state() const { return state_; }

  // Linear warmup over warmup_steps, then constant, or a linear ramp down to
  // zero at decay_steps when that is set.
  double current_lr() const {
    const double s = static_cast<double>(state_.step + 1);
    double f = 1.0;
    if (cfg_.warmup_steps > 0) f = std::min(f, s / static_cast<double>(cfg_.warmup_steps));
    if (cfg_.decay_steps > cfg_.warmup_steps && s > static_cast<double>(cfg_.warmup_steps)) {
      const double span = static_cast<double>(cfg_.decay_steps - cfg_.warmup_steps);
      f = std::max(0.0, 1.0 - (s - static_cast<double>(cfg_.warmup_steps)) / span);
    }
    return cfg_.lr * f;
  }

  // Throws NumericError naming the first tensor with a non-finite gradient;
  // nothing is updated in that case.
  void step(ParamPartition<T>& part) {
    for (auto& p : part.trainable) {
      if (!p.tensor.has_grad()) continue;
      for (T g : p.tensor.grad())
        if (!std::isfinite(static_cast<double>(g))) throw NumericError("non-finite gradient in '" + p.name + "'");
    }
    const double lr = current_lr();
    const T clip = static_cast<T>(clip_scale(part));
    ++state_.step;
    const double b1 = cfg_.beta1, b2 = cfg_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(state_.step));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(state_.step));
    for (auto& p : part.trainable) {
      if (!p.tensor.has_grad()) continue;
      auto& m = state_.m[p.name];
      auto& v = state_.v[p.name];
      const std::size_t n = p.tensor.numel();
      if (m.size() != n) {
        m.assign(n, T(0));
        v.assign(n, T(0));
      }
      auto w = p.tensor.data();
      auto g = p.tensor.grad();
      const T wd = p.decay ? static_cast<T>(cfg_.weight_decay) : T(0);
      auto update = [&](std::size_t i) {
        const T gi = g[i] * clip;
        m[i] = static_cast<T>(b1) * m[i] + static_cast<T>(1 - b1) * gi;
        v[i] = static_cast<T>(b2) * v[i] + static_cast<T>(1 - b2) * gi * gi;
        const T mhat = m[i] / static_cast<T>(c1);
        const T vhat = v[i] / static_cast<T>(c2);
        w[i] -= static_cast<T>(lr) * wd * w[i];
        w[i] -= static_cast<T>(lr) * mhat / (std::sqrt(vhat) + static_cast<T>(cfg_.eps));
      };
      if (p.rows.empty()) {
        for (std::size_t i = 0; i < n; ++i) update(i);
      } else {
        const std::size_t c = p.tensor.cols();
        for (std::size_t r : p.rows)
          for (std::size_t j = 0; j < c; ++j) update(r * c + j);
      }
    }
  }

  void zero_grad(ParamPartition<T>& part) {
    for (auto& p : part.trainable) p.tensor.zero_grad();
  }

 private:
  // Factor bringing the global gradient norm (over updated entries) down to
  // max_grad_norm; 1 when clipping is off or not needed.
  double clip_scale(const ParamPartition<T>& part) const {
    if (cfg_.max_grad_norm <= 0) return 1.0;
    double sq = 0;
    for (const auto& p : part.trainable) {
      if (!p.tensor.has_grad()) continue;
      auto g = p.tensor.grad();
      if (p.rows.empty()) {
        for (T x : g) sq += static_cast<double>(x) * static_cast<double>(x);
      } else {
        const std::size_t c = p.tensor.cols();
        for (std::size_t r : p.rows)
          for (std::size_t j = 0; j < c; ++j) sq += static_cast<double>(g[r * c + j]) * static_cast<double>(g[r * c + j]);
      }
    }
    const double norm = std::sqrt(sq);
    return norm > cfg_.max_grad_norm ? cfg_.max_grad_norm / norm : 1.0;
  }

  OptimizerConfig cfg_;
  AdamWState<T> state_;
};

}  // namespace vlmix
