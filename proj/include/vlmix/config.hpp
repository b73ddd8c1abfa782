#pragma once

// Configuration records and the plain `key = value` config file format.
//
// Recognized keys (unknown keys are rejected):
//   hidden, heads, visual_layers, text_layers, multimodal_layers, patch,
//   channels, image_height, image_width, max_text_len, vocab_size, mlp_ratio,
//   contrastive_dim, ln_eps, init_std
//   temperature, mask_prob, p_causal
//   lr, weight_decay, beta1, beta2, adam_eps, warmup_steps, decay_steps, batch_size
//   beam_size, max_decode_len, length_normalization, top_k

#include <cstddef>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "vlmix/binary_io.hpp"
#include "vlmix/tensor.hpp"

namespace vlmix {

struct EncoderConfig {
  std::size_t hidden = 64;
  std::size_t heads = 4;
  std::size_t visual_layers = 2;
  std::size_t text_layers = 2;
  std::size_t multimodal_layers = 2;
  std::size_t patch = 8;
  std::size_t channels = 3;
  std::size_t image_height = 32;
  std::size_t image_width = 32;
  std::size_t max_text_len = 48;  // positions after [CLS]
  std::size_t vocab_size = 0;
  std::size_t mlp_ratio = 4;
  std::size_t contrastive_dim = 32;
  double ln_eps = 1e-5;
  double init_std = 0.02;

  std::size_t num_patches() const { return (image_height / patch) * (image_width / patch); }
  std::size_t patch_dim() const { return patch * patch * channels; }
  std::size_t max_positions() const { return max_text_len + 1; }

  void validate() const {
    if (hidden == 0 || heads == 0 || hidden % heads != 0) {
      throw ValidationError("hidden width " + std::to_string(hidden) + " must be divisible by heads " +
                            std::to_string(heads));
    }
    if (patch == 0 || image_height % patch != 0 || image_width % patch != 0) {
      throw ValidationError("image " + std::to_string(image_height) + "x" + std::to_string(image_width) +
                            " is not divisible by patch " + std::to_string(patch));
    }
    if (vocab_size == 0) throw ValidationError("vocab_size must be set");
    if (contrastive_dim == 0 || mlp_ratio == 0) throw ValidationError("contrastive_dim and mlp_ratio must be positive");
  }
};

struct DecodeConfig {
  std::size_t beam_size = 5;
  std::size_t max_len = 20;
  bool length_normalization = false;
};

struct RetrievalConfig {
  std::size_t top_k = 16;
};

struct OptimizerConfig {
  double lr = 1e-4;
  double weight_decay = 0.02;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t warmup_steps = 0;
  std::size_t decay_steps = 0;  // 0: constant after warmup
  double max_grad_norm = 0;     // 0: no clipping
};

struct TrainConfig {
  EncoderConfig encoder;
  OptimizerConfig optimizer;
  DecodeConfig decode;
  RetrievalConfig retrieval;
  double temperature = 0.07;
  double mask_prob = 0.15;
  double p_causal = 0.5;
  std::size_t batch_size = 32;
};

using KeyValues = std::map<std::string, std::string>;

inline KeyValues parse_key_values(const std::string& text) {
  KeyValues kv;
  std::istringstream in(text);
  std::size_t line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ValidationError("config line " + std::to_string(line_no) + ": expected 'key = value'");
    }
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return kv;
}

namespace detail {
inline std::size_t to_size(const std::string& k, const std::string& v) {
  try {
    std::size_t pos = 0;
    const long long x = std::stoll(v, &pos);
    if (pos != v.size() || x < 0) throw std::invalid_argument("");
    return static_cast<std::size_t>(x);
  } catch (const std::exception&) {
    throw ValidationError("config key '" + k + "' expects a non-negative integer, got '" + v + "'");
  }
}
inline double to_double(const std::string& k, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double x = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("");
    return x;
  } catch (const std::exception&) {
    throw ValidationError("config key '" + k + "' expects a number, got '" + v + "'");
  }
}
inline bool to_bool(const std::string& k, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ValidationError("config key '" + k + "' expects true/false, got '" + v + "'");
}
}  // namespace detail

inline void apply_config(TrainConfig& c, const KeyValues& kv) {
  for (const auto& [k, v] : kv) {
    auto& e = c.encoder;
    if (k == "hidden") e.hidden = detail::to_size(k, v);
    else if (k == "heads") e.heads = detail::to_size(k, v);
    else if (k == "visual_layers") e.visual_layers = detail::to_size(k, v);
    else if (k == "text_layers") e.text_layers = detail::to_size(k, v);
    else if (k == "multimodal_layers") e.multimodal_layers = detail::to_size(k, v);
    else if (k == "patch") e.patch = detail::to_size(k, v);
    else if (k == "channels") e.channels = detail::to_size(k, v);
    else if (k == "image_height") e.image_height = detail::to_size(k, v);
    else if (k == "image_width") e.image_width = detail::to_size(k, v);
    else if (k == "max_text_len") e.max_text_len = detail::to_size(k, v);
    else if (k == "vocab_size") e.vocab_size = detail::to_size(k, v);
    else if (k == "mlp_ratio") e.mlp_ratio = detail::to_size(k, v);
    else if (k == "contrastive_dim") e.contrastive_dim = detail::to_size(k, v);
    else if (k == "ln_eps") e.ln_eps = detail::to_double(k, v);
    else if (k == "init_std") e.init_std = detail::to_double(k, v);
    else if (k == "temperature") c.temperature = detail::to_double(k, v);
    else if (k == "mask_prob") c.mask_prob = detail::to_double(k, v);
    else if (k == "p_causal") c.p_causal = detail::to_double(k, v);
    else if (k == "lr") c.optimizer.lr = detail::to_double(k, v);
    else if (k == "weight_decay") c.optimizer.weight_decay = detail::to_double(k, v);
    else if (k == "beta1") c.optimizer.beta1 = detail::to_double(k, v);
    else if (k == "beta2") c.optimizer.beta2 = detail::to_double(k, v);
    else if (k == "adam_eps") c.optimizer.eps = detail::to_double(k, v);
    else if (k == "warmup_steps") c.optimizer.warmup_steps = detail::to_size(k, v);
    else if (k == "decay_steps") c.optimizer.decay_steps = detail::to_size(k, v);
    else if (k == "max_grad_norm") c.optimizer.max_grad_norm = detail::to_double(k, v);
    else if (k == "batch_size") c.batch_size = detail::to_size(k, v);
    else if (k == "beam_size") c.decode.beam_size = detail::to_size(k, v);
    else if (k == "max_decode_len") c.decode.max_len = detail::to_size(k, v);
    else if (k == "length_normalization") c.decode.length_normalization = detail::to_bool(k, v);
    else if (k == "top_k") c.retrieval.top_k = detail::to_size(k, v);
    else throw ValidationError("unknown config key '" + k + "'");
  }
}

// Canonical text form; parse_key_values(config_text(c)) round-trips.
inline std::string config_text(const TrainConfig& c) {
  std::ostringstream os;
  os.precision(17);
  const auto& e = c.encoder;
  os << "hidden = " << e.hidden << "\nheads = " << e.heads << "\nvisual_layers = " << e.visual_layers
     << "\ntext_layers = " << e.text_layers << "\nmultimodal_layers = " << e.multimodal_layers
     << "\npatch = " << e.patch << "\nchannels = " << e.channels << "\nimage_height = " << e.image_height
     << "\nimage_width = " << e.image_width << "\nmax_text_len = " << e.max_text_len
     << "\nvocab_size = " << e.vocab_size << "\nmlp_ratio = " << e.mlp_ratio
     << "\ncontrastive_dim = " << e.contrastive_dim << "\nln_eps = " << e.ln_eps << "\ninit_std = " << e.init_std
     << "\ntemperature = " << c.temperature << "\nmask_prob = " << c.mask_prob << "\np_causal = " << c.p_causal
     << "\nlr = " << c.optimizer.lr << "\nweight_decay = " << c.optimizer.weight_decay
     << "\nbeta1 = " << c.optimizer.beta1 << "\nbeta2 = " << c.optimizer.beta2 << "\nadam_eps = " << c.optimizer.eps
     << "\nwarmup_steps = " << c.optimizer.warmup_steps << "\ndecay_steps = " << c.optimizer.decay_steps
     << "\nmax_grad_norm = " << c.optimizer.max_grad_norm << "\nbatch_size = " << c.batch_size
     << "\nbeam_size = " << c.decode.beam_size << "\nmax_decode_len = " << c.decode.max_len
     << "\nlength_normalization = " << (c.decode.length_normalization ? "true" : "false")
     << "\ntop_k = " << c.retrieval.top_k << "\n";
  return os.str();
}

inline TrainConfig load_config_file(const std::string& path, TrainConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  apply_config(base, parse_key_values(ss.str()));
  return base;
}

}  // namespace vlmix
