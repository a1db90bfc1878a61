#pragma once

#include <array>
#include <cctype>
#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "mmel/errors.hpp"
#include "mmel/rng.hpp"
#include "mmel/tensor.hpp"

namespace mmel {

struct ModelConfig {
  std::size_t image_size = 32;
  std::size_t patch_size = 8;
  std::size_t d_model = 32;
  std::size_t n_heads = 4;
  std::size_t n_layers_v = 4;
  std::size_t n_layers_t = 4;
  std::size_t mlp_ratio = 4;
  std::size_t d_shared = 16;
  std::size_t vocab_size = 64;
  std::size_t max_text_len = 8;
  double ln_eps = 1e-5;

  std::size_t grid() const { return image_size / patch_size; }
  std::size_t n_patches() const { return grid() * grid(); }
  std::size_t n_tokens_v() const { return n_patches() + 1; }
  std::size_t n_tokens_t() const { return max_text_len; }
  std::size_t d_head() const { return d_model / n_heads; }
  std::size_t d_mlp() const { return mlp_ratio * d_model; }
  std::size_t patch_dim() const { return 3 * patch_size * patch_size; }

  void validate() const {
    if (image_size == 0 || patch_size == 0 || image_size % patch_size != 0)
      throw ParameterError("image_size must be a positive multiple of patch_size");
    if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0)
      throw ParameterError("d_model must be a positive multiple of n_heads");
    if (n_layers_v == 0 || n_layers_t == 0) throw ParameterError("layer counts must be positive");
    if (mlp_ratio == 0 || d_shared == 0) throw ParameterError("mlp_ratio and d_shared must be positive");
    if (vocab_size <= 3) throw ParameterError("vocab_size must exceed the 3 special tokens");
    if (max_text_len < 2) throw ParameterError("max_text_len must hold at least BOS and EOS");
    if (!(ln_eps >= 0.0)) throw ParameterError("ln_eps must be non-negative");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// Tiny gradient-oracle configuration: 8px image, 4px patches -> 5 vision tokens.
inline ModelConfig oracle_config() {
  ModelConfig c;
  c.image_size = 8;
  c.patch_size = 4;
  c.d_model = 8;
  c.n_heads = 2;
  c.n_layers_v = 2;
  c.n_layers_t = 2;
  c.mlp_ratio = 2;
  c.d_shared = 4;
  c.vocab_size = 16;
  c.max_text_len = 5;
  return c;
}

enum class Tower { vision, text };

inline std::string_view tower_prefix(Tower t) { return t == Tower::vision ? "vision" : "text"; }

enum class Init { gaussian, ones, zeros };

struct TensorSpec {
  std::string name;
  Shape shape;
  Init init;
};

inline std::string layer_name(Tower t, std::size_t layer, std::string_view leaf) {
  return std::string(tower_prefix(t)) + "/layer" + std::to_string(layer) + "/" + std::string(leaf);
}

// Fixed generation order of the model tensors. Gaussian tensors consume the
// PRNG stream in this order, each in row-major order. Linear weights are
// stored in×out (y = x·W + b).
inline std::vector<TensorSpec> model_layout(const ModelConfig& c) {
  const std::size_t d = c.d_model;
  std::vector<TensorSpec> out;
  auto blocks = [&](Tower t, std::size_t layers) {
    for (std::size_t l = 0; l < layers; ++l) {
      out.push_back({layer_name(t, l, "ln1.gamma"), {d}, Init::ones});
      out.push_back({layer_name(t, l, "ln1.beta"), {d}, Init::zeros});
      out.push_back({layer_name(t, l, "attn.qkv.weight"), {d, 3 * d}, Init::gaussian});
      out.push_back({layer_name(t, l, "attn.qkv.bias"), {3 * d}, Init::gaussian});
      out.push_back({layer_name(t, l, "attn.out.weight"), {d, d}, Init::gaussian});
      out.push_back({layer_name(t, l, "attn.out.bias"), {d}, Init::gaussian});
      out.push_back({layer_name(t, l, "ln2.gamma"), {d}, Init::ones});
      out.push_back({layer_name(t, l, "ln2.beta"), {d}, Init::zeros});
      out.push_back({layer_name(t, l, "mlp.fc1.weight"), {d, c.d_mlp()}, Init::gaussian});
      out.push_back({layer_name(t, l, "mlp.fc1.bias"), {c.d_mlp()}, Init::gaussian});
      out.push_back({layer_name(t, l, "mlp.fc2.weight"), {c.d_mlp(), d}, Init::gaussian});
      out.push_back({layer_name(t, l, "mlp.fc2.bias"), {d}, Init::gaussian});
    }
  };
  out.push_back({"vision/patch_proj", {c.patch_dim(), d}, Init::gaussian});
  out.push_back({"vision/class_token", {d}, Init::gaussian});
  out.push_back({"vision/pos_embed", {c.n_tokens_v(), d}, Init::gaussian});
  blocks(Tower::vision, c.n_layers_v);
  out.push_back({"vision/ln_final.gamma", {d}, Init::ones});
  out.push_back({"vision/ln_final.beta", {d}, Init::zeros});
  out.push_back({"vision/proj", {d, c.d_shared}, Init::gaussian});

  out.push_back({"text/token_embed", {c.vocab_size, d}, Init::gaussian});
  out.push_back({"text/pos_embed", {c.n_tokens_t(), d}, Init::gaussian});
  blocks(Tower::text, c.n_layers_t);
  out.push_back({"text/ln_final.gamma", {d}, Init::ones});
  out.push_back({"text/ln_final.beta", {d}, Init::zeros});
  out.push_back({"text/proj", {d, c.d_shared}, Init::gaussian});
  return out;
}

// Semantic-enhancer tensors, drawn from their own stream (see enhancer_seed).
// theta is the pre-softplus layer weight, one per vision layer, initialised to 1.
inline std::vector<TensorSpec> enhancer_layout(const ModelConfig& c) {
  const std::size_t d = c.d_model;
  return {
      {"enhancer/fc1.weight", {d, 2 * d}, Init::gaussian},
      {"enhancer/fc1.bias", {2 * d}, Init::gaussian},
      {"enhancer/fc2.weight", {2 * d, d}, Init::gaussian},
      {"enhancer/fc2.bias", {d}, Init::gaussian},
      {"enhancer/ln.gamma", {d}, Init::ones},
      {"enhancer/ln.beta", {d}, Init::zeros},
      {"enhancer/theta", {c.n_layers_v}, Init::ones},
  };
}

// Scalar enhancer hyperparameters; persisted in the weight-file JSON header.
struct EnhancerScalars {
  double alpha = 2.0;
  double temperature = 0.1;
  double beta = 2.0;
  std::vector<double> scales{1.0, 0.75, 0.5};

  void validate() const {
    if (!(alpha >= 0.0)) throw ParameterError("alpha must be >= 0");
    if (!(temperature > 0.0)) throw ParameterError("temperature must be > 0");
    if (!(beta >= 1.0)) throw ParameterError("beta must be >= 1");
    if (scales.empty()) throw ParameterError("scale set must be non-empty");
    for (double s : scales)
      if (!(s > 0.0 && s <= 1.0)) throw ParameterError("scales must lie in (0, 1]");
  }

  friend bool operator==(const EnhancerScalars&, const EnhancerScalars&) = default;
};

inline constexpr double kInitStddev = 0.02;
inline constexpr std::uint64_t kEnhancerStream = 0x454E48;  // "ENH"

inline std::uint64_t enhancer_seed(std::uint64_t seed) { return derive_seed(seed, kEnhancerStream); }

inline Tensor init_tensor(const TensorSpec& spec, Xoshiro256ss& rng) {
  Tensor t(spec.shape);
  switch (spec.init) {
    case Init::ones:
      for (double& v : t.data()) v = 1.0;
      break;
    case Init::zeros:
      break;
    case Init::gaussian:
      for (double& v : t.data()) v = rng.gaussian(0.0, kInitStddev);
      break;
  }
  return t;
}

struct Weights {
  ModelConfig config;
  std::map<std::string, Tensor> tensors;
  EnhancerScalars scalars;

  const Tensor& at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ConsistencyError("missing weight tensor: " + name);
    return it->second;
  }
  Tensor& at(const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ConsistencyError("missing weight tensor: " + name);
    return it->second;
  }
  const Tensor& layer(Tower t, std::size_t l, std::string_view leaf) const {
    return at(layer_name(t, l, leaf));
  }
  std::string_view prefix(Tower t) const { return tower_prefix(t); }
  std::size_t n_layers(Tower t) const {
    return t == Tower::vision ? config.n_layers_v : config.n_layers_t;
  }
  bool has_enhancer() const { return tensors.count("enhancer/theta") != 0; }

  // Full layout in file order: model tensors then enhancer tensors (if any).
  std::vector<TensorSpec> layout() const {
    auto specs = model_layout(config);
    if (has_enhancer()) {
      auto enh = enhancer_layout(config);
      specs.insert(specs.end(), enh.begin(), enh.end());
    }
    return specs;
  }

  // Every layout tensor present with its config-implied shape.
  void validate() const {
    config.validate();
    const auto specs = layout();
    if (specs.size() != tensors.size())
      throw ConsistencyError("weight set has unexpected tensors");
    for (const auto& s : specs) {
      const Tensor& t = at(s.name);
      if (t.shape() != s.shape)
        throw ConsistencyError("tensor " + s.name + " has shape " + shape_str(t.shape()) +
                               ", expected " + shape_str(s.shape));
      if (!t.all_finite()) throw ConsistencyError("tensor " + s.name + " is not finite");
    }
  }
};

inline void generate_tensors(const std::vector<TensorSpec>& specs, std::uint64_t seed,
                             std::map<std::string, Tensor>& into) {
  Xoshiro256ss rng(seed);
  for (const auto& s : specs) into[s.name] = init_tensor(s, rng);
}

// Deterministic stand-in for pretrained weights: N(0, 0.02²) entries, LN γ=1, β=0.
inline Weights generate_weights(const ModelConfig& config, std::uint64_t seed,
                                bool with_enhancer = true) {
  config.validate();
  Weights w;
  w.config = config;
  generate_tensors(model_layout(config), seed, w.tensors);
  if (with_enhancer) generate_tensors(enhancer_layout(config), enhancer_seed(seed), w.tensors);
  return w;
}

// ---------------------------------------------------------------------------
// Tokenizer

inline constexpr int kBos = 0;
inline constexpr int kEos = 1;
inline constexpr int kPad = 2;

struct TokenSequence {
  std::vector<int> ids;
  std::size_t eos_index = 0;

  friend bool operator==(const TokenSequence&, const TokenSequence&) = default;
};

inline std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::string cur;
  for (char ch : text) {
    const auto uc = static_cast<unsigned char>(ch);
    if (ch == ' ' || ch == '\t' || ch == '\n' || ch == '\v' || ch == '\f' || ch == '\r') {
      if (!cur.empty()) words.push_back(std::move(cur)), cur.clear();
    } else {
      cur.push_back(uc < 128 ? static_cast<char>(std::tolower(uc)) : ch);
    }
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  return words;
}

inline int word_id(std::string_view word, const ModelConfig& c) {
  return 3 + static_cast<int>(fnv1a64(word) % (c.vocab_size - 3));
}

// [BOS] words... [EOS] [PAD]..., truncated to max_text_len with EOS kept last.
inline TokenSequence tokenize(std::string_view text, const ModelConfig& c) {
  const auto words = split_words(text);
  const std::size_t room = c.max_text_len - 2;
  const std::size_t kept = std::min(room, words.size());
  TokenSequence seq;
  seq.ids.assign(c.max_text_len, kPad);
  seq.ids[0] = kBos;
  for (std::size_t i = 0; i < kept; ++i) seq.ids[1 + i] = word_id(words[i], c);
  seq.eos_index = 1 + kept;
  seq.ids[seq.eos_index] = kEos;
  return seq;
}

// ---------------------------------------------------------------------------
// Image preprocessing

struct PreprocessConfig {
  std::array<double, 3> mean{0.48145466, 0.4578275, 0.40821073};
  std::array<double, 3> std{0.26862954, 0.26130258, 0.27577711};

  void validate() const {
    for (double s : std)
      if (!(s > 0.0)) throw ParameterError("preprocess std must be positive");
  }
};

// Image tensors are H×W×3, channel-last.
inline Tensor preprocess(const Tensor& image, const PreprocessConfig& pre, std::size_t image_size) {
  pre.validate();
  if (image.shape() != Shape{image_size, image_size, 3})
    throw DimensionError("preprocess expects " + shape_str({image_size, image_size, 3}) +
                         ", got " + shape_str(image.shape()));
  Tensor out(image.shape());
  for (std::size_t i = 0; i < image.size(); ++i) {
    const std::size_t ch = i % 3;
    out[i] = (image[i] - pre.mean[ch]) / pre.std[ch];
  }
  return out;
}

inline Tensor unpreprocess(const Tensor& normalized, const PreprocessConfig& pre) {
  Tensor out(normalized.shape());
  for (std::size_t i = 0; i < normalized.size(); ++i) {
    const std::size_t ch = i % 3;
    out[i] = normalized[i] * pre.std[ch] + pre.mean[ch];
  }
  return out;
}

}  // namespace mmel
