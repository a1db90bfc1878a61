#pragma once

#include <cmath>
#include <optional>
#include <vector>

#include "mmel/core_math.hpp"
#include "mmel/errors.hpp"
#include "mmel/model.hpp"
#include "mmel/tensor.hpp"

namespace mmel {

// Everything one pre-LN block computed, in evaluation order. The backward pass
// reads these instead of recomputing the forward.
struct LayerRecord {
  Tensor h_in;                // residual stream entering the block, n×d
  Tensor x_ln1;               // LN1(h_in)
  Tensor q, k, v;             // n×d, heads laid out contiguously along d
  std::vector<Tensor> probs;  // per head, n×n row-stochastic attention weights
  Tensor context;             // concatenated head outputs before W_o
  Tensor attn_out;            // attention sublayer output after W_o, before the residual add
  Tensor h_mid;               // h_in + attn_out
  Tensor x_ln2;               // LN2(h_mid)
  Tensor mlp_pre;             // fc1 pre-activation, n×d_mlp
  Tensor mlp_act;             // GELU(mlp_pre)
  Tensor h_out;               // h_mid + fc2(mlp_act)
};

struct EncoderActivations {
  Tower tower = Tower::vision;
  std::vector<LayerRecord> layers;
  std::size_t pooled_index = 0;  // class token (vision) or EOS position (text)
  Tensor pooled_ln;              // final LN of the pooled hidden state, d
  Tensor projected;              // pooled_ln · proj, before L2 normalisation
  Tensor embedding;              // unit-norm joint embedding, d_shared

  const Tensor& final_hidden() const { return layers.back().h_out; }
  std::size_t n_tokens() const { return layers.front().h_in.rows(); }
};

namespace detail {

inline Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  Tensor y = matmul(x, weight);
  add_row_bias(y, bias);
  return y;
}

inline void multi_head_attention(const ModelConfig& cfg, LayerRecord& rec, bool causal) {
  const std::size_t n = rec.q.rows(), d = cfg.d_model, dh = cfg.d_head();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  rec.context = Tensor({n, d});
  rec.probs.assign(cfg.n_heads, Tensor({n, n}));
  std::vector<double> logits(n);
  for (std::size_t h = 0; h < cfg.n_heads; ++h) {
    const std::size_t off = h * dh;
    Tensor& p = rec.probs[h];
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t visible = causal ? i + 1 : n;
      for (std::size_t j = 0; j < visible; ++j) {
        double acc = 0.0;
        for (std::size_t c = 0; c < dh; ++c) acc += rec.q(i, off + c) * rec.k(j, off + c);
        logits[j] = acc * scale;
      }
      const auto row = softmax_temp(std::span<const double>(logits.data(), visible), 1.0);
      for (std::size_t j = 0; j < visible; ++j) p(i, j) = row[j];
      for (std::size_t j = 0; j < visible; ++j)
        for (std::size_t c = 0; c < dh; ++c) rec.context(i, off + c) += row[j] * rec.v(j, off + c);
    }
  }
}

}  // namespace detail

// Runs block `layer` of `tower` on h_in. If attn_override is set, it replaces
// the attention sublayer output (the Q/K/V/probs records still reflect h_in).
inline LayerRecord run_block(const Weights& w, Tower tower, std::size_t layer, Tensor h_in,
                             const Tensor* attn_override = nullptr) {
  const ModelConfig& cfg = w.config;
  const std::size_t d = cfg.d_model;
  LayerRecord rec;
  rec.h_in = std::move(h_in);
  const std::size_t n = rec.h_in.rows();

  rec.x_ln1 = layer_norm_rows(rec.h_in, w.layer(tower, layer, "ln1.gamma"),
                              w.layer(tower, layer, "ln1.beta"), cfg.ln_eps);
  const Tensor qkv = detail::linear(rec.x_ln1, w.layer(tower, layer, "attn.qkv.weight"),
                                    w.layer(tower, layer, "attn.qkv.bias"));
  rec.q = Tensor({n, d});
  rec.k = Tensor({n, d});
  rec.v = Tensor({n, d});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < d; ++c) {
      rec.q(i, c) = qkv(i, c);
      rec.k(i, c) = qkv(i, d + c);
      rec.v(i, c) = qkv(i, 2 * d + c);
    }
  detail::multi_head_attention(cfg, rec, tower == Tower::text);
  if (attn_override) {
    if (attn_override->shape() != rec.h_in.shape())
      throw DimensionError("attention override must be " + shape_str(rec.h_in.shape()));
    rec.attn_out = *attn_override;
  } else {
    rec.attn_out = detail::linear(rec.context, w.layer(tower, layer, "attn.out.weight"),
                                  w.layer(tower, layer, "attn.out.bias"));
  }

  rec.h_mid = rec.h_in;
  for (std::size_t i = 0; i < rec.h_mid.size(); ++i) rec.h_mid[i] += rec.attn_out[i];

  rec.x_ln2 = layer_norm_rows(rec.h_mid, w.layer(tower, layer, "ln2.gamma"),
                              w.layer(tower, layer, "ln2.beta"), cfg.ln_eps);
  rec.mlp_pre = detail::linear(rec.x_ln2, w.layer(tower, layer, "mlp.fc1.weight"),
                               w.layer(tower, layer, "mlp.fc1.bias"));
  rec.mlp_act = activate(Activation::gelu_tanh, rec.mlp_pre);
  const Tensor mlp_out = detail::linear(rec.mlp_act, w.layer(tower, layer, "mlp.fc2.weight"),
                                        w.layer(tower, layer, "mlp.fc2.bias"));
  rec.h_out = rec.h_mid;
  for (std::size_t i = 0; i < rec.h_out.size(); ++i) rec.h_out[i] += mlp_out[i];
  return rec;
}

// Final LN -> projection of one hidden row, not yet normalised.
inline Tensor project_token(const Weights& w, Tower tower, std::span<const double> hidden,
                            Tensor* ln_out = nullptr) {
  const std::string p(tower_prefix(tower));
  auto ln = layer_norm(hidden, w.at(p + "/ln_final.gamma").data(),
                       w.at(p + "/ln_final.beta").data(), w.config.ln_eps);
  const std::size_t width = ln.size();
  Tensor ln_t = Tensor::matrix(1, width, std::move(ln));
  Tensor projected = matmul(ln_t, w.at(p + "/proj")).reshaped({w.config.d_shared});
  if (ln_out) *ln_out = ln_t.reshaped({w.config.d_model});
  return projected;
}

inline Tensor l2_normalized(const Tensor& v) {
  const double norm = l2_norm(v.data());
  if (!(norm > 0.0)) throw NormalizationError("cannot normalise a zero vector");
  Tensor out = v;
  for (double& x : out.data()) x /= norm;
  return out;
}

// Runs blocks [first_layer, L) starting from h, then the pooling head.
inline void finish_encoder(const Weights& w, EncoderActivations& acts, Tensor h,
                           std::size_t first_layer, const Tensor* attn_override = nullptr) {
  const std::size_t layers = w.n_layers(acts.tower);
  acts.layers.resize(first_layer);
  for (std::size_t l = first_layer; l < layers; ++l) {
    const Tensor* ov = (l == first_layer) ? attn_override : nullptr;
    acts.layers.push_back(run_block(w, acts.tower, l, std::move(h), ov));
    h = acts.layers.back().h_out;
  }
  acts.projected = project_token(w, acts.tower, acts.final_hidden().row(acts.pooled_index),
                                 &acts.pooled_ln);
  acts.embedding = l2_normalized(acts.projected);
}

// Patch tokens are taken in row-major patch order; each patch flattens as
// (y, x, channel) over its P×P×3 pixels.
inline Tensor patchify(const Tensor& img, const ModelConfig& cfg) {
  const std::size_t s = cfg.image_size, ps = cfg.patch_size, g = cfg.grid();
  Tensor patches({cfg.n_patches(), cfg.patch_dim()});
  for (std::size_t pr = 0; pr < g; ++pr)
    for (std::size_t pc = 0; pc < g; ++pc) {
      const std::size_t p = pr * g + pc;
      std::size_t k = 0;
      for (std::size_t y = 0; y < ps; ++y)
        for (std::size_t x = 0; x < ps; ++x)
          for (std::size_t ch = 0; ch < 3; ++ch)
            patches(p, k++) = img[((pr * ps + y) * s + (pc * ps + x)) * 3 + ch];
    }
  return patches;
}

inline Tensor embed_image(const Weights& w, const Tensor& img) {
  const ModelConfig& cfg = w.config;
  if (img.shape() != Shape{cfg.image_size, cfg.image_size, 3})
    throw DimensionError("encode_image expects " + shape_str({cfg.image_size, cfg.image_size, 3}) +
                         ", got " + shape_str(img.shape()));
  const Tensor proj = matmul(patchify(img, cfg), w.at("vision/patch_proj"));
  const Tensor& cls = w.at("vision/class_token");
  const Tensor& pos = w.at("vision/pos_embed");
  Tensor h({cfg.n_tokens_v(), cfg.d_model});
  for (std::size_t c = 0; c < cfg.d_model; ++c) h(0, c) = cls[c] + pos(0, c);
  for (std::size_t i = 1; i < cfg.n_tokens_v(); ++i)
    for (std::size_t c = 0; c < cfg.d_model; ++c) h(i, c) = proj(i - 1, c) + pos(i, c);
  return h;
}

inline Tensor embed_text(const Weights& w, const TokenSequence& tokens) {
  const ModelConfig& cfg = w.config;
  if (tokens.ids.size() != cfg.max_text_len)
    throw DimensionError("token sequence length must equal max_text_len");
  if (tokens.eos_index >= tokens.ids.size()) throw DimensionError("EOS index out of range");
  const Tensor& table = w.at("text/token_embed");
  const Tensor& pos = w.at("text/pos_embed");
  Tensor h({cfg.max_text_len, cfg.d_model});
  for (std::size_t i = 0; i < cfg.max_text_len; ++i) {
    const int id = tokens.ids[i];
    if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab_size)
      throw VocabularyError("token id " + std::to_string(id) + " outside vocabulary");
    for (std::size_t c = 0; c < cfg.d_model; ++c)
      h(i, c) = table(static_cast<std::size_t>(id), c) + pos(i, c);
  }
  return h;
}

// img is the preprocessed H×W×3 tensor.
inline EncoderActivations encode_image(const Weights& w, const Tensor& img) {
  EncoderActivations acts;
  acts.tower = Tower::vision;
  acts.pooled_index = 0;
  finish_encoder(w, acts, embed_image(w, img), 0);
  return acts;
}

inline EncoderActivations encode_text(const Weights& w, const TokenSequence& tokens) {
  EncoderActivations acts;
  acts.tower = Tower::text;
  acts.pooled_index = tokens.eos_index;
  finish_encoder(w, acts, embed_text(w, tokens), 0);
  return acts;
}

// Re-runs the encoder downstream of `layer` with its attention output replaced.
inline EncoderActivations resume_with_attn_out(const Weights& w, const EncoderActivations& acts,
                                               std::size_t layer, const Tensor& attn_out) {
  if (layer >= acts.layers.size()) throw ConsistencyError("layer index out of range");
  EncoderActivations out;
  out.tower = acts.tower;
  out.pooled_index = acts.pooled_index;
  out.layers.assign(acts.layers.begin(), acts.layers.begin() + static_cast<long>(layer));
  finish_encoder(w, out, acts.layers[layer].h_in, layer, &attn_out);
  return out;
}

inline double similarity(const Tensor& e_img, const Tensor& e_txt, double tol = 1e-6) {
  if (e_img.size() != e_txt.size()) throw DimensionError("similarity: embedding sizes differ");
  if (std::abs(l2_norm(e_img.data()) - 1.0) > tol || std::abs(l2_norm(e_txt.data()) - 1.0) > tol)
    throw NormalizationError("similarity expects unit-norm embeddings");
  return dot(e_img.data(), e_txt.data());
}

}  // namespace mmel
