#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "mmel/core_math.hpp"
#include "mmel/encoder.hpp"
#include "mmel/errors.hpp"
#include "mmel/model.hpp"
#include "mmel/tensor.hpp"

namespace mmel {

// ∂c/∂attn_out_l for every layer of one tower.
struct LayerGradients {
  Tower tower = Tower::vision;
  std::vector<Tensor> per_layer;
};

enum class Method { grad_eclip, mmel, random };

inline std::string_view method_name(Method m) {
  switch (m) {
    case Method::grad_eclip: return "grad-eclip";
    case Method::mmel: return "mmel";
    case Method::random: return "random";
  }
  return "?";
}

// Non-negative importance field. Vision maps are grid×grid; text maps hold one
// score per token with `valid` marking content positions (BOS/EOS/PAD are false).
struct AttributionMap {
  Tensor values;
  std::vector<bool> valid;
  Method provenance = Method::grad_eclip;

  std::span<const double> flat() const { return values.data(); }
};

// Scalar being explained. lambda = 0 is the plain pooled-token cosine c;
// lambda > 0 blends in the mean patch-token cosine (vision tower only).
struct Objective {
  double lambda = 0.0;

  void validate() const {
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw ParameterError("lambda must lie in [0, 1]");
  }
};

namespace detail {

// Backward through y = γ ⊙ (x - μ)·rstd + β for a single row.
inline void layer_norm_backward(std::span<const double> x, std::span<const double> gamma,
                                double eps, std::span<const double> dy, std::span<double> dx_accum) {
  const std::size_t n = x.size();
  const double nd = static_cast<double>(n);
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= nd;
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= nd;
  const double rstd = 1.0 / std::sqrt(var + eps);
  double m1 = 0.0, m2 = 0.0;
  std::vector<double> xhat(n), dxhat(n);
  for (std::size_t i = 0; i < n; ++i) {
    xhat[i] = (x[i] - mean) * rstd;
    dxhat[i] = dy[i] * gamma[i];
    m1 += dxhat[i];
    m2 += dxhat[i] * xhat[i];
  }
  m1 /= nd;
  m2 /= nd;
  for (std::size_t i = 0; i < n; ++i) dx_accum[i] += rstd * (dxhat[i] - m1 - xhat[i] * m2);
}

inline void layer_norm_rows_backward(const Tensor& x, const Tensor& gamma, double eps,
                                     const Tensor& dy, Tensor& dx_accum) {
  for (std::size_t r = 0; r < x.rows(); ++r)
    layer_norm_backward(x.row(r), gamma.data(), eps, dy.row(r), dx_accum.row(r));
}

// d/du of cos(u, e) for unit e.
inline void cosine_grad(std::span<const double> u, std::span<const double> e, double weight,
                        std::span<double> du) {
  const double norm = l2_norm(u);
  if (!(norm > 0.0)) throw NormalizationError("cosine of a zero vector");
  const double ue = dot(u, e);
  const double inv = 1.0 / norm;
  const double inv3 = inv * inv * inv;
  for (std::size_t i = 0; i < u.size(); ++i) du[i] = weight * (e[i] * inv - ue * u[i] * inv3);
}

// Per-token weights of the objective over final hidden rows.
inline std::vector<double> objective_token_weights(const EncoderActivations& acts,
                                                   const Objective& obj) {
  obj.validate();
  const std::size_t n = acts.n_tokens();
  std::vector<double> wts(n, 0.0);
  if (acts.tower == Tower::text || obj.lambda == 0.0) {
    if (acts.tower == Tower::text && obj.lambda != 0.0)
      throw ParameterError("combined similarity is defined for the vision tower only");
    wts[acts.pooled_index] = 1.0;
    return wts;
  }
  wts[0] = 1.0 - obj.lambda;
  const double each = obj.lambda / static_cast<double>(n - 1);
  for (std::size_t i = 1; i < n; ++i) wts[i] = each;
  return wts;
}

}  // namespace detail

// c' = (1-λ)·c_cls + λ·mean_i cos(proj(LN_f(h_i)), e_txt) over spatial tokens.
inline double combined_similarity(const Weights& w, const EncoderActivations& acts_v,
                                  const Tensor& e_txt, double lambda) {
  if (acts_v.tower != Tower::vision) throw ConsistencyError("combined_similarity needs vision activations");
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ParameterError("lambda must lie in [0, 1]");
  const double c_cls = similarity(acts_v.embedding, e_txt);
  if (lambda == 0.0) return c_cls;
  const Tensor& h = acts_v.final_hidden();
  double sum = 0.0;
  for (std::size_t i = 1; i < h.rows(); ++i) {
    const Tensor e_i = l2_normalized(project_token(w, Tower::vision, h.row(i)));
    sum += dot(e_i.data(), e_txt.data());
  }
  return (1.0 - lambda) * c_cls + lambda * (sum / static_cast<double>(h.rows() - 1));
}

inline double objective_value(const Weights& w, const EncoderActivations& acts,
                              const Tensor& other_embedding, const Objective& obj) {
  if (acts.tower == Tower::vision) return combined_similarity(w, acts, other_embedding, obj.lambda);
  obj.validate();
  if (obj.lambda != 0.0) throw ParameterError("combined similarity is defined for the vision tower only");
  return similarity(acts.embedding, other_embedding);
}

// Exact reverse-mode gradient of the objective with respect to every attention
// sublayer output of `modality`. The other tower's embedding is held constant.
inline LayerGradients backprop_to_attention(const Weights& w, const EncoderActivations& acts_v,
                                            const EncoderActivations& acts_t, Tower modality,
                                            const Objective& obj = {}) {
  if (acts_v.tower != Tower::vision || acts_t.tower != Tower::text)
    throw ConsistencyError("backprop_to_attention: activation towers mislabelled");
  const EncoderActivations& acts = modality == Tower::vision ? acts_v : acts_t;
  const Tensor& other = modality == Tower::vision ? acts_t.embedding : acts_v.embedding;
  const ModelConfig& cfg = w.config;
  const std::size_t L = w.n_layers(modality);
  if (acts.layers.size() != L || acts.n_tokens() != (modality == Tower::vision ? cfg.n_tokens_v() : cfg.n_tokens_t()) ||
      acts.layers.front().h_in.cols() != cfg.d_model || other.size() != cfg.d_shared)
    throw ConsistencyError("activations were not produced by these weights");

  const std::string pre(tower_prefix(modality));
  const Tensor& proj = w.at(pre + "/proj");
  const Tensor& gf = w.at(pre + "/ln_final.gamma");
  const std::size_t n = acts.n_tokens(), d = cfg.d_model, ds = cfg.d_shared;

  // Seed: gradient on the final hidden rows.
  Tensor dh({n, d});
  const auto token_w = detail::objective_token_weights(acts, obj);
  std::vector<double> du(ds), dln(d);
  for (std::size_t i = 0; i < n; ++i) {
    if (token_w[i] == 0.0) continue;
    const Tensor u = i == acts.pooled_index ? acts.projected
                                            : project_token(w, modality, acts.final_hidden().row(i));
    detail::cosine_grad(u.data(), other.data(), token_w[i], du);
    for (std::size_t a = 0; a < d; ++a) {
      double acc = 0.0;
      for (std::size_t b = 0; b < ds; ++b) acc += proj(a, b) * du[b];
      dln[a] = acc;
    }
    detail::layer_norm_backward(acts.final_hidden().row(i), gf.data(), cfg.ln_eps, dln, dh.row(i));
  }

  LayerGradients out;
  out.tower = modality;
  out.per_layer.resize(L);
  const std::size_t dh_sz = cfg.d_head();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh_sz));
  for (std::size_t li = L; li-- > 0;) {
    const LayerRecord& rec = acts.layers[li];
    // MLP sublayer: h_out = h_mid + fc2(gelu(fc1(LN2(h_mid)))).
    Tensor g_mid = dh;
    {
      Tensor d_act = matmul_transposed(dh, w.layer(modality, li, "mlp.fc2.weight"));
      for (std::size_t k = 0; k < d_act.size(); ++k) d_act[k] *= gelu_tanh_grad(rec.mlp_pre[k]);
      const Tensor d_x2 = matmul_transposed(d_act, w.layer(modality, li, "mlp.fc1.weight"));
      detail::layer_norm_rows_backward(rec.h_mid, w.layer(modality, li, "ln2.gamma"), cfg.ln_eps, d_x2, g_mid);
    }
    out.per_layer[li] = g_mid;
    if (li == 0) break;

    // Attention sublayer: h_mid = h_in + W_o·concat_h(P_h V_h) + b_o.
    const Tensor d_ctx = matmul_transposed(g_mid, w.layer(modality, li, "attn.out.weight"));
    Tensor d_qkv({n, 3 * d});
    std::vector<double> dp(n);
    for (std::size_t h = 0; h < cfg.n_heads; ++h) {
      const std::size_t off = h * dh_sz;
      const Tensor& P = rec.probs[h];
      for (std::size_t i = 0; i < n; ++i) {
        double rowdot = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          double acc = 0.0;
          for (std::size_t c = 0; c < dh_sz; ++c) acc += d_ctx(i, off + c) * rec.v(j, off + c);
          dp[j] = acc;
          rowdot += acc * P(i, j);
        }
        for (std::size_t j = 0; j < n; ++j) {
          const double pij = P(i, j);
          if (pij == 0.0) continue;
          const double ds_ij = pij * (dp[j] - rowdot) * scale;
          for (std::size_t c = 0; c < dh_sz; ++c) {
            d_qkv(i, off + c) += ds_ij * rec.k(j, off + c);
            d_qkv(j, d + off + c) += ds_ij * rec.q(i, off + c);
            d_qkv(j, 2 * d + off + c) += pij * d_ctx(i, off + c);
          }
        }
      }
    }
    const Tensor d_x1 = matmul_transposed(d_qkv, w.layer(modality, li, "attn.qkv.weight"));
    dh = g_mid;
    detail::layer_norm_rows_backward(rec.h_in, w.layer(modality, li, "ln1.gamma"), cfg.ln_eps, d_x1, dh);
  }
  return out;
}

// Central-difference oracle for ∂objective/∂attn_out_layer, re-running the
// forward pass downstream of each perturbed coordinate.
inline Tensor finite_diff_similarity(const Weights& w, const EncoderActivations& acts_v,
                                     const EncoderActivations& acts_t, Tower modality,
                                     std::size_t layer, double h, const Objective& obj = {}) {
  if (!(h >= 0.0)) throw ParameterError("finite-difference step must be non-negative");
  const EncoderActivations& acts = modality == Tower::vision ? acts_v : acts_t;
  const Tensor& other = modality == Tower::vision ? acts_t.embedding : acts_v.embedding;
  const Tensor& base = acts.layers.at(layer).attn_out;
  Tensor grad(base.shape());
  Tensor probe = base;
  for (std::size_t k = 0; k < base.size(); ++k) {
    probe[k] = base[k] + h;
    const double up = objective_value(w, resume_with_attn_out(w, acts, layer, probe), other, obj);
    probe[k] = base[k] - h;
    const double down = objective_value(w, resume_with_attn_out(w, acts, layer, probe), other, obj);
    probe[k] = base[k];
    grad[k] = h > 0.0 ? (up - down) / (2.0 * h) : 0.0;
  }
  return grad;
}

// Max |a - b| divided by max |b|.
inline double max_relative_error(const Tensor& a, const Tensor& b) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num = std::max(num, std::abs(a[i] - b[i]));
    den = std::max(den, std::abs(b[i]));
  }
  return den > 0.0 ? num / den : num;
}

// Head-averaged softmax of the pooled query against the keys it can see,
// restricted to `keep` positions and renormalised over them.
inline std::vector<double> pooled_qk_weights(const LayerRecord& rec, std::size_t n_heads,
                                             std::size_t query, std::size_t visible,
                                             const std::vector<bool>& keep) {
  const std::size_t d = rec.q.cols(), dh = d / n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<double> avg(rec.q.rows(), 0.0), logits(visible);
  for (std::size_t h = 0; h < n_heads; ++h) {
    const std::size_t off = h * dh;
    for (std::size_t j = 0; j < visible; ++j) {
      double acc = 0.0;
      for (std::size_t c = 0; c < dh; ++c) acc += rec.q(query, off + c) * rec.k(j, off + c);
      logits[j] = acc * scale;
    }
    const auto p = softmax_temp(logits, 1.0);
    for (std::size_t j = 0; j < visible; ++j) avg[j] += p[j] / static_cast<double>(n_heads);
  }
  double total = 0.0;
  for (std::size_t j = 0; j < avg.size(); ++j) {
    if (!keep[j]) avg[j] = 0.0;
    total += avg[j];
  }
  if (total > 0.0)
    for (double& x : avg) x /= total;
  return avg;
}

// Spatial weights (class token dropped) for a vision layer; sums to 1.
inline std::vector<double> qk_similarity(const EncoderActivations& acts, std::size_t layer,
                                         std::size_t n_heads) {
  if (acts.tower != Tower::vision) throw ConsistencyError("qk_similarity expects vision activations");
  const LayerRecord& rec = acts.layers.at(layer);
  const std::size_t n = rec.q.rows();
  std::vector<bool> keep(n, true);
  keep[0] = false;
  auto all = pooled_qk_weights(rec, n_heads, 0, n, keep);
  return {all.begin() + 1, all.end()};
}

namespace detail {

// Σ_l ReLU((g_l[pool]·V_l[i]) · s_l(i)) over positions with weight s_l.
inline std::vector<double> grad_eclip_scores(const EncoderActivations& acts, const LayerGradients& grads,
                                             std::size_t n_heads, std::size_t visible,
                                             const std::vector<bool>& keep) {
  if (grads.tower != acts.tower || grads.per_layer.size() != acts.layers.size())
    throw ConsistencyError("gradients do not match activations");
  const std::size_t n = acts.n_tokens(), pool = acts.pooled_index;
  std::vector<double> out(n, 0.0);
  for (std::size_t l = 0; l < acts.layers.size(); ++l) {
    const LayerRecord& rec = acts.layers[l];
    const Tensor& g = grads.per_layer[l];
    const auto s = pooled_qk_weights(rec, n_heads, pool, visible, keep);
    for (std::size_t i = 0; i < n; ++i) {
      if (!keep[i]) continue;
      const double gv = dot(g.row(pool), rec.v.row(i));
      out[i] += std::max(0.0, gv * s[i]);
    }
  }
  return out;
}

}  // namespace detail

inline AttributionMap grad_eclip_map(const EncoderActivations& acts, const LayerGradients& grads,
                                     const ModelConfig& cfg) {
  if (acts.tower != Tower::vision || grads.tower != Tower::vision)
    throw ConsistencyError("grad_eclip_map expects vision activations and gradients");
  const std::size_t n = acts.n_tokens();
  std::vector<bool> keep(n, true);
  keep[0] = false;
  const auto scores = detail::grad_eclip_scores(acts, grads, cfg.n_heads, n, keep);
  AttributionMap m;
  m.values = Tensor({cfg.grid(), cfg.grid()}, std::vector<double>(scores.begin() + 1, scores.end()));
  m.valid.assign(cfg.n_patches(), true);
  m.provenance = Method::grad_eclip;
  return m;
}

// Text analogue with the EOS query; BOS, EOS and PAD score exactly 0.
inline AttributionMap grad_eclip_text(const EncoderActivations& acts, const LayerGradients& grads,
                                      const ModelConfig& cfg) {
  if (acts.tower != Tower::text || grads.tower != Tower::text)
    throw ConsistencyError("grad_eclip_text expects text activations and gradients");
  const std::size_t n = acts.n_tokens(), eos = acts.pooled_index;
  std::vector<bool> keep(n, false);
  for (std::size_t i = 1; i < eos; ++i) keep[i] = true;
  AttributionMap m;
  m.values = Tensor::vector(detail::grad_eclip_scores(acts, grads, cfg.n_heads, eos + 1, keep));
  m.valid = keep;
  m.provenance = Method::grad_eclip;
  return m;
}

}  // namespace mmel
