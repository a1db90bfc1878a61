#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "mmel/core_math.hpp"
#include "mmel/encoder.hpp"
#include "mmel/errors.hpp"
#include "mmel/grad_attrib.hpp"
#include "mmel/model.hpp"
#include "mmel/tensor.hpp"

namespace mmel {

// Hyperparameters and transform weights of the semantic relationship module.
// Nothing here is trained; the transform weights come from the weight file.
struct EnhancerParams {
  double alpha = 2.0;
  double temperature = 0.1;
  double beta = 2.0;
  std::vector<double> theta;   // pre-softplus layer weights, one per vision layer
  Tensor fc1_w, fc1_b;         // d -> 2d
  Tensor fc2_w, fc2_b;         // 2d -> d
  Tensor ln_gamma, ln_beta;
  std::vector<double> scales{1.0, 0.75, 0.5};
  double ln_eps = 1e-5;

  std::size_t dim() const { return fc1_w.rows(); }

  void validate() const {
    if (!(temperature > 0.0)) throw ParameterError("temperature must be > 0");
    if (!(alpha >= 0.0)) throw ParameterError("alpha must be >= 0");
    if (!(beta >= 1.0)) throw ParameterError("beta must be >= 1");
    if (theta.empty()) throw ParameterError("theta must hold one weight per layer");
    if (scales.empty()) throw ParameterError("scale set must be non-empty");
    for (double s : scales)
      if (!(s > 0.0 && s <= 1.0)) throw ParameterError("scales must lie in (0, 1]");
    const std::size_t d = dim();
    if (fc1_w.shape() != Shape{d, 2 * d} || fc1_b.size() != 2 * d || fc2_w.shape() != Shape{2 * d, d} ||
        fc2_b.size() != d || ln_gamma.size() != d || ln_beta.size() != d)
      throw DimensionError("enhancer transform weights have inconsistent shapes");
  }

  static EnhancerParams from_weights(const Weights& w) {
    if (!w.has_enhancer()) throw ConsistencyError("weight set carries no enhancer tensors");
    EnhancerParams p;
    p.alpha = w.scalars.alpha;
    p.temperature = w.scalars.temperature;
    p.beta = w.scalars.beta;
    p.scales = w.scalars.scales;
    const auto& th = w.at("enhancer/theta");
    p.theta.assign(th.data().begin(), th.data().end());
    p.fc1_w = w.at("enhancer/fc1.weight");
    p.fc1_b = w.at("enhancer/fc1.bias");
    p.fc2_w = w.at("enhancer/fc2.weight");
    p.fc2_b = w.at("enhancer/fc2.bias");
    p.ln_gamma = w.at("enhancer/ln.gamma");
    p.ln_beta = w.at("enhancer/ln.beta");
    p.validate();
    return p;
  }
};

// Drops the class token and lays the rest out as grid×grid×d, row-major.
inline Tensor extract_spatial_tokens(const Tensor& tokens) {
  tokens.require_rank(2);
  const std::size_t n = tokens.rows(), d = tokens.cols();
  if (n < 2) throw DimensionError("need a class token plus at least one spatial token");
  const auto side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(n - 1))));
  if (side * side != n - 1)
    throw DimensionError("token count " + std::to_string(n) + " is not a perfect square plus one");
  return Tensor({side, side, d}, std::vector<double>(tokens.data().begin() + static_cast<long>(d),
                                                     tokens.data().end()));
}

// One copy of the grid per scale, every feature multiplied by that scale.
inline std::vector<Tensor> multi_scale_views(const Tensor& grid, const std::vector<double>& scales) {
  if (scales.empty()) throw ParameterError("scale set must be non-empty");
  std::vector<Tensor> views;
  views.reserve(scales.size());
  for (double s : scales) {
    if (!(s > 0.0 && s <= 1.0)) throw ParameterError("scales must lie in (0, 1]");
    Tensor v = grid;
    for (double& x : v.data()) x *= s;
    views.push_back(std::move(v));
  }
  return views;
}

// Per token: LN(W2·relu(W1·x + b1) + b2). Accepts N×d or grid×grid×d; returns N×d.
inline Tensor feature_transform(const EnhancerParams& p, const Tensor& grid) {
  const std::size_t d = p.dim();
  if (grid.shape().back() != d)
    throw DimensionError("feature_transform: token width " + std::to_string(grid.shape().back()) +
                         " does not match transform width " + std::to_string(d));
  const Tensor x = grid.reshaped({grid.size() / d, d});
  Tensor hidden = matmul(x, p.fc1_w);
  add_row_bias(hidden, p.fc1_b);
  for (double& v : hidden.data()) v = v > 0.0 ? v : 0.0;
  Tensor out = matmul(hidden, p.fc2_w);
  add_row_bias(out, p.fc2_b);
  return layer_norm_rows(out, p.ln_gamma, p.ln_beta, p.ln_eps);
}

// softplus(θ) · row-softmax_T(F Fᵀ/√d), F = row-L2-normalised features.
inline Tensor semantic_attention(const Tensor& features, double theta, double temperature) {
  features.require_rank(2);
  if (!(temperature > 0.0)) throw ParameterError("temperature must be > 0");
  const std::size_t n = features.rows(), d = features.cols();
  Tensor f = features;
  for (std::size_t i = 0; i < n; ++i) {
    auto row = f.row(i);
    const double norm = l2_norm(row);
    if (!(norm > 0.0)) throw NormalizationError("semantic_attention: zero-norm token " + std::to_string(i));
    for (double& x : row) x /= norm;
  }
  Tensor a = matmul_transposed(f, f);
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  for (double& x : a.data()) x *= inv_sqrt_d;
  const double weight = softplus(theta);
  Tensor out({n, n});
  for (std::size_t i = 0; i < n; ++i) {
    const auto p = softmax_temp(a.row(i), temperature);
    for (std::size_t j = 0; j < n; ++j) out(i, j) = weight * p[j];
  }
  return out;
}

// maps[s][l] are the weighted attention maps for scale s and layer l.
// z(i) = Σ_s (1/L) Σ_l (1/N) Σ_j A^{(l,s)}[j, i]  (mean attention received).
inline std::vector<double> aggregate_importance(const std::vector<std::vector<Tensor>>& maps) {
  if (maps.empty() || maps.front().empty()) throw DimensionError("aggregate_importance: no maps");
  const std::size_t n = maps.front().front().rows();
  std::vector<double> z(n, 0.0);
  for (const auto& per_layer : maps) {
    const double layers = static_cast<double>(per_layer.size());
    std::vector<double> imp(n, 0.0);
    for (const auto& a : per_layer) {
      if (a.shape() != Shape{n, n}) throw DimensionError("aggregate_importance: inconsistent token counts");
      for (std::size_t j = 0; j < n; ++j)
        for (std::size_t i = 0; i < n; ++i) imp[i] += a(j, i);
    }
    for (std::size_t i = 0; i < n; ++i) z[i] += imp[i] / (static_cast<double>(n) * layers);
  }
  return z;
}

// E_MMEL(i) = E_base(i) · (1 + α·σ(z(i))).
inline AttributionMap enhance_map(const AttributionMap& base, std::span<const double> z, double alpha) {
  if (z.size() != base.values.size()) throw DimensionError("enhance_map: field and map extents differ");
  if (!(alpha >= 0.0)) throw ParameterError("alpha must be >= 0");
  AttributionMap out = base;
  out.provenance = Method::mmel;
  if (alpha == 0.0) return out;
  for (std::size_t i = 0; i < z.size(); ++i) out.values[i] = base.values[i] * (1.0 + alpha * sigmoid(z[i]));
  return out;
}

inline AttributionMap contrast_enhance(const AttributionMap& m, double beta) {
  AttributionMap out = m;
  const auto v = minmax_gamma(m.values.data(), beta);
  std::copy(v.begin(), v.end(), out.values.data().begin());
  return out;
}

// Semantic field z over the spatial tokens, from every layer's recorded Q.
inline std::vector<double> semantic_field(const EnhancerParams& p, const EncoderActivations& acts_v) {
  if (acts_v.tower != Tower::vision) throw ConsistencyError("semantic_field expects vision activations");
  if (p.theta.size() != acts_v.layers.size())
    throw DimensionError("theta count does not match the number of vision layers");
  std::vector<std::vector<Tensor>> maps(p.scales.size());
  for (std::size_t l = 0; l < acts_v.layers.size(); ++l) {
    const Tensor grid = extract_spatial_tokens(acts_v.layers[l].q);
    const auto views = multi_scale_views(grid, p.scales);
    for (std::size_t s = 0; s < views.size(); ++s)
      maps[s].push_back(semantic_attention(feature_transform(p, views[s]), p.theta[l], p.temperature));
  }
  return aggregate_importance(maps);
}

struct PipelineResult {
  AttributionMap base;      // Grad-ECLIP map
  AttributionMap enhanced;  // after the 1 + α·σ(z) multiplier
  AttributionMap visual;    // contrast-enhanced, in [0, 1]
  std::vector<double> field;
  double c = 0.0;           // plain cosine similarity
  double objective = 0.0;   // value of the differentiated scalar
};

// Baseline Grad-ECLIP path: encode both towers, backprop, build the map.
inline PipelineResult grad_eclip_pipeline(const Weights& w, const Tensor& image, const TokenSequence& tokens,
                                          const Objective& obj = {}) {
  const auto acts_v = encode_image(w, image);
  const auto acts_t = encode_text(w, tokens);
  const auto grads = backprop_to_attention(w, acts_v, acts_t, Tower::vision, obj);
  PipelineResult r;
  r.base = grad_eclip_map(acts_v, grads, w.config);
  r.enhanced = r.base;
  r.c = similarity(acts_v.embedding, acts_t.embedding);
  r.objective = obj.lambda == 0.0 ? r.c : combined_similarity(w, acts_v, acts_t.embedding, obj.lambda);
  return r;
}

inline PipelineResult mmel_pipeline(const Weights& w, const EnhancerParams& p, const Tensor& image,
                                    const TokenSequence& tokens, const Objective& obj = {}) {
  p.validate();
  const auto acts_v = encode_image(w, image);
  const auto acts_t = encode_text(w, tokens);
  const auto grads = backprop_to_attention(w, acts_v, acts_t, Tower::vision, obj);
  PipelineResult r;
  r.base = grad_eclip_map(acts_v, grads, w.config);
  r.field = semantic_field(p, acts_v);
  r.enhanced = enhance_map(r.base, r.field, p.alpha);
  r.visual = contrast_enhance(r.enhanced, p.beta);
  r.c = similarity(acts_v.embedding, acts_t.embedding);
  r.objective = obj.lambda == 0.0 ? r.c : combined_similarity(w, acts_v, acts_t.embedding, obj.lambda);
  return r;
}

}  // namespace mmel
