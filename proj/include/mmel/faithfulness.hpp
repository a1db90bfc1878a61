#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "mmel/core_math.hpp"
#include "mmel/encoder.hpp"
#include "mmel/enhancer.hpp"
#include "mmel/errors.hpp"
#include "mmel/grad_attrib.hpp"
#include "mmel/model.hpp"
#include "mmel/rng.hpp"

namespace mmel {

// Similarity of a (preprocessed) image against a fixed text.
using ImageScorer = std::function<double(const Tensor&)>;
// Similarity of a token sequence against a fixed image.
using TextScorer = std::function<double(const TokenSequence&)>;

inline ImageScorer model_image_scorer(const Weights& w, Tensor e_txt) {
  return [&w, e = std::move(e_txt)](const Tensor& img) {
    return similarity(encode_image(w, img).embedding, e);
  };
}

inline TextScorer model_text_scorer(const Weights& w, Tensor e_img) {
  return [&w, e = std::move(e_img)](const TokenSequence& t) {
    return similarity(encode_text(w, t).embedding, e);
  };
}

enum class MaskMode { remove_top, keep_top };

// Indices in descending value order; ties resolved by ascending index.
inline std::vector<std::size_t> ranking(std::span<const double> values) {
  std::vector<std::size_t> idx(values.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return values[a] > values[b]; });
  return idx;
}

// round(fraction · n), halves rounded away from zero.
inline std::size_t count_for_fraction(double fraction, std::size_t n) {
  if (!(fraction >= 0.0 && fraction <= 1.0)) throw ParameterError("fraction must lie in [0, 1]");
  return static_cast<std::size_t>(std::lround(fraction * static_cast<double>(n)));
}

inline std::vector<bool> top_k_selection(std::span<const double> values, std::size_t k) {
  std::vector<bool> sel(values.size(), false);
  const auto order = ranking(values);
  for (std::size_t i = 0; i < k && i < order.size(); ++i) sel[order[i]] = true;
  return sel;
}

// Sets every pixel of the patches flagged in `fill_patch` to `fill`.
inline Tensor fill_patches(const Tensor& img, std::size_t grid, const std::vector<bool>& fill_patch,
                           double fill) {
  const std::size_t s = img.extent(0);
  if (grid == 0 || s % grid != 0) throw DimensionError("image size is not a multiple of the map grid");
  const std::size_t ps = s / grid;
  Tensor out = img;
  for (std::size_t p = 0; p < fill_patch.size(); ++p) {
    if (!fill_patch[p]) continue;
    const std::size_t pr = p / grid, pc = p % grid;
    for (std::size_t y = 0; y < ps; ++y)
      for (std::size_t x = 0; x < ps; ++x)
        for (std::size_t ch = 0; ch < 3; ++ch) out[((pr * ps + y) * s + pc * ps + x) * 3 + ch] = fill;
  }
  return out;
}

// Fill value 0 in normalised space is the channel mean.
inline Tensor mask_image(const Tensor& img_norm, const AttributionMap& map, double fraction, MaskMode mode,
                         double fill = 0.0) {
  map.values.require_rank(2);
  const std::size_t n = map.values.size();
  auto sel = top_k_selection(map.flat(), count_for_fraction(fraction, n));
  if (mode == MaskMode::keep_top) sel.flip();
  return fill_patches(img_norm, map.values.rows(), sel, fill);
}

struct PerturbationCurve {
  std::vector<double> fractions;
  std::vector<double> scores;
  double auc = 0.0;
};

inline std::vector<double> step_fractions(std::size_t steps) {
  if (steps < 1) throw ParameterError("curve needs at least one step");
  std::vector<double> xs(steps + 1);
  for (std::size_t i = 0; i <= steps; ++i) xs[i] = static_cast<double>(i) / static_cast<double>(steps);
  return xs;
}

// Removes the top-ranked patches progressively (deletion) or restores them onto
// a fully filled image (insertion).
inline PerturbationCurve image_curve(const ImageScorer& score, const Tensor& img_norm, const AttributionMap& map,
                                     std::size_t steps, bool insertion, double fill = 0.0) {
  map.values.require_rank(2);
  const std::size_t n = map.values.size(), grid = map.values.rows();
  const auto order = ranking(map.flat());
  PerturbationCurve curve;
  curve.fractions = step_fractions(steps);
  for (double f : curve.fractions) {
    const std::size_t k = count_for_fraction(f, n);
    std::vector<bool> filled(n, insertion);
    for (std::size_t i = 0; i < k; ++i) filled[order[i]] = !insertion;
    curve.scores.push_back(score(fill_patches(img_norm, grid, filled, fill)));
  }
  curve.auc = trapezoid_auc(curve.fractions, curve.scores);
  return curve;
}

inline PerturbationCurve deletion_curve(const ImageScorer& score, const Tensor& img_norm,
                                        const AttributionMap& map, std::size_t steps, double fill = 0.0) {
  return image_curve(score, img_norm, map, steps, false, fill);
}

inline PerturbationCurve insertion_curve(const ImageScorer& score, const Tensor& img_norm,
                                         const AttributionMap& map, std::size_t steps, double fill = 0.0) {
  return image_curve(score, img_norm, map, steps, true, fill);
}

enum class TextMode { deletion, insertion };

// Content tokens are replaced by PAD (deletion) or restored from all-PAD
// (insertion) in descending score order. BOS and EOS never change.
inline PerturbationCurve text_perturbation_curve(const TextScorer& score, const TokenSequence& tokens,
                                                 const AttributionMap& token_scores, TextMode mode,
                                                 std::size_t steps) {
  std::vector<std::size_t> content;
  for (std::size_t i = 0; i < token_scores.valid.size(); ++i)
    if (token_scores.valid[i]) content.push_back(i);
  if (content.empty()) throw EvaluationError("text has no content tokens to perturb");
  std::vector<double> vals;
  for (std::size_t i : content) vals.push_back(token_scores.values[i]);
  const auto order = ranking(vals);
  const bool insertion = mode == TextMode::insertion;
  PerturbationCurve curve;
  curve.fractions = step_fractions(steps);
  for (double f : curve.fractions) {
    const std::size_t k = count_for_fraction(f, content.size());
    TokenSequence t = tokens;
    std::vector<bool> padded(content.size(), insertion);
    for (std::size_t i = 0; i < k; ++i) padded[order[i]] = !insertion;
    for (std::size_t c = 0; c < content.size(); ++c)
      if (padded[c]) t.ids[content[c]] = kPad;
    curve.scores.push_back(score(t));
  }
  curve.auc = trapezoid_auc(curve.fractions, curve.scores);
  return curve;
}

struct DropIncrease {
  double mean_drop_pct = 0.0;
  double increase_pct = 0.0;
  std::size_t used = 0;
  std::vector<std::size_t> excluded;  // samples with c <= 0
};

struct SampleDrop {
  double c = 0.0;
  double c_keep = 0.0;
  std::optional<double> drop_pct;  // empty when c <= 0
  bool increase = false;
};

inline SampleDrop sample_drop(const ImageScorer& score, const Tensor& img_norm, const AttributionMap& map,
                              double retain_fraction, double fill = 0.0) {
  if (!(retain_fraction > 0.0 && retain_fraction <= 1.0)) throw ParameterError("retain fraction must lie in (0, 1]");
  SampleDrop s;
  s.c = score(img_norm);
  s.c_keep = score(mask_image(img_norm, map, retain_fraction, MaskMode::keep_top, fill));
  if (s.c > 0.0) {
    s.drop_pct = std::max(0.0, (s.c - s.c_keep) / s.c) * 100.0;
    s.increase = s.c_keep > s.c;
  }
  return s;
}

inline DropIncrease summarize_drops(const std::vector<SampleDrop>& rows) {
  DropIncrease out;
  double drop_sum = 0.0;
  std::size_t inc = 0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (!rows[i].drop_pct) {
      out.excluded.push_back(i);
      continue;
    }
    drop_sum += *rows[i].drop_pct;
    inc += rows[i].increase ? 1 : 0;
    ++out.used;
  }
  if (out.used == 0) throw EvaluationError("every sample has c <= 0; confidence drop is undefined");
  out.mean_drop_pct = drop_sum / static_cast<double>(out.used);
  out.increase_pct = 100.0 * static_cast<double>(inc) / static_cast<double>(out.used);
  return out;
}

struct EvalSample {
  ImageScorer score;
  Tensor image;
  AttributionMap map;
};

inline DropIncrease confidence_drop_increase(const std::vector<EvalSample>& samples, double retain_fraction,
                                             double fill = 0.0) {
  std::vector<SampleDrop> rows;
  rows.reserve(samples.size());
  for (const auto& s : samples) rows.push_back(sample_drop(s.score, s.image, s.map, retain_fraction, fill));
  return summarize_drops(rows);
}

inline const std::vector<double>& default_occlusion_levels() {
  static const std::vector<double> levels{0.05, 0.10, 0.15, 0.20, 0.25};
  return levels;
}

struct OcclusionStep {
  double level = 0.0;
  std::vector<bool> occluded;
  Tensor image;
  double score = 0.0;
};

inline std::vector<OcclusionStep> occlusion_series(const ImageScorer& score, const Tensor& img_norm,
                                                   const AttributionMap& map,
                                                   const std::vector<double>& levels = default_occlusion_levels(),
                                                   double fill = 0.0) {
  std::vector<OcclusionStep> out;
  const std::size_t n = map.values.size();
  for (double lv : levels) {
    OcclusionStep st;
    st.level = lv;
    st.occluded = top_k_selection(map.flat(), count_for_fraction(lv, n));
    st.image = fill_patches(img_norm, map.values.rows(), st.occluded, fill);
    st.score = score(st.image);
    out.push_back(std::move(st));
  }
  return out;
}

// i.i.d. uniform [0, 1) control map.
inline AttributionMap random_attribution(std::uint64_t seed, std::size_t grid) {
  Xoshiro256ss rng(seed);
  std::vector<double> v(grid * grid);
  for (double& x : v) x = rng.uniform();
  AttributionMap m;
  m.values = Tensor({grid, grid}, std::move(v));
  m.valid.assign(grid * grid, true);
  m.provenance = Method::random;
  return m;
}

inline AttributionMap random_text_attribution(std::uint64_t seed, const TokenSequence& tokens) {
  Xoshiro256ss rng(seed);
  const std::size_t n = tokens.ids.size();
  AttributionMap m;
  m.values = Tensor({n});
  m.valid.assign(n, false);
  for (std::size_t i = 1; i < tokens.eos_index; ++i) {
    m.valid[i] = true;
    m.values[i] = rng.uniform();
  }
  m.provenance = Method::random;
  return m;
}

// ---------------------------------------------------------------------------
// Attribution by method, for the evaluation drivers.

struct AttributionRequest {
  Method method = Method::grad_eclip;
  Objective objective{};
  std::uint64_t random_seed = 0;
};

struct Attribution {
  AttributionMap image;   // grid map
  AttributionMap text;    // per-token map
  double c = 0.0;
  EncoderActivations acts_v, acts_t;
};

inline Attribution attribute(const Weights& w, const EnhancerParams* enh, const Tensor& img_norm,
                             const TokenSequence& tokens, const AttributionRequest& req) {
  Attribution a;
  a.acts_v = encode_image(w, img_norm);
  a.acts_t = encode_text(w, tokens);
  a.c = similarity(a.acts_v.embedding, a.acts_t.embedding);
  if (req.method == Method::random) {
    a.image = random_attribution(req.random_seed, w.config.grid());
    a.text = random_text_attribution(derive_seed(req.random_seed, 1), tokens);
    return a;
  }
  const auto gv = backprop_to_attention(w, a.acts_v, a.acts_t, Tower::vision, req.objective);
  const auto gt = backprop_to_attention(w, a.acts_v, a.acts_t, Tower::text);
  a.image = grad_eclip_map(a.acts_v, gv, w.config);
  a.text = grad_eclip_text(a.acts_t, gt, w.config);
  if (req.method == Method::mmel) {
    if (!enh) throw ConsistencyError("mmel attribution needs enhancer parameters");
    a.image = enhance_map(a.image, semantic_field(*enh, a.acts_v), enh->alpha);
  }
  return a;
}

// ---------------------------------------------------------------------------
// Weight-randomisation sanity check.

// Vision-tower parameter groups from the top of the network down: projection
// head, blocks L-1 .. 0, then the input embedding.
inline std::vector<std::vector<std::string>> randomization_groups(const ModelConfig& c) {
  std::vector<std::vector<std::string>> groups;
  groups.push_back({"vision/ln_final.gamma", "vision/ln_final.beta", "vision/proj"});
  for (std::size_t l = c.n_layers_v; l-- > 0;) {
    std::vector<std::string> g;
    for (const auto& spec : model_layout(c))
      if (spec.name.rfind(layer_name(Tower::vision, l, ""), 0) == 0) g.push_back(spec.name);
    groups.push_back(std::move(g));
  }
  groups.push_back({"vision/patch_proj", "vision/class_token", "vision/pos_embed"});
  return groups;
}

// Re-draws the top `depth` groups; each tensor gets its own stream keyed by
// (seed, name) so deeper randomisation extends shallower randomisation.
inline Weights randomize_top_layers(const Weights& w, std::size_t depth, std::uint64_t seed) {
  const auto groups = randomization_groups(w.config);
  if (depth > groups.size()) throw ParameterError("randomisation depth exceeds the number of layer groups");
  Weights out = w;
  const auto specs = model_layout(w.config);
  for (std::size_t g = 0; g < depth; ++g)
    for (const auto& name : groups[g]) {
      const auto it = std::find_if(specs.begin(), specs.end(), [&](const TensorSpec& s) { return s.name == name; });
      Xoshiro256ss rng(derive_seed(seed, fnv1a64(name)));
      out.at(name) = init_tensor(*it, rng);
    }
  return out;
}

struct SanityDepth {
  std::size_t depth = 0;
  std::vector<std::optional<double>> rho;  // per seed; empty when undefined
  std::optional<double> median_abs_rho;
  std::size_t undefined = 0;
};

struct SanityResult {
  std::vector<SanityDepth> depths;
  std::optional<double> trend;  // Spearman(depth, median |ρ|)
};

inline std::vector<std::size_t> full_depth_schedule(const ModelConfig& c) {
  std::vector<std::size_t> d(randomization_groups(c).size() + 1);
  std::iota(d.begin(), d.end(), std::size_t{0});
  return d;
}

inline SanityResult sanity_randomization(const Weights& w, const EnhancerParams* enh, const Tensor& img_norm,
                                         const TokenSequence& tokens, const AttributionRequest& req,
                                         const std::vector<std::uint64_t>& seeds,
                                         const std::vector<std::size_t>& depth_schedule) {
  if (seeds.empty()) throw ParameterError("sanity check needs at least one seed");
  const auto reference = attribute(w, enh, img_norm, tokens, req).image;
  SanityResult result;
  for (std::size_t depth : depth_schedule) {
    SanityDepth row;
    row.depth = depth;
    std::vector<double> abs_rho;
    for (std::uint64_t seed : seeds) {
      const auto map = depth == 0 ? reference
                                  : attribute(randomize_top_layers(w, depth, seed), enh, img_norm, tokens, req).image;
      try {
        const double r = spearman_rank(reference.flat(), map.flat());
        row.rho.push_back(r);
        abs_rho.push_back(std::abs(r));
      } catch (const UndefinedCorrelationError&) {
        row.rho.push_back(std::nullopt);
        ++row.undefined;
      }
    }
    if (!abs_rho.empty()) row.median_abs_rho = median(abs_rho);
    result.depths.push_back(std::move(row));
  }
  std::vector<double> xs, ys;
  for (const auto& d : result.depths)
    if (d.median_abs_rho) {
      xs.push_back(static_cast<double>(d.depth));
      ys.push_back(*d.median_abs_rho);
    }
  if (xs.size() >= 3) {
    try {
      result.trend = spearman_rank(xs, ys);
    } catch (const UndefinedCorrelationError&) {
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Cost of the enhancer relative to the baseline Grad-ECLIP path.

struct TimingReport {
  double baseline_ns = 0.0;  // medians
  double mmel_ns = 0.0;
  double overhead_ratio = 0.0;
  double baseline_stddev_ns = 0.0;
  double mmel_stddev_ns = 0.0;
  std::size_t repetitions = 0;
};

inline double stddev(const std::vector<double>& v) {
  const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double acc = 0.0;
  for (double x : v) acc += (x - m) * (x - m);
  return v.size() > 1 ? std::sqrt(acc / static_cast<double>(v.size() - 1)) : 0.0;
}

inline TimingReport timing_overhead(const Weights& w, const EnhancerParams& p, const Tensor& img_norm,
                                    const TokenSequence& tokens, std::size_t repetitions,
                                    const Objective& obj = {}) {
  if (repetitions < 10) throw ParameterError("timing needs at least 10 repetitions");
  using clock = std::chrono::steady_clock;
  std::vector<double> base, full;
  volatile double sink = 0.0;
  // Warm-up so first-touch allocation does not land in either series.
  sink = sink + grad_eclip_pipeline(w, img_norm, tokens, obj).c + mmel_pipeline(w, p, img_norm, tokens, obj).c;
  for (std::size_t r = 0; r < repetitions; ++r) {
    auto t0 = clock::now();
    sink = sink + grad_eclip_pipeline(w, img_norm, tokens, obj).base.values[0];
    auto t1 = clock::now();
    sink = sink + mmel_pipeline(w, p, img_norm, tokens, obj).enhanced.values[0];
    auto t2 = clock::now();
    base.push_back(std::chrono::duration<double, std::nano>(t1 - t0).count());
    full.push_back(std::chrono::duration<double, std::nano>(t2 - t1).count());
  }
  TimingReport t;
  t.repetitions = repetitions;
  t.baseline_ns = median(base);
  t.mmel_ns = median(full);
  t.overhead_ratio = t.mmel_ns / t.baseline_ns;
  t.baseline_stddev_ns = stddev(base);
  t.mmel_stddev_ns = stddev(full);
  return t;
}

// ---------------------------------------------------------------------------
// Planted-signal scoring model: c = Σ_p w_p · [patch p not filled]. Its
// Grad-ECLIP analogue (gradient times value of each patch indicator) is
// ReLU(w_p), available in closed form.

struct PlantedModel {
  std::size_t grid = 4;
  std::size_t image_size = 32;
  std::vector<double> weights;  // per patch, row-major
  double fill = 0.0;

  // 4 planted patches with weights in [1, 2]; the rest in [-0.2, 0.2].
  static PlantedModel make(std::uint64_t seed, std::size_t grid = 4, std::size_t image_size = 32) {
    PlantedModel m;
    m.grid = grid;
    m.image_size = image_size;
    const std::size_t n = grid * grid;
    Xoshiro256ss rng(seed);
    m.weights.resize(n);
    for (double& x : m.weights) x = -0.2 + 0.4 * rng.uniform();
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    for (std::size_t i = 0; i < std::min<std::size_t>(4, n); ++i) {
      const std::size_t j = i + static_cast<std::size_t>(rng.next() % (n - i));
      std::swap(idx[i], idx[j]);
      m.weights[idx[i]] = 1.0 + rng.uniform();
    }
    return m;
  }

  std::vector<bool> kept_patches(const Tensor& img) const {
    const std::size_t ps = image_size / grid;
    std::vector<bool> kept(grid * grid, false);
    for (std::size_t p = 0; p < kept.size(); ++p) {
      const std::size_t pr = p / grid, pc = p % grid;
      for (std::size_t y = 0; y < ps && !kept[p]; ++y)
        for (std::size_t x = 0; x < ps && !kept[p]; ++x)
          for (std::size_t ch = 0; ch < 3; ++ch)
            if (img[((pr * ps + y) * image_size + pc * ps + x) * 3 + ch] != fill) {
              kept[p] = true;
              break;
            }
    }
    return kept;
  }

  double score(const Tensor& img) const {
    const auto kept = kept_patches(img);
    double c = 0.0;
    for (std::size_t p = 0; p < kept.size(); ++p)
      if (kept[p]) c += weights[p];
    return c;
  }

  ImageScorer scorer() const {
    return [this](const Tensor& img) { return score(img); };
  }

  AttributionMap gradient_map() const {
    std::vector<double> v(weights.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::max(0.0, weights[i]);
    AttributionMap m;
    m.values = Tensor({grid, grid}, std::move(v));
    m.valid.assign(grid * grid, true);
    m.provenance = Method::grad_eclip;
    return m;
  }

  // Every patch away from the fill value.
  Tensor base_image() const { return Tensor({image_size, image_size, 3}, 1.0); }
};

// Ascending-order counterpart of a map (ties still by index).
inline AttributionMap inverse_map(const AttributionMap& m) {
  AttributionMap out = m;
  const auto [lo, hi] = std::minmax_element(m.values.data().begin(), m.values.data().end());
  for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] = *hi + *lo - m.values[i];
  return out;
}

}  // namespace mmel
