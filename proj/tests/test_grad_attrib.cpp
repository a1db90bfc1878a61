#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "mmel/grad_attrib.hpp"
#include "test_util.hpp"

using namespace mmel;
using mmel::testing::oracle_weights;
using mmel::testing::random_normalized;

namespace {

struct Pair {
  Weights w;
  EncoderActivations v, t;
};

Pair oracle_pair(std::uint64_t seed, const char* text = "a dog") {
  Pair p{oracle_weights(seed), {}, {}};
  p.v = encode_image(p.w, random_normalized(seed + 50, p.w.config.image_size));
  p.t = encode_text(p.w, tokenize(text, p.w.config));
  return p;
}

// One-layer, one-head, d = 4 activation record over 5 tokens.
EncoderActivations hand_acts(Tower tower, const std::vector<double>& q, const std::vector<double>& k,
                             const std::vector<double>& v, std::size_t pooled) {
  LayerRecord rec;
  rec.h_in = Tensor({5, 4});
  rec.q = Tensor::matrix(5, 4, q);
  rec.k = Tensor::matrix(5, 4, k);
  rec.v = Tensor::matrix(5, 4, v);
  EncoderActivations acts;
  acts.tower = tower;
  acts.pooled_index = pooled;
  acts.layers.push_back(rec);
  return acts;
}

ModelConfig hand_config() {
  ModelConfig c;
  c.image_size = 8;
  c.patch_size = 4;
  c.d_model = 4;
  c.n_heads = 1;
  c.n_layers_v = 1;
  c.n_layers_t = 1;
  c.max_text_len = 5;
  return c;
}

}  // namespace

TEST(Backprop, ShapesAndFinite) {
  const Weights w = generate_weights(ModelConfig{}, 3);
  const auto v = encode_image(w, random_normalized(1, 32));
  const auto t = encode_text(w, tokenize("a red car", w.config));
  for (Tower m : {Tower::vision, Tower::text}) {
    const auto g = backprop_to_attention(w, v, t, m);
    EXPECT_EQ(g.tower, m);
    ASSERT_EQ(g.per_layer.size(), w.n_layers(m));
    const auto& acts = m == Tower::vision ? v : t;
    for (std::size_t l = 0; l < g.per_layer.size(); ++l) {
      EXPECT_EQ(g.per_layer[l].shape(), acts.layers[l].attn_out.shape());
      EXPECT_TRUE(g.per_layer[l].all_finite());
    }
  }
}

TEST(Backprop, MatchesCentralDifferences) {
  for (std::uint64_t seed = 1; seed <= 6; ++seed) {
    const Pair p = oracle_pair(seed, seed % 2 ? "a dog" : "red car");
    for (Tower m : {Tower::vision, Tower::text}) {
      const auto g = backprop_to_attention(p.w, p.v, p.t, m);
      for (std::size_t l = 0; l < g.per_layer.size(); ++l) {
        const Tensor fd = finite_diff_similarity(p.w, p.v, p.t, m, l, 1e-4);
        EXPECT_LE(max_relative_error(g.per_layer[l], fd), 1e-6) << "seed " << seed << " layer " << l;
      }
    }
  }
}

TEST(Backprop, MatchesCentralDifferencesAtDefaultInitScale) {
  // Unscaled N(0, 0.02²) weights make the final LN strongly curved; a finer
  // step keeps truncation error below the tolerance.
  const Weights w = generate_weights(oracle_config(), 8);
  const auto v = encode_image(w, random_normalized(9, 8));
  const auto t = encode_text(w, tokenize("a dog", w.config));
  for (Tower m : {Tower::vision, Tower::text}) {
    const auto g = backprop_to_attention(w, v, t, m);
    for (std::size_t l = 0; l < g.per_layer.size(); ++l)
      EXPECT_LE(max_relative_error(g.per_layer[l], finite_diff_similarity(w, v, t, m, l, 1e-5)), 1e-6);
  }
}

TEST(Backprop, CombinedObjectiveMatchesCentralDifferences) {
  const Pair p = oracle_pair(4);
  for (double lambda : {0.25, 0.5, 1.0}) {
    const Objective obj{lambda};
    const auto g = backprop_to_attention(p.w, p.v, p.t, Tower::vision, obj);
    for (std::size_t l = 0; l < g.per_layer.size(); ++l) {
      const Tensor fd = finite_diff_similarity(p.w, p.v, p.t, Tower::vision, l, 1e-4, obj);
      EXPECT_LE(max_relative_error(g.per_layer[l], fd), 1e-6) << "lambda " << lambda;
    }
  }
}

TEST(Backprop, SecondOrderConvergence) {
  const Pair p = oracle_pair(2);
  for (Tower m : {Tower::vision, Tower::text}) {
    const auto g = backprop_to_attention(p.w, p.v, p.t, m);
    for (std::size_t l = 0; l < g.per_layer.size(); ++l) {
      double err[3];
      const double hs[3] = {1e-2, 1e-3, 1e-4};
      for (int i = 0; i < 3; ++i)
        err[i] = max_relative_error(g.per_layer[l], finite_diff_similarity(p.w, p.v, p.t, m, l, hs[i]));
      for (int i = 0; i < 2; ++i) {
        const double ratio = err[i] / err[i + 1];
        EXPECT_GE(ratio, 50.0);
        EXPECT_LE(ratio, 200.0);
      }
    }
  }
}

TEST(Backprop, DirectionalDerivative) {
  const Pair p = oracle_pair(5);
  for (Tower m : {Tower::vision, Tower::text}) {
    const auto& acts = m == Tower::vision ? p.v : p.t;
    const Tensor& other = m == Tower::vision ? p.t.embedding : p.v.embedding;
    const auto g = backprop_to_attention(p.w, p.v, p.t, m);
    for (std::size_t l = 0; l < acts.layers.size(); ++l) {
      auto dir = mmel::testing::random_vector(100 + l, acts.layers[l].attn_out.size());
      const double norm = l2_norm(dir);
      Tensor moved = acts.layers[l].attn_out;
      double predicted = 0.0;
      for (std::size_t i = 0; i < dir.size(); ++i) {
        const double delta = 1e-5 * dir[i] / norm;
        moved[i] += delta;
        predicted += g.per_layer[l][i] * delta;
      }
      const double c0 = similarity(acts.embedding, other);
      const double c1 = similarity(resume_with_attn_out(p.w, acts, l, moved).embedding, other);
      EXPECT_NEAR(c1 - c0, predicted, 1e-9);
    }
  }
}

TEST(Backprop, ZeroStepReproducesBaseline) {
  const Pair p = oracle_pair(3);
  const Tensor fd = finite_diff_similarity(p.w, p.v, p.t, Tower::vision, 0, 0.0);
  for (double x : fd.data()) EXPECT_EQ(x, 0.0);
  const auto again = resume_with_attn_out(p.w, p.v, 1, p.v.layers[1].attn_out);
  EXPECT_EQ(similarity(again.embedding, p.t.embedding), similarity(p.v.embedding, p.t.embedding));
}

TEST(Backprop, RejectsForeignActivations) {
  const Pair p = oracle_pair(1);
  const Weights big = generate_weights(ModelConfig{}, 1);
  EXPECT_THROW(backprop_to_attention(big, p.v, p.t, Tower::vision), ConsistencyError);
  EXPECT_THROW(backprop_to_attention(p.w, p.t, p.v, Tower::vision), ConsistencyError);
  EXPECT_THROW(backprop_to_attention(p.w, p.v, p.t, Tower::text, Objective{0.5}), ParameterError);
}

TEST(QkSimilarity, MatchesDirectSoftmax) {
  const Pair p = oracle_pair(7);
  const std::size_t heads = p.w.config.n_heads, dh = p.w.config.d_head();
  for (std::size_t l = 0; l < p.v.layers.size(); ++l) {
    const auto& rec = p.v.layers[l];
    const std::size_t n = rec.q.rows();
    std::vector<double> avg(n, 0.0);
    for (std::size_t h = 0; h < heads; ++h) {
      std::vector<double> e(n);
      double z = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t c = 0; c < dh; ++c) s += rec.q(0, h * dh + c) * rec.k(j, h * dh + c);
        e[j] = std::exp(s / std::sqrt(static_cast<double>(dh)));
        z += e[j];
      }
      for (std::size_t j = 0; j < n; ++j) avg[j] += e[j] / z / static_cast<double>(heads);
    }
    double spatial = 0.0;
    for (std::size_t j = 1; j < n; ++j) spatial += avg[j];
    const auto s = qk_similarity(p.v, l, heads);
    ASSERT_EQ(s.size(), n - 1);
    double total = 0.0;
    for (std::size_t j = 1; j < n; ++j) {
      EXPECT_NEAR(s[j - 1], avg[j] / spatial, 1e-12);
      total += s[j - 1];
    }
    EXPECT_NEAR(total, 1.0, 1e-9);
  }
}

TEST(QkSimilarity, IdenticalKeysGiveUniformWeights) {
  std::vector<double> k(20);
  for (std::size_t i = 0; i < 20; ++i) k[i] = 0.3 * static_cast<double>(i % 4);
  const auto acts = hand_acts(Tower::vision, mmel::testing::random_vector(1, 20), k, std::vector<double>(20, 1.0), 0);
  for (double s : qk_similarity(acts, 0, 2)) EXPECT_NEAR(s, 0.25, 1e-15);
}

TEST(GradEclipMap, HandEvaluatedFixture) {
  const double ln2 = std::log(2.0);
  // q_cls·k_1 / √4 = ln 2, all other logits 0: spatial weights (2, 1, 1, 1)/5.
  std::vector<double> q(20, 0.0), k(20, 0.0);
  q[0] = 2.0 * ln2;
  k[4] = 1.0;
  const std::vector<double> v{0, 0, 0, 0,  //
                              1, 0, 0, 0,  //
                              0, 1, 0, 0,  //
                              0, 0, 0, 2,  //
                              3, 1, 0, 0};
  const auto acts = hand_acts(Tower::vision, q, k, v, 0);
  Tensor g({5, 4});
  g(0, 0) = 1.0;
  g(0, 1) = -1.0;
  g(0, 3) = 0.5;
  g(2, 2) = 9.0;  // non-pooled rows do not contribute
  const auto map = grad_eclip_map(acts, LayerGradients{Tower::vision, {g}}, hand_config());
  ASSERT_EQ(map.values.shape(), (Shape{2, 2}));
  EXPECT_NEAR(map.values(0, 0), 1.0 * 0.4, 1e-15);
  EXPECT_EQ(map.values(0, 1), 0.0);
  EXPECT_NEAR(map.values(1, 0), 1.0 * 0.2, 1e-15);
  EXPECT_NEAR(map.values(1, 1), 2.0 * 0.2, 1e-15);
  EXPECT_EQ(map.provenance, Method::grad_eclip);
}

TEST(GradEclipText, HandEvaluatedFixture) {
  // BOS w1 w2 EOS PAD; the EOS query sees positions 0..3 uniformly.
  std::vector<double> q(20, 0.0), k(20, 0.0);
  const std::vector<double> v{5, 5, 5, 5,   //
                              2, 0, 0, 0,   //
                              -1, 0, 0, 0,  //
                              7, 0, 0, 0,   //
                              9, 0, 0, 0};
  const auto acts = hand_acts(Tower::text, q, k, v, 3);
  Tensor g({5, 4});
  g(3, 0) = 1.0;
  const auto map = grad_eclip_text(acts, LayerGradients{Tower::text, {g}}, hand_config());
  EXPECT_EQ(map.values[0], 0.0);
  EXPECT_NEAR(map.values[1], 2.0 * 0.5, 1e-15);
  EXPECT_EQ(map.values[2], 0.0);
  EXPECT_EQ(map.values[3], 0.0);
  EXPECT_EQ(map.values[4], 0.0);
  EXPECT_EQ(map.valid, (std::vector<bool>{false, true, true, false, false}));
}

TEST(GradEclipMap, NonNegativeAndPadMasked) {
  const Weights w = generate_weights(ModelConfig{}, 12);
  for (std::uint64_t s = 0; s < 5; ++s) {
    const auto v = encode_image(w, random_normalized(s, 32));
    const auto tok = tokenize(mmel::testing::kCaptions[s], w.config);
    const auto t = encode_text(w, tok);
    const auto map = grad_eclip_map(v, backprop_to_attention(w, v, t, Tower::vision), w.config);
    EXPECT_EQ(map.values.shape(), (Shape{4, 4}));
    for (double x : map.values.data()) EXPECT_GE(x, 0.0);
    const auto tmap = grad_eclip_text(t, backprop_to_attention(w, v, t, Tower::text), w.config);
    for (std::size_t i = 0; i < tok.ids.size(); ++i) {
      EXPECT_GE(tmap.values[i], 0.0);
      if (i == 0 || i >= tok.eos_index) {
        EXPECT_EQ(tmap.values[i], 0.0);
      }
    }
  }
}

TEST(GradEclipMap, ZeroGradientGivesZeroMap) {
  const Pair p = oracle_pair(2);
  LayerGradients zero{Tower::vision, {}};
  for (const auto& rec : p.v.layers) zero.per_layer.emplace_back(rec.attn_out.shape());
  const auto map = grad_eclip_map(p.v, zero, p.w.config);
  for (double x : map.values.data()) EXPECT_EQ(x, 0.0);
}

TEST(GradEclipMap, PositivelyHomogeneousInGradients) {
  const Pair p = oracle_pair(6);
  const auto g = backprop_to_attention(p.w, p.v, p.t, Tower::vision);
  const auto base = grad_eclip_map(p.v, g, p.w.config);
  for (double lambda : {0.25, 2.0, 8.0, 3.7}) {
    auto scaled = g;
    for (auto& t : scaled.per_layer)
      for (double& x : t.data()) x *= lambda;
    const auto m = grad_eclip_map(p.v, scaled, p.w.config);
    const bool exact = lambda == 0.25 || lambda == 2.0 || lambda == 8.0;
    for (std::size_t i = 0; i < m.values.size(); ++i) {
      if (exact) {
        EXPECT_EQ(m.values[i], lambda * base.values[i]);
      } else {
        EXPECT_NEAR(m.values[i], lambda * base.values[i], 1e-12 * std::abs(lambda * base.values[i]) + 1e-300);
      }
    }
  }
}

TEST(GradEclipMap, ModalityMismatch) {
  const Pair p = oracle_pair(1);
  const auto gt = backprop_to_attention(p.w, p.v, p.t, Tower::text);
  EXPECT_THROW(grad_eclip_map(p.t, gt, p.w.config), ConsistencyError);
  EXPECT_THROW(grad_eclip_text(p.v, gt, p.w.config), ConsistencyError);
  EXPECT_THROW(qk_similarity(p.t, 0, 2), ConsistencyError);
}

TEST(CombinedSimilarity, LambdaZeroIsPlainSimilarity) {
  const Pair p = oracle_pair(3);
  EXPECT_EQ(combined_similarity(p.w, p.v, p.t.embedding, 0.0), similarity(p.v.embedding, p.t.embedding));
  const auto g0 = backprop_to_attention(p.w, p.v, p.t, Tower::vision, Objective{0.0});
  const auto g = backprop_to_attention(p.w, p.v, p.t, Tower::vision);
  EXPECT_EQ(grad_eclip_map(p.v, g0, p.w.config).values, grad_eclip_map(p.v, g, p.w.config).values);
}

TEST(CombinedSimilarity, DegenerateEqualHiddenStates) {
  Pair p = oracle_pair(4);
  Tensor& h = p.v.layers.back().h_out;
  for (std::size_t i = 1; i < h.rows(); ++i)
    for (std::size_t c = 0; c < h.cols(); ++c) h(i, c) = h(0, c);
  const double c = similarity(p.v.embedding, p.t.embedding);
  for (double lambda : {0.1, 0.5, 1.0}) EXPECT_NEAR(combined_similarity(p.w, p.v, p.t.embedding, lambda), c, 1e-14);
}

TEST(CombinedSimilarity, TwoPatchHandComputation) {
  Weights w = generate_weights(oracle_config(), 5);
  // Identity-like projection on the first four channels, unit LN.
  Tensor& proj = w.at("vision/proj");
  for (double& x : proj.data()) x = 0.0;
  for (std::size_t i = 0; i < 4; ++i) proj(i, i) = 1.0;
  EncoderActivations acts;
  acts.tower = Tower::vision;
  LayerRecord rec;
  rec.h_out = Tensor::matrix(3, 8, {3, 1, 0, 0, 0, 0, 0, 0,    //
                                    0, 2, 1, 0, 0, 0, 0, -1,   //
                                    1, 0, 0, 4, 0, 0, 2, 0});
  rec.h_in = rec.h_out;
  acts.layers.push_back(rec);
  acts.projected = project_token(w, Tower::vision, rec.h_out.row(0), &acts.pooled_ln);
  acts.embedding = l2_normalized(acts.projected);
  const Tensor e_txt = l2_normalized(Tensor::vector({1, 1, 0, 0}));

  auto cosine = [&](std::size_t row) {
    std::vector<double> x(rec.h_out.row(row).begin(), rec.h_out.row(row).end());
    double m = 0.0, var = 0.0;
    for (double v : x) m += v / 8.0;
    for (double v : x) var += (v - m) * (v - m) / 8.0;
    std::vector<double> u(4);
    for (std::size_t i = 0; i < 4; ++i) u[i] = (x[i] - m) / std::sqrt(var + 1e-5);
    double uu = 0.0, ue = 0.0;
    for (std::size_t i = 0; i < 4; ++i) {
      uu += u[i] * u[i];
      ue += u[i] * e_txt[i];
    }
    return ue / std::sqrt(uu);
  };
  const double expected = 0.5 * cosine(0) + 0.5 * 0.5 * (cosine(1) + cosine(2));
  EXPECT_NEAR(combined_similarity(w, acts, e_txt, 0.5), expected, 1e-12);
  EXPECT_THROW(combined_similarity(w, acts, e_txt, 1.5), ParameterError);
  EXPECT_THROW(combined_similarity(w, acts, e_txt, -0.1), ParameterError);
}
