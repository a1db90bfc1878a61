#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "mmel/cli.hpp"
#include "test_util.hpp"

using namespace mmel;
using mmel::testing::fixture;
using mmel::testing::ScratchDir;

namespace {

struct Outcome {
  int code;
  std::string err;
};

Outcome run_cli(const std::vector<std::string>& args) {
  std::ostringstream err;
  const int code = cli::main(args, err);
  return {code, err.str()};
}

std::string slurp(const std::string& path) { return mmel::detail::slurp(path); }

std::string make_weights(const ScratchDir& dir, const std::string& name = "w.bin", const std::string& seed = "0") {
  const std::string path = dir / name;
  EXPECT_EQ(run_cli({"gen-weights", "--weights", path, "--seed", seed, "--out", dir / (name + ".gen")}).code, 0);
  return path;
}

std::string ppm_bytes(std::size_t w, std::size_t h, unsigned char fill, const std::string& maxval = "255") {
  return "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n" + maxval + "\n" + std::string(w * h * 3, static_cast<char>(fill));
}

}  // namespace

TEST(ParseArgs, AttributeExample) {
  const auto cmd = cli::parse_args({"attribute", "--image", "x.ppm", "--text", "a dog", "--weights", "w.bin", "--method", "mmel"});
  EXPECT_EQ(cmd.verb, "attribute");
  EXPECT_EQ(cmd.images, std::vector<std::string>{"x.ppm"});
  EXPECT_EQ(cmd.texts, std::vector<std::string>{"a dog"});
  EXPECT_EQ(cmd.method, Method::mmel);
  EXPECT_EQ(cmd.effective_lambda(), 0.5);
  const auto ge = cli::parse_args({"attribute", "--image", "x.ppm", "--text", "a", "--weights", "w", "--method", "grad-eclip"});
  EXPECT_EQ(ge.effective_lambda(), 0.0);
}

TEST(ParseArgs, UsageErrorsExitTwo) {
  const auto missing = run_cli({"attribute", "--text", "a dog", "--weights", "w.bin"});
  EXPECT_EQ(missing.code, 2);
  EXPECT_NE(missing.err.find("--image"), std::string::npos) << missing.err;
  const auto alpha = run_cli({"attribute", "--image", "x.ppm", "--text", "a", "--weights", "w", "--alpha", "-1"});
  EXPECT_EQ(alpha.code, 2);
  EXPECT_NE(alpha.err.find("alpha"), std::string::npos) << alpha.err;
  EXPECT_EQ(run_cli({"attribute", "--image", "x", "--text", "a", "--weights", "w", "--bogus", "1"}).code, 2);
  EXPECT_EQ(run_cli({"frobnicate"}).code, 2);
  EXPECT_EQ(run_cli({}).code, 2);
  EXPECT_EQ(run_cli({"attribute", "--image", "x", "--text", "a", "--weights", "w", "--alpha", "abc"}).code, 2);
  EXPECT_EQ(run_cli({"attribute", "--image", "x", "--text", "a", "--weights", "w", "--method", "gradcam"}).code, 2);
  EXPECT_EQ(run_cli({"attribute", "--image", "x", "--text", "a", "--weights", "w", "--temperature", "0"}).code, 2);
  EXPECT_EQ(run_cli({"attribute", "--image", "x", "--text", "a", "--weights", "w", "--beta", "0.5"}).code, 2);
  EXPECT_EQ(run_cli({"attribute", "--image", "x", "--text", "a", "--weights", "w", "--lambda", "2"}).code, 2);
  EXPECT_EQ(run_cli({"evaluate", "--image", "a", "--image", "b", "--text", "x", "--text", "y", "--text", "z",
                     "--weights", "w"}).code, 2);
  EXPECT_EQ(run_cli({"bench", "--image", "x", "--text", "a", "--weights", "w", "--reps", "5"}).code, 2);
  EXPECT_EQ(run_cli({"evaluate", "--image", "x", "--text", "a", "--weights", "w", "--planted", "--method", "mmel"}).code, 2);
}

TEST(ParseArgs, ConfigFileAndOverrides) {
  ScratchDir dir("cfg");
  std::ofstream(dir / "run.toml") << "# run settings\nseed = 7\nalpha = 1.5\nscales = 1.0, 0.5\nformat = \"csv\"\n";
  const auto cmd = cli::parse_args({"attribute", "--image", "x", "--text", "a", "--weights", "w", "--config",
                                    dir / "run.toml", "--alpha", "0.25"});
  EXPECT_EQ(cmd.seed, 7u);
  EXPECT_EQ(*cmd.alpha, 0.25);
  EXPECT_EQ(cmd.scales, (std::vector<double>{1.0, 0.5}));
  EXPECT_EQ(cmd.format, "csv");
  std::ofstream(dir / "bad.toml") << "colour = red\n";
  EXPECT_EQ(run_cli({"attribute", "--image", "x", "--text", "a", "--weights", "w", "--config", dir / "bad.toml"}).code, 2);
}

TEST(Run, RuntimeErrorsExitOne) {
  ScratchDir dir("rt");
  const auto r = run_cli({"attribute", "--image", fixture("scene.ppm").string(), "--text", "a", "--weights",
                          dir / "missing.bin", "--out", dir / "o"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("missing.bin"), std::string::npos);
  const std::string w = make_weights(dir);
  std::ofstream(dir / "small.ppm", std::ios::binary) << ppm_bytes(8, 8, 0);
  EXPECT_EQ(run_cli({"attribute", "--image", dir / "small.ppm", "--text", "a", "--weights", w, "--out", dir / "o"}).code, 1);
}

TEST(Ppm, DecodeBasics) {
  const Tensor zero = decode_ppm(ppm_bytes(32, 32, 0), 32);
  EXPECT_EQ(zero.shape(), (Shape{32, 32, 3}));
  for (double v : zero.data()) EXPECT_EQ(v, 0.0);
  const Tensor white = decode_ppm(ppm_bytes(2, 3, 255));
  for (double v : white.data()) EXPECT_EQ(v, 1.0);
  const Tensor img = mmel::testing::random_image(1, 32);
  const std::string once = encode_ppm(img);
  EXPECT_EQ(encode_ppm(decode_ppm(once)), once);
  const Tensor back = decode_ppm(once);
  for (std::size_t i = 0; i < img.size(); ++i) EXPECT_LE(std::abs(back[i] - img[i]), 0.5 / 255.0 + 1e-12);
  EXPECT_EQ(decode_ppm("P6\n# comment\n1 1\n255\n\x10\x20\x30").shape(), (Shape{1, 1, 3}));
}

TEST(Ppm, DistinctErrorClasses) {
  EXPECT_THROW(decode_ppm("P3\n1 1\n255\n1 2 3"), ImageMagicError);
  EXPECT_THROW(decode_ppm(ppm_bytes(4, 4, 0).substr(0, 30)), ImageTruncatedError);
  EXPECT_THROW(decode_ppm("P6\n4 4"), ImageTruncatedError);
  EXPECT_THROW(decode_ppm(ppm_bytes(4, 4, 0, "65535")), ImageMaxvalError);
  EXPECT_THROW(decode_ppm(ppm_bytes(16, 16, 0), 32), ImageSizeError);
  EXPECT_THROW(read_ppm(fixture("scene.ppm"), 16), ImageSizeError);
  EXPECT_NO_THROW(read_ppm(fixture("scene.ppm"), 32));
  EXPECT_NO_THROW(read_ppm(fixture("planted.ppm"), 32));
}

TEST(Heatmap, ConstantAndIdentity) {
  const std::string ones = encode_heatmap(Tensor({4, 4}, 1.0), 32);
  const Tensor decoded = decode_pgm(ones);
  EXPECT_EQ(decoded.shape(), (Shape{32, 32}));
  for (double v : decoded.data()) EXPECT_EQ(v, 1.0);
  const Tensor m({5, 5}, mmel::testing::random_vector(3, 25, 0, 1));
  EXPECT_EQ(upsample_bilinear(m, 5, 5), m);
}

TEST(Heatmap, HalfPixelCentres) {
  const Tensor up = upsample_bilinear(Tensor::matrix(2, 2, {0, 1, 2, 3}), 4, 4);
  // Source coordinates for 4 outputs from 2 inputs: 0 (clamped), 0.25, 0.75, 1 (clamped).
  const double xs[] = {0.0, 0.25, 0.75, 1.0};
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 0; x < 4; ++x) EXPECT_NEAR(up(y, x), 2.0 * xs[y] + xs[x], 1e-15);
}

TEST(Heatmap, BilinearConvexity) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const Tensor m({4, 4}, mmel::testing::random_vector(s, 16, -2, 5));
    const auto [lo, hi] = std::minmax_element(m.data().begin(), m.data().end());
    for (double v : upsample_bilinear(m, 32, 32).data()) {
      EXPECT_GE(v, *lo);
      EXPECT_LE(v, *hi);
    }
  }
}

TEST(Smoke, GenWeightsThenAttribute) {
  ScratchDir dir("smoke");
  const std::string w = make_weights(dir);
  const std::string out = dir / "attr";
  ASSERT_EQ(run_cli({"attribute", "--image", fixture("scene.ppm").string(), "--text", "a red circle", "--weights", w,
                     "--method", "mmel", "--out", out}).code, 0);
  for (const char* f : {"heatmap.pgm", "heatmap_base.pgm", "scores.json", "manifest.json"})
    EXPECT_TRUE(std::filesystem::exists(std::filesystem::path(out) / f)) << f;
  const auto scores = nlohmann::json::parse(slurp(out + "/scores.json"));
  EXPECT_EQ(scores["method"], "mmel");
  EXPECT_GE(scores["multiplier"]["min"].get<double>(), 1.0);
  EXPECT_LE(scores["multiplier"]["max"].get<double>(), 3.0);
  const auto manifest = nlohmann::json::parse(slurp(out + "/manifest.json"));
  EXPECT_EQ(manifest["weight_hash"], git_blob_hash(slurp(w)));
  EXPECT_EQ(manifest["command"]["verb"], "attribute");
  EXPECT_EQ(manifest["command"]["lambda"], 0.5);
  EXPECT_EQ(manifest["argv"].size(), 11u);
}

TEST(Smoke, AlphaZeroHeatmapsAreByteIdentical) {
  ScratchDir dir("alpha0");
  const std::string w = make_weights(dir);
  const std::string out = dir / "attr";
  ASSERT_EQ(run_cli({"attribute", "--image", fixture("scene.ppm").string(), "--text", "a red circle", "--weights", w,
                     "--method", "mmel", "--alpha", "0", "--out", out}).code, 0);
  EXPECT_EQ(slurp(out + "/heatmap.pgm"), slurp(out + "/heatmap_base.pgm"));
  const auto scores = nlohmann::json::parse(slurp(out + "/scores.json"));
  EXPECT_EQ(scores["maps"]["heatmap"], scores["maps"]["heatmap_base"]);
}

TEST(Smoke, OtherVerbsWriteTheirArtifacts) {
  ScratchDir dir("verbs");
  const std::string w = make_weights(dir);
  const std::string img = fixture("scene.ppm").string();
  ASSERT_EQ(run_cli({"occlude", "--image", img, "--text", "a", "--weights", w, "--out", dir / "occ"}).code, 0);
  for (int i = 0; i < 5; ++i)
    EXPECT_TRUE(std::filesystem::exists(dir / ("occ/occluded_" + std::to_string(i) + ".ppm")));
  ASSERT_EQ(run_cli({"sanity", "--image", img, "--text", "a", "--weights", w, "--seeds", "2", "--method", "grad-eclip",
                     "--out", dir / "san"}).code, 0);
  const auto san = nlohmann::json::parse(slurp(dir / "san/sanity.json"));
  EXPECT_EQ(san["depths"][0]["median_abs_rho"], 1.0);
  ASSERT_EQ(run_cli({"attribute", "--image", img, "--text", "a", "--weights", w, "--method", "random", "--format",
                     "csv", "--out", dir / "csv"}).code, 0);
  EXPECT_TRUE(std::filesystem::exists(dir / "csv/heatmap.csv"));
  ASSERT_EQ(run_cli({"bench", "--image", img, "--text", "a", "--weights", w, "--reps", "10", "--out", dir / "b"}).code, 0);
  EXPECT_GE(nlohmann::json::parse(slurp(dir / "b/bench.json"))["overhead_ratio"].get<double>(), 1.0);
}

TEST(Evaluate, PlantedFixtureRandomIsWorse) {
  ScratchDir dir("planted");
  const std::string w = make_weights(dir);
  std::vector<std::string> base{"evaluate", "--weights", w, "--text", "a", "--planted", "--seed", "3"};
  for (int i = 0; i < 4; ++i) base.insert(base.end(), {"--image", fixture("planted.ppm").string()});
  auto ge = base, rnd = base;
  ge.insert(ge.end(), {"--method", "grad-eclip", "--out", dir / "ge"});
  rnd.insert(rnd.end(), {"--method", "random", "--out", dir / "rnd"});
  ASSERT_EQ(run_cli(ge).code, 0);
  ASSERT_EQ(run_cli(rnd).code, 0);
  const auto a = nlohmann::json::parse(slurp(dir / "ge/report.json"))["aggregates"];
  const auto b = nlohmann::json::parse(slurp(dir / "rnd/report.json"))["aggregates"];
  EXPECT_LT(a["mean_del_auc"].get<double>(), b["mean_del_auc"].get<double>());
  EXPECT_EQ(nlohmann::json::parse(slurp(dir / "ge/report.json"))["rows"].size(), 4u);
}

TEST(Determinism, PipelineIsByteReproducible) {
  auto pipeline = [](const ScratchDir& dir) {
    const std::string w = make_weights(dir, "w.bin", "11");
    const std::string img = fixture("scene.ppm").string();
    EXPECT_EQ(run_cli({"attribute", "--image", img, "--text", "a red circle", "--weights", w, "--out", dir / "a"}).code, 0);
    EXPECT_EQ(run_cli({"evaluate", "--image", img, "--image", fixture("planted.ppm").string(), "--text", "a red circle",
                       "--weights", w, "--method", "grad-eclip", "--out", dir / "e"}).code, 0);
    std::vector<std::string> bytes{slurp(w)};
    for (const char* f : {"a/heatmap.pgm", "a/heatmap_base.pgm", "a/scores.json", "e/report.csv", "e/report.json"})
      bytes.push_back(slurp(dir / f));
    return bytes;
  };
  // Same paths both times: the reports record their own flags.
  ScratchDir dir("det");
  const auto a = pipeline(dir);
  for (const auto& entry : std::filesystem::directory_iterator(dir.path())) std::filesystem::remove_all(entry);
  const auto b = pipeline(dir);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]) << "artifact " << i;
}
