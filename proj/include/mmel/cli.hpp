#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "mmel/enhancer.hpp"
#include "mmel/errors.hpp"
#include "mmel/faithfulness.hpp"
#include "mmel/grad_attrib.hpp"
#include "mmel/image_io.hpp"
#include "mmel/model.hpp"
#include "mmel/report.hpp"
#include "mmel/weight_io.hpp"

namespace mmel::cli {

// Bad invocation: unknown verb/flag, missing flag, unparsable or out-of-range value.
class UsageError : public Error {
  using Error::Error;
};

// --help was requested; carries the rendered help text.
class HelpRequested : public std::exception {
 public:
  explicit HelpRequested(std::string text) : text_(std::move(text)) {}
  const char* what() const noexcept override { return text_.c_str(); }

 private:
  std::string text_;
};

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

struct Command {
  std::string verb;
  std::vector<std::string> argv;  // as given, for the manifest

  std::string weights;
  std::uint64_t seed = 0;
  std::string config_path;
  std::string out_dir = ".";

  std::vector<std::string> images;
  std::vector<std::string> texts;
  Method method = Method::mmel;
  std::optional<double> alpha, temperature, beta;
  std::optional<double> lambda;
  std::vector<double> scales;  // empty: take from the weight file
  double retain = 0.5;
  std::size_t steps = 16;
  std::vector<double> levels = default_occlusion_levels();
  std::size_t seeds = 20;
  std::string format = "pgm";
  std::size_t reps = 50;
  bool planted = false;  // evaluate: score with the planted closed-form model

  ModelConfig model;
  PreprocessConfig preprocess;

  // Objective weight: --lambda if given, else 0.5 for mmel and 0 otherwise.
  double effective_lambda() const { return lambda ? *lambda : (method == Method::mmel ? 0.5 : 0.0); }

  nlohmann::json resolved() const {
    nlohmann::json j = {{"verb", verb},
                        {"weights", weights},
                        {"seed", seed},
                        {"config", config_path},
                        {"out", out_dir},
                        {"images", images},
                        {"texts", texts},
                        {"method", std::string(method_name(method))},
                        {"lambda", effective_lambda()},
                        {"retain", retain},
                        {"steps", steps},
                        {"levels", levels},
                        {"seeds", seeds},
                        {"format", format},
                        {"reps", reps},
                        {"planted", planted},
                        {"model", config_to_json(model)},
                        {"preprocess", {{"mean", preprocess.mean}, {"std", preprocess.std}}}};
    j["alpha"] = alpha ? nlohmann::json(*alpha) : nlohmann::json(nullptr);
    j["temperature"] = temperature ? nlohmann::json(*temperature) : nlohmann::json(nullptr);
    j["beta"] = beta ? nlohmann::json(*beta) : nlohmann::json(nullptr);
    j["scales"] = scales;
    return j;
  }
};

namespace detail {

inline Method parse_method(const std::string& s) {
  if (s == "grad-eclip") return Method::grad_eclip;
  if (s == "mmel") return Method::mmel;
  if (s == "random") return Method::random;
  throw UsageError("unknown --method '" + s + "' (expected grad-eclip, mmel or random)");
}

inline double parse_number(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw UsageError("cannot parse number for '" + key + "': " + v);
  }
}

inline std::size_t parse_count(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    if (!v.empty() && v[0] == '-') throw std::invalid_argument(v);
    const unsigned long long n = std::stoull(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return static_cast<std::size_t>(n);
  } catch (const std::exception&) {
    throw UsageError("cannot parse non-negative integer for '" + key + "': " + v);
  }
}

inline std::vector<double> parse_list(const std::string& key, const std::string& v) {
  std::vector<double> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item.erase(0, item.find_first_not_of(" \t"));
    item.erase(item.find_last_not_of(" \t") + 1);
    if (!item.empty()) out.push_back(parse_number(key, item));
  }
  if (out.empty()) throw UsageError("empty list for '" + key + "'");
  return out;
}

inline std::string trim(std::string s) {
  s.erase(0, s.find_first_not_of(" \t\r"));
  const auto last = s.find_last_not_of(" \t\r");
  s.erase(last == std::string::npos ? 0 : last + 1);
  if (s.size() >= 2 && ((s.front() == '"' && s.back() == '"') || (s.front() == '\'' && s.back() == '\'')))
    s = s.substr(1, s.size() - 2);
  return s;
}

// Flat key = value file; '#' starts a comment.
inline std::map<std::string, std::string> read_config_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw UsageError("cannot read --config file " + path);
  std::map<std::string, std::string> kv;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    if (trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw UsageError(path + ":" + std::to_string(lineno) + ": expected key = value");
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return kv;
}

inline void apply_config(Command& cmd, const std::map<std::string, std::string>& kv) {
  for (const auto& [key, value] : kv) {
    auto& m = cmd.model;
    if (key == "image_size") m.image_size = parse_count(key, value);
    else if (key == "patch_size") m.patch_size = parse_count(key, value);
    else if (key == "d_model") m.d_model = parse_count(key, value);
    else if (key == "n_heads") m.n_heads = parse_count(key, value);
    else if (key == "n_layers_v") m.n_layers_v = parse_count(key, value);
    else if (key == "n_layers_t") m.n_layers_t = parse_count(key, value);
    else if (key == "mlp_ratio") m.mlp_ratio = parse_count(key, value);
    else if (key == "d_shared") m.d_shared = parse_count(key, value);
    else if (key == "vocab_size") m.vocab_size = parse_count(key, value);
    else if (key == "max_text_len") m.max_text_len = parse_count(key, value);
    else if (key == "ln_eps") m.ln_eps = parse_number(key, value);
    else if (key == "mean" || key == "std") {
      const auto v = parse_list(key, value);
      if (v.size() != 3) throw UsageError("'" + key + "' needs three comma-separated values");
      auto& dst = key == "mean" ? cmd.preprocess.mean : cmd.preprocess.std;
      std::copy(v.begin(), v.end(), dst.begin());
    } else if (key == "seed") cmd.seed = parse_count(key, value);
    else if (key == "method") cmd.method = parse_method(value);
    else if (key == "alpha") cmd.alpha = parse_number(key, value);
    else if (key == "temperature") cmd.temperature = parse_number(key, value);
    else if (key == "beta") cmd.beta = parse_number(key, value);
    else if (key == "lambda") cmd.lambda = parse_number(key, value);
    else if (key == "scales") cmd.scales = parse_list(key, value);
    else if (key == "retain") cmd.retain = parse_number(key, value);
    else if (key == "steps") cmd.steps = parse_count(key, value);
    else if (key == "levels") cmd.levels = parse_list(key, value);
    else if (key == "seeds") cmd.seeds = parse_count(key, value);
    else if (key == "format") cmd.format = value;
    else if (key == "reps") cmd.reps = parse_count(key, value);
    else throw UsageError("unknown config key '" + key + "'");
  }
}

inline void validate(const Command& c) {
  if (c.alpha && !(*c.alpha >= 0.0)) throw UsageError("parameter error: --alpha must be >= 0");
  if (c.temperature && !(*c.temperature > 0.0)) throw UsageError("parameter error: --temperature must be > 0");
  if (c.beta && !(*c.beta >= 1.0)) throw UsageError("parameter error: --beta must be >= 1");
  if (c.lambda && !(*c.lambda >= 0.0 && *c.lambda <= 1.0))
    throw UsageError("parameter error: --lambda must lie in [0, 1]");
  for (double s : c.scales)
    if (!(s > 0.0 && s <= 1.0)) throw UsageError("parameter error: scales must lie in (0, 1]");
  if (!(c.retain > 0.0 && c.retain <= 1.0)) throw UsageError("parameter error: --retain must lie in (0, 1]");
  if (c.steps < 1) throw UsageError("parameter error: --steps must be >= 1");
  for (double l : c.levels)
    if (!(l >= 0.0 && l <= 1.0)) throw UsageError("parameter error: --levels must lie in [0, 1]");
  if (c.seeds < 1) throw UsageError("parameter error: --seeds must be >= 1");
  if (c.reps < 10) throw UsageError("parameter error: --reps must be >= 10");
  if (c.format != "pgm" && c.format != "csv" && c.format != "json")
    throw UsageError("parameter error: --format must be pgm, csv or json");
  if (c.verb == "evaluate" && c.texts.size() != 1 && c.texts.size() != c.images.size())
    throw UsageError("evaluate needs one --text or one per --image");
  if (c.planted && c.method == Method::mmel)
    throw UsageError("--planted supports --method grad-eclip or random");
  try {
    c.model.validate();
    c.preprocess.validate();
  } catch (const ParameterError& e) {
    throw UsageError(std::string("parameter error: ") + e.what());
  }
}

}  // namespace detail

inline Command parse_args(const std::vector<std::string>& args) {
  CLI::App app{"Gradient attribution with multi-scale semantic enhancement for a CLIP-like dual encoder", "mmel"};
  app.require_subcommand(1);
  app.allow_extras(false);

  struct Raw {
    std::string weights, config, out;
    std::optional<std::uint64_t> seed;
    std::vector<std::string> images, texts;
    bool planted = false;
    std::optional<std::string> method, format, lambda, alpha, temperature, beta, retain, steps, levels, seeds, reps;
  } raw;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--weights", raw.weights, "MMELW1 weight file");
    sub->add_option("--seed", raw.seed, "64-bit seed");
    sub->add_option("--config", raw.config, "flat key = value config file")->check(CLI::ExistingFile);
    sub->add_option("--out", raw.out, "output directory");
  };
  auto add_method_flags = [&](CLI::App* sub) {
    sub->add_option("--method", raw.method, "grad-eclip | mmel | random");
    sub->add_option("--alpha", raw.alpha, "enhancement strength (>= 0)");
    sub->add_option("--temperature", raw.temperature, "semantic attention temperature (> 0)");
    sub->add_option("--beta", raw.beta, "contrast exponent (>= 1)");
    sub->add_option("--lambda", raw.lambda, "patch-token similarity weight in [0, 1]");
  };
  auto add_inputs = [&](CLI::App* sub, bool many) {
    auto* img = sub->add_option("--image", raw.images, "P6 image")->required();
    auto* txt = sub->add_option("--text", raw.texts, "caption")->required();
    if (!many) {
      img->expected(1);
      txt->expected(1);
    }
  };

  auto* gen = app.add_subcommand("gen-weights", "generate a deterministic weight file");
  add_common(gen);
  gen->get_option("--weights")->required();
  gen->add_option("--alpha", raw.alpha);
  gen->add_option("--temperature", raw.temperature);
  gen->add_option("--beta", raw.beta);

  auto* attr = app.add_subcommand("attribute", "write attribution heatmaps for one image/text pair");
  add_common(attr);
  attr->get_option("--weights")->required();
  add_inputs(attr, false);
  add_method_flags(attr);
  attr->add_option("--format", raw.format, "pgm | csv | json");

  auto* eval = app.add_subcommand("evaluate", "faithfulness metrics over image/text samples");
  add_common(eval);
  eval->get_option("--weights")->required();
  add_inputs(eval, true);
  add_method_flags(eval);
  eval->add_option("--retain", raw.retain, "fraction of patches kept for confidence drop");
  eval->add_option("--steps", raw.steps, "deletion/insertion steps");
  eval->add_flag("--planted", raw.planted, "score with the planted patch model instead of the encoder");

  auto* occ = app.add_subcommand("occlude", "progressive occlusion of the top-attributed patches");
  add_common(occ);
  occ->get_option("--weights")->required();
  add_inputs(occ, false);
  add_method_flags(occ);
  occ->add_option("--levels", raw.levels, "comma-separated occlusion fractions");

  auto* san = app.add_subcommand("sanity", "weight-randomisation sanity check");
  add_common(san);
  san->get_option("--weights")->required();
  add_inputs(san, false);
  add_method_flags(san);
  san->add_option("--seeds", raw.seeds, "number of randomisation seeds");

  auto* bench = app.add_subcommand("bench", "enhancer overhead relative to the baseline map");
  add_common(bench);
  bench->get_option("--weights")->required();
  add_inputs(bench, false);
  add_method_flags(bench);
  bench->add_option("--reps", raw.reps, "timed repetitions (>= 10)");

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    const auto subs = app.get_subcommands();
    throw HelpRequested(subs.empty() ? app.help() : subs.front()->help());
  } catch (const CLI::ParseError& e) {
    throw UsageError(e.what());
  }

  Command cmd;
  cmd.argv = args;
  for (auto* sub : app.get_subcommands()) cmd.verb = sub->get_name();

  if (!raw.config.empty()) {
    cmd.config_path = raw.config;
    detail::apply_config(cmd, detail::read_config_file(raw.config));
  }
  cmd.weights = raw.weights;
  if (!raw.out.empty()) cmd.out_dir = raw.out;
  if (raw.seed) cmd.seed = *raw.seed;
  cmd.images = raw.images;
  cmd.texts = raw.texts;
  if (raw.method) cmd.method = detail::parse_method(*raw.method);
  if (raw.format) cmd.format = *raw.format;
  if (raw.alpha) cmd.alpha = detail::parse_number("--alpha", *raw.alpha);
  if (raw.temperature) cmd.temperature = detail::parse_number("--temperature", *raw.temperature);
  if (raw.beta) cmd.beta = detail::parse_number("--beta", *raw.beta);
  if (raw.lambda) cmd.lambda = detail::parse_number("--lambda", *raw.lambda);
  if (raw.retain) cmd.retain = detail::parse_number("--retain", *raw.retain);
  if (raw.steps) cmd.steps = detail::parse_count("--steps", *raw.steps);
  if (raw.levels) cmd.levels = detail::parse_list("--levels", *raw.levels);
  if (raw.seeds) cmd.seeds = detail::parse_count("--seeds", *raw.seeds);
  cmd.planted = raw.planted;
  if (raw.reps) cmd.reps = detail::parse_count("--reps", *raw.reps);
  detail::validate(cmd);
  return cmd;
}

// ---------------------------------------------------------------------------

namespace detail {

struct Loaded {
  Weights weights;
  std::string hash;
  EnhancerParams enhancer;
  bool has_enhancer = false;
};

inline Loaded load(const Command& cmd) {
  Loaded l;
  const std::string bytes = read_file_bytes(cmd.weights);
  l.weights = deserialize_weights(bytes);
  l.hash = git_blob_hash(bytes);
  if (l.weights.has_enhancer()) {
    l.enhancer = EnhancerParams::from_weights(l.weights);
    if (cmd.alpha) l.enhancer.alpha = *cmd.alpha;
    if (cmd.temperature) l.enhancer.temperature = *cmd.temperature;
    if (cmd.beta) l.enhancer.beta = *cmd.beta;
    if (!cmd.scales.empty()) l.enhancer.scales = cmd.scales;
    l.enhancer.ln_eps = l.weights.config.ln_eps;
    l.has_enhancer = true;
  } else if (cmd.method == Method::mmel) {
    throw ConsistencyError("weight file has no enhancer tensors; --method mmel is unavailable");
  }
  return l;
}

inline double contrast_beta(const Command& cmd, const Loaded& l) {
  return cmd.beta ? *cmd.beta : (l.has_enhancer ? l.enhancer.beta : l.weights.scalars.beta);
}

inline void write_text(const std::filesystem::path& p, const std::string& s) { mmel::detail::write_bytes(p, s); }

inline void write_manifest(const Command& cmd, const std::string& weight_hash) {
  nlohmann::json m = {{"command", cmd.resolved()}, {"argv", cmd.argv}, {"weight_hash", weight_hash}};
  write_text(std::filesystem::path(cmd.out_dir) / "manifest.json", m.dump(2) + "\n");
}

inline std::string stem_of(const std::string& path) { return std::filesystem::path(path).stem().string(); }

inline AttributionRequest request_for(const Command& cmd) {
  AttributionRequest r;
  r.method = cmd.method;
  r.objective.lambda = cmd.method == Method::random ? 0.0 : cmd.effective_lambda();
  r.random_seed = cmd.seed;
  return r;
}

inline std::string map_csv(const Tensor& m) {
  std::string out;
  for (std::size_t r = 0; r < m.rows(); ++r) {
    for (std::size_t c = 0; c < m.cols(); ++c) out += (c ? "," : "") + format_double(m(r, c));
    out += "\n";
  }
  return out;
}

inline int run_gen_weights(const Command& cmd) {
  Weights w = generate_weights(cmd.model, cmd.seed);
  if (cmd.alpha) w.scalars.alpha = *cmd.alpha;
  if (cmd.temperature) w.scalars.temperature = *cmd.temperature;
  if (cmd.beta) w.scalars.beta = *cmd.beta;
  if (!cmd.scales.empty()) w.scalars.scales = cmd.scales;
  w.scalars.validate();
  const std::string bytes = serialize_weights(w);
  write_text(cmd.weights, bytes);
  write_manifest(cmd, git_blob_hash(bytes));
  return kExitOk;
}

inline Tensor load_image(const Command& cmd, const Loaded& l, const std::string& path) {
  return preprocess(read_ppm(path, l.weights.config.image_size), cmd.preprocess, l.weights.config.image_size);
}

inline int run_attribute(const Command& cmd) {
  const Loaded l = load(cmd);
  const Tensor img = load_image(cmd, l, cmd.images.front());
  const TokenSequence tokens = tokenize(cmd.texts.front(), l.weights.config);
  const double beta = contrast_beta(cmd, l);
  const auto req = request_for(cmd);
  const std::filesystem::path out(cmd.out_dir);

  std::map<std::string, AttributionMap> maps;  // output name -> map
  nlohmann::json scores;
  PipelineResult pr;
  if (cmd.method == Method::mmel) {
    pr = mmel_pipeline(l.weights, l.enhancer, img, tokens, req.objective);
    maps["heatmap_base"] = pr.base;
    maps["heatmap"] = pr.enhanced;
    double mn = 1e300, mx = -1e300, sum = 0.0;
    std::size_t cnt = 0;
    for (std::size_t i = 0; i < pr.base.values.size(); ++i)
      if (pr.base.values[i] > 0.0) {
        const double r = pr.enhanced.values[i] / pr.base.values[i];
        mn = std::min(mn, r), mx = std::max(mx, r), sum += r, ++cnt;
      }
    scores["multiplier"] = cnt ? nlohmann::json{{"min", mn}, {"max", mx}, {"mean", sum / static_cast<double>(cnt)},
                                                {"count", cnt}}
                               : nlohmann::json(nullptr);
    scores["field"] = pr.field;
    scores["alpha"] = l.enhancer.alpha;
    scores["temperature"] = l.enhancer.temperature;
    scores["scales"] = l.enhancer.scales;
  } else {
    const auto a = attribute(l.weights, l.has_enhancer ? &l.enhancer : nullptr, img, tokens, req);
    pr.c = a.c;
    pr.objective = req.objective.lambda == 0.0 ? a.c
                                               : combined_similarity(l.weights, a.acts_v, a.acts_t.embedding,
                                                                     req.objective.lambda);
    maps["heatmap"] = a.image;
  }
  scores["method"] = std::string(method_name(cmd.method));
  scores["c"] = pr.c;
  scores["objective"] = pr.objective;
  scores["lambda"] = req.objective.lambda;
  scores["beta"] = beta;
  scores["tokens"] = tokens.ids;
  for (const auto& [name, m] : maps) {
    scores["maps"][name] = m.values.values();
    const Tensor vis({m.values.rows(), m.values.cols()}, minmax_gamma(m.flat(), beta));
    if (cmd.format == "pgm") write_heatmap(vis, l.weights.config.image_size, out / (name + ".pgm"));
    else if (cmd.format == "csv") write_text(out / (name + ".csv"), map_csv(m.values));
  }
  write_text(out / "scores.json", scores.dump(2) + "\n");
  write_manifest(cmd, l.hash);
  return kExitOk;
}

inline constexpr std::uint64_t kPlantedStream = 0x504C41;

// Planted closed-form scorer, one model per sample; the gradient-method map is
// the positive part of the planted weights. Text metrics do not apply.
inline EvalRow planted_row(const Command& cmd, const ModelConfig& cfg, const Tensor& img,
                           const AttributionRequest& r, std::size_t index) {
  const auto pm = PlantedModel::make(derive_seed(cmd.seed, kPlantedStream + index), cfg.grid(), cfg.image_size);
  const auto score = pm.scorer();
  const AttributionMap map =
      r.method == Method::random ? random_attribution(r.random_seed, cfg.grid()) : pm.gradient_map();
  EvalRow row;
  row.id = stem_of(cmd.images[index]);
  const auto drop = sample_drop(score, img, map, cmd.retain);
  row.c = drop.c;
  row.drop_pct = drop.drop_pct;
  row.increase = drop.increase;
  row.del_auc = deletion_curve(score, img, map, cmd.steps).auc;
  row.ins_auc = insertion_curve(score, img, map, cmd.steps).auc;
  return row;
}

inline int run_evaluate(const Command& cmd) {
  const Loaded l = load(cmd);
  const auto req = request_for(cmd);
  EvalReport report;
  report.method = std::string(method_name(cmd.method));
  report.config = cmd.resolved();
  report.config.erase("argv");
  report.weight_hash = l.hash;
  std::map<std::string, int> seen;
  for (std::size_t i = 0; i < cmd.images.size(); ++i) {
    const Tensor img = load_image(cmd, l, cmd.images[i]);
    const std::string& text = cmd.texts.size() == 1 ? cmd.texts.front() : cmd.texts[i];
    const TokenSequence tokens = tokenize(text, l.weights.config);
    AttributionRequest r = req;
    r.random_seed = derive_seed(cmd.seed, i);
    if (cmd.planted) {
      EvalRow row = planted_row(cmd, l.weights.config, img, r, i);
      if (seen[row.id]++) row.id += "#" + std::to_string(seen[row.id] - 1);
      report.rows.push_back(std::move(row));
      continue;
    }
    const auto a = attribute(l.weights, l.has_enhancer ? &l.enhancer : nullptr, img, tokens, r);
    const auto score_img = model_image_scorer(l.weights, a.acts_t.embedding);
    EvalRow row;
    row.id = stem_of(cmd.images[i]);
    if (seen[row.id]++) row.id += "#" + std::to_string(seen[row.id] - 1);
    const auto drop = sample_drop(score_img, img, a.image, cmd.retain);
    row.c = drop.c;
    row.drop_pct = drop.drop_pct;
    row.increase = drop.increase;
    row.del_auc = deletion_curve(score_img, img, a.image, cmd.steps).auc;
    row.ins_auc = insertion_curve(score_img, img, a.image, cmd.steps).auc;
    const std::size_t content = tokens.eos_index - 1;
    if (content > 0) {
      const auto score_txt = model_text_scorer(l.weights, a.acts_v.embedding);
      row.text_del_auc = text_perturbation_curve(score_txt, tokens, a.text, TextMode::deletion, content).auc;
      row.text_ins_auc = text_perturbation_curve(score_txt, tokens, a.text, TextMode::insertion, content).auc;
    }
    report.rows.push_back(std::move(row));
  }
  std::sort(report.rows.begin(), report.rows.end(),
            [](const EvalRow& a, const EvalRow& b) { return a.id < b.id; });
  const std::filesystem::path out(cmd.out_dir);
  write_text(out / "report.csv", report.to_csv());
  write_text(out / "report.json", report.to_json().dump(2) + "\n");
  write_manifest(cmd, l.hash);
  return kExitOk;
}

inline int run_occlude(const Command& cmd) {
  const Loaded l = load(cmd);
  const Tensor img = load_image(cmd, l, cmd.images.front());
  const TokenSequence tokens = tokenize(cmd.texts.front(), l.weights.config);
  const auto a = attribute(l.weights, l.has_enhancer ? &l.enhancer : nullptr, img, tokens, request_for(cmd));
  const auto steps = occlusion_series(model_image_scorer(l.weights, a.acts_t.embedding), img, a.image, cmd.levels);
  const std::filesystem::path out(cmd.out_dir);
  std::string csv = "level,occluded_patches,similarity,file\n";
  for (std::size_t i = 0; i < steps.size(); ++i) {
    const std::string file = "occluded_" + std::to_string(i) + ".ppm";
    write_ppm(unpreprocess(steps[i].image, cmd.preprocess), out / file);
    const auto n = std::count(steps[i].occluded.begin(), steps[i].occluded.end(), true);
    csv += format_double(steps[i].level) + "," + std::to_string(n) + "," + format_double(steps[i].score) + "," +
           file + "\n";
  }
  write_text(out / "occlusion.csv", "# unoccluded similarity " + format_double(a.c) + "\n" + csv);
  write_manifest(cmd, l.hash);
  return kExitOk;
}

inline int run_sanity(const Command& cmd) {
  const Loaded l = load(cmd);
  const Tensor img = load_image(cmd, l, cmd.images.front());
  const TokenSequence tokens = tokenize(cmd.texts.front(), l.weights.config);
  std::vector<std::uint64_t> seeds;
  for (std::size_t s = 0; s < cmd.seeds; ++s) seeds.push_back(derive_seed(cmd.seed, 1000 + s));
  const auto res = sanity_randomization(l.weights, l.has_enhancer ? &l.enhancer : nullptr, img, tokens,
                                        request_for(cmd), seeds, full_depth_schedule(l.weights.config));
  std::string csv = "depth,median_abs_rho,defined,undefined\n";
  nlohmann::json j = {{"method", std::string(method_name(cmd.method))}, {"trend", optional_json(res.trend)}};
  for (const auto& d : res.depths) {
    csv += std::to_string(d.depth) + "," + format_optional(d.median_abs_rho) + "," +
           std::to_string(d.rho.size() - d.undefined) + "," + std::to_string(d.undefined) + "\n";
    nlohmann::json rho = nlohmann::json::array();
    for (const auto& r : d.rho) rho.push_back(optional_json(r));
    j["depths"].push_back({{"depth", d.depth}, {"median_abs_rho", optional_json(d.median_abs_rho)}, {"rho", rho}});
  }
  const std::filesystem::path out(cmd.out_dir);
  write_text(out / "sanity.csv", csv);
  write_text(out / "sanity.json", j.dump(2) + "\n");
  write_manifest(cmd, l.hash);
  return kExitOk;
}

inline int run_bench(const Command& cmd) {
  const Loaded l = load(cmd);
  if (!l.has_enhancer) throw ConsistencyError("bench needs enhancer tensors in the weight file");
  const Tensor img = load_image(cmd, l, cmd.images.front());
  const TokenSequence tokens = tokenize(cmd.texts.front(), l.weights.config);
  Objective obj;
  obj.lambda = cmd.lambda.value_or(0.0);
  const auto t = timing_overhead(l.weights, l.enhancer, img, tokens, cmd.reps, obj);
  nlohmann::json j = {{"baseline_ns", t.baseline_ns},
                      {"mmel_ns", t.mmel_ns},
                      {"overhead_ratio", t.overhead_ratio},
                      {"baseline_stddev_ns", t.baseline_stddev_ns},
                      {"mmel_stddev_ns", t.mmel_stddev_ns},
                      {"repetitions", t.repetitions}};
  write_text(std::filesystem::path(cmd.out_dir) / "bench.json", j.dump(2) + "\n");
  write_manifest(cmd, l.hash);
  return kExitOk;
}

}  // namespace detail

inline int run(const Command& cmd) {
  std::filesystem::create_directories(cmd.out_dir);
  if (cmd.verb == "gen-weights") return detail::run_gen_weights(cmd);
  if (cmd.verb == "attribute") return detail::run_attribute(cmd);
  if (cmd.verb == "evaluate") return detail::run_evaluate(cmd);
  if (cmd.verb == "occlude") return detail::run_occlude(cmd);
  if (cmd.verb == "sanity") return detail::run_sanity(cmd);
  if (cmd.verb == "bench") return detail::run_bench(cmd);
  throw UsageError("unknown verb " + cmd.verb);
}

// Full entry point: parse, run, map failures onto exit codes 0/1/2.
inline int main(const std::vector<std::string>& args, std::ostream& err = std::cerr) {
  Command cmd;
  try {
    cmd = parse_args(args);
  } catch (const HelpRequested& h) {
    std::cout << h.what();
    return kExitOk;
  } catch (const UsageError& e) {
    err << "mmel: usage error: " << e.what() << "\n";
    return kExitUsage;
  }
  try {
    return run(cmd);
  } catch (const UsageError& e) {
    err << "mmel: usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "mmel: error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

}  // namespace mmel::cli
