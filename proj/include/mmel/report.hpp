#pragma once

#include <charconv>
#include <cmath>
#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include "mmel/errors.hpp"

namespace mmel {

// SHA-1 over "blob <len>\0<content>", i.e. what `git hash-object` prints.
inline std::string git_blob_hash(const std::string& content) {
  const std::string header = "blob " + std::to_string(content.size()) + std::string(1, '\0');
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx, header.data(), header.size()) != 1 ||
      EVP_DigestUpdate(ctx, content.data(), content.size()) != 1 || EVP_DigestFinal_ex(ctx, md, &len) != 1) {
    EVP_MD_CTX_free(ctx);
    throw Error("SHA-1 digest failed");
  }
  EVP_MD_CTX_free(ctx);
  std::string hex;
  char buf[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof buf, "%02x", md[i]);
    hex += buf;
  }
  return hex;
}

// Shortest round-trip decimal form.
inline std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  if (ec != std::errc()) throw Error("number formatting failed");
  return std::string(buf, ptr);
}

inline std::string format_optional(const std::optional<double>& v) { return v ? format_double(*v) : ""; }

inline nlohmann::json optional_json(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

struct EvalRow {
  std::string id;
  double c = 0.0;
  std::optional<double> drop_pct;  // empty: sample excluded (c <= 0)
  bool increase = false;
  double del_auc = 0.0;
  double ins_auc = 0.0;
  std::optional<double> text_del_auc;  // empty when the text has no content tokens
  std::optional<double> text_ins_auc;
};

struct EvalAggregates {
  double mean_drop_pct = 0.0;
  double increase_pct = 0.0;
  double mean_del_auc = 0.0;
  double mean_ins_auc = 0.0;
  std::size_t excluded = 0;
};

struct EvalReport {
  std::string method;
  std::vector<EvalRow> rows;  // sorted by id
  nlohmann::json config;
  std::string weight_hash;

  EvalAggregates aggregates() const {
    EvalAggregates a;
    if (rows.empty()) throw EvaluationError("report has no samples");
    std::size_t used = 0, inc = 0;
    for (const auto& r : rows) {
      a.mean_del_auc += r.del_auc;
      a.mean_ins_auc += r.ins_auc;
      if (!r.drop_pct) {
        ++a.excluded;
        continue;
      }
      ++used;
      a.mean_drop_pct += *r.drop_pct;
      inc += r.increase ? 1 : 0;
    }
    const double n = static_cast<double>(rows.size());
    a.mean_del_auc /= n;
    a.mean_ins_auc /= n;
    if (used == 0) throw EvaluationError("every sample has c <= 0; confidence drop is undefined");
    a.mean_drop_pct /= static_cast<double>(used);
    a.increase_pct = 100.0 * static_cast<double>(inc) / static_cast<double>(used);
    return a;
  }

  std::string to_csv() const {
    std::string out = "id,c,drop_pct,increase,del_auc,ins_auc,text_del_auc,text_ins_auc\n";
    for (const auto& r : rows) {
      out += r.id + "," + format_double(r.c) + "," + format_optional(r.drop_pct) + "," +
             (r.drop_pct ? (r.increase ? "1" : "0") : "") + "," + format_double(r.del_auc) + "," +
             format_double(r.ins_auc) + "," + format_optional(r.text_del_auc) + "," +
             format_optional(r.text_ins_auc) + "\n";
    }
    return out;
  }

  nlohmann::json to_json() const {
    const auto a = aggregates();
    nlohmann::json rows_json = nlohmann::json::array();
    for (const auto& r : rows)
      rows_json.push_back({{"id", r.id},
                           {"c", r.c},
                           {"drop_pct", optional_json(r.drop_pct)},
                           {"increase", r.increase},
                           {"del_auc", r.del_auc},
                           {"ins_auc", r.ins_auc},
                           {"text_del_auc", optional_json(r.text_del_auc)},
                           {"text_ins_auc", optional_json(r.text_ins_auc)}});
    return {{"method", method},
            {"config", config},
            {"weight_hash", weight_hash},
            {"aggregates",
             {{"mean_drop_pct", a.mean_drop_pct},
              {"increase_pct", a.increase_pct},
              {"mean_del_auc", a.mean_del_auc},
              {"mean_ins_auc", a.mean_ins_auc},
              {"excluded", a.excluded}}},
            {"rows", rows_json},
            {"note", "text AUCs are single-pair similarity curves, not retrieval-gallery AUCs"}};
  }
};

}  // namespace mmel
