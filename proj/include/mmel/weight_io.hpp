#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmel/errors.hpp"
#include "mmel/model.hpp"

namespace mmel {

// MMELW1 layout:
//   6 bytes   magic "MMELW1"
//   8 bytes   header length H, little-endian u64
//   H bytes   UTF-8 JSON header {config, enhancer, blob_bytes, tensors:[{name, shape, offset}]}
//   blob      little-endian IEEE-754 doubles, tensors back to back in layout order;
//             offsets are byte offsets from the start of the blob
inline constexpr char kWeightMagic[] = "MMELW1";
inline constexpr std::size_t kWeightMagicLen = 6;

namespace detail {

inline void put_u64_le(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline std::uint64_t get_u64_le(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

}  // namespace detail

inline nlohmann::json config_to_json(const ModelConfig& c) {
  return {{"image_size", c.image_size}, {"patch_size", c.patch_size},
          {"d_model", c.d_model},       {"n_heads", c.n_heads},
          {"n_layers_v", c.n_layers_v}, {"n_layers_t", c.n_layers_t},
          {"mlp_ratio", c.mlp_ratio},   {"d_shared", c.d_shared},
          {"vocab_size", c.vocab_size}, {"max_text_len", c.max_text_len},
          {"ln_eps", c.ln_eps}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.image_size = j.at("image_size").get<std::size_t>();
  c.patch_size = j.at("patch_size").get<std::size_t>();
  c.d_model = j.at("d_model").get<std::size_t>();
  c.n_heads = j.at("n_heads").get<std::size_t>();
  c.n_layers_v = j.at("n_layers_v").get<std::size_t>();
  c.n_layers_t = j.at("n_layers_t").get<std::size_t>();
  c.mlp_ratio = j.at("mlp_ratio").get<std::size_t>();
  c.d_shared = j.at("d_shared").get<std::size_t>();
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.max_text_len = j.at("max_text_len").get<std::size_t>();
  c.ln_eps = j.at("ln_eps").get<double>();
  return c;
}

inline nlohmann::json scalars_to_json(const EnhancerScalars& s) {
  return {{"alpha", s.alpha}, {"temperature", s.temperature}, {"beta", s.beta}, {"scales", s.scales}};
}

inline EnhancerScalars scalars_from_json(const nlohmann::json& j) {
  EnhancerScalars s;
  s.alpha = j.at("alpha").get<double>();
  s.temperature = j.at("temperature").get<double>();
  s.beta = j.at("beta").get<double>();
  s.scales = j.at("scales").get<std::vector<double>>();
  return s;
}

inline std::string serialize_weights(const Weights& w) {
  w.validate();
  const auto specs = w.layout();
  nlohmann::json dir = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& s : specs) {
    dir.push_back({{"name", s.name}, {"shape", s.shape}, {"offset", offset}});
    offset += 8 * shape_numel(s.shape);
  }
  nlohmann::json header = {{"config", config_to_json(w.config)},
                           {"blob_bytes", offset},
                           {"tensors", dir}};
  if (w.has_enhancer()) header["enhancer"] = scalars_to_json(w.scalars);
  const std::string header_text = header.dump();

  std::string out(kWeightMagic, kWeightMagicLen);
  detail::put_u64_le(out, header_text.size());
  out += header_text;
  out.reserve(out.size() + offset);
  for (const auto& s : specs)
    for (double v : w.at(s.name).data()) detail::put_u64_le(out, std::bit_cast<std::uint64_t>(v));
  return out;
}

inline Weights deserialize_weights(const std::string& bytes) {
  if (bytes.size() < kWeightMagicLen || bytes.compare(0, kWeightMagicLen, kWeightMagic) != 0)
    throw WeightMagicError("not an MMELW1 weight file (bad magic)");
  if (bytes.size() < kWeightMagicLen + 8) throw WeightTruncatedError("weight file truncated in header length");
  const auto* raw = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::uint64_t header_len = detail::get_u64_le(raw + kWeightMagicLen);
  const std::size_t header_start = kWeightMagicLen + 8;
  if (bytes.size() - header_start < header_len) throw WeightTruncatedError("weight file truncated in header");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(header_start, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw WeightDirectoryError(std::string("weight header is not valid JSON: ") + e.what());
  }

  Weights w;
  std::uint64_t blob_bytes = 0;
  try {
    w.config = config_from_json(header.at("config"));
    blob_bytes = header.at("blob_bytes").get<std::uint64_t>();
    if (header.contains("enhancer")) w.scalars = scalars_from_json(header.at("enhancer"));
  } catch (const nlohmann::json::exception& e) {
    throw WeightDirectoryError(std::string("malformed weight header: ") + e.what());
  }
  try {
    w.config.validate();
  } catch (const ParameterError& e) {
    throw WeightDirectoryError(std::string("invalid config in weight header: ") + e.what());
  }

  const std::size_t blob_start = header_start + header_len;
  const std::size_t available = bytes.size() - blob_start;
  if (available < blob_bytes) throw WeightTruncatedError("weight blob truncated");
  if (available > blob_bytes) throw WeightDirectoryError("trailing bytes after weight blob");

  auto specs = model_layout(w.config);
  const bool enhancer = header.contains("enhancer");
  if (enhancer) {
    auto enh = enhancer_layout(w.config);
    specs.insert(specs.end(), enh.begin(), enh.end());
  }
  const auto& dir = header.at("tensors");
  if (!dir.is_array() || dir.size() != specs.size())
    throw WeightDirectoryError("tensor directory does not match config layout");

  std::uint64_t expect_offset = 0;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const auto& entry = dir[i];
    std::string name;
    Shape shape;
    std::uint64_t offset = 0;
    try {
      name = entry.at("name").get<std::string>();
      shape = entry.at("shape").get<Shape>();
      offset = entry.at("offset").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
      throw WeightDirectoryError(std::string("malformed tensor entry: ") + e.what());
    }
    if (name != specs[i].name || shape != specs[i].shape)
      throw WeightDirectoryError("tensor " + name + " " + shape_str(shape) +
                                 " does not match expected " + specs[i].name + " " +
                                 shape_str(specs[i].shape));
    if (offset != expect_offset) throw WeightDirectoryError("tensor " + name + " has a bad offset");
    expect_offset += 8 * shape_numel(shape);
  }
  if (expect_offset != blob_bytes) throw WeightDirectoryError("tensor directory does not cover the blob");

  // Offsets were verified contiguous above.
  const unsigned char* p = raw + blob_start;
  for (const auto& s : specs) {
    std::vector<double> data(shape_numel(s.shape));
    for (std::size_t k = 0; k < data.size(); ++k, p += 8)
      data[k] = std::bit_cast<double>(detail::get_u64_le(p));
    try {
      w.tensors.emplace(s.name, Tensor(s.shape, std::move(data)));
    } catch (const ParameterError&) {
      throw WeightDirectoryError("tensor " + s.name + " holds non-finite values");
    }
  }
  return w;
}

inline void save_weights(const Weights& w, const std::filesystem::path& path) {
  const std::string bytes = serialize_weights(w);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot open " + path.string() + " for writing");
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw Error("failed writing " + path.string());
}

inline std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
}

inline Weights load_weights(const std::filesystem::path& path) {
  return deserialize_weights(read_file_bytes(path));
}

}  // namespace mmel
