#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "mmel/errors.hpp"
#include "mmel/tensor.hpp"

namespace mmel {

namespace detail {

// Reads one whitespace-delimited header token, skipping '#' comments.
inline std::optional<std::string> pnm_token(const std::string& bytes, std::size_t& pos) {
  while (pos < bytes.size()) {
    const char ch = bytes[pos];
    if (ch == '#') {
      while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
    } else if (ch == ' ' || ch == '\t' || ch == '\n' || ch == '\r' || ch == '\v' || ch == '\f') {
      ++pos;
    } else {
      break;
    }
  }
  std::string tok;
  while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) tok.push_back(bytes[pos++]);
  if (tok.empty()) return std::nullopt;
  return tok;
}

struct PnmHeader {
  std::size_t width = 0, height = 0, maxval = 0, data_offset = 0;
};

inline PnmHeader parse_pnm_header(const std::string& bytes, const char* magic) {
  if (bytes.size() < 2 || bytes.compare(0, 2, magic) != 0)
    throw ImageMagicError(std::string("expected binary ") + magic + " image");
  std::size_t pos = 2;
  std::size_t vals[3];
  for (auto& v : vals) {
    const auto tok = pnm_token(bytes, pos);
    if (!tok) throw ImageTruncatedError("image header truncated");
    try {
      std::size_t used = 0;
      v = std::stoul(*tok, &used);
      if (used != tok->size()) throw std::invalid_argument("trailing characters");
    } catch (const std::exception&) {
      throw ImageMagicError("malformed image header field: " + *tok);
    }
  }
  // Exactly one whitespace byte separates the header from the raster.
  if (pos >= bytes.size()) throw ImageTruncatedError("image raster missing");
  PnmHeader h{vals[0], vals[1], vals[2], pos + 1};
  if (h.maxval != 255) throw ImageMaxvalError("only maxval 255 is supported, got " + std::to_string(h.maxval));
  if (h.width == 0 || h.height == 0) throw ImageSizeError("image has zero extent");
  return h;
}

inline std::string slurp(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
}

inline void write_bytes(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot open " + path.string() + " for writing");
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw Error("failed writing " + path.string());
}

inline unsigned char quantize(double v) {
  return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

}  // namespace detail

// Binary P6 with maxval 255 -> H×W×3 in [0, 1]. expected_size = 0 skips the size check.
inline Tensor decode_ppm(const std::string& bytes, std::size_t expected_size = 0) {
  const auto h = detail::parse_pnm_header(bytes, "P6");
  if (expected_size && (h.width != expected_size || h.height != expected_size))
    throw ImageSizeError("image is " + std::to_string(h.width) + "x" + std::to_string(h.height) +
                         ", expected " + std::to_string(expected_size) + "x" + std::to_string(expected_size));
  const std::size_t n = h.width * h.height * 3;
  if (bytes.size() < h.data_offset + n) throw ImageTruncatedError("image raster truncated");
  std::vector<double> data(n);
  for (std::size_t i = 0; i < n; ++i)
    data[i] = static_cast<double>(static_cast<unsigned char>(bytes[h.data_offset + i])) / 255.0;
  return Tensor({h.height, h.width, 3}, std::move(data));
}

inline Tensor read_ppm(const std::filesystem::path& path, std::size_t expected_size = 0) {
  return decode_ppm(detail::slurp(path), expected_size);
}

inline std::string encode_ppm(const Tensor& image) {
  image.require_rank(3);
  if (image.extent(2) != 3) throw DimensionError("PPM images need 3 channels");
  std::string out = "P6\n" + std::to_string(image.extent(1)) + " " + std::to_string(image.extent(0)) + "\n255\n";
  for (double v : image.data()) out.push_back(static_cast<char>(detail::quantize(v)));
  return out;
}

inline void write_ppm(const Tensor& image, const std::filesystem::path& path) {
  detail::write_bytes(path, encode_ppm(image));
}

// Binary P5 -> H×W in [0, 1].
inline Tensor decode_pgm(const std::string& bytes) {
  const auto h = detail::parse_pnm_header(bytes, "P5");
  const std::size_t n = h.width * h.height;
  if (bytes.size() < h.data_offset + n) throw ImageTruncatedError("image raster truncated");
  std::vector<double> data(n);
  for (std::size_t i = 0; i < n; ++i)
    data[i] = static_cast<double>(static_cast<unsigned char>(bytes[h.data_offset + i])) / 255.0;
  return Tensor({h.height, h.width}, std::move(data));
}

inline std::string encode_pgm(const Tensor& gray) {
  gray.require_rank(2);
  std::string out = "P5\n" + std::to_string(gray.cols()) + " " + std::to_string(gray.rows()) + "\n255\n";
  for (double v : gray.data()) out.push_back(static_cast<char>(detail::quantize(v)));
  return out;
}

// Bilinear resize with half-pixel centres (align_corners = false), edge-clamped.
inline Tensor upsample_bilinear(const Tensor& map, std::size_t out_h, std::size_t out_w) {
  map.require_rank(2);
  const std::size_t in_h = map.rows(), in_w = map.cols();
  Tensor out({out_h, out_w});
  auto src_coord = [](std::size_t dst, std::size_t in, std::size_t outn) {
    const double s = (static_cast<double>(dst) + 0.5) * static_cast<double>(in) / static_cast<double>(outn) - 0.5;
    return std::clamp(s, 0.0, static_cast<double>(in - 1));
  };
  for (std::size_t y = 0; y < out_h; ++y) {
    const double sy = src_coord(y, in_h, out_h);
    const auto y0 = static_cast<std::size_t>(std::floor(sy));
    const std::size_t y1 = std::min(y0 + 1, in_h - 1);
    const double fy = sy - static_cast<double>(y0);
    for (std::size_t x = 0; x < out_w; ++x) {
      const double sx = src_coord(x, in_w, out_w);
      const auto x0 = static_cast<std::size_t>(std::floor(sx));
      const std::size_t x1 = std::min(x0 + 1, in_w - 1);
      const double fx = sx - static_cast<double>(x0);
      const double top = map(y0, x0) + fx * (map(y0, x1) - map(y0, x0));
      const double bot = map(y1, x0) + fx * (map(y1, x1) - map(y1, x0));
      // Clamp to the corner range so rounding cannot leave the convex hull.
      const auto [lo, hi] = std::minmax({map(y0, x0), map(y0, x1), map(y1, x0), map(y1, x1)});
      out(y, x) = std::clamp(top + fy * (bot - top), lo, hi);
    }
  }
  return out;
}

// map values are expected in [0, 1]; upsampled to image_size² and quantised.
inline std::string encode_heatmap(const Tensor& map, std::size_t image_size) {
  return encode_pgm(upsample_bilinear(map, image_size, image_size));
}

inline void write_heatmap(const Tensor& map, std::size_t image_size, const std::filesystem::path& path) {
  detail::write_bytes(path, encode_heatmap(map, image_size));
}

}  // namespace mmel
