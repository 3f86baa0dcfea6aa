#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "dart/tensor.hpp"

// Binary PGM (P5) / PPM (P6) readers and writers, maxval 255, plus small CSV
// helpers. Images use CHW layout: PGM [H,W], PPM [3,H,W].

namespace dart {
namespace image {

namespace detail {

inline void skip_ws_and_comments(std::istream& in) {
  for (;;) {
    int c = in.peek();
    if (c == '#') {
      std::string line;
      std::getline(in, line);
    } else if (std::isspace(c)) {
      in.get();
    } else {
      return;
    }
  }
}

inline int read_pnm_int(std::istream& in, const std::string& path) {
  skip_ws_and_comments(in);
  int v;
  if (!(in >> v)) throw IoError("malformed PNM header in " + path);
  return v;
}

}  // namespace detail

inline void write_pgm(const std::string& path, const Tensor<std::uint8_t>& img) {
  if (img.rank() != 2) throw ShapeError("write_pgm: expected [H,W], got " + shape_str(img.shape));
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << "P5\n" << img.shape[1] << " " << img.shape[0] << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.data.data()), static_cast<std::streamsize>(img.size()));
  if (!out) throw IoError("short write to " + path);
}

inline void write_ppm(const std::string& path, const Tensor<std::uint8_t>& img) {
  if (img.rank() != 3 || img.shape[0] != 3)
    throw ShapeError("write_ppm: expected [3,H,W], got " + shape_str(img.shape));
  const int h = img.shape[1], w = img.shape[2];
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << "P6\n" << w << " " << h << "\n255\n";
  std::vector<std::uint8_t> inter(static_cast<std::size_t>(h) * w * 3);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        inter[(static_cast<std::size_t>(y) * w + x) * 3 + c] = img.data[(static_cast<std::size_t>(c) * h + y) * w + x];
  out.write(reinterpret_cast<const char*>(inter.data()), static_cast<std::streamsize>(inter.size()));
  if (!out) throw IoError("short write to " + path);
}

inline Tensor<std::uint8_t> read_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::string magic;
  in >> magic;
  if (magic != "P5") throw IoError(path + ": expected P5, got '" + magic + "'");
  const int w = detail::read_pnm_int(in, path);
  const int h = detail::read_pnm_int(in, path);
  const int maxval = detail::read_pnm_int(in, path);
  if (maxval != 255) throw IoError(path + ": only maxval 255 supported");
  in.get();
  Tensor<std::uint8_t> img = Tensor<std::uint8_t>::zeros({h, w});
  in.read(reinterpret_cast<char*>(img.data.data()), static_cast<std::streamsize>(img.size()));
  if (in.gcount() != img.size()) throw IoError(path + ": truncated pixel data");
  return img;
}

inline Tensor<std::uint8_t> read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::string magic;
  in >> magic;
  if (magic != "P6") throw IoError(path + ": expected P6, got '" + magic + "'");
  const int w = detail::read_pnm_int(in, path);
  const int h = detail::read_pnm_int(in, path);
  const int maxval = detail::read_pnm_int(in, path);
  if (maxval != 255) throw IoError(path + ": only maxval 255 supported");
  in.get();
  std::vector<std::uint8_t> inter(static_cast<std::size_t>(h) * w * 3);
  in.read(reinterpret_cast<char*>(inter.data()), static_cast<std::streamsize>(inter.size()));
  if (in.gcount() != static_cast<std::streamsize>(inter.size())) throw IoError(path + ": truncated pixel data");
  Tensor<std::uint8_t> img = Tensor<std::uint8_t>::zeros({3, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        img.data[(static_cast<std::size_t>(c) * h + y) * w + x] = inter[(static_cast<std::size_t>(y) * w + x) * 3 + c];
  return img;
}

// byte frame (values 0..255) -> float observation in [0,1]
template <typename T>
Tensor<T> to_float(const Tensor<std::uint8_t>& img) {
  Tensor<T> out = Tensor<T>::zeros(img.shape);
  for (std::int64_t i = 0; i < img.size(); ++i) out[i] = static_cast<T>(img[i]) / T{255};
  return out;
}

template <typename T>
Tensor<std::uint8_t> to_bytes(const Tensor<T>& img) {
  Tensor<std::uint8_t> out = Tensor<std::uint8_t>::zeros(img.shape);
  for (std::int64_t i = 0; i < img.size(); ++i) {
    T v = img[i];
    v = v < T{0} ? T{0} : (v > T{1} ? T{1} : v);
    out[i] = static_cast<std::uint8_t>(std::lround(static_cast<double>(v) * 255.0));
  }
  return out;
}

inline void write_csv(const std::string& path, const std::vector<std::string>& header,
                      const std::vector<std::vector<std::string>>& rows) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path + " for writing");
  for (std::size_t i = 0; i < header.size(); ++i) out << (i ? "," : "") << header[i];
  out << "\n";
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < row.size(); ++i) out << (i ? "," : "") << row[i];
    out << "\n";
  }
  if (!out) throw IoError("short write to " + path);
}

inline std::vector<std::vector<std::string>> read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.push_back("");
    rows.push_back(std::move(cells));
  }
  return rows;
}

}  // namespace image
}  // namespace dart
