#pragma once

// File formats: BTF1 binary tensors, rank-2 CSV, 8-bit PGM (P5), and the
// flat key=value attention-config format. All numeric text uses %.17g so
// doubles round-trip exactly.

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "blockattn/common.hpp"
#include "blockattn/tensor.hpp"

namespace blockattn {

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

namespace detail {

inline void put_u64_le(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t get_u64_le(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

inline void put_f64_le(std::string& out, double d) {
  std::uint64_t bits;
  std::memcpy(&bits, &d, 8);
  put_u64_le(out, bits);
}

inline double get_f64_le(const unsigned char* p) {
  const std::uint64_t bits = get_u64_le(p);
  double d;
  std::memcpy(&d, &bits, 8);
  return d;
}

}  // namespace detail

// BTF1: magic "BTF1" | rank u8 | rank x u64 dims | doubles, all little-endian.
inline std::string encode_btf1(const Tensor& t) {
  std::string out;
  out.reserve(5 + 8 * t.rank() + 8 * t.size());
  out += "BTF1";
  out.push_back(static_cast<char>(t.rank()));
  for (std::size_t i = 0; i < t.rank(); ++i) detail::put_u64_le(out, t.dim(i));
  for (const double v : t.vec()) detail::put_f64_le(out, v);
  return out;
}

inline Tensor decode_btf1(const std::string& bytes, const std::string& what = "tensor") {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 5 || std::memcmp(p, "BTF1", 4) != 0)
    throw IoError("bad BTF1 magic in " + what);
  const std::size_t rank = p[4];
  if (rank < 1 || rank > 4) throw IoError("bad BTF1 rank in " + what);
  if (bytes.size() < 5 + 8 * rank) throw IoError("truncated BTF1 header in " + what);
  std::vector<std::size_t> dims(rank);
  std::size_t n = 1;
  for (std::size_t i = 0; i < rank; ++i) {
    dims[i] = static_cast<std::size_t>(detail::get_u64_le(p + 5 + 8 * i));
    if (dims[i] == 0) throw IoError("zero BTF1 dim in " + what);
    n *= dims[i];
  }
  if (bytes.size() != 5 + 8 * rank + 8 * n) throw IoError("BTF1 size mismatch in " + what);
  Tensor t(dims);
  const unsigned char* body = p + 5 + 8 * rank;
  for (std::size_t i = 0; i < n; ++i) t(i) = detail::get_f64_le(body + 8 * i);
  return t;
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for writing: " + path);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed: " + path);
}

inline std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open: " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline void write_btf1(const std::string& path, const Tensor& t) {
  write_file(path, encode_btf1(t));
}

inline Tensor read_btf1(const std::string& path) { return decode_btf1(read_file(path), path); }

// rank-2 CSV
inline std::string encode_csv(const Tensor& t) {
  check_shape(t.rank() == 2, "CSV export is rank-2 only");
  std::string out;
  for (std::size_t i = 0; i < t.dim(0); ++i) {
    for (std::size_t j = 0; j < t.dim(1); ++j) {
      if (j) out += ',';
      out += format_double(t(i, j));
    }
    out += '\n';
  }
  return out;
}

inline Tensor decode_csv(const std::string& text) {
  std::vector<std::vector<double>> rows;
  std::istringstream ss(text);
  std::string line;
  while (std::getline(ss, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) row.push_back(std::strtod(cell.c_str(), nullptr));
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw IoError("empty CSV");
  Tensor t({rows.size(), rows.front().size()});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != rows.front().size()) throw IoError("ragged CSV");
    for (std::size_t j = 0; j < rows[i].size(); ++j) t(i, j) = rows[i][j];
  }
  return t;
}

inline void write_csv(const std::string& path, const Tensor& t) {
  write_file(path, encode_csv(t));
}

inline Tensor read_csv(const std::string& path) { return decode_csv(read_file(path)); }

// PGM P5, 8-bit, min-max normalized. A constant image maps to all zeros.
inline std::string encode_pgm_normalized(const Tensor& t) {
  check_shape(t.rank() == 2, "PGM export is rank-2 only");
  double lo = t(0), hi = t(0);
  for (const double v : t.vec()) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  const double scale = hi > lo ? 255.0 / (hi - lo) : 0.0;
  std::string out = "P5\n" + std::to_string(t.dim(1)) + " " + std::to_string(t.dim(0)) + "\n255\n";
  for (const double v : t.vec()) {
    const int g = static_cast<int>(std::lround((v - lo) * scale));
    out.push_back(static_cast<char>(g < 0 ? 0 : (g > 255 ? 255 : g)));
  }
  return out;
}

// PGM P5 with raw byte values (used for label rasters: gray level = class id)
inline std::string encode_pgm_raw(const std::vector<std::uint8_t>& pixels, std::size_t height,
                                  std::size_t width) {
  if (pixels.size() != height * width) throw IoError("PGM pixel count mismatch");
  std::string out = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  for (const std::uint8_t v : pixels) out.push_back(static_cast<char>(v));
  return out;
}

struct PgmImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> pixels;
};

inline PgmImage decode_pgm(const std::string& bytes) {
  std::istringstream ss(bytes);
  std::string magic;
  ss >> magic;
  if (magic != "P5") throw IoError("not a P5 PGM");
  std::size_t w = 0, h = 0;
  int maxval = 0;
  ss >> w >> h >> maxval;
  if (!ss || maxval <= 0 || maxval > 255) throw IoError("bad PGM header");
  ss.get();  // single whitespace after maxval
  PgmImage img;
  img.height = h;
  img.width = w;
  img.pixels.resize(h * w);
  ss.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(h * w));
  if (ss.gcount() != static_cast<std::streamsize>(h * w)) throw IoError("truncated PGM body");
  return img;
}

inline void write_pgm(const std::string& path, const Tensor& t) {
  write_file(path, encode_pgm_normalized(t));
}

inline PgmImage read_pgm(const std::string& path) { return decode_pgm(read_file(path)); }

}  // namespace blockattn
