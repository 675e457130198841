#pragma once

// Similarity matrices as CSV and as binary PPM (P6) heatmaps.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include "offseg/binary_io.hpp"
#include "offseg/error.hpp"
#include "offseg/linalg.hpp"

namespace offseg {

using Rgb = std::array<std::uint8_t, 3>;

/// Blue–white–red ramp: -1 → (0,0,255), 0 → white, 1 → (255,0,0). Values
/// outside [-1, 1] are clamped.
inline Rgb diverging_color(double s) {
  s = std::clamp(s, -1.0, 1.0);
  auto q = [](double x) { return static_cast<std::uint8_t>(std::lround(255.0 * x)); };
  if (s < 0) return {q(1.0 + s), q(1.0 + s), 255};
  return {255, q(1.0 - s), q(1.0 - s)};
}

/// Renders an n×n matrix as a P6 image with cell×cell pixel blocks.
inline Bytes render_heatmap_ppm(const Matrix<double>& s, std::size_t cell = 8) {
  const std::size_t w = s.cols() * cell, h = s.rows() * cell;
  const std::string header = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  Bytes out(header.begin(), header.end());
  out.reserve(header.size() + w * h * 3);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const Rgb c = diverging_color(s(y / cell, x / cell));
      out.insert(out.end(), c.begin(), c.end());
    }
  return out;
}

struct LabeledMatrix {
  std::vector<std::string> ids;
  Matrix<double> values;
};

/// CSV layout: header "image_id,<id_0>,...,<id_n-1>", then one row per id
/// starting with that id. Values use round-trip precision.
inline std::string similarity_csv(const std::vector<std::string>& ids, const Matrix<double>& s) {
  if (s.rows() != ids.size() || s.cols() != ids.size())
    throw ShapeError("similarity_csv: " + std::to_string(ids.size()) + " ids for matrix " + s.shape());
  std::ostringstream os;
  os.precision(17);
  os << "image_id";
  for (const auto& id : ids) os << ',' << id;
  os << '\n';
  for (std::size_t i = 0; i < ids.size(); ++i) {
    os << ids[i];
    for (std::size_t j = 0; j < ids.size(); ++j) os << ',' << s(i, j);
    os << '\n';
  }
  return os.str();
}

/// Parses similarity_csv output; errors carry the 1-based line number.
inline LabeledMatrix parse_similarity_csv(const std::string& text) {
  auto split = [](const std::string& line) {
    std::vector<std::string> f;
    std::string cur;
    std::istringstream ls(line);
    while (std::getline(ls, cur, ',')) f.push_back(cur);
    if (!line.empty() && line.back() == ',') f.emplace_back();
    return f;
  };
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  LabeledMatrix out;
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto f = split(line);
    if (lineno == 1) {
      if (f.size() < 2 || f[0] != "image_id")
        throw ParseError("similarity CSV line 1: header must start with image_id and list ids", 1);
      out.ids.assign(f.begin() + 1, f.end());
      continue;
    }
    const std::size_t r = rows.size();
    if (r >= out.ids.size())
      throw ParseError("similarity CSV line " + std::to_string(lineno) + ": more rows than header ids", lineno);
    if (f.size() != out.ids.size() + 1)
      throw ParseError("similarity CSV line " + std::to_string(lineno) + ": expected " +
                           std::to_string(out.ids.size() + 1) + " fields, got " + std::to_string(f.size()),
                       lineno);
    if (f[0] != out.ids[r])
      throw ParseError("similarity CSV line " + std::to_string(lineno) + ": row id '" + f[0] +
                           "' does not match header id '" + out.ids[r] + "'",
                       lineno);
    std::vector<double> vals;
    for (std::size_t c = 1; c < f.size(); ++c) {
      try {
        std::size_t used = 0;
        double v = std::stod(f[c], &used);
        if (used != f[c].size() || !std::isfinite(v)) throw std::invalid_argument("trailing");
        vals.push_back(v);
      } catch (const std::exception&) {
        throw ParseError("similarity CSV line " + std::to_string(lineno) + ": field " +
                             std::to_string(c + 1) + " is not a finite number",
                         lineno);
      }
    }
    rows.push_back(std::move(vals));
  }
  if (out.ids.empty()) throw ParseError("similarity CSV: missing header", lineno ? lineno : 1);
  if (rows.size() != out.ids.size())
    throw ParseError("similarity CSV: " + std::to_string(rows.size()) + " rows for " +
                         std::to_string(out.ids.size()) + " header ids",
                     lineno);
  out.values = Matrix<double>(rows.size(), rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy(rows[i].begin(), rows[i].end(), out.values.row(i).begin());
  return out;
}

}  // namespace offseg
