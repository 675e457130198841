#pragma once

// Ideal per-image class prototypes W* = M·(Eᵀ)⁺, reconstruction checks, and
// the cross-image prototype similarity study.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "offseg/data.hpp"
#include "offseg/linalg.hpp"
#include "offseg/metrics.hpp"
#include "offseg/rng.hpp"

namespace offseg {

struct OneHotMask {
  Matrix<double> m;           // K × HW, entries in {0, 1}
  std::vector<bool> ignored;  // per pixel
};

inline OneHotMask one_hot(std::span<const int> labels, std::size_t classes, int ignore_value = kIgnore) {
  OneHotMask out{Matrix<double>(classes, labels.size()), std::vector<bool>(labels.size(), false)};
  for (std::size_t j = 0; j < labels.size(); ++j) {
    const int l = labels[j];
    if (l == ignore_value) {
      out.ignored[j] = true;
      continue;
    }
    if (l < 0 || static_cast<std::size_t>(l) >= classes)
      throw ConfigError("one_hot: label " + std::to_string(l) + " at index " + std::to_string(j) +
                        " outside [0, " + std::to_string(classes) + ")");
    out.m(static_cast<std::size_t>(l), j) = 1.0;
  }
  return out;
}

/// W* = M·pinv(Eᵀ) over the non-ignored pixels only.
inline Matrix<double> ideal_prototypes(const OneHotMask& mask, const Matrix<double>& e,
                                       std::optional<double> rtol = std::nullopt) {
  if (mask.m.cols() != e.rows() || mask.ignored.size() != e.rows())
    throw ShapeError("ideal_prototypes: mask " + mask.m.shape() + " vs features " + e.shape());
  std::vector<std::size_t> keep;
  for (std::size_t j = 0; j < e.rows(); ++j)
    if (!mask.ignored[j]) keep.push_back(j);
  if (keep.empty()) throw ConfigError("ideal_prototypes: every pixel is ignored");
  Matrix<double> et(e.cols(), keep.size());  // Eᵀ restricted to kept pixels
  Matrix<double> mk(mask.m.rows(), keep.size());
  for (std::size_t c = 0; c < keep.size(); ++c) {
    for (std::size_t d = 0; d < e.cols(); ++d) et(d, c) = e(keep[c], d);
    for (std::size_t k = 0; k < mask.m.rows(); ++k) mk(k, c) = mask.m(k, keep[c]);
  }
  return matmul(mk, pinv(et, rtol));
}

/// Decodes argmax(W*·Eᵀ) and scores it against the mask with mIoU over the
/// non-ignored pixels.
inline double reconstruction_miou(const OneHotMask& mask, const Matrix<double>& e,
                                  std::optional<double> rtol = std::nullopt) {
  const Matrix<double> w = ideal_prototypes(mask, e, rtol);
  std::vector<int> pred = decode_argmax(matmul_nt(w, e));
  std::vector<int> gt(mask.ignored.size());
  for (std::size_t j = 0; j < gt.size(); ++j) {
    gt[j] = kIgnore;
    if (mask.ignored[j]) continue;
    for (std::size_t k = 0; k < mask.m.rows(); ++k)
      if (mask.m(k, j) != 0.0) gt[j] = static_cast<int>(k);
  }
  return compute_metrics(gt, pred, mask.m.rows()).miou;
}

struct SimilarityStats {
  int class_id = 0;
  std::size_t n = 0;
  std::optional<double> median_same_context;
  std::optional<double> median_cross_context;
  double median_pooled = 0.0;
  double min = 0.0;
  double max = 0.0;

  nlohmann::json to_json() const {
    auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
    return {{"class", class_id},
            {"n", n},
            {"median_same_context", opt(median_same_context)},
            {"median_cross_context", opt(median_cross_context)},
            {"median_pooled", median_pooled},
            {"min", min},
            {"max", max}};
  }
};

struct SimilarityStudy {
  std::vector<std::size_t> image_ids;  // images that contributed a prototype
  std::vector<int> tags;               // context tag per image, -1 when untagged
  std::vector<std::size_t> skipped;    // requested images lacking the class
  Matrix<double> similarity;
  SimilarityStats stats;
};

namespace detail {
inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline bool contains_class(const SegSample& s, int k) {
  return std::find(s.labels.begin(), s.labels.end(), k) != s.labels.end();
}
}  // namespace detail

/// Picks up to n images containing class k in a seed-dependent order. When the
/// dataset carries context tags, images are balanced across the two contexts.
inline std::vector<std::size_t> select_images(const Dataset& ds, int k, std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> order(ds.samples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng = make_stream(seed, "mining");
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::size_t> out;
  if (ds.task != TaskKind::context) {
    for (auto i : order)
      if (out.size() < n && detail::contains_class(ds.samples[i], k)) out.push_back(i);
    return out;
  }
  const std::size_t want[2] = {(n + 1) / 2, n / 2};
  std::size_t got[2] = {0, 0};
  for (auto i : order) {
    const auto z = ds.samples[i].context;
    if (got[z] < want[z] && detail::contains_class(ds.samples[i], k)) {
      out.push_back(i);
      ++got[z];
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

/// Relative singular-value cutoff used by the similarity study. Trained
/// features carry a noise subspace roughly 1e-2 below the signal; inverting it
/// makes W* fit noise and swamps the prototype direction.
inline constexpr double kStudyRtol = 1e-2;

/// Mines W* per requested image with features from the frozen encoder, takes
/// row k, and compares the prototypes pairwise by cosine similarity.
template <class T>
SimilarityStudy prototype_similarity_study(const Dataset& ds, const EncoderParams<T>& encoder, int k,
                                           std::span<const std::size_t> images,
                                           std::optional<double> rtol = kStudyRtol) {
  if (k < 0 || static_cast<std::size_t>(k) >= ds.classes)
    throw ConfigError("similarity study: class " + std::to_string(k) + " outside [0, " +
                      std::to_string(ds.classes) + ")");
  SimilarityStudy st;
  std::vector<std::vector<double>> protos;
  for (auto id : images) {
    const auto& s = ds.samples.at(id);
    if (!detail::contains_class(s, k)) {
      st.skipped.push_back(id);
      continue;
    }
    const Matrix<double> e = encoder_forward(encoder, s.features.template cast<T>()).y.template cast<double>();
    const Matrix<double> w = ideal_prototypes(one_hot(s.labels, ds.classes), e, rtol);
    auto row = w.row(static_cast<std::size_t>(k));
    protos.emplace_back(row.begin(), row.end());
    st.image_ids.push_back(id);
    st.tags.push_back(ds.task == TaskKind::context ? s.context : -1);
  }
  if (protos.size() < 2)
    throw ConfigError("similarity study: only " + std::to_string(protos.size()) +
                      " usable image(s) contain class " + std::to_string(k) + ", need at least 2");
  Matrix<double> v(protos.size(), protos.front().size());
  for (std::size_t i = 0; i < protos.size(); ++i) std::copy(protos[i].begin(), protos[i].end(), v.row(i).begin());
  st.similarity = cosine_similarity_matrix(v);

  std::vector<double> same, cross, pooled;
  for (std::size_t i = 0; i < protos.size(); ++i)
    for (std::size_t j = i + 1; j < protos.size(); ++j) {
      const double s = st.similarity(i, j);
      pooled.push_back(s);
      if (st.tags[i] < 0) continue;
      (st.tags[i] == st.tags[j] ? same : cross).push_back(s);
    }
  st.stats.class_id = k;
  st.stats.n = protos.size();
  st.stats.median_pooled = detail::median(pooled);
  st.stats.min = *std::min_element(pooled.begin(), pooled.end());
  st.stats.max = *std::max_element(pooled.begin(), pooled.end());
  if (!same.empty()) st.stats.median_same_context = detail::median(same);
  if (!cross.empty()) st.stats.median_cross_context = detail::median(cross);
  return st;
}

}  // namespace offseg
