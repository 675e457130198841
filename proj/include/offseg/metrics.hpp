#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "offseg/error.hpp"
#include "offseg/linalg.hpp"

namespace offseg {

/// Internal ignore label; files store 65535 instead.
inline constexpr int kIgnore = -1;

/// Per-pixel argmax over classes (rows of a K × HW logit matrix). Ties go to
/// the lowest class index.
template <class T>
std::vector<int> decode_argmax(const Matrix<T>& logits) {
  std::vector<int> pred(logits.cols(), 0);
  for (std::size_t j = 0; j < logits.cols(); ++j) {
    T best = logits(0, j);
    for (std::size_t k = 1; k < logits.rows(); ++k) {
      if (logits(k, j) > best) {
        best = logits(k, j);
        pred[j] = static_cast<int>(k);
      }
    }
  }
  return pred;
}

struct MetricsReport {
  std::size_t classes = 0;
  std::vector<std::uint64_t> confusion;   // classes × classes, rows = ground truth
  std::vector<std::optional<double>> iou;  // nullopt when TP+FP+FN = 0
  double miou = 0.0;
  double pixel_accuracy = 0.0;
  std::uint64_t ignored = 0;
  std::uint64_t counted = 0;

  std::uint64_t at(std::size_t gt, std::size_t pred) const { return confusion[gt * classes + pred]; }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["classes"] = classes;
    nlohmann::json rows = nlohmann::json::array();
    for (std::size_t g = 0; g < classes; ++g) {
      nlohmann::json r = nlohmann::json::array();
      for (std::size_t p = 0; p < classes; ++p) r.push_back(at(g, p));
      rows.push_back(r);
    }
    j["confusion"] = rows;
    nlohmann::json ious = nlohmann::json::array();
    for (const auto& v : iou) ious.push_back(v ? nlohmann::json(*v) : nlohmann::json(nullptr));
    j["iou"] = ious;
    j["miou"] = miou;
    j["pixel_accuracy"] = pixel_accuracy;
    j["ignored_pixels"] = ignored;
    j["counted_pixels"] = counted;
    return j;
  }
};

/// Accumulates a confusion matrix over any number of label/prediction pairs.
class ConfusionAccumulator {
 public:
  explicit ConfusionAccumulator(std::size_t classes)
      : classes_(classes), counts_(classes * classes, 0) {}

  void add(std::span<const int> gt, std::span<const int> pred) {
    if (gt.size() != pred.size())
      throw ShapeError("confusion: " + std::to_string(gt.size()) + " labels vs " +
                       std::to_string(pred.size()) + " predictions");
    for (std::size_t i = 0; i < gt.size(); ++i) {
      if (gt[i] == kIgnore) {
        ++ignored_;
        continue;
      }
      check(gt[i], "ground truth", i);
      check(pred[i], "prediction", i);
      ++counts_[static_cast<std::size_t>(gt[i]) * classes_ + static_cast<std::size_t>(pred[i])];
    }
  }

  void merge(const ConfusionAccumulator& o) {
    if (o.classes_ != classes_) throw ShapeError("confusion: class count mismatch in merge");
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += o.counts_[i];
    ignored_ += o.ignored_;
  }

  MetricsReport report() const {
    MetricsReport r;
    r.classes = classes_;
    r.confusion = counts_;
    r.ignored = ignored_;
    r.iou.assign(classes_, std::nullopt);
    std::uint64_t diag = 0, total = 0;
    std::vector<std::uint64_t> row(classes_, 0), col(classes_, 0);
    for (std::size_t g = 0; g < classes_; ++g)
      for (std::size_t p = 0; p < classes_; ++p) {
        auto c = counts_[g * classes_ + p];
        row[g] += c;
        col[p] += c;
        total += c;
        if (g == p) diag += c;
      }
    double sum = 0.0;
    std::size_t present = 0;
    for (std::size_t k = 0; k < classes_; ++k) {
      const auto tp = counts_[k * classes_ + k];
      const auto uni = row[k] + col[k] - tp;  // TP + FP + FN
      if (uni == 0) continue;
      r.iou[k] = static_cast<double>(tp) / static_cast<double>(uni);
      sum += *r.iou[k];
      ++present;
    }
    r.counted = total;
    r.miou = present ? sum / static_cast<double>(present) : 0.0;
    r.pixel_accuracy = total ? static_cast<double>(diag) / static_cast<double>(total) : 0.0;
    return r;
  }

 private:
  void check(int v, const char* what, std::size_t i) const {
    if (v < 0 || static_cast<std::size_t>(v) >= classes_)
      throw ConfigError(std::string("confusion: ") + what + " label " + std::to_string(v) +
                        " at pixel " + std::to_string(i) + " outside [0, " +
                        std::to_string(classes_) + ")");
  }

  std::size_t classes_;
  std::vector<std::uint64_t> counts_;
  std::uint64_t ignored_ = 0;
};

inline MetricsReport compute_metrics(std::span<const int> gt, std::span<const int> pred,
                                     std::size_t classes) {
  ConfusionAccumulator acc(classes);
  acc.add(gt, pred);
  return acc.report();
}

}  // namespace offseg
