#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "iseg/types.hpp"

namespace iseg {

/// Label 1 where the channel value is >= tau, else 0.
inline SegMask binarize_single(const CategoryMaps& maps, double tau, Eigen::Index channel = 0) {
  if (channel < 0 || channel >= maps.channels()) throw ShapeError("channel index out of range");
  SegMask out(maps.grid);
  const auto col = maps.maps.col(channel);
  for (Eigen::Index i = 0; i < col.size(); ++i) out.labels[static_cast<std::size_t>(i)] = col(i) >= tau ? 1 : 0;
  return out;
}

enum class BackgroundMode { threshold, bg_channel };

inline BackgroundMode parse_background_mode(const std::string& s) {
  if (s == "threshold") return BackgroundMode::threshold;
  if (s == "bg_channel" || s == "bg-channel") return BackgroundMode::bg_channel;
  throw ConfigError("unknown background mode '" + s + "' (expected threshold or bg_channel)");
}

inline const char* to_string(BackgroundMode m) { return m == BackgroundMode::threshold ? "threshold" : "bg_channel"; }

/// Per-pixel argmax over channels (lowest index wins ties). In threshold mode
/// a pixel whose winning value is below tau is background; in bg_channel mode
/// a pixel is background when the designated background channel wins.
/// Category labels count the non-background channels from 1.
inline SegMask assemble_multi(const CategoryMaps& maps, BackgroundMode mode, double tau) {
  if (maps.channels() < 1) throw ShapeError("at least one channel is required");
  if (mode == BackgroundMode::bg_channel && !maps.background_channel)
    throw ConfigError("bg_channel mode requires a background channel");
  const auto bg = maps.background_channel.value_or(-1);
  SegMask out(maps.grid);
  for (Eigen::Index i = 0; i < maps.maps.rows(); ++i) {
    Eigen::Index best = -1;
    double best_v = 0.0;
    for (Eigen::Index c = 0; c < maps.channels(); ++c) {
      if (mode == BackgroundMode::threshold && c == bg) continue;
      const double v = maps.maps(i, c);
      if (best < 0 || v > best_v) {
        best = c;
        best_v = v;
      }
    }
    std::uint8_t label = 0;
    const bool background = mode == BackgroundMode::threshold ? best_v < tau : best == bg;
    if (!background && best >= 0) label = static_cast<std::uint8_t>(best + 1 - ((bg >= 0 && best > bg) ? 1 : 0));
    out.labels[static_cast<std::size_t>(i)] = label;
  }
  return out;
}

/// Square confusion matrix indexed [gt][pred], grown on demand.
class ConfusionMatrix {
 public:
  void add(const SegMask& pred, const SegMask& gt) {
    if (!(pred.grid == gt.grid) || pred.labels.size() != gt.labels.size())
      throw ShapeError("prediction " + to_string(pred.grid) + " and ground truth " + to_string(gt.grid) +
                       " differ in shape");
    grow(std::max(pred.max_label(), gt.max_label()) + 1);
    for (std::size_t i = 0; i < pred.labels.size(); ++i) ++counts_[gt.labels[i] * classes_ + pred.labels[i]];
  }

  int classes() const { return static_cast<int>(classes_); }
  std::uint64_t at(int gt, int pred) const { return counts_[static_cast<std::size_t>(gt) * classes_ + pred]; }

 private:
  void grow(std::size_t k) {
    if (k <= classes_) return;
    std::vector<std::uint64_t> next(k * k, 0);
    for (std::size_t g = 0; g < classes_; ++g)
      for (std::size_t p = 0; p < classes_; ++p) next[g * k + p] = counts_[g * classes_ + p];
    counts_ = std::move(next);
    classes_ = k;
  }

  std::size_t classes_ = 0;
  std::vector<std::uint64_t> counts_;
};

struct MetricReport {
  std::vector<double> per_class_iou;  // indexed by label; meaningful where present[k]
  std::vector<bool> present;          // class occurs in prediction or ground truth
  double miou = 0.0;
  double acc = 0.0;
  std::uint64_t pixels = 0;
  std::uint64_t correct = 0;
};

inline MetricReport report_from_confusion(const ConfusionMatrix& cm) {
  MetricReport r;
  const int k = cm.classes();
  r.per_class_iou.assign(static_cast<std::size_t>(k), 0.0);
  r.present.assign(static_cast<std::size_t>(k), false);
  double sum = 0.0;
  int n = 0;
  for (int c = 0; c < k; ++c) {
    std::uint64_t row = 0, col = 0;
    for (int o = 0; o < k; ++o) {
      row += cm.at(c, o);
      col += cm.at(o, c);
      r.pixels += cm.at(c, o);
    }
    const std::uint64_t inter = cm.at(c, c);
    const std::uint64_t uni = row + col - inter;
    r.correct += inter;
    if (uni == 0) continue;
    r.present[static_cast<std::size_t>(c)] = true;
    r.per_class_iou[static_cast<std::size_t>(c)] = static_cast<double>(inter) / static_cast<double>(uni);
    sum += r.per_class_iou[static_cast<std::size_t>(c)];
    ++n;
  }
  r.miou = n > 0 ? sum / n : 0.0;
  r.acc = r.pixels > 0 ? static_cast<double>(r.correct) / static_cast<double>(r.pixels) : 0.0;
  return r;
}

/// IoU per class over classes present in either mask; ACC = fraction of equal pixels.
inline MetricReport miou(const SegMask& pred, const SegMask& gt) {
  ConfusionMatrix cm;
  cm.add(pred, gt);
  return report_from_confusion(cm);
}

inline nlohmann::json to_json(const MetricReport& r) {
  nlohmann::json per = nlohmann::json::array();
  for (std::size_t k = 0; k < r.per_class_iou.size(); ++k)
    per.push_back(r.present[k] ? nlohmann::json(r.per_class_iou[k]) : nlohmann::json(nullptr));
  return {{"per_class_iou", per}, {"miou", r.miou}, {"acc", r.acc}, {"pixels", r.pixels}, {"correct", r.correct}};
}

}  // namespace iseg
