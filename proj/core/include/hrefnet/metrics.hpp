#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "hrefnet/image.hpp"

namespace hrefnet::metrics {

struct ConfusionCounts {
  std::int64_t tp = 0;
  std::int64_t tn = 0;
  std::int64_t fp = 0;
  std::int64_t fn = 0;
  std::int64_t total() const { return tp + tn + fp + fn; }
};

// All percentages are in [0, 100]. Shape mismatches throw InvalidArgument.

// 100 when both masks are empty.
double dice(const BinaryMask& pred, const BinaryMask& gt);

// Two-subiteration thinning to a one-pixel-wide skeleton. Every deletion is a
// simple point, so 8-connected components are preserved; end points stay.
BinaryMask skeletonize(const BinaryMask& mask);

// Harmonic mean of topology precision |S(pred) & gt| / |S(pred)| and topology
// sensitivity |S(gt) & pred| / |S(gt)|. Both skeletons empty -> 100, one empty -> 0.
double cldice(const BinaryMask& pred, const BinaryMask& gt);

// Pixel counts, optionally restricted to a field of view.
ConfusionCounts confusion(const BinaryMask& pred, const BinaryMask& gt, const BinaryMask* fov = nullptr);

// Throws InvalidArgument on all-zero counts.
double accuracy(const ConfusionCounts& counts);

// Mann-Whitney statistic with half credit for ties. Throws UndefinedMetric
// when the ground truth has a single class.
double auc_roc(const Grid& probs, const BinaryMask& gt, const BinaryMask* fov = nullptr);

// Mask pixels with a 4-neighbour outside the mask (or outside the image).
BinaryMask boundary(const BinaryMask& mask);

// Linear interpolation between order statistics at rank q * (n - 1).
double percentile(std::vector<double> values, double q);

// max(P95(d(dpred -> dgt)), P95(d(dgt -> dpred))) over boundary pixels.
// Throws UndefinedMetric when either mask is empty.
double hd95(const BinaryMask& pred, const BinaryMask& gt);

inline constexpr std::array<const char*, 5> kMetricNames{"Dice", "clDice", "ACC", "AUC", "HD95"};

struct ImageMetrics {
  std::string id;
  // Dice, clDice, ACC, AUC, HD95; empty when undefined for this image.
  std::array<std::optional<double>, 5> values;
  std::vector<std::string> warnings;
};

// Probabilities are binarized at `threshold` (>=) for everything except AUC.
ImageMetrics evaluate_image(const std::string& id, const Grid& probs, const BinaryMask& gt,
                            const BinaryMask* fov = nullptr, double threshold = 0.5);

struct Summary {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation, 0 for one value
  int count = 0;
  int undefined = 0;
};

struct MetricsReport {
  std::vector<ImageMetrics> per_image;
  std::array<Summary, 5> summary;
};

// Throws InvalidArgument on an empty list.
MetricsReport aggregate_report(std::vector<ImageMetrics> per_image);

// One row per image, then a mean +- std row. Undefined cells read "undefined".
void write_report(std::ostream& out, const MetricsReport& report, char delimiter = ',');

}  // namespace hrefnet::metrics
