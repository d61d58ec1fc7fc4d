#pragma once

#include <cstddef>
#include <cstdint>
#include <iomanip>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "nabla/tensor.hpp"

namespace nabla {

/// Binary mask, one byte per pixel, values exactly 0 or 1.
using Mask = std::vector<std::uint8_t>;

struct ConfusionCounts {
  std::uint64_t tp = 0, tn = 0, fp = 0, fn = 0;

  std::uint64_t total() const { return tp + tn + fp + fn; }
  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    tp += o.tp;
    tn += o.tn;
    fp += o.fp;
    fn += o.fn;
    return *this;
  }
  bool operator==(const ConfusionCounts&) const = default;
};

enum class Aggregation { Micro, PerImageMean };

inline std::string to_string(Aggregation a) { return a == Aggregation::Micro ? "micro" : "per_image_mean"; }

struct MetricsReport {
  double precision = 0, recall = 0, accuracy = 0, f1 = 0, iou = 0, dice = 0;
  ConfusionCounts counts;
  Aggregation aggregation = Aggregation::Micro;
};

/// value >= threshold -> 1, else 0.
template <typename T>
Mask binarize(std::span<T> prob, double threshold = 0.5) {
  if (!(threshold > 0.0 && threshold < 1.0)) throw std::invalid_argument("binarize: threshold must lie in (0, 1)");
  Mask m(prob.size());
  for (std::size_t i = 0; i < prob.size(); ++i) m[i] = static_cast<double>(prob[i]) >= threshold ? 1 : 0;
  return m;
}

template <typename T>
Mask binarize(const Tensor<T>& prob, double threshold = 0.5) {
  return binarize(std::span<const T>(prob.data()), threshold);
}

inline ConfusionCounts confusion_counts(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt) {
  if (pred.size() != gt.size()) {
    throw std::invalid_argument("confusion_counts: prediction has " + std::to_string(pred.size()) +
                                " pixels, ground truth " + std::to_string(gt.size()));
  }
  ConfusionCounts c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] > 1 || gt[i] > 1) {
      throw std::invalid_argument("confusion_counts: non-binary value at pixel " + std::to_string(i));
    }
    if (pred[i]) {
      gt[i] ? ++c.tp : ++c.fp;
    } else {
      gt[i] ? ++c.fn : ++c.tn;
    }
  }
  return c;
}

namespace detail {

// 0/0 means no positives were predicted or present: a perfect (empty) result.
inline double ratio(double num, double den) { return den == 0 ? 1.0 : num / den; }

}  // namespace detail

/// Precision, recall, accuracy, F1 (from precision and recall), IoU and Dice.
inline MetricsReport compute_metrics(const ConfusionCounts& c) {
  if (c.total() == 0) throw std::invalid_argument("compute_metrics: all counts are zero");
  const double tp = double(c.tp), tn = double(c.tn), fp = double(c.fp), fn = double(c.fn);
  MetricsReport r;
  r.counts = c;
  r.precision = detail::ratio(tp, tp + fp);
  r.recall = detail::ratio(tp, tp + fn);
  r.accuracy = (tp + tn) / (tp + tn + fp + fn);
  r.f1 = r.precision + r.recall == 0 ? 0.0 : 2 * r.precision * r.recall / (r.precision + r.recall);
  r.iou = detail::ratio(tp, tp + fp + fn);
  r.dice = detail::ratio(2 * tp, 2 * tp + fn + fp);
  return r;
}

/// Micro: counts summed over the set, then scored once. Per-image mean:
/// every image scored separately and each metric averaged. The counts field
/// holds the summed counts in both cases.
inline MetricsReport evaluate_dataset(const std::vector<Mask>& preds, const std::vector<Mask>& gts,
                                      Aggregation aggregation) {
  if (preds.empty()) throw std::invalid_argument("evaluate_dataset: empty dataset");
  if (preds.size() != gts.size()) {
    throw std::invalid_argument("evaluate_dataset: " + std::to_string(preds.size()) + " predictions for " +
                                std::to_string(gts.size()) + " ground-truth masks");
  }
  ConfusionCounts total;
  MetricsReport mean;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const ConfusionCounts c = confusion_counts(preds[i], gts[i]);
    total += c;
    if (aggregation == Aggregation::PerImageMean) {
      const MetricsReport r = compute_metrics(c);
      mean.precision += r.precision;
      mean.recall += r.recall;
      mean.accuracy += r.accuracy;
      mean.f1 += r.f1;
      mean.iou += r.iou;
      mean.dice += r.dice;
    }
  }
  if (aggregation == Aggregation::Micro) return compute_metrics(total);
  const double n = static_cast<double>(preds.size());
  mean.precision /= n;
  mean.recall /= n;
  mean.accuracy /= n;
  mean.f1 /= n;
  mean.iou /= n;
  mean.dice /= n;
  mean.counts = total;
  mean.aggregation = Aggregation::PerImageMean;
  return mean;
}

struct ClassMetrics {
  int label = 0;
  double precision = 0, recall = 0, f1 = 0;
  std::size_t support = 0;
};

struct ClassificationReport {
  std::vector<ClassMetrics> classes;
  double weighted_precision = 0, weighted_recall = 0, weighted_f1 = 0;
  double accuracy = 0;
  std::size_t total_support = 0;
};

/// Support-weighted averages of per-class rows; the rows may come from
/// classification_report or from a published table.
inline void fill_weighted_averages(ClassificationReport& r) {
  double p = 0, rc = 0, f = 0;
  std::size_t total = 0;
  for (const auto& c : r.classes) {
    p += c.precision * double(c.support);
    rc += c.recall * double(c.support);
    f += c.f1 * double(c.support);
    total += c.support;
  }
  r.total_support = total;
  const double w = total == 0 ? 0.0 : 1.0 / double(total);
  r.weighted_precision = p * w;
  r.weighted_recall = rc * w;
  r.weighted_f1 = f * w;
}

/// One-vs-rest precision/recall/F1 per class (same 0/0 convention as
/// compute_metrics), support-weighted averages and overall accuracy.
inline ClassificationReport classification_report(const std::vector<int>& predicted, const std::vector<int>& truth,
                                                  int num_classes) {
  if (num_classes < 1) throw std::invalid_argument("classification_report: need at least one class");
  if (predicted.size() != truth.size()) {
    throw std::invalid_argument("classification_report: " + std::to_string(predicted.size()) + " predictions for " +
                                std::to_string(truth.size()) + " labels");
  }
  auto check = [&](int v) {
    if (v < 0 || v >= num_classes) {
      throw std::out_of_range("classification_report: label " + std::to_string(v) + " outside [0, " +
                              std::to_string(num_classes) + ")");
    }
  };
  std::vector<std::size_t> tp(num_classes), fp(num_classes), fn(num_classes);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    check(predicted[i]);
    check(truth[i]);
    if (predicted[i] == truth[i]) {
      ++tp[truth[i]];
      ++correct;
    } else {
      ++fp[predicted[i]];
      ++fn[truth[i]];
    }
  }
  ClassificationReport r;
  for (int k = 0; k < num_classes; ++k) {
    ClassMetrics c;
    c.label = k;
    c.precision = detail::ratio(double(tp[k]), double(tp[k] + fp[k]));
    c.recall = detail::ratio(double(tp[k]), double(tp[k] + fn[k]));
    c.f1 = c.precision + c.recall == 0 ? 0.0 : 2 * c.precision * c.recall / (c.precision + c.recall);
    c.support = tp[k] + fn[k];
    r.classes.push_back(c);
  }
  fill_weighted_averages(r);
  r.accuracy = truth.empty() ? 0.0 : double(correct) / double(truth.size());
  return r;
}

inline void write_metrics_csv(std::ostream& os, const std::vector<MetricsReport>& reports) {
  os << std::setprecision(12);
  os << "aggregation,precision,recall,accuracy,f1,iou,dice,tp,tn,fp,fn\n";
  for (const auto& r : reports) {
    os << to_string(r.aggregation) << ',' << r.precision << ',' << r.recall << ',' << r.accuracy << ',' << r.f1 << ','
       << r.iou << ',' << r.dice << ',' << r.counts.tp << ',' << r.counts.tn << ',' << r.counts.fp << ','
       << r.counts.fn << '\n';
  }
}

inline void write_classification_csv(std::ostream& os, const ClassificationReport& r) {
  os << std::setprecision(12);
  os << "class,precision,recall,f1,support\n";
  for (const auto& c : r.classes) {
    os << c.label << ',' << c.precision << ',' << c.recall << ',' << c.f1 << ',' << c.support << '\n';
  }
  os << "weighted_avg," << r.weighted_precision << ',' << r.weighted_recall << ',' << r.weighted_f1 << ','
     << r.total_support << '\n';
  os << "accuracy,,," << r.accuracy << ',' << r.total_support << '\n';
}

}  // namespace nabla
