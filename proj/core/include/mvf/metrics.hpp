#pragma once

#include <vector>

#include "mvf/error.hpp"

namespace mvf {

// Per-sample probability vectors with ground-truth class indices.
struct ScoredLabels {
  std::vector<std::vector<double>> proba;
  std::vector<int> labels;
};

struct ConfusionCounts {
  std::vector<long> tp, fp, fn, tn;
};

struct MulticlassReport {
  double accuracy = 0.0;
  double precision = 0.0;  // macro
  double recall = 0.0;     // macro
  double f1 = 0.0;         // macro
  ConfusionCounts confusion;
  int absent_classes = 0;  // classes missing from both truth and prediction
};

// Mann-Whitney AUROC: P(score+ > score-) + P(tie)/2, via average ranks.
// Throws MetricUndefinedError unless both classes are present.
double auroc(const std::vector<double>& scores, const std::vector<int>& labels);

// Step-interpolated average precision over descending-score thresholds
// (ties collapse into one threshold). Throws without any positive.
double auprc(const std::vector<double>& scores, const std::vector<int>& labels);

// Argmax predictions, macro averaging; absent classes score 0 and stay in
// the macro denominator.
MulticlassReport multiclass_report(const ScoredLabels& s, int num_classes);

}  // namespace mvf
