#include "mvf/metrics.hpp"

#include <algorithm>
#include <numeric>
#include <string>

namespace mvf {

namespace {

void check_binary_input(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size()) {
    throw DimensionError("scores and labels differ in length: " + std::to_string(scores.size()) +
                         " vs " + std::to_string(labels.size()));
  }
  if (scores.empty()) {
    throw MetricUndefinedError("empty score set");
  }
  for (int l : labels) {
    if (l != 0 && l != 1) {
      throw ParameterError("binary metric got label " + std::to_string(l));
    }
  }
}

}  // namespace

double auroc(const std::vector<double>& scores, const std::vector<int>& labels) {
  check_binary_input(scores, labels);
  const std::size_t n = scores.size();
  std::size_t n_pos = 0;
  for (int l : labels) n_pos += static_cast<std::size_t>(l);
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) {
    throw MetricUndefinedError("auroc undefined: only one class present");
  }

  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  // rank sum of positives with average ranks for tie groups
  double rank_sum_pos = 0.0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && scores[idx[j + 1]] == scores[idx[i]]) ++j;
    const double avg_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j + 1));
    for (std::size_t t = i; t <= j; ++t) {
      if (labels[idx[t]] == 1) rank_sum_pos += avg_rank;
    }
    i = j + 1;
  }
  const double u = rank_sum_pos - static_cast<double>(n_pos) * (static_cast<double>(n_pos) + 1.0) / 2.0;
  return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

double auprc(const std::vector<double>& scores, const std::vector<int>& labels) {
  check_binary_input(scores, labels);
  const std::size_t n = scores.size();
  std::size_t n_pos = 0;
  for (int l : labels) n_pos += static_cast<std::size_t>(l);
  if (n_pos == 0) {
    throw MetricUndefinedError("auprc undefined: no positive samples");
  }

  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  double ap = 0.0;
  double recall_prev = 0.0;
  std::size_t tp = 0, fp = 0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && scores[idx[j + 1]] == scores[idx[i]]) ++j;
    for (std::size_t t = i; t <= j; ++t) {
      if (labels[idx[t]] == 1) ++tp;
      else ++fp;
    }
    const double recall = static_cast<double>(tp) / static_cast<double>(n_pos);
    const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    ap += (recall - recall_prev) * precision;
    recall_prev = recall;
    i = j + 1;
  }
  return ap;
}

MulticlassReport multiclass_report(const ScoredLabels& s, int num_classes) {
  if (s.proba.size() != s.labels.size()) {
    throw DimensionError("proba and labels differ in length");
  }
  if (s.proba.empty()) {
    throw MetricUndefinedError("empty score set");
  }
  const auto nc = static_cast<std::size_t>(num_classes);
  MulticlassReport rep;
  rep.confusion.tp.assign(nc, 0);
  rep.confusion.fp.assign(nc, 0);
  rep.confusion.fn.assign(nc, 0);
  rep.confusion.tn.assign(nc, 0);

  long correct = 0;
  for (std::size_t i = 0; i < s.proba.size(); ++i) {
    const auto& p = s.proba[i];
    if (p.size() != nc) {
      throw DimensionError("probability vector of length " + std::to_string(p.size()) +
                           " for " + std::to_string(num_classes) + " classes");
    }
    const int pred = static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
    const int truth = s.labels[i];
    if (truth < 0 || truth >= num_classes) {
      throw ParameterError("label " + std::to_string(truth) + " out of range");
    }
    if (pred == truth) ++correct;
    for (int c = 0; c < num_classes; ++c) {
      const auto ci = static_cast<std::size_t>(c);
      const bool is_pred = pred == c, is_truth = truth == c;
      if (is_pred && is_truth) ++rep.confusion.tp[ci];
      else if (is_pred) ++rep.confusion.fp[ci];
      else if (is_truth) ++rep.confusion.fn[ci];
      else ++rep.confusion.tn[ci];
    }
  }

  const double n = static_cast<double>(s.proba.size());
  rep.accuracy = static_cast<double>(correct) / n;
  double psum = 0.0, rsum = 0.0, fsum = 0.0;
  for (std::size_t c = 0; c < nc; ++c) {
    const double tp = static_cast<double>(rep.confusion.tp[c]);
    const double fp = static_cast<double>(rep.confusion.fp[c]);
    const double fn = static_cast<double>(rep.confusion.fn[c]);
    if (tp + fp + fn == 0.0) ++rep.absent_classes;  // contributes 0, stays in denominator
    const double prec = tp + fp > 0.0 ? tp / (tp + fp) : 0.0;
    const double rec = tp + fn > 0.0 ? tp / (tp + fn) : 0.0;
    const double f1 = prec + rec > 0.0 ? 2.0 * prec * rec / (prec + rec) : 0.0;
    psum += prec;
    rsum += rec;
    fsum += f1;
  }
  rep.precision = psum / static_cast<double>(num_classes);
  rep.recall = rsum / static_cast<double>(num_classes);
  rep.f1 = fsum / static_cast<double>(num_classes);
  return rep;
}

}  // namespace mvf
