#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mvf/data.hpp"
#include "mvf/metrics.hpp"
#include "mvf/model.hpp"

namespace mvf {

struct TrainConfig {
  int epochs = 50;
  int batch_size = 32;
  double lr = 1e-3;
  std::uint64_t seed = 0;       // master seed; fold streams derive from it
  bool class_weighting = true;  // inverse class frequency in the loss
  int patience = 10;            // early stop on the validation metric; <= 0 disables
  std::string checkpoint_dir;   // when set, best fold params are saved here
};

// Lossless %.17g doubles; used for every report and CSV cell.
std::string format_double(double v);

// Metric bundle plus enough context to audit it. Serializes to key=value
// lines and parses back losslessly.
struct EvalReport {
  std::string task;  // "binary" | "multiclass"
  int n = 0;
  std::vector<std::pair<std::string, double>> metrics;
  std::vector<long> truth_counts;
  std::vector<long> pred_counts;
  std::vector<std::string> flags;

  double metric(const std::string& name) const;
  std::string to_text() const;
  static EvalReport from_text(const std::string& text);
};

struct TrainHistory {
  std::vector<double> train_loss;  // per epoch
  std::vector<double> val_metric;  // per epoch (AUROC or macro-F1)
  int best_epoch = -1;
  int epochs_run = 0;
};

// Ordered key=value pairs, written before results in each report.
struct Manifest {
  std::vector<std::pair<std::string, std::string>> entries;
  void put(const std::string& key, const std::string& value) { entries.emplace_back(key, value); }
  const std::string* find(const std::string& key) const;
};

struct CvReport {
  std::vector<EvalReport> folds;
  std::vector<std::pair<std::string, double>> mean;
  std::vector<std::pair<std::string, double>> stdev;  // sample std over folds (n-1)
  Manifest manifest;

  double mean_metric(const std::string& name) const;
  std::string to_text() const;
};

enum class TaskKind { kAuto, kBinary, kMulticlass };

// Mini-batch Adam on (optionally class-weighted) cross-entropy. Keeps the
// parameters from the epoch with the best validation metric. Deterministic
// for a fixed seed. Aborts with a diagnostic if the loss leaves the reals.
std::pair<ParamStore, TrainHistory> train_model(const Dataset& train_set, const Dataset& val_set,
                                                const ModelConfig& model_cfg,
                                                const TrainConfig& train_cfg);

EvalReport evaluate(const ParamStore& params, const Dataset& test_set, const ModelConfig& cfg,
                    TaskKind task = TaskKind::kAuto);

// k-fold cross-validation with per-fold normalization from the fold's train
// split. Fold RNG streams derive from the master seed by fold index.
CvReport run_cv(const Dataset& ds, int k, const ModelConfig& model_cfg, const TrainConfig& train_cfg);

// Trains once per fold on complete data, then evaluates each corruption
// ratio on the fold's test split. Dropped sets are nested across ratios.
std::vector<std::pair<double, CvReport>> run_sensor_dropout_sweep(const Dataset& ds,
                                                                  std::vector<double> ratios, int k,
                                                                  const ModelConfig& model_cfg,
                                                                  const TrainConfig& train_cfg);

struct AblationCell {
  std::string label;
  ModelConfig cfg;
};

// Table-style ablation labels -> configs (v1..v4 and the switch rows).
AblationCell ablation_cell(const std::string& label, const ModelConfig& base);

// Runs every cell over the identical folds and fold seeds (paired design).
std::vector<std::pair<std::string, CvReport>> run_variant_ablation(const Dataset& ds, int k,
                                                                   const std::vector<AblationCell>& cells,
                                                                   const TrainConfig& train_cfg);

// ---- plot-ready emission (comma-delimited, '.' decimal, LF endings) ----

std::string ablation_csv(const std::vector<std::pair<std::string, CvReport>>& rows);
std::string ablation_table(const std::vector<std::pair<std::string, CvReport>>& rows);
std::string sweep_csv(const std::vector<std::pair<double, CvReport>>& rows);
std::string sweep_folds_csv(const std::vector<std::pair<double, CvReport>>& rows);

}  // namespace mvf
