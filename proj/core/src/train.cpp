#include "mvf/train.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "mvf/optim.hpp"

namespace mvf {

namespace {

std::string fmt_hex64(std::uint64_t v) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::uint64_t hash_indices(const std::vector<int>& idx) {
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (int i : idx) h = Rng::mix(h, static_cast<std::uint64_t>(i) + 1);
  return h;
}

std::vector<double> class_weights_for(const Dataset& train_set, int num_classes) {
  std::vector<long> counts(static_cast<std::size_t>(num_classes), 0);
  for (const auto& s : train_set.samples) ++counts.at(static_cast<std::size_t>(s.label));
  std::vector<double> w(static_cast<std::size_t>(num_classes));
  for (int c = 0; c < num_classes; ++c) {
    if (counts[static_cast<std::size_t>(c)] == 0) {
      throw ConfigError("class " + std::to_string(c) + " absent from the training split");
    }
    w[static_cast<std::size_t>(c)] = static_cast<double>(train_set.samples.size()) /
                                     (static_cast<double>(num_classes) *
                                      static_cast<double>(counts[static_cast<std::size_t>(c)]));
  }
  return w;
}

double validation_metric(const EvalReport& rep) {
  return rep.task == "binary" ? rep.metric("auroc") : rep.metric("f1");
}

std::uint64_t fold_seed(std::uint64_t master, int fold) {
  return Rng::mix(master, static_cast<std::uint64_t>(fold) + 0xF01D);
}

void append_config_entries(Manifest& m, const ModelConfig& cfg, const TrainConfig& tcfg) {
  std::istringstream is(config_to_text(cfg));
  std::string line;
  while (std::getline(is, line)) {
    const auto eq = line.find('=');
    m.put("model." + line.substr(0, eq), line.substr(eq + 1));
  }
  m.put("train.epochs", std::to_string(tcfg.epochs));
  m.put("train.batch_size", std::to_string(tcfg.batch_size));
  m.put("train.lr", format_double(tcfg.lr));
  m.put("train.class_weighting", tcfg.class_weighting ? "1" : "0");
  m.put("train.patience", std::to_string(tcfg.patience));
}

Manifest base_manifest(const Dataset& ds, int k, const ModelConfig& cfg, const TrainConfig& tcfg,
                       const std::vector<FoldSplit>& folds) {
  Manifest m;
  m.put("artifact_version", "0.1.0");
  m.put("master_seed", std::to_string(tcfg.seed));
  m.put("k", std::to_string(k));
  m.put("dataset_fingerprint", fmt_hex64(ds.fingerprint()));
  m.put("dataset_samples", std::to_string(ds.samples.size()));
  m.put("dataset_length", std::to_string(ds.length));
  m.put("dataset_sensors", std::to_string(ds.sensors));
  m.put("dataset_classes", std::to_string(ds.num_classes));
  append_config_entries(m, cfg, tcfg);
  for (std::size_t f = 0; f < folds.size(); ++f) {
    const std::string p = "fold." + std::to_string(f) + ".";
    m.put(p + "seed", std::to_string(fold_seed(tcfg.seed, static_cast<int>(f))));
    m.put(p + "train_size", std::to_string(folds[f].train.size()));
    m.put(p + "val_size", std::to_string(folds[f].val.size()));
    m.put(p + "test_size", std::to_string(folds[f].test.size()));
    m.put(p + "val_hash", fmt_hex64(hash_indices(folds[f].val)));
    m.put(p + "test_hash", fmt_hex64(hash_indices(folds[f].test)));
  }
  return m;
}

struct TrainedFold {
  ParamStore params;
  TrainHistory history;
  Dataset test;  // normalized with the fold's train-split stats
};

TrainedFold train_fold(const Dataset& ds, const FoldSplit& fold, const ModelConfig& cfg,
                       const TrainConfig& tcfg, int fold_index) {
  const NormStats stats = compute_norm_stats(ds, fold.train);
  Dataset train_set = apply_norm_stats(subset(ds, fold.train), stats);
  Dataset val_set = apply_norm_stats(subset(ds, fold.val), stats);
  Dataset test_set = apply_norm_stats(subset(ds, fold.test), stats);

  TrainConfig fold_cfg = tcfg;
  fold_cfg.seed = fold_seed(tcfg.seed, fold_index);
  auto [params, history] = train_model(train_set, val_set, cfg, fold_cfg);
  assert(test_set.access_count == 0 && "training touched the test handle");

  if (!tcfg.checkpoint_dir.empty()) {
    save_checkpoint(tcfg.checkpoint_dir + "/fold" + std::to_string(fold_index) + ".mvf1", cfg, params);
  }
  return {std::move(params), std::move(history), std::move(test_set)};
}

void aggregate(CvReport& report) {
  if (report.folds.empty()) return;
  const auto& names = report.folds.front().metrics;
  const double n = static_cast<double>(report.folds.size());
  for (const auto& [name, unused] : names) {
    (void)unused;
    double sum = 0.0;
    for (const auto& f : report.folds) sum += f.metric(name);
    const double mean = sum / n;
    double ss = 0.0;
    for (const auto& f : report.folds) {
      const double d = f.metric(name) - mean;
      ss += d * d;
    }
    report.mean.emplace_back(name, mean);
    report.stdev.emplace_back(name, n > 1.0 ? std::sqrt(ss / (n - 1.0)) : 0.0);
  }
}

CvReport run_cv_folds(const Dataset& ds, const std::vector<FoldSplit>& folds, const ModelConfig& cfg,
                      const TrainConfig& tcfg) {
  CvReport report;
  for (std::size_t f = 0; f < folds.size(); ++f) {
    TrainedFold tf = train_fold(ds, folds[f], cfg, tcfg, static_cast<int>(f));
    report.folds.push_back(evaluate(tf.params, tf.test, cfg));
  }
  aggregate(report);
  report.manifest = base_manifest(ds, static_cast<int>(folds.size()), cfg, tcfg, folds);
  return report;
}

}  // namespace

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double EvalReport::metric(const std::string& name) const {
  for (const auto& [k, v] : metrics) {
    if (k == name) return v;
  }
  throw UsageError("metric '" + name + "' not present in report");
}

std::string EvalReport::to_text() const {
  std::ostringstream os;
  os << "task=" << task << "\n";
  os << "n=" << n << "\n";
  for (const auto& [k, v] : metrics) os << k << "=" << format_double(v) << "\n";
  auto counts = [&os](const char* key, const std::vector<long>& c) {
    os << key << "=";
    for (std::size_t i = 0; i < c.size(); ++i) os << (i ? "," : "") << c[i];
    os << "\n";
  };
  counts("truth_counts", truth_counts);
  counts("pred_counts", pred_counts);
  for (const auto& f : flags) os << "flag=" << f << "\n";
  return os.str();
}

EvalReport EvalReport::from_text(const std::string& text) {
  EvalReport rep;
  std::istringstream is(text);
  std::string line;
  auto parse_counts = [](const std::string& v) {
    std::vector<long> out;
    std::istringstream cs(v);
    std::string tok;
    while (std::getline(cs, tok, ',')) out.push_back(std::stol(tok));
    return out;
  };
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError("report line without '=': " + line);
    const std::string key = line.substr(0, eq);
    const std::string val = line.substr(eq + 1);
    if (key == "task") rep.task = val;
    else if (key == "n") rep.n = std::stoi(val);
    else if (key == "truth_counts") rep.truth_counts = parse_counts(val);
    else if (key == "pred_counts") rep.pred_counts = parse_counts(val);
    else if (key == "flag") rep.flags.push_back(val);
    else rep.metrics.emplace_back(key, std::stod(val));
  }
  return rep;
}

const std::string* Manifest::find(const std::string& key) const {
  for (const auto& [k, v] : entries) {
    if (k == key) return &v;
  }
  return nullptr;
}

double CvReport::mean_metric(const std::string& name) const {
  for (const auto& [k, v] : mean) {
    if (k == name) return v;
  }
  throw UsageError("metric '" + name + "' not present in CV aggregate");
}

std::string CvReport::to_text() const {
  std::ostringstream os;
  os << "#mvf-cv-report v1\n";
  os << "folds=" << folds.size() << "\n";
  for (std::size_t f = 0; f < folds.size(); ++f) {
    os << "[fold " << f << "]\n" << folds[f].to_text();
  }
  os << "[aggregate]\n";
  for (std::size_t i = 0; i < mean.size(); ++i) {
    os << mean[i].first << "_mean=" << format_double(mean[i].second) << "\n";
    os << stdev[i].first << "_std=" << format_double(stdev[i].second) << "\n";
  }
  os << "[manifest]\n";
  for (const auto& [k, v] : manifest.entries) os << k << "=" << v << "\n";
  os << "[end]\n";
  return os.str();
}

std::pair<ParamStore, TrainHistory> train_model(const Dataset& train_set, const Dataset& val_set,
                                                const ModelConfig& model_cfg,
                                                const TrainConfig& train_cfg) {
  model_cfg.validate();
  if (train_cfg.epochs < 1) throw ConfigError("epochs must be >= 1");
  if (train_cfg.batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (train_set.size() == 0) throw UsageError("train_model: empty training set");
  if (val_set.size() == 0) throw UsageError("train_model: empty validation set");

  const int n = static_cast<int>(train_set.size());
  std::vector<double> weights;
  if (train_cfg.class_weighting) weights = class_weights_for(train_set, model_cfg.num_classes);

  ParamStore params = build_params(model_cfg, train_cfg.seed);
  AdamState adam;
  adam.cfg.lr = train_cfg.lr;
  Rng rng(Rng::mix(train_cfg.seed, 0x7247));
  Rng dropout_rng = rng.split(0xD20);

  ParamStore best = params.deep_copy();
  TrainHistory history;
  double best_metric = -1.0;
  int since_best = 0;

  for (int epoch = 0; epoch < train_cfg.epochs; ++epoch) {
    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    rng.split(static_cast<std::uint64_t>(epoch) + 1).shuffle(order);

    double loss_sum = 0.0;
    int batches = 0;
    for (int start = 0; start < n; start += train_cfg.batch_size) {
      const int end = std::min(n, start + train_cfg.batch_size);
      const std::vector<int> batch(order.begin() + start, order.begin() + end);
      params.zero_grad();
      Tape tape;
      FwdCtx ctx;
      if (model_cfg.dropout > 0.0) ctx.dropout_rng = &dropout_rng;
      const Tensor loss = batch_loss(train_set, batch, params, model_cfg, weights, ctx);
      const double lv = loss.scalar();
      if (!std::isfinite(lv)) {
        throw StateError("training diverged (loss=" + format_double(lv) + ") at epoch " +
                         std::to_string(epoch) + " batch " + std::to_string(batches));
      }
      tape.backward(loss);
      adam_step(params, adam);
      loss_sum += lv;
      ++batches;
    }
    history.train_loss.push_back(loss_sum / std::max(1, batches));

    const EvalReport val_rep = evaluate(params, val_set, model_cfg);
    const double metric = validation_metric(val_rep);
    history.val_metric.push_back(metric);
    history.epochs_run = epoch + 1;
    if (metric > best_metric) {
      best_metric = metric;
      best = params.deep_copy();
      history.best_epoch = epoch;
      since_best = 0;
    } else if (train_cfg.patience > 0 && ++since_best >= train_cfg.patience) {
      break;
    }
  }
  return {std::move(best), std::move(history)};
}

EvalReport evaluate(const ParamStore& params, const Dataset& test_set, const ModelConfig& cfg,
                    TaskKind task) {
  if (test_set.size() == 0) throw UsageError("evaluate: empty test set");
  if (task == TaskKind::kAuto) {
    task = cfg.num_classes == 2 ? TaskKind::kBinary : TaskKind::kMulticlass;
  }

  ScoredLabels scored;
  scored.proba.reserve(test_set.size());
  scored.labels.reserve(test_set.size());
  for (std::size_t i = 0; i < test_set.size(); ++i) {
    const IrtsSample& s = test_set.at(i);
    scored.proba.push_back(predict_proba_values(s, params, cfg));
    scored.labels.push_back(s.label);
  }

  EvalReport rep;
  rep.n = static_cast<int>(test_set.size());
  rep.truth_counts.assign(static_cast<std::size_t>(cfg.num_classes), 0);
  rep.pred_counts.assign(static_cast<std::size_t>(cfg.num_classes), 0);
  for (std::size_t i = 0; i < scored.proba.size(); ++i) {
    ++rep.truth_counts[static_cast<std::size_t>(scored.labels[i])];
    const auto& p = scored.proba[i];
    const int pred = static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
    ++rep.pred_counts[static_cast<std::size_t>(pred)];
  }

  if (task == TaskKind::kBinary) {
    rep.task = "binary";
    std::vector<double> pos_scores(scored.proba.size());
    for (std::size_t i = 0; i < scored.proba.size(); ++i) pos_scores[i] = scored.proba[i][1];
    rep.metrics.emplace_back("auroc", auroc(pos_scores, scored.labels));
    rep.metrics.emplace_back("auprc", auprc(pos_scores, scored.labels));
  } else {
    rep.task = "multiclass";
    const MulticlassReport mc = multiclass_report(scored, cfg.num_classes);
    rep.metrics.emplace_back("accuracy", mc.accuracy);
    rep.metrics.emplace_back("precision", mc.precision);
    rep.metrics.emplace_back("recall", mc.recall);
    rep.metrics.emplace_back("f1", mc.f1);
    rep.flags.push_back("averaging=macro");
    if (mc.absent_classes > 0) {
      rep.flags.push_back("absent_classes=" + std::to_string(mc.absent_classes));
    }
  }
  return rep;
}

CvReport run_cv(const Dataset& ds, int k, const ModelConfig& model_cfg, const TrainConfig& train_cfg) {
  const auto folds = stratified_kfold(ds, k, train_cfg.seed);
  return run_cv_folds(ds, folds, model_cfg, train_cfg);
}

std::vector<std::pair<double, CvReport>> run_sensor_dropout_sweep(const Dataset& ds,
                                                                  std::vector<double> ratios, int k,
                                                                  const ModelConfig& model_cfg,
                                                                  const TrainConfig& train_cfg) {
  for (double r : ratios) {
    if (r < 0.0 || r > 1.0) {
      throw ParameterError("sweep ratio " + format_double(r) + " outside [0, 1]");
    }
  }
  std::sort(ratios.begin(), ratios.end());
  ratios.erase(std::unique(ratios.begin(), ratios.end()), ratios.end());
  if (ratios.empty()) throw ParameterError("sweep needs at least one ratio");

  const auto folds = stratified_kfold(ds, k, train_cfg.seed);
  const std::uint64_t corruption_seed = Rng::mix(train_cfg.seed, 0x5EED);

  std::vector<TrainedFold> trained;
  trained.reserve(folds.size());
  for (std::size_t f = 0; f < folds.size(); ++f) {
    trained.push_back(train_fold(ds, folds[f], model_cfg, train_cfg, static_cast<int>(f)));
  }

  std::vector<std::pair<double, CvReport>> out;
  for (double ratio : ratios) {
    const CorruptionSpec spec{ratio, corruption_seed};
    CvReport report;
    for (auto& tf : trained) {
      const Dataset corrupted = leave_random_sensor_out(tf.test, spec);
      report.folds.push_back(evaluate(tf.params, corrupted, model_cfg));
    }
    aggregate(report);
    report.manifest = base_manifest(ds, k, model_cfg, train_cfg, folds);
    report.manifest.put("corruption.ratio", format_double(ratio));
    report.manifest.put("corruption.seed", std::to_string(corruption_seed));
    const auto dropped = dropped_sensors(ds.sensors, spec);
    std::string joined;
    for (std::size_t i = 0; i < dropped.size(); ++i) {
      joined += (i ? "," : "") + std::to_string(dropped[i]);
    }
    report.manifest.put("corruption.dropped", joined);
    out.emplace_back(ratio, std::move(report));
  }
  return out;
}

AblationCell ablation_cell(const std::string& label, const ModelConfig& base) {
  ModelConfig cfg = base;
  auto only = [&cfg](bool tc, bool time, bool sensor) {
    cfg.variant = Variant::kV4;
    cfg.switches = {tc, time, sensor, true};
  };
  if (label == "v1") cfg.variant = Variant::kV1, cfg.switches = {true, true, true, true};
  else if (label == "v2" || label == "irmask") cfg.variant = Variant::kV2, cfg.switches = {true, true, true, true};
  else if (label == "v3") cfg.variant = Variant::kV3, cfg.switches = {true, true, true, true};
  else if (label == "v4" || label == "full") cfg.variant = Variant::kV4, cfg.switches = {true, true, true, true};
  else if (label == "tc") only(true, false, false);
  else if (label == "time") only(false, true, false);
  else if (label == "sensor") only(false, false, true);
  else if (label == "tc-time") only(true, true, false);
  else if (label == "tc-sensor") only(true, false, true);
  else if (label == "time-sensor") only(false, true, true);
  else throw ParameterError("unknown ablation label '" + label + "'");
  return {label, cfg};
}

std::vector<std::pair<std::string, CvReport>> run_variant_ablation(const Dataset& ds, int k,
                                                                   const std::vector<AblationCell>& cells,
                                                                   const TrainConfig& train_cfg) {
  if (cells.empty()) throw UsageError("ablation needs at least one configuration");
  const auto folds = stratified_kfold(ds, k, train_cfg.seed);  // shared across cells
  std::vector<std::pair<std::string, CvReport>> out;
  out.reserve(cells.size());
  for (const auto& cell : cells) {
    CvReport rep = run_cv_folds(ds, folds, cell.cfg, train_cfg);
    rep.manifest.put("ablation.label", cell.label);
    out.emplace_back(cell.label, std::move(rep));
  }
  return out;
}

// ---- emission ----

namespace {

std::vector<std::string> metric_names(const CvReport& rep) {
  std::vector<std::string> names;
  for (const auto& [k, v] : rep.mean) {
    (void)v;
    names.push_back(k);
  }
  return names;
}

}  // namespace

std::string ablation_csv(const std::vector<std::pair<std::string, CvReport>>& rows) {
  if (rows.empty()) return "";
  const auto names = metric_names(rows.front().second);
  std::ostringstream os;
  os << "config,fold";
  for (const auto& m : names) os << "," << m;
  os << "\n";
  for (const auto& [label, rep] : rows) {
    for (std::size_t f = 0; f < rep.folds.size(); ++f) {
      os << label << "," << f;
      for (const auto& m : names) os << "," << format_double(rep.folds[f].metric(m));
      os << "\n";
    }
  }
  return os.str();
}

std::string ablation_table(const std::vector<std::pair<std::string, CvReport>>& rows) {
  if (rows.empty()) return "";
  const auto names = metric_names(rows.front().second);
  std::ostringstream os;
  char buf[64];
  os << "config      ";
  for (const auto& m : names) {
    std::snprintf(buf, sizeof buf, " %20s", (m + " (mean+-std)").c_str());
    os << buf;
  }
  os << "\n";
  for (const auto& [label, rep] : rows) {
    std::snprintf(buf, sizeof buf, "%-12s", label.c_str());
    os << buf;
    for (std::size_t i = 0; i < rep.mean.size(); ++i) {
      std::snprintf(buf, sizeof buf, "    %8.4f +- %6.4f", rep.mean[i].second, rep.stdev[i].second);
      os << buf;
    }
    os << "\n";
  }
  return os.str();
}

std::string sweep_csv(const std::vector<std::pair<double, CvReport>>& rows) {
  if (rows.empty()) return "";
  const auto names = metric_names(rows.front().second);
  std::ostringstream os;
  os << "ratio";
  for (const auto& m : names) os << "," << m << "_mean," << m << "_std";
  os << ",dropped_sensors\n";
  for (const auto& [ratio, rep] : rows) {
    os << format_double(ratio);
    for (std::size_t i = 0; i < rep.mean.size(); ++i) {
      os << "," << format_double(rep.mean[i].second) << "," << format_double(rep.stdev[i].second);
    }
    const std::string* dropped = rep.manifest.find("corruption.dropped");
    os << "," << (dropped != nullptr ? ("\"" + *dropped + "\"") : "");
    os << "\n";
  }
  return os.str();
}

std::string sweep_folds_csv(const std::vector<std::pair<double, CvReport>>& rows) {
  if (rows.empty()) return "";
  const auto names = metric_names(rows.front().second);
  std::ostringstream os;
  os << "ratio,fold";
  for (const auto& m : names) os << "," << m;
  os << "\n";
  for (const auto& [ratio, rep] : rows) {
    for (std::size_t f = 0; f < rep.folds.size(); ++f) {
      os << format_double(ratio) << "," << f;
      for (const auto& m : names) os << "," << format_double(rep.folds[f].metric(m));
      os << "\n";
    }
  }
  return os.str();
}

}  // namespace mvf
