// Command-line entry point: reproducible training, ablation, sensor-dropout
// sweeps, gradient checks and synthetic dataset generation.
//
// Exit codes: 0 success, 1 assertion/check failure, 2 usage error.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>

#include "mvf/data.hpp"
#include "mvf/model.hpp"
#include "mvf/train.hpp"

namespace fs = std::filesystem;

namespace {

constexpr const char* kArtifactVersion = "0.1.0";

struct CliArgs {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string dataset_path;
  std::string synthetic;
  std::string variant;
  std::string switches;
  std::string variants;  // ablate only
  std::optional<int> folds;
  std::optional<int> epochs;
  std::string ratios;
  std::string out_dir;
  std::string corrupt_backward;  // gradcheck fault-injection fixture
};

using KvMap = std::map<std::string, std::string>;

KvMap read_config_file(const std::string& path) {
  KvMap kv;
  std::ifstream in(path);
  if (!in) throw mvf::ConfigError("cannot open config file " + path);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw mvf::ConfigError(path + ":" + std::to_string(line_no) + ": expected key=value");
    }
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

// Flags win over config-file keys.
void apply_flag_overrides(KvMap& kv, const CliArgs& args) {
  if (args.seed) kv["seed"] = std::to_string(*args.seed);
  if (!args.variant.empty()) kv["model.variant"] = args.variant;
  if (!args.switches.empty()) kv["model.switches"] = args.switches;
  if (args.folds) kv["train.folds"] = std::to_string(*args.folds);
  if (args.epochs) kv["train.epochs"] = std::to_string(*args.epochs);
  if (!args.synthetic.empty()) kv["synth.regime"] = args.synthetic;
}

template <typename T>
T kv_get(const KvMap& kv, const std::string& key, T fallback);

template <>
int kv_get(const KvMap& kv, const std::string& key, int fallback) {
  auto it = kv.find(key);
  if (it == kv.end()) return fallback;
  try {
    return std::stoi(it->second);
  } catch (const std::exception&) {
    throw mvf::ConfigError("config key '" + key + "': cannot parse integer from '" + it->second + "'");
  }
}

template <>
double kv_get(const KvMap& kv, const std::string& key, double fallback) {
  auto it = kv.find(key);
  if (it == kv.end()) return fallback;
  try {
    return std::stod(it->second);
  } catch (const std::exception&) {
    throw mvf::ConfigError("config key '" + key + "': cannot parse number from '" + it->second + "'");
  }
}

template <>
std::string kv_get(const KvMap& kv, const std::string& key, std::string fallback) {
  auto it = kv.find(key);
  return it == kv.end() ? fallback : it->second;
}

struct Resolved {
  std::uint64_t seed = 1;
  mvf::ModelConfig model;
  mvf::TrainConfig train;
  mvf::SyntheticSpec synth;
  int folds = 5;
  int model_length_override = 0;  // pad/truncate when > 0
};

Resolved resolve(const KvMap& kv) {
  Resolved r;
  if (auto it = kv.find("seed"); it != kv.end()) {
    try {
      r.seed = std::stoull(it->second);
    } catch (const std::exception&) {
      throw mvf::ConfigError("config key 'seed': cannot parse integer from '" + it->second + "'");
    }
  }

  r.model.variant = mvf::parse_variant(kv_get<std::string>(kv, "model.variant", "v4"));
  r.model.embed_dim = kv_get<int>(kv, "model.embed_dim", 16);
  r.model.heads = kv_get<int>(kv, "model.heads", 4);
  r.model.layers = kv_get<int>(kv, "model.layers", 2);
  r.model.kernel_width = kv_get<int>(kv, "model.kernel_width", 10);
  r.model.ffn_width = kv_get<int>(kv, "model.ffn_width", 0);
  r.model.dropout = kv_get<double>(kv, "model.dropout", 0.0);
  r.model.gate_bias = kv_get<double>(kv, "model.gate_bias", 0.0);
  r.model_length_override = kv_get<int>(kv, "model.length", 0);
  if (auto it = kv.find("model.dilations"); it != kv.end()) {
    r.model.dilations.clear();
    std::istringstream ds(it->second);
    std::string tok;
    while (std::getline(ds, tok, ',')) r.model.dilations.push_back(std::stoi(tok));
  }
  if (auto it = kv.find("model.switches"); it != kv.end()) {
    r.model.switches = {false, false, false, false};
    std::istringstream ss(it->second);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
      if (tok == "tc") r.model.switches.tc = true;
      else if (tok == "time") r.model.switches.time = true;
      else if (tok == "sensor") r.model.switches.sensor = true;
      else if (tok == "irmask") r.model.switches.ir_mask = true;
      else if (tok == "full") r.model.switches = {true, true, true, true};
      else throw mvf::ConfigError("model.switches: unknown switch '" + tok + "'");
    }
  }

  r.train.epochs = kv_get<int>(kv, "train.epochs", 50);
  r.train.batch_size = kv_get<int>(kv, "train.batch_size", 32);
  r.train.lr = kv_get<double>(kv, "train.lr", 1e-3);
  r.train.class_weighting = kv_get<int>(kv, "train.class_weighting", 1) != 0;
  r.train.patience = kv_get<int>(kv, "train.patience", 10);
  r.train.seed = r.seed;
  r.folds = kv_get<int>(kv, "train.folds", 5);

  r.synth.regime = mvf::parse_regime(kv_get<std::string>(kv, "synth.regime", "nirts"));
  r.synth.n_samples = kv_get<int>(kv, "synth.n_samples", 500);
  r.synth.length = kv_get<int>(kv, "synth.length", 8);
  r.synth.sensors = kv_get<int>(kv, "synth.sensors", 4);
  r.synth.num_classes = kv_get<int>(kv, "synth.classes", 2);
  r.synth.missing_prob = kv_get<double>(kv, "synth.missing", 0.5);
  r.synth.signal_strength = kv_get<double>(kv, "synth.strength", 0.4);
  r.synth.seed = mvf::Rng::mix(r.seed, 0x5717);
  return r;
}

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y%m%d-%H%M%S", &tm);
  return buf;
}

fs::path prepare_out_dir(const CliArgs& args, std::uint64_t seed) {
  fs::path dir = args.out_dir.empty()
                     ? fs::path("runs") / (utc_timestamp() + "-" + std::to_string(seed))
                     : fs::path(args.out_dir);
  fs::create_directories(dir);
  return dir;
}

void write_file(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw mvf::Error("cannot write " + path.string());
  out << content;
}

// The manifest lands on disk before any training computation starts.
void write_run_manifest(const fs::path& dir, const std::string& command, const CliArgs& args,
                        const Resolved& r, const mvf::Dataset& ds) {
  std::ostringstream os;
  os << "#mvf-run-manifest v1\n";
  os << "command=" << command << "\n";
  os << "artifact_version=" << kArtifactVersion << "\n";
  os << "timestamp_utc=" << utc_timestamp() << "\n";
  os << "seed=" << r.seed << "\n";
  if (!args.dataset_path.empty()) {
    os << "dataset=" << args.dataset_path << "\n";
  } else {
    os << "dataset=synthetic\n";
    os << "synth.regime=" << mvf::regime_name(r.synth.regime) << "\n";
    os << "synth.n_samples=" << r.synth.n_samples << "\n";
    os << "synth.length=" << r.synth.length << "\n";
    os << "synth.sensors=" << r.synth.sensors << "\n";
    os << "synth.classes=" << r.synth.num_classes << "\n";
    os << "synth.missing=" << mvf::format_double(r.synth.missing_prob) << "\n";
    os << "synth.strength=" << mvf::format_double(r.synth.signal_strength) << "\n";
  }
  char fp[24];
  std::snprintf(fp, sizeof fp, "%016llx", static_cast<unsigned long long>(ds.fingerprint()));
  os << "dataset_fingerprint=" << fp << "\n";
  std::istringstream cfg(mvf::config_to_text(r.model));
  std::string line;
  while (std::getline(cfg, line)) os << "model." << line << "\n";
  os << "train.epochs=" << r.train.epochs << "\n";
  os << "train.batch_size=" << r.train.batch_size << "\n";
  os << "train.lr=" << mvf::format_double(r.train.lr) << "\n";
  os << "train.class_weighting=" << (r.train.class_weighting ? 1 : 0) << "\n";
  os << "train.patience=" << r.train.patience << "\n";
  os << "train.folds=" << r.folds << "\n";
  if (!args.ratios.empty()) os << "ratios=" << args.ratios << "\n";
  write_file(dir / "manifest.txt", os.str());
}

mvf::Dataset resolve_dataset(const CliArgs& args, Resolved& r) {
  mvf::Dataset ds;
  if (!args.dataset_path.empty()) {
    mvf::LoadReport rep;
    ds = mvf::load_triplets(args.dataset_path, &rep);
    if (rep.duplicate_cells > 0) {
      std::cerr << "warning: " << rep.duplicate_cells << " duplicate observation cells (last wins)\n";
    }
  } else {
    ds = mvf::gen_synthetic(r.synth);
  }
  if (r.model_length_override > 0 && r.model_length_override != ds.length) {
    ds = mvf::pad_truncate(ds, r.model_length_override);
  }
  r.model.length = ds.length;
  r.model.sensors = ds.sensors;
  r.model.num_classes = ds.num_classes;
  r.model.validate();
  return ds;
}

std::vector<double> parse_ratio_list(const std::string& csv) {
  std::vector<double> out;
  std::istringstream is(csv);
  std::string tok;
  while (std::getline(is, tok, ',')) {
    try {
      out.push_back(std::stod(tok));
    } catch (const std::exception&) {
      throw mvf::UsageError("cannot parse ratio '" + tok + "'");
    }
  }
  if (out.empty()) throw mvf::UsageError("--ratios must list at least one value");
  return out;
}

int cmd_train(const CliArgs& args) {
  KvMap kv = args.config_path.empty() ? KvMap{} : read_config_file(args.config_path);
  apply_flag_overrides(kv, args);
  Resolved r = resolve(kv);
  if (args.dataset_path.empty() && args.synthetic.empty() && kv.find("synth.regime") == kv.end()) {
    throw mvf::UsageError("train needs --dataset <path> or --synthetic nirts|airts");
  }
  mvf::Dataset ds = resolve_dataset(args, r);
  const fs::path dir = prepare_out_dir(args, r.seed);
  write_run_manifest(dir, "train", args, r, ds);

  r.train.checkpoint_dir = dir.string();
  const mvf::CvReport report = mvf::run_cv(ds, r.folds, r.model, r.train);
  write_file(dir / "report.txt", report.to_text());

  std::cout << "run directory: " << dir.string() << "\n";
  for (std::size_t i = 0; i < report.mean.size(); ++i) {
    std::printf("%-10s %.4f +- %.4f\n", report.mean[i].first.c_str(), report.mean[i].second,
                report.stdev[i].second);
  }
  return 0;
}

int cmd_ablate(const CliArgs& args) {
  KvMap kv = args.config_path.empty() ? KvMap{} : read_config_file(args.config_path);
  apply_flag_overrides(kv, args);
  kv.erase("model.switches");  // rows define their own switches
  Resolved r = resolve(kv);

  std::vector<std::string> labels;
  for (const std::string* list : {&args.variants, &args.switches}) {
    std::istringstream is(*list);
    std::string tok;
    while (std::getline(is, tok, ',')) {
      if (!tok.empty()) labels.push_back(tok);
    }
  }
  if (labels.empty()) {
    throw mvf::UsageError("ablate needs --variants and/or --switches (e.g. --variants v1,v2,v4)");
  }

  mvf::Dataset ds = resolve_dataset(args, r);
  const fs::path dir = prepare_out_dir(args, r.seed);
  write_run_manifest(dir, "ablate", args, r, ds);

  std::vector<mvf::AblationCell> cells;
  for (const auto& label : labels) cells.push_back(mvf::ablation_cell(label, r.model));
  const auto rows = mvf::run_variant_ablation(ds, r.folds, cells, r.train);

  write_file(dir / "ablation.csv", mvf::ablation_csv(rows));
  const std::string table = mvf::ablation_table(rows);
  write_file(dir / "ablation.txt", table);
  std::ostringstream reports;
  for (const auto& [label, rep] : rows) {
    reports << "### " << label << "\n" << rep.to_text() << "\n";
  }
  write_file(dir / "reports.txt", reports.str());

  std::cout << "run directory: " << dir.string() << "\n" << table;
  return 0;
}

int cmd_sweep(const CliArgs& args) {
  KvMap kv = args.config_path.empty() ? KvMap{} : read_config_file(args.config_path);
  apply_flag_overrides(kv, args);
  Resolved r = resolve(kv);
  const std::vector<double> ratios = parse_ratio_list(args.ratios.empty() ? "0,0.25,0.5" : args.ratios);

  mvf::Dataset ds = resolve_dataset(args, r);
  const fs::path dir = prepare_out_dir(args, r.seed);
  write_run_manifest(dir, "sweep", args, r, ds);

  const auto rows = mvf::run_sensor_dropout_sweep(ds, ratios, r.folds, r.model, r.train);
  write_file(dir / "sweep.csv", mvf::sweep_csv(rows));
  write_file(dir / "sweep_folds.csv", mvf::sweep_folds_csv(rows));
  std::ostringstream reports;
  for (const auto& [ratio, rep] : rows) {
    reports << "### ratio " << mvf::format_double(ratio) << "\n" << rep.to_text() << "\n";
  }
  write_file(dir / "reports.txt", reports.str());

  std::cout << "run directory: " << dir.string() << "\n";
  for (const auto& [ratio, rep] : rows) {
    std::printf("ratio %-5.2f", ratio);
    for (std::size_t i = 0; i < rep.mean.size(); ++i) {
      std::printf("  %s %.4f", rep.mean[i].first.c_str(), rep.mean[i].second);
    }
    std::printf("\n");
  }
  return 0;
}

int cmd_gradcheck(const CliArgs& args) {
  KvMap kv = args.config_path.empty() ? KvMap{} : read_config_file(args.config_path);
  apply_flag_overrides(kv, args);

  mvf::ModelConfig cfg = mvf::toy_model_config();
  if (auto it = kv.find("model.variant"); it != kv.end()) cfg.variant = mvf::parse_variant(it->second);
  if (auto it = kv.find("model.switches"); it != kv.end()) {
    const mvf::AblationCell cell = mvf::ablation_cell(it->second, cfg);
    cfg = cell.cfg;
  }
  const std::uint64_t seed = args.seed.value_or(1);

  if (!args.corrupt_backward.empty()) {
    mvf::testing::set_backward_corruption(args.corrupt_backward, 1.5);
    std::cout << "fault injection: backward rule of op '" << args.corrupt_backward << "' corrupted\n";
  }

  const mvf::GradCheckResult result = mvf::check_model_gradients(cfg, seed);
  mvf::testing::clear_backward_corruption();

  // worst relative error per parameter group (path + layer)
  std::map<std::string, double> groups;
  for (const auto& e : result.per_param) {
    const auto second_dot = e.name.find('.', e.name.find('.') + 1);
    const std::string group = second_dot == std::string::npos ? e.name : e.name.substr(0, second_dot);
    groups[group] = std::max(groups[group], e.max_rel_err);
  }
  std::printf("gradient check: variant %s, %zu parameter tensors\n", mvf::variant_name(cfg.variant),
              result.per_param.size());
  for (const auto& [group, err] : groups) {
    std::printf("  %-12s max rel err %.3e\n", group.c_str(), err);
  }
  const double tol = 1e-4;
  double worst_ad = 0.0, worst_fd = 0.0;
  for (const auto& e : result.per_param) {
    if (e.name == result.worst_param) {
      worst_ad = e.autodiff_at_worst;
      worst_fd = e.central_diff_at_worst;
    }
  }
  std::printf("worst: %s (%.3e, autodiff %.6e vs central diff %.6e)\n", result.worst_param.c_str(),
              result.max_rel_err, worst_ad, worst_fd);
  if (result.refined_coords > 0) {
    std::printf("re-measured %d coordinate(s) at smaller h (kink suspects)\n", result.refined_coords);
  }
  if (!result.passed(tol)) {
    std::printf("FAIL: max relative error %.3e >= %.0e (parameter %s)\n", result.max_rel_err, tol,
                result.worst_param.c_str());
    return 1;
  }
  std::printf("PASS: max relative error %.3e < %.0e\n", result.max_rel_err, tol);
  return 0;
}

int cmd_synth(const CliArgs& args) {
  KvMap kv = args.config_path.empty() ? KvMap{} : read_config_file(args.config_path);
  apply_flag_overrides(kv, args);
  if (args.synthetic.empty() && kv.find("synth.regime") == kv.end()) {
    throw mvf::UsageError("synth needs --synthetic nirts|airts");
  }
  Resolved r = resolve(kv);
  const mvf::Dataset ds = mvf::gen_synthetic(r.synth);
  const fs::path dir = prepare_out_dir(args, r.seed);
  write_run_manifest(dir, "synth", args, r, ds);
  mvf::save_triplets(ds, (dir / "dataset.irts").string());
  char fp[24];
  std::snprintf(fp, sizeof fp, "%016llx", static_cast<unsigned long long>(ds.fingerprint()));
  std::cout << "wrote " << (dir / "dataset.irts").string() << "\n"
            << "samples=" << ds.samples.size() << " missing_ratio="
            << mvf::format_double(ds.missing_ratio()) << " fingerprint=" << fp << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multi-view transformer for irregular multivariate time series"};
  app.require_subcommand(1);
  CliArgs args;

  auto add_common = [&args](CLI::App* cmd, bool with_data) {
    cmd->add_option("--config", args.config_path, "flat key=value config file (flags win)");
    cmd->add_option("--seed", args.seed, "master seed; all randomness derives from it");
    cmd->add_option("--out", args.out_dir, "run directory (default runs/<timestamp>-<seed>)");
    if (with_data) {
      cmd->add_option("--dataset", args.dataset_path, "triplet-format dataset path");
      cmd->add_option("--synthetic", args.synthetic, "generate a synthetic dataset")
          ->check(CLI::IsMember({"nirts", "airts"}));
    }
  };

  CLI::App* train = app.add_subcommand("train", "cross-validated training run");
  add_common(train, true);
  train->add_option("--variant", args.variant, "v1|v2|v3|v4");
  train->add_option("--switches", args.switches, "enabled paths, e.g. tc,time,sensor,irmask");
  train->add_option("--folds", args.folds, "cross-validation folds");
  train->add_option("--epochs", args.epochs, "training epochs per fold");

  CLI::App* ablate = app.add_subcommand("ablate", "paired-fold variant/component comparison");
  add_common(ablate, true);
  ablate->add_option("--variants", args.variants, "comma list from v1,v2,v3,v4");
  ablate->add_option("--switches", args.switches,
                     "comma list from tc,time,sensor,tc-time,tc-sensor,time-sensor,irmask,full");
  ablate->add_option("--folds", args.folds, "cross-validation folds");
  ablate->add_option("--epochs", args.epochs, "training epochs per fold");

  CLI::App* sweep = app.add_subcommand("sweep", "leave-random-sensor-out evaluation sweep");
  add_common(sweep, true);
  sweep->add_option("--variant", args.variant, "v1|v2|v3|v4");
  sweep->add_option("--ratios", args.ratios, "comma list of drop ratios in [0,1]");
  sweep->add_option("--folds", args.folds, "cross-validation folds");
  sweep->add_option("--epochs", args.epochs, "training epochs per fold");

  CLI::App* gradcheck = app.add_subcommand("gradcheck", "autodiff vs central differences");
  add_common(gradcheck, false);
  gradcheck->add_option("--variant", args.variant, "v1|v2|v3|v4");
  gradcheck->add_option("--switches", args.switches, "single ablation row, e.g. tc-time");
  gradcheck->add_option("--corrupt-backward", args.corrupt_backward,
                        "fault-injection fixture: corrupt the named op's backward rule");

  CLI::App* synth = app.add_subcommand("synth", "write a synthetic dataset in triplet format");
  add_common(synth, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (train->parsed()) return cmd_train(args);
    if (ablate->parsed()) return cmd_ablate(args);
    if (sweep->parsed()) return cmd_sweep(args);
    if (gradcheck->parsed()) return cmd_gradcheck(args);
    if (synth->parsed()) return cmd_synth(args);
    return 2;
  } catch (const mvf::UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const mvf::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const mvf::ParameterError& e) {
    std::cerr << "parameter error: " << e.what() << "\n";
    return 2;
  } catch (const mvf::ParseError& e) {
    std::cerr << "parse error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
