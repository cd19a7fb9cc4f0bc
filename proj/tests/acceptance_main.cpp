// Acceptance suite. Each criterion prints one PASS/FAIL line (SKIP only for
// the optional real-data smoke). Exit 0 iff nothing failed.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "mvf/metrics.hpp"
#include "mvf/model.hpp"
#include "mvf/train.hpp"

using namespace mvf;
namespace fs = std::filesystem;

namespace {

int g_failed = 0;

void report(int number, const char* name, int outcome /*0 pass, 1 fail, 2 skip*/,
            const std::string& detail, double seconds) {
  const char* tag = outcome == 0 ? "PASS" : outcome == 1 ? "FAIL" : "SKIP";
  std::printf("[%s] %2d. %-28s %s [%.1fs]\n", tag, number, name, detail.c_str(), seconds);
  std::fflush(stdout);
  if (outcome == 1) ++g_failed;
}

void criterion(int number, const char* name,
               const std::function<std::pair<int, std::string>()>& body) {
  const auto t0 = std::chrono::steady_clock::now();
  int outcome = 1;
  std::string detail;
  try {
    std::tie(outcome, detail) = body();
  } catch (const std::exception& e) {
    outcome = 1;
    detail = std::string("exception: ") + e.what();
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  report(number, name, outcome, detail, secs);
}

std::string fmt(const char* f, ...) {
  char buf[512];
  va_list ap;
  va_start(ap, f);
  std::vsnprintf(buf, sizeof buf, f, ap);
  va_end(ap);
  return buf;
}

SyntheticSpec nirts_spec() {
  SyntheticSpec s;
  s.regime = Regime::kNirts;
  s.n_samples = 500;
  s.length = 8;
  s.sensors = 4;
  s.num_classes = 2;
  s.missing_prob = 0.5;
  s.signal_strength = 0.4;
  s.seed = 424242;
  return s;
}

SyntheticSpec airts_spec() {
  SyntheticSpec s = nirts_spec();
  s.regime = Regime::kAirts;
  s.missing_prob = 0.6;
  s.signal_strength = 1.0;
  s.seed = 424243;
  return s;
}

TrainConfig protocol_train_cfg() {
  TrainConfig t;
  t.epochs = 50;
  t.batch_size = 32;
  t.lr = 3e-3;
  t.patience = 10;
  t.seed = 20240;
  return t;
}

// Criteria 6-8 share two paired-fold ablation runs (one per regime).
struct AblationResults {
  double nirts_v1 = -1, nirts_v2 = -1, nirts_v4 = -1;
  double airts_v1 = -1, airts_v2 = -1, airts_v4 = -1;
  bool ready = false;
  std::string error;
};

AblationResults& shared_ablation() {
  static AblationResults results;
  static bool attempted = false;
  if (attempted) return results;
  attempted = true;
  try {
    const ModelConfig base = toy_model_config();
    const std::vector<AblationCell> cells = {ablation_cell("v1", base), ablation_cell("v2", base),
                                             ablation_cell("v4", base)};
    const TrainConfig tcfg = protocol_train_cfg();

    const auto nirts = run_variant_ablation(gen_synthetic(nirts_spec()), 2, cells, tcfg);
    const auto airts = run_variant_ablation(gen_synthetic(airts_spec()), 2, cells, tcfg);
    for (const auto& [label, rep] : nirts) {
      if (label == "v1") results.nirts_v1 = rep.mean_metric("auroc");
      if (label == "v2") results.nirts_v2 = rep.mean_metric("auroc");
      if (label == "v4") results.nirts_v4 = rep.mean_metric("auroc");
    }
    for (const auto& [label, rep] : airts) {
      if (label == "v1") results.airts_v1 = rep.mean_metric("auroc");
      if (label == "v2") results.airts_v2 = rep.mean_metric("auroc");
      if (label == "v4") results.airts_v4 = rep.mean_metric("auroc");
    }
    // paired design across cells: identical fold hashes
    for (int f = 0; f < 2; ++f) {
      const std::string key = "fold." + std::to_string(f) + ".test_hash";
      const std::string first = *nirts[0].second.manifest.find(key);
      for (const auto& [label, rep] : nirts) {
        if (*rep.manifest.find(key) != first) throw StateError("fold pairing broken across cells");
      }
    }
    results.ready = true;
  } catch (const std::exception& e) {
    results.error = e.what();
  }
  return results;
}

// O(n^2) pairwise AUROC oracle.
double auroc_pairwise(const std::vector<double>& s, const std::vector<int>& y) {
  double wins = 0.0;
  long pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (y[i] != 1) continue;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[j] != 0) continue;
      ++pairs;
      wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
    }
  }
  return wins / static_cast<double>(pairs);
}

// Threshold-enumeration AUPRC oracle.
double auprc_thresholds(const std::vector<double>& s, const std::vector<int>& y) {
  std::set<double, std::greater<>> thresholds(s.begin(), s.end());
  long n_pos = 0;
  for (int l : y) n_pos += l;
  double ap = 0.0, r_prev = 0.0;
  for (double t : thresholds) {
    long tp = 0, fp = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (s[i] >= t) (y[i] == 1 ? tp : fp)++;
    }
    const double r = static_cast<double>(tp) / static_cast<double>(n_pos);
    const double p = static_cast<double>(tp) / static_cast<double>(tp + fp);
    ap += (r - r_prev) * p;
    r_prev = r;
  }
  return ap;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(MVF_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

int main() {
  std::printf("acceptance suite (toy config: L=8 N_s=4 E=16 heads=4 K=2 W=3 dilations 1,2)\n");

  criterion(1, "gradient oracle", []() -> std::pair<int, std::string> {
    const auto t0 = std::chrono::steady_clock::now();
    const std::vector<std::string> rows = {"v1", "v2", "v3", "v4", "tc", "time", "sensor",
                                           "tc-time", "tc-sensor", "time-sensor", "full", "irmask"};
    double worst = 0.0;
    std::string worst_row;
    for (const auto& row : rows) {
      ModelConfig cfg = toy_model_config();
      if (row[0] == 'v') cfg.variant = parse_variant(row);
      else cfg = ablation_cell(row, cfg).cfg;
      const GradCheckResult r = check_model_gradients(cfg, 17);
      if (r.max_rel_err > worst) {
        worst = r.max_rel_err;
        worst_row = row + "/" + r.worst_param;
      }
      if (!r.passed(1e-4)) {
        return {1, fmt("%s: max rel err %.3e >= 1e-4 at %s", row.c_str(), r.max_rel_err,
                       r.worst_param.c_str())};
      }
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (secs >= 300.0) return {1, fmt("correct but too slow: %.0fs >= 300s", secs)};
    return {0, fmt("12 configurations, worst rel err %.3e (%s)", worst, worst_row.c_str())};
  });

  criterion(2, "fusion shape law", []() -> std::pair<int, std::string> {
    const Dataset ds = gen_synthetic(nirts_spec());
    for (int bits = 1; bits < 8; ++bits) {
      ModelConfig cfg = toy_model_config();
      cfg.variant = Variant::kV4;
      cfg.switches.tc = (bits & 1) != 0;
      cfg.switches.time = (bits & 2) != 0;
      cfg.switches.sensor = (bits & 4) != 0;
      const int expect = (cfg.switches.tc ? cfg.length : 0) + (cfg.switches.time ? cfg.length : 0) +
                         (cfg.switches.sensor ? cfg.sensors : 0);
      if (fused_token_count(cfg) != expect) return {1, fmt("combination %d: law violated", bits)};
      const ParamStore params = build_params(cfg, 2);
      ForwardTrace trace;
      FwdCtx ctx;
      ctx.trace = &trace;
      forward_logits(ds.samples[0], params, cfg, ctx);
      if (trace.fusion_attention[0][0].rows() != expect) {
        return {1, fmt("combination %d: fused %d tokens, expected %d", bits,
                       trace.fusion_attention[0][0].rows(), expect)};
      }
    }
    return {0, "token count = tc*L + time*L + sensor*N_s for all 7 combinations, exact"};
  });

  criterion(3, "gate-off equivalence", []() -> std::pair<int, std::string> {
    SyntheticSpec spec = nirts_spec();
    spec.n_samples = 100;
    spec.seed = 515151;
    const Dataset ds = gen_synthetic(spec);
    ModelConfig v1 = toy_model_config();
    v1.variant = Variant::kV1;
    ModelConfig v4 = toy_model_config();
    v4.variant = Variant::kV4;
    v4.gate_bias = -1e6;
    const ParamStore p1 = build_params(v1, 33);
    const ParamStore p4 = build_params(v4, 33);
    double worst = 0.0;
    for (const auto& s : ds.samples) {
      const Tensor a = forward_logits(s, p1, v1);
      const Tensor b = forward_logits(s, p4, v4);
      for (int j = 0; j < 2; ++j) worst = std::max(worst, std::fabs(a.at(0, j) - b.at(0, j)));
    }
    if (worst >= 1e-6) return {1, fmt("max |v4 - v1| logit gap %.3e >= 1e-6", worst)};
    return {0, fmt("100 samples, max logit gap %.3e < 1e-6", worst)};
  });

  criterion(4, "mask purity of v2", []() -> std::pair<int, std::string> {
    SyntheticSpec spec = nirts_spec();
    spec.n_samples = 25;
    spec.seed = 626262;
    const Dataset ds = gen_synthetic(spec);
    ModelConfig cfg = toy_model_config();
    cfg.variant = Variant::kV2;
    const ParamStore params = build_params(cfg, 44);
    Rng rng(777);
    int trials = 0;
    for (const auto& base_sample : ds.samples) {
      const std::vector<double> base = forward_logits(base_sample, params, cfg).values();
      for (int t = 0; t < 4; ++t) {
        IrtsSample s = base_sample;
        for (std::size_t c = 0; c < s.values.size(); ++c) {
          if (s.mask[c] != 0) s.values[c] = rng.uniform(-100.0, 100.0);
        }
        if (forward_logits(s, params, cfg).values() != base) {
          return {1, "logits changed under a value perturbation with fixed masks"};
        }
        ++trials;
      }
    }
    return {0, fmt("%d random perturbations, logits bit-identical", trials)};
  });

  criterion(5, "parameter sharing", []() -> std::pair<int, std::string> {
    ModelConfig v1 = toy_model_config();
    v1.variant = Variant::kV1;
    ModelConfig v4 = toy_model_config();
    v4.variant = Variant::kV4;
    const std::size_t c1 = build_params(v1, 5).scalar_count();
    const std::size_t c4 = build_params(v4, 5).scalar_count();
    if (c1 != c4) return {1, fmt("v1 has %zu trainable scalars, v4 has %zu", c1, c4)};
    return {0, fmt("v4 trainable parameter count equals v1's exactly (%zu scalars)", c4)};
  });

  criterion(6, "synthetic NIRTS separability", []() -> std::pair<int, std::string> {
    const auto t0 = std::chrono::steady_clock::now();
    const AblationResults& r = shared_ablation();
    if (!r.ready) return {1, "ablation runs failed: " + r.error};
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (secs >= 600.0) return {1, fmt("too slow: %.0fs >= 600s", secs)};
    if (r.nirts_v2 < 0.9) return {1, fmt("v2 on NIRTS: AUROC %.3f < 0.9", r.nirts_v2)};
    return {0, fmt("v2 on NIRTS: test AUROC %.3f >= 0.9", r.nirts_v2)};
  });

  criterion(7, "synthetic AIRTS null", []() -> std::pair<int, std::string> {
    const AblationResults& r = shared_ablation();
    if (!r.ready) return {1, "ablation runs failed: " + r.error};
    if (r.airts_v2 < 0.35 || r.airts_v2 > 0.65) {
      return {1, fmt("v2 on AIRTS: AUROC %.3f outside [0.35, 0.65]", r.airts_v2)};
    }
    if (r.airts_v1 < 0.9) return {1, fmt("v1 on AIRTS: AUROC %.3f < 0.9", r.airts_v1)};
    return {0, fmt("v2 on AIRTS %.3f in [0.35,0.65]; v1 reaches %.3f >= 0.9", r.airts_v2, r.airts_v1)};
  });

  criterion(8, "v4 generalizes to both regimes", []() -> std::pair<int, std::string> {
    const AblationResults& r = shared_ablation();
    if (!r.ready) return {1, "ablation runs failed: " + r.error};
    if (r.nirts_v4 < 0.85 || r.airts_v4 < 0.85) {
      return {1, fmt("v4 AUROC: NIRTS %.3f, AIRTS %.3f (need both >= 0.85)", r.nirts_v4, r.airts_v4)};
    }
    return {0, fmt("v4 AUROC: NIRTS %.3f and AIRTS %.3f, both >= 0.85", r.nirts_v4, r.airts_v4)};
  });

  criterion(9, "metric oracles", []() -> std::pair<int, std::string> {
    const auto t0 = std::chrono::steady_clock::now();
    Rng rng(31415);
    double worst_auroc = 0.0, worst_auprc = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
      const int n = 5 + rng.uniform_int(96);
      std::vector<double> s(static_cast<std::size_t>(n));
      std::vector<int> y(static_cast<std::size_t>(n));
      bool has0 = false, has1 = false;
      for (int i = 0; i < n; ++i) {
        s[static_cast<std::size_t>(i)] = rng.uniform_int(12) / 12.0;  // ties on purpose
        y[static_cast<std::size_t>(i)] = rng.bernoulli(0.35) ? 1 : 0;
        (y[static_cast<std::size_t>(i)] == 1 ? has1 : has0) = true;
      }
      if (!has0 || !has1) continue;
      worst_auroc = std::max(worst_auroc, std::fabs(auroc(s, y) - auroc_pairwise(s, y)));
      worst_auprc = std::max(worst_auprc, std::fabs(auprc(s, y) - auprc_thresholds(s, y)));
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (worst_auroc >= 1e-9) return {1, fmt("AUROC vs pairwise oracle: |delta| %.2e >= 1e-9", worst_auroc)};
    if (worst_auprc >= 1e-9) return {1, fmt("AUPRC vs threshold oracle: |delta| %.2e >= 1e-9", worst_auprc)};
    if (secs >= 60.0) return {1, fmt("correct but too slow: %.1fs >= 60s", secs)};
    return {0, fmt("1000 instances each; worst |delta| %.2e (AUROC), %.2e (AUPRC)", worst_auroc,
                   worst_auprc)};
  });

  criterion(10, "sensor-dropout sanity", []() -> std::pair<int, std::string> {
    ModelConfig cfg = toy_model_config();
    cfg.variant = Variant::kV4;
    const auto rows = run_sensor_dropout_sweep(gen_synthetic(airts_spec()), {0.0, 0.5, 1.0}, 2, cfg,
                                               protocol_train_cfg());
    const double at0 = rows[0].second.mean_metric("auroc");
    const double at1 = rows[2].second.mean_metric("auroc");
    if (at1 > 0.6) return {1, fmt("AUROC at ratio 1.0 is %.3f > 0.6", at1)};
    if (at0 < at1 + 0.2) return {1, fmt("AUROC(0)=%.3f < AUROC(1)+0.2=%.3f", at0, at1 + 0.2)};
    return {0, fmt("AUROC 0.0->%.3f, 0.5->%.3f, 1.0->%.3f", at0,
                   rows[1].second.mean_metric("auroc"), at1)};
  });

  criterion(11, "rerun determinism via the cli", []() -> std::pair<int, std::string> {
    const fs::path work = fs::temp_directory_path() / "mvf_acceptance_cli";
    fs::remove_all(work);
    fs::create_directories(work);
    {
      std::ofstream cfg(work / "cfg");
      cfg << "synth.n_samples=80\ntrain.batch_size=16\ntrain.lr=0.003\n";
    }
    const std::string common = "train --synthetic nirts --variant v4 --folds 2 --epochs 3 --seed 97 "
                               "--config " + (work / "cfg").string();
    if (run_cli(common + " --out " + (work / "a").string()) != 0) return {1, "first cli run failed"};
    if (run_cli(common + " --out " + (work / "b").string()) != 0) return {1, "second cli run failed"};
    const std::string a = read_file(work / "a/report.txt");
    const std::string b = read_file(work / "b/report.txt");
    if (a.empty() || a != b) return {1, "reports differ between identical reruns"};
    return {0, fmt("two cli runs, report.txt byte-identical (%zu bytes)", a.size())};
  });

  criterion(12, "real-data smoke (optional)", []() -> std::pair<int, std::string> {
    const char* path = std::getenv("MVF_P12_TRIPLETS");
    if (path == nullptr || std::string(path).empty()) {
      return {2, "set MVF_P12_TRIPLETS to a triplet export to enable"};
    }
    const Dataset ds = load_triplets(path);
    const double mr = ds.missing_ratio();
    if (std::fabs(mr - 0.884) > 0.01) {
      return {1, fmt("missing ratio %.4f outside 0.884 +- 0.01", mr)};
    }
    ModelConfig cfg = toy_model_config();
    cfg.length = ds.length;
    cfg.sensors = ds.sensors;
    cfg.num_classes = ds.num_classes;
    TrainConfig tcfg;
    tcfg.epochs = 5;
    tcfg.batch_size = 32;
    tcfg.seed = 1;
    const CvReport rep = run_cv(ds, 2, cfg, tcfg);
    const double auroc_mean = rep.mean_metric("auroc");
    const double auprc_mean = rep.mean_metric("auprc");
    if (!(auroc_mean > 0.0 && auroc_mean < 1.0 && auprc_mean > 0.0 && auprc_mean < 1.0)) {
      return {1, fmt("metrics outside (0,1): auroc %.3f auprc %.3f", auroc_mean, auprc_mean)};
    }
    return {0, fmt("missing ratio %.4f; 2-fold 5-epoch run: auroc %.3f auprc %.3f", mr, auroc_mean,
                   auprc_mean)};
  });

  if (g_failed == 0) {
    std::printf("acceptance: all criteria passed\n");
    return 0;
  }
  std::printf("acceptance: %d criterion(s) failed\n", g_failed);
  return 1;
}
