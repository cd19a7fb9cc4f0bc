#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mvf/tensor.hpp"

namespace mvf {

// One irregular series. values is L x N_s row-major with 0.0 at missing
// cells; mask is the authority on missingness (1 = observed). An observed
// reading of exactly 0.0 keeps mask = 1.
struct IrtsSample {
  int length = 0;
  int sensors = 0;
  std::vector<double> values;      // length * sensors
  std::vector<std::uint8_t> mask;  // length * sensors
  int label = 0;

  double value_at(int t, int s) const { return values[static_cast<std::size_t>(t) * sensors + s]; }
  bool observed(int t, int s) const { return mask[static_cast<std::size_t>(t) * sensors + s] != 0; }
};

// Per-sensor statistics over observed cells only.
struct NormStats {
  std::vector<double> mean;
  std::vector<double> stdev;  // 0 marks a zero-variance sensor (centered only)
  std::vector<long> observed;
  int zero_obs_sensors = 0;
  int zero_var_sensors = 0;
};

struct Dataset {
  std::vector<IrtsSample> samples;
  int num_classes = 0;
  int sensors = 0;
  int length = 0;
  std::vector<std::string> sensor_names;  // optional
  std::optional<NormStats> stats;         // set once normalized

  std::size_t size() const { return samples.size(); }

  // Counted access; run_cv asserts in debug builds that training never
  // touched the test subset through its handle.
  const IrtsSample& at(std::size_t i) const {
    ++access_count;
    return samples.at(i);
  }
  mutable std::uint64_t access_count = 0;

  double missing_ratio() const;
  std::uint64_t fingerprint() const;
};

struct LoadReport {
  std::size_t duplicate_cells = 0;
};

// Text triplet format:
//   #irts v1 sensors=<N_s> classes=<C>
//   L <sample_id> <class>
//   O <sample_id> <t_index> <sensor_index> <value>
Dataset load_triplets(const std::string& path, LoadReport* report = nullptr);
void save_triplets(const Dataset& ds, const std::string& path);

// (m_t [L x N_s], m_s [N_s x L]); the sensor mask is exactly the transpose.
std::pair<Tensor, Tensor> build_masks(const IrtsSample& sample);

NormStats compute_norm_stats(const Dataset& ds, const std::vector<int>& indices);
Dataset apply_norm_stats(const Dataset& ds, const NormStats& stats);
// Whole-dataset convenience: stats over all samples, then applied.
Dataset normalize(const Dataset& ds);

struct FoldSplit {
  std::vector<int> train;
  std::vector<int> val;
  std::vector<int> test;
};

// Class-stratified k folds; each held-out block is halved into val/test, so
// k = 5 approximates an 8:1:1 split. The held-out blocks partition the set.
std::vector<FoldSplit> stratified_kfold(const Dataset& ds, int k, std::uint64_t seed);

struct CorruptionSpec {
  double drop_ratio = 0.0;
  std::uint64_t seed = 0;
};

// The dropped set is a prefix of one seeded sensor permutation, so sets are
// nested across increasing ratios under the same seed.
std::vector<int> dropped_sensors(int n_sensors, const CorruptionSpec& spec);
// Zeroes the chosen sensors' values and masks in every sample.
Dataset leave_random_sensor_out(const Dataset& ds, const CorruptionSpec& spec);

enum class Regime { kNirts, kAirts };

const char* regime_name(Regime r);
Regime parse_regime(const std::string& s);

struct SyntheticSpec {
  Regime regime = Regime::kNirts;
  int n_samples = 500;
  int length = 8;
  int sensors = 4;
  int num_classes = 2;
  double missing_prob = 0.5;   // base probability of a missing cell
  double signal_strength = 0.4;
  std::uint64_t seed = 1;
};

// NIRTS: the class drives per-sensor observation probabilities while values
// are class-independent N(0,1). AIRTS: missingness is uniform and the class
// shifts observed value means. Labels cycle through classes.
Dataset gen_synthetic(const SyntheticSpec& spec);

Dataset subset(const Dataset& ds, const std::vector<int>& indices);
Dataset pad_truncate(const Dataset& ds, int new_length);

}  // namespace mvf
