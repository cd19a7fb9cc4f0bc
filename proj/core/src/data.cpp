#include "mvf/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

namespace mvf {

namespace {

constexpr int kMaxTimeIndex = 1000000;

[[noreturn]] void parse_fail(const std::string& path, std::size_t line_no, const std::string& what) {
  throw ParseError(path + ":" + std::to_string(line_no) + ": " + what);
}

std::uint64_t fnv1a(std::uint64_t h, const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001B3ull;
  }
  return h;
}

std::uint64_t fnv1a_u64(std::uint64_t h, std::uint64_t v) { return fnv1a(h, &v, sizeof v); }

}  // namespace

double Dataset::missing_ratio() const {
  std::uint64_t observed = 0, total = 0;
  for (const auto& s : samples) {
    total += s.mask.size();
    for (auto m : s.mask) observed += m;
  }
  return total == 0 ? 0.0 : 1.0 - static_cast<double>(observed) / static_cast<double>(total);
}

std::uint64_t Dataset::fingerprint() const {
  std::uint64_t h = 0xCBF29CE484222325ull;
  h = fnv1a_u64(h, static_cast<std::uint64_t>(samples.size()));
  h = fnv1a_u64(h, static_cast<std::uint64_t>(length));
  h = fnv1a_u64(h, static_cast<std::uint64_t>(sensors));
  h = fnv1a_u64(h, static_cast<std::uint64_t>(num_classes));
  for (const auto& s : samples) {
    h = fnv1a_u64(h, static_cast<std::uint64_t>(s.label));
    h = fnv1a(h, s.mask.data(), s.mask.size());
    h = fnv1a(h, s.values.data(), s.values.size() * sizeof(double));
  }
  return h;
}

Dataset load_triplets(const std::string& path, LoadReport* report) {
  std::ifstream in(path);
  if (!in) {
    throw ParseError("cannot open " + path);
  }
  std::string line;
  std::size_t line_no = 0;

  if (!std::getline(in, line)) parse_fail(path, 1, "empty file");
  ++line_no;
  int n_sensors = -1, n_classes = -1;
  {
    std::istringstream hs(line);
    std::string tag, ver, kv;
    hs >> tag >> ver;
    if (tag != "#irts" || ver != "v1") parse_fail(path, line_no, "expected header '#irts v1 sensors=<n> classes=<c>'");
    while (hs >> kv) {
      if (kv.rfind("sensors=", 0) == 0) {
        n_sensors = std::atoi(kv.c_str() + 8);
      } else if (kv.rfind("classes=", 0) == 0) {
        n_classes = std::atoi(kv.c_str() + 8);
      } else {
        parse_fail(path, line_no, "unknown header field '" + kv + "'");
      }
    }
    if (n_sensors < 1 || n_classes < 1) parse_fail(path, line_no, "header must declare sensors >= 1 and classes >= 1");
  }

  struct Raw {
    int label = -1;
    std::size_t label_line = 0;
    std::map<std::pair<int, int>, double> cells;  // (t, sensor) -> value
  };
  std::vector<std::string> order;
  std::map<std::string, Raw> raws;
  std::size_t duplicates = 0;
  int max_t = -1;

  auto raw_of = [&](const std::string& id) -> Raw& {
    auto it = raws.find(id);
    if (it == raws.end()) {
      order.push_back(id);
      it = raws.emplace(id, Raw{}).first;
    }
    return it->second;
  };

  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string kind;
    ls >> kind;
    if (kind == "L") {
      std::string id;
      int cls = -1;
      if (!(ls >> id >> cls)) parse_fail(path, line_no, "malformed label line");
      if (cls < 0 || cls >= n_classes) parse_fail(path, line_no, "class " + std::to_string(cls) + " out of range");
      Raw& r = raw_of(id);
      if (r.label >= 0) parse_fail(path, line_no, "duplicate label for sample '" + id + "' (first at line " + std::to_string(r.label_line) + ")");
      r.label = cls;
      r.label_line = line_no;
    } else if (kind == "O") {
      std::string id;
      int t = -1, s = -1;
      double v = 0.0;
      if (!(ls >> id >> t >> s >> v)) parse_fail(path, line_no, "malformed observation line");
      if (t < 0 || t > kMaxTimeIndex) parse_fail(path, line_no, "t_index " + std::to_string(t) + " out of range");
      if (s < 0 || s >= n_sensors) parse_fail(path, line_no, "unknown sensor id " + std::to_string(s));
      if (!std::isfinite(v)) parse_fail(path, line_no, "non-finite value");
      Raw& r = raw_of(id);
      auto [it, inserted] = r.cells.emplace(std::make_pair(t, s), v);
      if (!inserted) {
        it->second = v;  // last wins
        ++duplicates;
      }
      max_t = std::max(max_t, t);
    } else {
      parse_fail(path, line_no, "unknown record kind '" + kind + "'");
    }
  }

  for (const auto& id : order) {
    if (raws[id].label < 0) {
      throw ParseError(path + ": sample '" + id + "' has observations but no label line");
    }
  }

  Dataset ds;
  ds.sensors = n_sensors;
  ds.num_classes = n_classes;
  ds.length = std::max(1, max_t + 1);
  ds.samples.reserve(order.size());
  for (const auto& id : order) {
    const Raw& r = raws[id];
    IrtsSample smp;
    smp.length = ds.length;
    smp.sensors = n_sensors;
    smp.values.assign(static_cast<std::size_t>(ds.length) * n_sensors, 0.0);
    smp.mask.assign(static_cast<std::size_t>(ds.length) * n_sensors, 0);
    smp.label = r.label;
    for (const auto& [cell, v] : r.cells) {
      const std::size_t idx = static_cast<std::size_t>(cell.first) * n_sensors + cell.second;
      smp.values[idx] = v;
      smp.mask[idx] = 1;
    }
    ds.samples.push_back(std::move(smp));
  }
  if (report != nullptr) report->duplicate_cells = duplicates;
  return ds;
}

void save_triplets(const Dataset& ds, const std::string& path) {
  std::ofstream out(path, std::ios::binary);  // binary: LF line endings everywhere
  if (!out) {
    throw ParseError("cannot write " + path);
  }
  char buf[64];
  out << "#irts v1 sensors=" << ds.sensors << " classes=" << ds.num_classes << "\n";
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    out << "L s" << i << " " << ds.samples[i].label << "\n";
  }
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    const auto& s = ds.samples[i];
    for (int t = 0; t < s.length; ++t) {
      for (int j = 0; j < s.sensors; ++j) {
        if (!s.observed(t, j)) continue;
        std::snprintf(buf, sizeof buf, "%.17g", s.value_at(t, j));
        out << "O s" << i << " " << t << " " << j << " " << buf << "\n";
      }
    }
  }
}

std::pair<Tensor, Tensor> build_masks(const IrtsSample& sample) {
  const int len = sample.length, ns = sample.sensors;
  std::vector<double> mt(static_cast<std::size_t>(len) * ns);
  std::vector<double> ms(static_cast<std::size_t>(len) * ns);
  for (int t = 0; t < len; ++t) {
    for (int s = 0; s < ns; ++s) {
      const double v = sample.observed(t, s) ? 1.0 : 0.0;
      mt[static_cast<std::size_t>(t) * ns + s] = v;
      ms[static_cast<std::size_t>(s) * len + t] = v;
    }
  }
  return {Tensor::from({len, ns}, std::move(mt)), Tensor::from({ns, len}, std::move(ms))};
}

NormStats compute_norm_stats(const Dataset& ds, const std::vector<int>& indices) {
  NormStats st;
  st.mean.assign(static_cast<std::size_t>(ds.sensors), 0.0);
  st.stdev.assign(static_cast<std::size_t>(ds.sensors), 0.0);
  st.observed.assign(static_cast<std::size_t>(ds.sensors), 0);
  std::vector<double> sum(static_cast<std::size_t>(ds.sensors), 0.0);
  std::vector<double> sumsq(static_cast<std::size_t>(ds.sensors), 0.0);
  for (int idx : indices) {
    const auto& smp = ds.samples.at(static_cast<std::size_t>(idx));
    for (int t = 0; t < smp.length; ++t) {
      for (int s = 0; s < smp.sensors; ++s) {
        if (!smp.observed(t, s)) continue;
        const double v = smp.value_at(t, s);
        sum[static_cast<std::size_t>(s)] += v;
        sumsq[static_cast<std::size_t>(s)] += v * v;
        ++st.observed[static_cast<std::size_t>(s)];
      }
    }
  }
  for (int s = 0; s < ds.sensors; ++s) {
    const auto si = static_cast<std::size_t>(s);
    if (st.observed[si] == 0) {
      ++st.zero_obs_sensors;
      continue;
    }
    const double n = static_cast<double>(st.observed[si]);
    st.mean[si] = sum[si] / n;
    const double var = std::max(0.0, sumsq[si] / n - st.mean[si] * st.mean[si]);
    st.stdev[si] = std::sqrt(var);
    if (st.stdev[si] == 0.0) ++st.zero_var_sensors;
  }
  return st;
}

Dataset apply_norm_stats(const Dataset& ds, const NormStats& stats) {
  if (static_cast<int>(stats.mean.size()) != ds.sensors) {
    throw DimensionError("apply_norm_stats: stats cover " + std::to_string(stats.mean.size()) +
                         " sensors, dataset has " + std::to_string(ds.sensors));
  }
  Dataset out = ds;
  out.access_count = 0;
  for (auto& smp : out.samples) {
    for (int t = 0; t < smp.length; ++t) {
      for (int s = 0; s < smp.sensors; ++s) {
        const auto si = static_cast<std::size_t>(s);
        const std::size_t idx = static_cast<std::size_t>(t) * smp.sensors + si;
        if (smp.mask[idx] == 0) {
          smp.values[idx] = 0.0;  // missing stays at the post-normalization mean
          continue;
        }
        if (stats.observed[si] == 0) continue;  // untouched, counted in stats
        const double centered = smp.values[idx] - stats.mean[si];
        smp.values[idx] = stats.stdev[si] > 0.0 ? centered / stats.stdev[si] : centered;
      }
    }
  }
  out.stats = stats;
  return out;
}

Dataset normalize(const Dataset& ds) {
  std::vector<int> all(ds.samples.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int>(i);
  return apply_norm_stats(ds, compute_norm_stats(ds, all));
}

std::vector<FoldSplit> stratified_kfold(const Dataset& ds, int k, std::uint64_t seed) {
  if (k < 2) {
    throw ConfigError("stratified_kfold: k must be >= 2, got " + std::to_string(k));
  }
  std::vector<std::vector<int>> by_class(static_cast<std::size_t>(ds.num_classes));
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    const int c = ds.samples[i].label;
    if (c < 0 || c >= ds.num_classes) {
      throw ConfigError("sample " + std::to_string(i) + " has label " + std::to_string(c) +
                        " outside [0, " + std::to_string(ds.num_classes) + ")");
    }
    by_class[static_cast<std::size_t>(c)].push_back(static_cast<int>(i));
  }
  Rng master(seed);
  for (int c = 0; c < ds.num_classes; ++c) {
    auto& lst = by_class[static_cast<std::size_t>(c)];
    if (static_cast<int>(lst.size()) < k) {
      throw ConfigError("class " + std::to_string(c) + " has " + std::to_string(lst.size()) +
                        " samples, fewer than k=" + std::to_string(k));
    }
    Rng r = master.split(static_cast<std::uint64_t>(c) + 101);
    r.shuffle(lst);
  }

  std::vector<FoldSplit> folds(static_cast<std::size_t>(k));
  // Per class, deal round-robin into held-out blocks, then halve each block
  // into test/val. A global toggle spreads odd remainders between the halves.
  std::vector<std::vector<std::vector<int>>> heldout(
      static_cast<std::size_t>(k), std::vector<std::vector<int>>(static_cast<std::size_t>(ds.num_classes)));
  for (int c = 0; c < ds.num_classes; ++c) {
    const auto& lst = by_class[static_cast<std::size_t>(c)];
    for (std::size_t j = 0; j < lst.size(); ++j) {
      heldout[j % static_cast<std::size_t>(k)][static_cast<std::size_t>(c)].push_back(lst[j]);
    }
  }
  bool test_first = true;
  for (int f = 0; f < k; ++f) {
    auto& fold = folds[static_cast<std::size_t>(f)];
    std::vector<char> is_held(ds.samples.size(), 0);
    for (int c = 0; c < ds.num_classes; ++c) {
      const auto& block = heldout[static_cast<std::size_t>(f)][static_cast<std::size_t>(c)];
      for (std::size_t j = 0; j < block.size(); ++j) {
        is_held[static_cast<std::size_t>(block[j])] = 1;
        const bool to_test = (j % 2 == 0) == test_first;
        (to_test ? fold.test : fold.val).push_back(block[j]);
      }
      if (block.size() % 2 == 1) test_first = !test_first;
    }
    for (std::size_t i = 0; i < ds.samples.size(); ++i) {
      if (!is_held[i]) fold.train.push_back(static_cast<int>(i));
    }
    std::sort(fold.train.begin(), fold.train.end());
    std::sort(fold.val.begin(), fold.val.end());
    std::sort(fold.test.begin(), fold.test.end());
  }
  return folds;
}

std::vector<int> dropped_sensors(int n_sensors, const CorruptionSpec& spec) {
  if (spec.drop_ratio < 0.0 || spec.drop_ratio > 1.0) {
    throw ParameterError("drop_ratio must be in [0, 1], got " + std::to_string(spec.drop_ratio));
  }
  const int n_drop = static_cast<int>(std::llround(spec.drop_ratio * n_sensors));
  Rng rng(Rng::mix(spec.seed, 0xD307));
  std::vector<int> perm = rng.permutation(n_sensors);
  perm.resize(static_cast<std::size_t>(n_drop));
  std::sort(perm.begin(), perm.end());
  return perm;
}

Dataset leave_random_sensor_out(const Dataset& ds, const CorruptionSpec& spec) {
  const std::vector<int> dropped = dropped_sensors(ds.sensors, spec);
  Dataset out = ds;
  out.access_count = 0;
  for (auto& smp : out.samples) {
    for (int s : dropped) {
      for (int t = 0; t < smp.length; ++t) {
        const std::size_t idx = static_cast<std::size_t>(t) * smp.sensors + static_cast<std::size_t>(s);
        smp.values[idx] = 0.0;
        smp.mask[idx] = 0;
      }
    }
  }
  return out;
}

const char* regime_name(Regime r) { return r == Regime::kNirts ? "nirts" : "airts"; }

Regime parse_regime(const std::string& s) {
  if (s == "nirts") return Regime::kNirts;
  if (s == "airts") return Regime::kAirts;
  throw ParameterError("unknown regime '" + s + "' (expected nirts or airts)");
}

Dataset gen_synthetic(const SyntheticSpec& spec) {
  if (spec.signal_strength <= 0.0) {
    throw ParameterError("signal_strength must be positive");
  }
  if (spec.n_samples < 1 || spec.length < 1 || spec.sensors < 1 || spec.num_classes < 2) {
    throw ParameterError("synthetic spec needs n_samples/length/sensors >= 1 and classes >= 2");
  }
  if (spec.missing_prob < 0.0 || spec.missing_prob > 1.0) {
    throw ParameterError("missing_prob must be in [0, 1]");
  }
  Dataset ds;
  ds.num_classes = spec.num_classes;
  ds.sensors = spec.sensors;
  ds.length = spec.length;
  ds.samples.reserve(static_cast<std::size_t>(spec.n_samples));

  const double base_obs = 1.0 - spec.missing_prob;
  Rng master(spec.seed);
  for (int i = 0; i < spec.n_samples; ++i) {
    const int label = i % spec.num_classes;
    Rng rng = master.split(static_cast<std::uint64_t>(i) + 1);
    IrtsSample smp;
    smp.length = spec.length;
    smp.sensors = spec.sensors;
    smp.label = label;
    smp.values.assign(static_cast<std::size_t>(spec.length) * spec.sensors, 0.0);
    smp.mask.assign(static_cast<std::size_t>(spec.length) * spec.sensors, 0);
    for (int t = 0; t < spec.length; ++t) {
      for (int s = 0; s < spec.sensors; ++s) {
        double p_obs = base_obs;
        double mu = 0.0;
        if (spec.regime == Regime::kNirts) {
          // the class picks which sensors sample densely; values carry no signal
          p_obs = std::clamp(base_obs + (s % spec.num_classes == label ? spec.signal_strength
                                                                       : -spec.signal_strength),
                             0.0, 1.0);
        } else {
          // uniform missingness; the class shifts observed means
          mu = spec.signal_strength *
               (2.0 * label - (spec.num_classes - 1)) / std::max(1, spec.num_classes - 1);
        }
        if (rng.bernoulli(p_obs)) {
          const std::size_t idx = static_cast<std::size_t>(t) * spec.sensors + static_cast<std::size_t>(s);
          smp.mask[idx] = 1;
          smp.values[idx] = mu + rng.normal();
        }
      }
    }
    ds.samples.push_back(std::move(smp));
  }
  return ds;
}

Dataset subset(const Dataset& ds, const std::vector<int>& indices) {
  Dataset out;
  out.num_classes = ds.num_classes;
  out.sensors = ds.sensors;
  out.length = ds.length;
  out.sensor_names = ds.sensor_names;
  out.stats = ds.stats;
  out.samples.reserve(indices.size());
  for (int i : indices) out.samples.push_back(ds.samples.at(static_cast<std::size_t>(i)));
  return out;
}

Dataset pad_truncate(const Dataset& ds, int new_length) {
  if (new_length < 1) {
    throw ParameterError("pad_truncate: length must be >= 1");
  }
  Dataset out = ds;
  out.access_count = 0;
  out.length = new_length;
  for (auto& smp : out.samples) {
    IrtsSample next;
    next.length = new_length;
    next.sensors = smp.sensors;
    next.label = smp.label;
    next.values.assign(static_cast<std::size_t>(new_length) * smp.sensors, 0.0);
    next.mask.assign(static_cast<std::size_t>(new_length) * smp.sensors, 0);
    const int copy_len = std::min(new_length, smp.length);
    const std::size_t n = static_cast<std::size_t>(copy_len) * smp.sensors;
    std::copy(smp.values.begin(), smp.values.begin() + static_cast<std::ptrdiff_t>(n), next.values.begin());
    std::copy(smp.mask.begin(), smp.mask.begin() + static_cast<std::ptrdiff_t>(n), next.mask.begin());
    smp = std::move(next);
  }
  return out;
}

}  // namespace mvf
