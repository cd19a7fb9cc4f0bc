#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mvf/data.hpp"
#include "mvf/params.hpp"
#include "mvf/tensor.hpp"

namespace mvf {

// Input wiring of the three encoder paths:
//   v1: raw values only, gate off
//   v2: irregularity masks replace the values, gate off
//   v3: [values || mask] concatenated on the feature axis, gate off
//   v4: raw values plus the irregularity gate added to the final view embeddings
enum class Variant { kV1 = 1, kV2 = 2, kV3 = 3, kV4 = 4 };

const char* variant_name(Variant v);
Variant parse_variant(const std::string& s);

struct ComponentSwitches {
  bool tc = true;      // temporal-convolution path (sensors as channels)
  bool time = true;    // time-as-token path
  bool sensor = true;  // sensor-as-token path
  bool ir_mask = true; // irregularity gate (only meaningful under v4)
};

struct ModelConfig {
  int embed_dim = 16;              // E, shared across views
  int heads = 4;
  int layers = 2;                  // fusion block count K
  std::vector<int> dilations = {1, 2, 3};
  int kernel_width = 10;
  Variant variant = Variant::kV4;
  ComponentSwitches switches;
  int num_classes = 2;
  int length = 0;                  // L (time steps)
  int sensors = 0;                 // N_s
  int ffn_width = 0;               // 0 -> 2 * embed_dim
  double dropout = 0.0;
  double gate_bias = 0.0;          // added to the gate's sigmoid pre-activation

  int ffn() const { return ffn_width > 0 ? ffn_width : 2 * embed_dim; }
  void validate() const;  // throws ConfigError
};

std::string config_to_text(const ModelConfig& cfg);
ModelConfig config_from_text(const std::string& text);

// Fused token count for the enabled paths: tc*L + time*L + sensor*N_s.
int fused_token_count(const ModelConfig& cfg);
// Split sizes of the fused matrix, in fixed path order (tc, time, sensor).
std::vector<int> fused_split_sizes(const ModelConfig& cfg);

// All learnable tensors. The mask encoders own no weights: the gate reuses
// the layer-1 encoder tensors by identity, so v4 and v1 register the exact
// same parameter set. Weight init streams are keyed by parameter name.
ParamStore build_params(const ModelConfig& cfg, std::uint64_t seed);

// Optional side-channel captured during forward.
struct ForwardTrace {
  // per fusion layer, per head: row-stochastic attention over all fused tokens
  std::vector<std::vector<Tensor>> fusion_attention;
  // gate embeddings, defined when the gate is active (fixed path order)
  std::optional<Tensor> gate_tc, gate_time, gate_sensor;
  // final per-view embeddings after gate addition (fixed path order)
  std::vector<Tensor> final_views;
};

struct FwdCtx {
  Rng* dropout_rng = nullptr;   // enables dropout when set and cfg.dropout > 0
  ForwardTrace* trace = nullptr;
};

// ---- per-path building blocks ----

// Time-as-token encoder: [L x width] -> [L x E]. Layer 1 projects the raw
// width to E and adds sinusoidal positions; deeper layers expect width E.
Tensor encode_time_tokens(const Tensor& x_t, int layer, const ParamStore& params,
                          const ModelConfig& cfg, const FwdCtx& ctx = {});

// Sensor-as-token encoder: [N_s x width] -> [N_s x E]. No positional signal:
// sensors are an unordered set.
Tensor encode_sensor_tokens(const Tensor& x_s, int layer, const ParamStore& params,
                            const ModelConfig& cfg, const FwdCtx& ctx = {});

// Sensor-as-channel block: chained length-preserving dilated convolutions
// over [C x L] ending in the gated activation, transposed to [L x E].
Tensor tc_block(const Tensor& x, int layer, const ParamStore& params, const ModelConfig& cfg,
                const FwdCtx& ctx = {});

// Cross-view fusion: self-attention over the whole fused token set, residual,
// layer norm, feed-forward, residual, layer norm. Shape-preserving.
// attention_out, when given, receives one row-stochastic matrix per head.
Tensor fuse_block(const Tensor& fused, int layer, const ParamStore& params, const ModelConfig& cfg,
                  const FwdCtx& ctx = {}, std::vector<Tensor>* attention_out = nullptr);

// Gated mask embeddings from the layer-1 encoders (weight sharing by storage
// identity; disabled paths yield undefined entries). Every value is in (-1,1).
struct GateState {
  Tensor tc, time, sensor;
};
GateState irregularity_gate(const Tensor& m_t, const Tensor& m_s, const ParamStore& params,
                            const ModelConfig& cfg, const FwdCtx& ctx = {});

// Sample -> class logits [1 x num_classes].
Tensor forward_logits(const IrtsSample& sample, const ParamStore& params, const ModelConfig& cfg,
                      const FwdCtx& ctx = {});

// Softmax of a logit row; sums to 1.
Tensor predict_proba(const Tensor& logits);
std::vector<double> predict_proba_values(const IrtsSample& sample, const ParamStore& params,
                                         const ModelConfig& cfg);

// Mean cross-entropy of a batch, optionally per-sample weighted.
Tensor batch_loss(const Dataset& ds, const std::vector<int>& indices, const ParamStore& params,
                  const ModelConfig& cfg, const std::vector<double>& class_weights = {},
                  const FwdCtx& ctx = {});

// ---- checkpoint (self-describing, magic "MVF1") ----

void save_checkpoint(const std::string& path, const ModelConfig& cfg, const ParamStore& params);
std::pair<ModelConfig, ParamStore> load_checkpoint(const std::string& path);
// Fails loudly when the stored config differs from the expected one.
ParamStore load_checkpoint_expecting(const std::string& path, const ModelConfig& expected);

// ---- gradient verification ----

struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0.0;
  double autodiff_at_worst = 0.0;
  double central_diff_at_worst = 0.0;
};

struct GradCheckResult {
  std::vector<GradCheckEntry> per_param;
  double max_rel_err = 0.0;
  std::string worst_param;
  int refined_coords = 0;  // re-measured at smaller h (ReLU kink suspects)
  bool passed(double tol) const { return max_rel_err < tol; }
};

// Compares every parameter coordinate of the model against central
// differences of the batch loss on a small fixed synthetic batch.
// Coordinates where both sides are below skip_below are skipped, as are
// absolute differences below atol: at h = 1e-5 the fp64 central-difference
// oracle itself only resolves derivatives to about eps*|f|/h ~ 1e-11.
// Coordinates that disagree at the base h are re-measured at h/10 and h/100:
// a step crossing a ReLU kink distorts the oracle, not the gradient, and the
// distortion vanishes as h shrinks while a wrong backward rule stays wrong.
GradCheckResult check_model_gradients(const ModelConfig& cfg, std::uint64_t seed, double h = 1e-5,
                                      double skip_below = 1e-8, double atol = 1e-10);

// Small configuration used by the gradient-check suites: L=8, N_s=4, E=16,
// 4 heads, 2 fusion layers, kernel width 3, dilations {1,2}, 2 classes.
ModelConfig toy_model_config();

}  // namespace mvf
