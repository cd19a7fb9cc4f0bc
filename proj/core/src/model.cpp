#include "mvf/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "mvf/gradcheck.hpp"

namespace mvf {

namespace {

std::string layer_prefix(const char* path, int layer) {
  return std::string(path) + ".L" + std::to_string(layer) + ".";
}

// Sinusoidal positions, added to time tokens at layer 1 only. Sensors are an
// unordered set and get no positional signal. Cached per (length, dim).
Tensor positional_encoding(int length, int dim) {
  thread_local std::map<std::pair<int, int>, Tensor> cache;
  auto it = cache.find({length, dim});
  if (it != cache.end()) return it->second;
  std::vector<double> pe(static_cast<std::size_t>(length) * dim);
  for (int t = 0; t < length; ++t) {
    for (int j = 0; j < dim; j += 2) {
      const double rate = std::pow(10000.0, static_cast<double>(j) / dim);
      pe[static_cast<std::size_t>(t) * dim + j] = std::sin(t / rate);
      if (j + 1 < dim) pe[static_cast<std::size_t>(t) * dim + j + 1] = std::cos(t / rate);
    }
  }
  Tensor out = Tensor::from({length, dim}, std::move(pe));
  cache.emplace(std::make_pair(length, dim), out);
  return out;
}

std::vector<double> fanin_uniform(const Shape& shape, int fan_in, Rng rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
  for (double& x : v) x = rng.uniform(-bound, bound);
  return v;
}

struct ParamBuilder {
  ParamStore& store;
  std::uint64_t seed;

  void weight(const std::string& name, const Shape& shape, int fan_in) {
    store.add(name, shape, fanin_uniform(shape, fan_in, Rng(Rng::mix(seed, Rng::hash_name(name)))));
  }
  void zeros(const std::string& name, const Shape& shape) {
    store.add(name, shape, std::vector<double>(static_cast<std::size_t>(shape_numel(shape)), 0.0));
  }
  void ones(const std::string& name, const Shape& shape) {
    store.add(name, shape, std::vector<double>(static_cast<std::size_t>(shape_numel(shape)), 1.0));
  }

  void attention(const std::string& prefix, int dim) {
    for (const char* w : {"wq", "wk", "wv", "wo"}) {
      weight(prefix + "attn." + w, {dim, dim}, dim);
      zeros(prefix + "attn.b" + std::string(w + 1), {dim});
    }
  }
  void encoder_tail(const std::string& prefix, int dim, int ffn) {
    attention(prefix, dim);
    ones(prefix + "ln1.g", {dim});
    zeros(prefix + "ln1.b", {dim});
    weight(prefix + "ffn.w1", {dim, ffn}, dim);
    zeros(prefix + "ffn.b1", {ffn});
    weight(prefix + "ffn.w2", {ffn, dim}, ffn);
    zeros(prefix + "ffn.b2", {dim});
    ones(prefix + "ln2.g", {dim});
    zeros(prefix + "ln2.b", {dim});
  }
};

// Multi-head self-attention with output projection. x is [T x E].
Tensor self_attention(const Tensor& x, const std::string& prefix, const ParamStore& p,
                      const ModelConfig& cfg, const FwdCtx& ctx, std::vector<Tensor>* attn_trace) {
  const int dim = cfg.embed_dim;
  const int dk = dim / cfg.heads;
  const Tensor q = add_rowvec(matmul(x, p.get(prefix + "attn.wq")), p.get(prefix + "attn.bq"));
  const Tensor k = add_rowvec(matmul(x, p.get(prefix + "attn.wk")), p.get(prefix + "attn.bk"));
  const Tensor v = add_rowvec(matmul(x, p.get(prefix + "attn.wv")), p.get(prefix + "attn.bv"));
  std::vector<Tensor> heads;
  heads.reserve(static_cast<std::size_t>(cfg.heads));
  for (int h = 0; h < cfg.heads; ++h) {
    const Tensor qh = slice_cols(q, h * dk, dk);
    const Tensor kh = slice_cols(k, h * dk, dk);
    const Tensor vh = slice_cols(v, h * dk, dk);
    const Tensor logits = scale(matmul(qh, transpose(kh)), 1.0 / std::sqrt(static_cast<double>(dk)));
    const Tensor weights = softmax_rows(logits);
    if (attn_trace != nullptr) attn_trace->push_back(detached_copy(weights));
    heads.push_back(matmul(weights, vh));
  }
  Tensor out = add_rowvec(matmul(concat_cols(heads), p.get(prefix + "attn.wo")), p.get(prefix + "attn.bo"));
  if (ctx.dropout_rng != nullptr && cfg.dropout > 0.0) out = dropout(out, cfg.dropout, *ctx.dropout_rng);
  return out;
}

Tensor feed_forward(const Tensor& x, const std::string& prefix, const ParamStore& p,
                    const ModelConfig& cfg, const FwdCtx& ctx) {
  Tensor h = relu(add_rowvec(matmul(x, p.get(prefix + "ffn.w1")), p.get(prefix + "ffn.b1")));
  if (ctx.dropout_rng != nullptr && cfg.dropout > 0.0) h = dropout(h, cfg.dropout, *ctx.dropout_rng);
  return add_rowvec(matmul(h, p.get(prefix + "ffn.w2")), p.get(prefix + "ffn.b2"));
}

// One post-norm transformer encoder layer: attention + residual + norm,
// then feed-forward + residual + norm.
Tensor encoder_tail(const Tensor& x, const std::string& prefix, const ParamStore& p,
                    const ModelConfig& cfg, const FwdCtx& ctx, std::vector<Tensor>* attn_trace) {
  Tensor h = layer_norm(add(x, self_attention(x, prefix, p, cfg, ctx, attn_trace)),
                        p.get(prefix + "ln1.g"), p.get(prefix + "ln1.b"));
  return layer_norm(add(h, feed_forward(h, prefix, p, cfg, ctx)),
                    p.get(prefix + "ln2.g"), p.get(prefix + "ln2.b"));
}

// Token-path encoder. Layer 1 projects raw token features to E (plus the
// positional signal on the time axis); deeper layers consume E directly.
Tensor token_encoder(const Tensor& x, const char* path, int layer, const ParamStore& p,
                     const ModelConfig& cfg, const FwdCtx& ctx, bool with_positions) {
  const std::string prefix = layer_prefix(path, layer);
  Tensor h = x;
  if (layer == 1) {
    h = add_rowvec(matmul(h, p.get(prefix + "in_proj.w")), p.get(prefix + "in_proj.b"));
    if (with_positions) h = add(h, positional_encoding(h.rows(), cfg.embed_dim));
  } else if (h.cols() != cfg.embed_dim) {
    throw DimensionError(std::string(path) + " layer " + std::to_string(layer) + ": expected width " +
                         std::to_string(cfg.embed_dim) + ", got " + shape_str(h.shape()));
  }
  return encoder_tail(h, prefix, p, cfg, ctx, nullptr);
}

struct PathInputs {
  Tensor tc;      // [C x L]
  Tensor time;    // [L x *]
  Tensor sensor;  // [N_s x *]
};

PathInputs variant_inputs(const IrtsSample& sample, const ModelConfig& cfg) {
  const auto [m_t, m_s] = build_masks(sample);
  const Tensor x_t = Tensor::from({sample.length, sample.sensors}, sample.values);
  const Tensor x_s = transpose(x_t);
  PathInputs in;
  switch (cfg.variant) {
    case Variant::kV1:
    case Variant::kV4:
      in.tc = x_s;
      in.time = x_t;
      in.sensor = x_s;
      break;
    case Variant::kV2:
      in.tc = m_s;
      in.time = m_t;
      in.sensor = m_s;
      break;
    case Variant::kV3:
      in.tc = concat_rows({x_s, m_s});
      in.time = concat_cols({x_t, m_t});
      in.sensor = concat_cols({x_s, m_s});
      break;
  }
  return in;
}

}  // namespace

Tensor encode_time_tokens(const Tensor& x_t, int layer, const ParamStore& params,
                          const ModelConfig& cfg, const FwdCtx& ctx) {
  return token_encoder(x_t, "tt", layer, params, cfg, ctx, true);
}

Tensor encode_sensor_tokens(const Tensor& x_s, int layer, const ParamStore& params,
                            const ModelConfig& cfg, const FwdCtx& ctx) {
  return token_encoder(x_s, "ts", layer, params, cfg, ctx, false);
}

Tensor tc_block(const Tensor& x, int layer, const ParamStore& params, const ModelConfig& cfg,
                const FwdCtx& ctx) {
  (void)ctx;
  if (x.cols() < 1) throw DimensionError("tc_block: empty time axis");
  const std::string prefix = layer_prefix("tc", layer);
  Tensor h = x;
  for (std::size_t j = 0; j < cfg.dilations.size(); ++j) {
    const std::string conv = prefix + "conv" + std::to_string(j) + ".";
    h = add_colvec(dilated_conv1d(h, params.get(conv + "w"), cfg.dilations[j]), params.get(conv + "b"));
  }
  return transpose(gated_activation(h));
}

Tensor fuse_block(const Tensor& fused, int layer, const ParamStore& params, const ModelConfig& cfg,
                  const FwdCtx& ctx, std::vector<Tensor>* attention_out) {
  return encoder_tail(fused, layer_prefix("fuse", layer), params, cfg, ctx, attention_out);
}

GateState irregularity_gate(const Tensor& m_t, const Tensor& m_s, const ParamStore& params,
                            const ModelConfig& cfg, const FwdCtx& ctx) {
  GateState gate;
  if (cfg.switches.tc) {
    gate.tc = gated_activation(tc_block(m_s, 1, params, cfg, ctx), cfg.gate_bias);
  }
  if (cfg.switches.time) {
    // shared weights, but no positional constant: the gate encodes the mask
    // pattern itself, and an all-zero mask must gate to exactly zero
    const Tensor e_m = token_encoder(m_t, "tt", 1, params, cfg, ctx, false);
    gate.time = gated_activation(e_m, cfg.gate_bias);
  }
  if (cfg.switches.sensor) {
    gate.sensor = gated_activation(encode_sensor_tokens(m_s, 1, params, cfg, ctx), cfg.gate_bias);
  }
  return gate;
}

const char* variant_name(Variant v) {
  switch (v) {
    case Variant::kV1: return "v1";
    case Variant::kV2: return "v2";
    case Variant::kV3: return "v3";
    case Variant::kV4: return "v4";
  }
  return "?";
}

Variant parse_variant(const std::string& s) {
  if (s == "v1" || s == "V1") return Variant::kV1;
  if (s == "v2" || s == "V2") return Variant::kV2;
  if (s == "v3" || s == "V3") return Variant::kV3;
  if (s == "v4" || s == "V4") return Variant::kV4;
  throw ParameterError("unknown variant '" + s + "' (expected v1..v4)");
}

void ModelConfig::validate() const {
  if (embed_dim < 1 || heads < 1 || embed_dim % heads != 0) {
    throw ConfigError("embed_dim (" + std::to_string(embed_dim) + ") must be a positive multiple of heads (" +
                      std::to_string(heads) + ")");
  }
  if (layers < 1) throw ConfigError("layers must be >= 1");
  if (dilations.empty()) throw ConfigError("dilations must be non-empty");
  for (int d : dilations) {
    if (d < 1) throw ConfigError("dilation rates must be >= 1");
  }
  if (kernel_width < 1) throw ConfigError("kernel_width must be >= 1");
  if (!switches.tc && !switches.time && !switches.sensor) {
    throw ConfigError("at least one of the tc/time/sensor paths must be enabled");
  }
  if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
  if (length < 1 || sensors < 1) {
    throw ConfigError("length and sensors must be set from the dataset (got " + std::to_string(length) +
                      ", " + std::to_string(sensors) + ")");
  }
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must be in [0, 1)");
}

std::string config_to_text(const ModelConfig& cfg) {
  std::ostringstream os;
  os << "variant=" << variant_name(cfg.variant) << "\n";
  os << "embed_dim=" << cfg.embed_dim << "\n";
  os << "heads=" << cfg.heads << "\n";
  os << "layers=" << cfg.layers << "\n";
  os << "dilations=";
  for (std::size_t i = 0; i < cfg.dilations.size(); ++i) os << (i ? "," : "") << cfg.dilations[i];
  os << "\n";
  os << "kernel_width=" << cfg.kernel_width << "\n";
  os << "ffn_width=" << cfg.ffn() << "\n";
  os << "dropout=" << cfg.dropout << "\n";
  os << "gate_bias=" << cfg.gate_bias << "\n";
  os << "num_classes=" << cfg.num_classes << "\n";
  os << "length=" << cfg.length << "\n";
  os << "sensors=" << cfg.sensors << "\n";
  os << "switches=";
  bool first = true;
  for (auto [on, name] : {std::pair{cfg.switches.tc, "tc"}, {cfg.switches.time, "time"},
                          {cfg.switches.sensor, "sensor"}, {cfg.switches.ir_mask, "irmask"}}) {
    if (!on) continue;
    os << (first ? "" : ",") << name;
    first = false;
  }
  os << "\n";
  return os.str();
}

ModelConfig config_from_text(const std::string& text) {
  ModelConfig cfg;
  cfg.switches = {false, false, false, false};
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError("config line without '=': " + line);
    const std::string key = line.substr(0, eq);
    const std::string val = line.substr(eq + 1);
    if (key == "variant") cfg.variant = parse_variant(val);
    else if (key == "embed_dim") cfg.embed_dim = std::stoi(val);
    else if (key == "heads") cfg.heads = std::stoi(val);
    else if (key == "layers") cfg.layers = std::stoi(val);
    else if (key == "kernel_width") cfg.kernel_width = std::stoi(val);
    else if (key == "ffn_width") cfg.ffn_width = std::stoi(val);
    else if (key == "dropout") cfg.dropout = std::stod(val);
    else if (key == "gate_bias") cfg.gate_bias = std::stod(val);
    else if (key == "num_classes") cfg.num_classes = std::stoi(val);
    else if (key == "length") cfg.length = std::stoi(val);
    else if (key == "sensors") cfg.sensors = std::stoi(val);
    else if (key == "dilations") {
      cfg.dilations.clear();
      std::istringstream ds(val);
      std::string tok;
      while (std::getline(ds, tok, ',')) cfg.dilations.push_back(std::stoi(tok));
    } else if (key == "switches") {
      std::istringstream ss(val);
      std::string tok;
      while (std::getline(ss, tok, ',')) {
        if (tok == "tc") cfg.switches.tc = true;
        else if (tok == "time") cfg.switches.time = true;
        else if (tok == "sensor") cfg.switches.sensor = true;
        else if (tok == "irmask") cfg.switches.ir_mask = true;
        else throw ParseError("unknown switch '" + tok + "'");
      }
    } else {
      throw ParseError("unknown config key '" + key + "'");
    }
  }
  return cfg;
}

int fused_token_count(const ModelConfig& cfg) {
  int n = 0;
  if (cfg.switches.tc) n += cfg.length;
  if (cfg.switches.time) n += cfg.length;
  if (cfg.switches.sensor) n += cfg.sensors;
  return n;
}

std::vector<int> fused_split_sizes(const ModelConfig& cfg) {
  std::vector<int> sizes;
  if (cfg.switches.tc) sizes.push_back(cfg.length);
  if (cfg.switches.time) sizes.push_back(cfg.length);
  if (cfg.switches.sensor) sizes.push_back(cfg.sensors);
  return sizes;
}

ParamStore build_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ParamStore store;
  ParamBuilder b{store, seed};
  const int dim = cfg.embed_dim;
  const int raw_mult = cfg.variant == Variant::kV3 ? 2 : 1;

  for (int layer = 1; layer <= cfg.layers; ++layer) {
    if (cfg.switches.tc) {
      const std::string prefix = layer_prefix("tc", layer);
      int c_in = layer == 1 ? raw_mult * cfg.sensors : dim;
      for (std::size_t j = 0; j < cfg.dilations.size(); ++j) {
        const std::string conv = prefix + "conv" + std::to_string(j) + ".";
        b.weight(conv + "w", {dim, c_in, cfg.kernel_width}, c_in * cfg.kernel_width);
        b.zeros(conv + "b", {dim});
        c_in = dim;
      }
    }
    if (cfg.switches.time) {
      const std::string prefix = layer_prefix("tt", layer);
      if (layer == 1) {
        const int in_w = raw_mult * cfg.sensors;
        b.weight(prefix + "in_proj.w", {in_w, dim}, in_w);
        b.zeros(prefix + "in_proj.b", {dim});
      }
      b.encoder_tail(prefix, dim, cfg.ffn());
    }
    if (cfg.switches.sensor) {
      const std::string prefix = layer_prefix("ts", layer);
      if (layer == 1) {
        const int in_w = raw_mult * cfg.length;
        b.weight(prefix + "in_proj.w", {in_w, dim}, in_w);
        b.zeros(prefix + "in_proj.b", {dim});
      }
      b.encoder_tail(prefix, dim, cfg.ffn());
    }
    b.encoder_tail(layer_prefix("fuse", layer), dim, cfg.ffn());
  }
  b.weight("head.w", {dim, cfg.num_classes}, dim);
  b.zeros("head.b", {cfg.num_classes});
  return store;
}

Tensor forward_logits(const IrtsSample& sample, const ParamStore& params, const ModelConfig& cfg,
                      const FwdCtx& ctx) {
  cfg.validate();
  if (sample.length != cfg.length || sample.sensors != cfg.sensors) {
    throw DimensionError("sample is " + std::to_string(sample.length) + "x" +
                         std::to_string(sample.sensors) + " but model expects " +
                         std::to_string(cfg.length) + "x" + std::to_string(cfg.sensors));
  }

  PathInputs in = variant_inputs(sample, cfg);
  const std::vector<int> split_sizes = fused_split_sizes(cfg);

  Tensor e_tc, e_time, e_sensor;
  for (int layer = 1; layer <= cfg.layers; ++layer) {
    if (cfg.switches.tc) e_tc = tc_block(in.tc, layer, params, cfg, ctx);
    if (cfg.switches.time) e_time = encode_time_tokens(in.time, layer, params, cfg, ctx);
    if (cfg.switches.sensor) e_sensor = encode_sensor_tokens(in.sensor, layer, params, cfg, ctx);

    std::vector<Tensor> views;
    if (cfg.switches.tc) views.push_back(e_tc);
    if (cfg.switches.time) views.push_back(e_time);
    if (cfg.switches.sensor) views.push_back(e_sensor);

    // fusion: attention over every token of every view, then norm/ffn/norm
    std::vector<Tensor>* attn_sink = nullptr;
    if (ctx.trace != nullptr) {
      ctx.trace->fusion_attention.emplace_back();
      attn_sink = &ctx.trace->fusion_attention.back();
    }
    const Tensor fused = fuse_block(concat_rows(views), layer, params, cfg, ctx, attn_sink);

    std::vector<Tensor> parts = split_rows(fused, split_sizes);
    std::size_t next = 0;
    if (cfg.switches.tc) {
      e_tc = parts[next++];
      in.tc = transpose(e_tc);
    }
    if (cfg.switches.time) {
      e_time = parts[next++];
      in.time = e_time;
    }
    if (cfg.switches.sensor) {
      e_sensor = parts[next++];
      in.sensor = e_sensor;
    }
  }

  // The gate encodes the masks through the layer-1 encoders (shared weights,
  // computed once) and adds the gated embedding to each view's final state.
  if (cfg.variant == Variant::kV4 && cfg.switches.ir_mask) {
    const auto [m_t, m_s] = build_masks(sample);
    const GateState gate = irregularity_gate(m_t, m_s, params, cfg, ctx);
    if (cfg.switches.tc) {
      if (ctx.trace != nullptr) ctx.trace->gate_tc = detached_copy(gate.tc);
      e_tc = add(e_tc, gate.tc);
    }
    if (cfg.switches.time) {
      if (ctx.trace != nullptr) ctx.trace->gate_time = detached_copy(gate.time);
      e_time = add(e_time, gate.time);
    }
    if (cfg.switches.sensor) {
      if (ctx.trace != nullptr) ctx.trace->gate_sensor = detached_copy(gate.sensor);
      e_sensor = add(e_sensor, gate.sensor);
    }
  }

  std::vector<Tensor> views;
  if (cfg.switches.tc) views.push_back(e_tc);
  if (cfg.switches.time) views.push_back(e_time);
  if (cfg.switches.sensor) views.push_back(e_sensor);
  if (ctx.trace != nullptr) {
    ctx.trace->final_views.clear();
    for (const auto& v : views) ctx.trace->final_views.push_back(detached_copy(v));
  }

  const Tensor pooled = mean_rows(concat_rows(views));
  return add_rowvec(matmul(pooled, params.get("head.w")), params.get("head.b"));
}

Tensor predict_proba(const Tensor& logits) { return softmax_rows(logits); }

std::vector<double> predict_proba_values(const IrtsSample& sample, const ParamStore& params,
                                         const ModelConfig& cfg) {
  return predict_proba(forward_logits(sample, params, cfg)).values();
}

Tensor batch_loss(const Dataset& ds, const std::vector<int>& indices, const ParamStore& params,
                  const ModelConfig& cfg, const std::vector<double>& class_weights, const FwdCtx& ctx) {
  if (indices.empty()) {
    throw UsageError("batch_loss: empty batch");
  }
  Tensor total;
  double weight_sum = 0.0;
  for (int idx : indices) {
    const IrtsSample& sample = ds.at(static_cast<std::size_t>(idx));
    const double w = class_weights.empty() ? 1.0 : class_weights.at(static_cast<std::size_t>(sample.label));
    Tensor ce = cross_entropy_logits(forward_logits(sample, params, cfg, ctx), sample.label);
    if (w != 1.0) ce = scale(ce, w);
    total = total.defined() ? add(total, ce) : ce;
    weight_sum += w;
  }
  return scale(total, 1.0 / weight_sum);
}

// ---- checkpoint ----

namespace {

constexpr char kMagic[4] = {'M', 'V', 'F', '1'};

template <typename T>
void write_pod(std::ofstream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T read_pod(std::ifstream& in, const std::string& path) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) throw ParseError(path + ": truncated checkpoint");
  return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const ModelConfig& cfg, const ParamStore& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError("cannot write " + path);
  out.write(kMagic, sizeof kMagic);
  write_pod<std::uint32_t>(out, 1);  // container version
  const std::string cfg_text = config_to_text(cfg);
  write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(cfg_text.size()));
  out.write(cfg_text.data(), static_cast<std::streamsize>(cfg_text.size()));
  write_pod<std::uint64_t>(out, params.names().size());
  for (const auto& name : params.names()) {
    const Tensor t = params.get(name);
    write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape().size()));
    for (int d : t.shape()) write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    out.write(reinterpret_cast<const char*>(t.values().data()),
              static_cast<std::streamsize>(t.values().size() * sizeof(double)));
  }
  if (!out) throw ParseError("write failed for " + path);
}

std::pair<ModelConfig, ParamStore> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open " + path);
  char magic[4];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
    throw ParseError(path + ": not a model checkpoint (bad magic)");
  }
  const auto version = read_pod<std::uint32_t>(in, path);
  if (version != 1) throw ParseError(path + ": unsupported checkpoint version " + std::to_string(version));
  const auto cfg_len = read_pod<std::uint32_t>(in, path);
  std::string cfg_text(cfg_len, '\0');
  in.read(cfg_text.data(), cfg_len);
  if (!in) throw ParseError(path + ": truncated checkpoint");
  ModelConfig cfg = config_from_text(cfg_text);

  ParamStore params;
  const auto n_tensors = read_pod<std::uint64_t>(in, path);
  for (std::uint64_t i = 0; i < n_tensors; ++i) {
    const auto name_len = read_pod<std::uint32_t>(in, path);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    const auto rank = read_pod<std::uint32_t>(in, path);
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<int>(read_pod<std::uint32_t>(in, path));
    std::vector<double> values(static_cast<std::size_t>(shape_numel(shape)));
    in.read(reinterpret_cast<char*>(values.data()),
            static_cast<std::streamsize>(values.size() * sizeof(double)));
    if (!in) throw ParseError(path + ": truncated checkpoint");
    params.add(name, shape, std::move(values));
  }
  return {cfg, std::move(params)};
}

ParamStore load_checkpoint_expecting(const std::string& path, const ModelConfig& expected) {
  auto [cfg, params] = load_checkpoint(path);
  const std::string got = config_to_text(cfg);
  const std::string want = config_to_text(expected);
  if (got != want) {
    throw ConfigError(path + ": checkpoint config does not match the requested model\n--- stored:\n" +
                      got + "--- requested:\n" + want);
  }
  return std::move(params);
}

// ---- gradient verification ----

ModelConfig toy_model_config() {
  ModelConfig cfg;
  cfg.embed_dim = 16;
  cfg.heads = 4;
  cfg.layers = 2;
  cfg.dilations = {1, 2};
  cfg.kernel_width = 3;
  cfg.num_classes = 2;
  cfg.length = 8;
  cfg.sensors = 4;
  cfg.ffn_width = 32;
  return cfg;
}

GradCheckResult check_model_gradients(const ModelConfig& cfg, std::uint64_t seed, double h,
                                      double skip_below, double atol) {
  cfg.validate();
  // Fixed micro-batch covering both label values.
  SyntheticSpec spec;
  spec.regime = Regime::kNirts;
  spec.n_samples = std::max(2, cfg.num_classes);
  spec.length = cfg.length;
  spec.sensors = cfg.sensors;
  spec.num_classes = cfg.num_classes;
  spec.missing_prob = 0.4;
  spec.signal_strength = 0.3;
  spec.seed = Rng::mix(seed, 0xBA7C4);
  const Dataset batch = gen_synthetic(spec);
  std::vector<int> all(batch.samples.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int>(i);

  ParamStore params = build_params(cfg, seed);
  {
    Tape tape;
    Tensor loss = batch_loss(batch, all, params, cfg);
    tape.backward(loss);
  }

  const auto loss_value = [&](const ParamStore& p) {
    return batch_loss(batch, all, p, cfg).scalar();
  };

  // Single-coordinate re-measurement for suspects flagged at the base step.
  const auto fd_at = [&](const std::string& name, std::size_t i, double step) {
    Tensor p = params.get(name);
    auto& val = p.mutable_values();
    const double saved = val[i];
    val[i] = saved + step;
    const double fp = loss_value(params);
    val[i] = saved - step;
    const double fm = loss_value(params);
    val[i] = saved;
    return (fp - fm) / (2.0 * step);
  };
  constexpr int kMaxRefined = 200;  // past this the check has failed decisively
  constexpr double kRefineAbove = 1e-5;

  GradCheckResult result;
  for (const auto& name : params.names()) {
    const std::vector<double> autodiff = params.get(name).grad();
    const Tensor fd = finite_diff_grad(loss_value, params, name, h);
    GradCheckEntry entry;
    entry.name = name;
    for (std::size_t i = 0; i < autodiff.size(); ++i) {
      const double a = autodiff[i];
      double b = fd.values()[i];
      double mag = std::max(std::fabs(a), std::fabs(b));
      if (mag <= skip_below) continue;
      if (std::fabs(a - b) <= atol) continue;  // below the oracle's resolution
      double rel = std::fabs(a - b) / mag;
      if (rel > kRefineAbove && result.refined_coords < kMaxRefined) {
        ++result.refined_coords;
        for (double step : {h / 10.0, h / 100.0}) {
          const double b2 = fd_at(name, i, step);
          const double mag2 = std::max(std::fabs(a), std::fabs(b2));
          if (mag2 <= skip_below || std::fabs(a - b2) <= atol) {
            rel = 0.0;
            break;
          }
          const double rel2 = std::fabs(a - b2) / mag2;
          if (rel2 < rel) {
            rel = rel2;
            b = b2;
          }
        }
      }
      if (rel > entry.max_rel_err) {
        entry.max_rel_err = rel;
        entry.autodiff_at_worst = a;
        entry.central_diff_at_worst = b;
      }
    }
    if (entry.max_rel_err > result.max_rel_err) {
      result.max_rel_err = entry.max_rel_err;
      result.worst_param = name;
    }
    result.per_param.push_back(std::move(entry));
  }
  return result;
}

}  // namespace mvf
