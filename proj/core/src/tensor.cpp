#include "mvf/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <unordered_map>
#include <utility>

namespace mvf {

namespace {

thread_local std::vector<Tape*> g_tape_stack;

thread_local std::string g_corrupt_op;
thread_local double g_corrupt_factor = 1.0;

#ifdef NDEBUG
thread_local bool g_finite_checks = false;
#else
thread_local bool g_finite_checks = true;
#endif

double stable_sigmoid(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  double e = std::exp(x);
  return e / (1.0 + e);
}

void check_finite(const detail::Node& n) {
  for (double v : n.value) {
    if (!std::isfinite(v)) {
      throw StateError(std::string("non-finite value produced by op '") + n.op + "'");
    }
  }
}

detail::NodePtr make_node(Shape shape, const char* op) {
  auto n = std::make_shared<detail::Node>();
  n->shape = std::move(shape);
  n->value.assign(static_cast<std::size_t>(shape_numel(n->shape)), 0.0);
  n->op = op;
  return n;
}

// Fast pre-check so the backward closure and parent handles are only built
// when an op will actually be recorded.
inline bool is_recording(std::initializer_list<const Tensor*> inputs) {
  if (g_tape_stack.empty()) return false;
  for (const Tensor* t : inputs) {
    if (t->node()->requires_grad) return true;
  }
  return false;
}

inline void finish(const detail::NodePtr& out) {
  if (g_finite_checks) check_finite(*out);
}

// Registers the op on the active tape. Call only when is_recording was true.
void record(const detail::NodePtr& out, std::vector<detail::NodePtr> parents,
            std::function<void(detail::Node&)> backward) {
  Tape* tape = Tape::active();
  out->requires_grad = true;
  out->parents = std::move(parents);
  out->backward = std::move(backward);
  out->origin = tape;
  tape->record(out);
}

void require_rank2(const Tensor& x, const char* op) {
  if (x.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a rank-2 tensor, got " + shape_str(x.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

}  // namespace

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i > 0) out += "x";
    out += std::to_string(s[i]);
  }
  out += "]";
  return out;
}

int shape_numel(const Shape& s) {
  int n = 1;
  for (int d : s) {
    if (d < 0) throw DimensionError("negative dimension in shape " + shape_str(s));
    n *= d;
  }
  return n;
}

namespace detail {

void ensure_grad(Node& n) {
  if (n.grad.size() != n.value.size()) {
    n.grad.assign(n.value.size(), 0.0);
  }
}

}  // namespace detail

// ---- Tensor ----

Tensor Tensor::zeros(const Shape& shape) { return Tensor(make_node(shape, "leaf")); }

Tensor Tensor::full(const Shape& shape, double v) {
  auto n = make_node(shape, "leaf");
  std::fill(n->value.begin(), n->value.end(), v);
  return Tensor(std::move(n));
}

Tensor Tensor::from(const Shape& shape, std::vector<double> values) {
  if (static_cast<int>(values.size()) != shape_numel(shape)) {
    throw DimensionError("tensor data length " + std::to_string(values.size()) +
                         " does not match shape " + shape_str(shape));
  }
  auto n = std::make_shared<detail::Node>();
  n->shape = shape;
  n->value = std::move(values);
  return Tensor(std::move(n));
}

Tensor Tensor::param(const Shape& shape, std::vector<double> values) {
  Tensor t = from(shape, std::move(values));
  t.node()->requires_grad = true;
  detail::ensure_grad(*t.node());
  return t;
}

const detail::NodePtr& Tensor::node() const {
  if (!node_) {
    throw StateError("use of an undefined tensor");
  }
  return node_;
}

int Tensor::rows() const {
  require_rank2(*this, "rows");
  return shape()[0];
}

int Tensor::cols() const {
  require_rank2(*this, "cols");
  return shape()[1];
}

double Tensor::at(int i) const { return node()->value.at(static_cast<std::size_t>(i)); }

double Tensor::at(int i, int j) const {
  require_rank2(*this, "at");
  return node()->value.at(static_cast<std::size_t>(i) * static_cast<std::size_t>(cols()) +
                          static_cast<std::size_t>(j));
}

double Tensor::scalar() const {
  if (numel() != 1) {
    throw UsageError("scalar() on tensor of shape " + shape_str(shape()));
  }
  return node()->value[0];
}

const std::vector<double>& Tensor::grad() const {
  const auto& n = *node();
  if (!n.requires_grad) {
    throw StateError("grad() on a tensor that does not track gradients");
  }
  if (n.grad.size() != n.value.size()) {
    throw StateError("grad() before any backward pass");
  }
  return n.grad;
}

void Tensor::zero_grad() {
  auto& n = *node();
  if (n.requires_grad) {
    n.grad.assign(n.value.size(), 0.0);
  }
}

// ---- Tape ----

Tape::Tape() { g_tape_stack.push_back(this); }

Tape::~Tape() {
  if (!g_tape_stack.empty() && g_tape_stack.back() == this) {
    g_tape_stack.pop_back();
  }
}

Tape* Tape::active() { return g_tape_stack.empty() ? nullptr : g_tape_stack.back(); }

void Tape::backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw UsageError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  }
  if (loss.node()->origin != this) {
    throw UsageError("backward: loss was not produced on this tape");
  }
  if (consumed_) {
    throw StateError("backward called twice on the same tape without reset");
  }
  consumed_ = true;

  detail::ensure_grad(*loss.node());
  loss.node()->grad[0] = 1.0;

  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    detail::Node& n = **it;
    if (n.grad.size() != n.value.size()) {
      continue;  // not reached from the loss
    }
    bool corrupt = !g_corrupt_op.empty() && g_corrupt_op == n.op;
    if (corrupt) {
      for (double& g : n.grad) g *= g_corrupt_factor;
    }
    n.backward(n);
    if (corrupt) {
      for (double& g : n.grad) g /= g_corrupt_factor;
    }
  }
}

void Tape::reset() {
  records_.clear();
  consumed_ = false;
}

namespace testing {

void set_backward_corruption(const std::string& op, double factor) {
  g_corrupt_op = op;
  g_corrupt_factor = factor;
}

void clear_backward_corruption() {
  g_corrupt_op.clear();
  g_corrupt_factor = 1.0;
}

void set_finite_checks(bool enable) { g_finite_checks = enable; }

}  // namespace testing

// ---- ops ----

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  auto out = make_node(a.shape(), "add");
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::size_t i = 0; i < av.size(); ++i) out->value[i] = av[i] + bv[i];
  if (is_recording({&a, &b})) {
    record(out, {a.node(), b.node()}, [pa = a.node(), pb = b.node()](detail::Node& o) {
      for (auto* p : {pa.get(), pb.get()}) {
        if (!p->requires_grad) continue;
        detail::ensure_grad(*p);
        for (std::size_t i = 0; i < o.grad.size(); ++i) p->grad[i] += o.grad[i];
      }
    });
  }
  finish(out);
  return Tensor(out);
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  auto out = make_node(a.shape(), "sub");
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::size_t i = 0; i < av.size(); ++i) out->value[i] = av[i] - bv[i];
  if (is_recording({&a, &b})) {
    record(out, {a.node(), b.node()}, [pa = a.node(), pb = b.node()](detail::Node& o) {
      if (pa->requires_grad) {
        detail::ensure_grad(*pa);
        for (std::size_t i = 0; i < o.grad.size(); ++i) pa->grad[i] += o.grad[i];
      }
      if (pb->requires_grad) {
        detail::ensure_grad(*pb);
        for (std::size_t i = 0; i < o.grad.size(); ++i) pb->grad[i] -= o.grad[i];
      }
    });
  }
  finish(out);
  return Tensor(out);
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  auto out = make_node(a.shape(), "mul");
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::size_t i = 0; i < av.size(); ++i) out->value[i] = av[i] * bv[i];
  if (is_recording({&a, &b})) {
    record(out, {a.node(), b.node()}, [pa = a.node(), pb = b.node()](detail::Node& o) {
      if (pa->requires_grad) {
        detail::ensure_grad(*pa);
        for (std::size_t i = 0; i < o.grad.size(); ++i) pa->grad[i] += o.grad[i] * pb->value[i];
      }
      if (pb->requires_grad) {
        detail::ensure_grad(*pb);
        for (std::size_t i = 0; i < o.grad.size(); ++i) pb->grad[i] += o.grad[i] * pa->value[i];
      }
    });
  }
  finish(out);
  return Tensor(out);
}

Tensor scale(const Tensor& x, double c) {
  auto out = make_node(x.shape(), "scale");
  const auto& xv = x.values();
  for (std::size_t i = 0; i < xv.size(); ++i) out->value[i] = xv[i] * c;
  if (is_recording({&x})) {
    record(out, {x.node()}, [px = x.node(), c](detail::Node& o) {
      detail::ensure_grad(*px);
      for (std::size_t i = 0; i < o.grad.size(); ++i) px->grad[i] += o.grad[i] * c;
    });
  }
  finish(out);
  return Tensor(out);
}

Tensor add_rowvec(const Tensor& x, const Tensor& v) {
  require_rank2(x, "add_rowvec");
  if (v.rank() != 1 || v.numel() != x.cols()) {
    throw DimensionError("add_rowvec: vector " + shape_str(v.shape()) + " does not match cols of " +
                         shape_str(x.shape()));
  }
  const int m = x.rows(), n = x.cols();
  auto out = make_node(x.shape(), "add_rowvec");
  const auto& xv = x.values();
  const auto& vv = v.values();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      out->value[static_cast<std::size_t>(i) * n + j] = xv[static_cast<std::size_t>(i) * n + j] + vv[static_cast<std::size_t>(j)];
  if (is_recording({&x, &v})) {
    record(out, {x.node(), v.node()}, [px = x.node(), pv = v.node(), m, n](detail::Node& o) {
      if (px->requires_grad) {
        detail::ensure_grad(*px);
        for (std::size_t i = 0; i < o.grad.size(); ++i) px->grad[i] += o.grad[i];
      }
      if (pv->requires_grad) {
        detail::ensure_grad(*pv);
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j)
            pv->grad[static_cast<std::size_t>(j)] += o.grad[static_cast<std::size_t>(i) * n + j];
      }
    });
  }
  finish(out);
  return Tensor(out);
}

Tensor add_colvec(const Tensor& x, const Tensor& v) {
  require_rank2(x, "add_colvec");
  if (v.rank() != 1 || v.numel() != x.rows()) {
    throw DimensionError("add_colvec: vector " + shape_str(v.shape()) + " does not match rows of " +
                         shape_str(x.shape()));
  }
  const int m = x.rows(), n = x.cols();
  auto out = make_node(x.shape(), "add_colvec");
  const auto& xv = x.values();
  const auto& vv = v.values();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      out->value[static_cast<std::size_t>(i) * n + j] = xv[static_cast<std::size_t>(i) * n + j] + vv[static_cast<std::size_t>(i)];
  if (is_recording({&x, &v})) {
    record(out, {x.node(), v.node()}, [px = x.node(), pv = v.node(), m, n](detail::Node& o) {
      if (px->requires_grad) {
        detail::ensure_grad(*px);
        for (std::size_t i = 0; i < o.grad.size(); ++i) px->grad[i] += o.grad[i];
      }
      if (pv->requires_grad) {
        detail::ensure_grad(*pv);
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j)
            pv->grad[static_cast<std::size_t>(i)] += o.grad[static_cast<std::size_t>(i) * n + j];
      }
    });
  }
  finish(out);
  return Tensor(out);
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner dimensions disagree: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  const int m = a.rows(), k = a.cols(), n = b.cols();
  auto out = make_node({m, n}, "matmul");
  const double* av = a.values().data();
  const double* bv = b.values().data();
  double* ov = out->value.data();
  for (int i = 0; i < m; ++i) {
    for (int p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = bv + p * n;
      double* orow = ov + i * n;
      for (int j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  }
  if (is_recording({&a, &b})) {
    record(out, {a.node(), b.node()}, [pa = a.node(), pb = b.node(), m, k, n](detail::Node& o) {
      // dA = dC * B^T ; dB = A^T * dC
      if (pa->requires_grad) {
        detail::ensure_grad(*pa);
        for (int i = 0; i < m; ++i)
          for (int p = 0; p < k; ++p) {
            double acc = 0.0;
            for (int j = 0; j < n; ++j)
              acc += o.grad[static_cast<std::size_t>(i) * n + j] * pb->value[static_cast<std::size_t>(p) * n + j];
            pa->grad[static_cast<std::size_t>(i) * k + p] += acc;
          }
      }
      if (pb->requires_grad) {
        detail::ensure_grad(*pb);
        for (int p = 0; p < k; ++p)
          for (int j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int i = 0; i < m; ++i)
              acc += pa->value[static_cast<std::size_t>(i) * k + p] * o.grad[static_cast<std::size_t>(i) * n + j];
            pb->grad[static_cast<std::size_t>(p) * n + j] += acc;
          }
      }
    });
  }
  finish(out);
  return Tensor(out);
}

Tensor transpose(const Tensor& x) {
  require_rank2(x, "transpose");
  const int m = x.rows(), n = x.cols();
  auto out = make_node({n, m}, "transpose");
  const auto& xv = x.values();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      out->value[static_cast<std::size_t>(j) * m + i] = xv[static_cast<std::size_t>(i) * n + j];
  if (is_recording({&x})) {
    record(out, {x.node()}, [px = x.node(), m, n](detail::Node& o) {
      detail::ensure_grad(*px);
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
          px->grad[static_cast<std::size_t>(i) * n + j] += o.grad[static_cast<std::size_t>(j) * m + i];
    });
  }
  finish(out);
  return Tensor(out);
}

Tensor relu(const Tensor& x) {
  auto out = make_node(x.shape(), "relu");
  const auto& xv = x.values();
  for (std::size_t i = 0; i < xv.size(); ++i) out->value[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  if (is_recording({&x})) {
    record(out, {x.node()}, [px = x.node()](detail::Node& o) {
      detail::ensure_grad(*px);
      for (std::size_t i = 0; i < o.grad.size(); ++i)
        if (px->value[i] > 0.0) px->grad[i] += o.grad[i];
    });
  }
  finish(out);
  return Tensor(out);
}

Tensor gated_activation(const Tensor& x, double sigmoid_bias) {
  auto out = make_node(x.shape(), "gated_activation");
  const auto& xv = x.values();
  for (std::size_t i = 0; i < xv.size(); ++i) {
    out->value[i] = std::tanh(xv[i]) * stable_sigmoid(xv[i] + sigmoid_bias);
  }
  if (is_recording({&x})) {
    record(out, {x.node()}, [px = x.node(), sigmoid_bias](detail::Node& o) {
      detail::ensure_grad(*px);
      for (std::size_t i = 0; i < o.grad.size(); ++i) {
        const double t = std::tanh(px->value[i]);
        const double s = stable_sigmoid(px->value[i] + sigmoid_bias);
        px->grad[i] += o.grad[i] * ((1.0 - t * t) * s + t * s * (1.0 - s));
      }
    });
  }
  finish(out);
  return Tensor(out);
}

Tensor softmax_rows(const Tensor& x) {
  require_rank2(x, "softmax_rows");
  const int m = x.rows(), n = x.cols();
  auto out = make_node(x.shape(), "softmax_rows");
  const auto& xv = x.values();
  for (int i = 0; i < m; ++i) {
    const double* row = xv.data() + static_cast<std::size_t>(i) * n;
    double mx = row[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    double* orow = out->value.data() + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      orow[j] = std::exp(row[j] - mx);
      sum += orow[j];
    }
    for (int j = 0; j < n; ++j) orow[j] /= sum;
  }
  if (is_recording({&x})) {
    record(out, {x.node()}, [px = x.node(), m, n](detail::Node& o) {
      detail::ensure_grad(*px);
      for (int i = 0; i < m; ++i) {
        const double* y = o.value.data() + static_cast<std::size_t>(i) * n;
        const double* dy = o.grad.data() + static_cast<std::size_t>(i) * n;
        double dot = 0.0;
        for (int j = 0; j < n; ++j) dot += dy[j] * y[j];
        double* dx = px->grad.data() + static_cast<std::size_t>(i) * n;
        for (int j = 0; j < n; ++j) dx[j] += y[j] * (dy[j] - dot);
      }
    });
  }
  finish(out);
  return Tensor(out);
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  require_rank2(x, "layer_norm");
  const int m = x.rows(), n = x.cols();
  if (n < 1) throw DimensionError("layer_norm: needs at least one column");
  if (gain.rank() != 1 || gain.numel() != n || bias.rank() != 1 || bias.numel() != n) {
    throw DimensionError("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" +
                         shape_str(bias.shape()) + " do not match cols of " + shape_str(x.shape()));
  }
  auto out = make_node(x.shape(), "layer_norm");
  const auto& xv = x.values();
  const auto& gv = gain.values();
  const auto& bv = bias.values();
  // Row statistics are re-derived in backward; only the forward value is kept.
  for (int i = 0; i < m; ++i) {
    const double* row = xv.data() + static_cast<std::size_t>(i) * n;
    double mu = 0.0;
    for (int j = 0; j < n; ++j) mu += row[j];
    mu /= n;
    double var = 0.0;
    for (int j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= n;
    const double inv = 1.0 / std::sqrt(var + eps);
    double* orow = out->value.data() + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j)
      orow[j] = gv[static_cast<std::size_t>(j)] * (row[j] - mu) * inv + bv[static_cast<std::size_t>(j)];
  }
  if (is_recording({&x, &gain, &bias})) {
    record(out, {x.node(), gain.node(), bias.node()},
           [px = x.node(), pg = gain.node(), pb = bias.node(), m, n, eps](detail::Node& o) {
             std::vector<double> xhat(static_cast<std::size_t>(n));
             for (int i = 0; i < m; ++i) {
               const double* row = px->value.data() + static_cast<std::size_t>(i) * n;
               const double* dy = o.grad.data() + static_cast<std::size_t>(i) * n;
               double mu = 0.0;
               for (int j = 0; j < n; ++j) mu += row[j];
               mu /= n;
               double var = 0.0;
               for (int j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
               var /= n;
               const double inv = 1.0 / std::sqrt(var + eps);
               for (int j = 0; j < n; ++j) xhat[static_cast<std::size_t>(j)] = (row[j] - mu) * inv;

               if (pg->requires_grad) {
                 detail::ensure_grad(*pg);
                 for (int j = 0; j < n; ++j)
                   pg->grad[static_cast<std::size_t>(j)] += dy[j] * xhat[static_cast<std::size_t>(j)];
               }
               if (pb->requires_grad) {
                 detail::ensure_grad(*pb);
                 for (int j = 0; j < n; ++j) pb->grad[static_cast<std::size_t>(j)] += dy[j];
               }
               if (px->requires_grad) {
                 detail::ensure_grad(*px);
                 double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                 for (int j = 0; j < n; ++j) {
                   const double dxh = dy[j] * pg->value[static_cast<std::size_t>(j)];
                   sum_dxhat += dxh;
                   sum_dxhat_xhat += dxh * xhat[static_cast<std::size_t>(j)];
                 }
                 double* dx = px->grad.data() + static_cast<std::size_t>(i) * n;
                 for (int j = 0; j < n; ++j) {
                   const double dxh = dy[j] * pg->value[static_cast<std::size_t>(j)];
                   dx[j] += inv * (dxh - sum_dxhat / n - xhat[static_cast<std::size_t>(j)] * sum_dxhat_xhat / n);
                 }
               }
             }
           });
  }
  finish(out);
  return Tensor(out);
}

Tensor dilated_conv1d(const Tensor& x, const Tensor& kernels, int dilation) {
  if (dilation < 1) {
    throw ParameterError("dilated_conv1d: dilation must be >= 1, got " + std::to_string(dilation));
  }
  require_rank2(x, "dilated_conv1d");
  if (kernels.rank() != 3) {
    throw DimensionError("dilated_conv1d: kernels must be [C_out x C_in x W], got " +
                         shape_str(kernels.shape()));
  }
  const int c_in = x.rows(), len = x.cols();
  const int c_out = kernels.shape()[0], kc_in = kernels.shape()[1], w = kernels.shape()[2];
  if (kc_in != c_in) {
    throw DimensionError("dilated_conv1d: input channels " + shape_str(x.shape()) +
                         " vs kernels " + shape_str(kernels.shape()));
  }
  if (len < 1) throw DimensionError("dilated_conv1d: empty time axis");
  const int center = w / 2;
  auto out = make_node({c_out, len}, "dilated_conv1d");
  const auto& xv = x.values();
  const auto& kv = kernels.values();
  for (int co = 0; co < c_out; ++co) {
    for (int ci = 0; ci < c_in; ++ci) {
      const double* krow = kv.data() + (static_cast<std::size_t>(co) * c_in + ci) * w;
      const double* xrow = xv.data() + static_cast<std::size_t>(ci) * len;
      double* orow = out->value.data() + static_cast<std::size_t>(co) * len;
      for (int tap = 0; tap < w; ++tap) {
        const double kw = krow[tap];
        if (kw == 0.0) continue;
        const int off = (tap - center) * dilation;
        const int t0 = std::max(0, -off);
        const int t1 = std::min(len, len - off);
        for (int t = t0; t < t1; ++t) orow[t] += kw * xrow[t + off];
      }
    }
  }
  if (is_recording({&x, &kernels})) {
    record(out, {x.node(), kernels.node()},
           [px = x.node(), pk = kernels.node(), c_in, c_out, len, w, center, dilation](detail::Node& o) {
             const bool gx = px->requires_grad, gk = pk->requires_grad;
             if (gx) detail::ensure_grad(*px);
             if (gk) detail::ensure_grad(*pk);
             for (int co = 0; co < c_out; ++co) {
               for (int t = 0; t < len; ++t) {
                 const double up = o.grad[static_cast<std::size_t>(co) * len + t];
                 if (up == 0.0) continue;
                 for (int ci = 0; ci < c_in; ++ci) {
                   for (int tap = 0; tap < w; ++tap) {
                     const int p = t + (tap - center) * dilation;
                     if (p < 0 || p >= len) continue;
                     const std::size_t ki = (static_cast<std::size_t>(co) * c_in + ci) * w + tap;
                     if (gk) pk->grad[ki] += up * px->value[static_cast<std::size_t>(ci) * len + p];
                     if (gx) px->grad[static_cast<std::size_t>(ci) * len + p] += up * pk->value[ki];
                   }
                 }
               }
             }
           });
  }
  finish(out);
  return Tensor(out);
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no parts");
  if (parts.size() == 1) return parts[0];
  const int n = parts[0].cols();
  int total = 0;
  for (const auto& p : parts) {
    require_rank2(p, "concat_rows");
    if (p.cols() != n) {
      throw DimensionError("concat_rows: column mismatch " + shape_str(parts[0].shape()) + " vs " +
                           shape_str(p.shape()));
    }
    total += p.rows();
  }
  auto out = make_node({total, n}, "concat_rows");
  std::size_t off = 0;
  for (const auto& p : parts) {
    const auto& pv = p.values();
    std::copy(pv.begin(), pv.end(), out->value.begin() + static_cast<std::ptrdiff_t>(off));
    off += pv.size();
  }
  bool rec = false;
  if (Tape::active() != nullptr) {
    for (const auto& p : parts) {
      if (p.node()->requires_grad) {
        rec = true;
        break;
      }
    }
  }
  if (rec) {
    std::vector<detail::NodePtr> nodes;
    nodes.reserve(parts.size());
    for (const auto& p : parts) nodes.push_back(p.node());
    record(out, nodes, [nodes](detail::Node& o) {
      std::size_t off = 0;
      for (const auto& p : nodes) {
        const std::size_t sz = p->value.size();
        if (p->requires_grad) {
          detail::ensure_grad(*p);
          for (std::size_t i = 0; i < sz; ++i) p->grad[i] += o.grad[off + i];
        }
        off += sz;
      }
    });
  }
  finish(out);
  return Tensor(out);
}

std::vector<Tensor> split_rows(const Tensor& x, const std::vector<int>& sizes) {
  require_rank2(x, "split_rows");
  int total = 0;
  for (int s : sizes) {
    if (s < 0) throw DimensionError("split_rows: negative block size");
    total += s;
  }
  if (total != x.rows()) {
    throw DimensionError("split_rows: sizes sum to " + std::to_string(total) + " but tensor is " +
                         shape_str(x.shape()));
  }
  const int n = x.cols();
  const bool rec = is_recording({&x});
  std::vector<Tensor> outs;
  outs.reserve(sizes.size());
  int row0 = 0;
  for (int s : sizes) {
    auto out = make_node({s, n}, "split_rows");
    const std::size_t off = static_cast<std::size_t>(row0) * n;
    std::copy(x.values().begin() + static_cast<std::ptrdiff_t>(off),
              x.values().begin() + static_cast<std::ptrdiff_t>(off + static_cast<std::size_t>(s) * n),
              out->value.begin());
    if (rec) {
      record(out, {x.node()}, [px = x.node(), off](detail::Node& o) {
        detail::ensure_grad(*px);
        for (std::size_t i = 0; i < o.grad.size(); ++i) px->grad[off + i] += o.grad[i];
      });
    }
    outs.emplace_back(std::move(out));
    row0 += s;
  }
  return outs;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no parts");
  if (parts.size() == 1) return parts[0];
  const int m = parts[0].rows();
  int total = 0;
  for (const auto& p : parts) {
    require_rank2(p, "concat_cols");
    if (p.rows() != m) {
      throw DimensionError("concat_cols: row mismatch " + shape_str(parts[0].shape()) + " vs " +
                           shape_str(p.shape()));
    }
    total += p.cols();
  }
  auto out = make_node({m, total}, "concat_cols");
  int col0 = 0;
  for (const auto& p : parts) {
    const int pc = p.cols();
    const auto& pv = p.values();
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < pc; ++j)
        out->value[static_cast<std::size_t>(i) * total + col0 + j] = pv[static_cast<std::size_t>(i) * pc + j];
    col0 += pc;
  }
  bool rec = false;
  if (Tape::active() != nullptr) {
    for (const auto& p : parts) {
      if (p.node()->requires_grad) {
        rec = true;
        break;
      }
    }
  }
  if (rec) {
    std::vector<detail::NodePtr> nodes;
    std::vector<int> offsets;
    int c0 = 0;
    for (const auto& p : parts) {
      nodes.push_back(p.node());
      offsets.push_back(c0);
      c0 += p.cols();
    }
    record(out, nodes, [nodes, offsets, m, total](detail::Node& o) {
      for (std::size_t pi = 0; pi < nodes.size(); ++pi) {
        const auto& p = nodes[pi];
        if (!p->requires_grad) continue;
        detail::ensure_grad(*p);
        const int pc = p->shape[1];
        const int c0 = offsets[pi];
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < pc; ++j)
            p->grad[static_cast<std::size_t>(i) * pc + j] += o.grad[static_cast<std::size_t>(i) * total + c0 + j];
      }
    });
  }
  finish(out);
  return Tensor(out);
}

Tensor slice_cols(const Tensor& x, int start, int len) {
  require_rank2(x, "slice_cols");
  const int m = x.rows(), n = x.cols();
  if (start < 0 || len < 0 || start + len > n) {
    throw DimensionError("slice_cols: range [" + std::to_string(start) + ", " +
                         std::to_string(start + len) + ") out of " + shape_str(x.shape()));
  }
  auto out = make_node({m, len}, "slice_cols");
  const auto& xv = x.values();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < len; ++j)
      out->value[static_cast<std::size_t>(i) * len + j] = xv[static_cast<std::size_t>(i) * n + start + j];
  if (is_recording({&x})) {
    record(out, {x.node()}, [px = x.node(), m, n, start, len](detail::Node& o) {
      detail::ensure_grad(*px);
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < len; ++j)
          px->grad[static_cast<std::size_t>(i) * n + start + j] += o.grad[static_cast<std::size_t>(i) * len + j];
    });
  }
  finish(out);
  return Tensor(out);
}

Tensor mean_rows(const Tensor& x) {
  require_rank2(x, "mean_rows");
  const int m = x.rows(), n = x.cols();
  if (m < 1) throw DimensionError("mean_rows: no rows");
  auto out = make_node({1, n}, "mean_rows");
  const auto& xv = x.values();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out->value[static_cast<std::size_t>(j)] += xv[static_cast<std::size_t>(i) * n + j];
  for (int j = 0; j < n; ++j) out->value[static_cast<std::size_t>(j)] /= m;
  if (is_recording({&x})) {
    record(out, {x.node()}, [px = x.node(), m, n](detail::Node& o) {
      detail::ensure_grad(*px);
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
          px->grad[static_cast<std::size_t>(i) * n + j] += o.grad[static_cast<std::size_t>(j)] / m;
    });
  }
  finish(out);
  return Tensor(out);
}

Tensor sum_all(const Tensor& x) {
  auto out = make_node({1}, "sum_all");
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  out->value[0] = acc;
  if (is_recording({&x})) {
    record(out, {x.node()}, [px = x.node()](detail::Node& o) {
      detail::ensure_grad(*px);
      for (double& g : px->grad) g += o.grad[0];
    });
  }
  finish(out);
  return Tensor(out);
}

Tensor cross_entropy_logits(const Tensor& logits, int label) {
  const int c = logits.numel();
  if (logits.rank() > 2 || (logits.rank() == 2 && logits.rows() != 1)) {
    throw DimensionError("cross_entropy_logits: expected [C] or [1 x C], got " + shape_str(logits.shape()));
  }
  if (label < 0 || label >= c) {
    throw ParameterError("cross_entropy_logits: label " + std::to_string(label) + " out of range [0, " +
                         std::to_string(c) + ")");
  }
  const auto& lv = logits.values();
  double mx = lv[0];
  for (int j = 1; j < c; ++j) mx = std::max(mx, lv[static_cast<std::size_t>(j)]);
  double sum = 0.0;
  for (int j = 0; j < c; ++j) sum += std::exp(lv[static_cast<std::size_t>(j)] - mx);
  auto out = make_node({1}, "cross_entropy_logits");
  out->value[0] = std::log(sum) + mx - lv[static_cast<std::size_t>(label)];
  if (is_recording({&logits})) {
    record(out, {logits.node()}, [pl = logits.node(), label, c](detail::Node& o) {
      detail::ensure_grad(*pl);
      const auto& lv = pl->value;
      double mx = lv[0];
      for (int j = 1; j < c; ++j) mx = std::max(mx, lv[static_cast<std::size_t>(j)]);
      double sum = 0.0;
      for (int j = 0; j < c; ++j) sum += std::exp(lv[static_cast<std::size_t>(j)] - mx);
      const double up = o.grad[0];
      for (int j = 0; j < c; ++j) {
        const double p = std::exp(lv[static_cast<std::size_t>(j)] - mx) / sum;
        pl->grad[static_cast<std::size_t>(j)] += up * (p - (j == label ? 1.0 : 0.0));
      }
    });
  }
  finish(out);
  return Tensor(out);
}

Tensor dropout(const Tensor& x, double rate, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) {
    throw ParameterError("dropout: rate must be in [0, 1), got " + std::to_string(rate));
  }
  if (rate == 0.0) return x;
  auto mask = std::make_shared<std::vector<double>>(x.values().size());
  const double keep_inv = 1.0 / (1.0 - rate);
  for (double& m : *mask) m = rng.bernoulli(1.0 - rate) ? keep_inv : 0.0;
  auto out = make_node(x.shape(), "dropout");
  const auto& xv = x.values();
  for (std::size_t i = 0; i < xv.size(); ++i) out->value[i] = xv[i] * (*mask)[i];
  if (is_recording({&x})) {
    record(out, {x.node()}, [px = x.node(), mask](detail::Node& o) {
      detail::ensure_grad(*px);
      for (std::size_t i = 0; i < o.grad.size(); ++i) px->grad[i] += o.grad[i] * (*mask)[i];
    });
  }
  finish(out);
  return Tensor(out);
}

Tensor detached_copy(const Tensor& x) {
  auto n = std::make_shared<detail::Node>();
  n->shape = x.shape();
  n->value = x.values();
  return Tensor(std::move(n));
}

}  // namespace mvf
