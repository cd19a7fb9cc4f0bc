#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "mvf/error.hpp"
#include "mvf/rng.hpp"

namespace mvf {

class Tape;

using Shape = std::vector<int>;

std::string shape_str(const Shape& s);
int shape_numel(const Shape& s);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // allocated for grad-tracking leaves and reached intermediates
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;
  Tape* origin = nullptr;

  int numel() const { return static_cast<int>(value.size()); }
};

using NodePtr = std::shared_ptr<Node>;

void ensure_grad(Node& n);

}  // namespace detail

// Dense row-major fp64 tensor. The handle has value semantics but the payload
// is shared: copies alias the same storage. Ops record a backward rule onto
// the innermost live Tape when any input tracks gradients; with no tape alive
// they are plain value computations.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(detail::NodePtr node) : node_(std::move(node)) {}

  static Tensor zeros(const Shape& shape);
  static Tensor full(const Shape& shape, double v);
  static Tensor from(const Shape& shape, std::vector<double> values);
  // Grad-tracking leaf; its grad buffer exists from creation and starts at zero.
  static Tensor param(const Shape& shape, std::vector<double> values);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node()->shape; }
  int rank() const { return static_cast<int>(node()->shape.size()); }
  int numel() const { return node()->numel(); }
  int rows() const;
  int cols() const;

  const std::vector<double>& values() const { return node()->value; }
  // Direct mutation; legal only on leaves between tape recordings (optimizer use).
  std::vector<double>& mutable_values() { return node()->value; }

  double at(int i) const;
  double at(int i, int j) const;
  double scalar() const;

  bool requires_grad() const { return node()->requires_grad; }
  const std::vector<double>& grad() const;
  void zero_grad();

  const detail::NodePtr& node() const;

 private:
  detail::NodePtr node_;
};

// Records executed ops in creation order (a topological order of the graph).
// Construction pushes the tape onto a thread-local stack; destruction pops it.
// One backward per recording; reset() clears the record for a fresh forward.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Seeds d(loss)/d(loss) = 1 and runs recorded ops in reverse, accumulating
  // into every grad-tracking input. Gradients of parameters the loss never
  // touched stay zero.
  void backward(const Tensor& loss);
  void reset();

  std::size_t recorded_ops() const { return records_.size(); }

  static Tape* active();
  void record(detail::NodePtr n) { records_.push_back(std::move(n)); }

 private:
  std::vector<detail::NodePtr> records_;
  bool consumed_ = false;
};

// ---- elementwise and linear-algebra ops ----

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // Hadamard
Tensor scale(const Tensor& x, double c);
// Adds v (length = cols) to every row of x.
Tensor add_rowvec(const Tensor& x, const Tensor& v);
// Adds v (length = rows) to every column of x; bias-per-channel for conv maps.
Tensor add_colvec(const Tensor& x, const Tensor& v);
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& x);
Tensor relu(const Tensor& x);
// tanh(x) * sigmoid(x + sigmoid_bias); the plain form has sigmoid_bias = 0.
Tensor gated_activation(const Tensor& x, double sigmoid_bias = 0.0);
Tensor softmax_rows(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);
// Length-preserving ("same") convolution with centered taps and zero padding.
// x is [C_in x L], kernels is [C_out x C_in x W]; output [C_out x L].
Tensor dilated_conv1d(const Tensor& x, const Tensor& kernels, int dilation);
Tensor concat_rows(const std::vector<Tensor>& parts);
std::vector<Tensor> split_rows(const Tensor& x, const std::vector<int>& sizes);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor slice_cols(const Tensor& x, int start, int len);
Tensor mean_rows(const Tensor& x);  // [m x n] -> [1 x n]
Tensor sum_all(const Tensor& x);    // -> scalar [1]
// Numerically stable -log softmax(logits)[label]; logits is [1 x C] or [C].
Tensor cross_entropy_logits(const Tensor& logits, int label);
// Inverted-dropout; identity when rate == 0. The mask is drawn from rng.
Tensor dropout(const Tensor& x, double rate, Rng& rng);
// Value copy detached from any tape.
Tensor detached_copy(const Tensor& x);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

namespace testing {
// Fault injection for gradcheck negative controls: scales the upstream
// gradient of every op with the given name during backward.
void set_backward_corruption(const std::string& op, double factor);
void clear_backward_corruption();
// Per-op NaN/Inf output scanning; on by default in debug builds only.
void set_finite_checks(bool enable);
}  // namespace testing

}  // namespace mvf
