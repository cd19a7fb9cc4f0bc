#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "mvf/tensor.hpp"

namespace mvf {

// Named registry of trainable tensors. Registration order is stable and is
// the canonical iteration order for optimizers, checkpoints and gradchecks.
class ParamStore {
 public:
  Tensor add(const std::string& name, const Shape& shape, std::vector<double> values) {
    if (by_name_.count(name) != 0) {
      throw StateError("parameter registered twice: " + name);
    }
    Tensor t = Tensor::param(shape, std::move(values));
    by_name_.emplace(name, t);
    order_.push_back(name);
    return t;
  }

  Tensor get(const std::string& name) const {
    auto it = by_name_.find(name);
    if (it == by_name_.end()) {
      throw StateError("unknown parameter: " + name);
    }
    return it->second;
  }

  bool has(const std::string& name) const { return by_name_.count(name) != 0; }

  const std::vector<std::string>& names() const { return order_; }

  std::size_t tensor_count() const { return order_.size(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& name : order_) n += static_cast<std::size_t>(get(name).numel());
    return n;
  }

  void zero_grad() {
    for (const auto& name : order_) get(name).zero_grad();
  }

  // Fresh storage with copied values (zeroed grads). Used for checkpoints.
  ParamStore deep_copy() const {
    ParamStore out;
    for (const auto& name : order_) {
      const Tensor& t = by_name_.at(name);
      out.add(name, t.shape(), t.values());
    }
    return out;
  }

  // Copies values from another store with the identical parameter set.
  void load_values_from(const ParamStore& other) {
    if (other.order_ != order_) {
      throw StateError("parameter sets differ; cannot load values");
    }
    for (const auto& name : order_) {
      Tensor dst = get(name);
      Tensor src = other.get(name);
      if (dst.shape() != src.shape()) {
        throw DimensionError("parameter " + name + " shape changed: " + shape_str(dst.shape()) +
                             " vs " + shape_str(src.shape()));
      }
      dst.mutable_values() = src.values();
    }
  }

 private:
  std::unordered_map<std::string, Tensor> by_name_;
  std::vector<std::string> order_;
};

}  // namespace mvf
