#pragma once

#include <functional>
#include <string>

#include "mvf/params.hpp"

namespace mvf {

// Central-difference gradient of a scalar function with respect to one named
// parameter, one coordinate at a time: (f(th+h) - f(th-h)) / (2h). The
// function is evaluated with the perturbed store; values are restored after.
inline Tensor finite_diff_grad(const std::function<double(const ParamStore&)>& f,
                               ParamStore& params, const std::string& param_name, double h) {
  if (h <= 0.0) {
    throw ParameterError("finite_diff_grad: h must be positive");
  }
  Tensor p = params.get(param_name);
  auto& val = p.mutable_values();
  std::vector<double> out(val.size());
  for (std::size_t i = 0; i < val.size(); ++i) {
    const double saved = val[i];
    val[i] = saved + h;
    const double fp = f(params);
    val[i] = saved - h;
    const double fm = f(params);
    val[i] = saved;
    out[i] = (fp - fm) / (2.0 * h);
  }
  return Tensor::from(p.shape(), std::move(out));
}

}  // namespace mvf
