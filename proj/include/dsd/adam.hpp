#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "dsd/tensor.hpp"

namespace dsd {

// Adam with bias correction. Moments are kept per parameter tensor in
// the same order the parameters are registered.
struct AdamState {
  std::int64_t step = 0;
  std::vector<Tensor> first_moment;
  std::vector<Tensor> second_moment;
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  static AdamState init(const std::vector<const Tensor*>& params, double lr) {
    AdamState s;
    s.lr = lr;
    for (const Tensor* p : params) {
      s.first_moment.push_back(Tensor::zeros(p->shape));
      s.second_moment.push_back(Tensor::zeros(p->shape));
    }
    return s;
  }
};

inline void adam_step(const std::vector<Tensor*>& params,
                      const std::vector<const Tensor*>& grads, AdamState& state) {
  if (params.size() != grads.size() || params.size() != state.first_moment.size()) {
    throw ShapeError("adam_step: parameter/gradient/state counts differ");
  }
  state.step += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t t = 0; t < params.size(); ++t) {
    Tensor& p = *params[t];
    const Tensor& g = *grads[t];
    Tensor& m = state.first_moment[t];
    Tensor& v = state.second_moment[t];
    if (!same_shape(p, g) || !same_shape(p, m)) {
      throw ShapeError("adam_step: shape mismatch at parameter " + std::to_string(t) + ": " +
                       shape_str(p.shape) + " vs grad " + shape_str(g.shape));
    }
    for (std::size_t i = 0; i < p.data.size(); ++i) {
      const double gi = g.data[i];
      m.data[i] = state.beta1 * m.data[i] + (1.0 - state.beta1) * gi;
      v.data[i] = state.beta2 * v.data[i] + (1.0 - state.beta2) * gi * gi;
      const double mhat = m.data[i] / bc1;
      const double vhat = v.data[i] / bc2;
      p.data[i] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

}  // namespace dsd
