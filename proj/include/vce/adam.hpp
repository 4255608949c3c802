#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "vce/autodiff.hpp"

namespace vce::nn {

template <typename T>
struct AdamState {
  static constexpr double beta1 = 0.9;
  static constexpr double beta2 = 0.999;
  static constexpr double eps = 1e-8;

  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
  std::uint64_t t = 0;

  friend bool operator==(const AdamState& a, const AdamState& b) { return a.t == b.t && a.m == b.m && a.v == b.v; }
};

template <typename T>
AdamState<T> make_adam_state(const std::vector<Parameter<T>*>& params) {
  AdamState<T> s;
  for (auto* p : params) {
    s.m.emplace_back(p->shape());
    s.v.emplace_back(p->shape());
  }
  return s;
}

// One bias-corrected Adam update from the gradients currently held by
// `params`. Moment buffers are allocated on first use.
template <typename T>
void adam_step(const std::vector<Parameter<T>*>& params, AdamState<T>& state, double lr) {
  if (!(lr > 0.0)) throw UsageError("adam_step: learning rate must be positive");
  if (state.m.empty() && state.t == 0) state = make_adam_state(params);
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw ShapeError("adam_step: state tracks " + std::to_string(state.m.size()) + " tensors, got " +
                     std::to_string(params.size()));
  }
  ++state.t;
  const double bc1 = 1.0 - std::pow(AdamState<T>::beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(AdamState<T>::beta2, static_cast<double>(state.t));
  const T b1 = static_cast<T>(AdamState<T>::beta1), b2 = static_cast<T>(AdamState<T>::beta2);
  const T step = static_cast<T>(lr / bc1);
  const T inv_bc2 = static_cast<T>(1.0 / bc2);
  const T eps = static_cast<T>(AdamState<T>::eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i]->mutable_value();
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.shape() != p.shape() || v.shape() != p.shape()) throw ShapeError("adam_step: moment/parameter shape mismatch");
    if (!params[i]->has_grad()) continue;
    const auto& g = params[i]->grad_ref();
    for (std::size_t j = 0; j < p.numel(); ++j) {
      m[j] = b1 * m[j] + (T{1} - b1) * g[j];
      v[j] = b2 * v[j] + (T{1} - b2) * g[j] * g[j];
      p[j] -= step * m[j] / (std::sqrt(v[j] * inv_bc2) + eps);
    }
  }
}

// Plain gradient descent, used by the SGD flavour of the Reptile inner loop.
template <typename T>
void sgd_step(const std::vector<Parameter<T>*>& params, double lr) {
  for (auto* prm : params) {
    if (!prm->has_grad()) continue;
    auto& p = prm->mutable_value();
    const auto& g = prm->grad_ref();
    for (std::size_t j = 0; j < p.numel(); ++j) p[j] -= static_cast<T>(lr) * g[j];
  }
}

}  // namespace vce::nn
