#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "vce/ops.hpp"
#include "vce/rng.hpp"

namespace vce::nn {

// Uniform(-b, b) with b = gain * sqrt(6 / fan_in): He-uniform when gain = 1.
template <typename T>
Tensor<T> he_uniform(Shape shape, std::size_t fan_in, Rng& rng, double gain = 1.0) {
  Tensor<T> t(std::move(shape));
  const double bound = gain * std::sqrt(6.0 / static_cast<double>(fan_in));
  for (auto& v : t.values()) v = static_cast<T>(rng.uniform(-bound, bound));
  return t;
}

template <typename T>
struct ConvLayer {
  Parameter<T> weight;  // [out, in, k, k]
  Parameter<T> bias;    // [out]

  std::size_t out_channels() const { return weight.shape()[0]; }
  std::size_t in_channels() const { return weight.shape()[1]; }
  std::size_t kernel() const { return weight.shape()[2]; }

  std::vector<Parameter<T>*> parameters() { return {&weight, &bias}; }

  Var<T> operator()(const Var<T>& x) const { return conv2d_same(x, weight.var(), bias.var()); }
};

inline void check_kernel(std::size_t k) {
  if (k != 1 && k != 3 && k != 5) throw ShapeError("kernel size must be 1, 3 or 5, got " + std::to_string(k));
}

template <typename T>
ConvLayer<T> make_conv(std::size_t in, std::size_t out, std::size_t k, Rng& rng, double gain = 1.0) {
  check_kernel(k);
  return ConvLayer<T>{Parameter<T>(he_uniform<T>({out, in, k, k}, in * k * k, rng, gain)),
                      Parameter<T>(Tensor<T>({out}))};
}

template <typename T>
ConvLayer<T> make_conv(Tensor<T> weight, Tensor<T> bias) {
  if (weight.rank() != 4 || weight.dim(2) != weight.dim(3)) throw ShapeError("conv weight must be [out,in,k,k]");
  check_kernel(weight.dim(2));
  if (bias.shape() != Shape{weight.dim(0)}) throw ShapeError("conv bias must be [out]");
  return ConvLayer<T>{Parameter<T>(std::move(weight)), Parameter<T>(std::move(bias))};
}

// x + conv_b(act(conv_a(x))); no activation after the addition.
template <typename T>
struct ResidualBlock {
  ConvLayer<T> conv_a;
  ConvLayer<T> conv_b;
  Activation act = Activation::relu;

  std::vector<Parameter<T>*> parameters() {
    auto p = conv_a.parameters();
    for (auto* q : conv_b.parameters()) p.push_back(q);
    return p;
  }

  Var<T> operator()(const Var<T>& x) const {
    const std::size_t c = x.shape()[x.shape().size() == 4 ? 1 : 0];
    if (c != conv_a.in_channels()) {
      throw ShapeError("residual block expects " + std::to_string(conv_a.in_channels()) + " channels, got " +
                       std::to_string(c));
    }
    return add(x, conv_b(activation(conv_a(x), act)));
  }
};

// The residual branch's second convolution starts scaled by 1/sqrt(depth) so
// a stack of `depth` blocks keeps activations O(1) at initialization.
template <typename T>
ResidualBlock<T> make_residual_block(std::size_t channels, std::size_t depth, Rng& rng) {
  auto a = make_conv<T>(channels, channels, 3, rng);
  auto b = make_conv<T>(channels, channels, 3, rng, 1.0 / std::sqrt(static_cast<double>(depth)));
  return ResidualBlock<T>{std::move(a), std::move(b), Activation::relu};
}

template <typename T>
struct LinearLayer {
  Parameter<T> weight;  // [out, in]
  Parameter<T> bias;    // [out]

  std::size_t out_features() const { return weight.shape()[0]; }
  std::size_t in_features() const { return weight.shape()[1]; }

  std::vector<Parameter<T>*> parameters() { return {&weight, &bias}; }

  Var<T> operator()(const Var<T>& x) const { return linear(x, weight.var(), bias.var()); }
};

template <typename T>
LinearLayer<T> make_linear(std::size_t in, std::size_t out, Rng& rng, double gain = 1.0) {
  return LinearLayer<T>{Parameter<T>(he_uniform<T>({out, in}, in, rng, gain)), Parameter<T>(Tensor<T>({out}))};
}

template <typename T>
LinearLayer<T> make_linear(Tensor<T> weight, Tensor<T> bias) {
  if (weight.rank() != 2 || bias.shape() != Shape{weight.dim(0)}) throw ShapeError("linear layer shapes");
  return LinearLayer<T>{Parameter<T>(std::move(weight)), Parameter<T>(std::move(bias))};
}

template <typename T>
void zero_grads(const std::vector<Parameter<T>*>& params) {
  for (auto* p : params) p->zero_grad();
}

template <typename T>
void set_trainable(const std::vector<Parameter<T>*>& params, bool on) {
  for (auto* p : params) p->set_trainable(on);
}

}  // namespace vce::nn
