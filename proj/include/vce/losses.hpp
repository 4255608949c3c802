#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <span>
#include <string>

#include "vce/ops.hpp"

namespace vce::loss {

using nn::Tensor;
using nn::Var;

struct LossWeights {
  double m = 50.0;          // margin
  double lambda = 0.2;      // adversarial weight
  double sigma_reg = 0.15;  // style-regularization mix
  double alpha = 0.2;       // introspective-VAE variant only
  double beta = 1.0;        // introspective-VAE variant only

  void validate() const {
    if (!(sigma_reg >= 0.0 && sigma_reg <= 1.0)) throw ConfigError("sigma_reg must lie in [0, 1]");
    if (!(m >= 0.0)) throw ConfigError("margin m must be non-negative");
    if (!std::isfinite(lambda) || !std::isfinite(alpha) || !std::isfinite(beta)) {
      throw ConfigError("loss weights must be finite");
    }
  }
};

template <typename S>
struct LossPair {
  S encoder;
  S convertor;
};

// ------------------------------------------------------- closed forms (reals)

// KL(N(mu, exp(logvar)) || N(0, I)) = 1/2 sum(mu^2 + sigma^2 - log sigma^2 - 1).
inline double kl_divergence(std::span<const double> mu, std::span<const double> logvar) {
  if (mu.size() != logvar.size()) throw ShapeError("kl_divergence: mu and logvar lengths differ");
  double acc = 0.0;
  for (std::size_t i = 0; i < mu.size(); ++i) {
    if (!std::isfinite(mu[i]) || !std::isfinite(logvar[i])) throw NumericError("kl_divergence: non-finite input");
    acc += mu[i] * mu[i] + std::exp(logvar[i]) - logvar[i] - 1.0;
  }
  return 0.5 * acc;
}

// Multivariate Bernoulli negative log-likelihood, summed over pixels.
// Targets may be soft (any value in [0, 1]).
inline double conversion_loss(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw ShapeError("conversion_loss: lengths differ");
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) acc += -x[i] * std::log(y[i]) - (1.0 - x[i]) * std::log(1.0 - y[i]);
  return acc;
}

// Same Bernoulli form with the condition image as the target.
inline double style_regularization(std::span<const double> q, std::span<const double> y) {
  return conversion_loss(q, y);
}

inline double hinge(double m, double l_kl) { return std::max(0.0, m - l_kl); }

// ------------------------------------------------------ differentiable forms

// Per-row KL of a [B, D] posterior -> [B].
template <typename T>
Var<T> kl_per_sample(const Var<T>& mu, const Var<T>& logvar) {
  nn::require_same_shape(mu.value(), logvar.value(), "kl_per_sample");
  const std::size_t batch = mu.shape().size() == 2 ? mu.shape()[0] : 1;
  const std::size_t d = mu.numel() / batch;
  Tensor<T> out(nn::Shape{batch});
  for (std::size_t n = 0; n < batch; ++n) {
    T acc{0};
    for (std::size_t i = n * d; i < (n + 1) * d; ++i) {
      const T m = mu.value()[i], lv = logvar.value()[i];
      acc += m * m + std::exp(lv) - lv - T{1};
    }
    out[n] = T{0.5} * acc;
  }
  return nn::make_result<T>(std::move(out), {mu, logvar}, [d](nn::Node<T>& self) {
    const auto& mv = self.parents[0]->value;
    const auto& lv = self.parents[1]->value;
    if (nn::wants_grad(self, 0)) {
      auto& g = self.parents[0]->ensure_grad();
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i / d] * mv[i];
    }
    if (nn::wants_grad(self, 1)) {
      auto& g = self.parents[1]->ensure_grad();
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i / d] * T{0.5} * (std::exp(lv[i]) - T{1});
    }
  });
}

// Per-image Bernoulli NLL of predictions y against constant targets -> [B].
// Serves both the conversion loss (target x) and the style term (target q).
template <typename T>
Var<T> bernoulli_nll_per_sample(const Tensor<T>& target, const Var<T>& y) {
  nn::require_same_shape(target, y.value(), "bernoulli_nll_per_sample");
  const std::size_t batch = y.shape().size() >= 2 ? y.shape()[0] : 1;
  const std::size_t m = y.numel() / batch;
  Tensor<T> out(nn::Shape{batch});
  for (std::size_t n = 0; n < batch; ++n) {
    T acc{0};
    for (std::size_t i = n * m; i < (n + 1) * m; ++i) {
      const T x = target[i], p = y.value()[i];
      acc += -x * std::log(p) - (T{1} - x) * std::log(T{1} - p);
    }
    out[n] = acc;
  }
  return nn::make_result<T>(std::move(out), {y}, [target, m](nn::Node<T>& self) {
    auto& g = self.parents[0]->ensure_grad();
    const auto& p = self.parents[0]->value;
    for (std::size_t i = 0; i < g.numel(); ++i) {
      const T x = target[i];
      g[i] += self.grad[i / m] * (-x / p[i] + (T{1} - x) / (T{1} - p[i]));
    }
  });
}

// Elementwise max(0, m - l).
template <typename T>
Var<T> hinge(T m, const Var<T>& l) {
  Tensor<T> out = l.value();
  for (auto& v : out.values()) v = std::max(T{0}, m - v);
  return nn::make_result<T>(std::move(out), {l}, [m](nn::Node<T>& self) {
    auto& g = self.parents[0]->ensure_grad();
    const auto& lv = self.parents[0]->value;
    for (std::size_t i = 0; i < g.numel(); ++i) {
      if (m - lv[i] > T{0}) g[i] -= self.grad[i];
    }
  });
}

// ------------------------------------------------------------- loss algebra
//
// Written once over a scalar-like S so the same expressions drive both the
// real-valued report path (S = double) and training (S = Var<T>, one entry
// per support image).

namespace detail {
inline double times(double c, double s) { return c * s; }
template <typename T>
Var<T> times(double c, const Var<T>& s) {
  return nn::scale(s, static_cast<T>(c));
}
inline double plus(double a, double b) { return a + b; }
template <typename T>
Var<T> plus(const Var<T>& a, const Var<T>& b) {
  return nn::add(a, b);
}
inline double margin_hinge(double m, double l) { return hinge(m, l); }
template <typename T>
Var<T> margin_hinge(double m, const Var<T>& l) {
  return hinge(static_cast<T>(m), l);
}
}  // namespace detail

// Plain VAE bound: both networks minimise L_KL(z) + L_CON(x, x_c).
template <typename S>
LossPair<S> vae_losses(const S& kl_z, const S& con) {
  S total = detail::plus(kl_z, con);
  return {total, total};
}

// Introspective pair with prior samples z_s:
// L_E = L_KL(z) + a * sum_j max(0, m - L_KL(z_j)) + b * L_CON
// L_C = a * sum_j L_KL(z_j) + b * L_CON,  j in {c, s}
template <typename S>
LossPair<S> introvae_losses(const S& kl_z, const S& kl_zc, const S& kl_zs, const S& con, const LossWeights& w) {
  using detail::margin_hinge;
  using detail::plus;
  using detail::times;
  S hinges = plus(margin_hinge(w.m, kl_zc), margin_hinge(w.m, kl_zs));
  S enc = plus(plus(kl_z, times(w.alpha, hinges)), times(w.beta, con));
  S con_side = plus(times(w.alpha, plus(kl_zc, kl_zs)), times(w.beta, con));
  return {enc, con_side};
}

// Large-margin pair without style regularization:
// L_E = L_KL(z) + l * max(0, m - L_KL(z_c)) + L_CON
// L_C = L_KL(z) + l * L_KL(z_c) + L_CON
template <typename S>
LossPair<S> lmvae_basic_losses(const S& kl_z, const S& kl_zc, const S& con, const LossWeights& w) {
  using detail::margin_hinge;
  using detail::plus;
  using detail::times;
  S enc = plus(plus(kl_z, times(w.lambda, margin_hinge(w.m, kl_zc))), con);
  S conv = plus(plus(kl_z, times(w.lambda, kl_zc)), con);
  return {enc, conv};
}

// Full pair: the conversion term is mixed with the style term,
// (1 - sigma) * L_CON + sigma * L_REG. At sigma = 0 the expressions evaluate
// bit-for-bit to lmvae_basic_losses; at sigma = lambda = 0 to vae_losses.
template <typename S>
LossPair<S> lmvae_losses(const S& kl_z, const S& kl_zc, const S& con, const S& reg, const LossWeights& w) {
  w.validate();
  using detail::margin_hinge;
  using detail::plus;
  using detail::times;
  const double keep = 1.0 - w.sigma_reg;
  S enc = plus(plus(plus(kl_z, times(w.lambda, margin_hinge(w.m, kl_zc))), times(keep, con)), times(w.sigma_reg, reg));
  S conv = plus(plus(plus(kl_z, times(w.lambda, kl_zc)), times(keep, con)), times(w.sigma_reg, reg));
  return {enc, conv};
}

// ------------------------------------------------------------------- report

// Per-step loss summary, batch means in nats.
struct LossReport {
  double l_kl_z = 0.0;
  double l_kl_zc = 0.0;
  double l_con = 0.0;
  double l_reg = 0.0;
  double hinge = 0.0;
  double total_encoder = 0.0;
  double total_convertor = 0.0;

  bool finite() const {
    for (double v : {l_kl_z, l_kl_zc, l_con, l_reg, hinge, total_encoder, total_convertor}) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  friend bool operator==(const LossReport&, const LossReport&) = default;
};

inline constexpr const char* kMetricsHeader = "step,phase,l_kl_z,l_kl_zc,l_con,l_reg,hinge,total_encoder,total_convertor";

// One CSV row; %.17g keeps every double exactly recoverable.
inline std::string metrics_row(std::uint64_t step, const std::string& phase, const LossReport& r) {
  char buf[512];
  std::snprintf(buf, sizeof buf, "%llu,%s,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g",
                static_cast<unsigned long long>(step), phase.c_str(), r.l_kl_z, r.l_kl_zc, r.l_con, r.l_reg, r.hinge,
                r.total_encoder, r.total_convertor);
  return buf;
}

}  // namespace vce::loss
