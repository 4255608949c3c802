#pragma once

// The three training phases: Reptile pre-training, plain-VAE training and
// large-margin (LMVAE) fine-tuning, plus the learning-rate schedule, running
// loss windows and the saddle-point (theorem 1) monitor.

#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "vce/adam.hpp"
#include "vce/data/omniglot.hpp"
#include "vce/losses.hpp"
#include "vce/model.hpp"

namespace vce::train {

using data::Dataset;
using data::Episode;
using loss::LossReport;
using loss::LossWeights;
using nn::Parameter;
using nn::Tensor;
using nn::Var;

enum class Phase : std::uint8_t { init = 0, pretrain = 1, vae = 2, lmvae = 3 };

inline const char* phase_name(Phase p) {
  switch (p) {
    case Phase::init:
      return "init";
    case Phase::pretrain:
      return "pretrain";
    case Phase::vae:
      return "vae";
    case Phase::lmvae:
      return "lmvae";
  }
  return "?";
}

inline Phase phase_from_code(std::uint8_t c) {
  if (c > 3) throw CheckpointError("unknown phase code " + std::to_string(c));
  return static_cast<Phase>(c);
}

enum class InnerOptimizer { adam, sgd };

struct TrainConfig {
  std::size_t support_size = 19;
  std::size_t latent_dim = 56;
  double m = 50.0;
  double lambda = 0.2;
  double sigma_reg = 0.15;
  double lr_init = 0.0002;
  std::vector<std::uint64_t> lr_halve_steps;
  std::size_t pretrain_episodes = 1000;
  std::size_t vae_episodes = 20000;
  std::size_t lmvae_episodes = 20000;
  double reptile_alpha = 0.5;
  std::size_t reptile_inner_iterations = 5;
  InnerOptimizer reptile_inner_optimizer = InnerOptimizer::adam;
  std::uint64_t seed = 0;
  std::size_t thread_count = 1;

  // architecture (the standard values are the only ones used outside tests)
  std::size_t channels = 32;
  std::size_t residual_blocks = 8;

  std::size_t checkpoint_every = 1000;
  std::size_t keep_checkpoints = 3;
  std::size_t monitor_window = 1000;
  double monitor_tol = 0.1;
  // phase-2 convergence: stop once two consecutive windows each improve
  // the mean conversion loss by less than the given fraction
  bool early_stop = false;
  std::size_t early_stop_window = 1000;
  double early_stop_min_improvement = 0.005;

  LossWeights weights() const {
    LossWeights w;
    w.m = m;
    w.lambda = lambda;
    w.sigma_reg = sigma_reg;
    return w;
  }

  model::ModelSpec model_spec() const { return model::ModelSpec{latent_dim / 2, channels, residual_blocks}; }

  std::size_t episodes(Phase p) const {
    switch (p) {
      case Phase::pretrain:
        return pretrain_episodes;
      case Phase::vae:
        return vae_episodes;
      case Phase::lmvae:
        return lmvae_episodes;
      default:
        return 0;
    }
  }

  void validate() const {
    if (support_size < 1) throw ConfigError("support_size must be at least 1");
    if (latent_dim != 2 * data::kGlyphSize) {
      throw ConfigError("latent_dim must be twice the image width (" + std::to_string(2 * data::kGlyphSize) + ")");
    }
    if (!(lr_init > 0.0) || !std::isfinite(lr_init)) throw ConfigError("lr_init must be positive");
    if (!(reptile_alpha >= 0.0 && reptile_alpha <= 1.0)) throw ConfigError("reptile_alpha must lie in [0, 1]");
    if (reptile_inner_iterations < 1) throw ConfigError("reptile_inner_iterations must be at least 1");
    if (thread_count < 1) throw ConfigError("thread_count must be at least 1");
    if (channels < 1 || residual_blocks < 1) throw ConfigError("channels and residual_blocks must be positive");
    if (monitor_window < 1 || early_stop_window < 1) throw ConfigError("window sizes must be positive");
    if (!(monitor_tol >= 0.0)) throw ConfigError("monitor_tol must be non-negative");
    if (keep_checkpoints < 1) throw ConfigError("keep_checkpoints must be at least 1");
    weights().validate();
  }
};

// Piecewise-constant rate: lr_init halved once for every configured
// halving step already reached.
inline double lr_schedule(std::uint64_t step, const TrainConfig& cfg) {
  int halvings = 0;
  for (auto s : cfg.lr_halve_steps) halvings += step >= s ? 1 : 0;
  return std::ldexp(cfg.lr_init, -halvings);
}

// Mean of the last `capacity` pushed values.
class RunningWindow {
 public:
  explicit RunningWindow(std::size_t capacity = 1000) : capacity_(capacity) {}

  void push(double v) {
    values_.push_back(v);
    if (values_.size() > capacity_) values_.pop_front();
  }

  double mean() const {
    if (values_.empty()) return 0.0;
    // Neumaier summation keeps the mean independent of window history.
    double s = 0.0, c = 0.0;
    for (double v : values_) {
      const double t = s + v;
      c += std::abs(s) >= std::abs(v) ? (s - t) + v : (v - t) + s;
      s = t;
    }
    return (s + c) / static_cast<double>(values_.size());
  }

  bool full() const { return values_.size() == capacity_; }
  std::size_t size() const { return values_.size(); }
  std::size_t capacity() const { return capacity_; }
  const std::deque<double>& values() const { return values_; }

  static RunningWindow from_values(std::size_t capacity, const std::vector<double>& vals) {
    RunningWindow w(capacity);
    for (double v : vals) w.push(v);
    return w;
  }

  friend bool operator==(const RunningWindow&, const RunningWindow&) = default;

 private:
  std::size_t capacity_;
  std::deque<double> values_;
};

template <typename T>
struct TrainState {
  model::VceModel<T> model;
  nn::AdamState<T> adam_encoder;
  nn::AdamState<T> adam_convertor;
  std::uint64_t step = 0;
  Phase phase = Phase::init;
  std::uint64_t phase_episode = 0;
  Rng rng;
  RunningWindow kl_z;
  RunningWindow kl_zc;
  RunningWindow con;
  // early-stop bookkeeping
  double es_sum = 0.0;
  std::uint64_t es_count = 0;
  std::vector<double> es_history;
  bool converged = false;
};

template <typename T>
TrainState<T> make_state(const TrainConfig& cfg) {
  cfg.validate();
  TrainState<T> st;
  st.rng = Rng(cfg.seed);
  st.model = model::make_model<T>(cfg.model_spec(), st.rng);
  st.adam_encoder = nn::make_adam_state(st.model.encoder.parameters());
  st.adam_convertor = nn::make_adam_state(st.model.convertor.parameters());
  st.kl_z = st.kl_zc = st.con = RunningWindow(cfg.monitor_window);
  return st;
}

// ------------------------------------------------------------------ helpers

template <typename T>
struct Batch {
  Var<T> x;  // support images [B,1,28,28]
  Var<T> q;  // condition repeated [B,1,28,28]
  std::size_t size = 0;
};

template <typename T>
Batch<T> make_batch(const Episode& ep) {
  std::vector<std::vector<float>> xs;
  for (const auto& g : ep.support) xs.push_back(g.pixels);
  Batch<T> b;
  b.size = xs.size();
  b.x = model::image_batch<T>(xs, data::kGlyphSize);
  b.q = model::repeat_image<T>(ep.condition.pixels, b.size, data::kGlyphSize);
  return b;
}

template <typename T>
double batch_mean(const Var<T>& v) {
  double s = 0.0;
  for (T x : v.value().values()) s += static_cast<double>(x);
  return s / static_cast<double>(v.numel());
}

template <typename T>
double batch_hinge_mean(double m, const Var<T>& kl) {
  double s = 0.0;
  for (T x : kl.value().values()) s += std::max(0.0, m - static_cast<double>(x));
  return s / static_cast<double>(kl.numel());
}

template <typename T>
std::vector<Parameter<T>*> concat(std::vector<Parameter<T>*> a, const std::vector<Parameter<T>*>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

// Temporarily marks parameters frozen; restores the previous flags.
template <typename T>
class FreezeGuard {
 public:
  FreezeGuard(std::vector<Parameter<T>*> params, bool freeze) : params_(std::move(params)) {
    for (auto* p : params_) {
      prev_.push_back(p->trainable());
      if (freeze) p->set_trainable(false);
    }
  }
  ~FreezeGuard() {
    for (std::size_t i = 0; i < params_.size(); ++i) params_[i]->set_trainable(prev_[i]);
  }
  FreezeGuard(const FreezeGuard&) = delete;
  FreezeGuard& operator=(const FreezeGuard&) = delete;

 private:
  std::vector<Parameter<T>*> params_;
  std::vector<bool> prev_;
};

// ---------------------------------------------------------------- VAE phase

// Gradients of the plain VAE objective, mean over the support set, left in
// both networks' parameters. Draws the reparameterization noise from rng.
template <typename T>
LossReport vae_gradients(model::VceModel<T>& m, const Episode& ep, Rng& rng) {
  auto params = m.parameters();
  nn::set_trainable(params, true);
  nn::zero_grads(params);
  const Batch<T> b = make_batch<T>(ep);
  const Tensor<T> eps = model::sample_normal<T>(b.size, m.latent_dim(), rng);
  const auto post = model::encode(m, b.x, b.q);
  const auto s = model::reparameterize(post.mu, post.logvar, eps);
  const Var<T> y = model::convert(m, s.z, b.q);
  const Var<T> kl = loss::kl_per_sample(post.mu, post.logvar);
  const Var<T> con = loss::bernoulli_nll_per_sample(b.x.value(), y);
  const auto pair = loss::vae_losses(kl, con);
  const Var<T> total = nn::mean(pair.encoder);
  nn::backward(total);

  LossReport r;
  r.l_kl_z = batch_mean(kl);
  r.l_con = batch_mean(con);
  r.l_reg = batch_mean(loss::bernoulli_nll_per_sample(b.q.value(), y.detach()));
  r.total_encoder = r.total_convertor = static_cast<double>(total.value().item());
  return r;
}

// One joint Adam step of both networks on the shared objective.
template <typename T>
LossReport vae_update(TrainState<T>& st, const Episode& ep, double lr) {
  LossReport r = vae_gradients(st.model, ep, st.rng);
  nn::adam_step(st.model.encoder.parameters(), st.adam_encoder, lr);
  nn::adam_step(st.model.convertor.parameters(), st.adam_convertor, lr);
  return r;
}

// -------------------------------------------------------------- LMVAE phase

enum class LmvaeStage { encoder_backward, encoder_step, convertor_backward, convertor_step };

template <typename T>
using LmvaeObserver = std::function<void(LmvaeStage, model::VceModel<T>&)>;

// Per-image terms of the encoder-side objective with the convertor output
// detached before re-encoding, so the margin term only reaches the encoder.
template <typename T>
struct EncoderTerms {
  Var<T> kl_z;
  Var<T> kl_zc;
  Var<T> con;
  Var<T> reg;
  Var<T> z;
};

template <typename T>
EncoderTerms<T> encoder_terms(model::VceModel<T>& m, const Batch<T>& b, const Tensor<T>& eps, bool margin_grad) {
  const auto post = model::encode(m, b.x, b.q);
  const auto s = model::reparameterize(post.mu, post.logvar, eps);
  const Var<T> xc = model::convert(m, s.z, b.q);
  EncoderTerms<T> t;
  t.z = s.z;
  t.kl_z = loss::kl_per_sample(post.mu, post.logvar);
  t.con = loss::bernoulli_nll_per_sample(b.x.value(), xc);
  t.reg = loss::bernoulli_nll_per_sample(b.q.value(), xc);
  // With a zero margin weight the re-encode only feeds the report.
  FreezeGuard<T> guard(m.encoder.parameters(), !margin_grad);
  const auto re = model::encode(m, xc.detach(), b.q);
  t.kl_zc = loss::kl_per_sample(re.mu, re.logvar);
  return t;
}

// Per-image terms of the convertor-side objective: rules fixed, the
// converted image re-encoded by the (frozen) encoder so KL(z_c) reaches the
// convertor only.
template <typename T>
struct ConvertorTerms {
  Var<T> kl_zc;
  Var<T> con;
  Var<T> reg;
};

template <typename T>
ConvertorTerms<T> convertor_terms(model::VceModel<T>& m, const Batch<T>& b, const Var<T>& z, bool margin_grad,
                                  const Var<T>& fallback_kl_zc) {
  const Var<T> xc = model::convert(m, z.detach(), b.q);
  ConvertorTerms<T> t;
  t.con = loss::bernoulli_nll_per_sample(b.x.value(), xc);
  t.reg = loss::bernoulli_nll_per_sample(b.q.value(), xc);
  if (margin_grad) {
    const auto re = model::encode(m, xc, b.q);
    t.kl_zc = loss::kl_per_sample(re.mu, re.logvar);
  } else {
    t.kl_zc = fallback_kl_zc.detach();
  }
  return t;
}

// One alternating episode: encoder update on L_E, then convertor update on
// L_C with the freshly updated encoder. Both objectives are support-set
// means. The encoder step never touches the convertor and vice versa.
template <typename T>
LossReport lmvae_update(TrainState<T>& st, const Episode& ep, const LossWeights& w, double lr,
                        const LmvaeObserver<T>& observe = {}) {
  w.validate();
  auto& m = st.model;
  const auto enc = m.encoder.parameters();
  const auto cnv = m.convertor.parameters();
  const auto all = concat(enc, cnv);
  const bool margin = w.lambda != 0.0;
  const Batch<T> b = make_batch<T>(ep);
  const Tensor<T> eps = model::sample_normal<T>(b.size, m.latent_dim(), st.rng);

  LossReport r;
  nn::zero_grads(all);
  nn::set_trainable(enc, true);
  nn::set_trainable(cnv, false);
  const auto te = encoder_terms(m, b, eps, margin);
  const auto pe = loss::lmvae_losses(te.kl_z, te.kl_zc, te.con, te.reg, w);
  const Var<T> l_e = nn::mean(pe.encoder);
  nn::backward(l_e);
  if (observe) observe(LmvaeStage::encoder_backward, m);
  nn::adam_step(enc, st.adam_encoder, lr);
  if (observe) observe(LmvaeStage::encoder_step, m);

  nn::zero_grads(all);
  nn::set_trainable(enc, false);
  nn::set_trainable(cnv, true);
  const auto tc = convertor_terms(m, b, te.z, margin, te.kl_zc);
  const auto pc = loss::lmvae_losses(te.kl_z.detach(), tc.kl_zc, tc.con, tc.reg, w);
  const Var<T> l_c = nn::mean(pc.convertor);
  nn::backward(l_c);
  if (observe) observe(LmvaeStage::convertor_backward, m);
  nn::adam_step(cnv, st.adam_convertor, lr);
  if (observe) observe(LmvaeStage::convertor_step, m);
  nn::set_trainable(enc, true);

  r.l_kl_z = batch_mean(te.kl_z);
  r.l_kl_zc = batch_mean(te.kl_zc);
  r.l_con = batch_mean(te.con);
  r.l_reg = batch_mean(te.reg);
  r.hinge = batch_hinge_mean(w.m, te.kl_zc);
  r.total_encoder = static_cast<double>(l_e.value().item());
  r.total_convertor = static_cast<double>(l_c.value().item());
  return r;
}

// ------------------------------------------------------------------ Reptile

// phi <- phi + alpha (phi~ - phi), where phi~ is what `inner` leaves in the
// parameters. lerp is exact at both endpoints.
template <typename T, typename Inner>
void reptile_outer_step(const std::vector<Parameter<T>*>& params, double alpha, Inner&& inner) {
  std::vector<Tensor<T>> phi;
  phi.reserve(params.size());
  for (auto* p : params) phi.push_back(p->value());
  inner();
  const T a = static_cast<T>(alpha);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& v = params[i]->mutable_value();
    for (std::size_t j = 0; j < v.numel(); ++j) v[j] = std::lerp(phi[i][j], v[j], a);
  }
}

// -------------------------------------------------------------- monitoring

struct MonitorStatus {
  bool satisfied = false;
  double mean_kl_z = 0.0;
  double mean_kl_zc = 0.0;
  std::size_t window = 0;
  double m = 0.0;
};

// Saddle-point check: mean KL(z) <= m (1 + tol) and mean KL(z_c) within
// [m/2, 3m/2].
inline MonitorStatus theorem1_status(double mean_kl_z, double mean_kl_zc, double m, double tol = 0.1) {
  MonitorStatus s;
  s.mean_kl_z = mean_kl_z;
  s.mean_kl_zc = mean_kl_zc;
  s.m = m;
  s.satisfied = mean_kl_z <= m * (1.0 + tol) && mean_kl_zc >= 0.5 * m && mean_kl_zc <= 1.5 * m;
  return s;
}

template <typename T>
MonitorStatus theorem1_monitor(const TrainState<T>& st, const TrainConfig& cfg) {
  auto s = theorem1_status(st.kl_z.mean(), st.kl_zc.mean(), cfg.m, cfg.monitor_tol);
  s.window = st.kl_z.size();
  return s;
}

inline std::string describe(const MonitorStatus& s) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "theorem-1 monitor: %s (window %zu, mean KL(z) %.3f, mean KL(z_c) %.3f, m %.3g)",
                s.satisfied ? "satisfied" : "violated", s.window, s.mean_kl_z, s.mean_kl_zc, s.m);
  return buf;
}

// ------------------------------------------------------------ phase drivers

template <typename T>
struct TrainHooks {
  std::function<void(std::uint64_t step, Phase, const LossReport&)> metrics;
  // called after every `checkpoint_every` completed phase episodes
  std::function<void(const TrainState<T>&)> checkpoint;
  std::function<void(const MonitorStatus&)> monitor;
  LmvaeObserver<T> lmvae_observer;
  // return false to stop early (e.g. a wall-clock limit)
  std::function<bool(const TrainState<T>&)> keep_going;
};

namespace detail {

template <typename T>
void record(TrainState<T>& st, Phase phase, const LossReport& r, const TrainHooks<T>& hooks) {
  if (!r.finite()) throw NumericError("non-finite loss at step " + std::to_string(st.step));
  st.kl_z.push(r.l_kl_z);
  st.con.push(r.l_con);
  if (phase == Phase::lmvae) st.kl_zc.push(r.l_kl_zc);
  if (hooks.metrics) hooks.metrics(st.step, phase, r);
  ++st.step;
}

template <typename T>
void early_stop_update(TrainState<T>& st, const TrainConfig& cfg, double con) {
  st.es_sum += con;
  if (++st.es_count < cfg.early_stop_window) return;
  st.es_history.push_back(st.es_sum / static_cast<double>(st.es_count));
  st.es_sum = 0.0;
  st.es_count = 0;
  const auto& h = st.es_history;
  if (!cfg.early_stop || h.size() < 3) return;
  const auto gain = [&](std::size_t i) { return (h[i - 1] - h[i]) / h[i - 1]; };
  const std::size_t n = h.size();
  if (gain(n - 1) < cfg.early_stop_min_improvement && gain(n - 2) < cfg.early_stop_min_improvement) st.converged = true;
}

template <typename T>
void enter_phase(TrainState<T>& st, Phase phase, const TrainConfig& cfg) {
  if (st.phase == phase) return;
  st.phase = phase;
  st.phase_episode = 0;
  st.converged = false;
  st.es_sum = 0.0;
  st.es_count = 0;
  st.es_history.clear();
  st.kl_z = st.kl_zc = st.con = RunningWindow(cfg.monitor_window);
}

}  // namespace detail

// One Reptile outer iteration: a class is drawn, k inner episodes of the
// plain VAE objective run on it with a fresh inner optimizer, then the
// weights move a fraction alpha towards the adapted ones.
template <typename T>
void reptile_iteration(TrainState<T>& st, const Dataset& ds, std::span<const std::size_t> classes,
                       const TrainConfig& cfg, const TrainHooks<T>& hooks) {
  if (classes.empty()) throw SamplingError("pre-training needs a non-empty training split");
  const std::size_t cls = classes[st.rng.index(classes.size())];
  auto& m = st.model;
  auto inner_e = nn::make_adam_state(m.encoder.parameters());
  auto inner_c = nn::make_adam_state(m.convertor.parameters());
  reptile_outer_step(m.parameters(), cfg.reptile_alpha, [&] {
    for (std::size_t j = 0; j < cfg.reptile_inner_iterations; ++j) {
      const Episode ep = data::sample_episode_from_class(ds, cls, cfg.support_size, st.rng);
      const double lr = lr_schedule(st.step, cfg);
      const LossReport r = vae_gradients(m, ep, st.rng);
      if (cfg.reptile_inner_optimizer == InnerOptimizer::adam) {
        nn::adam_step(m.encoder.parameters(), inner_e, lr);
        nn::adam_step(m.convertor.parameters(), inner_c, lr);
      } else {
        nn::sgd_step(m.parameters(), lr);
      }
      detail::record(st, Phase::pretrain, r, hooks);
    }
  });
}

// Runs (or resumes) `phase` until its configured episode budget is spent.
// Pre-training counts outer iterations; the other phases count episodes.
template <typename T>
void run_phase(TrainState<T>& st, Phase phase, const Dataset& ds, std::span<const std::size_t> classes,
               const TrainConfig& cfg, const TrainHooks<T>& hooks = {}) {
  cfg.validate();
  if (phase == Phase::init) throw UsageError("run_phase: init is not a training phase");
  if (classes.empty()) throw SamplingError("training split has no classes");
  detail::enter_phase(st, phase, cfg);
  const std::size_t budget = cfg.episodes(phase);
  const LossWeights w = cfg.weights();
  while (st.phase_episode < budget && !st.converged) {
    if (hooks.keep_going && !hooks.keep_going(st)) break;
    if (phase == Phase::pretrain) {
      reptile_iteration(st, ds, classes, cfg, hooks);
    } else {
      const Episode ep = data::sample_episode(ds, classes, cfg.support_size, st.rng);
      const double lr = lr_schedule(st.step, cfg);
      if (phase == Phase::vae) {
        const LossReport r = vae_update(st, ep, lr);
        detail::record(st, phase, r, hooks);
        detail::early_stop_update(st, cfg, r.l_con);
      } else {
        const LossReport r = lmvae_update(st, ep, w, lr, hooks.lmvae_observer);
        detail::record(st, phase, r, hooks);
        if (hooks.monitor && st.kl_zc.size() > 0 && (st.phase_episode + 1) % cfg.monitor_window == 0) {
          hooks.monitor(theorem1_monitor(st, cfg));
        }
      }
    }
    ++st.phase_episode;
    if (hooks.checkpoint && cfg.checkpoint_every > 0 && st.phase_episode % cfg.checkpoint_every == 0) {
      hooks.checkpoint(st);
    }
  }
}

template <typename T>
void pretrain_reptile(TrainState<T>& st, const Dataset& ds, std::span<const std::size_t> classes,
                      const TrainConfig& cfg, const TrainHooks<T>& hooks = {}) {
  run_phase(st, Phase::pretrain, ds, classes, cfg, hooks);
}

template <typename T>
void train_vae_phase(TrainState<T>& st, const Dataset& ds, std::span<const std::size_t> classes,
                     const TrainConfig& cfg, const TrainHooks<T>& hooks = {}) {
  run_phase(st, Phase::vae, ds, classes, cfg, hooks);
}

template <typename T>
void train_lmvae_phase(TrainState<T>& st, const Dataset& ds, std::span<const std::size_t> classes,
                       const TrainConfig& cfg, const TrainHooks<T>& hooks = {}) {
  run_phase(st, Phase::lmvae, ds, classes, cfg, hooks);
}

}  // namespace vce::train
