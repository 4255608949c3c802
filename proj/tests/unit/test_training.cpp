#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "test_support.hpp"
#include "vce/checkpoint.hpp"
#include "vce/training.hpp"

using namespace vce;
using namespace vce::train;
using nn::Parameter;
using nn::Tensor;
namespace vt = vce::testing;

namespace {

TrainConfig small_config(std::uint64_t seed = 1) {
  TrainConfig c;
  c.seed = seed;
  c.channels = 4;
  c.residual_blocks = 1;
  c.support_size = 3;
  c.monitor_window = 4;
  c.lr_init = 1e-3;
  return c;
}

data::Dataset fixture() {
  Rng rng(42);
  return vt::random_dataset(2, 3, 5, rng);
}

const std::vector<std::size_t> kClasses{0, 1, 2, 3, 4, 5};

template <typename T>
std::vector<Tensor<T>> snapshot(const std::vector<Parameter<T>*>& ps) {
  std::vector<Tensor<T>> out;
  for (auto* p : ps) out.push_back(p->value());
  return out;
}

template <typename T>
bool same(const std::vector<Parameter<T>*>& ps, const std::vector<Tensor<T>>& snap) {
  for (std::size_t i = 0; i < ps.size(); ++i)
    if (!(ps[i]->value() == snap[i])) return false;
  return true;
}

template <typename T>
bool all_grads_zero(const std::vector<Parameter<T>*>& ps) {
  for (auto* p : ps) {
    const auto g = p->grad();
    for (T v : g.values())
      if (v != T{0}) return false;
  }
  return true;
}

struct Stream {
  std::vector<LossReport> reports;
  TrainHooks<float> hooks() {
    TrainHooks<float> h;
    h.metrics = [this](std::uint64_t, Phase, const LossReport& r) { reports.push_back(r); };
    return h;
  }
};

bool bit_equal(const LossReport& a, const LossReport& b) {
  return a.l_kl_z == b.l_kl_z && a.l_kl_zc == b.l_kl_zc && a.l_con == b.l_con && a.l_reg == b.l_reg &&
         a.hinge == b.hinge && a.total_encoder == b.total_encoder && a.total_convertor == b.total_convertor;
}

}  // namespace

// ------------------------------------------------------------ lr schedule

TEST(LrSchedule, HalvesAtConfiguredSteps) {
  TrainConfig c;
  c.lr_halve_steps = {100, 250};
  EXPECT_EQ(lr_schedule(0, c), 0.0002);
  EXPECT_EQ(lr_schedule(99, c), 0.0002);
  EXPECT_EQ(lr_schedule(100, c), 0.0001);
  EXPECT_EQ(lr_schedule(249, c), 0.0001);
  EXPECT_EQ(lr_schedule(250, c), 0.00005);
  EXPECT_EQ(lr_schedule(1000000, c), 0.00005);
  c.lr_halve_steps.clear();
  EXPECT_EQ(lr_schedule(1000000, c), 0.0002);
}

TEST(RunningWindow, KeepsTheLastValues) {
  RunningWindow w(3);
  EXPECT_EQ(w.mean(), 0.0);
  for (double v : {1.0, 2.0, 3.0, 4.0, 5.0}) w.push(v);
  EXPECT_TRUE(w.full());
  EXPECT_DOUBLE_EQ(w.mean(), 4.0);
  EXPECT_EQ(RunningWindow::from_values(3, {9.0, 3.0, 4.0, 5.0}), w);
}

TEST(TrainConfig, ValidationRejectsBadValues) {
  EXPECT_NO_THROW(TrainConfig{}.validate());
  auto bad = [](auto mutate) {
    TrainConfig c;
    mutate(c);
    EXPECT_THROW(c.validate(), ConfigError);
  };
  bad([](TrainConfig& c) { c.support_size = 0; });
  bad([](TrainConfig& c) { c.latent_dim = 54; });
  bad([](TrainConfig& c) { c.lr_init = 0.0; });
  bad([](TrainConfig& c) { c.reptile_alpha = 1.5; });
  bad([](TrainConfig& c) { c.reptile_inner_iterations = 0; });
  bad([](TrainConfig& c) { c.thread_count = 0; });
  bad([](TrainConfig& c) { c.m = -1.0; });
}

// ------------------------------------------------------------------ Reptile

TEST(Reptile, ScalarToyEndpointsAndMidpoint) {
  // three gradient steps on (p - 3)^2 from p = 1 with rate 0.25: 1 -> 2 -> 2.5 -> 2.75
  for (double alpha : {0.0, 0.5, 1.0}) {
    Parameter<double> p(Tensor<double>({1}, std::vector<double>{1.0}));
    reptile_outer_step<double>({&p}, alpha, [&] {
      for (int i = 0; i < 3; ++i) p.mutable_value()[0] -= 0.25 * 2.0 * (p.value()[0] - 3.0);
    });
    EXPECT_EQ(p.value()[0], 1.0 + alpha * 1.75) << alpha;
  }
}

TEST(Reptile, AlphaZeroLeavesWeightsAndCountsInnerSteps) {
  auto cfg = small_config();
  cfg.reptile_alpha = 0.0;
  cfg.reptile_inner_iterations = 3;
  auto st = make_state<float>(cfg);
  const auto before = snapshot(st.model.parameters());
  const auto ds = fixture();
  reptile_iteration(st, ds, kClasses, cfg, {});
  EXPECT_TRUE(same(st.model.parameters(), before));
  EXPECT_EQ(st.step, 3u);
}

TEST(Reptile, PhaseCountsOuterIterations) {
  auto cfg = small_config();
  cfg.pretrain_episodes = 2;
  cfg.reptile_inner_iterations = 2;
  auto st = make_state<float>(cfg);
  const auto ds = fixture();
  Stream s;
  pretrain_reptile(st, ds, kClasses, cfg, s.hooks());
  EXPECT_EQ(st.phase_episode, 2u);
  EXPECT_EQ(st.step, 4u);
  EXPECT_EQ(s.reports.size(), 4u);
  for (const auto& r : s.reports) EXPECT_EQ(r.l_kl_zc, 0.0);
}

TEST(Reptile, SgdInnerModeMoves) {
  auto cfg = small_config();
  cfg.reptile_inner_optimizer = InnerOptimizer::sgd;
  cfg.reptile_alpha = 1.0;
  auto st = make_state<float>(cfg);
  const auto before = snapshot(st.model.parameters());
  const auto ds = fixture();
  reptile_iteration(st, ds, kClasses, cfg, {});
  EXPECT_FALSE(same(st.model.parameters(), before));
}

// ---------------------------------------------------------------- VAE phase

TEST(VaePhase, FiniteLossAtStepZeroOnStandardModel) {
  TrainConfig cfg;
  cfg.seed = 5;
  auto st = make_state<float>(cfg);
  Rng rng(6);
  const auto ds = vt::random_dataset(1, 2, 20, rng);
  const auto ep = data::sample_episode(ds, std::vector<std::size_t>{0, 1}, 19, st.rng);
  const auto r = vae_update(st, ep, lr_schedule(0, cfg));
  EXPECT_TRUE(r.finite());
  EXPECT_GT(r.l_con, 0.0);
  EXPECT_GE(r.l_kl_z, 0.0);
}

TEST(VaePhase, EqualSeedsGiveIdenticalStreams) {
  const auto cfg = [] {
    auto c = small_config(9);
    c.vae_episodes = 6;
    return c;
  }();
  const auto ds = fixture();
  Stream a, b;
  auto s1 = make_state<float>(cfg), s2 = make_state<float>(cfg);
  train_vae_phase(s1, ds, kClasses, cfg, a.hooks());
  train_vae_phase(s2, ds, kClasses, cfg, b.hooks());
  ASSERT_EQ(a.reports.size(), 6u);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_TRUE(bit_equal(a.reports[i], b.reports[i])) << i;
  EXPECT_TRUE(same(s1.model.parameters(), snapshot(s2.model.parameters())));
  auto other = small_config(10);
  other.vae_episodes = 6;
  Stream c;
  auto s3 = make_state<float>(other);
  train_vae_phase(s3, ds, kClasses, other, c.hooks());
  EXPECT_NE(c.reports[0].l_con, a.reports[0].l_con);
}

TEST(VaePhase, DrivesBothNetworksAndLeavesKlZcAtZero) {
  auto cfg = small_config();
  cfg.vae_episodes = 2;
  auto st = make_state<float>(cfg);
  const auto enc = snapshot(st.model.encoder.parameters());
  const auto cnv = snapshot(st.model.convertor.parameters());
  Stream s;
  train_vae_phase(st, fixture(), kClasses, cfg, s.hooks());
  EXPECT_FALSE(same(st.model.encoder.parameters(), enc));
  EXPECT_FALSE(same(st.model.convertor.parameters(), cnv));
  for (const auto& r : s.reports) EXPECT_EQ(r.l_kl_zc, 0.0);
  EXPECT_EQ(st.kl_zc.size(), 0u);
}

// -------------------------------------------------------------- LMVAE phase

TEST(LmvaePhase, ZeroMarginWeightsReduceToVae) {
  auto cfg = small_config(11);
  cfg.lambda = 0.0;
  cfg.sigma_reg = 0.0;
  cfg.vae_episodes = cfg.lmvae_episodes = 5;
  const auto ds = fixture();
  auto a = make_state<float>(cfg), b = make_state<float>(cfg);
  Stream sa, sb;
  train_vae_phase(a, ds, kClasses, cfg, sa.hooks());
  train_lmvae_phase(b, ds, kClasses, cfg, sb.hooks());
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_EQ(sa.reports[i].l_con, sb.reports[i].l_con) << i;
    EXPECT_EQ(sa.reports[i].l_kl_z, sb.reports[i].l_kl_z) << i;
  }
  EXPECT_TRUE(same(a.model.parameters(), snapshot(b.model.parameters())));
}

TEST(LmvaePhase, UpdatesAlternateAndGradientsStayIsolated) {
  auto cfg = small_config(12);
  cfg.lmvae_episodes = 3;
  auto st = make_state<float>(cfg);
  std::vector<Tensor<float>> enc0, cnv0, enc1;
  int episodes = 0;
  TrainHooks<float> h;
  h.lmvae_observer = [&](LmvaeStage stage, model::VceModel<float>& mm) {
    const auto enc = mm.encoder.parameters();
    const auto cnv = mm.convertor.parameters();
    switch (stage) {
      case LmvaeStage::encoder_backward:
        enc0 = snapshot(enc);
        cnv0 = snapshot(cnv);
        // hinge and KL terms of the encoder objective never reach the convertor
        EXPECT_TRUE(all_grads_zero(cnv));
        EXPECT_FALSE(all_grads_zero(enc));
        break;
      case LmvaeStage::encoder_step:
        EXPECT_TRUE(same(cnv, cnv0));
        EXPECT_FALSE(same(enc, enc0));
        enc1 = snapshot(enc);
        break;
      case LmvaeStage::convertor_backward:
        // the margin term of the convertor objective never reaches the encoder
        EXPECT_TRUE(all_grads_zero(enc));
        EXPECT_FALSE(all_grads_zero(cnv));
        break;
      case LmvaeStage::convertor_step:
        EXPECT_TRUE(same(enc, enc1));
        EXPECT_FALSE(same(cnv, cnv0));
        ++episodes;
        break;
    }
  };
  train_lmvae_phase(st, fixture(), kClasses, cfg, h);
  EXPECT_EQ(episodes, 3);
}

TEST(LmvaePhase, ReportsMarginTerms) {
  auto cfg = small_config(13);
  cfg.lmvae_episodes = 2;
  auto st = make_state<float>(cfg);
  Stream s;
  train_lmvae_phase(st, fixture(), kClasses, cfg, s.hooks());
  for (const auto& r : s.reports) {
    EXPECT_GE(r.l_kl_zc, 0.0);
    EXPECT_NEAR(r.hinge, std::max(0.0, cfg.m - r.l_kl_zc), 1e-6 + 1e-9 * cfg.m);
    EXPECT_TRUE(r.finite());
  }
  EXPECT_EQ(st.kl_zc.size(), 2u);
}

TEST(LmvaePhase, MonitorFiresEveryWindow) {
  auto cfg = small_config(14);
  cfg.lmvae_episodes = 9;
  cfg.monitor_window = 4;
  auto st = make_state<float>(cfg);
  std::vector<MonitorStatus> seen;
  TrainHooks<float> h;
  h.monitor = [&](const MonitorStatus& s) { seen.push_back(s); };
  train_lmvae_phase(st, fixture(), kClasses, cfg, h);
  ASSERT_EQ(seen.size(), 2u);
  for (const auto& s : seen) {
    EXPECT_EQ(s.window, 4u);
    EXPECT_EQ(s.m, 50.0);
  }
}

// ---------------------------------------------------------------- monitor

TEST(Monitor, Examples) {
  EXPECT_TRUE(theorem1_status(20, 50, 50).satisfied);
  EXPECT_FALSE(theorem1_status(80, 5, 50).satisfied);
  EXPECT_TRUE(theorem1_status(55, 25, 50).satisfied);
  EXPECT_TRUE(theorem1_status(0, 75, 50).satisfied);
  EXPECT_FALSE(theorem1_status(55.001, 50, 50).satisfied);
  EXPECT_FALSE(theorem1_status(10, 24.99, 50).satisfied);
  EXPECT_FALSE(theorem1_status(10, 75.01, 50).satisfied);
  EXPECT_NE(describe(theorem1_status(20, 50, 50)).find("satisfied"), std::string::npos);
  EXPECT_NE(describe(theorem1_status(80, 5, 50)).find("violated"), std::string::npos);
}

// -------------------------------------------------------------- early stop

TEST(EarlyStop, FlatWindowsConverge) {
  auto cfg = small_config();
  cfg.early_stop = true;
  cfg.early_stop_window = 2;
  TrainState<float> st;
  for (int i = 0; i < 6; ++i) detail::early_stop_update(st, cfg, 100.0);
  EXPECT_EQ(st.es_history.size(), 3u);
  EXPECT_TRUE(st.converged);
}

TEST(EarlyStop, ImprovingWindowsKeepGoing) {
  auto cfg = small_config();
  cfg.early_stop = true;
  cfg.early_stop_window = 2;
  TrainState<float> st;
  double v = 100.0;
  for (int i = 0; i < 20; ++i, v *= 0.95) detail::early_stop_update(st, cfg, v);
  EXPECT_FALSE(st.converged);
  // one slow window alone is not enough
  for (int i = 0; i < 2; ++i) detail::early_stop_update(st, cfg, st.es_history.back());
  EXPECT_FALSE(st.converged);
  for (int i = 0; i < 2; ++i) detail::early_stop_update(st, cfg, st.es_history.back());
  EXPECT_TRUE(st.converged);
}

TEST(EarlyStop, DisabledNeverConverges) {
  auto cfg = small_config();
  cfg.early_stop_window = 1;
  TrainState<float> st;
  for (int i = 0; i < 10; ++i) detail::early_stop_update(st, cfg, 1.0);
  EXPECT_FALSE(st.converged);
}

// ------------------------------------------------------------ phase driver

TEST(RunPhase, HooksAndErrors) {
  auto cfg = small_config(15);
  cfg.vae_episodes = 7;
  cfg.checkpoint_every = 3;
  auto st = make_state<float>(cfg);
  const auto ds = fixture();
  std::vector<std::uint64_t> at;
  TrainHooks<float> h;
  h.checkpoint = [&](const TrainState<float>& s) { at.push_back(s.phase_episode); };
  h.keep_going = [](const TrainState<float>& s) { return s.phase_episode < 5; };
  train_vae_phase(st, ds, kClasses, cfg, h);
  EXPECT_EQ(st.phase_episode, 5u);
  EXPECT_EQ(at, (std::vector<std::uint64_t>{3}));
  // resuming the same phase continues the count
  h.keep_going = {};
  train_vae_phase(st, ds, kClasses, cfg, h);
  EXPECT_EQ(st.phase_episode, 7u);
  EXPECT_EQ(st.step, 7u);
  EXPECT_EQ(at, (std::vector<std::uint64_t>{3, 6}));

  EXPECT_THROW(run_phase(st, Phase::init, ds, kClasses, cfg), UsageError);
  EXPECT_THROW(train_vae_phase(st, ds, std::vector<std::size_t>{}, cfg), SamplingError);
  EXPECT_THROW(phase_from_code(4), CheckpointError);
}

TEST(RunPhase, EnteringANewPhaseResetsWindows) {
  auto cfg = small_config(16);
  cfg.vae_episodes = 3;
  cfg.lmvae_episodes = 1;
  auto st = make_state<float>(cfg);
  const auto ds = fixture();
  train_vae_phase(st, ds, kClasses, cfg);
  EXPECT_EQ(st.con.size(), 3u);
  train_lmvae_phase(st, ds, kClasses, cfg);
  EXPECT_EQ(st.phase, Phase::lmvae);
  EXPECT_EQ(st.con.size(), 1u);
  EXPECT_EQ(st.step, 4u);
}

// -------------------------------------------------------------- checkpoints

TEST(Checkpoint, RoundTripPreservesNextTenLosses) {
  for (Phase phase : {Phase::vae, Phase::lmvae}) {
    auto cfg = small_config(17);
    cfg.vae_episodes = cfg.lmvae_episodes = 4;
    const auto ds = fixture();
    auto st = make_state<float>(cfg);
    run_phase(st, phase, ds, kClasses, cfg);
    const auto bytes = ckpt::encode_state(st, "meta text");
    auto loaded = ckpt::decode_state(bytes);
    EXPECT_TRUE(loaded.has_optimizer);
    EXPECT_TRUE(loaded.has_training);
    EXPECT_EQ(loaded.meta, "meta text");
    EXPECT_EQ(loaded.state.step, st.step);
    EXPECT_EQ(loaded.state.phase, phase);
    EXPECT_EQ(loaded.state.rng, st.rng);
    EXPECT_EQ(loaded.state.con, st.con);
    EXPECT_EQ(ckpt::encode_state(loaded.state, "meta text"), bytes);

    cfg.vae_episodes = cfg.lmvae_episodes = 14;
    Stream a, b;
    run_phase(st, phase, ds, kClasses, cfg, a.hooks());
    run_phase(loaded.state, phase, ds, kClasses, cfg, b.hooks());
    ASSERT_EQ(a.reports.size(), 10u);
    ASSERT_EQ(b.reports.size(), 10u);
    for (std::size_t i = 0; i < 10; ++i) EXPECT_TRUE(bit_equal(a.reports[i], b.reports[i])) << i;
  }
}

TEST(Checkpoint, CorruptFilesAreRejected) {
  auto st = make_state<float>(small_config());
  const auto bytes = ckpt::encode_state(st);
  EXPECT_THROW(ckpt::decode_state(std::span(bytes).first(bytes.size() / 2)), CheckpointError);
  EXPECT_THROW(ckpt::decode_state(std::span(bytes).first(bytes.size() - 1)), CheckpointError);
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(ckpt::decode_state(bad), CheckpointError);
  bad = bytes;
  bad[4] = 7;
  EXPECT_THROW(ckpt::decode_state(bad), CheckpointError);
  auto longer = bytes;
  longer.push_back(1);
  EXPECT_THROW(ckpt::decode_state(longer), CheckpointError);

  vt::TempDir dir("ckpt");
  io::write_file_bytes(dir / "half.ckpt", std::vector<std::uint8_t>(bytes.begin(), bytes.begin() + 100));
  EXPECT_THROW(ckpt::load(dir / "half.ckpt"), CheckpointError);
  EXPECT_THROW(ckpt::load_model(dir / "half.ckpt"), CheckpointError);
  EXPECT_THROW(ckpt::load(dir / "missing.ckpt"), CheckpointError);
}

TEST(Checkpoint, InferenceOnlyLoad) {
  auto cfg = small_config(18);
  cfg.vae_episodes = 2;
  auto st = make_state<float>(cfg);
  train_vae_phase(st, fixture(), kClasses, cfg);
  vt::TempDir dir("ckpt-infer");
  ckpt::save(dir / "full.ckpt", st);
  EXPECT_FALSE(std::filesystem::exists(dir / "full.ckpt.tmp"));

  io::ByteWriter w;
  ckpt::write_model_part(w, st.model);
  w.tag("END ");
  w.u64(0);
  io::write_file_bytes(dir / "weights.ckpt", w.take());
  EXPECT_THROW(ckpt::load(dir / "weights.ckpt"), CheckpointError);

  for (const char* name : {"full.ckpt", "weights.ckpt"}) {
    auto m = ckpt::load_model(dir / name);
    EXPECT_EQ(m.spec.channels, 4u);
    EXPECT_EQ(m.spec.residual_blocks, 1u);
    EXPECT_TRUE(same(m.parameters(), snapshot(st.model.parameters())));
    Rng rng(1);
    const auto q = nn::Var<float>::constant(vt::uniform_tensor<float>({1, 1, 28, 28}, rng, 0, 1));
    const auto z = nn::Var<float>::constant(model::sample_normal<float>(1, 56, rng));
    EXPECT_EQ(model::convert(m, z, q).value(), model::convert(st.model, z, q).value());
  }
}
