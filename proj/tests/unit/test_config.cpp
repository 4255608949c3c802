#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>

#include "test_support.hpp"
#include "vce/config.hpp"

using namespace vce;
using train::TrainConfig;
namespace vt = vce::testing;

namespace {

// Sets an environment variable for the lifetime of the guard.
class EnvGuard {
 public:
  EnvGuard(const char* name, const char* value) : name_(name) {
    if (const char* old = std::getenv(name)) old_ = old;
    if (value) {
      setenv(name, value, 1);
    } else {
      unsetenv(name);
    }
  }
  ~EnvGuard() {
    if (old_) {
      setenv(name_, old_->c_str(), 1);
    } else {
      unsetenv(name_);
    }
  }

 private:
  const char* name_;
  std::optional<std::string> old_;
};

}  // namespace

TEST(Config, DefaultsMatchTheReferenceSettings) {
  const TrainConfig c;
  EXPECT_EQ(c.m, 50.0);
  EXPECT_EQ(c.lambda, 0.2);
  EXPECT_EQ(c.sigma_reg, 0.15);
  EXPECT_EQ(c.lr_init, 0.0002);
  EXPECT_EQ(c.support_size, 19u);
  EXPECT_EQ(c.latent_dim, 56u);
  EXPECT_EQ(c.checkpoint_every, 1000u);
  EXPECT_EQ(c.keep_checkpoints, 3u);
  const auto text = config::to_text(c);
  for (const char* line : {"m = 50.0\n", "lambda = 0.2\n", "sigma_reg = 0.15\n", "lr_init = 0.0002\n",
                           "support_size = 19\n", "latent_dim = 56\n"}) {
    EXPECT_NE(text.find(line), std::string::npos) << line;
  }
}

TEST(Config, TextRoundTripsEveryField) {
  TrainConfig c;
  c.m = 12.5;
  c.lambda = 0.1 + 0.2;  // not exactly representable in short decimal
  c.sigma_reg = 0.0;
  c.lr_init = 3e-7;
  c.lr_halve_steps = {10, 2000, 300000};
  c.pretrain_episodes = 1;
  c.vae_episodes = 0;
  c.lmvae_episodes = 123456;
  c.reptile_alpha = 1.0;
  c.reptile_inner_iterations = 9;
  c.reptile_inner_optimizer = train::InnerOptimizer::sgd;
  c.seed = 18446744073709551615ull;
  c.thread_count = 4;
  c.channels = 8;
  c.residual_blocks = 2;
  c.checkpoint_every = 7;
  c.keep_checkpoints = 1;
  c.monitor_window = 11;
  c.monitor_tol = 0.25;
  c.early_stop = true;
  c.early_stop_window = 13;
  c.early_stop_min_improvement = 0.01;
  const auto text = config::to_text(c);
  const auto back = config::parse(text);
  EXPECT_EQ(config::to_text(back), text);
  EXPECT_EQ(back.lambda, c.lambda);
  EXPECT_EQ(back.seed, c.seed);
  EXPECT_EQ(back.lr_halve_steps, c.lr_halve_steps);
  EXPECT_EQ(back.reptile_inner_optimizer, train::InnerOptimizer::sgd);
  EXPECT_TRUE(back.early_stop);
}

TEST(Config, ParsesCommentsBlanksAndLiterals) {
  const auto c = config::parse(
      "# a comment\n"
      "\n"
      "  m = 40   # trailing comment\n"
      "lr_halve_steps = [ 1_000 , 2000, ]\n"
      "reptile_inner_optimizer = sgd\n"
      "early_stop = false\r\n"
      "vae_episodes = 20_000\n");
  EXPECT_EQ(c.m, 40.0);
  EXPECT_EQ(c.lr_halve_steps, (std::vector<std::uint64_t>{1000, 2000}));
  EXPECT_EQ(c.reptile_inner_optimizer, train::InnerOptimizer::sgd);
  EXPECT_FALSE(c.early_stop);
  EXPECT_EQ(c.vae_episodes, 20000u);
  EXPECT_EQ(c.lambda, 0.2);  // untouched keys keep their defaults
}

TEST(Config, ErrorsNameTheLine) {
  auto message = [](const std::string& text) {
    try {
      config::parse(text);
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string("no error");
  };
  EXPECT_NE(message("m = 1\nbogus = 2\n").find("line 2"), std::string::npos);
  EXPECT_NE(message("m = 1\nbogus = 2\n").find("bogus"), std::string::npos);
  EXPECT_NE(message("just text\n").find("line 1"), std::string::npos);
  for (const char* bad : {"m = fifty", "m = 1.5x", "m = inf", "seed = -1", "seed = 1.5", "support_size = ",
                          "early_stop = yes", "lr_halve_steps = 1000", "lr_halve_steps = [a]",
                          "reptile_inner_optimizer = rmsprop", "seed = 99999999999999999999999"}) {
    EXPECT_THROW(config::parse(bad), ConfigError) << bad;
  }
}

TEST(Config, LoadReadsFilesAndLayersOverDefaults) {
  vt::TempDir dir("config");
  std::ofstream(dir / "run.toml") << "seed = 9\nsupport_size = 5\n";
  TrainConfig base;
  base.m = 30.0;
  const auto c = config::load(dir / "run.toml", base);
  EXPECT_EQ(c.seed, 9u);
  EXPECT_EQ(c.support_size, 5u);
  EXPECT_EQ(c.m, 30.0);
  EXPECT_THROW(config::load(dir / "missing.toml"), ConfigError);
}

TEST(Config, ThreadsFromEnvironment) {
  TrainConfig c;
  {
    EnvGuard g("VCE_THREADS", nullptr);
    config::apply_environment(c);
    EXPECT_EQ(c.thread_count, 1u);
  }
  {
    EnvGuard g("VCE_THREADS", "6");
    config::apply_environment(c);
    EXPECT_EQ(c.thread_count, 6u);
  }
  for (const char* bad : {"0", "two", "-3"}) {
    EnvGuard g("VCE_THREADS", bad);
    EXPECT_THROW(config::apply_environment(c), ConfigError) << bad;
  }
}

TEST(Config, FormatDoubleIsShortestExact) {
  EXPECT_EQ(config::format_double(50.0), "50.0");
  EXPECT_EQ(config::format_double(0.0002), "0.0002");
  EXPECT_EQ(config::format_double(0.1 + 0.2), "0.30000000000000004");
  EXPECT_EQ(config::format_double(1e-300), "1e-300");
  Rng rng(1);
  for (int i = 0; i < 1000; ++i) {
    const double v = std::ldexp(rng.uniform(), static_cast<int>(rng.index(80)) - 40);
    EXPECT_EQ(std::strtod(config::format_double(v).c_str(), nullptr), v);
  }
}
