#pragma once

// Flat key = value configuration, a subset of TOML: one setting per line,
// '#' comments, numbers, true/false, quoted strings and [a, b] integer
// lists. Every TrainConfig field has a key of the same name.

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>

#include "vce/training.hpp"

namespace vce::config {

using train::TrainConfig;

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

// Drops a trailing '#' comment that is not inside a quoted string.
inline std::string strip_comment(const std::string& s) {
  bool quoted = false;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '"') quoted = !quoted;
    if (s[i] == '#' && !quoted) return s.substr(0, i);
  }
  return s;
}

inline double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size() || !std::isfinite(d)) throw std::invalid_argument("");
    return d;
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  }
}

inline std::uint64_t to_uint(const std::string& key, const std::string& v) {
  if (v.empty() || v.find_first_not_of("0123456789_") != std::string::npos) {
    throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  }
  std::string digits;
  for (char c : v) {
    if (c != '_') digits += c;
  }
  try {
    return std::stoull(digits);
  } catch (const std::exception&) {
    throw ConfigError(key + ": integer out of range '" + v + "'");
  }
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true") return true;
  if (v == "false") return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

inline std::string to_string_value(const std::string& key, const std::string& v) {
  if (v.size() >= 2 && v.front() == '"' && v.back() == '"') return v.substr(1, v.size() - 2);
  if (!v.empty() && v.find_first_of(" \t\"") == std::string::npos) return v;
  throw ConfigError(key + ": expected a string, got '" + v + "'");
}

inline std::vector<std::uint64_t> to_uint_list(const std::string& key, const std::string& v) {
  if (v.size() < 2 || v.front() != '[' || v.back() != ']') throw ConfigError(key + ": expected a list like [1000, 2000]");
  std::vector<std::uint64_t> out;
  std::stringstream ss(v.substr(1, v.size() - 2));
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    out.push_back(to_uint(key, item));
  }
  return out;
}

using Setter = std::function<void(TrainConfig&, const std::string& key, const std::string& value)>;

template <typename F>
Setter uint_field(F TrainConfig::*field) {
  return [field](TrainConfig& c, const std::string& k, const std::string& v) {
    c.*field = static_cast<F>(to_uint(k, v));
  };
}

inline Setter double_field(double TrainConfig::*field) {
  return [field](TrainConfig& c, const std::string& k, const std::string& v) { c.*field = to_double(k, v); };
}

inline const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = {
      {"support_size", uint_field(&TrainConfig::support_size)},
      {"latent_dim", uint_field(&TrainConfig::latent_dim)},
      {"m", double_field(&TrainConfig::m)},
      {"lambda", double_field(&TrainConfig::lambda)},
      {"sigma_reg", double_field(&TrainConfig::sigma_reg)},
      {"lr_init", double_field(&TrainConfig::lr_init)},
      {"lr_halve_steps",
       [](TrainConfig& c, const std::string& k, const std::string& v) { c.lr_halve_steps = to_uint_list(k, v); }},
      {"pretrain_episodes", uint_field(&TrainConfig::pretrain_episodes)},
      {"vae_episodes", uint_field(&TrainConfig::vae_episodes)},
      {"lmvae_episodes", uint_field(&TrainConfig::lmvae_episodes)},
      {"reptile_alpha", double_field(&TrainConfig::reptile_alpha)},
      {"reptile_inner_iterations", uint_field(&TrainConfig::reptile_inner_iterations)},
      {"reptile_inner_optimizer",
       [](TrainConfig& c, const std::string& k, const std::string& v) {
         const auto s = to_string_value(k, v);
         if (s == "adam") {
           c.reptile_inner_optimizer = train::InnerOptimizer::adam;
         } else if (s == "sgd") {
           c.reptile_inner_optimizer = train::InnerOptimizer::sgd;
         } else {
           throw ConfigError(k + ": expected \"adam\" or \"sgd\", got '" + s + "'");
         }
       }},
      {"seed", uint_field(&TrainConfig::seed)},
      {"thread_count", uint_field(&TrainConfig::thread_count)},
      {"channels", uint_field(&TrainConfig::channels)},
      {"residual_blocks", uint_field(&TrainConfig::residual_blocks)},
      {"checkpoint_every", uint_field(&TrainConfig::checkpoint_every)},
      {"keep_checkpoints", uint_field(&TrainConfig::keep_checkpoints)},
      {"monitor_window", uint_field(&TrainConfig::monitor_window)},
      {"monitor_tol", double_field(&TrainConfig::monitor_tol)},
      {"early_stop",
       [](TrainConfig& c, const std::string& k, const std::string& v) { c.early_stop = to_bool(k, v); }},
      {"early_stop_window", uint_field(&TrainConfig::early_stop_window)},
      {"early_stop_min_improvement", double_field(&TrainConfig::early_stop_min_improvement)},
  };
  return table;
}

}  // namespace detail

// Applies one key = value setting (value in config-file syntax).
inline void apply(TrainConfig& cfg, const std::string& key, const std::string& value) {
  const auto& table = detail::setters();
  const auto it = table.find(key);
  if (it == table.end()) throw ConfigError("unknown config key '" + key + "'");
  it->second(cfg, key, detail::trim(value));
}

inline TrainConfig parse(const std::string& text, TrainConfig cfg = {}) {
  std::istringstream in(text);
  std::string line;
  for (int lineno = 1; std::getline(in, line); ++lineno) {
    line = detail::trim(detail::strip_comment(line));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(lineno) + ": expected key = value, got '" + line + "'");
    }
    try {
      apply(cfg, detail::trim(line.substr(0, eq)), line.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return cfg;
}

inline TrainConfig load(const std::filesystem::path& path, TrainConfig cfg = {}) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), std::move(cfg));
}

// VCE_THREADS, when set, overrides thread_count.
inline void apply_environment(TrainConfig& cfg) {
  if (const char* v = std::getenv("VCE_THREADS"); v && *v) {
    const auto n = detail::to_uint("VCE_THREADS", v);
    if (n == 0) throw ConfigError("VCE_THREADS must be at least 1");
    cfg.thread_count = static_cast<std::size_t>(n);
  }
}

inline std::string format_double(double v) {
  // shortest text that reads back to the same double
  char buf[400];
  auto res = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::fixed);
  if (res.ec != std::errc{} || res.ptr - buf > 24) res = std::to_chars(buf, buf + sizeof buf, v);
  std::string s(buf, res.ptr);
  // keep the value recognisably floating-point
  if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
  return s;
}

// Every field, one per line, parseable by parse().
inline std::string to_text(const TrainConfig& c) {
  std::ostringstream os;
  auto list = [](const std::vector<std::uint64_t>& v) {
    std::string s = "[";
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + std::to_string(v[i]);
    return s + "]";
  };
  os << "support_size = " << c.support_size << '\n'
     << "latent_dim = " << c.latent_dim << '\n'
     << "m = " << format_double(c.m) << '\n'
     << "lambda = " << format_double(c.lambda) << '\n'
     << "sigma_reg = " << format_double(c.sigma_reg) << '\n'
     << "lr_init = " << format_double(c.lr_init) << '\n'
     << "lr_halve_steps = " << list(c.lr_halve_steps) << '\n'
     << "pretrain_episodes = " << c.pretrain_episodes << '\n'
     << "vae_episodes = " << c.vae_episodes << '\n'
     << "lmvae_episodes = " << c.lmvae_episodes << '\n'
     << "reptile_alpha = " << format_double(c.reptile_alpha) << '\n'
     << "reptile_inner_iterations = " << c.reptile_inner_iterations << '\n'
     << "reptile_inner_optimizer = \""
     << (c.reptile_inner_optimizer == train::InnerOptimizer::adam ? "adam" : "sgd") << "\"\n"
     << "seed = " << c.seed << '\n'
     << "thread_count = " << c.thread_count << '\n'
     << "channels = " << c.channels << '\n'
     << "residual_blocks = " << c.residual_blocks << '\n'
     << "checkpoint_every = " << c.checkpoint_every << '\n'
     << "keep_checkpoints = " << c.keep_checkpoints << '\n'
     << "monitor_window = " << c.monitor_window << '\n'
     << "monitor_tol = " << format_double(c.monitor_tol) << '\n'
     << "early_stop = " << (c.early_stop ? "true" : "false") << '\n'
     << "early_stop_window = " << c.early_stop_window << '\n'
     << "early_stop_min_improvement = " << format_double(c.early_stop_min_improvement) << '\n';
  return os.str();
}

}  // namespace vce::config
