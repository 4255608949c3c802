#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>

#include "vce/errors.hpp"

namespace vce {

// Explicit random stream. Every sampler takes one of these by reference;
// there is no hidden global state. The full state (engine plus the normal
// distribution's cached variate) serializes to text so checkpoints can
// resume a stream exactly.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  double normal() { return normal_(engine_); }

  double uniform() { return uniform_(engine_); }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  std::size_t index(std::size_t n) {
    if (n == 0) throw UsageError("Rng::index on an empty range");
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_);
  }

  std::uint64_t next_u64() { return engine_(); }

  std::mt19937_64& engine() { return engine_; }

  std::string serialize() const {
    std::ostringstream os;
    os << engine_ << ' ' << normal_ << ' ' << uniform_;
    return os.str();
  }

  static Rng deserialize(const std::string& text) {
    Rng r;
    std::istringstream is(text);
    is >> r.engine_ >> r.normal_ >> r.uniform_;
    if (!is) throw CheckpointError("corrupt random-stream state");
    return r;
  }

  friend bool operator==(const Rng& a, const Rng& b) { return a.serialize() == b.serialize(); }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

}  // namespace vce
