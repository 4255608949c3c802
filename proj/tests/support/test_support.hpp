#pragma once

// Helpers shared by the unit tests and the acceptance runner.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <unistd.h>

#include "vce/autodiff.hpp"
#include "vce/data/omniglot.hpp"
#include "vce/layers.hpp"
#include "vce/rng.hpp"

namespace vce::testing {

using nn::Parameter;
using nn::Shape;
using nn::Tensor;
using nn::Var;

template <typename T = double>
Tensor<T> random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<T>(scale * rng.normal());
  return t;
}

template <typename T = double>
Tensor<T> uniform_tensor(Shape shape, Rng& rng, double lo, double hi) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

// Norm-wise relative error ||a - n|| / max(||a||, ||n||); 0 when both vanish.
inline double relative_error(const std::vector<double>& a, const std::vector<double>& n) {
  double diff = 0.0, na = 0.0, nn_ = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - n[i]) * (a[i] - n[i]);
    na += a[i] * a[i];
    nn_ += n[i] * n[i];
  }
  const double denom = std::sqrt(std::max(na, nn_));
  if (denom < 1e-12) return std::sqrt(diff);
  return std::sqrt(diff) / denom;
}

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
  std::size_t non_smooth = 0;  // coordinates dropped for sitting on a kink
  std::string worst;           // which tensor produced the maximum
};

// Compares reverse-mode gradients of the scalar `loss()` against central
// differences for every tensor in `params` (a random subset of at most
// `per_tensor` coordinates each). loss() must rebuild its graph from the
// current parameter values on every call.
//
// ReLU, clamp and hinge are piecewise smooth; a probe of width h that straddles
// a kink measures a chord, not a derivative. A coordinate whose estimate
// disagrees with the analytic value is re-measured with h / 16. On smooth
// ground the two central estimates differ by O(h^2); across a kink they
// differ by a fraction of the slope jump, and the coordinate is counted and
// skipped instead of compared.
inline GradCheckResult check_gradients(const std::vector<Parameter<double>*>& params,
                                       const std::function<Var<double>()>& loss, Rng& rng,
                                       std::size_t per_tensor = 12, double h = 1e-6) {
  nn::zero_grads(params);
  nn::set_trainable(params, true);
  const Var<double> l0 = loss();
  const double base = l0.value().item();
  nn::backward(l0);
  GradCheckResult out;
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto& value = params[p]->mutable_value();
    const Tensor<double> grad = params[p]->grad();
    std::vector<std::size_t> coords(value.numel());
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    if (coords.size() > per_tensor) {
      for (std::size_t i = 0; i < per_tensor; ++i) std::swap(coords[i], coords[i + rng.index(coords.size() - i)]);
      coords.resize(per_tensor);
    }
    const auto at = [&](std::size_t c, double v) {
      const double v0 = value[c];
      value[c] = v;
      const double l = loss().value().item();
      value[c] = v0;
      return l;
    };
    std::vector<double> analytic, numeric;
    for (std::size_t c : coords) {
      const double v0 = value[c];
      const double up = at(c, v0 + h), down = at(c, v0 - h);
      const double n = (up - down) / (2.0 * h);
      // rounding noise of a difference quotient at step h
      const double noise = 1e-15 * std::max(1.0, std::abs(base)) / h;
      const double scale = std::max(std::abs(n), std::abs(grad[c]));
      if (std::abs(n - grad[c]) > 1e-5 * scale + noise) {
        const double fine = (at(c, v0 + h / 16.0) - at(c, v0 - h / 16.0)) / (h / 8.0);
        if (std::abs(fine - n) > 1e-5 * scale + 32.0 * noise) {
          ++out.non_smooth;
          continue;
        }
      }
      analytic.push_back(grad[c]);
      numeric.push_back(n);
    }
    const double e = relative_error(analytic, numeric);
    out.coordinates += analytic.size();
    if (e >= out.max_rel_error) {
      out.max_rel_error = e;
      out.worst = "tensor #" + std::to_string(p) + " " + nn::shape_string(value.shape());
    }
  }
  return out;
}

// Weighted sum <y, r> with a fixed random r: reduces any output to a scalar
// whose gradient exercises every output element.
inline Var<double> probe(const Var<double>& y, const Tensor<double>& r) {
  return nn::sum(nn::mul(y, Var<double>::constant(r)));
}

// In-memory dataset with random pixels; `alphabets` x `classes_per` classes
// of `exemplars` images each.
inline data::Dataset random_dataset(std::size_t alphabets, std::size_t classes_per, std::size_t exemplars, Rng& rng) {
  data::Dataset ds;
  for (std::size_t a = 0; a < alphabets; ++a) {
    for (std::size_t c = 0; c < classes_per; ++c) {
      data::CharacterClass cls;
      cls.id = {"alphabet" + std::to_string(a), "character" + std::to_string(c)};
      for (std::size_t e = 0; e < exemplars; ++e) {
        data::GlyphImage g;
        for (auto& v : g.pixels) v = static_cast<float>(rng.uniform());
        g.class_index = ds.classes.size();
        g.drawer_id = static_cast<int>(e + 1);
        cls.exemplars.push_back(std::move(g));
      }
      ds.classes.push_back(std::move(cls));
    }
  }
  return ds;
}

// Fresh, empty directory under the system temp dir; removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("vce-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

class Stopwatch {
 public:
  Stopwatch() : start_(std::chrono::steady_clock::now()) {}
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_;
};

}  // namespace vce::testing
