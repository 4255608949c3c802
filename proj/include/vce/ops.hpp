#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "vce/autodiff.hpp"

namespace vce::nn {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

// Pre-activation clamp for sigmoid; keeps log(y) and log(1-y) finite.
inline constexpr double kSigmoidClamp = 30.0;

enum class Activation { relu, sigmoid };

// ---------------------------------------------------------------- elementwise

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += b.value()[i];
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
    for (std::size_t p = 0; p < 2; ++p) {
      if (!wants_grad(self, p)) continue;
      auto& g = self.parents[p]->ensure_grad();
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
    }
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.value(), b.value(), "sub");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= b.value()[i];
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
    if (wants_grad(self, 0)) {
      auto& g = self.parents[0]->ensure_grad();
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
    }
    if (wants_grad(self, 1)) {
      auto& g = self.parents[1]->ensure_grad();
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] -= self.grad[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T c) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v *= c;
  return make_result<T>(std::move(out), {a}, [c](Node<T>& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] += c * self.grad[i];
  });
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, T c) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v += c;
  return make_result<T>(std::move(out), {a}, [](Node<T>& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.value(), b.value(), "mul");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= b.value()[i];
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    if (wants_grad(self, 0)) {
      auto& g = self.parents[0]->ensure_grad();
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * bv[i];
    }
    if (wants_grad(self, 1)) {
      auto& g = self.parents[1]->ensure_grad();
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * av[i];
    }
  });
}

template <typename T>
Var<T> operator+(const Var<T>& a, const Var<T>& b) { return add(a, b); }
template <typename T>
Var<T> operator-(const Var<T>& a, const Var<T>& b) { return sub(a, b); }
template <typename T>
Var<T> operator*(T c, const Var<T>& a) { return scale(a, c); }

template <typename T>
Var<T> relu(const Var<T>& x) {
  Tensor<T> out = x.value();
  for (auto& v : out.values()) v = v > T{0} ? v : T{0};
  return make_result<T>(std::move(out), {x}, [](Node<T>& self) {
    auto& g = self.parents[0]->ensure_grad();
    const auto& xv = self.parents[0]->value;
    for (std::size_t i = 0; i < g.numel(); ++i) {
      if (xv[i] > T{0}) g[i] += self.grad[i];
    }
  });
}

// Logistic function on the pre-activation clamped to [-30, 30]. In 32-bit
// mode the upper tail would round to exactly 1, so the output is also capped
// at the largest value below 1; it always lies strictly inside (0, 1).
template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  Tensor<T> out = x.value();
  const T lim = static_cast<T>(kSigmoidClamp);
  const T top = std::nextafter(T{1}, T{0});
  for (auto& v : out.values()) v = std::min(top, T{1} / (T{1} + std::exp(-std::clamp(v, -lim, lim))));
  return make_result<T>(std::move(out), {x}, [lim](Node<T>& self) {
    auto& g = self.parents[0]->ensure_grad();
    const auto& xv = self.parents[0]->value;
    const auto& y = self.value;
    for (std::size_t i = 0; i < g.numel(); ++i) {
      if (xv[i] > -lim && xv[i] < lim) g[i] += self.grad[i] * y[i] * (T{1} - y[i]);
    }
  });
}

template <typename T>
Var<T> activation(const Var<T>& x, Activation kind) {
  return kind == Activation::relu ? relu(x) : sigmoid(x);
}

template <typename T>
Var<T> clamp(const Var<T>& x, T lo, T hi) {
  Tensor<T> out = x.value();
  for (auto& v : out.values()) v = std::clamp(v, lo, hi);
  return make_result<T>(std::move(out), {x}, [lo, hi](Node<T>& self) {
    auto& g = self.parents[0]->ensure_grad();
    const auto& xv = self.parents[0]->value;
    for (std::size_t i = 0; i < g.numel(); ++i) {
      if (xv[i] >= lo && xv[i] <= hi) g[i] += self.grad[i];
    }
  });
}

// ----------------------------------------------------------------- reductions

template <typename T>
Var<T> sum(const Var<T>& x) {
  T acc{0};
  for (T v : x.value().values()) acc += v;
  return make_result<T>(Tensor<T>::scalar(acc), {x}, [](Node<T>& self) {
    auto& g = self.parents[0]->ensure_grad();
    const T up = self.grad[0];
    for (auto& v : g.values()) v += up;
  });
}

template <typename T>
Var<T> mean(const Var<T>& x) {
  T acc{0};
  for (T v : x.value().values()) acc += v;
  const T inv = T{1} / static_cast<T>(x.numel());
  return make_result<T>(Tensor<T>::scalar(acc * inv), {x}, [inv](Node<T>& self) {
    auto& g = self.parents[0]->ensure_grad();
    const T up = self.grad[0] * inv;
    for (auto& v : g.values()) v += up;
  });
}

// ----------------------------------------------------------------- structural

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  Tensor<T> out = x.value().reshaped(std::move(shape));
  return make_result<T>(std::move(out), {x}, [](Node<T>& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
  });
}

// [B,C1,H,W] ++ [B,C2,H,W] -> [B,C1+C2,H,W]
template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  const auto& as = a.shape();
  const auto& bs = b.shape();
  if (as.size() != 4 || bs.size() != 4 || as[0] != bs[0] || as[2] != bs[2] || as[3] != bs[3]) {
    throw ShapeError("concat_channels: " + shape_string(as) + " vs " + shape_string(bs));
  }
  const std::size_t batch = as[0], hw = as[2] * as[3], ca = as[1], cb = bs[1];
  Tensor<T> out(Shape{batch, ca + cb, as[2], as[3]});
  for (std::size_t n = 0; n < batch; ++n) {
    std::copy_n(a.value().data() + n * ca * hw, ca * hw, out.data() + n * (ca + cb) * hw);
    std::copy_n(b.value().data() + n * cb * hw, cb * hw, out.data() + n * (ca + cb) * hw + ca * hw);
  }
  return make_result<T>(std::move(out), {a, b}, [batch, hw, ca, cb](Node<T>& self) {
    for (std::size_t p = 0; p < 2; ++p) {
      if (!wants_grad(self, p)) continue;
      auto& g = self.parents[p]->ensure_grad();
      const std::size_t c = p == 0 ? ca : cb;
      const std::size_t off = p == 0 ? 0 : ca * hw;
      for (std::size_t n = 0; n < batch; ++n) {
        const T* src = self.grad.data() + n * (ca + cb) * hw + off;
        T* dst = g.data() + n * c * hw;
        for (std::size_t i = 0; i < c * hw; ++i) dst[i] += src[i];
      }
    }
  });
}

// Columns [begin, end) of a [B,N] matrix.
template <typename T>
Var<T> slice_columns(const Var<T>& x, std::size_t begin, std::size_t end) {
  const auto& s = x.shape();
  if (s.size() != 2 || begin >= end || end > s[1]) {
    throw ShapeError("slice_columns: bad range on " + shape_string(s));
  }
  const std::size_t rows = s[0], cols = s[1], w = end - begin;
  Tensor<T> out(Shape{rows, w});
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(x.value().data() + r * cols + begin, w, out.data() + r * w);
  }
  return make_result<T>(std::move(out), {x}, [rows, cols, begin, w](Node<T>& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < w; ++j) g[r * cols + begin + j] += self.grad[r * w + j];
    }
  });
}

// --------------------------------------------------------------- convolution

namespace detail {

// Per-thread work buffers reused across calls, indexed by slot.
template <typename T>
std::vector<T>& scratch(int slot, std::size_t n) {
  thread_local std::vector<T> buffers[4];
  auto& b = buffers[slot];
  if (b.size() < n) b.resize(n);
  return b;
}

// Unfolds one [C,H,W] image into a [C*k*k, H*W] patch matrix with zero
// padding of k/2 on every side (SAME, stride 1).
template <typename T>
void im2col(const T* img, std::size_t channels, std::size_t h, std::size_t w, std::size_t k, T* col) {
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(k / 2);
  const auto H = static_cast<std::ptrdiff_t>(h), W = static_cast<std::ptrdiff_t>(w);
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t ki = 0; ki < k; ++ki) {
      for (std::size_t kj = 0; kj < k; ++kj) {
        T* row = col + ((c * k + ki) * k + kj) * h * w;
        const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ki) - pad;
        const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kj) - pad;
        const std::ptrdiff_t x0 = std::max<std::ptrdiff_t>(0, -dx);
        const std::ptrdiff_t x1 = std::min<std::ptrdiff_t>(W, W - dx);
        for (std::ptrdiff_t y = 0; y < H; ++y) {
          T* dst = row + y * W;
          const std::ptrdiff_t sy = y + dy;
          if (sy < 0 || sy >= H || x0 >= x1) {
            std::fill_n(dst, W, T{0});
            continue;
          }
          const T* src = img + (c * h + sy) * w;
          std::fill_n(dst, x0, T{0});
          std::copy(src + x0 + dx, src + x1 + dx, dst + x0);
          std::fill(dst + x1, dst + W, T{0});
        }
      }
    }
  }
}

// Adjoint of im2col: scatters patch-matrix gradients back into the image.
template <typename T>
void col2im_add(const T* col, std::size_t channels, std::size_t h, std::size_t w, std::size_t k, T* img) {
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(k / 2);
  const auto H = static_cast<std::ptrdiff_t>(h), W = static_cast<std::ptrdiff_t>(w);
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t ki = 0; ki < k; ++ki) {
      for (std::size_t kj = 0; kj < k; ++kj) {
        const T* row = col + ((c * k + ki) * k + kj) * h * w;
        const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ki) - pad;
        const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kj) - pad;
        const std::ptrdiff_t x0 = std::max<std::ptrdiff_t>(0, -dx);
        const std::ptrdiff_t x1 = std::min<std::ptrdiff_t>(W, W - dx);
        for (std::ptrdiff_t y = 0; y < H; ++y) {
          const std::ptrdiff_t sy = y + dy;
          if (sy < 0 || sy >= H) continue;
          T* dst = img + (c * h + sy) * w;
          const T* src = row + y * W;
          for (std::ptrdiff_t x = x0; x < x1; ++x) dst[x + dx] += src[x];
        }
      }
    }
  }
}

// Shifted-tap convolution. The image is zero-padded into rows of width
// w + k - 1, which turns every kernel tap into a fixed offset into the padded
// buffer: the layer becomes k*k GEMMs against strided views, with no patch
// matrix. Results come out in padded-row layout (h rows of width wp) whose
// last k - 1 columns are junk.
struct ShiftGeom {
  std::size_t h, w, k, wp, plane, n;
  ShiftGeom(std::size_t h_, std::size_t w_, std::size_t k_)
      : h(h_), w(w_), k(k_), wp(w_ + k_ - 1), plane((h_ + k_ - 1) * (w_ + k_ - 1) + k_), n(h_ * (w_ + k_ - 1)) {}
  std::size_t offset(std::size_t t) const { return (t / k) * wp + t % k; }
};

template <typename T>
using StridedMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

template <typename T>
void pad_image(const T* img, std::size_t channels, const ShiftGeom& g, T* dst) {
  const std::size_t p = g.k / 2;
  std::fill_n(dst, channels * g.plane, T{0});
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t y = 0; y < g.h; ++y) std::copy_n(img + (c * g.h + y) * g.w, g.w, dst + c * g.plane + (y + p) * g.wp + p);
  }
}

// acc[cout, n] = sum_t taps[t] * shifted view t; taps: k*k row-major [cout, cin].
template <typename T>
void shifted_taps(const T* padded, std::size_t cin, const ShiftGeom& g, const T* taps, std::size_t cout, T* acc) {
  MatMap<T> a(acc, cout, g.n);
  for (std::size_t t = 0; t < g.k * g.k; ++t) {
    ConstMatMap<T> wt(taps + t * cout * cin, cout, cin);
    StridedMap<T> xt(padded + g.offset(t), cin, g.n, Eigen::OuterStride<>(g.plane));
    if (t == 0) {
      a.noalias() = wt * xt;
    } else {
      a.noalias() += wt * xt;
    }
  }
}

// Padded-row layout -> [C,H,W], optionally accumulating.
template <typename T>
void unpad_rows(const T* acc, std::size_t channels, const ShiftGeom& g, T* out, bool accumulate) {
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t y = 0; y < g.h; ++y) {
      const T* src = acc + c * g.n + y * g.wp;
      T* dst = out + (c * g.h + y) * g.w;
      if (accumulate) {
        for (std::size_t x = 0; x < g.w; ++x) dst[x] += src[x];
      } else {
        std::copy_n(src, g.w, dst);
      }
    }
  }
}

// Below this many input channels the patch-matrix path is faster.
inline constexpr std::size_t kShiftMinChannels = 8;

}  // namespace detail

// SAME-padded, stride-1 2-D convolution (cross-correlation).
// x: [C_in,H,W] or [B,C_in,H,W]; w: [C_out,C_in,k,k] with odd k; b: [C_out].
template <typename T>
Var<T> conv2d_same(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  if (xs.size() != 3 && xs.size() != 4) throw ShapeError("conv2d_same: input must be rank 3 or 4, got " + shape_string(xs));
  if (ws.size() != 4 || ws[2] != ws[3] || ws[2] % 2 == 0) {
    throw ShapeError("conv2d_same: weights must be [out,in,k,k] with odd k, got " + shape_string(ws));
  }
  const bool batched = xs.size() == 4;
  const std::size_t batch = batched ? xs[0] : 1;
  const std::size_t cin = xs[batched ? 1 : 0], h = xs[batched ? 2 : 1], wd = xs[batched ? 3 : 2];
  const std::size_t cout = ws[0], k = ws[2];
  if (ws[1] != cin) {
    throw ShapeError("conv2d_same: layer expects " + std::to_string(ws[1]) + " input channels, got " +
                     std::to_string(cin));
  }
  if (b.shape() != Shape{cout}) throw ShapeError("conv2d_same: bias must be [" + std::to_string(cout) + "]");
  require_finite(x.value(), "conv2d_same input");

  const std::size_t hw = h * wd, kdim = cin * k * k, kk = k * k;
  const bool shifted = k != 1 && cin >= detail::kShiftMinChannels;
  Shape out_shape = batched ? Shape{batch, cout, h, wd} : Shape{cout, h, wd};
  Tensor<T> out(out_shape);
  const auto& wv = w.value();
  Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> bias(b.value().data(), cout);
  if (shifted) {
    const detail::ShiftGeom g(h, wd, k);
    // per-tap [cout, cin] weight matrices
    std::vector<T> taps(kk * cout * cin);
    for (std::size_t co = 0; co < cout; ++co) {
      for (std::size_t ci = 0; ci < cin; ++ci) {
        for (std::size_t t = 0; t < kk; ++t) taps[(t * cout + co) * cin + ci] = wv[(co * cin + ci) * kk + t];
      }
    }
    std::vector<T>& padded = detail::scratch<T>(0, cin * g.plane);
    std::vector<T>& acc = detail::scratch<T>(1, cout * g.n);
    for (std::size_t n = 0; n < batch; ++n) {
      detail::pad_image(x.value().data() + n * cin * hw, cin, g, padded.data());
      detail::shifted_taps(padded.data(), cin, g, taps.data(), cout, acc.data());
      detail::unpad_rows(acc.data(), cout, g, out.data() + n * cout * hw, false);
      MatMap<T>(out.data() + n * cout * hw, cout, hw).colwise() += bias;
    }
  } else {
    ConstMatMap<T> wm(wv.data(), cout, kdim);
    std::vector<T>& col = detail::scratch<T>(0, k == 1 ? 0 : kdim * hw);
    for (std::size_t n = 0; n < batch; ++n) {
      const T* img = x.value().data() + n * cin * hw;
      const T* patches = img;
      if (k != 1) {
        detail::im2col(img, cin, h, wd, k, col.data());
        patches = col.data();
      }
      MatMap<T> om(out.data() + n * cout * hw, cout, hw);
      om.noalias() = wm * ConstMatMap<T>(patches, kdim, hw);
      om.colwise() += bias;
    }
  }

  return make_result<T>(std::move(out), {x, w, b}, [batch, cin, h, wd, cout, k, hw, kdim, kk, shifted](Node<T>& self) {
    const bool gx = wants_grad(self, 0), gw = wants_grad(self, 1), gb = wants_grad(self, 2);
    const auto& xv = self.parents[0]->value;
    const auto& wv = self.parents[1]->value;
    T* dw = gw ? self.parents[1]->ensure_grad().data() : nullptr;
    T* db = gb ? self.parents[2]->ensure_grad().data() : nullptr;
    T* dx = gx ? self.parents[0]->ensure_grad().data() : nullptr;
    if (gb) {
      // plain loops: Eigen's vectorized reductions peel by buffer alignment,
      // which would make the summation order depend on the allocator
      const T* g = self.grad.data();
      for (std::size_t n = 0; n < batch; ++n) {
        for (std::size_t co = 0; co < cout; ++co, g += hw) {
          T acc{0};
          for (std::size_t i = 0; i < hw; ++i) acc += g[i];
          db[co] += acc;
        }
      }
    }
    if (k == 1) {
      ConstMatMap<T> wm(wv.data(), cout, cin);
      for (std::size_t n = 0; n < batch; ++n) {
        ConstMatMap<T> gout(self.grad.data() + n * cout * hw, cout, hw);
        if (gw) MatMap<T>(dw, cout, cin).noalias() += gout * ConstMatMap<T>(xv.data() + n * cin * hw, cin, hw).transpose();
        if (gx) MatMap<T>(dx + n * cin * hw, cin, hw).noalias() += wm.transpose() * gout;
      }
      return;
    }
    // The input gradient is itself a SAME convolution of the output gradient
    // with the spatially flipped, channel-transposed kernel.
    std::vector<T> wflip(gx ? cin * cout * kk : 0);
    for (std::size_t co = 0; co < cout && gx; ++co) {
      for (std::size_t ci = 0; ci < cin; ++ci) {
        for (std::size_t t = 0; t < kk; ++t) {
          const T v = wv[(co * cin + ci) * kk + t];
          if (shifted) {
            wflip[((kk - 1 - t) * cin + ci) * cout + co] = v;  // per-tap [cin, cout]
          } else {
            wflip[(ci * cout + co) * kk + (kk - 1 - t)] = v;
          }
        }
      }
    }
    if (shifted) {
      const detail::ShiftGeom g(h, wd, k);
      std::vector<T>& padded = detail::scratch<T>(0, std::max(cin, cout) * g.plane);
      std::vector<T>& acc = detail::scratch<T>(1, std::max(cin, cout) * g.n);
      std::vector<T> dtaps(gw ? kk * cout * cin : 0);
      for (std::size_t n = 0; n < batch; ++n) {
        const T* gptr = self.grad.data() + n * cout * hw;
        if (gw) {
          // output gradient in padded-row layout, junk columns zeroed
          std::fill_n(acc.data(), cout * g.n, T{0});
          for (std::size_t co = 0; co < cout; ++co) {
            for (std::size_t y = 0; y < h; ++y) std::copy_n(gptr + (co * h + y) * wd, wd, acc.data() + co * g.n + y * g.wp);
          }
          detail::pad_image(xv.data() + n * cin * hw, cin, g, padded.data());
          ConstMatMap<T> gm(acc.data(), cout, g.n);
          for (std::size_t t = 0; t < kk; ++t) {
            detail::StridedMap<T> xt(padded.data() + g.offset(t), cin, g.n, Eigen::OuterStride<>(g.plane));
            MatMap<T>(dtaps.data() + t * cout * cin, cout, cin).noalias() += gm * xt.transpose();
          }
        }
        if (gx) {
          detail::pad_image(gptr, cout, g, padded.data());
          detail::shifted_taps(padded.data(), cout, g, wflip.data(), cin, acc.data());
          detail::unpad_rows(acc.data(), cin, g, dx + n * cin * hw, true);
        }
      }
      for (std::size_t co = 0; co < cout && gw; ++co) {
        for (std::size_t ci = 0; ci < cin; ++ci) {
          for (std::size_t t = 0; t < kk; ++t) dw[(co * cin + ci) * kk + t] += dtaps[(t * cout + co) * cin + ci];
        }
      }
      return;
    }
    std::vector<T>& col = detail::scratch<T>(0, gw ? kdim * hw : 0);
    std::vector<T>& gcol = detail::scratch<T>(1, gx ? cout * kk * hw : 0);
    for (std::size_t n = 0; n < batch; ++n) {
      const T* gptr = self.grad.data() + n * cout * hw;
      ConstMatMap<T> gout(gptr, cout, hw);
      if (gw) {
        detail::im2col(xv.data() + n * cin * hw, cin, h, wd, k, col.data());
        MatMap<T>(dw, cout, kdim).noalias() += gout * ConstMatMap<T>(col.data(), kdim, hw).transpose();
      }
      if (gx) {
        detail::im2col(gptr, cout, h, wd, k, gcol.data());
        MatMap<T>(dx + n * cin * hw, cin, hw).noalias() +=
            ConstMatMap<T>(wflip.data(), cin, cout * kk) * ConstMatMap<T>(gcol.data(), cout * kk, hw);
      }
    }
  });
}

// y = W x + b. x: [in] or [B, ...] flattened per row; w: [out,in]; b: [out].
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  const auto& ws = w.shape();
  if (ws.size() != 2) throw ShapeError("linear: weights must be [out,in]");
  const std::size_t out_dim = ws[0], in_dim = ws[1];
  const bool batched = x.shape().size() > 1;
  const std::size_t batch = batched ? x.shape()[0] : 1;
  if (x.numel() != batch * in_dim) {
    throw ShapeError("linear: input " + shape_string(x.shape()) + " does not match in_dim " + std::to_string(in_dim));
  }
  if (b.shape() != Shape{out_dim}) throw ShapeError("linear: bias must be [" + std::to_string(out_dim) + "]");

  Tensor<T> out(batched ? Shape{batch, out_dim} : Shape{out_dim});
  ConstMatMap<T> xm(x.value().data(), batch, in_dim);
  ConstMatMap<T> wm(w.value().data(), out_dim, in_dim);
  MatMap<T> om(out.data(), batch, out_dim);
  om.noalias() = xm * wm.transpose();
  Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> bias(b.value().data(), out_dim);
  om.rowwise() += bias;

  return make_result<T>(std::move(out), {x, w, b}, [batch, in_dim, out_dim](Node<T>& self) {
    ConstMatMap<T> gout(self.grad.data(), batch, out_dim);
    if (wants_grad(self, 0)) {
      ConstMatMap<T> wm(self.parents[1]->value.data(), out_dim, in_dim);
      MatMap<T>(self.parents[0]->ensure_grad().data(), batch, in_dim).noalias() += gout * wm;
    }
    if (wants_grad(self, 1)) {
      ConstMatMap<T> xm(self.parents[0]->value.data(), batch, in_dim);
      MatMap<T>(self.parents[1]->ensure_grad().data(), out_dim, in_dim).noalias() += gout.transpose() * xm;
    }
    if (wants_grad(self, 2)) {
      T* db = self.parents[2]->ensure_grad().data();
      for (std::size_t n = 0; n < batch; ++n) {
        const T* g = self.grad.data() + n * out_dim;
        for (std::size_t j = 0; j < out_dim; ++j) db[j] += g[j];
      }
    }
  });
}

}  // namespace vce::nn
