#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "vce/layers.hpp"

namespace vce::model {

using nn::Parameter;
using nn::Shape;
using nn::Tensor;
using nn::Var;

// Architecture knobs. The defaults are the published configuration: 28x28
// glyphs, 32 channels, 8 residual blocks per network, and a latent width of
// twice the image width. Smaller settings exist only for fast unit tests.
struct ModelSpec {
  std::size_t image_size = 28;
  std::size_t channels = 32;
  std::size_t residual_blocks = 8;

  std::size_t latent_dim() const { return 2 * image_size; }
  std::size_t pixels() const { return image_size * image_size; }

  bool is_standard() const { return image_size == 28 && channels == 32 && residual_blocks == 8; }

  void validate() const {
    if (image_size == 0 || channels == 0 || residual_blocks == 0) throw ShapeError("model spec dims must be positive");
  }

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

// Initial gain of the two output heads (encoder projection, convertor 1x1);
// keeps a fresh model's conversions near 0.5 and its posteriors near N(0, I).
inline constexpr double kHeadGain = 0.1;
inline constexpr double kLogvarLimit = 20.0;

template <typename T>
struct Encoder {
  nn::ConvLayer<T> stem;  // 5x5, 2 -> C
  std::vector<nn::ResidualBlock<T>> blocks;
  nn::LinearLayer<T> head;  // C*H*W -> 2D

  std::vector<Parameter<T>*> parameters() {
    auto p = stem.parameters();
    for (auto& b : blocks) {
      for (auto* q : b.parameters()) p.push_back(q);
    }
    for (auto* q : head.parameters()) p.push_back(q);
    return p;
  }
};

template <typename T>
struct Convertor {
  nn::ConvLayer<T> stem;  // 5x5, 3 -> C
  std::vector<nn::ResidualBlock<T>> blocks;
  nn::ConvLayer<T> out;  // 1x1, C -> 1, followed by sigmoid

  std::vector<Parameter<T>*> parameters() {
    auto p = stem.parameters();
    for (auto& b : blocks) {
      for (auto* q : b.parameters()) p.push_back(q);
    }
    for (auto* q : out.parameters()) p.push_back(q);
    return p;
  }
};

template <typename T>
struct VceModel {
  ModelSpec spec;
  Encoder<T> encoder;
  Convertor<T> convertor;

  std::size_t latent_dim() const { return spec.latent_dim(); }

  // Fixed traversal order shared by checkpoints and Reptile interpolation:
  // encoder (stem, blocks a/b, head) then convertor (stem, blocks a/b, out),
  // weight before bias in every layer.
  std::vector<Parameter<T>*> parameters() {
    auto p = encoder.parameters();
    for (auto* q : convertor.parameters()) p.push_back(q);
    return p;
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    for (auto* p : parameters()) n += p->numel();
    return n;
  }
};

template <typename T>
VceModel<T> make_model(const ModelSpec& spec, Rng& rng) {
  spec.validate();
  const std::size_t c = spec.channels, depth = spec.residual_blocks;
  VceModel<T> m;
  m.spec = spec;
  m.encoder.stem = nn::make_conv<T>(2, c, 5, rng);
  for (std::size_t i = 0; i < depth; ++i) m.encoder.blocks.push_back(nn::make_residual_block<T>(c, depth, rng));
  m.encoder.head = nn::make_linear<T>(c * spec.pixels(), 2 * spec.latent_dim(), rng, kHeadGain);
  m.convertor.stem = nn::make_conv<T>(3, c, 5, rng);
  for (std::size_t i = 0; i < depth; ++i) m.convertor.blocks.push_back(nn::make_residual_block<T>(c, depth, rng));
  m.convertor.out = nn::make_conv<T>(c, 1, 1, rng, kHeadGain);
  return m;
}

// Same architecture, every parameter zero.
template <typename T>
VceModel<T> make_zero_model(const ModelSpec& spec) {
  Rng rng(0);
  auto m = make_model<T>(spec, rng);
  for (auto* p : m.parameters()) p->mutable_value().fill(T{0});
  return m;
}

// Precision conversion (e.g. float training weights to a 64-bit copy).
template <typename U, typename T>
VceModel<U> cast_model(VceModel<T>& src) {
  VceModel<U> dst = make_zero_model<U>(src.spec);
  auto from = src.parameters();
  auto to = dst.parameters();
  for (std::size_t i = 0; i < from.size(); ++i) to[i]->mutable_value() = from[i]->value().template cast<U>();
  return dst;
}

template <typename T>
void set_trainable(Encoder<T>& e, bool on) {
  nn::set_trainable(e.parameters(), on);
}
template <typename T>
void set_trainable(Convertor<T>& c, bool on) {
  nn::set_trainable(c.parameters(), on);
}

template <typename T>
struct Posterior {
  Var<T> mu;      // [B, D]
  Var<T> logvar;  // [B, D], clamped to [-20, 20]
};

template <typename T>
struct LatentSample {
  Var<T> mu;
  Var<T> logvar;
  Tensor<T> eps;
  Var<T> z;
};

inline void check_image_batch(const Shape& s, std::size_t size, const char* what) {
  if (s.size() != 4 || s[1] != 1 || s[2] != size || s[3] != size) {
    throw ShapeError(std::string(what) + ": expected [B,1," + std::to_string(size) + "," + std::to_string(size) +
                     "], got " + nn::shape_string(s));
  }
}

// (x, q) stacked as two channels -> posterior parameters of the rules z.
// x, q: [B,1,H,W].
template <typename T>
Posterior<T> encode(const VceModel<T>& m, const Var<T>& x, const Var<T>& q) {
  check_image_batch(x.shape(), m.spec.image_size, "encode x");
  check_image_batch(q.shape(), m.spec.image_size, "encode q");
  if (x.shape() != q.shape()) throw ShapeError("encode: x and q batch sizes differ");
  const std::size_t batch = x.shape()[0], d = m.latent_dim();
  Var<T> h = m.encoder.stem(nn::concat_channels(x, q));
  for (const auto& b : m.encoder.blocks) h = b(h);
  Var<T> stats = m.encoder.head(nn::reshape(h, Shape{batch, h.numel() / batch}));
  const T lim = static_cast<T>(kLogvarLimit);
  return Posterior<T>{nn::slice_columns(stats, 0, d), nn::clamp(nn::slice_columns(stats, d, 2 * d), -lim, lim)};
}

// z = mu + exp(logvar / 2) * eps. eps is a constant of the graph: gradients
// reach mu and logvar only.
template <typename T>
LatentSample<T> reparameterize(const Var<T>& mu, const Var<T>& logvar, const Tensor<T>& eps) {
  nn::require_same_shape(mu.value(), logvar.value(), "reparameterize mu/logvar");
  nn::require_same_shape(mu.value(), eps, "reparameterize mu/eps");
  Tensor<T> z = mu.value();
  for (std::size_t i = 0; i < z.numel(); ++i) z[i] += std::exp(T{0.5} * logvar.value()[i]) * eps[i];
  Var<T> zv = nn::make_result<T>(std::move(z), {mu, logvar}, [eps](nn::Node<T>& self) {
    if (nn::wants_grad(self, 0)) {
      auto& g = self.parents[0]->ensure_grad();
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
    }
    if (nn::wants_grad(self, 1)) {
      auto& g = self.parents[1]->ensure_grad();
      const auto& lv = self.parents[1]->value;
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * T{0.5} * std::exp(T{0.5} * lv[i]) * eps[i];
    }
  });
  return LatentSample<T>{mu, logvar, eps, zv};
}

// Standard-normal draws, row-major [batch, d].
template <typename T>
Tensor<T> sample_normal(std::size_t batch, std::size_t d, Rng& rng) {
  Tensor<T> t(Shape{batch, d});
  for (auto& v : t.values()) v = static_cast<T>(rng.normal());
  return t;
}

// One rule vector from the prior N(0, I).
template <typename T>
Tensor<T> sample_prior(std::size_t d, Rng& rng) {
  if (d == 0) throw ShapeError("sample_prior: dimension must be positive");
  Tensor<T> t(Shape{d});
  for (auto& v : t.values()) v = static_cast<T>(rng.normal());
  return t;
}

// Builds the convertor input: channel 0 is q, channels 1 and 2 carry the two
// noise values assigned to each image row, broadcast along that row
// (row i <- z[2i], z[2i+1]). z: [B, 2H], q: [B,1,H,W] -> [B,3,H,W].
template <typename T>
Var<T> juxtapose(const Var<T>& z, const Var<T>& q) {
  const auto& qs = q.shape();
  if (qs.size() != 4 || qs[1] != 1) throw ShapeError("juxtapose: q must be [B,1,H,W], got " + nn::shape_string(qs));
  const std::size_t batch = qs[0], h = qs[2], w = qs[3];
  if (z.shape() != Shape{batch, 2 * h}) {
    throw ShapeError("juxtapose: z must be [" + std::to_string(batch) + "," + std::to_string(2 * h) + "], got " +
                     nn::shape_string(z.shape()));
  }
  Tensor<T> out(Shape{batch, 3, h, w});
  for (std::size_t n = 0; n < batch; ++n) {
    T* o = out.data() + n * 3 * h * w;
    std::copy_n(q.value().data() + n * h * w, h * w, o);
    for (std::size_t r = 0; r < h; ++r) {
      std::fill_n(o + h * w + r * w, w, z.value()[n * 2 * h + 2 * r]);
      std::fill_n(o + 2 * h * w + r * w, w, z.value()[n * 2 * h + 2 * r + 1]);
    }
  }
  return nn::make_result<T>(std::move(out), {z, q}, [batch, h, w](nn::Node<T>& self) {
    const T* g = self.grad.data();
    if (nn::wants_grad(self, 0)) {
      auto& gz = self.parents[0]->ensure_grad();
      for (std::size_t n = 0; n < batch; ++n) {
        for (std::size_t r = 0; r < h; ++r) {
          for (std::size_t ch = 0; ch < 2; ++ch) {
            const T* row = g + n * 3 * h * w + (ch + 1) * h * w + r * w;
            T acc{0};
            for (std::size_t c = 0; c < w; ++c) acc += row[c];
            gz[n * 2 * h + 2 * r + ch] += acc;
          }
        }
      }
    }
    if (nn::wants_grad(self, 1)) {
      auto& gq = self.parents[1]->ensure_grad();
      for (std::size_t n = 0; n < batch; ++n) {
        for (std::size_t i = 0; i < h * w; ++i) gq[n * h * w + i] += g[n * 3 * h * w + i];
      }
    }
  });
}

// Applies rules z to condition q: y = sigmoid(out(blocks(stem(juxtapose(z, q))))).
// Returns [B,1,H,W] with every value in (0, 1).
template <typename T>
Var<T> convert(const VceModel<T>& m, const Var<T>& z, const Var<T>& q) {
  check_image_batch(q.shape(), m.spec.image_size, "convert q");
  Var<T> h = m.convertor.stem(juxtapose(z, q));
  for (const auto& b : m.convertor.blocks) h = b(h);
  return nn::sigmoid(m.convertor.out(h));
}

// Stacks equally sized images into a constant [B,1,H,W] batch.
template <typename T, typename Images>
Var<T> image_batch(const Images& images, std::size_t size) {
  const std::size_t batch = std::size(images);
  Tensor<T> t(Shape{batch, 1, size, size});
  std::size_t n = 0;
  for (const auto& img : images) {
    if (std::size(img) != size * size) throw ShapeError("image_batch: image has wrong pixel count");
    std::copy(std::begin(img), std::end(img), t.data() + n * size * size);
    ++n;
  }
  return Var<T>::constant(std::move(t));
}

// The same image repeated `batch` times.
template <typename T, typename Image>
Var<T> repeat_image(const Image& img, std::size_t batch, std::size_t size) {
  if (std::size(img) != size * size) throw ShapeError("repeat_image: image has wrong pixel count");
  Tensor<T> t(Shape{batch, 1, size, size});
  for (std::size_t n = 0; n < batch; ++n) std::copy(std::begin(img), std::end(img), t.data() + n * size * size);
  return Var<T>::constant(std::move(t));
}

}  // namespace vce::model
