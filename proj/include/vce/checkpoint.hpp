#pragma once

// Checkpoint layout (little-endian):
//   "VCE1" | version u16 | latent dim u16 | channels u16 | residual blocks u16
//   parameter tensors in model traversal order, each
//     rank u8 | dims u32 x rank | f32 values
//   tagged sections, each tag[4] | length u64 | payload:
//     "ADAM" optimizer moments (encoder state, then convertor state)
//     "TRNS" step, phase, phase episode, random stream, loss windows
//     "META" free-form provenance text
//   "END " with length 0.
// Inference loads read the parameters and skip every section.

#include <filesystem>
#include <string>

#include "vce/binary_io.hpp"
#include "vce/image_io.hpp"
#include "vce/training.hpp"

namespace vce::ckpt {

using train::TrainState;

inline constexpr std::uint16_t kVersion = 1;

using Reader = io::ByteReader<CheckpointError>;

namespace detail {

inline void write_tensor(io::ByteWriter& w, const nn::Tensor<float>& t) {
  w.u8(static_cast<std::uint8_t>(t.rank()));
  for (auto d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
  for (float v : t.values()) w.f32(v);
}

inline void read_tensor_into(Reader& r, nn::Tensor<float>& t, const std::string& what) {
  const std::size_t rank = r.u8();
  nn::Shape shape(rank);
  for (auto& d : shape) d = r.u32();
  if (shape != t.shape()) {
    throw CheckpointError("parameter " + what + " has shape " + nn::shape_string(shape) + ", model expects " +
                          nn::shape_string(t.shape()));
  }
  for (auto& v : t.values()) v = r.f32();
}

inline void write_adam(io::ByteWriter& w, const nn::AdamState<float>& s) {
  w.u64(s.t);
  w.u32(static_cast<std::uint32_t>(s.m.size()));
  for (std::size_t i = 0; i < s.m.size(); ++i) {
    write_tensor(w, s.m[i]);
    write_tensor(w, s.v[i]);
  }
}

inline void read_adam(Reader& r, nn::AdamState<float>& s, const std::vector<nn::Parameter<float>*>& params) {
  s = nn::make_adam_state(params);
  s.t = r.u64();
  if (r.u32() != params.size()) throw CheckpointError("optimizer state does not match the model");
  for (std::size_t i = 0; i < params.size(); ++i) {
    read_tensor_into(r, s.m[i], "adam.m");
    read_tensor_into(r, s.v[i], "adam.v");
  }
}

inline void write_window(io::ByteWriter& w, const train::RunningWindow& win) {
  w.u32(static_cast<std::uint32_t>(win.capacity()));
  w.u32(static_cast<std::uint32_t>(win.size()));
  for (double v : win.values()) w.f64(v);
}

inline train::RunningWindow read_window(Reader& r) {
  const std::size_t cap = r.u32(), n = r.u32();
  if (cap == 0 || n > cap) throw CheckpointError("corrupt loss window");
  std::vector<double> vals(n);
  for (auto& v : vals) v = r.f64();
  return train::RunningWindow::from_values(cap, vals);
}

inline void section(io::ByteWriter& w, const char* tag, const std::vector<std::uint8_t>& payload) {
  w.tag(tag);
  w.u64(payload.size());
  w.bytes(payload.data(), payload.size());
}

}  // namespace detail

struct Header {
  std::uint16_t version = kVersion;
  model::ModelSpec spec;
};

inline Header read_header(Reader& r) {
  if (r.tag() != "VCE1") throw CheckpointError("not a checkpoint (bad magic)");
  Header h;
  h.version = r.u16();
  if (h.version != kVersion) throw CheckpointError("unsupported checkpoint version " + std::to_string(h.version));
  const std::size_t latent = r.u16();
  h.spec.channels = r.u16();
  h.spec.residual_blocks = r.u16();
  if (latent == 0 || latent % 2 != 0) throw CheckpointError("corrupt latent dimension");
  h.spec.image_size = latent / 2;
  if (h.spec.channels == 0 || h.spec.residual_blocks == 0) throw CheckpointError("corrupt architecture header");
  return h;
}

inline void write_model_part(io::ByteWriter& w, model::VceModel<float>& m) {
  w.tag("VCE1");
  w.u16(kVersion);
  w.u16(static_cast<std::uint16_t>(m.latent_dim()));
  w.u16(static_cast<std::uint16_t>(m.spec.channels));
  w.u16(static_cast<std::uint16_t>(m.spec.residual_blocks));
  for (auto* p : m.parameters()) detail::write_tensor(w, p->value());
}

inline model::VceModel<float> read_model_part(Reader& r) {
  const Header h = read_header(r);
  auto m = model::make_zero_model<float>(h.spec);
  std::size_t i = 0;
  for (auto* p : m.parameters()) detail::read_tensor_into(r, p->mutable_value(), "#" + std::to_string(i++));
  return m;
}

inline std::vector<std::uint8_t> encode_state(TrainState<float>& st, const std::string& meta = {}) {
  io::ByteWriter w;
  write_model_part(w, st.model);
  {
    io::ByteWriter a;
    detail::write_adam(a, st.adam_encoder);
    detail::write_adam(a, st.adam_convertor);
    detail::section(w, "ADAM", a.take());
  }
  {
    io::ByteWriter t;
    t.u64(st.step);
    t.u8(static_cast<std::uint8_t>(st.phase));
    t.u64(st.phase_episode);
    t.str(st.rng.serialize());
    for (const auto* win : {&st.kl_z, &st.kl_zc, &st.con}) detail::write_window(t, *win);
    t.f64(st.es_sum);
    t.u64(st.es_count);
    t.u32(static_cast<std::uint32_t>(st.es_history.size()));
    for (double v : st.es_history) t.f64(v);
    t.u8(st.converged ? 1 : 0);
    detail::section(w, "TRNS", t.take());
  }
  {
    io::ByteWriter mt;
    mt.str(meta);
    detail::section(w, "META", mt.take());
  }
  w.tag("END ");
  w.u64(0);
  return w.take();
}

struct Loaded {
  TrainState<float> state;
  std::string meta;
  bool has_optimizer = false;
  bool has_training = false;
};

// Full decode. Fails without returning partial state on any inconsistency.
inline Loaded decode_state(std::span<const std::uint8_t> bytes) {
  Reader r(bytes, "checkpoint");
  Loaded out;
  out.state.model = read_model_part(r);
  out.state.adam_encoder = nn::make_adam_state(out.state.model.encoder.parameters());
  out.state.adam_convertor = nn::make_adam_state(out.state.model.convertor.parameters());
  for (;;) {
    const std::string tag = r.tag();
    const std::uint64_t len = r.u64();
    if (tag == "END ") break;
    if (len > r.remaining()) throw CheckpointError("checkpoint: unexpected end of data");
    const auto payload = bytes.subspan(r.position(), static_cast<std::size_t>(len));
    r.skip(static_cast<std::size_t>(len));
    Reader s(payload, "checkpoint section " + tag);
    if (tag == "ADAM") {
      detail::read_adam(s, out.state.adam_encoder, out.state.model.encoder.parameters());
      detail::read_adam(s, out.state.adam_convertor, out.state.model.convertor.parameters());
      out.has_optimizer = true;
    } else if (tag == "TRNS") {
      auto& st = out.state;
      st.step = s.u64();
      st.phase = train::phase_from_code(s.u8());
      st.phase_episode = s.u64();
      st.rng = Rng::deserialize(s.str());
      st.kl_z = detail::read_window(s);
      st.kl_zc = detail::read_window(s);
      st.con = detail::read_window(s);
      st.es_sum = s.f64();
      st.es_count = s.u64();
      st.es_history.resize(s.u32());
      for (auto& v : st.es_history) v = s.f64();
      st.converged = s.u8() != 0;
      out.has_training = true;
    } else if (tag == "META") {
      out.meta = s.str();
    } else {
      continue;  // unknown sections are skipped
    }
    if (!s.at_end()) throw CheckpointError("checkpoint section " + tag + " has trailing bytes");
  }
  if (!r.at_end()) throw CheckpointError("checkpoint: trailing bytes after END");
  return out;
}

inline void save(const std::filesystem::path& path, TrainState<float>& st, const std::string& meta = {}) {
  // Write to a sibling temp file and rename, so a crash never leaves a
  // truncated checkpoint under the final name.
  auto tmp = path;
  tmp += ".tmp";
  io::write_file_bytes(tmp, encode_state(st, meta));
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

inline std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  try {
    return io::read_file_bytes(path);
  } catch (const IoError& e) {
    throw CheckpointError(e.what());
  }
}

// Resumable load: requires optimizer and training sections.
inline Loaded load(const std::filesystem::path& path) {
  auto out = decode_state(read_bytes(path));
  if (!out.has_optimizer || !out.has_training) {
    throw CheckpointError(path.string() + " has no optimizer/training state and cannot be resumed");
  }
  return out;
}

// Parameters only; optimizer and training sections are skipped unread.
inline model::VceModel<float> load_model(const std::filesystem::path& path) {
  const auto bytes = read_bytes(path);
  Reader r(bytes, "checkpoint");
  auto m = read_model_part(r);
  for (;;) {
    const std::string tag = r.tag();
    const std::uint64_t len = r.u64();
    if (tag == "END ") break;
    if (len > r.remaining()) throw CheckpointError("checkpoint: unexpected end of data");
    r.skip(static_cast<std::size_t>(len));
  }
  return m;
}

// Reads only the META text of a checkpoint.
inline std::string read_meta(const std::filesystem::path& path) { return decode_state(read_bytes(path)).meta; }

}  // namespace vce::ckpt
