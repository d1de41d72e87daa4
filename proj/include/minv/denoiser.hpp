#pragma once

// Toy video noise-prediction network.
//
// Features live in frame-major layout [H*W, N, C] throughout. Each temporal
// module is preceded by a residual per-pixel channel mixer conditioned on the
// time/prompt embedding; resolution levels are linked by 2x2 average pooling
// on the way down and nearest-neighbour upsampling plus a skip connection on
// the way up.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "minv/attention.hpp"
#include "minv/autograd.hpp"
#include "minv/binary_io.hpp"
#include "minv/embeddings.hpp"
#include "minv/model_spec.hpp"
#include "minv/tensor.hpp"

namespace minv {

struct ParamEntry {
  std::string name;
  Shape shape;
  std::size_t fan_in = 1;
  bool zero_init = false;
};

/// Parameter names, shapes and init scales in storage order.
inline std::vector<ParamEntry> param_layout(const DenoiserSpec& spec) {
  spec.validate();
  std::vector<ParamEntry> out;
  const std::size_t c0 = spec.level_channels(0), d = spec.time_dim;
  out.push_back({"in.w", {c0, spec.image_channels}, spec.image_channels});
  out.push_back({"in.b", {c0}, 1, true});
  out.push_back({"time.w", {d, d}, d});
  out.push_back({"time.b", {d}, 1, true});
  out.push_back({"cond.table", {spec.vocab, d}, 1});
  const auto mods = spec.temporal_modules();
  for (std::size_t i = 0; i < mods.size(); ++i) {
    const std::size_t c = mods[i].channels;
    const std::string b = "block" + std::to_string(i);
    out.push_back({b + ".w1", {c, c}, c});
    out.push_back({b + ".b1", {c}, 1, true});
    out.push_back({b + ".wt", {c, d}, d});
    out.push_back({b + ".w2", {c, c}, c});
    out.push_back({b + ".b2", {c}, 1, true});
    const std::string t = "temporal" + std::to_string(i);
    out.push_back({t + ".wq", {c, c}, c});
    out.push_back({t + ".wk", {c, c}, c});
    out.push_back({t + ".wv", {c, c}, c});
  }
  for (std::size_t l = 0; l + 1 < spec.levels(); ++l) {
    const std::size_t lo = spec.level_channels(l), hi = spec.level_channels(l + 1);
    out.push_back({"down" + std::to_string(l) + ".w", {hi, lo}, lo});
    out.push_back({"up" + std::to_string(l) + ".w", {lo, hi}, hi});
  }
  out.push_back({"out.w", {spec.image_channels, c0}, c0});
  out.push_back({"out.b", {spec.image_channels}, 1, true});
  return out;
}

struct DenoiserParams {
  DenoiserSpec spec;
  std::vector<Tensor> tensors;  ///< in param_layout(spec) order
  bool frozen = false;

  std::size_t index(const std::string& name) const {
    if (names_.empty()) {
      const auto layout = param_layout(spec);
      for (std::size_t i = 0; i < layout.size(); ++i) names_.emplace(layout[i].name, i);
    }
    auto it = names_.find(name);
    if (it == names_.end()) throw ShapeError("unknown denoiser parameter " + name);
    return it->second;
  }

  const Tensor& operator[](const std::string& name) const { return tensors[index(name)]; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors) n += t.size();
    return n;
  }

  /// FNV-1a over every weight's bit pattern, in storage order.
  std::uint64_t checksum() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& t : tensors)
      for (auto v : t.data()) {
        const auto bits = std::bit_cast<std::conditional_t<sizeof(Real) == 8, std::uint64_t, std::uint32_t>>(v);
        for (std::size_t i = 0; i < sizeof(bits); ++i) {
          h ^= static_cast<std::uint8_t>(bits >> (8 * i));
          h *= 0x100000001b3ULL;
        }
      }
    return h;
  }

  friend bool operator==(const DenoiserParams& a, const DenoiserParams& b) {
    return a.spec == b.spec && a.frozen == b.frozen && a.tensors == b.tensors;
  }

 private:
  mutable std::unordered_map<std::string, std::size_t> names_;
};

/// Weights ~ N(0, 1/fan_in), biases zero. Deterministic per seed.
inline DenoiserParams init_params(const DenoiserSpec& spec, std::uint64_t seed) {
  DenoiserParams p;
  p.spec = spec;
  Rng rng(seed);
  for (const auto& e : param_layout(spec)) {
    if (e.zero_init)
      p.tensors.emplace_back(e.shape);
    else
      p.tensors.push_back(randn(e.shape, rng, 1.0 / std::sqrt(static_cast<double>(e.fan_in))));
  }
  return p;
}

/// Sinusoidal embedding of timestep index t, shape [1, dim].
inline Tensor timestep_embedding(std::size_t t, std::size_t dim) {
  Tensor e(Shape{1, dim});
  const std::size_t half = dim / 2;
  for (std::size_t i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
    e[i] = static_cast<Real>(std::sin(static_cast<double>(t) * freq));
    e[half + i] = static_cast<Real>(std::cos(static_cast<double>(t) * freq));
  }
  return e;
}

namespace ad {

/// Graph handles for each embedding tensor, parallel to MotionEmbeddingSet.
struct EmbeddingVars {
  std::vector<Var> qk, v;
};

inline EmbeddingVars bind_embeddings(Graph& g, const MotionEmbeddingSet& m, bool trainable) {
  EmbeddingVars out;
  for (std::size_t i = 0; i < m.size(); ++i) {
    out.qk.push_back(g.leaf(m.qk[i], trainable));
    out.v.push_back(g.leaf(m.v[i], trainable));
  }
  return out;
}

inline std::vector<Var> bind_params(Graph& g, const DenoiserParams& p, bool trainable) {
  std::vector<Var> out;
  out.reserve(p.tensors.size());
  for (const auto& t : p.tensors) out.push_back(g.leaf(t, trainable));
  return out;
}

struct ForwardOptions {
  /// Debugging aid: when non-empty, module i receives its embeddings only if
  /// inject_mask[i] is true.
  std::vector<bool> inject_mask;
};

/// Noise prediction for frame-major input x [H*W, N, C_img].
inline Var denoiser_forward(Graph& g, const DenoiserParams& p, const std::vector<Var>& w, Var x,
                            std::size_t t, std::size_t cond, const EmbeddingVars* m = nullptr,
                            const ForwardOptions& opts = {}) {
  const DenoiserSpec& spec = p.spec;
  auto P = [&](const std::string& name) { return w[p.index(name)]; };
  const std::size_t n = spec.frames;
  const auto mods = spec.temporal_modules();
  if (x.shape() != Shape{spec.height * spec.width, n, spec.image_channels})
    throw ShapeError("denoiser input " + to_string(x.shape()) + " does not match spec");
  if (cond >= spec.vocab)
    throw ShapeError("prompt id " + std::to_string(cond) + " outside vocabulary of " +
                     std::to_string(spec.vocab));
  if (t == 0) throw ShapeError("timestep index must be >= 1");
  if (m && (m->qk.size() != mods.size() || m->v.size() != mods.size()))
    throw ShapeError("embedding count does not match the denoiser's temporal modules");

  // Conditioning vector e [1, D]: time MLP plus the prompt's table row.
  Tensor onehot(Shape{1, spec.vocab});
  onehot[cond] = 1;
  auto temb = silu(add(linear(g.constant(timestep_embedding(t, spec.time_dim)), P("time.w")), P("time.b")));
  auto e = add(temb, matmul(g.constant(std::move(onehot)), P("cond.table")));

  std::size_t module = 0;
  auto stage = [&](Var h) {
    const std::string b = "block" + std::to_string(module);
    const std::string tm = "temporal" + std::to_string(module);
    auto r = add(add(linear(h, P(b + ".w1")), P(b + ".b1")), linear(e, P(b + ".wt")));
    r = add(linear(silu(r), P(b + ".w2")), P(b + ".b2"));
    h = add(h, r);
    AttentionVars<Real> aw{P(tm + ".wq"), P(tm + ".wk"), P(tm + ".wv")};
    const bool inject = m && (opts.inject_mask.empty() || opts.inject_mask.at(module));
    Var a = inject ? temporal_attention(h, aw, std::optional{m->qk[module]}, std::optional{m->v[module]})
                   : temporal_attention(h, aw);
    ++module;
    return add(h, a);
  };

  Var h = add(linear(x, P("in.w")), P("in.b"));
  std::vector<Var> skips;
  for (std::size_t l = 0; l < spec.levels(); ++l) {
    for (std::size_t k = 0; k < spec.modules_per_level; ++k) h = stage(h);
    skips.push_back(h);
    if (l + 1 < spec.levels()) {
      const std::size_t hh = spec.height >> l, ww = spec.width >> l, c = spec.level_channels(l);
      h = avg_pool2(reshape(h, {hh, ww, n, c}));
      h = linear(reshape(h, {(hh / 2) * (ww / 2), n, c}), P("down" + std::to_string(l) + ".w"));
    }
  }
  for (std::size_t l = spec.levels(); l-- > 0;) {
    if (l + 1 < spec.levels()) {
      const std::size_t hh = spec.height >> (l + 1), ww = spec.width >> (l + 1);
      h = linear(h, P("up" + std::to_string(l) + ".w"));
      h = upsample2(reshape(h, {hh, ww, n, spec.level_channels(l)}));
      h = add(reshape(h, {4 * hh * ww, n, spec.level_channels(l)}), skips[l]);
    }
    for (std::size_t k = 0; k < spec.modules_per_level; ++k) h = stage(h);
  }
  return add(linear(silu(h), P("out.w")), P("out.b"));
}

}  // namespace ad

namespace detail {

inline void check_video(const DenoiserSpec& spec, const Tensor& x) {
  const Shape want{1, spec.image_channels, spec.frames, spec.height, spec.width};
  if (x.shape() != want)
    throw ShapeError("video shape " + to_string(x.shape()) + " does not match denoiser " + to_string(want));
}

inline Tensor run_forward(const DenoiserParams& p, const Tensor& x_t, std::size_t t, std::size_t cond,
                          const MotionEmbeddingSet* m, const ad::ForwardOptions& opts) {
  check_video(p.spec, x_t);
  if (m) m->check_compatible(p.spec);
  Graph g;
  auto w = ad::bind_params(g, p, false);
  std::optional<ad::EmbeddingVars> mv;
  if (m) mv = ad::bind_embeddings(g, *m, false);
  auto out = ad::denoiser_forward(g, p, w, g.constant(to_frame_major(x_t)), t, cond,
                                  mv ? &*mv : nullptr, opts);
  return from_frame_major(out.value(), p.spec.height, p.spec.width);
}

}  // namespace detail

/// eps_hat = eps_theta(x_t, t, cond) for a video [1, C_img, N, H, W].
inline Tensor forward(const DenoiserParams& p, const Tensor& x_t, std::size_t t, std::size_t cond,
                      const ad::ForwardOptions& opts = {}) {
  return detail::run_forward(p, x_t, t, cond, nullptr, opts);
}

/// As above with motion embeddings injected into every temporal module.
inline Tensor forward(const DenoiserParams& p, const Tensor& x_t, std::size_t t, std::size_t cond,
                      const MotionEmbeddingSet& m, const ad::ForwardOptions& opts = {}) {
  return detail::run_forward(p, x_t, t, cond, &m, opts);
}

// ---------------------------------------------------------------------------
// MDEN0001 checkpoint.
//
//   "MDEN0001"
//   u32 image_channels, base_channels, height, width, frames
//   u32 levels, levels x u32 channel multiplier
//   u32 modules_per_level, vocab, time_dim, frozen (0/1)
//   u32 tensor count, per tensor: u32 rank, rank x u32 extent
//   u64 FNV-1a of the bytes above
//   tensors in layout order as f64, row-major

inline constexpr std::string_view kParamsMagic = "MDEN0001";

inline std::vector<std::uint8_t> encode_params(const DenoiserParams& p) {
  const auto& s = p.spec;
  io::Writer w;
  w.magic(kParamsMagic);
  for (auto v : {s.image_channels, s.base_channels, s.height, s.width, s.frames, s.levels()})
    w.u32(static_cast<std::uint32_t>(v));
  for (auto m : s.channel_mults) w.u32(static_cast<std::uint32_t>(m));
  for (auto v : {s.modules_per_level, s.vocab, s.time_dim}) w.u32(static_cast<std::uint32_t>(v));
  w.u32(p.frozen ? 1 : 0);
  w.u32(static_cast<std::uint32_t>(p.tensors.size()));
  for (const auto& t : p.tensors) {
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (auto e : t.shape()) w.u32(static_cast<std::uint32_t>(e));
  }
  w.header_hash();
  for (const auto& t : p.tensors)
    for (auto v : t.data()) w.f64(static_cast<double>(v));
  return w.bytes();
}

inline DenoiserParams decode_params(std::span<const std::uint8_t> bytes, const std::string& what = "MDEN") {
  io::Reader r(bytes, what);
  r.magic(kParamsMagic);
  DenoiserSpec s;
  s.image_channels = r.u32("image_channels");
  s.base_channels = r.u32("base_channels");
  s.height = r.u32("height");
  s.width = r.u32("width");
  s.frames = r.u32("frames");
  const std::uint32_t levels = r.u32("levels");
  if (levels == 0 || levels > 16) throw FormatError(what + ": implausible level count");
  s.channel_mults.clear();
  for (std::uint32_t l = 0; l < levels; ++l) s.channel_mults.push_back(r.u32("channel multiplier"));
  s.modules_per_level = r.u32("modules_per_level");
  s.vocab = r.u32("vocab");
  s.time_dim = r.u32("time_dim");
  const std::uint32_t frozen = r.u32("frozen flag");
  const std::uint32_t count = r.u32("tensor count");
  std::vector<Shape> shapes;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t rank = r.u32("tensor rank");
    if (rank == 0 || rank > 8) throw FormatError(what + ": implausible tensor rank");
    Shape sh;
    for (std::uint32_t k = 0; k < rank; ++k) sh.push_back(r.u32("tensor extent"));
    shapes.push_back(std::move(sh));
  }
  r.header_hash();

  if (frozen > 1) throw FormatError(what + ": invalid frozen flag");
  for (auto v : {s.image_channels, s.base_channels, s.height, s.width, s.frames, s.modules_per_level,
                 s.vocab, s.time_dim})
    if (v > (1u << 16)) throw FormatError(what + ": implausible spec extent");
  std::vector<ParamEntry> layout;
  try {
    layout = param_layout(s);
  } catch (const ConfigError& e) {
    throw FormatError(what + ": invalid denoiser spec (" + e.what() + ")");
  }
  if (layout.size() != shapes.size()) throw FormatError(what + ": tensor count does not match spec");
  std::uint64_t values = 0;
  for (std::size_t i = 0; i < layout.size(); ++i) {
    if (layout[i].shape != shapes[i])
      throw FormatError(what + ": tensor " + layout[i].name + " has shape " + to_string(shapes[i]) +
                        ", expected " + to_string(layout[i].shape));
    values += numel(shapes[i]);
  }
  r.expect_remaining(values * 8);
  DenoiserParams p;
  p.spec = s;
  p.frozen = frozen == 1;
  for (const auto& sh : shapes) {
    Tensor t(sh);
    for (auto& v : t.data()) v = static_cast<Real>(r.f64());
    p.tensors.push_back(std::move(t));
  }
  r.expect_end();
  return p;
}

inline void save_params(const DenoiserParams& p, const std::filesystem::path& path) {
  io::write_file_atomic(path, encode_params(p));
}

inline DenoiserParams load_params(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  return decode_params(bytes, path.string());
}

}  // namespace minv
