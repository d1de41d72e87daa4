#pragma once

// Motion embedding sets: one query-key and one value embedding per temporal
// module, their inference-time debiasing transforms, and the MEMB0001
// checkpoint format.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "minv/binary_io.hpp"
#include "minv/model_spec.hpp"
#include "minv/tensor.hpp"

namespace minv {

/// Whether an embedding family spans the spatial grid ([H*W, N, C]) or is
/// shared across it ([1, N, C]).
enum class SpatialLayout : std::uint32_t { one_d = 0, two_d = 1 };

enum class InferenceStrategy : std::uint32_t { differential = 0, normalize = 1, vanilla = 2 };

struct EmbeddingShapeConfig {
  SpatialLayout qk = SpatialLayout::one_d;
  SpatialLayout v = SpatialLayout::two_d;
  InferenceStrategy strategy = InferenceStrategy::differential;

  friend bool operator==(const EmbeddingShapeConfig&, const EmbeddingShapeConfig&) = default;
};

inline std::string_view to_string(SpatialLayout s) { return s == SpatialLayout::one_d ? "one_d" : "two_d"; }

inline std::string_view to_string(InferenceStrategy s) {
  switch (s) {
    case InferenceStrategy::differential: return "differential";
    case InferenceStrategy::normalize: return "normalize";
    case InferenceStrategy::vanilla: return "vanilla";
  }
  return "?";
}

inline std::optional<SpatialLayout> parse_spatial_layout(std::string_view s) {
  if (s == "one_d") return SpatialLayout::one_d;
  if (s == "two_d") return SpatialLayout::two_d;
  return std::nullopt;
}

inline std::optional<InferenceStrategy> parse_inference_strategy(std::string_view s) {
  if (s == "differential") return InferenceStrategy::differential;
  if (s == "normalize") return InferenceStrategy::normalize;
  if (s == "vanilla") return InferenceStrategy::vanilla;
  return std::nullopt;
}

inline std::size_t spatial_rows(SpatialLayout layout, const ModuleDescriptor& d) {
  return layout == SpatialLayout::one_d ? 1 : d.pixels();
}

struct MotionEmbeddingSet {
  EmbeddingShapeConfig config;
  std::size_t frames = 0;
  std::vector<ModuleDescriptor> modules;
  std::vector<Tensor> qk;  ///< per module, [S_qk, N, C]
  std::vector<Tensor> v;   ///< per module, [S_v, N, C]

  std::size_t size() const noexcept { return modules.size(); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < size(); ++i) n += qk[i].size() + v[i].size();
    return n;
  }

  bool all_zero() const {
    for (std::size_t i = 0; i < size(); ++i) {
      for (auto x : qk[i].data())
        if (x != 0) return false;
      for (auto x : v[i].data())
        if (x != 0) return false;
    }
    return true;
  }

  /// Throws ShapeError unless this set binds to `spec`'s temporal modules.
  void check_compatible(const DenoiserSpec& spec) const {
    const auto mods = spec.temporal_modules();
    if (mods.size() != modules.size())
      throw ShapeError("embedding set has " + std::to_string(modules.size()) +
                       " modules, denoiser has " + std::to_string(mods.size()));
    if (frames != spec.frames)
      throw ShapeError("embedding set covers " + std::to_string(frames) +
                       " frames, denoiser expects " + std::to_string(spec.frames));
    for (std::size_t i = 0; i < mods.size(); ++i)
      if (!(mods[i] == modules[i]))
        throw ShapeError("embedding module " + std::to_string(i) + " descriptor mismatch");
  }

  /// Bitwise equality of configuration, descriptors and values.
  friend bool operator==(const MotionEmbeddingSet& a, const MotionEmbeddingSet& b) {
    return a.config == b.config && a.frames == b.frames && a.modules == b.modules && a.qk == b.qk &&
           a.v == b.v;
  }
};

inline MotionEmbeddingSet init_zero(const std::vector<ModuleDescriptor>& modules,
                                    const EmbeddingShapeConfig& config, std::size_t n_frames) {
  if (n_frames == 0) throw ShapeError("motion embeddings need at least one frame");
  MotionEmbeddingSet m;
  m.config = config;
  m.frames = n_frames;
  m.modules = modules;
  for (const auto& d : modules) {
    if (d.channels == 0 || d.pixels() == 0) throw ShapeError("module descriptor has a zero extent");
    m.qk.emplace_back(Shape{spatial_rows(config.qk, d), n_frames, d.channels});
    m.v.emplace_back(Shape{spatial_rows(config.v, d), n_frames, d.channels});
  }
  return m;
}

/// Zero set bound to `spec`; the frame count must equal spec.frames.
inline MotionEmbeddingSet init_zero(const DenoiserSpec& spec, const EmbeddingShapeConfig& config,
                                    std::size_t n_frames) {
  spec.validate();
  if (n_frames != spec.frames)
    throw ShapeError("requested " + std::to_string(n_frames) + " frames but the denoiser spec has " +
                     std::to_string(spec.frames));
  return init_zero(spec.temporal_modules(), config, n_frames);
}

/// Frame differencing of the value embeddings: frame 0 passes through and
/// frame j > 0 becomes v[j] - v[j-1]. Query-key embeddings are untouched.
inline MotionEmbeddingSet debias_differential(const MotionEmbeddingSet& m) {
  MotionEmbeddingSet out = m;
  for (std::size_t i = 0; i < m.size(); ++i) {
    const Tensor& src = m.v[i];
    Tensor& dst = out.v[i];
    const std::size_t rows = src.dim(0), n = src.dim(1), c = src.dim(2);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 1; j < n; ++j)
        for (std::size_t k = 0; k < c; ++k)
          dst[(r * n + j) * c + k] = src[(r * n + j) * c + k] - src[(r * n + j - 1) * c + k];
  }
  return out;
}

/// Removes the frame-axis mean of each (spatial row, channel) cell of the
/// value embeddings. Query-key embeddings are untouched.
inline MotionEmbeddingSet debias_normalize(const MotionEmbeddingSet& m) {
  MotionEmbeddingSet out = m;
  for (std::size_t i = 0; i < m.size(); ++i)
    out.v[i] = sub(m.v[i], mean(m.v[i], {1}));
  return out;
}

inline MotionEmbeddingSet apply_inference_strategy(const MotionEmbeddingSet& m,
                                                   InferenceStrategy strategy) {
  switch (strategy) {
    case InferenceStrategy::differential: return debias_differential(m);
    case InferenceStrategy::normalize: return debias_normalize(m);
    case InferenceStrategy::vanilla: return m;
  }
  return m;
}

inline MotionEmbeddingSet apply_inference_strategy(const MotionEmbeddingSet& m) {
  return apply_inference_strategy(m, m.config.strategy);
}

// ---------------------------------------------------------------------------
// MEMB0001 checkpoint.
//
//   "MEMB0001"
//   u32 L, u32 N, u32 qk_layout, u32 v_layout, u32 strategy
//   L x { u32 C, u32 H, u32 W, u32 S_qk, u32 S_v }
//   u64 FNV-1a of the bytes above
//   for each module i: m_qk_i then m_v_i as f64, row-major [S, N, C]

inline constexpr std::string_view kEmbeddingMagic = "MEMB0001";
inline constexpr std::uint32_t kMaxExtent = 1u << 16;

inline std::vector<std::uint8_t> encode_embeddings(const MotionEmbeddingSet& m) {
  io::Writer w;
  w.magic(kEmbeddingMagic);
  w.u32(static_cast<std::uint32_t>(m.size()));
  w.u32(static_cast<std::uint32_t>(m.frames));
  w.u32(static_cast<std::uint32_t>(m.config.qk));
  w.u32(static_cast<std::uint32_t>(m.config.v));
  w.u32(static_cast<std::uint32_t>(m.config.strategy));
  for (std::size_t i = 0; i < m.size(); ++i) {
    const auto& d = m.modules[i];
    w.u32(static_cast<std::uint32_t>(d.channels));
    w.u32(static_cast<std::uint32_t>(d.height));
    w.u32(static_cast<std::uint32_t>(d.width));
    w.u32(static_cast<std::uint32_t>(m.qk[i].dim(0)));
    w.u32(static_cast<std::uint32_t>(m.v[i].dim(0)));
  }
  w.header_hash();
  for (std::size_t i = 0; i < m.size(); ++i) {
    for (auto x : m.qk[i].data()) w.f64(static_cast<double>(x));
    for (auto x : m.v[i].data()) w.f64(static_cast<double>(x));
  }
  return w.bytes();
}

inline MotionEmbeddingSet decode_embeddings(std::span<const std::uint8_t> bytes,
                                            const std::string& what = "MEMB") {
  io::Reader r(bytes, what);
  r.magic(kEmbeddingMagic);
  const std::uint32_t count = r.u32("module count");
  const std::uint32_t frames = r.u32("frame count");
  const std::uint32_t qk = r.u32("qk layout");
  const std::uint32_t v = r.u32("v layout");
  const std::uint32_t strategy = r.u32("strategy");
  struct Row {
    ModuleDescriptor d;
    std::uint32_t s_qk, s_v;
  };
  std::vector<Row> rows;
  for (std::uint32_t i = 0; i < count; ++i) {
    Row row{};
    row.d.channels = r.u32("module channels");
    row.d.height = r.u32("module height");
    row.d.width = r.u32("module width");
    row.s_qk = r.u32("qk rows");
    row.s_v = r.u32("v rows");
    rows.push_back(row);
  }
  r.header_hash();

  if (qk > 1 || v > 1 || strategy > 2) throw FormatError(what + ": invalid configuration enum");
  if (frames == 0 || frames > kMaxExtent) throw FormatError(what + ": implausible frame count");
  EmbeddingShapeConfig cfg{static_cast<SpatialLayout>(qk), static_cast<SpatialLayout>(v),
                           static_cast<InferenceStrategy>(strategy)};
  std::uint64_t values = 0;
  for (const auto& row : rows) {
    if (row.d.channels == 0 || row.d.height == 0 || row.d.width == 0 ||
        row.d.channels > kMaxExtent || row.d.height > kMaxExtent || row.d.width > kMaxExtent)
      throw FormatError(what + ": implausible module descriptor");
    if (row.s_qk != spatial_rows(cfg.qk, row.d) || row.s_v != spatial_rows(cfg.v, row.d))
      throw FormatError(what + ": embedding rows disagree with the layout configuration");
    values += (std::uint64_t{row.s_qk} + row.s_v) * frames * row.d.channels;
  }
  r.expect_remaining(values * 8);

  std::vector<ModuleDescriptor> mods;
  for (const auto& row : rows) mods.push_back(row.d);
  MotionEmbeddingSet m = init_zero(mods, cfg, frames);
  for (std::size_t i = 0; i < m.size(); ++i) {
    for (auto& x : m.qk[i].data()) x = static_cast<Real>(r.f64());
    for (auto& x : m.v[i].data()) x = static_cast<Real>(r.f64());
  }
  r.expect_end();
  return m;
}

inline void save_embeddings(const MotionEmbeddingSet& m, const std::filesystem::path& path) {
  io::write_file_atomic(path, encode_embeddings(m));
}

inline MotionEmbeddingSet load_embeddings(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  return decode_embeddings(bytes, path.string());
}

/// Loads and checks the set against a target denoiser spec.
inline MotionEmbeddingSet load_embeddings(const std::filesystem::path& path, const DenoiserSpec& spec) {
  auto m = load_embeddings(path);
  try {
    m.check_compatible(spec);
  } catch (const ShapeError& e) {
    throw FormatError(path.string() + ": shape mismatch with target denoiser (" + e.what() + ")");
  }
  return m;
}

}  // namespace minv
