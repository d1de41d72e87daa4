#pragma once

// Deterministic toy videos with known camera and object motion.
//
// Coordinates are in pixels with pixel (row i, column j) centred at
// (x = j, y = i). A camera pan (vx, vy) is the image-space displacement of
// the whole scene per frame; zoom scales the scene about the canvas centre by
// `zoom` per frame. Objects move by their own velocity on top of the camera
// motion. The appearance seed only chooses colours and textures.

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "minv/binary_io.hpp"
#include "minv/tensor.hpp"

namespace minv {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;
  friend bool operator==(const Vec2&, const Vec2&) = default;
};

enum class ShapeKind { square, disc };

struct SceneObject {
  ShapeKind shape = ShapeKind::disc;
  double size = 3.0;  ///< disc radius or square half-side, px
  Vec2 velocity;      ///< px/frame, before camera motion
  Vec2 start;         ///< centre at frame 0
};

struct MotionScript {
  Vec2 pan;           ///< px/frame
  double zoom = 1.0;  ///< scale/frame about the canvas centre
  std::vector<SceneObject> objects;
  std::size_t frames = 8;
  std::size_t height = 16;
  std::size_t width = 16;
  std::string name;

  Vec2 canvas_center() const {
    return {(static_cast<double>(width) - 1.0) / 2.0, (static_cast<double>(height) - 1.0) / 2.0};
  }

  double scale_at(std::size_t frame) const { return std::pow(zoom, static_cast<double>(frame)); }

  /// Image-space centre of object `o` at `frame`.
  Vec2 center(const SceneObject& o, std::size_t frame) const {
    const double f = static_cast<double>(frame);
    const Vec2 c = canvas_center();
    const double s = scale_at(frame);
    const Vec2 p{o.start.x + (o.velocity.x + pan.x) * f, o.start.y + (o.velocity.y + pan.y) * f};
    return {c.x + (p.x - c.x) * s, c.y + (p.y - c.y) * s};
  }

  /// Rejects scripts whose object centres come within 1 px of the border.
  void validate() const {
    if (frames == 0 || height < 4 || width < 4) throw ShapeError("motion script: canvas or frame count too small");
    if (!(zoom > 0)) throw ShapeError("motion script: zoom rate must be positive");
    for (std::size_t k = 0; k < objects.size(); ++k) {
      if (!(objects[k].size > 0)) throw ShapeError("motion script: object size must be positive");
      for (std::size_t f = 0; f < frames; ++f) {
        const Vec2 p = center(objects[k], f);
        if (p.x < 1.0 || p.y < 1.0 || p.x > static_cast<double>(width) - 2.0 ||
            p.y > static_cast<double>(height) - 2.0)
          throw ShapeError("motion script '" + name + "': object " + std::to_string(k) + " leaves the canvas at frame " +
                           std::to_string(f));
      }
    }
  }
};

/// Per object, per frame centre positions.
struct GroundTruth {
  std::vector<std::vector<Vec2>> centers;
};

inline GroundTruth ground_truth(const MotionScript& s) {
  GroundTruth gt;
  for (const auto& o : s.objects) {
    std::vector<Vec2> track;
    for (std::size_t f = 0; f < s.frames; ++f) track.push_back(s.center(o, f));
    gt.centers.push_back(std::move(track));
  }
  return gt;
}

namespace detail {

struct Palette {
  std::array<double, 3> base{};
  std::array<std::array<double, 3>, 3> wave_color{};
  std::array<Vec2, 3> wave_freq{};
  std::array<double, 3> wave_phase{};
  std::vector<std::array<double, 3>> object_color;
};

inline Palette make_palette(std::uint64_t seed, std::size_t objects) {
  Rng rng(seed ^ 0x5eed5eedULL);
  Palette p;
  for (auto& b : p.base) b = 0.15 + 0.2 * rng.uniform();
  for (std::size_t k = 0; k < 3; ++k) {
    for (auto& c : p.wave_color[k]) c = 0.04 + 0.08 * rng.uniform();
    const double ang = 2.0 * 3.14159265358979323846 * rng.uniform();
    const double freq = 0.35 + 0.5 * rng.uniform();
    p.wave_freq[k] = {freq * std::cos(ang), freq * std::sin(ang)};
    p.wave_phase[k] = 2.0 * 3.14159265358979323846 * rng.uniform();
  }
  for (std::size_t k = 0; k < objects; ++k) {
    std::array<double, 3> c{};
    for (auto& v : c) v = 0.65 + 0.35 * rng.uniform();
    p.object_color.push_back(c);
  }
  return p;
}

inline std::array<double, 3> background(const Palette& p, Vec2 w) {
  std::array<double, 3> c = p.base;
  for (std::size_t k = 0; k < 3; ++k) {
    const double v = std::sin(p.wave_freq[k].x * w.x + p.wave_freq[k].y * w.y + p.wave_phase[k]);
    for (std::size_t ch = 0; ch < 3; ++ch) c[ch] += p.wave_color[k][ch] * v;
  }
  return c;
}

}  // namespace detail

inline constexpr std::size_t kSupersample = 4;

namespace detail {

// Supersample (si, sj) of pixel (i, j) in image coordinates.
inline Vec2 subsample(std::size_t i, std::size_t j, std::size_t si, std::size_t sj) {
  return {static_cast<double>(j) + (static_cast<double>(sj) + 0.5) / kSupersample - 0.5,
          static_cast<double>(i) + (static_cast<double>(si) + 0.5) / kSupersample - 0.5};
}

// Topmost object covering p, or -1.
inline std::ptrdiff_t hit_object(const MotionScript& script, const std::vector<Vec2>& centers, double scale, Vec2 p) {
  for (std::size_t k = script.objects.size(); k-- > 0;) {
    const auto& o = script.objects[k];
    const double r = o.size * scale;
    const double dx = p.x - centers[k].x, dy = p.y - centers[k].y;
    const bool inside = o.shape == ShapeKind::disc ? dx * dx + dy * dy <= r * r : std::abs(dx) <= r && std::abs(dy) <= r;
    if (inside) return static_cast<std::ptrdiff_t>(k);
  }
  return -1;
}

inline std::vector<Vec2> centers_at(const MotionScript& script, std::size_t frame) {
  std::vector<Vec2> c;
  for (const auto& o : script.objects) c.push_back(script.center(o, frame));
  return c;
}

}  // namespace detail

/// Fraction of each pixel's supersamples covered by any object at `frame`,
/// shape [H, W].
inline Tensor coverage(const MotionScript& script, std::size_t frame) {
  script.validate();
  if (frame >= script.frames) throw ShapeError("coverage: frame outside the script");
  Tensor out(Shape{script.height, script.width});
  const auto centers = detail::centers_at(script, frame);
  const double s = script.scale_at(frame);
  for (std::size_t i = 0; i < script.height; ++i)
    for (std::size_t j = 0; j < script.width; ++j) {
      std::size_t hits = 0;
      for (std::size_t si = 0; si < kSupersample; ++si)
        for (std::size_t sj = 0; sj < kSupersample; ++sj)
          hits += detail::hit_object(script, centers, s, detail::subsample(i, j, si, sj)) >= 0;
      out.at(i, j) = static_cast<Real>(static_cast<double>(hits) / (kSupersample * kSupersample));
    }
  return out;
}

/// Renders `script` as [1, 3, N, H, W] with values in [0, 1].
inline Tensor render(const MotionScript& script, std::uint64_t appearance_seed, GroundTruth* truth = nullptr) {
  script.validate();
  const auto pal = detail::make_palette(appearance_seed, script.objects.size());
  const std::size_t n = script.frames, h = script.height, w = script.width;
  Tensor video(Shape{1, 3, n, h, w});
  const Vec2 c = script.canvas_center();
  const double inv_ss = 1.0 / static_cast<double>(kSupersample * kSupersample);
  for (std::size_t f = 0; f < n; ++f) {
    const double s = script.scale_at(f);
    const double ff = static_cast<double>(f);
    const auto centers = detail::centers_at(script, f);
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) {
        std::array<double, 3> acc{};
        for (std::size_t si = 0; si < kSupersample; ++si)
          for (std::size_t sj = 0; sj < kSupersample; ++sj) {
            const Vec2 p = detail::subsample(i, j, si, sj);
            std::array<double, 3> col{};
            if (const auto k = detail::hit_object(script, centers, s, p); k >= 0) {
              const auto& o = script.objects[static_cast<std::size_t>(k)];
              const double dx = p.x - centers[k].x, dy = p.y - centers[k].y;
              // Radial shading gives each object a single bright extremum.
              const double rho = std::min(1.0, std::sqrt(dx * dx + dy * dy) / (o.size * s * 1.42));
              for (std::size_t ch = 0; ch < 3; ++ch) col[ch] = pal.object_color[k][ch] * (1.0 - 0.35 * rho);
            } else {
              const Vec2 world{(p.x - c.x) / s + c.x - script.pan.x * ff, (p.y - c.y) / s + c.y - script.pan.y * ff};
              col = detail::background(pal, world);
            }
            for (std::size_t ch = 0; ch < 3; ++ch) acc[ch] += col[ch];
          }
        for (std::size_t ch = 0; ch < 3; ++ch)
          video.at(0, ch, f, i, j) = static_cast<Real>(std::clamp(acc[ch] * inv_ss, 0.0, 1.0));
      }
  }
  if (truth) *truth = ground_truth(script);
  return video;
}

// ---------------------------------------------------------------------------
// Default corpus.

struct CorpusEntry {
  MotionScript script;
  std::uint64_t appearance_seed = 0;
  std::size_t prompt = 0;  ///< appearance index, used as the prompt id
};

/// 64 motion scripts: 16 pans (4 directions x 2 speeds, each with a disc or a
/// square riding along), 8 zooms (in/out x shape x 2 rates), 32 single-object
/// translations (8 directions x 2 shapes x 2 speeds) and 8 two-object scripts.
inline std::vector<MotionScript> default_scripts(std::size_t frames = 8, std::size_t height = 16,
                                                 std::size_t width = 16) {
  std::vector<MotionScript> out;
  const double W = static_cast<double>(width), H = static_cast<double>(height);
  const double span = static_cast<double>(frames - 1);
  auto base = [&](std::string name) {
    MotionScript s;
    s.frames = frames;
    s.height = height;
    s.width = width;
    s.name = std::move(name);
    return s;
  };
  // Start far enough back that a velocity v keeps the centre on the canvas.
  auto start_for = [&](Vec2 v) {
    auto axis = [&](double vel, double extent) {
      const double travel = vel * span;
      const double mid = (extent - 1.0) / 2.0;
      return mid - travel / 2.0;
    };
    return Vec2{axis(v.x, W), axis(v.y, H)};
  };
  const std::array<Vec2, 4> dirs4{{{1, 0}, {-1, 0}, {0, 1}, {0, -1}}};
  const std::array<const char*, 4> names4{"right", "left", "down", "up"};
  const double pan_speeds[2] = {0.5, 1.0};
  const double size = std::max(2.0, std::min(W, H) / 6.0);
  for (std::size_t d = 0; d < 4; ++d)
    for (double sp : pan_speeds)
      for (auto shape : {ShapeKind::disc, ShapeKind::square}) {
        auto s = base(std::string("pan_") + names4[d] + "_" + std::to_string(sp).substr(0, 3) +
                      (shape == ShapeKind::disc ? "_disc" : "_square"));
        s.pan = {dirs4[d].x * sp, dirs4[d].y * sp};
        s.objects.push_back({shape, size, {0, 0}, start_for(s.pan)});
        out.push_back(std::move(s));
      }
  for (double rate : {1.04, 1.08})
    for (bool in : {true, false})
      for (auto shape : {ShapeKind::disc, ShapeKind::square}) {
        auto s = base(std::string("zoom_") + (in ? "in_" : "out_") + std::to_string(rate).substr(0, 4) +
                      (shape == ShapeKind::disc ? "_disc" : "_square"));
        s.zoom = in ? rate : 1.0 / rate;
        const Vec2 c = s.canvas_center();
        s.objects.push_back({shape, size, {0, 0}, {c.x + 1.5, c.y - 1.0}});
        out.push_back(std::move(s));
      }
  const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
  const std::array<Vec2, 8> dirs8{{{1, 0}, {inv_sqrt2, inv_sqrt2}, {0, 1}, {-inv_sqrt2, inv_sqrt2},
                                   {-1, 0}, {-inv_sqrt2, -inv_sqrt2}, {0, -1}, {inv_sqrt2, -inv_sqrt2}}};
  const double move_speeds[2] = {0.75, 1.25};
  for (std::size_t d = 0; d < 8; ++d)
    for (double sp : move_speeds)
      for (auto shape : {ShapeKind::disc, ShapeKind::square}) {
        auto s = base("move_" + std::to_string(d * 45) + "_" + std::to_string(sp).substr(0, 4) +
                      (shape == ShapeKind::disc ? "_disc" : "_square"));
        const Vec2 v{dirs8[d].x * sp, dirs8[d].y * sp};
        s.objects.push_back({shape, size, v, start_for(v)});
        out.push_back(std::move(s));
      }
  for (std::size_t d = 0; d < 8; ++d) {
    auto s = base("pair_" + std::to_string(d * 45));
    const Vec2 v{dirs8[d].x * 0.75, dirs8[d].y * 0.75};
    const Vec2 a = start_for(v);
    const Vec2 off{-dirs8[d].y * W / 5.0, dirs8[d].x * H / 5.0};
    s.objects.push_back({ShapeKind::disc, size * 0.8, v, {a.x + off.x, a.y + off.y}});
    s.objects.push_back({ShapeKind::square, size * 0.8, {-v.x, -v.y}, {a.x - off.x, a.y - off.y}});
    // Opposite motion means the second object starts where the first ends.
    s.objects[1].start = {s.objects[1].start.x + v.x * span, s.objects[1].start.y + v.y * span};
    out.push_back(std::move(s));
  }
  return out;
}

/// Every default script rendered at `appearances` seeds; the prompt id is the
/// appearance index.
inline std::vector<CorpusEntry> default_corpus(std::size_t appearances = 4, std::size_t frames = 8,
                                               std::size_t height = 16, std::size_t width = 16) {
  std::vector<CorpusEntry> out;
  for (const auto& s : default_scripts(frames, height, width))
    for (std::size_t a = 0; a < appearances; ++a) out.push_back({s, 1000 + a, a});
  return out;
}

/// The held-out reference: a rightward camera pan at 1 px/frame with a disc
/// riding along, rendered with an appearance seed outside the corpus.
inline MotionScript pan_right_script(std::size_t frames = 8, std::size_t height = 16, std::size_t width = 16,
                                     double speed = 1.0) {
  MotionScript s;
  s.frames = frames;
  s.height = height;
  s.width = width;
  s.name = "heldout_pan_right";
  s.pan = {speed, 0};
  const double size = std::max(2.0, static_cast<double>(std::min(width, height)) / 6.0);
  const Vec2 c = s.canvas_center();
  s.objects.push_back({ShapeKind::disc, size, {0, 0}, {c.x - speed * static_cast<double>(frames - 1) / 2.0, c.y + 1.0}});
  return s;
}

// ---------------------------------------------------------------------------
// MVID0001 video file.
//
//   "MVID0001"
//   u32 1, u32 C, u32 N, u32 H, u32 W
//   u64 FNV-1a of the bytes above
//   f32 values, row-major [1, C, N, H, W]

inline constexpr std::string_view kVideoMagic = "MVID0001";

inline std::vector<std::uint8_t> encode_video(const Tensor& video) {
  if (video.rank() != 5 || video.dim(0) != 1)
    throw ShapeError("MVID expects a [1,C,N,H,W] tensor, got " + to_string(video.shape()));
  io::Writer w;
  w.magic(kVideoMagic);
  for (auto e : video.shape()) w.u32(static_cast<std::uint32_t>(e));
  w.header_hash();
  for (auto v : video.data()) w.f32(static_cast<float>(v));
  return w.bytes();
}

inline Tensor decode_video(std::span<const std::uint8_t> bytes, const std::string& what = "MVID") {
  io::Reader r(bytes, what);
  r.magic(kVideoMagic);
  Shape s;
  for (const char* f : {"batch", "channels", "frames", "height", "width"}) s.push_back(r.u32(f));
  r.header_hash();
  if (s[0] != 1) throw FormatError(what + ": batch extent must be 1");
  for (std::size_t k = 1; k < 5; ++k)
    if (s[k] == 0 || s[k] > (1u << 16)) throw FormatError(what + ": implausible extent");
  r.expect_remaining(numel(s) * 4);
  Tensor v(s);
  for (auto& x : v.data()) x = static_cast<Real>(r.f32());
  r.expect_end();
  return v;
}

inline void save_video(const Tensor& video, const std::filesystem::path& path) {
  io::write_file_atomic(path, encode_video(video));
}

inline Tensor load_video(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  return decode_video(bytes, path.string());
}

/// Ground truth as text: one "object frame x y" line per sample.
inline std::string format_ground_truth(const GroundTruth& gt) {
  std::ostringstream os;
  os.precision(17);
  os << "# object frame x y\n";
  for (std::size_t k = 0; k < gt.centers.size(); ++k)
    for (std::size_t f = 0; f < gt.centers[k].size(); ++f)
      os << k << ' ' << f << ' ' << gt.centers[k][f].x << ' ' << gt.centers[k][f].y << '\n';
  return os.str();
}

/// Writes frame f as binary PPM (P6) files `<stem>_f<f>.ppm`.
inline void export_ppm(const Tensor& video, const std::filesystem::path& stem) {
  if (video.rank() != 5 || video.dim(1) != 3) throw ShapeError("PPM export needs a 3-channel video");
  const std::size_t n = video.dim(2), h = video.dim(3), w = video.dim(4);
  for (std::size_t f = 0; f < n; ++f) {
    std::string body = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j)
        for (std::size_t c = 0; c < 3; ++c)
          body += static_cast<char>(static_cast<unsigned char>(
              std::lround(std::clamp(static_cast<double>(video.at(0, c, f, i, j)), 0.0, 1.0) * 255.0)));
    auto path = stem;
    path += "_f" + std::to_string(f) + ".ppm";
    io::write_text_atomic(path, body);
  }
}

}  // namespace minv
