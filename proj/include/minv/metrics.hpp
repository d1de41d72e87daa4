#pragma once

// Evaluation metrics: a block-matching point tracker, the Motion Fidelity
// Score over tracklets, temporal consistency and the Frechet distance
// between Gaussian fits of two feature sets.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "minv/synthdata.hpp"
#include "minv/tensor.hpp"

namespace minv {

struct Tracklet {
  std::vector<Vec2> positions;

  std::size_t frames() const noexcept { return positions.size(); }

  std::vector<Vec2> displacements() const {
    std::vector<Vec2> d;
    for (std::size_t f = 1; f < positions.size(); ++f)
      d.push_back({positions[f].x - positions[f - 1].x, positions[f].y - positions[f - 1].y});
    return d;
  }
};

struct TrackerOptions {
  std::size_t max_points = 16;
  std::size_t patch_radius = 2;   ///< 5x5 patches
  std::size_t search_radius = 4;
  double min_response = 1e-4;     ///< weaker extrema count as texture-free
};

namespace detail {

struct Image {
  std::size_t h = 0, w = 0;
  std::vector<double> px;
  double at(std::size_t i, std::size_t j) const { return px[i * w + j]; }
};

inline Image intensity(const Tensor& video, std::size_t f) {
  const std::size_t c = video.dim(1), h = video.dim(3), w = video.dim(4);
  Image im{h, w, std::vector<double>(h * w, 0.0)};
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) im.px[i * w + j] += static_cast<double>(video.at(0, ch, f, i, j)) / c;
  return im;
}

// Box mean with edge clamping.
inline Image box(const Image& im, std::size_t r) {
  Image out{im.h, im.w, std::vector<double>(im.px.size(), 0.0)};
  const auto ri = static_cast<std::ptrdiff_t>(r);
  for (std::size_t i = 0; i < im.h; ++i)
    for (std::size_t j = 0; j < im.w; ++j) {
      double s = 0;
      for (std::ptrdiff_t di = -ri; di <= ri; ++di)
        for (std::ptrdiff_t dj = -ri; dj <= ri; ++dj) {
          const auto ii = std::clamp<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(i) + di, 0, im.h - 1);
          const auto jj = std::clamp<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(j) + dj, 0, im.w - 1);
          s += im.at(ii, jj);
        }
      out.px[i * im.w + j] = s / static_cast<double>((2 * r + 1) * (2 * r + 1));
    }
  return out;
}

// Bilinear sample; false outside [0, h-1] x [0, w-1].
inline bool sample(const Image& im, double y, double x, double& out) {
  if (!(y >= 0 && x >= 0 && y <= static_cast<double>(im.h - 1) && x <= static_cast<double>(im.w - 1))) return false;
  const auto i0 = std::min(static_cast<std::size_t>(y), im.h - 1), j0 = std::min(static_cast<std::size_t>(x), im.w - 1);
  const auto i1 = std::min(i0 + 1, im.h - 1), j1 = std::min(j0 + 1, im.w - 1);
  const double fy = y - static_cast<double>(i0), fx = x - static_cast<double>(j0);
  out = (1 - fy) * ((1 - fx) * im.at(i0, j0) + fx * im.at(i0, j1)) + fy * ((1 - fx) * im.at(i1, j0) + fx * im.at(i1, j1));
  return true;
}

// Mean squared difference between the patches centred at `pa` in `a` and
// `pb` in `b` over the samples inside both images; +inf when fewer than half
// of them are.
inline double patch_cost(const Image& a, Vec2 pa, const Image& b, Vec2 pb, std::ptrdiff_t r) {
  double s = 0;
  std::size_t count = 0;
  for (std::ptrdiff_t di = -r; di <= r; ++di)
    for (std::ptrdiff_t dj = -r; dj <= r; ++dj) {
      double u, v;
      const auto oy = static_cast<double>(di), ox = static_cast<double>(dj);
      if (!sample(a, pa.y + oy, pa.x + ox, u) || !sample(b, pb.y + oy, pb.x + ox, v)) continue;
      s += (u - v) * (u - v);
      ++count;
    }
  const auto full = static_cast<std::size_t>((2 * r + 1) * (2 * r + 1));
  if (2 * count < full) return std::numeric_limits<double>::infinity();
  return s / static_cast<double>(count);
}

// Vertex offset of the parabola through (-1, sm), (0, s0), (1, sp).
inline double parabola_offset(double sm, double s0, double sp) {
  const double den = sm - 2.0 * s0 + sp;
  if (!(den > 1e-15)) return 0.0;
  return std::clamp(0.5 * (sm - sp) / den, -0.5, 0.5);
}

}  // namespace detail

namespace detail {

inline std::vector<Image> luminance_frames(const Tensor& video, std::size_t patch_radius) {
  if (video.rank() != 5 || video.dim(0) != 1) throw ShapeError("track expects [1,C,N,H,W], got " + to_string(video.shape()));
  const std::size_t h = video.dim(3), w = video.dim(4);
  if (h < 2 * patch_radius + 1 || w < 2 * patch_radius + 1) throw ShapeError("video smaller than the tracking patch");
  std::vector<Image> frames;
  for (std::size_t f = 0; f < video.dim(2); ++f) frames.push_back(intensity(video, f));
  return frames;
}

}  // namespace detail

/// Up to max_points extrema of a centre-surround response in frame 0,
/// strongest first (ties in row-major order). Textureless input may yield
/// fewer points.
inline std::vector<Vec2> detect_points(const Tensor& video, const TrackerOptions& opt = {}) {
  const auto frames = detail::luminance_frames(video, opt.patch_radius);
  const std::size_t h = video.dim(3), w = video.dim(4), pr = opt.patch_radius;

  // Centre-surround response on frame 0.
  const auto fine = detail::box(frames[0], 1), coarse = detail::box(frames[0], 3);
  std::vector<double> resp(h * w);
  for (std::size_t k = 0; k < resp.size(); ++k) resp[k] = std::abs(fine.px[k] - coarse.px[k]);
  struct Cand {
    double score;
    std::size_t i, j;
  };
  std::vector<Cand> cands;
  for (std::size_t i = pr; i + pr < h; ++i)
    for (std::size_t j = pr; j + pr < w; ++j) {
      const double v = resp[i * w + j];
      if (v < opt.min_response) continue;
      bool is_max = true;
      for (std::ptrdiff_t di = -1; di <= 1 && is_max; ++di)
        for (std::ptrdiff_t dj = -1; dj <= 1; ++dj) {
          if (!di && !dj) continue;
          const auto ii = static_cast<std::ptrdiff_t>(i) + di, jj = static_cast<std::ptrdiff_t>(j) + dj;
          if (ii < 0 || jj < 0 || ii >= static_cast<std::ptrdiff_t>(h) || jj >= static_cast<std::ptrdiff_t>(w)) continue;
          const double u = resp[ii * w + jj];
          // Plateaus keep only their first cell in row-major order.
          if (u > v || (u == v && (di < 0 || (di == 0 && dj < 0)))) {
            is_max = false;
            break;
          }
        }
      if (is_max) cands.push_back({v, i, j});
    }
  std::stable_sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) { return a.score > b.score; });
  if (cands.size() > opt.max_points) cands.resize(opt.max_points);

  // Sub-pixel refinement: parabola through the (negated) response peak.
  std::vector<Vec2> pts;
  for (const auto& c : cands) {
    const auto r = [&](std::size_t i, std::size_t j) { return -resp[i * w + j]; };
    const double s0 = r(c.i, c.j);
    const double dx = c.j > 0 && c.j + 1 < w ? detail::parabola_offset(r(c.i, c.j - 1), s0, r(c.i, c.j + 1)) : 0.0;
    const double dy = c.i > 0 && c.i + 1 < h ? detail::parabola_offset(r(c.i - 1, c.j), s0, r(c.i + 1, c.j)) : 0.0;
    pts.push_back({static_cast<double>(c.j) + dx, static_cast<double>(c.i) + dy});
  }
  return pts;
}

/// Follows each query point (frame 0 position, x = column) by SSD block
/// matching between consecutive frames with sub-pixel parabola refinement.
/// Ties prefer the smaller displacement, then row-major order. Patches may
/// overhang the border as long as half of them overlaps.
inline std::vector<Tracklet> track_points(const Tensor& video, const std::vector<Vec2>& queries,
                                          const TrackerOptions& opt = {}) {
  const auto frames = detail::luminance_frames(video, opt.patch_radius);
  const std::size_t n = video.dim(2), h = video.dim(3), w = video.dim(4), pr = opt.patch_radius;
  const auto sr = static_cast<std::ptrdiff_t>(opt.search_radius);
  const auto r = static_cast<std::ptrdiff_t>(pr);
  const auto hi_i = static_cast<std::ptrdiff_t>(h) - 1, hi_j = static_cast<std::ptrdiff_t>(w) - 1;
  std::vector<Tracklet> out;
  for (const auto& q : queries) {
    Tracklet t;
    Vec2 pos = q;
    t.positions.push_back(pos);
    for (std::size_t f = 1; f < n; ++f) {
      const auto& prev = frames[f - 1];
      const auto& cur = frames[f];
      double best = std::numeric_limits<double>::infinity();
      std::ptrdiff_t bdy = 0, bdx = 0;
      for (std::ptrdiff_t dy = -sr; dy <= sr; ++dy)
        for (std::ptrdiff_t dx = -sr; dx <= sr; ++dx) {
          const Vec2 cand{pos.x + static_cast<double>(dx), pos.y + static_cast<double>(dy)};
          if (cand.x < 0 || cand.y < 0 || cand.x > static_cast<double>(hi_j) || cand.y > static_cast<double>(hi_i))
            continue;
          const double s = detail::patch_cost(prev, pos, cur, cand, r);
          const auto mag = dy * dy + dx * dx, bmag = bdy * bdy + bdx * bdx;
          if (s < best || (s == best && mag < bmag)) {
            best = s;
            bdy = dy;
            bdx = dx;
          }
        }
      // Sub-pixel refinement: pattern search on bilinear patches, halving
      // the step from 1/2 px down to 1/32 px.
      Vec2 d{static_cast<double>(bdx), static_cast<double>(bdy)};
      for (double step = 0.5; step >= 1.0 / 32; step *= 0.5) {
        Vec2 next = d;
        for (int oy = -1; oy <= 1; ++oy)
          for (int ox = -1; ox <= 1; ++ox) {
            if (!oy && !ox) continue;
            const Vec2 cand{pos.x + d.x + ox * step, pos.y + d.y + oy * step};
            if (cand.x < 0 || cand.y < 0 || cand.x > static_cast<double>(hi_j) || cand.y > static_cast<double>(hi_i))
              continue;
            const double s = detail::patch_cost(prev, pos, cur, cand, r);
            if (s < best) {
              best = s;
              next = {d.x + ox * step, d.y + oy * step};
            }
          }
        d = next;
      }
      pos = {pos.x + d.x, pos.y + d.y};
      t.positions.push_back(pos);
    }
    out.push_back(std::move(t));
  }
  return out;
}

/// detect_points followed by track_points.
inline std::vector<Tracklet> track(const Tensor& video, const TrackerOptions& opt = {}) {
  return track_points(video, detect_points(video, opt), opt);
}

/// Mean over frames of the cosine between per-frame displacement vectors.
/// A pair of zero displacements scores 1; exactly one zero scores 0.
inline double tracklet_correlation(const Tracklet& a, const Tracklet& b) {
  if (a.frames() != b.frames())
    throw ShapeError("tracklets cover " + std::to_string(a.frames()) + " and " + std::to_string(b.frames()) + " frames");
  const auto da = a.displacements(), db = b.displacements();
  if (da.empty()) return 1.0;
  double s = 0;
  for (std::size_t f = 0; f < da.size(); ++f) {
    const double na = da[f].x * da[f].x + da[f].y * da[f].y, nb = db[f].x * db[f].x + db[f].y * db[f].y;
    if (na == 0 && nb == 0)
      s += 1.0;
    else if (na == 0 || nb == 0)
      s += 0.0;
    else  // sqrt of the product keeps parallel and antiparallel pairs at exactly +-1
      s += (da[f].x * db[f].x + da[f].y * db[f].y) / std::sqrt(na * nb);
  }
  return s / static_cast<double>(da.size());
}

/// (1/m) sum_out max_ref corr + (1/n) sum_ref max_out corr, in [-2, 2].
inline double motion_fidelity(const std::vector<Tracklet>& reference, const std::vector<Tracklet>& output) {
  if (reference.empty() || output.empty()) throw ShapeError("motion_fidelity needs nonempty tracklet sets");
  const std::size_t n = reference.size(), m = output.size();
  std::vector<double> corr(n * m);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) corr[i * m + j] = tracklet_correlation(reference[i], output[j]);
  double out_term = 0;
  for (std::size_t j = 0; j < m; ++j) {
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) best = std::max(best, corr[i * m + j]);
    out_term += best;
  }
  double ref_term = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < m; ++j) best = std::max(best, corr[i * m + j]);
    ref_term += best;
  }
  return out_term / static_cast<double>(m) + ref_term / static_cast<double>(n);
}

/// Mean displacement over every tracklet and frame.
inline Vec2 mean_displacement(const std::vector<Tracklet>& tracks) {
  Vec2 s;
  std::size_t count = 0;
  for (const auto& t : tracks)
    for (const auto& d : t.displacements()) {
      s.x += d.x;
      s.y += d.y;
      ++count;
    }
  if (count) {
    s.x /= static_cast<double>(count);
    s.y /= static_cast<double>(count);
  }
  return s;
}

using FeatureVector = std::vector<double>;
using FeatureExtractor = std::function<FeatureVector(const Tensor& video, std::size_t frame)>;

/// Per-frame feature: channels x (H/4) x (W/4) block means, flattened.
inline FeatureVector pooled_features(const Tensor& video, std::size_t frame) {
  const std::size_t c = video.dim(1), h = video.dim(3) / 4, w = video.dim(4) / 4;
  if (h == 0 || w == 0) throw ShapeError("pooled features need frames of at least 4x4 pixels");
  FeatureVector f(c * h * w, 0.0);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < 4 * h; ++i)
      for (std::size_t j = 0; j < 4 * w; ++j)
        f[(ch * h + i / 4) * w + j / 4] += static_cast<double>(video.at(0, ch, frame, i, j)) / 16.0;
  return f;
}

inline double cosine_similarity(const FeatureVector& a, const FeatureVector& b) {
  double dot = 0, na = 0, nb = 0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    dot += a[k] * b[k];
    na += a[k] * a[k];
    nb += b[k] * b[k];
  }
  if (na == 0 || nb == 0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

/// Mean cosine similarity of frame features over all unordered frame pairs.
/// A pair with a zero-norm feature contributes 0 and still counts.
inline double temporal_consistency(const Tensor& video, const FeatureExtractor& extract = pooled_features) {
  if (video.rank() != 5 || video.dim(2) < 2) throw ShapeError("temporal_consistency needs a video with >= 2 frames");
  const std::size_t n = video.dim(2);
  std::vector<FeatureVector> feats;
  for (std::size_t f = 0; f < n; ++f) feats.push_back(extract(video, f));
  double s = 0;
  std::size_t pairs = 0;
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = a + 1; b < n; ++b, ++pairs) s += cosine_similarity(feats[a], feats[b]);
  return s / static_cast<double>(pairs);
}

/// Every frame's features, for distribution-level comparisons.
inline std::vector<FeatureVector> frame_features(const Tensor& video, const FeatureExtractor& extract = pooled_features) {
  std::vector<FeatureVector> out;
  for (std::size_t f = 0; f < video.dim(2); ++f) out.push_back(extract(video, f));
  return out;
}

inline constexpr double kCovarianceRidge = 1e-6;

/// ||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2}) with sample
/// covariances regularised by kCovarianceRidge on the diagonal.
inline double frechet_distance(const std::vector<FeatureVector>& a, const std::vector<FeatureVector>& b,
                               double ridge = kCovarianceRidge) {
  if (a.size() < 2 || b.size() < 2) throw ShapeError("frechet_distance needs at least two samples per set");
  const std::size_t d = a.front().size();
  auto fit = [&](const std::vector<FeatureVector>& s, Eigen::VectorXd& mu, Eigen::MatrixXd& cov) {
    Eigen::MatrixXd x(static_cast<Eigen::Index>(s.size()), static_cast<Eigen::Index>(d));
    for (std::size_t r = 0; r < s.size(); ++r) {
      if (s[r].size() != d) throw ShapeError("frechet_distance: feature dimensions differ");
      for (std::size_t k = 0; k < d; ++k) {
        if (!std::isfinite(s[r][k])) throw NumericError("frechet_distance: non-finite feature");
        x(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k)) = s[r][k];
      }
    }
    mu = x.colwise().mean();
    const Eigen::MatrixXd centered = x.rowwise() - mu.transpose();
    cov = centered.transpose() * centered / static_cast<double>(s.size() - 1);
    cov.diagonal().array() += ridge;
  };
  Eigen::VectorXd mu_a, mu_b;
  Eigen::MatrixXd cov_a, cov_b;
  fit(a, mu_a, cov_a);
  fit(b, mu_b, cov_b);

  // tr((S_a S_b)^{1/2}) = tr((S_a^{1/2} S_b S_a^{1/2})^{1/2}); the inner matrix is symmetric PSD.
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ea(cov_a);
  const Eigen::MatrixXd root_a =
      ea.eigenvectors() * ea.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal() * ea.eigenvectors().transpose();
  const Eigen::MatrixXd inner = root_a * cov_b * root_a;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ei(0.5 * (inner + inner.transpose()), Eigen::EigenvaluesOnly);
  const double tr_sqrt = ei.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double dist = (mu_a - mu_b).squaredNorm() + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt;
  return std::max(0.0, dist);
}

}  // namespace minv
