#pragma once

// Motion inversion (optimise only the embeddings against the denoising
// objective of a frozen network) and the pretraining stage that produces
// that network.

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "minv/denoiser.hpp"
#include "minv/diffusion.hpp"
#include "minv/embeddings.hpp"
#include "minv/tensor.hpp"

namespace minv {

/// Adaptive-moment optimiser over a fixed list of tensors.
class Adam {
 public:
  struct Options {
    double lr = 1e-2;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
  };

  Adam(std::span<const Tensor> like, Options o) : o_(o) {
    for (const auto& t : like) {
      m_.emplace_back(t.shape());
      v_.emplace_back(t.shape());
    }
  }

  /// One update of `params` in place from `grads` (same layout).
  void step(std::span<Tensor* const> params, std::span<const Tensor* const> grads) {
    ++t_;
    const double c1 = 1.0 - std::pow(o_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(o_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params.size(); ++k) {
      Tensor& p = *params[k];
      const Tensor& g = *grads[k];
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double gi = static_cast<double>(g[i]);
        const double mi = o_.beta1 * static_cast<double>(m_[k][i]) + (1.0 - o_.beta1) * gi;
        const double vi = o_.beta2 * static_cast<double>(v_[k][i]) + (1.0 - o_.beta2) * gi * gi;
        m_[k][i] = static_cast<Real>(mi);
        v_[k][i] = static_cast<Real>(vi);
        p[i] -= static_cast<Real>(o_.lr * (mi / c1) / (std::sqrt(vi / c2) + o_.eps));
      }
    }
  }

 private:
  Options o_;
  std::vector<Tensor> m_, v_;
  std::uint64_t t_ = 0;
};

/// Scales `grads` so their joint L2 norm is at most `max_norm`; returns the
/// pre-clip norm. A non-positive max_norm disables clipping.
inline double clip_global_norm(std::span<Tensor* const> grads, double max_norm) {
  double sq = 0.0;
  for (const Tensor* g : grads)
    for (auto v : g->data()) sq += static_cast<double>(v) * static_cast<double>(v);
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const Real f = static_cast<Real>(max_norm / norm);
    for (Tensor* g : grads)
      for (auto& v : g->data()) v *= f;
  }
  return norm;
}

/// Reproducible stream of (t, eps) draws for the denoising objective.
class LossStream {
 public:
  LossStream(std::uint64_t seed, const NoiseSchedule& s, Shape video_shape)
      : rng_(seed), steps_(s.steps()), shape_(std::move(video_shape)) {}

  struct Draw {
    std::size_t t;
    Tensor eps;
  };

  Draw next() {
    const std::size_t t = 1 + static_cast<std::size_t>(rng_.uniform_int(steps_));
    return {t, randn(shape_, rng_)};
  }

 private:
  Rng rng_;
  std::size_t steps_;
  Shape shape_;
};

struct InversionConfig {
  std::size_t steps = 400;
  double lr = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double clip_norm = 1.0;
  std::uint64_t seed = 0;
  EmbeddingShapeConfig shape;
  std::size_t log_every = 50;

  void validate() const {
    if (!(lr > 0)) throw ConfigError("inversion learning rate must be positive");
    if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1))
      throw ConfigError("optimizer moment coefficients must lie in [0, 1)");
  }
};

struct InversionResult {
  MotionEmbeddingSet embeddings;
  std::vector<double> losses;  ///< one per optimisation step
};

using ProgressFn = std::function<void(std::size_t step, double loss)>;

/// Learns a motion embedding set for `video` (pixel space [0, 1]) with every
/// denoiser weight frozen. Starts from zeros; the (t, eps) stream is seeded by
/// cfg.seed so runs are bitwise reproducible.
inline InversionResult invert(const Tensor& video, const DenoiserParams& params, std::size_t cond,
                              const InversionConfig& cfg, const NoiseSchedule& schedule,
                              const ProgressFn& progress = {}) {
  cfg.validate();
  if (!params.frozen) throw ShapeError("invert requires frozen denoiser parameters");
  detail::check_video(params.spec, video);
  const Tensor x0 = to_model_space(video);

  InversionResult res{init_zero(params.spec, cfg.shape, params.spec.frames), {}};
  auto& m = res.embeddings;
  std::vector<Tensor*> slots;
  for (std::size_t i = 0; i < m.size(); ++i) {
    slots.push_back(&m.qk[i]);
    slots.push_back(&m.v[i]);
  }
  std::vector<Tensor> like;
  for (auto* s : slots) like.push_back(*s);
  Adam opt(like, {cfg.lr, cfg.beta1, cfg.beta2, 1e-8});
  LossStream stream(cfg.seed, schedule, video.shape());

  for (std::size_t step = 0; step < cfg.steps; ++step) {
    auto draw = stream.next();
    auto out = training_loss_and_grad(params, m, schedule, x0, draw.t, draw.eps, cond);
    if (!std::isfinite(out.loss))
      throw NumericError("inversion loss became non-finite at step " + std::to_string(step));
    res.losses.push_back(out.loss);
    std::vector<Tensor*> gslots;
    for (std::size_t i = 0; i < m.size(); ++i) {
      gslots.push_back(&out.grad.qk[i]);
      gslots.push_back(&out.grad.v[i]);
    }
    clip_global_norm(gslots, cfg.clip_norm);
    std::vector<const Tensor*> cg(gslots.begin(), gslots.end());
    opt.step(slots, cg);
    if (progress && cfg.log_every && (step % cfg.log_every == 0 || step + 1 == cfg.steps))
      progress(step, out.loss);
  }
  return res;
}

/// Loss values of a fixed embedding set (or none) on the same (t, eps)
/// stream that invert() would draw with `seed`.
inline std::vector<double> loss_trace(const Tensor& video, const DenoiserParams& params, std::size_t cond,
                                      const MotionEmbeddingSet* m, std::size_t steps, std::uint64_t seed,
                                      const NoiseSchedule& schedule) {
  detail::check_video(params.spec, video);
  const Tensor x0 = to_model_space(video);
  LossStream stream(seed, schedule, video.shape());
  std::vector<double> out;
  for (std::size_t step = 0; step < steps; ++step) {
    auto draw = stream.next();
    out.push_back(training_loss_value(params, m, schedule, x0, draw.t, draw.eps, cond));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pretraining.

struct TrainingClip {
  Tensor video;  ///< pixel space [1, C_img, N, H, W]
  std::size_t cond = 0;
};

struct PretrainConfig {
  std::size_t steps = 6000;
  double lr = 2e-3;
  double clip_norm = 1.0;
  std::uint64_t seed = 0;
  std::size_t log_every = 100;
};

struct PretrainResult {
  DenoiserParams params;
  std::vector<double> losses;
};

/// Fits every denoiser weight to the denoising objective over `clips` and
/// returns the frozen network.
inline PretrainResult pretrain(const std::vector<TrainingClip>& clips, const DenoiserSpec& spec,
                               const PretrainConfig& cfg, const NoiseSchedule& schedule,
                               const ProgressFn& progress = {}) {
  if (clips.empty()) throw ConfigError("pretraining needs a nonempty dataset");
  if (!(cfg.lr > 0)) throw ConfigError("pretraining learning rate must be positive");
  spec.validate();
  for (const auto& c : clips) detail::check_video(spec, c.video);

  Rng rng(cfg.seed);
  PretrainResult res{init_params(spec, rng.next_u64()), {}};
  DenoiserParams& p = res.params;
  Adam opt(p.tensors, {cfg.lr, 0.9, 0.999, 1e-8});
  std::vector<Tensor*> slots;
  for (auto& t : p.tensors) slots.push_back(&t);
  const Shape vshape = clips.front().video.shape();

  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const auto& clip = clips[rng.uniform_int(clips.size())];
    const std::size_t t = 1 + static_cast<std::size_t>(rng.uniform_int(schedule.steps()));
    const Tensor eps = randn(vshape, rng);
    Graph g;
    auto w = ad::bind_params(g, p, true);
    auto loss = ad::denoising_loss(g, p, w, nullptr, schedule, to_model_space(clip.video), t, eps, clip.cond);
    const double lv = static_cast<double>(loss.value()[0]);
    if (!std::isfinite(lv)) throw NumericError("pretraining loss became non-finite at step " + std::to_string(step));
    res.losses.push_back(lv);
    auto grads = g.grad(loss, w);
    std::vector<Tensor*> gslots;
    for (auto& gr : grads) gslots.push_back(&gr);
    clip_global_norm(gslots, cfg.clip_norm);
    std::vector<const Tensor*> cg(gslots.begin(), gslots.end());
    opt.step(slots, cg);
    if (progress && cfg.log_every && (step % cfg.log_every == 0 || step + 1 == cfg.steps)) progress(step, lv);
  }
  p.frozen = true;
  return res;
}

}  // namespace minv
