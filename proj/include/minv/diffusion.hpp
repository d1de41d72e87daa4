#pragma once

// Noise schedule, closed-form forward noising, the denoising objective and a
// deterministic (eta = 0) strided sampler.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "minv/autograd.hpp"
#include "minv/denoiser.hpp"
#include "minv/embeddings.hpp"
#include "minv/tensor.hpp"

namespace minv {

class NoiseSchedule {
 public:
  /// Linear betas from beta_start to beta_end over `steps` steps.
  static NoiseSchedule linear(std::size_t steps = 200, double beta_start = 1e-4, double beta_end = 2e-2) {
    if (steps < 2) throw ConfigError("noise schedule needs at least two steps");
    if (!(beta_start > 0) || !(beta_end < 1) || beta_start > beta_end)
      throw ConfigError("noise schedule needs 0 < beta_start <= beta_end < 1");
    NoiseSchedule s;
    s.betas_.resize(steps);
    s.alpha_bar_.resize(steps + 1);
    s.alpha_bar_[0] = 1.0;
    for (std::size_t i = 0; i < steps; ++i) {
      s.betas_[i] = beta_start + (beta_end - beta_start) * static_cast<double>(i) / static_cast<double>(steps - 1);
      s.alpha_bar_[i + 1] = s.alpha_bar_[i] * (1.0 - s.betas_[i]);
    }
    return s;
  }

  std::size_t steps() const noexcept { return betas_.size(); }
  /// beta_t for t in [1, T].
  double beta(std::size_t t) const { return betas_.at(checked(t) - 1); }
  /// Cumulative product of (1 - beta) up to t; alpha_bar(0) = 1.
  double alpha_bar(std::size_t t) const {
    if (t > steps()) throw ShapeError("timestep " + std::to_string(t) + " beyond schedule length");
    return alpha_bar_[t];
  }

  std::size_t checked(std::size_t t) const {
    if (t < 1 || t > steps())
      throw ShapeError("timestep " + std::to_string(t) + " outside [1, " + std::to_string(steps()) + "]");
    return t;
  }

  /// Sampler timesteps for a uniform stride: ceil(k*T/S) for k = S..1.
  std::vector<std::size_t> strided(std::size_t sample_steps) const {
    if (sample_steps == 0 || sample_steps > steps())
      throw ShapeError("sampler steps must be in [1, " + std::to_string(steps()) + "]");
    std::vector<std::size_t> ts;
    for (std::size_t k = sample_steps; k >= 1; --k) ts.push_back((k * steps() + sample_steps - 1) / sample_steps);
    return ts;
  }

 private:
  std::vector<double> betas_;
  std::vector<double> alpha_bar_;
};

/// x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps.
inline Tensor q_sample(const NoiseSchedule& s, const Tensor& x0, std::size_t t, const Tensor& eps) {
  if (x0.shape() != eps.shape())
    throw ShapeError("q_sample: x0 " + to_string(x0.shape()) + " and eps " + to_string(eps.shape()) + " differ");
  const double ab = s.alpha_bar(s.checked(t));
  const Real a = static_cast<Real>(std::sqrt(ab)), b = static_cast<Real>(std::sqrt(1.0 - ab));
  Tensor out(x0.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * x0[i] + b * eps[i];
  return out;
}

/// Pixel values [0, 1] to the model's [-1, 1] range and back (clamped).
inline Tensor to_model_space(const Tensor& video) {
  Tensor out(video.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = Real(2) * video[i] - Real(1);
  return out;
}

inline Tensor to_pixel_space(const Tensor& x) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp((x[i] + Real(1)) * Real(0.5), Real(0), Real(1));
  return out;
}

namespace ad {

/// Mean squared error between eps and the denoiser's prediction for
/// q_sample(x0, t, eps). `x0` and `eps` are videos [1, C_img, N, H, W] in
/// model space. Gradients flow to whichever of `w` / `m` are trainable.
inline Var denoising_loss(Graph& g, const DenoiserParams& p, const std::vector<Var>& w,
                          const EmbeddingVars* m, const NoiseSchedule& s, const Tensor& x0,
                          std::size_t t, const Tensor& eps, std::size_t cond) {
  minv::detail::check_video(p.spec, x0);
  const Tensor xt = q_sample(s, x0, t, eps);
  auto pred = denoiser_forward(g, p, w, g.constant(to_frame_major(xt)), t, cond, m);
  auto diff = sub(pred, g.constant(to_frame_major(eps)));
  return mean_all(mul(diff, diff));
}

/// The inversion objective: frozen weights, embeddings as the only leaves.
inline Var training_loss(Graph& g, const DenoiserParams& p, const EmbeddingVars& m,
                         const NoiseSchedule& s, const Tensor& x0, std::size_t t, const Tensor& eps,
                         std::size_t cond) {
  if (!p.frozen) throw ShapeError("training_loss requires frozen denoiser parameters");
  auto w = bind_params(g, p, false);
  return denoising_loss(g, p, w, &m, s, x0, t, eps, cond);
}

}  // namespace ad

struct EmbeddingLoss {
  double loss = 0.0;
  MotionEmbeddingSet grad;  ///< same layout as the embeddings
};

/// Loss value and its gradient with respect to every embedding tensor.
inline EmbeddingLoss training_loss_and_grad(const DenoiserParams& p, const MotionEmbeddingSet& m,
                                            const NoiseSchedule& s, const Tensor& x0, std::size_t t,
                                            const Tensor& eps, std::size_t cond) {
  m.check_compatible(p.spec);
  Graph g;
  auto mv = ad::bind_embeddings(g, m, true);
  auto loss = ad::training_loss(g, p, mv, s, x0, t, eps, cond);
  std::vector<Var> leaves;
  for (std::size_t i = 0; i < m.size(); ++i) {
    leaves.push_back(mv.qk[i]);
    leaves.push_back(mv.v[i]);
  }
  auto grads = g.grad(loss, leaves);
  EmbeddingLoss out{static_cast<double>(loss.value()[0]), m};
  for (std::size_t i = 0; i < m.size(); ++i) {
    out.grad.qk[i] = std::move(grads[2 * i]);
    out.grad.v[i] = std::move(grads[2 * i + 1]);
  }
  return out;
}

/// Loss value only (no gradient recording).
inline double training_loss_value(const DenoiserParams& p, const MotionEmbeddingSet* m,
                                  const NoiseSchedule& s, const Tensor& x0, std::size_t t,
                                  const Tensor& eps, std::size_t cond) {
  Graph g;
  auto w = ad::bind_params(g, p, false);
  std::optional<ad::EmbeddingVars> mv;
  if (m) {
    m->check_compatible(p.spec);
    mv = ad::bind_embeddings(g, *m, false);
  }
  return static_cast<double>(ad::denoising_loss(g, p, w, mv ? &*mv : nullptr, s, x0, t, eps, cond).value()[0]);
}

struct SampleOptions {
  std::size_t steps = 50;
  std::uint64_t seed = 0;
  std::size_t cond = 0;
  /// Clamp the predicted clean video to [-1, 1] at every step.
  bool clip_denoised = true;
};

namespace detail {

inline Tensor ddim_loop(const DenoiserParams& p, const NoiseSchedule& s, const SampleOptions& o,
                        const MotionEmbeddingSet* m) {
  const Shape shape{1, p.spec.image_channels, p.spec.frames, p.spec.height, p.spec.width};
  Rng rng(o.seed);
  Tensor x = randn(shape, rng);
  const auto ts = s.strided(o.steps);
  for (std::size_t k = 0; k < ts.size(); ++k) {
    const std::size_t t = ts[k];
    const std::size_t t_prev = k + 1 < ts.size() ? ts[k + 1] : 0;
    const Tensor eps = m ? forward(p, x, t, o.cond, *m) : forward(p, x, t, o.cond);
    const double ab = s.alpha_bar(t), ab_prev = s.alpha_bar(t_prev);
    const double sa = std::sqrt(ab), sb = std::sqrt(1.0 - ab);
    const double pa = std::sqrt(ab_prev), pb = std::sqrt(1.0 - ab_prev);
    for (std::size_t i = 0; i < x.size(); ++i) {
      double x0 = (static_cast<double>(x[i]) - sb * static_cast<double>(eps[i])) / sa;
      if (o.clip_denoised) x0 = std::clamp(x0, -1.0, 1.0);
      // Re-derive eps from the (possibly clipped) estimate so eta = 0 stays consistent.
      const double e = (static_cast<double>(x[i]) - sa * x0) / sb;
      x[i] = static_cast<Real>(pa * x0 + pb * e);
    }
    if (!x.all_finite()) throw NumericError("sampler produced non-finite values at t=" + std::to_string(t));
  }
  return x;
}

}  // namespace detail

/// Deterministic strided sampling without embeddings. Returns model space.
inline Tensor sample(const DenoiserParams& p, const NoiseSchedule& s, const SampleOptions& o) {
  return detail::ddim_loop(p, s, o, nullptr);
}

/// As above; `m` first passes through its configured inference strategy.
inline Tensor sample(const DenoiserParams& p, const MotionEmbeddingSet& m, const NoiseSchedule& s,
                     const SampleOptions& o) {
  m.check_compatible(p.spec);
  const MotionEmbeddingSet debiased = apply_inference_strategy(m);
  return detail::ddim_loop(p, s, o, &debiased);
}

}  // namespace minv
