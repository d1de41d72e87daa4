#pragma once

// Temporal self-attention over the frame axis of a video feature tensor,
// with optional additive motion-embedding injection ahead of the
// query/key and value projections.

#include <cmath>
#include <optional>
#include <string>

#include "minv/autograd.hpp"
#include "minv/tensor.hpp"

namespace minv {

/// Single-head projection weights, each stored [out, in] = [C, C] and
/// applied row-wise, so Q = F . W_q^T.
template <typename T>
struct BasicAttentionWeights {
  BasicTensor<T> wq, wk, wv;

  std::size_t channels() const { return wq.dim(0); }
  /// Key dimensionality used for the 1/sqrt(d_k) logit scale.
  std::size_t key_dim() const { return wk.dim(0); }

  void validate() const {
    const Shape s{wq.rank() ? wq.dim(0) : 0, wq.rank() ? wq.dim(0) : 0};
    if (wq.shape() != s || wk.shape() != s || wv.shape() != s || s[0] == 0)
      throw ShapeError("attention weights must be square with one shared extent, got " +
                       to_string(wq.shape()) + ", " + to_string(wk.shape()) + ", " +
                       to_string(wv.shape()));
  }
};

using AttentionWeights = BasicAttentionWeights<Real>;

/// [1, C, N, H, W] -> [H*W, N, C] with out[h*W + w, n, c] = x[0, c, n, h, w].
template <typename T>
BasicTensor<T> to_frame_major(const BasicTensor<T>& x) {
  if (x.rank() != 5 || x.dim(0) != 1)
    throw ShapeError("to_frame_major expects [1,C,N,H,W], got " + to_string(x.shape()));
  const std::size_t c = x.dim(1), n = x.dim(2), h = x.dim(3), w = x.dim(4);
  return permute(x.reshaped({c, n, h * w}), {2, 1, 0});
}

/// Inverse of to_frame_major for a known spatial extent.
template <typename T>
BasicTensor<T> from_frame_major(const BasicTensor<T>& f, std::size_t height, std::size_t width) {
  if (f.rank() != 3 || f.dim(0) != height * width)
    throw ShapeError("from_frame_major expects [" + std::to_string(height * width) +
                     ",N,C], got " + to_string(f.shape()));
  const std::size_t n = f.dim(1), c = f.dim(2);
  return permute(f, {2, 1, 0}).reshaped({1, c, n, height, width});
}

namespace ad {

template <typename T>
struct AttentionVars {
  BasicVar<T> wq, wk, wv;
};

namespace detail {

template <typename T>
void check_embedding(const BasicTensor<T>& m, const Shape& fs, const char* which) {
  if (m.rank() != 3 || m.dim(2) != fs[2] || (m.dim(0) != 1 && m.dim(0) != fs[0]))
    throw ShapeError(std::string("motion embedding ") + which + " has shape " +
                     to_string(m.shape()) + ", expected [1 or " + std::to_string(fs[0]) + "," +
                     std::to_string(fs[1]) + "," + std::to_string(fs[2]) + "]");
  if (m.dim(1) != fs[1])
    throw ShapeError(std::string("motion embedding ") + which + " covers " +
                     std::to_string(m.dim(1)) + " frames but the features have " +
                     std::to_string(fs[1]) + " (mismatched checkpoint?)");
}

}  // namespace detail

/// softmax((F+m_qk)W_q^T ((F+m_qk)W_k^T)^T / sqrt(d_k)) (F+m_v)W_v^T, attention
/// taken over the frame axis independently for each spatial row of F.
/// Absent embeddings leave F untouched on that branch.
template <typename T>
BasicVar<T> temporal_attention(BasicVar<T> f, const AttentionVars<T>& w,
                               std::optional<BasicVar<T>> m_qk = std::nullopt,
                               std::optional<BasicVar<T>> m_v = std::nullopt) {
  const Shape& fs = f.shape();
  if (fs.size() != 3)
    throw ShapeError("temporal_attention expects [HW,N,C] features, got " + to_string(fs));
  const std::size_t c = w.wq.shape()[0];
  if (fs[2] != c || w.wq.shape() != Shape{c, c} || w.wk.shape() != Shape{c, c} ||
      w.wv.shape() != Shape{c, c})
    throw ShapeError("temporal_attention: features " + to_string(fs) +
                     " do not match weight extent " + std::to_string(c));
  if (m_qk) detail::check_embedding(m_qk->value(), fs, "m_qk");
  if (m_v) detail::check_embedding(m_v->value(), fs, "m_v");

  const BasicVar<T> fqk = m_qk ? add(f, *m_qk) : f;
  const BasicVar<T> fv = m_v ? add(f, *m_v) : f;
  auto q = linear(fqk, w.wq);
  auto k = linear(fqk, w.wk);
  auto v = linear(fv, w.wv);
  const T inv_sqrt_dk = T{1} / std::sqrt(static_cast<T>(w.wk.shape()[0]));
  auto logits = scale(matmul(q, transpose_last(k)), inv_sqrt_dk);
  auto attn = softmax(logits, 2);
  return matmul(attn, v);
}

}  // namespace ad

template <typename T>
BasicTensor<T> temporal_attention(const BasicTensor<T>& f, const BasicAttentionWeights<T>& w) {
  w.validate();
  BasicGraph<T> g;
  ad::AttentionVars<T> wv{g.constant(w.wq), g.constant(w.wk), g.constant(w.wv)};
  return ad::temporal_attention(g.constant(f), wv).value();
}

template <typename T>
BasicTensor<T> temporal_attention_injected(const BasicTensor<T>& f,
                                           const BasicAttentionWeights<T>& w,
                                           const BasicTensor<T>& m_qk,
                                           const BasicTensor<T>& m_v) {
  w.validate();
  BasicGraph<T> g;
  ad::AttentionVars<T> wv{g.constant(w.wq), g.constant(w.wk), g.constant(w.wv)};
  return ad::temporal_attention(g.constant(f), wv, std::optional{g.constant(m_qk)},
                                std::optional{g.constant(m_v)})
      .value();
}

/// Frame-to-frame attention map [HW, N, N] (rows sum to one).
template <typename T>
BasicTensor<T> temporal_attention_map(const BasicTensor<T>& f, const BasicAttentionWeights<T>& w) {
  w.validate();
  auto q = linear(f, w.wq);
  auto k = linear(f, w.wk);
  const T inv_sqrt_dk = T{1} / std::sqrt(static_cast<T>(w.key_dim()));
  return softmax(scale(matmul(q, transpose_last(k)), inv_sqrt_dk), 2);
}

}  // namespace minv
