#pragma once

// Dense row-major tensors and the forward kernels shared by the gradient
// engine. Every kernel is a pure function of its inputs.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "minv/error.hpp"

namespace minv {

#ifdef MINV_SINGLE_PRECISION
using Real = float;
#else
using Real = double;
#endif

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string to_string(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

inline Shape row_major_strides(const Shape& s) {
  Shape st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;

  explicit BasicTensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)) {
    check_extents();
    data_.assign(numel(shape_), fill);
  }

  BasicTensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_extents();
    if (numel(shape_) != data_.size())
      throw ShapeError("tensor data size " + std::to_string(data_.size()) +
                       " does not match shape " + to_string(shape_));
  }

  static BasicTensor scalar(T v) { return BasicTensor(Shape{1}, std::vector<T>{v}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return data_.size(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  const std::vector<T>& values() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  template <typename... Idx>
  T& at(Idx... idx) {
    return data_[offset({static_cast<std::size_t>(idx)...})];
  }
  template <typename... Idx>
  const T& at(Idx... idx) const {
    return data_[offset({static_cast<std::size_t>(idx)...})];
  }

  BasicTensor reshaped(Shape s) const {
    if (numel(s) != data_.size())
      throw ShapeError("cannot reshape " + to_string(shape_) + " to " + to_string(s));
    return BasicTensor(std::move(s), data_);
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  /// Bitwise equality of shape and payload.
  friend bool operator==(const BasicTensor& a, const BasicTensor& b) {
    if (a.shape_ != b.shape_) return false;
    return std::equal(a.data_.begin(), a.data_.end(), b.data_.begin(), [](T x, T y) {
      return std::memcmp(&x, &y, sizeof(T)) == 0;
    });
  }

 private:
  void check_extents() const {
    if (shape_.empty()) throw ShapeError("tensor shape must have rank >= 1");
    for (auto e : shape_)
      if (e == 0) throw ShapeError("tensor extents must be positive, got " + to_string(shape_));
  }

  std::size_t offset(std::initializer_list<std::size_t> idx) const {
    std::size_t off = 0, k = 0;
    for (auto i : idx) off = off * shape_[k++] + i;
    return off;
  }

  Shape shape_;
  std::vector<T> data_;
};

using Tensor = BasicTensor<Real>;

// ---------------------------------------------------------------------------
// Random numbers: xoshiro256** (Blackman & Vigna) seeded through splitmix64.
// Normals use the Box-Muller transform on two 53-bit uniforms, consuming
// exactly two draws per pair of normals.

class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) {
    std::uint64_t x = seed;
    for (auto& s : state_) s = splitmix64(x);
  }

  std::uint64_t next_u64() noexcept {
    const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  /// Uniform in [0, 1).
  double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n).
  std::uint64_t uniform_int(std::uint64_t n) noexcept {
    // Lemire's nearly-divisionless method, rejection keeps it unbiased.
    unsigned __int128 m = static_cast<unsigned __int128>(next_u64()) * n;
    auto low = static_cast<std::uint64_t>(m);
    if (low < n) {
      const std::uint64_t threshold = -n % n;
      while (low < threshold) {
        m = static_cast<unsigned __int128>(next_u64()) * n;
        low = static_cast<std::uint64_t>(m);
      }
    }
    return static_cast<std::uint64_t>(m >> 64);
  }

  double normal() noexcept {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    const double u2 = uniform();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  /// Independent generator derived from this one's seed stream.
  Rng split() noexcept { return Rng(next_u64()); }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) noexcept { return (x << k) | (x >> (64 - k)); }
  static std::uint64_t splitmix64(std::uint64_t& x) noexcept {
    std::uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::uint64_t state_[4]{};
  double spare_ = 0.0;
  bool has_spare_ = false;
};

template <typename T = Real>
BasicTensor<T> randn(const Shape& shape, Rng& rng, double scale = 1.0) {
  BasicTensor<T> t(shape);
  for (auto& v : t.data()) v = static_cast<T>(rng.normal() * scale);
  return t;
}

// ---------------------------------------------------------------------------
// Broadcasting: equal ranks after prepending 1s, each extent equal or 1.

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t ea = i + a.size() >= r ? a[i + a.size() - r] : 1;
    const std::size_t eb = i + b.size() >= r ? b[i + b.size() - r] : 1;
    if (ea != eb && ea != 1 && eb != 1)
      throw ShapeError("shapes " + to_string(a) + " and " + to_string(b) + " do not broadcast");
    out[i] = std::max(ea, eb);
  }
  return out;
}

namespace detail {

// Strides of `s` viewed at rank `r` with broadcast axes given stride 0.
inline Shape broadcast_strides(const Shape& s, const Shape& out) {
  const std::size_t r = out.size();
  Shape st(r, 0);
  const Shape own = row_major_strides(s);
  for (std::size_t i = 0; i < s.size(); ++i) {
    const std::size_t k = i + r - s.size();
    st[k] = s[i] == 1 ? 0 : own[i];
  }
  return st;
}

template <typename T, typename F>
BasicTensor<T> broadcast_binary(const BasicTensor<T>& a, const BasicTensor<T>& b, F f) {
  if (a.shape() == b.shape()) {
    BasicTensor<T> out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(a[i], b[i]);
    return out;
  }
  const Shape os = broadcast_shape(a.shape(), b.shape());
  const Shape sa = broadcast_strides(a.shape(), os);
  const Shape sb = broadcast_strides(b.shape(), os);
  BasicTensor<T> out(os);
  const std::size_t r = os.size();
  const std::size_t inner = os[r - 1];
  std::vector<std::size_t> idx(r, 0);
  std::size_t o = 0;
  while (o < out.size()) {
    std::size_t ia = 0, ib = 0;
    for (std::size_t k = 0; k + 1 < r; ++k) {
      ia += idx[k] * sa[k];
      ib += idx[k] * sb[k];
    }
    for (std::size_t j = 0; j < inner; ++j, ++o)
      out[o] = f(a[ia + j * sa[r - 1]], b[ib + j * sb[r - 1]]);
    for (std::size_t k = r - 1; k-- > 0;) {
      if (++idx[k] < os[k]) break;
      idx[k] = 0;
    }
  }
  return out;
}

}  // namespace detail

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return detail::broadcast_binary(a, b, [](T x, T y) { return x + y; });
}
template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return detail::broadcast_binary(a, b, [](T x, T y) { return x - y; });
}
template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return detail::broadcast_binary(a, b, [](T x, T y) { return x * y; });
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& a, T s) {
  BasicTensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * s;
  return out;
}

/// Sums `g` (shaped like a broadcast result) back down to `target`.
template <typename T>
BasicTensor<T> reduce_to_shape(const BasicTensor<T>& g, const Shape& target) {
  if (g.shape() == target) return g;
  const Shape& gs = g.shape();
  const Shape st = detail::broadcast_strides(target, gs);
  BasicTensor<T> out(target);
  const std::size_t r = gs.size();
  std::vector<std::size_t> idx(r, 0);
  for (std::size_t o = 0; o < g.size(); ++o) {
    std::size_t t = 0;
    for (std::size_t k = 0; k < r; ++k) t += idx[k] * st[k];
    out[t] += g[o];
    for (std::size_t k = r; k-- > 0;) {
      if (++idx[k] < gs[k]) break;
      idx[k] = 0;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Matrix products.

/// Batched product [..,p,q] x [..,q,r] -> [..,p,r]; batch extents broadcast.
template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.rank() < 2 || b.rank() < 2)
    throw ShapeError("matmul needs rank >= 2 operands, got " + to_string(a.shape()) + " and " +
                     to_string(b.shape()));
  const std::size_t p = a.dim(a.rank() - 2), q = a.dim(a.rank() - 1);
  const std::size_t q2 = b.dim(b.rank() - 2), r = b.dim(b.rank() - 1);
  if (q != q2)
    throw ShapeError("matmul inner extents differ: " + to_string(a.shape()) + " x " +
                     to_string(b.shape()));
  const Shape ba(a.shape().begin(), a.shape().end() - 2);
  const Shape bb(b.shape().begin(), b.shape().end() - 2);
  Shape batch;
  try {
    batch = broadcast_shape(ba.empty() ? Shape{1} : ba, bb.empty() ? Shape{1} : bb);
  } catch (const ShapeError&) {
    throw ShapeError("matmul batch extents differ: " + to_string(a.shape()) + " x " +
                     to_string(b.shape()));
  }
  const std::size_t nb = numel(batch);
  const Shape sa = detail::broadcast_strides(ba.empty() ? Shape{1} : ba, batch);
  const Shape sb = detail::broadcast_strides(bb.empty() ? Shape{1} : bb, batch);

  Shape os = batch;
  if (ba.empty() && bb.empty()) os.clear();
  os.push_back(p);
  os.push_back(r);
  BasicTensor<T> out(os);
  std::vector<std::size_t> idx(batch.size(), 0);
  for (std::size_t n = 0; n < nb; ++n) {
    std::size_t ia = 0, ib = 0;
    for (std::size_t k = 0; k < batch.size(); ++k) {
      ia += idx[k] * sa[k];
      ib += idx[k] * sb[k];
    }
    const T* pa = a.data().data() + ia * p * q;
    const T* pb = b.data().data() + ib * q * r;
    T* po = out.data().data() + n * p * r;
    for (std::size_t i = 0; i < p; ++i)
      for (std::size_t k = 0; k < q; ++k) {
        const T aik = pa[i * q + k];
        for (std::size_t j = 0; j < r; ++j) po[i * r + j] += aik * pb[k * r + j];
      }
    for (std::size_t k = batch.size(); k-- > 0;) {
      if (++idx[k] < batch[k]) break;
      idx[k] = 0;
    }
  }
  return out;
}

/// Row-wise affine map x[..., in] . w[out, in]^T -> [..., out].
template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& w) {
  if (w.rank() != 2 || x.dim(x.rank() - 1) != w.dim(1))
    throw ShapeError("linear: input " + to_string(x.shape()) + " incompatible with weight " +
                     to_string(w.shape()));
  const std::size_t in = w.dim(1), outc = w.dim(0), rows = x.size() / in;
  Shape os = x.shape();
  os.back() = outc;
  BasicTensor<T> out(os);
  const T* px = x.data().data();
  const T* pw = w.data().data();
  T* po = out.data().data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t o = 0; o < outc; ++o) {
      T acc{0};
      for (std::size_t i = 0; i < in; ++i) acc += px[r * in + i] * pw[o * in + i];
      po[r * outc + o] = acc;
    }
  return out;
}

// ---------------------------------------------------------------------------
// Layout.

template <typename T>
BasicTensor<T> permute(const BasicTensor<T>& x, const std::vector<std::size_t>& axes) {
  const std::size_t r = x.rank();
  if (axes.size() != r) throw ShapeError("permute: axis list length differs from rank");
  std::vector<bool> seen(r, false);
  for (auto a : axes) {
    if (a >= r || seen[a]) throw ShapeError("permute: invalid axis permutation");
    seen[a] = true;
  }
  Shape os(r);
  for (std::size_t i = 0; i < r; ++i) os[i] = x.dim(axes[i]);
  const Shape in_st = row_major_strides(x.shape());
  Shape st(r);
  for (std::size_t i = 0; i < r; ++i) st[i] = in_st[axes[i]];
  BasicTensor<T> out(os);
  std::vector<std::size_t> idx(r, 0);
  for (std::size_t o = 0; o < out.size(); ++o) {
    std::size_t src = 0;
    for (std::size_t k = 0; k < r; ++k) src += idx[k] * st[k];
    out[o] = x[src];
    for (std::size_t k = r; k-- > 0;) {
      if (++idx[k] < os[k]) break;
      idx[k] = 0;
    }
  }
  return out;
}

inline std::vector<std::size_t> inverse_permutation(const std::vector<std::size_t>& axes) {
  std::vector<std::size_t> inv(axes.size());
  for (std::size_t i = 0; i < axes.size(); ++i) inv[axes[i]] = i;
  return inv;
}

/// Swaps the two trailing axes.
template <typename T>
BasicTensor<T> transpose_last(const BasicTensor<T>& x) {
  std::vector<std::size_t> axes(x.rank());
  std::iota(axes.begin(), axes.end(), 0);
  std::swap(axes[x.rank() - 1], axes[x.rank() - 2]);
  return permute(x, axes);
}

// ---------------------------------------------------------------------------
// Reductions and pointwise maps.

/// Mean over `axes`; reduced axes are kept with extent 1.
template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& x, const std::vector<std::size_t>& axes) {
  Shape os = x.shape();
  std::size_t count = 1;
  for (auto a : axes) {
    if (a >= x.rank()) throw ShapeError("mean: axis out of range for " + to_string(x.shape()));
    if (os[a] != 1) {
      count *= os[a];
      os[a] = 1;
    }
  }
  BasicTensor<T> out = reduce_to_shape(x, os);
  const T inv = T{1} / static_cast<T>(count);
  for (auto& v : out.data()) v *= inv;
  return out;
}

template <typename T>
T sum_all(const BasicTensor<T>& x) {
  T acc{0};
  for (auto v : x.data()) acc += v;
  return acc;
}

template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& x, std::size_t axis) {
  if (axis >= x.rank()) throw ShapeError("softmax: axis out of range for " + to_string(x.shape()));
  const std::size_t n = x.dim(axis);
  const std::size_t inner = row_major_strides(x.shape())[axis];
  const std::size_t outer = x.size() / (n * inner);
  BasicTensor<T> out(x.shape());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * n * inner + i;
      T mx = x[base];
      for (std::size_t k = 1; k < n; ++k) mx = std::max(mx, x[base + k * inner]);
      T s{0};
      for (std::size_t k = 0; k < n; ++k) {
        const T e = std::exp(x[base + k * inner] - mx);
        out[base + k * inner] = e;
        s += e;
      }
      for (std::size_t k = 0; k < n; ++k) out[base + k * inner] /= s;
    }
  return out;
}

template <typename T>
BasicTensor<T> silu(const BasicTensor<T>& x) {
  BasicTensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] / (T{1} + std::exp(-x[i]));
  return out;
}

// ---------------------------------------------------------------------------
// Spatial ladder. Both kernels act on the two leading axes [H, W, ...].

template <typename T>
BasicTensor<T> avg_pool2(const BasicTensor<T>& x) {
  if (x.rank() < 2 || x.dim(0) % 2 || x.dim(1) % 2)
    throw ShapeError("avg_pool2 needs even leading extents, got " + to_string(x.shape()));
  const std::size_t h = x.dim(0), w = x.dim(1), inner = x.size() / (h * w);
  Shape os = x.shape();
  os[0] = h / 2;
  os[1] = w / 2;
  BasicTensor<T> out(os);
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      const T* src = x.data().data() + (i * w + j) * inner;
      T* dst = out.data().data() + ((i / 2) * (w / 2) + j / 2) * inner;
      for (std::size_t k = 0; k < inner; ++k) dst[k] += src[k] * T(0.25);
    }
  return out;
}

template <typename T>
BasicTensor<T> upsample2(const BasicTensor<T>& x) {
  if (x.rank() < 2) throw ShapeError("upsample2 needs rank >= 2, got " + to_string(x.shape()));
  const std::size_t h = x.dim(0), w = x.dim(1), inner = x.size() / (h * w);
  Shape os = x.shape();
  os[0] = 2 * h;
  os[1] = 2 * w;
  BasicTensor<T> out(os);
  for (std::size_t i = 0; i < 2 * h; ++i)
    for (std::size_t j = 0; j < 2 * w; ++j) {
      const T* src = x.data().data() + ((i / 2) * w + j / 2) * inner;
      std::copy(src, src + inner, out.data().data() + (i * 2 * w + j) * inner);
    }
  return out;
}

}  // namespace minv
