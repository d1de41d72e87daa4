#pragma once

// Minimal reverse-mode gradient engine over BasicTensor.
//
// A BasicGraph is a tape: nodes are appended in evaluation order, so the
// recorded graph is acyclic and reverse insertion order is a valid
// topological order for the backward sweep. Nodes only record a backward
// rule when at least one operand requires a gradient, which keeps
// inference-only evaluation free of closure overhead.

#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <utility>
#include <vector>

#include "minv/tensor.hpp"

namespace minv {

template <typename T>
class BasicGraph;

/// Handle to a node in a BasicGraph.
template <typename T>
struct BasicVar {
  BasicGraph<T>* graph = nullptr;
  std::size_t id = 0;

  const BasicTensor<T>& value() const { return graph->value(id); }
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const { return graph->requires_grad(id); }
};

template <typename T>
class BasicGraph {
 public:
  using TensorT = BasicTensor<T>;
  using Var = BasicVar<T>;
  // Receives the upstream gradient and accumulates into operands.
  using BackwardFn = std::function<void(BasicGraph&, std::size_t self, const TensorT&)>;

  BasicGraph() = default;
  BasicGraph(const BasicGraph&) = delete;
  BasicGraph& operator=(const BasicGraph&) = delete;

  Var leaf(TensorT value, bool trainable) { return push(std::move(value), trainable, {}); }
  Var constant(TensorT value) { return push(std::move(value), false, {}); }

  const TensorT& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Records a derived node. `backward` is dropped when `requires_grad` is false.
  Var record(TensorT value, bool requires_grad, BackwardFn backward) {
    return push(std::move(value), requires_grad, requires_grad ? std::move(backward) : BackwardFn{});
  }

  /// Accumulates `g` into the gradient slot of node `id` (used by backward rules).
  void accumulate(std::size_t id, TensorT g) {
    if (!nodes_[id].requires_grad) return;
    auto& slot = grads_[id];
    if (slot.size() == 0) {
      slot = std::move(g);
    } else {
      for (std::size_t i = 0; i < slot.size(); ++i) slot[i] += g[i];
    }
  }

  /// Gradients of scalar `loss` with respect to each of `leaves`. Leaves that
  /// do not influence the loss receive zeros of their own shape.
  std::vector<TensorT> grad(Var loss, std::span<const Var> leaves) {
    if (loss.graph != this) throw ShapeError("grad: loss belongs to a different graph");
    if (value(loss.id).size() != 1)
      throw ShapeError("grad: loss must be scalar, got shape " + to_string(value(loss.id).shape()));
    grads_.assign(nodes_.size(), TensorT{});
    if (nodes_[loss.id].requires_grad) {
      grads_[loss.id] = TensorT(value(loss.id).shape(), T{1});
      for (std::size_t i = loss.id + 1; i-- > 0;) {
        auto& n = nodes_[i];
        if (!n.backward || grads_[i].size() == 0) continue;
        n.backward(*this, i, grads_[i]);
        // Interior gradients are not needed once propagated.
        if (!n.is_leaf) grads_[i] = TensorT{};
      }
    }
    std::vector<TensorT> out;
    out.reserve(leaves.size());
    for (const auto& l : leaves) {
      if (l.graph != this) throw ShapeError("grad: leaf belongs to a different graph");
      out.push_back(grads_[l.id].size() ? grads_[l.id] : TensorT(value(l.id).shape()));
    }
    grads_.clear();
    return out;
  }

 private:
  struct Node {
    TensorT value;
    bool requires_grad = false;
    bool is_leaf = false;
    BackwardFn backward;
  };

  Var push(TensorT value, bool requires_grad, BackwardFn backward) {
    const bool leaf = !backward;
    nodes_.push_back(Node{std::move(value), requires_grad, leaf, std::move(backward)});
    return Var{this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
  std::vector<TensorT> grads_;
};

using Graph = BasicGraph<Real>;
using Var = BasicVar<Real>;

// ---------------------------------------------------------------------------
// Differentiable operations. Each mirrors the tensor kernel of the same name.

namespace ad {

template <typename T>
BasicVar<T> add(BasicVar<T> a, BasicVar<T> b) {
  auto& g = *a.graph;
  return g.record(minv::add(a.value(), b.value()), a.requires_grad() || b.requires_grad(),
                  [a, b](BasicGraph<T>& g, std::size_t, const BasicTensor<T>& up) {
                    if (a.requires_grad()) g.accumulate(a.id, reduce_to_shape(up, a.shape()));
                    if (b.requires_grad()) g.accumulate(b.id, reduce_to_shape(up, b.shape()));
                  });
}

template <typename T>
BasicVar<T> sub(BasicVar<T> a, BasicVar<T> b) {
  auto& g = *a.graph;
  return g.record(minv::sub(a.value(), b.value()), a.requires_grad() || b.requires_grad(),
                  [a, b](BasicGraph<T>& g, std::size_t, const BasicTensor<T>& up) {
                    if (a.requires_grad()) g.accumulate(a.id, reduce_to_shape(up, a.shape()));
                    if (b.requires_grad())
                      g.accumulate(b.id, reduce_to_shape(minv::scale(up, T{-1}), b.shape()));
                  });
}

template <typename T>
BasicVar<T> mul(BasicVar<T> a, BasicVar<T> b) {
  auto& g = *a.graph;
  return g.record(minv::mul(a.value(), b.value()), a.requires_grad() || b.requires_grad(),
                  [a, b](BasicGraph<T>& g, std::size_t, const BasicTensor<T>& up) {
                    if (a.requires_grad())
                      g.accumulate(a.id, reduce_to_shape(minv::mul(up, b.value()), a.shape()));
                    if (b.requires_grad())
                      g.accumulate(b.id, reduce_to_shape(minv::mul(up, a.value()), b.shape()));
                  });
}

template <typename T>
BasicVar<T> scale(BasicVar<T> a, T s) {
  auto& g = *a.graph;
  return g.record(minv::scale(a.value(), s), a.requires_grad(),
                  [a, s](BasicGraph<T>& g, std::size_t, const BasicTensor<T>& up) {
                    g.accumulate(a.id, minv::scale(up, s));
                  });
}

template <typename T>
BasicVar<T> matmul(BasicVar<T> a, BasicVar<T> b) {
  auto& g = *a.graph;
  return g.record(minv::matmul(a.value(), b.value()), a.requires_grad() || b.requires_grad(),
                  [a, b](BasicGraph<T>& g, std::size_t, const BasicTensor<T>& up) {
                    if (a.requires_grad())
                      g.accumulate(a.id, reduce_to_shape(minv::matmul(up, minv::transpose_last(b.value())),
                                                         a.shape()));
                    if (b.requires_grad())
                      g.accumulate(b.id, reduce_to_shape(minv::matmul(minv::transpose_last(a.value()), up),
                                                         b.shape()));
                  });
}

template <typename T>
BasicVar<T> linear(BasicVar<T> x, BasicVar<T> w) {
  auto& g = *x.graph;
  return g.record(
      minv::linear(x.value(), w.value()), x.requires_grad() || w.requires_grad(),
      [x, w](BasicGraph<T>& g, std::size_t, const BasicTensor<T>& up) {
        const auto& xv = x.value();
        const auto& wv = w.value();
        const std::size_t in = wv.dim(1), outc = wv.dim(0), rows = xv.size() / in;
        if (x.requires_grad()) {
          BasicTensor<T> dx(xv.shape());
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t o = 0; o < outc; ++o) {
              const T u = up[r * outc + o];
              for (std::size_t i = 0; i < in; ++i) dx[r * in + i] += u * wv[o * in + i];
            }
          g.accumulate(x.id, std::move(dx));
        }
        if (w.requires_grad()) {
          BasicTensor<T> dw(wv.shape());
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t o = 0; o < outc; ++o) {
              const T u = up[r * outc + o];
              for (std::size_t i = 0; i < in; ++i) dw[o * in + i] += u * xv[r * in + i];
            }
          g.accumulate(w.id, std::move(dw));
        }
      });
}

template <typename T>
BasicVar<T> reshape(BasicVar<T> a, Shape s) {
  auto& g = *a.graph;
  return g.record(a.value().reshaped(std::move(s)), a.requires_grad(),
                  [a](BasicGraph<T>& g, std::size_t, const BasicTensor<T>& up) {
                    g.accumulate(a.id, up.reshaped(a.shape()));
                  });
}

template <typename T>
BasicVar<T> permute(BasicVar<T> a, std::vector<std::size_t> axes) {
  auto& g = *a.graph;
  auto out = minv::permute(a.value(), axes);
  return g.record(std::move(out), a.requires_grad(),
                  [a, inv = inverse_permutation(axes)](BasicGraph<T>& g, std::size_t, const BasicTensor<T>& up) {
                    g.accumulate(a.id, minv::permute(up, inv));
                  });
}

template <typename T>
BasicVar<T> transpose_last(BasicVar<T> a) {
  std::vector<std::size_t> axes(a.shape().size());
  std::iota(axes.begin(), axes.end(), 0);
  std::swap(axes[axes.size() - 1], axes[axes.size() - 2]);
  return permute(a, std::move(axes));
}

template <typename T>
BasicVar<T> mean(BasicVar<T> a, const std::vector<std::size_t>& axes) {
  auto& g = *a.graph;
  auto out = minv::mean(a.value(), axes);
  const T inv = static_cast<T>(out.size()) / static_cast<T>(a.value().size());
  return g.record(std::move(out), a.requires_grad(),
                  [a, inv](BasicGraph<T>& g, std::size_t, const BasicTensor<T>& up) {
                    g.accumulate(a.id, minv::add(BasicTensor<T>(a.shape()), minv::scale(up, inv)));
                  });
}

/// Mean over every element, returned with shape [1].
template <typename T>
BasicVar<T> mean_all(BasicVar<T> a) {
  auto flat = reshape(a, Shape{a.value().size()});
  return mean(flat, {0});
}

template <typename T>
BasicVar<T> softmax(BasicVar<T> a, std::size_t axis) {
  auto& g = *a.graph;
  return g.record(
      minv::softmax(a.value(), axis), a.requires_grad(),
      [a, axis](BasicGraph<T>& g, std::size_t self, const BasicTensor<T>& up) {
        const auto& yv = g.value(self);
        const std::size_t n = yv.dim(axis);
        const std::size_t inner = row_major_strides(yv.shape())[axis];
        const std::size_t outer = yv.size() / (n * inner);
        BasicTensor<T> dx(yv.shape());
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t i = 0; i < inner; ++i) {
            const std::size_t base = o * n * inner + i;
            T dot{0};
            for (std::size_t k = 0; k < n; ++k) dot += up[base + k * inner] * yv[base + k * inner];
            for (std::size_t k = 0; k < n; ++k)
              dx[base + k * inner] = yv[base + k * inner] * (up[base + k * inner] - dot);
          }
        g.accumulate(a.id, std::move(dx));
      });
}

template <typename T>
BasicVar<T> silu(BasicVar<T> a) {
  auto& g = *a.graph;
  return g.record(minv::silu(a.value()), a.requires_grad(),
                  [a](BasicGraph<T>& g, std::size_t, const BasicTensor<T>& up) {
                    const auto& x = a.value();
                    BasicTensor<T> dx(x.shape());
                    for (std::size_t i = 0; i < x.size(); ++i) {
                      const T s = T{1} / (T{1} + std::exp(-x[i]));
                      dx[i] = up[i] * (s + x[i] * s * (T{1} - s));
                    }
                    g.accumulate(a.id, std::move(dx));
                  });
}

template <typename T>
BasicVar<T> avg_pool2(BasicVar<T> a) {
  auto& g = *a.graph;
  return g.record(minv::avg_pool2(a.value()), a.requires_grad(),
                  [a](BasicGraph<T>& g, std::size_t, const BasicTensor<T>& up) {
                    g.accumulate(a.id, minv::scale(minv::upsample2(up), T(0.25)));
                  });
}

template <typename T>
BasicVar<T> upsample2(BasicVar<T> a) {
  auto& g = *a.graph;
  return g.record(minv::upsample2(a.value()), a.requires_grad(),
                  [a](BasicGraph<T>& g, std::size_t, const BasicTensor<T>& up) {
                    g.accumulate(a.id, minv::scale(minv::avg_pool2(up), T(4)));
                  });
}

}  // namespace ad
}  // namespace minv
