#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "mde/errors.hpp"

namespace mde {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (auto e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

namespace detail {

inline std::uint64_t next_seq() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}

inline thread_local bool grad_enabled = true;

// Count of relu/abs inputs landing (essentially) on the non-differentiable
// point during forward evaluation. Gradient-check harnesses read this to
// reject evaluation points where finite differences are meaningless (e.g. a
// dead channel that batch norm pins exactly at zero).
inline thread_local std::uint64_t kink_hits = 0;
inline thread_local double kink_band = 1e-9;

template <typename T>
inline void note_kink(T x) {
  if (double(x) > -kink_band && double(x) < kink_band) ++kink_hits;
}

}  // namespace detail

/// RAII scope that disables tape recording (inference / oracle evaluation).
struct NoGrad {
  NoGrad() : prev_(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGrad() { detail::grad_enabled = prev_; }
  NoGrad(const NoGrad&) = delete;
  NoGrad& operator=(const NoGrad&) = delete;

 private:
  bool prev_;
};

/// Dense N-dimensional array with reverse-mode autodiff. Copies share the
/// underlying storage. Every differentiable op records its inputs and a
/// backward closure; backward() replays the implicit tape in reverse
/// execution order. Values are immutable once an op has consumed them,
/// except for leaf parameters which the optimizer updates between steps.
template <typename T>
class Tensor {
 public:
  struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;  // sized lazily, same extent as value
    bool requires_grad = false;
    bool tracked = false;
    std::uint64_t seq = 0;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backprop;

    void ensure_grad() {
      if (grad.empty()) grad.assign(value.size(), T(0));
    }
  };

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0)) {
    check_shape(shape);
    node_ = std::make_shared<Node>();
    node_->shape = std::move(shape);
    node_->value.assign(numel(node_->shape), fill);
    node_->seq = detail::next_seq();
  }

  static Tensor leaf(Shape shape, bool requires_grad = false) {
    Tensor t(std::move(shape));
    t.node_->requires_grad = requires_grad;
    t.node_->tracked = requires_grad;
    return t;
  }

  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
    check_shape(shape);
    if (numel(shape) != values.size())
      throw ShapeError("value count " + std::to_string(values.size()) +
                       " does not match shape " + shape_str(shape));
    Tensor t;
    t.node_ = std::make_shared<Node>();
    t.node_->shape = std::move(shape);
    t.node_->value = std::move(values);
    t.node_->requires_grad = requires_grad;
    t.node_->tracked = requires_grad;
    t.node_->seq = detail::next_seq();
    return t;
  }

  bool defined() const { return node_ != nullptr; }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }

  std::span<T> values() { return node_->value; }
  std::span<const T> values() const { return node_->value; }

  T item() const {
    if (size() != 1) throw ShapeError("item() requires a scalar tensor, got " + shape_str(shape()));
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  bool tracked() const { return node_ && node_->tracked; }

  void set_requires_grad(bool on) {
    if (node_->backprop)
      throw StateError("requires_grad can only be toggled on leaf tensors");
    node_->requires_grad = on;
    node_->tracked = on;
  }

  bool has_grad() const { return !node_->grad.empty(); }

  std::span<const T> grad() const {
    if (node_->grad.empty()) throw StateError("tensor has no gradient");
    return node_->grad;
  }

  std::span<T> grad_mut() {
    node_->ensure_grad();
    return node_->grad;
  }

  void zero_grad() {
    std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }

  /// Copy of the values as a fresh untracked leaf.
  Tensor detach() const {
    Tensor t;
    t.node_ = std::make_shared<Node>();
    t.node_->shape = node_->shape;
    t.node_->value = node_->value;
    t.node_->seq = detail::next_seq();
    return t;
  }

  // NCHW accessors.
  T& at4(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return node_->value[offset4(n, c, h, w)];
  }
  T at4(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return node_->value[offset4(n, c, h, w)];
  }
  std::size_t offset4(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    const Shape& s = node_->shape;
    return ((n * s[1] + c) * s[2] + h) * s[3] + w;
  }

  std::shared_ptr<Node> node() const { return node_; }

  static Tensor wrap(std::shared_ptr<Node> n) {
    Tensor t;
    t.node_ = std::move(n);
    return t;
  }

 private:
  static void check_shape(const Shape& shape) {
    if (shape.empty()) throw ShapeError("rank-0 tensors are not supported");
    for (auto e : shape)
      if (e == 0) throw ShapeError("zero-extent dimension in shape " + shape_str(shape));
  }

  std::shared_ptr<Node> node_;
};

namespace detail {

template <typename T>
Tensor<T> make_result(Shape shape) {
  return Tensor<T>(std::move(shape));
}

/// Attach parents and a backward closure to `out` if recording is on and at
/// least one parent is tracked.
template <typename T>
void attach(Tensor<T>& out, std::vector<Tensor<T>> parents,
            std::function<void(typename Tensor<T>::Node&)> backprop) {
  if (!grad_enabled) return;
  bool any = false;
  for (const auto& p : parents) any = any || p.tracked();
  if (!any) return;
  auto n = out.node();
  n->tracked = true;
  for (auto& p : parents) n->parents.push_back(p.node());
  n->backprop = std::move(backprop);
}

template <typename T>
void accumulate(typename Tensor<T>::Node& dst, std::span<const T> g) {
  dst.ensure_grad();
  for (std::size_t i = 0; i < g.size(); ++i) dst.grad[i] += g[i];
}

}  // namespace detail

/// Reverse-mode sweep from a scalar output: visits each recorded op exactly
/// once in reverse execution order and accumulates gradients (summing where
/// a tensor feeds multiple ops) into every tracked tensor reachable from it.
template <typename T>
void backward(const Tensor<T>& output) {
  if (output.size() != 1)
    throw ShapeError("backward requires a scalar output, got " + shape_str(output.shape()));
  using Node = typename Tensor<T>::Node;

  // Collect the reachable tracked subgraph.
  std::vector<std::shared_ptr<Node>> tape;
  std::unordered_set<Node*> seen;
  std::vector<std::shared_ptr<Node>> stack{output.node()};
  while (!stack.empty()) {
    auto n = stack.back();
    stack.pop_back();
    if (!n->tracked || !seen.insert(n.get()).second) continue;
    tape.push_back(n);
    for (auto& p : n->parents) stack.push_back(p);
  }
  std::sort(tape.begin(), tape.end(),
            [](const auto& a, const auto& b) { return a->seq > b->seq; });

  output.node()->ensure_grad();
  output.node()->grad[0] = T(1);
  for (auto& n : tape)
    if (n->backprop && !n->grad.empty()) n->backprop(*n);
}

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "add");
  auto out = detail::make_result<T>(a.shape());
  auto av = a.values(), bv = b.values();
  auto ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
  auto an = a.node(), bn = b.node();
  detail::attach<T>(out, {a, b}, [an, bn](auto& n) {
    if (an->tracked) detail::accumulate<T>(*an, n.grad);
    if (bn->tracked) detail::accumulate<T>(*bn, n.grad);
  });
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "sub");
  auto out = detail::make_result<T>(a.shape());
  auto av = a.values(), bv = b.values();
  auto ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
  auto an = a.node(), bn = b.node();
  detail::attach<T>(out, {a, b}, [an, bn](auto& n) {
    if (an->tracked) detail::accumulate<T>(*an, n.grad);
    if (bn->tracked) {
      bn->ensure_grad();
      for (std::size_t i = 0; i < n.grad.size(); ++i) bn->grad[i] -= n.grad[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "mul");
  auto out = detail::make_result<T>(a.shape());
  auto av = a.values(), bv = b.values();
  auto ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
  auto an = a.node(), bn = b.node();
  detail::attach<T>(out, {a, b}, [an, bn](auto& n) {
    if (an->tracked) {
      an->ensure_grad();
      for (std::size_t i = 0; i < n.grad.size(); ++i) an->grad[i] += n.grad[i] * bn->value[i];
    }
    if (bn->tracked) {
      bn->ensure_grad();
      for (std::size_t i = 0; i < n.grad.size(); ++i) bn->grad[i] += n.grad[i] * an->value[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "div");
  auto out = detail::make_result<T>(a.shape());
  auto av = a.values(), bv = b.values();
  auto ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] / bv[i];
  auto an = a.node(), bn = b.node();
  detail::attach<T>(out, {a, b}, [an, bn](auto& n) {
    if (an->tracked) {
      an->ensure_grad();
      for (std::size_t i = 0; i < n.grad.size(); ++i) an->grad[i] += n.grad[i] / bn->value[i];
    }
    if (bn->tracked) {
      bn->ensure_grad();
      for (std::size_t i = 0; i < n.grad.size(); ++i)
        bn->grad[i] -= n.grad[i] * an->value[i] / (bn->value[i] * bn->value[i]);
    }
  });
  return out;
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  auto out = detail::make_result<T>(a.shape());
  auto av = a.values();
  auto ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + s;
  auto an = a.node();
  detail::attach<T>(out, {a}, [an](auto& n) { detail::accumulate<T>(*an, n.grad); });
  return out;
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T s) {
  auto out = detail::make_result<T>(a.shape());
  auto av = a.values();
  auto ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * s;
  auto an = a.node();
  detail::attach<T>(out, {a}, [an, s](auto& n) {
    an->ensure_grad();
    for (std::size_t i = 0; i < n.grad.size(); ++i) an->grad[i] += n.grad[i] * s;
  });
  return out;
}

template <typename T>
Tensor<T> abs(const Tensor<T>& a) {
  auto out = detail::make_result<T>(a.shape());
  auto av = a.values();
  auto ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) {
    detail::note_kink(av[i]);
    ov[i] = std::abs(av[i]);
  }
  auto an = a.node();
  // subgradient 0 at x = 0
  detail::attach<T>(out, {a}, [an](auto& n) {
    an->ensure_grad();
    for (std::size_t i = 0; i < n.grad.size(); ++i) {
      T x = an->value[i];
      an->grad[i] += n.grad[i] * (x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)));
    }
  });
  return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  auto out = detail::make_result<T>(a.shape());
  auto av = a.values();
  auto ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) {
    detail::note_kink(av[i]);
    ov[i] = av[i] > T(0) ? av[i] : T(0);
  }
  auto an = a.node();
  // subgradient 0 at x = 0
  detail::attach<T>(out, {a}, [an](auto& n) {
    an->ensure_grad();
    for (std::size_t i = 0; i < n.grad.size(); ++i)
      if (an->value[i] > T(0)) an->grad[i] += n.grad[i];
  });
  return out;
}

template <typename T>
Tensor<T> softplus(const Tensor<T>& a) {
  auto out = detail::make_result<T>(a.shape());
  auto av = a.values();
  auto ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) {
    T x = av[i];
    ov[i] = x > T(0) ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
  }
  auto an = a.node();
  detail::attach<T>(out, {a}, [an](auto& n) {
    an->ensure_grad();
    for (std::size_t i = 0; i < n.grad.size(); ++i) {
      T x = an->value[i];
      T sig = x > T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
      an->grad[i] += n.grad[i] * sig;
    }
  });
  return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  auto out = detail::make_result<T>(Shape{1});
  auto av = a.values();
  T acc = T(0);
  for (auto v : av) acc += v;
  out.values()[0] = acc;
  auto an = a.node();
  detail::attach<T>(out, {a}, [an](auto& n) {
    an->ensure_grad();
    T g = n.grad[0];
    for (auto& v : an->grad) v += g;
  });
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  auto out = detail::make_result<T>(Shape{1});
  auto av = a.values();
  T acc = T(0);
  for (auto v : av) acc += v;
  T inv = T(1) / T(av.size());
  out.values()[0] = acc * inv;
  auto an = a.node();
  detail::attach<T>(out, {a}, [an, inv](auto& n) {
    an->ensure_grad();
    T g = n.grad[0] * inv;
    for (auto& v : an->grad) v += g;
  });
  return out;
}

// ---------------------------------------------------------------------------
// Structural ops (NCHW)
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void require_rank4(const Tensor<T>& t, const char* op) {
  if (t.rank() != 4)
    throw ShapeError(std::string(op) + ": expected rank-4 NCHW tensor, got " + shape_str(t.shape()));
}

}  // namespace detail

/// Channel-axis concatenation. An undefined second argument acts as the
/// empty-channel tensor (zero-extent shapes are otherwise forbidden).
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  if (!b.defined()) return a;
  detail::require_rank4(a, "concat_channels");
  detail::require_rank4(b, "concat_channels");
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3])
    throw ShapeError("concat_channels: N/H/W mismatch " + shape_str(sa) + " vs " + shape_str(sb));
  const std::size_t N = sa[0], Ca = sa[1], Cb = sb[1], H = sa[2], W = sa[3];
  const std::size_t plane = H * W;
  auto out = detail::make_result<T>(Shape{N, Ca + Cb, H, W});
  auto av = a.values(), bv = b.values();
  auto ov = out.values();
  for (std::size_t n = 0; n < N; ++n) {
    std::copy_n(av.data() + n * Ca * plane, Ca * plane, ov.data() + n * (Ca + Cb) * plane);
    std::copy_n(bv.data() + n * Cb * plane, Cb * plane,
                ov.data() + (n * (Ca + Cb) + Ca) * plane);
  }
  auto an = a.node(), bn = b.node();
  detail::attach<T>(out, {a, b}, [an, bn, N, Ca, Cb, plane](auto& n) {
    if (an->tracked) an->ensure_grad();
    if (bn->tracked) bn->ensure_grad();
    for (std::size_t i = 0; i < N; ++i) {
      const T* g = n.grad.data() + i * (Ca + Cb) * plane;
      if (an->tracked) {
        T* ga = an->grad.data() + i * Ca * plane;
        for (std::size_t k = 0; k < Ca * plane; ++k) ga[k] += g[k];
      }
      if (bn->tracked) {
        T* gb = bn->grad.data() + i * Cb * plane;
        for (std::size_t k = 0; k < Cb * plane; ++k) gb[k] += g[Ca * plane + k];
      }
    }
  });
  return out;
}

/// Forward differences along the width axis: out[..., w] = x[..., w+1] - x[..., w].
template <typename T>
Tensor<T> diff_x(const Tensor<T>& a) {
  detail::require_rank4(a, "diff_x");
  const Shape& s = a.shape();
  if (s[3] < 2) throw ShapeError("diff_x: width must be >= 2");
  const std::size_t N = s[0], C = s[1], H = s[2], W = s[3];
  auto out = detail::make_result<T>(Shape{N, C, H, W - 1});
  auto av = a.values();
  auto ov = out.values();
  for (std::size_t r = 0; r < N * C * H; ++r)
    for (std::size_t w = 0; w + 1 < W; ++w)
      ov[r * (W - 1) + w] = av[r * W + w + 1] - av[r * W + w];
  auto an = a.node();
  detail::attach<T>(out, {a}, [an, N, C, H, W](auto& n) {
    an->ensure_grad();
    for (std::size_t r = 0; r < N * C * H; ++r)
      for (std::size_t w = 0; w + 1 < W; ++w) {
        T g = n.grad[r * (W - 1) + w];
        an->grad[r * W + w + 1] += g;
        an->grad[r * W + w] -= g;
      }
  });
  return out;
}

/// Forward differences along the height axis.
template <typename T>
Tensor<T> diff_y(const Tensor<T>& a) {
  detail::require_rank4(a, "diff_y");
  const Shape& s = a.shape();
  if (s[2] < 2) throw ShapeError("diff_y: height must be >= 2");
  const std::size_t N = s[0], C = s[1], H = s[2], W = s[3];
  auto out = detail::make_result<T>(Shape{N, C, H - 1, W});
  auto av = a.values();
  auto ov = out.values();
  for (std::size_t p = 0; p < N * C; ++p)
    for (std::size_t h = 0; h + 1 < H; ++h)
      for (std::size_t w = 0; w < W; ++w)
        ov[(p * (H - 1) + h) * W + w] = av[(p * H + h + 1) * W + w] - av[(p * H + h) * W + w];
  auto an = a.node();
  detail::attach<T>(out, {a}, [an, N, C, H, W](auto& n) {
    an->ensure_grad();
    for (std::size_t p = 0; p < N * C; ++p)
      for (std::size_t h = 0; h + 1 < H; ++h)
        for (std::size_t w = 0; w < W; ++w) {
          T g = n.grad[(p * (H - 1) + h) * W + w];
          an->grad[(p * H + h + 1) * W + w] += g;
          an->grad[(p * H + h) * W + w] -= g;
        }
  });
  return out;
}

}  // namespace mde
