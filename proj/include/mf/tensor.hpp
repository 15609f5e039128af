#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mf/errors.hpp"

namespace mf {

using Shape = std::vector<int>;

inline std::int64_t numel_of(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) {
    if (d <= 0) throw ShapeError("non-positive extent in shape");
    n *= d;
  }
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

inline bool same_shape(const Shape& a, const Shape& b) { return a == b; }

// Thread-local switch: when disabled, ops compute values but record no graph.
class GradMode {
 public:
  static bool enabled() { return flag(); }
  static void set(bool on) { flag() = on; }

 private:
  static bool& flag() {
    thread_local bool on = true;
    return on;
  }
};

class NoGradGuard {
 public:
  NoGradGuard() : prev_(GradMode::enabled()) { GradMode::set(false); }
  ~NoGradGuard() { GradMode::set(prev_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

namespace detail {

// One recorded operation (or leaf). The graph of nodes is the tape: a
// backward sweep topologically orders the reachable nodes and runs each
// node's backward rule once, accumulating into parent grads.
template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // allocated on demand, same length as value
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node<T>>> parents;
  std::function<void(Node<T>&)> backward_fn;

  std::int64_t numel() const { return static_cast<std::int64_t>(value.size()); }

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
  }
};

}  // namespace detail

template <typename T>
void check_finite(const char* op, std::span<const T> v) {
  for (const T& x : v) {
    if (!std::isfinite(static_cast<double>(x))) {
      throw NumericsError(std::string("non-finite value produced by ") + op);
    }
  }
}

template <typename T>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape s, bool requires_grad = false) {
    return from_data(std::move(s), {}, requires_grad, T(0));
  }

  static Tensor full(Shape s, T v, bool requires_grad = false) {
    return from_data(std::move(s), {}, requires_grad, v);
  }

  static Tensor scalar(T v, bool requires_grad = false) {
    return from_vector({}, {v}, requires_grad);
  }

  static Tensor from_vector(Shape s, std::vector<T> data,
                            bool requires_grad = false) {
    const std::int64_t n = numel_of(s);
    if (static_cast<std::int64_t>(data.size()) != n) {
      throw ShapeError("data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(s));
    }
    check_finite<T>("leaf", data);
    auto node = std::make_shared<detail::Node<T>>();
    node->shape = std::move(s);
    node->value = std::move(data);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return node().shape; }
  int rank() const { return static_cast<int>(node().shape.size()); }
  int dim(int i) const { return node().shape.at(static_cast<std::size_t>(i)); }
  std::int64_t numel() const { return node().numel(); }

  std::span<const T> values() const {
    return {node().value.data(), node().value.size()};
  }

  // Mutable access to a leaf's payload (initialization, optimizer updates).
  std::span<T> raw_values() { return {node().value.data(), node().value.size()}; }

  bool requires_grad() const { return node().requires_grad; }

  void set_requires_grad(bool on) {
    if (on && node().op != std::string("leaf")) {
      throw ConfigError("requires_grad can only be toggled on leaf tensors");
    }
    node().requires_grad = on;
  }

  std::span<const T> grad() const {
    return {node().grad.data(), node().grad.size()};
  }

  void zero_grad() { std::fill(node().grad.begin(), node().grad.end(), T(0)); }

  T item() const {
    if (numel() != 1) throw ShapeError("item() requires a single-element tensor");
    return node().value[0];
  }

  T at(std::initializer_list<int> idx) const {
    const Shape& s = node().shape;
    if (idx.size() != s.size()) throw ShapeError("index rank mismatch");
    std::int64_t flat = 0;
    std::size_t k = 0;
    for (int i : idx) {
      if (i < 0 || i >= s[k]) throw ShapeError("index out of range");
      flat = flat * s[k] + i;
      ++k;
    }
    return node().value[static_cast<std::size_t>(flat)];
  }

  // Reverse-mode sweep from a scalar. Grads accumulate; call zero_grad
  // between backward passes for fresh gradients.
  void backward() const {
    if (numel() != 1) throw ShapeError("backward() requires a scalar loss");
    if (!node().requires_grad) return;

    // Iterative topological order over the reachable subgraph.
    std::vector<detail::Node<T>*> order;
    std::unordered_set<detail::Node<T>*> visited;
    std::vector<std::pair<detail::Node<T>*, std::size_t>> stack;
    stack.emplace_back(n_.get(), 0);
    visited.insert(n_.get());
    while (!stack.empty()) {
      auto& [node_ptr, child] = stack.back();
      if (child < node_ptr->parents.size()) {
        detail::Node<T>* p = node_ptr->parents[child].get();
        ++child;
        if (p->requires_grad && visited.insert(p).second) {
          stack.emplace_back(p, 0);
        }
      } else {
        order.push_back(node_ptr);
        stack.pop_back();
      }
    }

    // Leaf grads accumulate across calls; intermediate grads are scratch
    // space for this sweep only and start from zero.
    for (detail::Node<T>* p : order) {
      p->ensure_grad();
      if (!p->parents.empty() || p->backward_fn) {
        std::fill(p->grad.begin(), p->grad.end(), T(0));
      }
    }
    n_->grad[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      if ((*it)->backward_fn) (*it)->backward_fn(**it);
    }
  }

  detail::Node<T>& node() const {
    if (!n_) throw ShapeError("use of undefined tensor");
    return *n_;
  }

  const std::shared_ptr<detail::Node<T>>& node_ptr() const { return n_; }

  explicit Tensor(std::shared_ptr<detail::Node<T>> n) : n_(std::move(n)) {}

 private:
  static Tensor from_data(Shape s, std::vector<T> data, bool requires_grad,
                          T fill) {
    const std::int64_t n = numel_of(s);
    data.assign(static_cast<std::size_t>(n), fill);
    auto node = std::make_shared<detail::Node<T>>();
    node->shape = std::move(s);
    node->value = std::move(data);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  std::shared_ptr<detail::Node<T>> n_;
};

// Builds an op node. `backward` reads self.grad and accumulates into
// self.parents[i]->grad (parents are pre-ensured for requires_grad nodes by
// the sweep). When grad recording is off or no parent needs grads, the
// result is a detached constant.
template <typename T>
Tensor<T> make_op(const char* name, Shape shape, std::vector<T> value,
                  std::vector<Tensor<T>> parents,
                  std::function<void(detail::Node<T>&)> backward) {
  if (static_cast<std::int64_t>(value.size()) != numel_of(shape)) {
    throw ShapeError(std::string(name) + ": output buffer size mismatch");
  }
  check_finite<T>(name, value);
  auto node = std::make_shared<detail::Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = name;
  bool track = false;
  if (GradMode::enabled()) {
    for (const auto& p : parents) track = track || p.requires_grad();
  }
  if (track) {
    node->requires_grad = true;
    node->parents.reserve(parents.size());
    for (auto& p : parents) node->parents.push_back(p.node_ptr());
    node->backward_fn = std::move(backward);
  }
  return Tensor<T>(std::move(node));
}

namespace detail {

template <typename T>
inline void accumulate(Node<T>& parent, const std::vector<double>& g) {
  if (!parent.requires_grad) return;
  parent.ensure_grad();
  for (std::size_t i = 0; i < g.size(); ++i) parent.grad[i] += static_cast<T>(g[i]);
}

enum class Broadcast { same, scalar_rhs, scalar_lhs, bias_rhs, channel_lhs, channel_rhs };

// Supported elementwise pairings:
//   same shapes; one side rank-0; bias [C] against [N,C,H,W];
//   mask [N,1,H,W] against [N,C,H,W] (either side).
template <typename T>
Broadcast classify_broadcast(const char* op, const Tensor<T>& a,
                             const Tensor<T>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa == sb) return Broadcast::same;
  if (sb.empty()) return Broadcast::scalar_rhs;
  if (sa.empty()) return Broadcast::scalar_lhs;
  if (sa.size() == 4 && sb.size() == 1 && sb[0] == sa[1]) return Broadcast::bias_rhs;
  if (sa.size() == 4 && sb.size() == 4 && sa[0] == sb[0] && sa[2] == sb[2] &&
      sa[3] == sb[3]) {
    if (sa[1] == 1 && sb[1] > 1) return Broadcast::channel_lhs;
    if (sb[1] == 1 && sa[1] > 1) return Broadcast::channel_rhs;
  }
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(sa) +
                   " and " + shape_str(sb));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops with the broadcast rules above.
// ---------------------------------------------------------------------------

namespace detail {

template <typename T, typename Fwd, typename Bwd>
Tensor<T> binary_op(const char* name, const Tensor<T>& a, const Tensor<T>& b,
                    Fwd fwd, Bwd dfdab) {
  const Broadcast bc = classify_broadcast(name, a, b);
  const Shape out_shape =
      (bc == Broadcast::scalar_lhs || bc == Broadcast::channel_lhs) ? b.shape()
                                                                    : a.shape();
  const std::int64_t n = numel_of(out_shape);
  auto av = a.values();
  auto bv = b.values();

  // Maps an output flat index to the flat index within each operand.
  const Shape sa = a.shape(), sb = b.shape();
  std::int64_t plane = 0, chans = 0;
  if (bc == Broadcast::bias_rhs || bc == Broadcast::channel_lhs ||
      bc == Broadcast::channel_rhs) {
    plane = static_cast<std::int64_t>(out_shape[2]) * out_shape[3];
    chans = out_shape[1];
  }
  // Captured by value: these lambdas outlive this frame inside the backward
  // closure.
  auto index_a = [bc, plane, chans](std::int64_t i) -> std::int64_t {
    switch (bc) {
      case Broadcast::scalar_lhs: return 0;
      case Broadcast::channel_lhs: {
        const std::int64_t within = i % (chans * plane);
        return (i / (chans * plane)) * plane + within % plane;
      }
      default: return i;
    }
  };
  auto index_b = [bc, plane, chans](std::int64_t i) -> std::int64_t {
    switch (bc) {
      case Broadcast::scalar_rhs: return 0;
      case Broadcast::bias_rhs: return (i / plane) % chans;
      case Broadcast::channel_rhs: {
        const std::int64_t within = i % (chans * plane);
        return (i / (chans * plane)) * plane + within % plane;
      }
      default: return i;
    }
  };

  std::vector<T> out(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    out[static_cast<std::size_t>(i)] =
        fwd(av[static_cast<std::size_t>(index_a(i))],
            bv[static_cast<std::size_t>(index_b(i))]);
  }

  return make_op<T>(
      name, out_shape, std::move(out), {a, b},
      [=](detail::Node<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        const bool ga = pa.requires_grad;
        const bool gb = pb.requires_grad;
        if (ga) pa.ensure_grad();
        if (gb) pb.ensure_grad();
        for (std::int64_t i = 0; i < n; ++i) {
          const std::size_t ia = static_cast<std::size_t>(index_a(i));
          const std::size_t ib = static_cast<std::size_t>(index_b(i));
          const auto [da, db] = dfdab(pa.value[ia], pb.value[ib]);
          const T g = self.grad[static_cast<std::size_t>(i)];
          if (ga) pa.grad[ia] += g * static_cast<T>(da);
          if (gb) pb.grad[ib] += g * static_cast<T>(db);
        }
      });
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op<T>(
      "add", a, b, [](T x, T y) { return x + y; },
      [](T, T) { return std::pair<double, double>(1.0, 1.0); });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op<T>(
      "sub", a, b, [](T x, T y) { return x - y; },
      [](T, T) { return std::pair<double, double>(1.0, -1.0); });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op<T>(
      "mul", a, b, [](T x, T y) { return x * y; },
      [](T x, T y) {
        return std::pair<double, double>(static_cast<double>(y),
                                         static_cast<double>(x));
      });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op<T>(
      "div", a, b, [](T x, T y) { return x / y; },
      [](T x, T y) {
        const double dy = static_cast<double>(y);
        return std::pair<double, double>(1.0 / dy,
                                         -static_cast<double>(x) / (dy * dy));
      });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, T s) {
  return add(a, Tensor<T>::scalar(s));
}
template <typename T>
Tensor<T> mul(const Tensor<T>& a, T s) {
  return mul(a, Tensor<T>::scalar(s));
}
template <typename T>
Tensor<T> sub(const Tensor<T>& a, T s) {
  return sub(a, Tensor<T>::scalar(s));
}

// ---------------------------------------------------------------------------
// Unary elementwise ops.
// ---------------------------------------------------------------------------

namespace detail {

template <typename T, typename Fwd, typename Bwd>
Tensor<T> unary_op(const char* name, const Tensor<T>& a, Fwd fwd, Bwd dfdx) {
  auto av = a.values();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
  const std::size_t n = av.size();
  return make_op<T>(name, a.shape(), std::move(out), {a},
                    [n, dfdx](detail::Node<T>& self) {
                      auto& p = *self.parents[0];
                      if (!p.requires_grad) return;
                      p.ensure_grad();
                      for (std::size_t i = 0; i < n; ++i) {
                        p.grad[i] += self.grad[i] *
                                     static_cast<T>(dfdx(p.value[i], self.value[i]));
                      }
                    });
}

}  // namespace detail

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
  return detail::unary_op<T>(
      "neg", a, [](T x) { return -x; }, [](T, T) { return -1.0; });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  return detail::unary_op<T>(
      "relu", a, [](T x) { return x > T(0) ? x : T(0); },
      [](T x, T) { return x > T(0) ? 1.0 : 0.0; });  // subgradient 0 at 0
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return detail::unary_op<T>(
      "sigmoid", a,
      [](T x) { return static_cast<T>(1.0 / (1.0 + std::exp(-static_cast<double>(x)))); },
      [](T, T y) {
        const double s = static_cast<double>(y);
        return s * (1.0 - s);
      });
}

template <typename T>
Tensor<T> tanh_op(const Tensor<T>& a) {
  return detail::unary_op<T>(
      "tanh", a, [](T x) { return static_cast<T>(std::tanh(static_cast<double>(x))); },
      [](T, T y) {
        const double t = static_cast<double>(y);
        return 1.0 - t * t;
      });
}

template <typename T>
Tensor<T> abs_op(const Tensor<T>& a) {
  return detail::unary_op<T>(
      "abs", a, [](T x) { return x < T(0) ? -x : x; },
      [](T x, T) { return x > T(0) ? 1.0 : (x < T(0) ? -1.0 : 0.0); });
}

// ---------------------------------------------------------------------------
// Reductions and softmax.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  double acc = 0;
  for (T v : a.values()) acc += static_cast<double>(v);
  const std::size_t n = a.values().size();
  return make_op<T>("sum", {}, {static_cast<T>(acc)}, {a},
                    [n](detail::Node<T>& self) {
                      auto& p = *self.parents[0];
                      if (!p.requires_grad) return;
                      p.ensure_grad();
                      const T g = self.grad[0];
                      for (std::size_t i = 0; i < n; ++i) p.grad[i] += g;
                    });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  double acc = 0;
  for (T v : a.values()) acc += static_cast<double>(v);
  const std::size_t n = a.values().size();
  const double inv = 1.0 / static_cast<double>(n);
  return make_op<T>("mean", {}, {static_cast<T>(acc * inv)}, {a},
                    [n, inv](detail::Node<T>& self) {
                      auto& p = *self.parents[0];
                      if (!p.requires_grad) return;
                      p.ensure_grad();
                      const T g = static_cast<T>(static_cast<double>(self.grad[0]) * inv);
                      for (std::size_t i = 0; i < n; ++i) p.grad[i] += g;
                    });
}

// Softmax along `axis`. Numerically stabilized by the per-slice max.
template <typename T>
Tensor<T> softmax(const Tensor<T>& a, int axis) {
  const Shape& s = a.shape();
  if (axis < 0 || axis >= static_cast<int>(s.size())) {
    throw ShapeError("softmax: axis out of range for shape " + shape_str(s));
  }
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[static_cast<std::size_t>(i)];
  for (int i = axis + 1; i < static_cast<int>(s.size()); ++i) {
    inner *= s[static_cast<std::size_t>(i)];
  }
  const std::int64_t k = s[static_cast<std::size_t>(axis)];
  auto av = a.values();
  std::vector<T> out(av.size());
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t in = 0; in < inner; ++in) {
      const std::int64_t base = o * k * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::int64_t j = 0; j < k; ++j) {
        mx = std::max(mx, static_cast<double>(av[static_cast<std::size_t>(base + j * inner)]));
      }
      double denom = 0;
      for (std::int64_t j = 0; j < k; ++j) {
        const double e = std::exp(static_cast<double>(av[static_cast<std::size_t>(base + j * inner)]) - mx);
        out[static_cast<std::size_t>(base + j * inner)] = static_cast<T>(e);
        denom += e;
      }
      const double norm = 1.0 / denom;
      for (std::int64_t j = 0; j < k; ++j) {
        auto& v = out[static_cast<std::size_t>(base + j * inner)];
        v = static_cast<T>(static_cast<double>(v) * norm);
      }
    }
  }
  return make_op<T>(
      "softmax", s, std::move(out), {a},
      [outer, inner, k](detail::Node<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::int64_t o = 0; o < outer; ++o) {
          for (std::int64_t in = 0; in < inner; ++in) {
            const std::int64_t base = o * k * inner + in;
            double dot = 0;
            for (std::int64_t j = 0; j < k; ++j) {
              const std::size_t idx = static_cast<std::size_t>(base + j * inner);
              dot += static_cast<double>(self.grad[idx]) *
                     static_cast<double>(self.value[idx]);
            }
            for (std::int64_t j = 0; j < k; ++j) {
              const std::size_t idx = static_cast<std::size_t>(base + j * inner);
              p.grad[idx] += static_cast<T>(
                  static_cast<double>(self.value[idx]) *
                  (static_cast<double>(self.grad[idx]) - dot));
            }
          }
        }
      });
}

// Free-function spelling of the reverse sweep.
template <typename T>
void backward(const Tensor<T>& loss) {
  loss.backward();
}

}  // namespace mf
