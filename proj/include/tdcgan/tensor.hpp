#pragma once

// Reverse-mode autodiff tensor engine.
//
// Define-by-run tape: every operation eagerly computes its value and, when
// grad mode is on and an input requires grad, records a backward closure.
// Backward closures are written in terms of the public ops themselves, so
// running the engine with create_graph=true yields gradients that are again
// differentiable (double backward, needed for gradient-norm penalties).
//
// Scalar type is a template parameter: float for training, double for
// finite-difference gradient checking.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace tdcgan {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
// Shape or rank disagreement between tensors.
class ShapeError : public Error {
 public:
  using Error::Error;
};
// Invalid configuration value(s).
class ConfigError : public Error {
 public:
  using Error::Error;
};
// File format / IO problems.
class DataError : public Error {
 public:
  using Error::Error;
};
// NaN/Inf or domain violations in numerical code.
class NumericalError : public Error {
 public:
  using Error::Error;
};

using Shape = std::vector<std::int64_t>;

inline std::int64_t numel_of(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

// ---------------------------------------------------------------------------
// Deterministic RNG. Explicit algorithms (not std distributions) so that a
// seed produces the same stream on every standard library implementation.
// normal() burns two engine draws per call and keeps no cached spare, so the
// engine state alone captures the full RNG state for checkpointing.
// ---------------------------------------------------------------------------
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0x9e3779b97f4a7c15ull) : engine_(seed) {}

  // uniform in [0, 1)
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double normal() {
    // Box-Muller; u1 in (0, 1] keeps the log finite
    double u1 = (static_cast<double>(engine_() >> 11) + 1.0) * 0x1.0p-53;
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
  }

  // integer in [0, n)
  std::uint64_t integer(std::uint64_t n) { return engine_() % n; }

  template <typename V>
  void shuffle(std::vector<V>& v) {
    for (std::size_t i = v.size(); i > 1; --i)
      std::swap(v[i - 1], v[integer(i)]);
  }

  std::string serialize() const {
    std::ostringstream os;
    os << engine_;
    return os.str();
  }

  void deserialize(const std::string& s) {
    std::istringstream is(s);
    is >> engine_;
    if (is.fail()) throw DataError("Rng::deserialize: malformed state string");
  }

 private:
  std::mt19937_64 engine_;
};

// ---------------------------------------------------------------------------
// Autograd mode
// ---------------------------------------------------------------------------
namespace detail {
inline thread_local bool grad_mode_enabled = true;
}

inline bool grad_enabled() { return detail::grad_mode_enabled; }

// RAII switch that disables graph recording in its scope.
struct NoGradGuard {
  NoGradGuard() : prev_(detail::grad_mode_enabled) { detail::grad_mode_enabled = false; }
  ~NoGradGuard() { detail::grad_mode_enabled = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <typename T>
class Tensor;

template <typename T>
struct Node : std::enable_shared_from_this<Node<T>> {
  Shape shape;
  std::vector<T> values;
  bool requires_grad = false;
  bool leaf = true;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node<T>>> parents;
  // Maps (self output, upstream grad) to per-parent grads. Entries for
  // parents that do not require grad may be left undefined.
  std::function<std::vector<Tensor<T>>(const Tensor<T>&, const Tensor<T>&)> vjp;
  std::shared_ptr<Node<T>> grad;  // leaf accumulation buffer
};

// Tensor: shared handle to a node in the tape. Values are immutable once an
// op has consumed them; parameter updates happen between steps, when the
// previous step's graph is gone.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  static Tensor from_node(std::shared_ptr<Node<T>> n) {
    Tensor t;
    t.node_ = std::move(n);
    return t;
  }

  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
    validate_shape(shape);
    if (numel_of(shape) != static_cast<std::int64_t>(values.size()))
      throw ShapeError("Tensor::from: shape " + shape_str(shape) + " wants " +
                       std::to_string(numel_of(shape)) + " values, got " +
                       std::to_string(values.size()));
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->values = std::move(values);
    n->requires_grad = requires_grad;
    return from_node(std::move(n));
  }

  static Tensor full(Shape shape, T v, bool requires_grad = false) {
    validate_shape(shape);
    std::vector<T> vals(static_cast<std::size_t>(numel_of(shape)), v);
    return from(std::move(shape), std::move(vals), requires_grad);
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), T(0), requires_grad);
  }

  static Tensor scalar(T v, bool requires_grad = false) {
    return from({1}, {v}, requires_grad);
  }

  // uniform in [lo, hi)
  static Tensor uniform(Shape shape, Rng& rng, double lo, double hi,
                        bool requires_grad = false) {
    validate_shape(shape);
    std::vector<T> vals(static_cast<std::size_t>(numel_of(shape)));
    for (auto& v : vals) v = static_cast<T>(rng.uniform(lo, hi));
    return from(std::move(shape), std::move(vals), requires_grad);
  }

  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0,
                      bool requires_grad = false) {
    validate_shape(shape);
    std::vector<T> vals(static_cast<std::size_t>(numel_of(shape)));
    for (auto& v : vals) v = static_cast<T>(rng.normal() * stddev);
    return from(std::move(shape), std::move(vals), requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return n().shape; }
  std::int64_t numel() const { return static_cast<std::int64_t>(n().values.size()); }
  std::int64_t dim(std::size_t i) const { return n().shape[i]; }
  std::size_t rank() const { return n().shape.size(); }

  std::span<T> values() { return n().values; }
  std::span<const T> values() const { return n().values; }

  T item() const {
    if (numel() != 1)
      throw ShapeError("item: tensor " + shape_str(shape()) + " is not a scalar");
    return node_->values[0];
  }

  bool requires_grad() const { return n().requires_grad; }

  Tensor& set_requires_grad(bool rg) {
    if (!n().leaf)
      throw Error("set_requires_grad: only valid on leaf tensors");
    node_->requires_grad = rg;
    return *this;
  }

  bool is_leaf() const { return n().leaf; }
  const char* op() const { return n().op; }
  std::size_t num_parents() const { return n().parents.size(); }
  Tensor parent(std::size_t i) const { return from_node(n().parents[i]); }

  // Leaf gradient buffer; undefined until backward() has reached this leaf.
  Tensor grad() const {
    return node_->grad ? from_node(node_->grad) : Tensor();
  }

  void zero_grad() {
    if (node_->grad) std::fill(node_->grad->values.begin(), node_->grad->values.end(), T(0));
  }

  void accumulate_grad(std::span<const T> g) {
    if (!node_->grad) {
      node_->grad = std::make_shared<Node<T>>();
      node_->grad->shape = node_->shape;
      node_->grad->values.assign(node_->values.size(), T(0));
    }
    auto& buf = node_->grad->values;
    for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += g[i];
  }

  Node<T>* node() const { return node_.get(); }
  std::shared_ptr<Node<T>> node_ptr() const { return node_; }

 private:
  Node<T>& n() const {
    if (!node_) throw Error("use of undefined tensor");
    return *node_;
  }

  static void validate_shape(const Shape& s) {
    for (auto d : s)
      if (d <= 0)
        throw ShapeError("tensor shape " + shape_str(s) + " has a non-positive extent");
  }

  std::shared_ptr<Node<T>> node_;
};

template <typename T>
bool all_finite(const Tensor<T>& t) {
  for (T v : t.values())
    if (!std::isfinite(static_cast<double>(v))) return false;
  return true;
}

template <typename T>
void check_finite(const Tensor<T>& t, const char* context) {
  if (!all_finite(t))
    throw NumericalError(std::string(context) + ": non-finite value detected");
}

// ---------------------------------------------------------------------------
// Op recording
// ---------------------------------------------------------------------------
namespace detail {

template <typename T>
using VjpFn = std::function<std::vector<Tensor<T>>(const Tensor<T>&, const Tensor<T>&)>;

template <typename T>
Tensor<T> make_op(const char* name, Shape shape, std::vector<T> values,
                  std::initializer_list<Tensor<T>> parents, VjpFn<T> vjp) {
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->values = std::move(values);
  if (grad_mode_enabled) {
    bool needs = false;
    for (const auto& p : parents) needs = needs || p.requires_grad();
    if (needs) {
      n->requires_grad = true;
      n->leaf = false;
      n->op = name;
      n->parents.reserve(parents.size());
      for (const auto& p : parents) n->parents.push_back(p.node_ptr());
      n->vjp = std::move(vjp);
    }
  }
  return Tensor<T>::from_node(std::move(n));
}

template <typename T>
void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("add", a, b);
  std::vector<T> out(a.values().begin(), a.values().end());
  auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return detail::make_op<T>(
      "add", a.shape(), std::move(out), {a, b},
      [](const Tensor<T>& self, const Tensor<T>& g) -> std::vector<Tensor<T>> {
        (void)self;
        return {g, g};
      });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("sub", a, b);
  std::vector<T> out(a.values().begin(), a.values().end());
  auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return detail::make_op<T>(
      "sub", a.shape(), std::move(out), {a, b},
      [](const Tensor<T>& self, const Tensor<T>& g) -> std::vector<Tensor<T>> {
        (void)self;
        return {g, neg(g)};
      });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("mul", a, b);
  std::vector<T> out(a.values().begin(), a.values().end());
  auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return detail::make_op<T>(
      "mul", a.shape(), std::move(out), {a, b},
      [](const Tensor<T>& self, const Tensor<T>& g) -> std::vector<Tensor<T>> {
        Tensor<T> ga, gb;
        if (self.parent(0).requires_grad()) ga = mul(g, self.parent(1));
        if (self.parent(1).requires_grad()) gb = mul(g, self.parent(0));
        return {ga, gb};
      });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("div", a, b);
  std::vector<T> out(a.values().begin(), a.values().end());
  auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] /= bv[i];
  return detail::make_op<T>(
      "div", a.shape(), std::move(out), {a, b},
      [](const Tensor<T>& self, const Tensor<T>& g) -> std::vector<Tensor<T>> {
        Tensor<T> ga, gb;
        if (self.parent(0).requires_grad()) ga = div(g, self.parent(1));
        if (self.parent(1).requires_grad())
          gb = neg(div(mul(g, self), self.parent(1)));
        return {ga, gb};
      });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
  std::vector<T> out(a.values().begin(), a.values().end());
  for (auto& v : out) v = -v;
  return detail::make_op<T>(
      "neg", a.shape(), std::move(out), {a},
      [](const Tensor<T>&, const Tensor<T>& g) -> std::vector<Tensor<T>> {
        return {neg(g)};
      });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c) {
  std::vector<T> out(a.values().begin(), a.values().end());
  for (auto& v : out) v *= c;
  return detail::make_op<T>(
      "scale", a.shape(), std::move(out), {a},
      [c](const Tensor<T>&, const Tensor<T>& g) -> std::vector<Tensor<T>> {
        return {scale(g, c)};
      });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
  std::vector<T> out(a.values().begin(), a.values().end());
  for (auto& v : out) v += c;
  return detail::make_op<T>(
      "add_scalar", a.shape(), std::move(out), {a},
      [](const Tensor<T>&, const Tensor<T>& g) -> std::vector<Tensor<T>> {
        return {g};
      });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  std::vector<T> out(a.values().begin(), a.values().end());
  for (auto& v : out) v = v > T(0) ? v : T(0);
  return detail::make_op<T>(
      "relu", a.shape(), std::move(out), {a},
      [](const Tensor<T>& self, const Tensor<T>& g) -> std::vector<Tensor<T>> {
        auto x = self.parent(0);
        std::vector<T> mask(x.values().begin(), x.values().end());
        for (auto& v : mask) v = v > T(0) ? T(1) : T(0);
        return {mul(g, Tensor<T>::from(x.shape(), std::move(mask)))};
      });
}

template <typename T>
Tensor<T> abs(const Tensor<T>& a) {
  std::vector<T> out(a.values().begin(), a.values().end());
  for (auto& v : out) v = std::abs(v);
  return detail::make_op<T>(
      "abs", a.shape(), std::move(out), {a},
      [](const Tensor<T>& self, const Tensor<T>& g) -> std::vector<Tensor<T>> {
        auto x = self.parent(0);
        std::vector<T> sgn(x.values().begin(), x.values().end());
        for (auto& v : sgn) v = v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0));
        return {mul(g, Tensor<T>::from(x.shape(), std::move(sgn)))};
      });
}

template <typename T>
Tensor<T> square(const Tensor<T>& a) {
  std::vector<T> out(a.values().begin(), a.values().end());
  for (auto& v : out) v *= v;
  return detail::make_op<T>(
      "square", a.shape(), std::move(out), {a},
      [](const Tensor<T>& self, const Tensor<T>& g) -> std::vector<Tensor<T>> {
        return {scale(mul(g, self.parent(0)), T(2))};
      });
}

template <typename T>
Tensor<T> sqrt(const Tensor<T>& a) {
  std::vector<T> out(a.values().begin(), a.values().end());
  for (auto& v : out) {
    if (v < T(0)) throw NumericalError("sqrt: negative input");
    v = std::sqrt(v);
  }
  return detail::make_op<T>(
      "sqrt", a.shape(), std::move(out), {a},
      [](const Tensor<T>& self, const Tensor<T>& g) -> std::vector<Tensor<T>> {
        return {scale(div(g, self), T(0.5))};
      });
}

template <typename T>
Tensor<T> log10(const Tensor<T>& a) {
  std::vector<T> out(a.values().begin(), a.values().end());
  for (auto& v : out) {
    if (!(v > T(0))) throw NumericalError("log10: non-positive input");
    v = std::log10(v);
  }
  constexpr T inv_ln10 = T(0.43429448190325182765);
  return detail::make_op<T>(
      "log10", a.shape(), std::move(out), {a},
      [inv_ln10](const Tensor<T>& self, const Tensor<T>& g) -> std::vector<Tensor<T>> {
        return {scale(div(g, self.parent(0)), inv_ln10)};
      });
}

// operator sugar used by model and loss code
template <typename T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <typename T>
Tensor<T> operator-(const Tensor<T>& a) { return neg(a); }

// ---------------------------------------------------------------------------
// Reductions and broadcasts. Reductions accumulate in double regardless of T
// so the float build keeps stable sums over long axes.
// ---------------------------------------------------------------------------
template <typename T>
Tensor<T> sum_all(const Tensor<T>& a) {
  double acc = 0.0;
  for (T v : a.values()) acc += static_cast<double>(v);
  return detail::make_op<T>(
      "sum_all", {1}, {static_cast<T>(acc)}, {a},
      [](const Tensor<T>& self, const Tensor<T>& g) -> std::vector<Tensor<T>> {
        return {expand_scalar(g, self.parent(0).shape())};
      });
}

template <typename T>
Tensor<T> expand_scalar(const Tensor<T>& s, const Shape& shape) {
  if (s.numel() != 1)
    throw ShapeError("expand_scalar: source " + shape_str(s.shape()) + " is not a scalar");
  std::vector<T> out(static_cast<std::size_t>(numel_of(shape)), s.values()[0]);
  return detail::make_op<T>(
      "expand_scalar", shape, std::move(out), {s},
      [](const Tensor<T>&, const Tensor<T>& g) -> std::vector<Tensor<T>> {
        return {sum_all(g)};
      });
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& a) {
  if (a.numel() == 0) throw ShapeError("mean_all: empty tensor");
  return scale(sum_all(a), T(1) / static_cast<T>(a.numel()));
}

namespace detail {
// [B,C,L] -> (B, C, L); [C,L] -> (1, C, L). Parameter tensors use [C].
template <typename T>
void split_bcl(const char* op, const Tensor<T>& t, std::int64_t& B, std::int64_t& C,
               std::int64_t& L) {
  if (t.rank() == 3) {
    B = t.dim(0); C = t.dim(1); L = t.dim(2);
  } else if (t.rank() == 2) {
    B = 1; C = t.dim(0); L = t.dim(1);
  } else {
    throw ShapeError(std::string(op) + ": expected rank 2 or 3 tensor, got " +
                     shape_str(t.shape()));
  }
}
}  // namespace detail

// Sum over the trailing (length) axis: [B,C,L] -> [B,C], [C,L] -> [C].
template <typename T>
Tensor<T> reduce_length(const Tensor<T>& a) {
  std::int64_t B, C, L;
  detail::split_bcl("reduce_length", a, B, C, L);
  Shape oshape = a.rank() == 3 ? Shape{B, C} : Shape{C};
  std::vector<T> out(static_cast<std::size_t>(B * C));
  auto av = a.values();
  for (std::int64_t r = 0; r < B * C; ++r) {
    double acc = 0.0;
    const T* row = av.data() + r * L;
    for (std::int64_t l = 0; l < L; ++l) acc += static_cast<double>(row[l]);
    out[static_cast<std::size_t>(r)] = static_cast<T>(acc);
  }
  std::int64_t len = L;
  return detail::make_op<T>(
      "reduce_length", std::move(oshape), std::move(out), {a},
      [len](const Tensor<T>&, const Tensor<T>& g) -> std::vector<Tensor<T>> {
        return {expand_length(g, len)};
      });
}

// Repeat along a new trailing axis: [B,C] -> [B,C,L], [C] -> [C,L].
template <typename T>
Tensor<T> expand_length(const Tensor<T>& a, std::int64_t L) {
  Shape oshape = a.shape();
  oshape.push_back(L);
  std::vector<T> out(static_cast<std::size_t>(a.numel() * L));
  auto av = a.values();
  for (std::int64_t r = 0; r < a.numel(); ++r)
    for (std::int64_t l = 0; l < L; ++l) out[static_cast<std::size_t>(r * L + l)] = av[r];
  return detail::make_op<T>(
      "expand_length", std::move(oshape), std::move(out), {a},
      [](const Tensor<T>&, const Tensor<T>& g) -> std::vector<Tensor<T>> {
        return {reduce_length(g)};
      });
}

// Sum a [B,C,L] (or [C,L]) map over everything except the channel axis -> [C].
template <typename T>
Tensor<T> reduce_channel(const Tensor<T>& a) {
  std::int64_t B, C, L;
  detail::split_bcl("reduce_channel", a, B, C, L);
  std::vector<T> out(static_cast<std::size_t>(C));
  auto av = a.values();
  for (std::int64_t c = 0; c < C; ++c) {
    double acc = 0.0;
    for (std::int64_t b = 0; b < B; ++b) {
      const T* row = av.data() + (b * C + c) * L;
      for (std::int64_t l = 0; l < L; ++l) acc += static_cast<double>(row[l]);
    }
    out[static_cast<std::size_t>(c)] = static_cast<T>(acc);
  }
  return detail::make_op<T>(
      "reduce_channel", {C}, std::move(out), {a},
      [](const Tensor<T>& self, const Tensor<T>& g) -> std::vector<Tensor<T>> {
        return {expand_channel(g, self.parent(0).shape())};
      });
}

// Broadcast a per-channel vector [C] over a [B,C,L] (or [C,L]) map.
template <typename T>
Tensor<T> expand_channel(const Tensor<T>& v, const Shape& like) {
  if (v.rank() != 1)
    throw ShapeError("expand_channel: want rank-1 source, got " + shape_str(v.shape()));
  std::int64_t B = 1, C, L;
  if (like.size() == 3) {
    B = like[0]; C = like[1]; L = like[2];
  } else if (like.size() == 2) {
    C = like[0]; L = like[1];
  } else {
    throw ShapeError("expand_channel: target must be rank 2 or 3, got " + shape_str(like));
  }
  if (v.dim(0) != C)
    throw ShapeError("expand_channel: channel count " + shape_str(v.shape()) +
                     " does not match target " + shape_str(like));
  std::vector<T> out(static_cast<std::size_t>(B * C * L));
  auto vv = v.values();
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t c = 0; c < C; ++c) {
      T* row = out.data() + (b * C + c) * L;
      for (std::int64_t l = 0; l < L; ++l) row[l] = vv[c];
    }
  return detail::make_op<T>(
      "expand_channel", like, std::move(out), {v},
      [](const Tensor<T>&, const Tensor<T>& g) -> std::vector<Tensor<T>> {
        return {reduce_channel(g)};
      });
}

// Sum a [N,F] matrix over rows -> [F].
template <typename T>
Tensor<T> reduce_rows(const Tensor<T>& a) {
  if (a.rank() != 2)
    throw ShapeError("reduce_rows: want rank-2 input, got " + shape_str(a.shape()));
  std::int64_t N = a.dim(0), F = a.dim(1);
  std::vector<T> out(static_cast<std::size_t>(F));
  auto av = a.values();
  for (std::int64_t f = 0; f < F; ++f) {
    double acc = 0.0;
    for (std::int64_t n = 0; n < N; ++n) acc += static_cast<double>(av[n * F + f]);
    out[static_cast<std::size_t>(f)] = static_cast<T>(acc);
  }
  return detail::make_op<T>(
      "reduce_rows", {F}, std::move(out), {a},
      [](const Tensor<T>& self, const Tensor<T>& g) -> std::vector<Tensor<T>> {
        return {expand_rows(g, self.parent(0).dim(0))};
      });
}

// Repeat a [F] vector over N rows -> [N,F].
template <typename T>
Tensor<T> expand_rows(const Tensor<T>& v, std::int64_t N) {
  if (v.rank() != 1)
    throw ShapeError("expand_rows: want rank-1 source, got " + shape_str(v.shape()));
  std::int64_t F = v.dim(0);
  std::vector<T> out(static_cast<std::size_t>(N * F));
  auto vv = v.values();
  for (std::int64_t n = 0; n < N; ++n)
    std::copy(vv.begin(), vv.end(), out.begin() + n * F);
  return detail::make_op<T>(
      "expand_rows", {N, F}, std::move(out), {v},
      [](const Tensor<T>&, const Tensor<T>& g) -> std::vector<Tensor<T>> {
        return {reduce_rows(g)};
      });
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------
template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (numel_of(shape) != a.numel())
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                     shape_str(shape));
  std::vector<T> out(a.values().begin(), a.values().end());
  return detail::make_op<T>(
      "reshape", std::move(shape), std::move(out), {a},
      [](const Tensor<T>& self, const Tensor<T>& g) -> std::vector<Tensor<T>> {
        return {reshape(g, self.parent(0).shape())};
      });
}

template <typename T>
Tensor<T> transpose2d(const Tensor<T>& a) {
  if (a.rank() != 2)
    throw ShapeError("transpose2d: want rank-2 input, got " + shape_str(a.shape()));
  std::int64_t R = a.dim(0), C = a.dim(1);
  std::vector<T> out(static_cast<std::size_t>(R * C));
  auto av = a.values();
  for (std::int64_t r = 0; r < R; ++r)
    for (std::int64_t c = 0; c < C; ++c) out[c * R + r] = av[r * C + c];
  return detail::make_op<T>(
      "transpose2d", {C, R}, std::move(out), {a},
      [](const Tensor<T>&, const Tensor<T>& g) -> std::vector<Tensor<T>> {
        return {transpose2d(g)};
      });
}

// Stack two [B,L] waveforms as a [B,2,L] feature map (channel 0 = a).
template <typename T>
Tensor<T> stack_channels(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("stack_channels", a, b);
  if (a.rank() != 2)
    throw ShapeError("stack_channels: want rank-2 inputs, got " + shape_str(a.shape()));
  std::int64_t B = a.dim(0), L = a.dim(1);
  std::vector<T> out(static_cast<std::size_t>(B * 2 * L));
  auto av = a.values(), bv = b.values();
  for (std::int64_t i = 0; i < B; ++i) {
    std::copy(av.begin() + i * L, av.begin() + (i + 1) * L, out.begin() + (i * 2) * L);
    std::copy(bv.begin() + i * L, bv.begin() + (i + 1) * L, out.begin() + (i * 2 + 1) * L);
  }
  return detail::make_op<T>(
      "stack_channels", {B, 2, L}, std::move(out), {a, b},
      [](const Tensor<T>&, const Tensor<T>& g) -> std::vector<Tensor<T>> {
        return {select_channel(g, 0), select_channel(g, 1)};
      });
}

// Pull one channel out of a [B,C,L] map -> [B,L].
template <typename T>
Tensor<T> select_channel(const Tensor<T>& a, std::int64_t c) {
  if (a.rank() != 3)
    throw ShapeError("select_channel: want rank-3 input, got " + shape_str(a.shape()));
  std::int64_t B = a.dim(0), C = a.dim(1), L = a.dim(2);
  if (c < 0 || c >= C) throw ShapeError("select_channel: channel index out of range");
  std::vector<T> out(static_cast<std::size_t>(B * L));
  auto av = a.values();
  for (std::int64_t b = 0; b < B; ++b)
    std::copy(av.begin() + (b * C + c) * L, av.begin() + (b * C + c + 1) * L,
              out.begin() + b * L);
  return detail::make_op<T>(
      "select_channel", {B, L}, std::move(out), {a},
      [c](const Tensor<T>& self, const Tensor<T>& g) -> std::vector<Tensor<T>> {
        return {channel_embed(g, c, self.parent(0).dim(1))};
      });
}

// Place a [B,L] map into channel c of an otherwise-zero [B,C,L] map.
template <typename T>
Tensor<T> channel_embed(const Tensor<T>& a, std::int64_t c, std::int64_t C) {
  if (a.rank() != 2)
    throw ShapeError("channel_embed: want rank-2 input, got " + shape_str(a.shape()));
  std::int64_t B = a.dim(0), L = a.dim(1);
  std::vector<T> out(static_cast<std::size_t>(B * C * L), T(0));
  auto av = a.values();
  for (std::int64_t b = 0; b < B; ++b)
    std::copy(av.begin() + b * L, av.begin() + (b + 1) * L, out.begin() + (b * C + c) * L);
  return detail::make_op<T>(
      "channel_embed", {B, C, L}, std::move(out), {a},
      [c](const Tensor<T>&, const Tensor<T>& g) -> std::vector<Tensor<T>> {
        return {select_channel(g, c)};
      });
}

// ---------------------------------------------------------------------------
// Convolution. Bilinear in (input, weight); forward, input-grad and
// weight-grad form a closed triple under differentiation, which is what makes
// the gradient-norm penalties twice differentiable.
// ---------------------------------------------------------------------------
struct ConvMeta {
  std::int64_t stride = 1;
  std::int64_t dilation = 1;
  std::int64_t padding = 0;
  std::int64_t groups = 1;
};

inline std::int64_t conv_out_len(std::int64_t L, std::int64_t K, const ConvMeta& m) {
  return (L + 2 * m.padding - m.dilation * (K - 1) - 1) / m.stride + 1;
}

namespace detail {

// y[b,co,t] = sum_{cig,k} w[co,cig,k] * x[b, gbase+cig, t*s - p + k*d]
template <typename T>
void conv_forward_kernel(const T* x, const T* w, T* y, std::int64_t B, std::int64_t Cin,
                         std::int64_t L, std::int64_t Cout, std::int64_t K,
                         std::int64_t Lout, const ConvMeta& m) {
  const std::int64_t cg = Cin / m.groups;  // input channels per group
  const std::int64_t og = Cout / m.groups; // output channels per group
  if (K == 1 && m.stride == 1 && m.padding == 0 && m.dilation == 1) {
    // pointwise: per output row, accumulate scaled input rows
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t co = 0; co < Cout; ++co) {
        T* yr = y + (b * Cout + co) * Lout;
        std::fill(yr, yr + Lout, T(0));
        const std::int64_t gbase = (co / og) * cg;
        for (std::int64_t ci = 0; ci < cg; ++ci) {
          const T wv = w[co * cg + ci];
          const T* xr = x + (b * Cin + gbase + ci) * L;
          for (std::int64_t l = 0; l < L; ++l) yr[l] += wv * xr[l];
        }
      }
    return;
  }
  const std::int64_t t_lo = std::min(Lout, (m.padding + m.stride - 1) / m.stride);
  std::int64_t t_hi = Lout;  // first t whose window leaves the right edge
  {
    const std::int64_t last = L - 1 - m.dilation * (K - 1) + m.padding;
    t_hi = last < 0 ? t_lo : std::min(Lout, last / m.stride + 1);
    if (t_hi < t_lo) t_hi = t_lo;
  }
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t co = 0; co < Cout; ++co) {
      const std::int64_t gbase = (co / og) * cg;
      const T* wrow = w + co * cg * K;
      T* yr = y + (b * Cout + co) * Lout;
      for (std::int64_t t = 0; t < Lout; ++t) {
        T acc = T(0);
        const std::int64_t j0 = t * m.stride - m.padding;
        if (t >= t_lo && t < t_hi) {
          for (std::int64_t ci = 0; ci < cg; ++ci) {
            const T* xr = x + (b * Cin + gbase + ci) * L + j0;
            const T* wk = wrow + ci * K;
            for (std::int64_t k = 0; k < K; ++k) acc += wk[k] * xr[k * m.dilation];
          }
        } else {
          for (std::int64_t ci = 0; ci < cg; ++ci) {
            const T* xr = x + (b * Cin + gbase + ci) * L;
            const T* wk = wrow + ci * K;
            for (std::int64_t k = 0; k < K; ++k) {
              const std::int64_t j = j0 + k * m.dilation;
              if (j >= 0 && j < L) acc += wk[k] * xr[j];
            }
          }
        }
        yr[t] = acc;
      }
    }
}

// xg[b,ci,j] += sum over (co,k,t) with t*s - p + k*d == j of g[b,co,t]*w[co,cig,k]
template <typename T>
void conv_input_grad_kernel(const T* g, const T* w, T* xg, std::int64_t B,
                            std::int64_t Cin, std::int64_t L, std::int64_t Cout,
                            std::int64_t K, std::int64_t Lout, const ConvMeta& m) {
  const std::int64_t cg = Cin / m.groups;
  const std::int64_t og = Cout / m.groups;
  std::fill(xg, xg + B * Cin * L, T(0));
  if (K == 1 && m.stride == 1 && m.padding == 0 && m.dilation == 1) {
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t co = 0; co < Cout; ++co) {
        const std::int64_t gbase = (co / og) * cg;
        const T* gr = g + (b * Cout + co) * Lout;
        for (std::int64_t ci = 0; ci < cg; ++ci) {
          const T wv = w[co * cg + ci];
          T* xr = xg + (b * Cin + gbase + ci) * L;
          for (std::int64_t l = 0; l < L; ++l) xr[l] += wv * gr[l];
        }
      }
    return;
  }
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t co = 0; co < Cout; ++co) {
      const std::int64_t gbase = (co / og) * cg;
      const T* wrow = w + co * cg * K;
      const T* gr = g + (b * Cout + co) * Lout;
      for (std::int64_t t = 0; t < Lout; ++t) {
        const T gv = gr[t];
        if (gv == T(0)) continue;
        const std::int64_t j0 = t * m.stride - m.padding;
        for (std::int64_t ci = 0; ci < cg; ++ci) {
          T* xr = xg + (b * Cin + gbase + ci) * L;
          const T* wk = wrow + ci * K;
          for (std::int64_t k = 0; k < K; ++k) {
            const std::int64_t j = j0 + k * m.dilation;
            if (j >= 0 && j < L) xr[j] += gv * wk[k];
          }
        }
      }
    }
}

// wg[co,cig,k] = sum_{b,t} g[b,co,t] * x[b, gbase+cig, t*s - p + k*d]
template <typename T>
void conv_weight_grad_kernel(const T* g, const T* x, T* wg, std::int64_t B,
                             std::int64_t Cin, std::int64_t L, std::int64_t Cout,
                             std::int64_t K, std::int64_t Lout, const ConvMeta& m) {
  const std::int64_t cg = Cin / m.groups;
  const std::int64_t og = Cout / m.groups;
  if (K == 1 && m.stride == 1 && m.padding == 0 && m.dilation == 1) {
    for (std::int64_t co = 0; co < Cout; ++co) {
      const std::int64_t gbase = (co / og) * cg;
      for (std::int64_t ci = 0; ci < cg; ++ci) {
        double acc = 0.0;
        for (std::int64_t b = 0; b < B; ++b) {
          const T* gr = g + (b * Cout + co) * Lout;
          const T* xr = x + (b * Cin + gbase + ci) * L;
          for (std::int64_t l = 0; l < L; ++l)
            acc += static_cast<double>(gr[l]) * static_cast<double>(xr[l]);
        }
        wg[co * cg + ci] = static_cast<T>(acc);
      }
    }
    return;
  }
  for (std::int64_t co = 0; co < Cout; ++co) {
    const std::int64_t gbase = (co / og) * cg;
    for (std::int64_t ci = 0; ci < cg; ++ci)
      for (std::int64_t k = 0; k < K; ++k) {
        double acc = 0.0;
        for (std::int64_t b = 0; b < B; ++b) {
          const T* gr = g + (b * Cout + co) * Lout;
          const T* xr = x + (b * Cin + gbase + ci) * L;
          for (std::int64_t t = 0; t < Lout; ++t) {
            const std::int64_t j = t * m.stride - m.padding + k * m.dilation;
            if (j >= 0 && j < L) acc += static_cast<double>(gr[t]) * static_cast<double>(xr[j]);
          }
        }
        wg[(co * cg + ci) * K + k] = static_cast<T>(acc);
      }
  }
}

}  // namespace detail

template <typename T>
Tensor<T> conv_input_grad(const Tensor<T>& g, const Tensor<T>& w, ConvMeta m,
                          std::int64_t Lin);
template <typename T>
Tensor<T> conv_weight_grad(const Tensor<T>& g, const Tensor<T>& x, ConvMeta m,
                           std::int64_t K);

// Raw (bias-free) convolution: x [B,Cin,L], w [Cout, Cin/groups, K].
template <typename T>
Tensor<T> conv_raw(const Tensor<T>& x, const Tensor<T>& w, ConvMeta m) {
  const std::int64_t B = x.dim(0), Cin = x.dim(1), L = x.dim(2);
  const std::int64_t Cout = w.dim(0), K = w.dim(2);
  const std::int64_t Lout = conv_out_len(L, K, m);
  std::vector<T> out(static_cast<std::size_t>(B * Cout * Lout));
  detail::conv_forward_kernel(x.values().data(), w.values().data(), out.data(), B, Cin,
                              L, Cout, K, Lout, m);
  return detail::make_op<T>(
      "conv", {B, Cout, Lout}, std::move(out), {x, w},
      [m](const Tensor<T>& self, const Tensor<T>& g) -> std::vector<Tensor<T>> {
        auto x_ = self.parent(0);
        auto w_ = self.parent(1);
        Tensor<T> gx, gw;
        if (x_.requires_grad()) gx = conv_input_grad(g, w_, m, x_.dim(2));
        if (w_.requires_grad()) gw = conv_weight_grad(g, x_, m, w_.dim(2));
        return {gx, gw};
      });
}

// Adjoint of conv_raw in its input: g [B,Cout,Lout], w as above -> [B,Cin,Lin].
template <typename T>
Tensor<T> conv_input_grad(const Tensor<T>& g, const Tensor<T>& w, ConvMeta m,
                          std::int64_t Lin) {
  const std::int64_t B = g.dim(0), Cout = g.dim(1), Lout = g.dim(2);
  const std::int64_t K = w.dim(2);
  const std::int64_t Cin = w.dim(1) * m.groups;
  std::vector<T> out(static_cast<std::size_t>(B * Cin * Lin));
  detail::conv_input_grad_kernel(g.values().data(), w.values().data(), out.data(), B,
                                 Cin, Lin, Cout, K, Lout, m);
  return detail::make_op<T>(
      "conv_input_grad", {B, Cin, Lin}, std::move(out), {g, w},
      [m](const Tensor<T>& self, const Tensor<T>& u) -> std::vector<Tensor<T>> {
        auto g_ = self.parent(0);
        auto w_ = self.parent(1);
        Tensor<T> gg, gw;
        if (g_.requires_grad()) gg = conv_raw(u, w_, m);
        if (w_.requires_grad()) gw = conv_weight_grad(g_, u, m, w_.dim(2));
        return {gg, gw};
      });
}

// Adjoint of conv_raw in its weight: g [B,Cout,Lout], x [B,Cin,L] -> weight shape.
template <typename T>
Tensor<T> conv_weight_grad(const Tensor<T>& g, const Tensor<T>& x, ConvMeta m,
                           std::int64_t K) {
  const std::int64_t B = g.dim(0), Cout = g.dim(1), Lout = g.dim(2);
  const std::int64_t Cin = x.dim(1), L = x.dim(2);
  const std::int64_t cg = Cin / m.groups;
  std::vector<T> out(static_cast<std::size_t>(Cout * cg * K));
  detail::conv_weight_grad_kernel(g.values().data(), x.values().data(), out.data(), B,
                                  Cin, L, Cout, K, Lout, m);
  (void)Lout;
  return detail::make_op<T>(
      "conv_weight_grad", {Cout, cg, K}, std::move(out), {g, x},
      [m, K](const Tensor<T>& self, const Tensor<T>& u) -> std::vector<Tensor<T>> {
        auto g_ = self.parent(0);
        auto x_ = self.parent(1);
        Tensor<T> gg, gx;
        if (g_.requires_grad()) gg = conv_raw(x_, u, m);
        if (x_.requires_grad()) gx = conv_input_grad(g_, u, m, x_.dim(2));
        return {gg, gx};
      });
}

// Public 1-D convolution with bias and precondition checks. Accepts [Cin,L]
// or [B,Cin,L]; depthwise mode is groups == Cin.
template <typename T>
Tensor<T> conv1d(const Tensor<T>& input, const Tensor<T>& weight,
                 const Tensor<T>& bias = {}, std::int64_t stride = 1,
                 std::int64_t dilation = 1, std::int64_t padding = 0,
                 std::int64_t groups = 1) {
  if (weight.rank() != 3)
    throw ShapeError("conv1d: weight must be [Cout x Cin/groups x K], got " +
                     shape_str(weight.shape()));
  const bool batched = input.rank() == 3;
  if (!batched && input.rank() != 2)
    throw ShapeError("conv1d: input must be [Cin x L] or [B x Cin x L], got " +
                     shape_str(input.shape()));
  Tensor<T> x = batched ? input
                        : reshape(input, {1, input.dim(0), input.dim(1)});
  const std::int64_t Cin = x.dim(1), L = x.dim(2);
  const std::int64_t Cout = weight.dim(0), K = weight.dim(2);
  if (stride < 1 || dilation < 1 || padding < 0 || groups < 1)
    throw ConfigError("conv1d: stride/dilation must be >= 1, padding >= 0");
  if (Cin % groups != 0 || Cout % groups != 0)
    throw ShapeError("conv1d: channels not divisible by groups: input " +
                     shape_str(input.shape()) + ", weight " + shape_str(weight.shape()) +
                     ", groups " + std::to_string(groups));
  if (weight.dim(1) != Cin / groups)
    throw ShapeError("conv1d: weight " + shape_str(weight.shape()) +
                     " does not match input " + shape_str(input.shape()) + " with groups " +
                     std::to_string(groups));
  ConvMeta m{stride, dilation, padding, groups};
  if (L + 2 * padding < dilation * (K - 1) + 1 || conv_out_len(L, K, m) < 1)
    throw ShapeError("conv1d: input length " + std::to_string(L) + " too short for kernel " +
                     std::to_string(K) + " (dilation " + std::to_string(dilation) +
                     ", padding " + std::to_string(padding) + ")");
  Tensor<T> y = conv_raw(x, weight, m);
  if (bias.defined()) {
    if (bias.rank() != 1 || bias.dim(0) != Cout)
      throw ShapeError("conv1d: bias " + shape_str(bias.shape()) +
                       " does not match Cout " + std::to_string(Cout));
    y = add(y, expand_channel(bias, y.shape()));
  }
  return batched ? y : reshape(y, {Cout, y.dim(2)});
}

// ---------------------------------------------------------------------------
// Linear (affine map over the trailing axis)
// ---------------------------------------------------------------------------
template <typename T>
Tensor<T> linear_weight_grad(const Tensor<T>& g, const Tensor<T>& x);

// x [N,Fi], w [Fo,Fi] -> [N,Fo], no bias.
template <typename T>
Tensor<T> linear_raw(const Tensor<T>& x, const Tensor<T>& w) {
  const std::int64_t N = x.dim(0), Fi = x.dim(1), Fo = w.dim(0);
  std::vector<T> out(static_cast<std::size_t>(N * Fo));
  auto xv = x.values();
  auto wv = w.values();
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t fo = 0; fo < Fo; ++fo) {
      const T* xr = xv.data() + n * Fi;
      const T* wr = wv.data() + fo * Fi;
      T acc = T(0);
      for (std::int64_t fi = 0; fi < Fi; ++fi) acc += xr[fi] * wr[fi];
      out[static_cast<std::size_t>(n * Fo + fo)] = acc;
    }
  return detail::make_op<T>(
      "linear", {N, Fo}, std::move(out), {x, w},
      [](const Tensor<T>& self, const Tensor<T>& g) -> std::vector<Tensor<T>> {
        auto x_ = self.parent(0);
        auto w_ = self.parent(1);
        Tensor<T> gx, gw;
        if (x_.requires_grad()) gx = linear_raw(g, transpose2d(w_));
        if (w_.requires_grad()) gw = linear_weight_grad(g, x_);
        return {gx, gw};
      });
}

// wg[fo,fi] = sum_n g[n,fo] * x[n,fi]
template <typename T>
Tensor<T> linear_weight_grad(const Tensor<T>& g, const Tensor<T>& x) {
  const std::int64_t N = g.dim(0), Fo = g.dim(1), Fi = x.dim(1);
  std::vector<T> out(static_cast<std::size_t>(Fo * Fi), T(0));
  auto gv = g.values();
  auto xv = x.values();
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t fo = 0; fo < Fo; ++fo) {
      const T gvv = gv[n * Fo + fo];
      if (gvv == T(0)) continue;
      const T* xr = xv.data() + n * Fi;
      T* wr = out.data() + fo * Fi;
      for (std::int64_t fi = 0; fi < Fi; ++fi) wr[fi] += gvv * xr[fi];
    }
  return detail::make_op<T>(
      "linear_weight_grad", {Fo, Fi}, std::move(out), {g, x},
      [](const Tensor<T>& self, const Tensor<T>& u) -> std::vector<Tensor<T>> {
        auto g_ = self.parent(0);
        auto x_ = self.parent(1);
        Tensor<T> gg, gx;
        if (g_.requires_grad()) gg = linear_raw(x_, u);
        if (x_.requires_grad()) gx = linear_raw(g_, transpose2d(u));
        return {gg, gx};
      });
}

// Affine map over the trailing axis of an N-D tensor.
template <typename T>
Tensor<T> linear(const Tensor<T>& input, const Tensor<T>& weight,
                 const Tensor<T>& bias = {}) {
  if (weight.rank() != 2)
    throw ShapeError("linear: weight must be [Fout x Fin], got " + shape_str(weight.shape()));
  const std::int64_t Fi = weight.dim(1), Fo = weight.dim(0);
  if (input.rank() < 1 || input.shape().back() != Fi)
    throw ShapeError("linear: input " + shape_str(input.shape()) +
                     " does not end in Fin of weight " + shape_str(weight.shape()));
  const std::int64_t N = input.numel() / Fi;
  Tensor<T> x2 = reshape(input, {N, Fi});
  Tensor<T> y = linear_raw(x2, weight);
  if (bias.defined()) {
    if (bias.rank() != 1 || bias.dim(0) != Fo)
      throw ShapeError("linear: bias " + shape_str(bias.shape()) + " does not match Fout " +
                       std::to_string(Fo));
    y = add(y, expand_rows(bias, N));
  }
  Shape oshape = input.shape();
  oshape.back() = Fo;
  return reshape(y, std::move(oshape));
}

// ---------------------------------------------------------------------------
// Overlap-add synthesis pair: frames [B,C,L] at the given hop -> wave
// [B,(L-1)*hop+C], summing where frames overlap. frame_gather is its adjoint.
// ---------------------------------------------------------------------------
template <typename T>
Tensor<T> frame_gather(const Tensor<T>& wave, std::int64_t C, std::int64_t hop,
                       std::int64_t L);

template <typename T>
Tensor<T> overlap_add(const Tensor<T>& frames, std::int64_t hop) {
  if (frames.rank() != 3)
    throw ShapeError("overlap_add: want [B x C x L] frames, got " + shape_str(frames.shape()));
  const std::int64_t B = frames.dim(0), C = frames.dim(1), L = frames.dim(2);
  const std::int64_t W = (L - 1) * hop + C;
  std::vector<T> out(static_cast<std::size_t>(B * W), T(0));
  auto fv = frames.values();
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t l = 0; l < L; ++l) {
      const T* col_base = fv.data() + b * C * L + l;
      T* dst = out.data() + b * W + l * hop;
      for (std::int64_t c = 0; c < C; ++c) dst[c] += col_base[c * L];
    }
  return detail::make_op<T>(
      "overlap_add", {B, W}, std::move(out), {frames},
      [hop](const Tensor<T>& self, const Tensor<T>& g) -> std::vector<Tensor<T>> {
        auto f = self.parent(0);
        return {frame_gather(g, f.dim(1), hop, f.dim(2))};
      });
}

template <typename T>
Tensor<T> frame_gather(const Tensor<T>& wave, std::int64_t C, std::int64_t hop,
                       std::int64_t L) {
  if (wave.rank() != 2)
    throw ShapeError("frame_gather: want [B x W] wave, got " + shape_str(wave.shape()));
  const std::int64_t B = wave.dim(0), W = wave.dim(1);
  if ((L - 1) * hop + C != W)
    throw ShapeError("frame_gather: frame grid does not tile wave length " +
                     std::to_string(W));
  std::vector<T> out(static_cast<std::size_t>(B * C * L));
  auto wv = wave.values();
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t l = 0; l < L; ++l) {
      const T* src = wv.data() + b * W + l * hop;
      T* col_base = out.data() + b * C * L + l;
      for (std::int64_t c = 0; c < C; ++c) col_base[c * L] = src[c];
    }
  return detail::make_op<T>(
      "frame_gather", {B, C, L}, std::move(out), {wave},
      [hop](const Tensor<T>&, const Tensor<T>& g) -> std::vector<Tensor<T>> {
        return {overlap_add(g, hop)};
      });
}

// ---------------------------------------------------------------------------
// Composite layers
// ---------------------------------------------------------------------------

// Per-instance, per-channel normalization over the length axis, then affine.
// Built from primitive ops so it stays differentiable to any order.
template <typename T>
Tensor<T> instance_norm(const Tensor<T>& input, const Tensor<T>& gain,
                        const Tensor<T>& shift, T eps = T(1e-5)) {
  if (!(eps > T(0))) throw ConfigError("instance_norm: eps must be > 0");
  std::int64_t B, C, L;
  detail::split_bcl("instance_norm", input, B, C, L);
  if (gain.rank() != 1 || gain.dim(0) != C || shift.rank() != 1 || shift.dim(0) != C)
    throw ShapeError("instance_norm: gain/shift " + shape_str(gain.shape()) + "/" +
                     shape_str(shift.shape()) + " do not match input " +
                     shape_str(input.shape()));
  Tensor<T> x = input.rank() == 3 ? input : reshape(input, {1, C, L});
  const T inv_len = T(1) / static_cast<T>(L);
  Tensor<T> mean = scale(reduce_length(x), inv_len);            // [B,C]
  Tensor<T> centered = sub(x, expand_length(mean, L));          // [B,C,L]
  Tensor<T> var = scale(reduce_length(square(centered)), inv_len);
  Tensor<T> istd = div(Tensor<T>::full({B, C}, T(1)), sqrt(add_scalar(var, eps)));
  Tensor<T> normed = mul(centered, expand_length(istd, L));
  Tensor<T> y = add(mul(normed, expand_channel(gain, normed.shape())),
                    expand_channel(shift, normed.shape()));
  return input.rank() == 3 ? y : reshape(y, {C, L});
}

// x if x >= 0 else alpha * x, with a trainable per-channel (or scalar) slope.
template <typename T>
Tensor<T> prelu(const Tensor<T>& input, const Tensor<T>& alpha) {
  Tensor<T> pos = relu(input);
  Tensor<T> negpart = sub(input, pos);
  Tensor<T> slope;
  if (alpha.numel() == 1) {
    slope = expand_scalar(alpha.rank() == 1 ? alpha : reshape(alpha, {1}), input.shape());
  } else {
    std::int64_t B, C, L;
    detail::split_bcl("prelu", input, B, C, L);
    if (alpha.rank() != 1 || alpha.dim(0) != C)
      throw ShapeError("prelu: alpha " + shape_str(alpha.shape()) +
                       " not broadcastable over channels of " + shape_str(input.shape()));
    slope = expand_channel(alpha, input.shape());
  }
  return add(pos, mul(slope, negpart));
}

// ---------------------------------------------------------------------------
// Autograd engine
// ---------------------------------------------------------------------------
namespace detail {

// Reverse topological order (root last), restricted to grad-requiring nodes.
template <typename T>
std::vector<Node<T>*> topo_order(Node<T>* root) {
  std::vector<Node<T>*> order;
  std::unordered_map<Node<T>*, int> state;  // 0 new, 1 open, 2 done
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  state[root] = 1;
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node<T>* p = n->parents[next++].get();
      if (!p->requires_grad) continue;
      auto it = state.find(p);
      if (it == state.end()) {
        state[p] = 1;
        stack.emplace_back(p, 0);
      } else if (it->second == 1) {
        throw Error("autograd: cycle detected in graph");
      }
    } else {
      state[n] = 2;
      order.push_back(n);
      stack.pop_back();
    }
  }
  return order;
}

template <typename T>
std::unordered_map<Node<T>*, Tensor<T>> backward_pass(const Tensor<T>& root,
                                                      bool create_graph,
                                                      bool accumulate_into_leaves) {
  if (root.numel() != 1)
    throw ShapeError("backward: loss must be a scalar, got " + shape_str(root.shape()));
  if (!root.requires_grad())
    throw Error("backward: tensor does not require grad (no graph recorded)");
  std::unordered_map<Node<T>*, Tensor<T>> grads;
  grads[root.node()] = Tensor<T>::full(root.shape(), T(1));
  auto order = topo_order(root.node());
  std::optional<NoGradGuard> guard;
  if (!create_graph) guard.emplace();
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    auto git = grads.find(n);
    if (git == grads.end()) continue;  // dead branch
    Tensor<T> g = git->second;
    if (n->vjp) {
      Tensor<T> self = Tensor<T>::from_node(n->shared_from_this());
      auto pgrads = n->vjp(self, g);
      for (std::size_t i = 0; i < n->parents.size(); ++i) {
        Node<T>* p = n->parents[i].get();
        if (!p->requires_grad || !pgrads[i].defined()) continue;
        auto slot = grads.find(p);
        if (slot == grads.end())
          grads.emplace(p, pgrads[i]);
        else
          slot->second = add(slot->second, pgrads[i]);
      }
    } else if (n->leaf && accumulate_into_leaves) {
      Tensor<T>::from_node(n->shared_from_this()).accumulate_grad(g.values());
    }
  }
  return grads;
}

}  // namespace detail

// Accumulate d(loss)/d(leaf) into every grad-requiring leaf's grad buffer.
// Repeated calls accumulate; callers zero grads between steps.
template <typename T>
void backward(const Tensor<T>& loss) {
  if (!all_finite(loss))
    throw NumericalError("backward: loss is not finite");
  detail::backward_pass(loss, /*create_graph=*/false, /*accumulate_into_leaves=*/true);
}

// Gradients of a scalar output w.r.t. the given inputs, as tensors. With
// create_graph=true the returned tensors are differentiable again (the
// gradient computation itself is recorded).
template <typename T>
std::vector<Tensor<T>> grad(const Tensor<T>& output, const std::vector<Tensor<T>>& inputs,
                            bool create_graph = false) {
  auto grads = detail::backward_pass(output, create_graph, /*accumulate_into_leaves=*/false);
  std::vector<Tensor<T>> result;
  result.reserve(inputs.size());
  for (const auto& in : inputs) {
    auto it = grads.find(in.node());
    result.push_back(it != grads.end() ? it->second : Tensor<T>::zeros(in.shape()));
  }
  return result;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check (64-bit only). f rebuilds its graph from
// the current values of `inputs` on every call. Returns the max over all
// input elements of |analytic - numeric| / max(1, |numeric|).
// ---------------------------------------------------------------------------
inline double grad_check(const std::function<Tensor<double>()>& f,
                         const std::vector<Tensor<double>>& inputs, double eps = 1e-5) {
  if (eps < 1e-7 || eps > 1e-4)
    throw ConfigError("grad_check: eps must lie in [1e-7, 1e-4]");
  Tensor<double> out = f();
  auto analytic = grad(out, inputs);
  double worst = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    Tensor<double> in = inputs[i];
    auto vals = in.values();
    auto avals = analytic[i].values();
    for (std::size_t j = 0; j < vals.size(); ++j) {
      // Perturbed evaluations keep grad mode on: f may use grad() internally
      // (double-backward checks); only its value is read here.
      const double saved = vals[j];
      vals[j] = saved + eps;
      const double fp = f().item();
      vals[j] = saved - eps;
      const double fm = f().item();
      vals[j] = saved;
      const double numeric = (fp - fm) / (2.0 * eps);
      const double err = std::abs(avals[j] - numeric) / std::max(1.0, std::abs(numeric));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace tdcgan
