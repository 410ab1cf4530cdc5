#pragma once

// Reverse-mode differentiation over dense row-major matrices.
//
// A Var is a shared handle to a graph node.  Primitives build new nodes whose
// backward closures accumulate into their parents' gradient buffers.  Leaves
// created with Var::parameter() are the only nodes reported by backward();
// everything else is interior.  Nodes that do not (transitively) depend on a
// parameter carry no parents and cost nothing at backward time.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "tg/common.hpp"

namespace tg::ad {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <class T>
class GradRefs;

template <class T>
struct Node {
  using BackwardFn = std::function<void(Node&, std::span<const T>, GradRefs<T>&)>;

  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<T> value;
  bool requires_grad = false;
  bool is_leaf = false;
  bool released = false;
  std::vector<std::shared_ptr<Node>> parents;
  BackwardFn backward;
};

/// Lazily allocated gradient buffers of a node's parents during backward.
template <class T>
class GradRefs {
 public:
  using Lookup = std::function<std::vector<T>*(const Node<T>*)>;

  GradRefs(const Node<T>& node, Lookup lookup) : node_(node), lookup_(std::move(lookup)) {}

  /// Empty span when parent `i` does not require a gradient.
  std::span<T> operator[](std::size_t i) {
    const auto& p = node_.parents[i];
    if (!p || !p->requires_grad) return {};
    std::vector<T>* buf = lookup_(p.get());
    if (buf->empty()) buf->assign(p->value.size(), T(0));
    return {buf->data(), buf->size()};
  }

 private:
  const Node<T>& node_;
  Lookup lookup_;
};

template <class T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> n) : n_(std::move(n)) {}

  static Var constant(std::size_t rows, std::size_t cols, std::vector<T> data) {
    require(data.size() == rows * cols, "Var: data length does not match shape");
    auto n = std::make_shared<Node<T>>();
    n->rows = rows;
    n->cols = cols;
    n->value = std::move(data);
    return Var(std::move(n));
  }
  static Var constant(std::size_t rows, std::size_t cols, T fill = T(0)) {
    return constant(rows, cols, std::vector<T>(rows * cols, fill));
  }
  static Var parameter(std::size_t rows, std::size_t cols, std::vector<T> data) {
    Var v = constant(rows, cols, std::move(data));
    v.n_->requires_grad = true;
    v.n_->is_leaf = true;
    return v;
  }

  bool valid() const { return static_cast<bool>(n_); }
  std::size_t rows() const { return n_->rows; }
  std::size_t cols() const { return n_->cols; }
  std::size_t size() const { return n_->value.size(); }
  bool requires_grad() const { return n_->requires_grad; }
  bool is_leaf() const { return n_->is_leaf; }

  std::span<const T> value() const { return n_->value; }
  /// Mutable access for optimizers and checkpoint loading.  Only meaningful on
  /// leaves; mutating an interior node invalidates its graph.
  std::span<T> mutable_value() { return n_->value; }
  T operator()(std::size_t r, std::size_t c) const { return n_->value[r * n_->cols + c]; }
  T item() const {
    require(size() == 1, "Var::item on non-scalar");
    return n_->value[0];
  }

  Node<T>* node() const { return n_.get(); }
  const std::shared_ptr<Node<T>>& shared() const { return n_; }

 private:
  std::shared_ptr<Node<T>> n_;
};

/// While false on the current thread, primitives record no history.
inline thread_local bool grad_mode = true;

/// Scoped inference mode: results of primitives carry no parents.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(grad_mode) { grad_mode = false; }
  ~NoGradGuard() { grad_mode = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

namespace detail {

template <class T>
Var<T> make_result(std::size_t rows, std::size_t cols, std::vector<T> value,
                   std::initializer_list<Var<T>> inputs, typename Node<T>::BackwardFn fn) {
  auto n = std::make_shared<Node<T>>();
  n->rows = rows;
  n->cols = cols;
  n->value = std::move(value);
  bool any = false;
  if (grad_mode)
    for (const auto& in : inputs) any = any || in.requires_grad();
  if (any) {
    n->requires_grad = true;
    n->parents.reserve(inputs.size());
    for (const auto& in : inputs) n->parents.push_back(in.shared());
    n->backward = std::move(fn);
  }
  return Var<T>(std::move(n));
}

template <class T>
Var<T> make_result_n(std::size_t rows, std::size_t cols, std::vector<T> value,
                     const std::vector<Var<T>>& inputs, typename Node<T>::BackwardFn fn) {
  auto n = std::make_shared<Node<T>>();
  n->rows = rows;
  n->cols = cols;
  n->value = std::move(value);
  bool any = false;
  if (grad_mode)
    for (const auto& in : inputs) any = any || in.requires_grad();
  if (any) {
    n->requires_grad = true;
    n->parents.reserve(inputs.size());
    for (const auto& in : inputs) n->parents.push_back(in.shared());
    n->backward = std::move(fn);
  }
  return Var<T>(std::move(n));
}

template <class T>
ConstMatMap<T> cmap(const Node<T>& n) {
  return ConstMatMap<T>(n.value.data(), static_cast<Eigen::Index>(n.rows),
                        static_cast<Eigen::Index>(n.cols));
}
template <class T>
ConstMatMap<T> cmap(std::span<const T> s, std::size_t rows, std::size_t cols) {
  return ConstMatMap<T>(s.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
template <class T>
MatMap<T> map(std::span<T> s, std::size_t rows, std::size_t cols) {
  return MatMap<T>(s.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

inline std::string shape_str(std::size_t r, std::size_t c) {
  return "[" + std::to_string(r) + "x" + std::to_string(c) + "]";
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

/// a[m×k] · b[k×n]
template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  require(a.cols() == b.rows(), "matmul: inner extents differ " + detail::shape_str(a.rows(), a.cols()) +
                                    " vs " + detail::shape_str(b.rows(), b.cols()));
  const std::size_t m = a.rows(), n = b.cols();
  std::vector<T> out(m * n);
  detail::map<T>(out, m, n).noalias() = detail::cmap(*a.node()) * detail::cmap(*b.node());
  return detail::make_result<T>(m, n, std::move(out), {a, b},
                                [](Node<T>& self, std::span<const T> g, GradRefs<T>& pg) {
                                  const Node<T>& A = *self.parents[0];
                                  const Node<T>& B = *self.parents[1];
                                  auto G = detail::cmap(g, self.rows, self.cols);
                                  if (auto ga = pg[0]; !ga.empty())
                                    detail::map(ga, A.rows, A.cols).noalias() += G * detail::cmap(B).transpose();
                                  if (auto gb = pg[1]; !gb.empty())
                                    detail::map(gb, B.rows, B.cols).noalias() += detail::cmap(A).transpose() * G;
                                });
}

/// a[m×k] · b[n×k]ᵀ
template <class T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& b) {
  require(a.cols() == b.cols(), "matmul_nt: inner extents differ " + detail::shape_str(a.rows(), a.cols()) +
                                     " vs " + detail::shape_str(b.rows(), b.cols()));
  const std::size_t m = a.rows(), n = b.rows();
  std::vector<T> out(m * n);
  detail::map<T>(out, m, n).noalias() = detail::cmap(*a.node()) * detail::cmap(*b.node()).transpose();
  return detail::make_result<T>(m, n, std::move(out), {a, b},
                                [](Node<T>& self, std::span<const T> g, GradRefs<T>& pg) {
                                  const Node<T>& A = *self.parents[0];
                                  const Node<T>& B = *self.parents[1];
                                  auto G = detail::cmap(g, self.rows, self.cols);
                                  if (auto ga = pg[0]; !ga.empty())
                                    detail::map(ga, A.rows, A.cols).noalias() += G * detail::cmap(B);
                                  if (auto gb = pg[1]; !gb.empty())
                                    detail::map(gb, B.rows, B.cols).noalias() += G.transpose() * detail::cmap(A);
                                });
}

// ---------------------------------------------------------------------------
// Element-wise

/// a + b, where b has a's shape or is a single row broadcast over a's rows.
template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  const bool broadcast = b.rows() == 1 && a.rows() != 1;
  require(b.cols() == a.cols() && (b.rows() == a.rows() || broadcast),
          "add: shape mismatch " + detail::shape_str(a.rows(), a.cols()) + " + " +
              detail::shape_str(b.rows(), b.cols()));
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<T> out(a.value().begin(), a.value().end());
  auto bv = b.value();
  for (std::size_t r = 0; r < m; ++r) {
    const T* brow = broadcast ? bv.data() : bv.data() + r * n;
    T* orow = out.data() + r * n;
    for (std::size_t c = 0; c < n; ++c) orow[c] += brow[c];
  }
  return detail::make_result<T>(m, n, std::move(out), {a, b},
                                [broadcast](Node<T>& self, std::span<const T> g, GradRefs<T>& pg) {
                                  if (auto ga = pg[0]; !ga.empty())
                                    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                                  if (auto gb = pg[1]; !gb.empty()) {
                                    if (!broadcast) {
                                      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
                                    } else {
                                      const std::size_t n = self.cols;
                                      for (std::size_t r = 0; r < self.rows; ++r)
                                        for (std::size_t c = 0; c < n; ++c) gb[c] += g[r * n + c];
                                    }
                                  }
                                });
}

/// c · a for a constant c.
template <class T>
Var<T> scale(const Var<T>& a, T c) {
  std::vector<T> out(a.value().begin(), a.value().end());
  for (auto& x : out) x *= c;
  return detail::make_result<T>(a.rows(), a.cols(), std::move(out), {a},
                                [c](Node<T>&, std::span<const T> g, GradRefs<T>& pg) {
                                  auto ga = pg[0];
                                  for (std::size_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
                                });
}

/// g · a for a learnable 1×1 scalar g.
template <class T>
Var<T> scale(const Var<T>& a, const Var<T>& g) {
  require(g.size() == 1, "scale: gate must be 1x1");
  const T s = g.item();
  std::vector<T> out(a.value().begin(), a.value().end());
  for (auto& x : out) x *= s;
  return detail::make_result<T>(a.rows(), a.cols(), std::move(out), {a, g},
                                [](Node<T>& self, std::span<const T> gout, GradRefs<T>& pg) {
                                  const Node<T>& A = *self.parents[0];
                                  const T s = self.parents[1]->value[0];
                                  if (auto ga = pg[0]; !ga.empty())
                                    for (std::size_t i = 0; i < gout.size(); ++i) ga[i] += s * gout[i];
                                  if (auto gg = pg[1]; !gg.empty()) {
                                    T acc = 0;
                                    for (std::size_t i = 0; i < gout.size(); ++i) acc += gout[i] * A.value[i];
                                    gg[0] += acc;
                                  }
                                });
}

namespace detail {
template <class T>
constexpr T kGeluC = T(0.7978845608028654);  // sqrt(2/pi)
}

/// GELU, tanh approximation (GPT-2 form).
template <class T>
Var<T> gelu(const Var<T>& a) {
  std::vector<T> out(a.size());
  auto x = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T u = detail::kGeluC<T> * (x[i] + T(0.044715) * x[i] * x[i] * x[i]);
    out[i] = T(0.5) * x[i] * (T(1) + std::tanh(u));
  }
  return detail::make_result<T>(a.rows(), a.cols(), std::move(out), {a},
                                [](Node<T>& self, std::span<const T> g, GradRefs<T>& pg) {
                                  auto ga = pg[0];
                                  const auto& x = self.parents[0]->value;
                                  for (std::size_t i = 0; i < g.size(); ++i) {
                                    const T xi = x[i];
                                    const T u = detail::kGeluC<T> * (xi + T(0.044715) * xi * xi * xi);
                                    const T th = std::tanh(u);
                                    const T du = detail::kGeluC<T> * (T(1) + T(3 * 0.044715) * xi * xi);
                                    const T d = T(0.5) * (T(1) + th) + T(0.5) * xi * (T(1) - th * th) * du;
                                    ga[i] += g[i] * d;
                                  }
                                });
}

/// a ∘ factors for a constant factor vector (same length as a).
template <class T>
Var<T> mul_mask(const Var<T>& a, std::vector<T> factors) {
  require(factors.size() == a.size(), "mul_mask: factor length mismatch");
  std::vector<T> out(a.size());
  auto x = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * factors[i];
  return detail::make_result<T>(a.rows(), a.cols(), std::move(out), {a},
                                [f = std::move(factors)](Node<T>&, std::span<const T> g, GradRefs<T>& pg) {
                                  auto ga = pg[0];
                                  for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * f[i];
                                });
}

/// Inverted dropout: zero entries with probability `rate`, scale survivors by
/// 1/(1-rate).  Identity when not training or rate == 0.
template <class T, class Rng>
Var<T> dropout(const Var<T>& a, double rate, Rng& rng, bool training) {
  require(rate >= 0.0 && rate < 1.0, "dropout: rate must be in [0,1), got " + std::to_string(rate));
  if (!training || rate == 0.0) return a;
  std::bernoulli_distribution keep(1.0 - rate);
  const T inv = static_cast<T>(1.0 / (1.0 - rate));
  std::vector<T> f(a.size());
  for (auto& x : f) x = keep(rng) ? inv : T(0);
  return mul_mask(a, std::move(f));
}

/// Same values, no history.
template <class T>
Var<T> detach(const Var<T>& a) {
  return Var<T>::constant(a.rows(), a.cols(), std::vector<T>(a.value().begin(), a.value().end()));
}

template <class T>
Var<T> sum(const Var<T>& a) {
  T acc = 0;
  for (T x : a.value()) acc += x;
  return detail::make_result<T>(1, 1, {acc}, {a}, [](Node<T>&, std::span<const T> g, GradRefs<T>& pg) {
    auto ga = pg[0];
    for (auto& x : ga) x += g[0];
  });
}

// ---------------------------------------------------------------------------
// Normalization and softmax

/// Row-wise softmax with an optional additive bias (same shape as a).  Columns
/// whose bias is the mask sentinel get exactly zero weight; a row with every
/// column masked yields all zeros.
template <class T>
Var<T> row_softmax(const Var<T>& a, std::span<const T> bias = {}) {
  const std::size_t m = a.rows(), n = a.cols();
  require(bias.empty() || bias.size() == a.size(), "row_softmax: bias shape mismatch");
  std::vector<T> out(m * n, T(0));
  auto x = a.value();
  for (std::size_t r = 0; r < m; ++r) {
    const T* xr = x.data() + r * n;
    const T* br = bias.empty() ? nullptr : bias.data() + r * n;
    T* yr = out.data() + r * n;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t c = 0; c < n; ++c) {
      if (br && is_masked_bias(br[c])) continue;
      mx = std::max(mx, xr[c] + (br ? br[c] : T(0)));
    }
    if (mx == -std::numeric_limits<T>::infinity()) continue;  // fully masked
    T z = 0;
    for (std::size_t c = 0; c < n; ++c) {
      if (br && is_masked_bias(br[c])) continue;
      yr[c] = std::exp(xr[c] + (br ? br[c] : T(0)) - mx);
      z += yr[c];
    }
    for (std::size_t c = 0; c < n; ++c) yr[c] /= z;
  }
  return detail::make_result<T>(m, n, std::move(out), {a},
                                [](Node<T>& self, std::span<const T> g, GradRefs<T>& pg) {
                                  auto ga = pg[0];
                                  const std::size_t n = self.cols;
                                  const auto& y = self.value;
                                  for (std::size_t r = 0; r < self.rows; ++r) {
                                    T dot = 0;
                                    for (std::size_t c = 0; c < n; ++c) dot += g[r * n + c] * y[r * n + c];
                                    for (std::size_t c = 0; c < n; ++c)
                                      ga[r * n + c] += y[r * n + c] * (g[r * n + c] - dot);
                                  }
                                });
}

/// Per-row normalization to zero mean / unit variance followed by gain/bias.
template <class T>
Var<T> layer_norm(const Var<T>& a, const Var<T>& gain, const Var<T>& bias, T eps) {
  const std::size_t m = a.rows(), d = a.cols();
  require(d >= 1 && eps > 0, "layer_norm: need d >= 1 and eps > 0");
  require(gain.size() == d && bias.size() == d, "layer_norm: gain/bias length must equal row width");
  std::vector<T> out(m * d), xhat(m * d), rstd(m);
  auto x = a.value();
  auto gv = gain.value();
  auto bv = bias.value();
  for (std::size_t r = 0; r < m; ++r) {
    const T* xr = x.data() + r * d;
    T mean = 0;
    for (std::size_t c = 0; c < d; ++c) mean += xr[c];
    mean /= static_cast<T>(d);
    T var = 0;
    for (std::size_t c = 0; c < d; ++c) var += (xr[c] - mean) * (xr[c] - mean);
    var /= static_cast<T>(d);
    const T rs = T(1) / std::sqrt(var + eps);
    rstd[r] = rs;
    for (std::size_t c = 0; c < d; ++c) {
      const T h = (xr[c] - mean) * rs;
      xhat[r * d + c] = h;
      out[r * d + c] = h * gv[c] + bv[c];
    }
  }
  return detail::make_result<T>(
      m, d, std::move(out), {a, gain, bias},
      [xhat = std::move(xhat), rstd = std::move(rstd)](Node<T>& self, std::span<const T> g, GradRefs<T>& pg) {
        const std::size_t d = self.cols;
        const auto& gv = self.parents[1]->value;
        auto ga = pg[0];
        auto gg = pg[1];
        auto gb = pg[2];
        for (std::size_t r = 0; r < self.rows; ++r) {
          const T* gr = g.data() + r * d;
          const T* hr = xhat.data() + r * d;
          if (!gg.empty())
            for (std::size_t c = 0; c < d; ++c) gg[c] += gr[c] * hr[c];
          if (!gb.empty())
            for (std::size_t c = 0; c < d; ++c) gb[c] += gr[c];
          if (ga.empty()) continue;
          T mean_g = 0, mean_gh = 0;
          for (std::size_t c = 0; c < d; ++c) {
            const T gh = gr[c] * gv[c];
            mean_g += gh;
            mean_gh += gh * hr[c];
          }
          mean_g /= static_cast<T>(d);
          mean_gh /= static_cast<T>(d);
          for (std::size_t c = 0; c < d; ++c)
            ga[r * d + c] += rstd[r] * (gr[c] * gv[c] - mean_g - hr[c] * mean_gh);
        }
      });
}

// ---------------------------------------------------------------------------
// Indexing and reshaping

/// Rows of `table` selected by `ids`; backward scatters (duplicates accumulate).
template <class T>
Var<T> gather_rows(const Var<T>& table, std::span<const std::uint32_t> ids) {
  const std::size_t d = table.cols();
  std::vector<T> out(ids.size() * d);
  auto tv = table.value();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    require(ids[i] < table.rows(), "gather_rows: id " + std::to_string(ids[i]) + " out of range [0, " +
                                       std::to_string(table.rows()) + ")");
    std::copy_n(tv.data() + ids[i] * d, d, out.data() + i * d);
  }
  return detail::make_result<T>(
      ids.size(), d, std::move(out), {table},
      [idx = std::vector<std::uint32_t>(ids.begin(), ids.end())](Node<T>& self, std::span<const T> g,
                                                                 GradRefs<T>& pg) {
        auto gt = pg[0];
        const std::size_t d = self.cols;
        for (std::size_t i = 0; i < idx.size(); ++i)
          for (std::size_t c = 0; c < d; ++c) gt[idx[i] * d + c] += g[i * d + c];
      });
}

template <class T>
Var<T> slice_rows(const Var<T>& a, std::size_t begin, std::size_t count) {
  require(begin + count <= a.rows(), "slice_rows: range past end");
  const std::size_t d = a.cols();
  std::vector<T> out(a.value().begin() + static_cast<std::ptrdiff_t>(begin * d),
                     a.value().begin() + static_cast<std::ptrdiff_t>((begin + count) * d));
  return detail::make_result<T>(count, d, std::move(out), {a},
                                [off = begin * d](Node<T>&, std::span<const T> g, GradRefs<T>& pg) {
                                  auto ga = pg[0];
                                  for (std::size_t i = 0; i < g.size(); ++i) ga[off + i] += g[i];
                                });
}

template <class T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  require(!parts.empty(), "concat_rows: no inputs");
  const std::size_t d = parts.front().cols();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    require(p.cols() == d, "concat_rows: column extents differ");
    rows += p.rows();
  }
  std::vector<T> out;
  out.reserve(rows * d);
  for (const auto& p : parts) out.insert(out.end(), p.value().begin(), p.value().end());
  return detail::make_result_n<T>(rows, d, std::move(out), parts,
                                  [](Node<T>& self, std::span<const T> g, GradRefs<T>& pg) {
                                    std::size_t off = 0;
                                    for (std::size_t k = 0; k < self.parents.size(); ++k) {
                                      const std::size_t len = self.parents[k]->value.size();
                                      if (auto gp = pg[k]; !gp.empty())
                                        for (std::size_t i = 0; i < len; ++i) gp[i] += g[off + i];
                                      off += len;
                                    }
                                  });
}

template <class T>
Var<T> slice_cols(const Var<T>& a, std::size_t begin, std::size_t count) {
  require(begin + count <= a.cols(), "slice_cols: range past end");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<T> out(m * count);
  auto x = a.value();
  for (std::size_t r = 0; r < m; ++r) std::copy_n(x.data() + r * n + begin, count, out.data() + r * count);
  return detail::make_result<T>(m, count, std::move(out), {a},
                                [begin, n](Node<T>& self, std::span<const T> g, GradRefs<T>& pg) {
                                  auto ga = pg[0];
                                  const std::size_t cnt = self.cols;
                                  for (std::size_t r = 0; r < self.rows; ++r)
                                    for (std::size_t c = 0; c < cnt; ++c) ga[r * n + begin + c] += g[r * cnt + c];
                                });
}

template <class T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  require(!parts.empty(), "concat_cols: no inputs");
  const std::size_t m = parts.front().rows();
  std::size_t n = 0;
  for (const auto& p : parts) {
    require(p.rows() == m, "concat_cols: row extents differ");
    n += p.cols();
  }
  std::vector<T> out(m * n);
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.cols();
    auto x = p.value();
    for (std::size_t r = 0; r < m; ++r) std::copy_n(x.data() + r * w, w, out.data() + r * n + off);
    off += w;
  }
  return detail::make_result_n<T>(m, n, std::move(out), parts,
                                  [](Node<T>& self, std::span<const T> g, GradRefs<T>& pg) {
                                    const std::size_t n = self.cols;
                                    std::size_t off = 0;
                                    for (std::size_t k = 0; k < self.parents.size(); ++k) {
                                      const std::size_t w = self.parents[k]->cols;
                                      if (auto gp = pg[k]; !gp.empty())
                                        for (std::size_t r = 0; r < self.rows; ++r)
                                          for (std::size_t c = 0; c < w; ++c) gp[r * w + c] += g[r * n + off + c];
                                      off += w;
                                    }
                                  });
}

// ---------------------------------------------------------------------------
// Loss

/// Σᵢ wᵢ·(−log softmax(logitsᵢ)[targetᵢ]) / denom, with denom = Σᵢ wᵢ unless
/// given.  An explicit denominator lets several graphs share one batch
/// normalizer and still sum to the batch loss.
template <class T>
Var<T> weighted_cross_entropy(const Var<T>& logits, std::span<const std::uint32_t> targets,
                              std::span<const T> weights, std::optional<T> denom = std::nullopt) {
  const std::size_t n = logits.rows(), V = logits.cols();
  require(targets.size() == n && weights.size() == n, "weighted_cross_entropy: length mismatch");
  T wsum = 0;
  for (T w : weights) {
    require(w >= 0, "weighted_cross_entropy: negative weight");
    wsum += w;
  }
  require(wsum > 0, "weighted_cross_entropy: all weights are zero");
  const T z = denom.value_or(wsum);
  require(z > 0, "weighted_cross_entropy: denominator must be positive");
  auto x = logits.value();
  std::vector<T> probs(n * V, T(0));
  T loss = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (weights[i] == 0) continue;
    require(targets[i] < V, "weighted_cross_entropy: target out of range");
    const T* xr = x.data() + i * V;
    const T mx = *std::max_element(xr, xr + V);
    T s = 0;
    for (std::size_t c = 0; c < V; ++c) s += std::exp(xr[c] - mx);
    const T lse = mx + std::log(s);
    loss += weights[i] * (lse - xr[targets[i]]);
    for (std::size_t c = 0; c < V; ++c) probs[i * V + c] = std::exp(xr[c] - lse);
  }
  loss /= z;
  return detail::make_result<T>(
      1, 1, {loss}, {logits},
      [probs = std::move(probs), tg = std::vector<std::uint32_t>(targets.begin(), targets.end()),
       w = std::vector<T>(weights.begin(), weights.end()), z, V](Node<T>&, std::span<const T> g, GradRefs<T>& pg) {
        auto gl = pg[0];
        for (std::size_t i = 0; i < tg.size(); ++i) {
          if (w[i] == 0) continue;
          const T f = g[0] * w[i] / z;
          for (std::size_t c = 0; c < V; ++c) gl[i * V + c] += f * probs[i * V + c];
          gl[i * V + tg[i]] -= f;
        }
      });
}

// ---------------------------------------------------------------------------
// Backward

/// Gradients of one backward pass, keyed by parameter leaf.
template <class T>
class Gradients {
 public:
  /// Gradient for `leaf`; zeros when the leaf did not influence the loss.
  std::vector<T> get(const Var<T>& leaf) const {
    auto it = grads_.find(leaf.node());
    if (it == grads_.end()) return std::vector<T>(leaf.size(), T(0));
    return it->second;
  }
  bool contains(const Var<T>& leaf) const { return grads_.count(leaf.node()) != 0; }
  std::size_t size() const { return grads_.size(); }

  /// this += other (per leaf).
  void accumulate(const Gradients& other) {
    for (const auto& [k, v] : other.grads_) {
      auto& dst = grads_[k];
      if (dst.empty()) {
        dst = v;
      } else {
        for (std::size_t i = 0; i < v.size(); ++i) dst[i] += v[i];
      }
    }
  }
  /// Direct access for optimizers; nullptr when absent.
  std::vector<T>* find(const Var<T>& leaf) {
    auto it = grads_.find(leaf.node());
    return it == grads_.end() ? nullptr : &it->second;
  }
  void insert(const Node<T>* leaf, std::vector<T> g) { grads_[leaf] = std::move(g); }

 private:
  std::unordered_map<const Node<T>*, std::vector<T>> grads_;
};

struct BackwardOptions {
  /// Keep closures and parent links so the same graph can be differentiated
  /// again.  Otherwise interior nodes are released and a second call throws.
  bool retain_graph = false;
};

template <class T>
Gradients<T> backward(const Var<T>& loss, BackwardOptions opts = {}) {
  require(loss.valid() && loss.size() == 1, "backward: loss must be a scalar");
  if (loss.node()->released) throw std::logic_error("backward: graph already released");
  Gradients<T> result;
  if (!loss.requires_grad()) return result;

  // Iterative post-order DFS over nodes that require gradients.
  std::vector<Node<T>*> order;
  std::unordered_map<const Node<T>*, std::size_t> index;
  {
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    stack.emplace_back(loss.node(), 0);
    index.emplace(loss.node(), SIZE_MAX);
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        Node<T>* p = node->parents[next++].get();
        if (p->requires_grad && index.emplace(p, SIZE_MAX).second) stack.emplace_back(p, 0);
        continue;
      }
      index[node] = order.size();
      order.push_back(node);
      stack.pop_back();
    }
  }

  std::vector<std::vector<T>> grads(order.size());
  grads[index[loss.node()]].assign(1, T(1));
  auto lookup = [&](const Node<T>* p) { return &grads[index.at(p)]; };
  for (std::size_t k = order.size(); k-- > 0;) {
    Node<T>* node = order[k];
    if (grads[k].empty() || !node->backward) continue;
    GradRefs<T> refs(*node, lookup);
    node->backward(*node, grads[k], refs);
    if (!node->is_leaf) std::vector<T>().swap(grads[k]);
  }
  for (std::size_t k = 0; k < order.size(); ++k) {
    Node<T>* node = order[k];
    if (node->is_leaf) {
      if (grads[k].empty()) grads[k].assign(node->value.size(), T(0));
      result.insert(node, std::move(grads[k]));
    } else if (!opts.retain_graph) {
      node->backward = nullptr;
      node->parents.clear();
      node->released = true;
    }
  }
  return result;
}

}  // namespace tg::ad
