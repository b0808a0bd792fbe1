#include "rad/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "eigen_util.hpp"
#include "rad/errors.hpp"
#include "rad/rng.hpp"

namespace rad::ad {

using detail::ConstMatMap;
using detail::ConstStridedMap;
using detail::MatMap;
using detail::RowMat;
using detail::StridedMap;

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------------------
// Tensor

template <class T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  const auto n = ad::numel(shape);
  return from(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
}

template <class T>
Tensor<T> Tensor<T>::from(Shape shape, std::vector<T> data, bool requires_grad) {
  if (ad::numel(shape) != data.size()) {
    throw DimensionError("tensor shape " + to_string(shape) + " does not match " +
                         std::to_string(data.size()) + " values");
  }
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(data);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

template <class T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return from({1}, {value}, requires_grad);
}

template <class T>
Tensor<T> Tensor<T>::make_op(Shape shape, std::vector<T> value, std::vector<Tensor> parents,
                             BackwardFn backward) {
  Tensor out = from(std::move(shape), std::move(value));
  const bool needs = std::any_of(parents.begin(), parents.end(),
                                 [](const Tensor& p) { return p.requires_grad(); });
  if (needs) {
    out.node_->requires_grad = true;
    out.node_->parents.reserve(parents.size());
    for (auto& p : parents) out.node_->parents.push_back(p.node_);
    out.node_->backward_fn = std::move(backward);
  }
  return out;
}

template <class T>
void Tensor<T>::zero_grad() {
  std::fill(node_->grad.begin(), node_->grad.end(), T(0));
}

template <class T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + to_string(shape()));
  return node_->value[0];
}

template <class T>
T Tensor<T>::at(std::size_t i, std::size_t j) const {
  if (rank() != 2) throw DimensionError("at(i, j) needs a matrix");
  return node_->value.at(i * node_->shape[1] + j);
}

template <class T>
Tensor<T> Tensor<T>::detach(bool requires_grad) const {
  return from(shape(), node_->value, requires_grad);
}

// ---------------------------------------------------------------------------
// helpers

namespace {

template <class T>
bool wants_grad(const Node<T>& n, std::size_t parent) {
  return n.parents.size() > parent && n.parents[parent]->requires_grad;
}

// Size of b's broadcast block; b must equal a or a's trailing dims.
std::size_t broadcast_block(const Shape& a, const Shape& b, const char* op) {
  if (b.size() > a.size() || !std::equal(b.rbegin(), b.rend(), a.rbegin())) {
    throw DimensionError(std::string(op) + ": cannot broadcast " + to_string(b) + " onto " +
                         to_string(a));
  }
  return numel(b);
}

void require_matrix(const Shape& s, const char* op) {
  if (s.size() != 2) throw DimensionError(std::string(op) + " expects a matrix, got " + to_string(s));
}

struct AxisSplit {
  std::size_t outer, n, inner;
};

AxisSplit split_at(const Shape& s, std::size_t axis, const char* op) {
  if (axis >= s.size()) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) + " invalid for " +
                         to_string(s));
  }
  AxisSplit r{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

template <class T, class F, class G>
Tensor<T> unary(const Tensor<T>& x, F f, G dfdx) {
  std::vector<T> out(x.numel());
  const auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(in[i]);
  return Tensor<T>::make_op(x.shape(), std::move(out), {x}, [dfdx](Node<T>& n) {
    auto& px = *n.parents[0];
    auto& g = px.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * dfdx(px.value[i], n.value[i]);
  });
}

}  // namespace

// ---------------------------------------------------------------------------
// ops

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_matrix(a.shape(), "matmul");
  require_matrix(b.shape(), "matmul");
  const std::size_t m = a.dim(0), n = a.dim(1), p = b.dim(1);
  if (b.dim(0) != n) {
    throw DimensionError("matmul: inner dimensions disagree " + to_string(a.shape()) + " x " +
                         to_string(b.shape()));
  }
  std::vector<T> out(m * p);
  MatMap<T>(out.data(), m, p).noalias() =
      ConstMatMap<T>(a.data().data(), m, n) * ConstMatMap<T>(b.data().data(), n, p);
  return Tensor<T>::make_op({m, p}, std::move(out), {a, b}, [m, n, p](Node<T>& node) {
    ConstMatMap<T> dc(node.grad.data(), m, p);
    auto& pa = *node.parents[0];
    auto& pb = *node.parents[1];
    if (pa.requires_grad) {
      MatMap<T>(pa.ensure_grad().data(), m, n).noalias() +=
          dc * ConstMatMap<T>(pb.value.data(), n, p).transpose();
    }
    if (pb.requires_grad) {
      MatMap<T>(pb.ensure_grad().data(), n, p).noalias() +=
          ConstMatMap<T>(pa.value.data(), m, n).transpose() * dc;
    }
  });
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  const std::size_t block = broadcast_block(a.shape(), b.shape(), "add");
  std::vector<T> out(a.data().begin(), a.data().end());
  const auto bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i % block];
  return Tensor<T>::make_op(a.shape(), std::move(out), {a, b}, [block](Node<T>& n) {
    if (wants_grad(n, 0)) {
      auto& g = n.parents[0]->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    }
    if (wants_grad(n, 1)) {
      auto& g = n.parents[1]->ensure_grad();
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i % block] += n.grad[i];
    }
  });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  const std::size_t block = broadcast_block(a.shape(), b.shape(), "sub");
  std::vector<T> out(a.data().begin(), a.data().end());
  const auto bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i % block];
  return Tensor<T>::make_op(a.shape(), std::move(out), {a, b}, [block](Node<T>& n) {
    if (wants_grad(n, 0)) {
      auto& g = n.parents[0]->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    }
    if (wants_grad(n, 1)) {
      auto& g = n.parents[1]->ensure_grad();
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i % block] -= n.grad[i];
    }
  });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  const std::size_t block = broadcast_block(a.shape(), b.shape(), "mul");
  std::vector<T> out(a.data().begin(), a.data().end());
  const auto bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i % block];
  return Tensor<T>::make_op(a.shape(), std::move(out), {a, b}, [block](Node<T>& n) {
    const auto& av = n.parents[0]->value;
    const auto& bv = n.parents[1]->value;
    if (wants_grad(n, 0)) {
      auto& g = n.parents[0]->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * bv[i % block];
    }
    if (wants_grad(n, 1)) {
      auto& g = n.parents[1]->ensure_grad();
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i % block] += n.grad[i] * av[i];
    }
  });
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  return unary(
      x, [factor](T v) { return v * factor; }, [factor](T, T) { return factor; });
}

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T total = T(0);
  for (T v : x.data()) total += v;
  return Tensor<T>::make_op({1}, {total}, {x}, [](Node<T>& n) {
    auto& g = n.parents[0]->ensure_grad();
    for (auto& gi : g) gi += n.grad[0];
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

template <class T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  const auto s = split_at(x.shape(), axis, "softmax");
  const auto in = x.data();
  std::vector<T> out(in.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.n * s.inner + i;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < s.n; ++j) mx = std::max(mx, in[base + j * s.inner]);
      T z = T(0);
      for (std::size_t j = 0; j < s.n; ++j) {
        const T e = std::exp(in[base + j * s.inner] - mx);
        out[base + j * s.inner] = e;
        z += e;
      }
      for (std::size_t j = 0; j < s.n; ++j) out[base + j * s.inner] /= z;
    }
  }
  return Tensor<T>::make_op(x.shape(), std::move(out), {x}, [s](Node<T>& n) {
    auto& g = n.parents[0]->ensure_grad();
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = o * s.n * s.inner + i;
        T dot = T(0);
        for (std::size_t j = 0; j < s.n; ++j) {
          const std::size_t at = base + j * s.inner;
          dot += n.value[at] * n.grad[at];
        }
        for (std::size_t j = 0; j < s.n; ++j) {
          const std::size_t at = base + j * s.inner;
          g[at] += n.value[at] * (n.grad[at] - dot);
        }
      }
    }
  });
}

template <class T>
Tensor<T> log(const Tensor<T>& x) {
  return unary(
      x, [](T v) { return std::log(v); }, [](T in, T) { return T(1) / in; });
}

template <class T>
Tensor<T> exp(const Tensor<T>& x) {
  return unary(
      x, [](T v) { return std::exp(v); }, [](T, T out) { return out; });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return unary(
      x,
      [](T v) {
        if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
        const T e = std::exp(v);
        return e / (T(1) + e);
      },
      [](T, T out) { return out * (T(1) - out); });
}

template <class T>
Tensor<T> tanh(const Tensor<T>& x) {
  return unary(
      x, [](T v) { return std::tanh(v); }, [](T, T out) { return T(1) - out * out; });
}

template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T c = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T a = T(0.044715);
  return unary(
      x,
      [](T v) { return T(0.5) * v * (T(1) + std::tanh(c * (v + a * v * v * v))); },
      [](T v, T) {
        const T t = std::tanh(c * (v + a * v * v * v));
        return T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t * t) * c * (T(1) + T(3) * a * v * v);
      });
}

template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  if (x.rank() == 0) throw DimensionError("layer_norm of a rank-0 tensor");
  const std::size_t d = x.shape().back();
  if (gamma.numel() != d || beta.numel() != d) {
    throw DimensionError("layer_norm: gamma/beta must have " + std::to_string(d) + " entries");
  }
  const std::size_t rows = x.numel() / d;
  const auto in = x.data();
  const auto gv = gamma.data();
  const auto bv = beta.data();
  std::vector<T> out(in.size());
  std::vector<T> xhat(in.size());
  std::vector<T> rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = in.data() + r * d;
    T mu = T(0);
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<T>(d);
    T var = T(0);
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<T>(d);
    rstd[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (row[j] - mu) * rstd[r];
      xhat[r * d + j] = h;
      out[r * d + j] = h * gv[j] + bv[j];
    }
  }
  return Tensor<T>::make_op(
      x.shape(), std::move(out), {x, gamma, beta},
      [d, rows, xhat = std::move(xhat), rstd = std::move(rstd)](Node<T>& n) {
        const auto& gv = n.parents[1]->value;
        if (wants_grad(n, 0)) {
          auto& gx = n.parents[0]->ensure_grad();
          for (std::size_t r = 0; r < rows; ++r) {
            T m1 = T(0), m2 = T(0);
            for (std::size_t j = 0; j < d; ++j) {
              const T dyh = n.grad[r * d + j] * gv[j];
              m1 += dyh;
              m2 += dyh * xhat[r * d + j];
            }
            m1 /= static_cast<T>(d);
            m2 /= static_cast<T>(d);
            for (std::size_t j = 0; j < d; ++j) {
              const T dyh = n.grad[r * d + j] * gv[j];
              gx[r * d + j] += rstd[r] * (dyh - m1 - xhat[r * d + j] * m2);
            }
          }
        }
        if (wants_grad(n, 1)) {
          auto& gg = n.parents[1]->ensure_grad();
          for (std::size_t i = 0; i < n.grad.size(); ++i) gg[i % d] += n.grad[i] * xhat[i];
        }
        if (wants_grad(n, 2)) {
          auto& gb = n.parents[2]->ensure_grad();
          for (std::size_t i = 0; i < n.grad.size(); ++i) gb[i % d] += n.grad[i];
        }
      });
}

template <class T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const std::int32_t> ids) {
  require_matrix(table.shape(), "embedding");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  std::vector<T> out(ids.size() * d);
  const auto tv = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw DimensionError("embedding: id " + std::to_string(ids[i]) + " outside table of " +
                           std::to_string(vocab) + " rows");
    }
    std::copy_n(tv.begin() + static_cast<std::ptrdiff_t>(ids[i] * d), d, out.begin() + i * d);
  }
  std::vector<std::int32_t> saved(ids.begin(), ids.end());
  return Tensor<T>::make_op({ids.size(), d}, std::move(out), {table},
                            [d, saved = std::move(saved)](Node<T>& n) {
                              auto& g = n.parents[0]->ensure_grad();
                              for (std::size_t i = 0; i < saved.size(); ++i) {
                                T* dst = g.data() + static_cast<std::size_t>(saved[i]) * d;
                                const T* src = n.grad.data() + i * d;
                                for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
                              }
                            });
}

template <class T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t begin, std::size_t end) {
  const auto s = split_at(x.shape(), axis, "slice");
  if (begin > end || end > s.n) {
    throw DimensionError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") outside axis of " + std::to_string(s.n));
  }
  const std::size_t w = end - begin;
  Shape shape = x.shape();
  shape[axis] = w;
  std::vector<T> out(s.outer * w * s.inner);
  const auto in = x.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy_n(in.begin() + static_cast<std::ptrdiff_t>((o * s.n + begin) * s.inner),
                w * s.inner, out.begin() + static_cast<std::ptrdiff_t>(o * w * s.inner));
  }
  return Tensor<T>::make_op(std::move(shape), std::move(out), {x}, [s, begin, w](Node<T>& n) {
    auto& g = n.parents[0]->ensure_grad();
    for (std::size_t o = 0; o < s.outer; ++o) {
      T* dst = g.data() + (o * s.n + begin) * s.inner;
      const T* src = n.grad.data() + o * w * s.inner;
      for (std::size_t j = 0; j < w * s.inner; ++j) dst[j] += src[j];
    }
  });
}

template <class T>
Tensor<T> concat(std::span<const Tensor<T>> parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat of zero tensors");
  const auto s0 = split_at(parts[0].shape(), axis, "concat");
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    Shape a = p.shape(), b = parts[0].shape();
    if (a.size() != b.size()) throw DimensionError("concat: rank mismatch");
    a[axis] = b[axis] = 0;
    if (a != b) throw DimensionError("concat: shapes disagree off the concat axis");
    widths.push_back(p.shape()[axis]);
    total += p.shape()[axis];
  }
  Shape shape = parts[0].shape();
  shape[axis] = total;
  std::vector<T> out(s0.outer * total * s0.inner);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto in = parts[k].data();
    const std::size_t w = widths[k];
    for (std::size_t o = 0; o < s0.outer; ++o) {
      std::copy_n(in.begin() + static_cast<std::ptrdiff_t>(o * w * s0.inner), w * s0.inner,
                  out.begin() + static_cast<std::ptrdiff_t>((o * total + offset) * s0.inner));
    }
    offset += w;
  }
  std::vector<Tensor<T>> parents(parts.begin(), parts.end());
  return Tensor<T>::make_op(
      std::move(shape), std::move(out), std::move(parents),
      [outer = s0.outer, inner = s0.inner, total, widths](Node<T>& n) {
        std::size_t offset = 0;
        for (std::size_t k = 0; k < widths.size(); ++k) {
          const std::size_t w = widths[k];
          if (wants_grad(n, k)) {
            auto& g = n.parents[k]->ensure_grad();
            for (std::size_t o = 0; o < outer; ++o) {
              const T* src = n.grad.data() + (o * total + offset) * inner;
              T* dst = g.data() + o * w * inner;
              for (std::size_t j = 0; j < w * inner; ++j) dst[j] += src[j];
            }
          }
          offset += w;
        }
      });
}

template <class T>
Tensor<T> causal_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                           std::size_t n_head) {
  require_matrix(q.shape(), "causal_attention");
  if (k.shape() != q.shape() || v.shape() != q.shape()) {
    throw DimensionError("causal_attention: q, k, v shapes differ");
  }
  const std::size_t len = q.dim(0), d = q.dim(1);
  if (n_head == 0 || d % n_head != 0) {
    throw DimensionError("causal_attention: width " + std::to_string(d) +
                         " not divisible by heads " + std::to_string(n_head));
  }
  const std::size_t dh = d / n_head;
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
  std::vector<T> out(len * d);
  std::vector<T> probs(n_head * len * len);
  const Eigen::OuterStride<> stride(static_cast<Eigen::Index>(d));
  for (std::size_t h = 0; h < n_head; ++h) {
    ConstStridedMap<T> qh(q.data().data() + h * dh, len, dh, stride);
    ConstStridedMap<T> kh(k.data().data() + h * dh, len, dh, stride);
    ConstStridedMap<T> vh(v.data().data() + h * dh, len, dh, stride);
    MatMap<T> p(probs.data() + h * len * len, len, len);
    p.noalias() = (qh * kh.transpose()) * inv_sqrt;
    for (std::size_t i = 0; i < len; ++i) {
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j <= i; ++j) mx = std::max(mx, p(i, j));
      T z = T(0);
      for (std::size_t j = 0; j <= i; ++j) {
        p(i, j) = std::exp(p(i, j) - mx);
        z += p(i, j);
      }
      for (std::size_t j = 0; j <= i; ++j) p(i, j) /= z;
      for (std::size_t j = i + 1; j < len; ++j) p(i, j) = T(0);
    }
    StridedMap<T>(out.data() + h * dh, len, dh, stride).noalias() = p * vh;
  }
  return Tensor<T>::make_op(
      q.shape(), std::move(out), {q, k, v},
      [len, d, dh, n_head, inv_sqrt, probs = std::move(probs)](Node<T>& n) {
        const Eigen::OuterStride<> stride(static_cast<Eigen::Index>(d));
        auto& pq = *n.parents[0];
        auto& pk = *n.parents[1];
        auto& pv = *n.parents[2];
        RowMat<T> dp(len, len);
        for (std::size_t h = 0; h < n_head; ++h) {
          ConstMatMap<T> p(probs.data() + h * len * len, len, len);
          ConstStridedMap<T> dout(n.grad.data() + h * dh, len, dh, stride);
          ConstStridedMap<T> qh(pq.value.data() + h * dh, len, dh, stride);
          ConstStridedMap<T> kh(pk.value.data() + h * dh, len, dh, stride);
          ConstStridedMap<T> vh(pv.value.data() + h * dh, len, dh, stride);
          if (pv.requires_grad) {
            StridedMap<T>(pv.ensure_grad().data() + h * dh, len, dh, stride).noalias() +=
                p.transpose() * dout;
          }
          if (!pq.requires_grad && !pk.requires_grad) continue;
          dp.noalias() = dout * vh.transpose();
          for (std::size_t i = 0; i < len; ++i) {
            T dot = T(0);
            for (std::size_t j = 0; j <= i; ++j) dot += p(i, j) * dp(i, j);
            for (std::size_t j = 0; j <= i; ++j) dp(i, j) = p(i, j) * (dp(i, j) - dot) * inv_sqrt;
            for (std::size_t j = i + 1; j < len; ++j) dp(i, j) = T(0);
          }
          if (pq.requires_grad) {
            StridedMap<T>(pq.ensure_grad().data() + h * dh, len, dh, stride).noalias() += dp * kh;
          }
          if (pk.requires_grad) {
            StridedMap<T>(pk.ensure_grad().data() + h * dh, len, dh, stride).noalias() +=
                dp.transpose() * qh;
          }
        }
      });
}

// ---------------------------------------------------------------------------
// backward / gradcheck

template <class T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward needs a scalar loss, got shape " +
                        (loss.defined() ? to_string(loss.shape()) : std::string("<undefined>")));
  }
  if (!loss.requires_grad()) throw ContractError("backward: loss does not depend on any parameter");

  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{loss.node().get(), 0}};
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (node->consumed) {
      throw ContractError("backward: graph already consumed by an earlier backward call");
    }
    if (next < node->parents.size()) {
      Node<T>* parent = node->parents[next++].get();
      if (parent->requires_grad && seen.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss.node()->ensure_grad()[0] = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* node = *it;
    if (!node->backward_fn) continue;  // leaf
    node->ensure_grad();
    node->backward_fn(*node);
  }
  // Release interior state; leaves keep their accumulated gradients.
  for (Node<T>* node : order) {
    if (!node->backward_fn) continue;
    node->consumed = true;
    node->backward_fn = nullptr;
    node->parents.clear();
    std::vector<T>().swap(node->grad);
  }
}

template <class T>
double gradcheck(const std::function<Tensor<T>()>& f, std::span<Tensor<T>> params, T eps) {
  return gradcheck(f, params, eps, 0, 0);
}

template <class T>
double gradcheck(const std::function<Tensor<T>()>& f, std::span<Tensor<T>> params, T eps,
                 std::size_t max_per_param, std::uint64_t seed) {
  for (auto& p : params) p.zero_grad();
  const Tensor<T> loss = f();
  if (!std::isfinite(static_cast<double>(loss.item()))) {
    throw EvaluationError("gradcheck: objective is not finite at the base point");
  }
  backward(loss);
  double worst = 0.0;
  for (auto& p : params) {
    std::vector<T> analytic(p.grad().begin(), p.grad().end());
    analytic.resize(p.numel(), T(0));
    auto values = p.mutable_data();
    std::vector<std::size_t> coords(values.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (max_per_param > 0 && coords.size() > max_per_param) {
      Rng rng(derive_seed(seed, static_cast<std::uint64_t>(&p - params.data())));
      rng.shuffle(coords);
      coords.resize(max_per_param);
      std::sort(coords.begin(), coords.end());
    }
    for (std::size_t i : coords) {
      const T orig = values[i];
      values[i] = orig + eps;
      const double up = static_cast<double>(f().item());
      values[i] = orig - eps;
      const double down = static_cast<double>(f().item());
      values[i] = orig;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        throw EvaluationError("gradcheck: objective is not finite near coordinate " +
                              std::to_string(i));
      }
      const double numeric = (up - down) / (2.0 * static_cast<double>(eps));
      const double a = static_cast<double>(analytic[i]);
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }
  return worst;
}

// ---------------------------------------------------------------------------
// instantiations

#define RAD_INSTANTIATE(T)                                                                      \
  template class Tensor<T>;                                                                    \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> scale(const Tensor<T>&, T);                                               \
  template Tensor<T> sum(const Tensor<T>&);                                                    \
  template Tensor<T> mean(const Tensor<T>&);                                                   \
  template Tensor<T> softmax(const Tensor<T>&, std::size_t);                                   \
  template Tensor<T> log(const Tensor<T>&);                                                    \
  template Tensor<T> exp(const Tensor<T>&);                                                    \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                \
  template Tensor<T> tanh(const Tensor<T>&);                                                   \
  template Tensor<T> gelu(const Tensor<T>&);                                                   \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);      \
  template Tensor<T> embedding(const Tensor<T>&, std::span<const std::int32_t>);               \
  template Tensor<T> slice(const Tensor<T>&, std::size_t, std::size_t, std::size_t);           \
  template Tensor<T> concat(std::span<const Tensor<T>>, std::size_t);                          \
  template Tensor<T> causal_attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,    \
                                      std::size_t);                                            \
  template void backward(const Tensor<T>&);                                                    \
  template double gradcheck(const std::function<Tensor<T>()>&, std::span<Tensor<T>>, T);              \
  template double gradcheck(const std::function<Tensor<T>()>&, std::span<Tensor<T>>, T, std::size_t,  \
                            std::uint64_t);

RAD_INSTANTIATE(float)
RAD_INSTANTIATE(double)

#undef RAD_INSTANTIATE

}  // namespace rad::ad
