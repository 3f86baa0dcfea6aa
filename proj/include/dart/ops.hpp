#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "dart/rng.hpp"
#include "dart/tape.hpp"
#include "dart/tensor.hpp"

// Differentiable op library. Every op pushes one node onto the tape and
// installs a closure that routes gradients back to its tracked inputs.
// Reductions and fused ops (softmax, cross-entropy, layernorm) are single
// nodes so the finite check sees their final values, not intermediates.

namespace dart {
namespace ops {

namespace detail {

// C[m,n] += A[m,k] * B[k,n]
template <typename T>
inline void gemm_nn(const T* a, const T* b, T* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    T* crow = c + static_cast<std::int64_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const T av = a[static_cast<std::int64_t>(i) * k + p];
      const T* brow = b + static_cast<std::int64_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m,n] += A[m,k] * B[n,k]^T  (rows of A dotted with rows of B)
template <typename T>
inline void gemm_nt(const T* a, const T* b, T* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const T* arow = a + static_cast<std::int64_t>(i) * k;
    for (int j = 0; j < n; ++j) {
      const T* brow = b + static_cast<std::int64_t>(j) * k;
      T s{0};
      for (int p = 0; p < k; ++p) s += arow[p] * brow[p];
      c[static_cast<std::int64_t>(i) * n + j] += s;
    }
  }
}

// C[m,n] += A[k,m]^T * B[k,n]
template <typename T>
inline void gemm_tn(const T* a, const T* b, T* c, int k, int m, int n) {
  for (int p = 0; p < k; ++p) {
    const T* arow = a + static_cast<std::int64_t>(p) * m;
    const T* brow = b + static_cast<std::int64_t>(p) * n;
    for (int i = 0; i < m; ++i) {
      const T av = arow[i];
      T* crow = c + static_cast<std::int64_t>(i) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename T>
inline void check_2d(const char* op, const Tensor<T>& t) {
  if (t.rank() != 2) throw ShapeError(std::string(op) + ": expected rank-2 tensor, got " + shape_str(t.shape));
}

}  // namespace detail

// ---- elementwise ----

template <typename T>
Var add(Tape<T>& tp, Var a, Var b) {
  const Tensor<T>& av = tp.val(a);
  const Tensor<T>& bv = tp.val(b);
  require_same_shape("add", av, bv);
  Tensor<T> out = av;
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  bool track = tp.tracked(a) || tp.tracked(b);
  Var o = tp.push(std::move(out), track, "add");
  if (track) {
    tp.set_backprop(o, [ai = a.id, bi = b.id, oi = o.id](Tape<T>& t) {
      const Tensor<T>& g = t.grad_ref(oi);
      t.accumulate(ai, g);
      t.accumulate(bi, g);
    });
  }
  return o;
}

template <typename T>
Var sub(Tape<T>& tp, Var a, Var b) {
  const Tensor<T>& av = tp.val(a);
  const Tensor<T>& bv = tp.val(b);
  require_same_shape("sub", av, bv);
  Tensor<T> out = av;
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  bool track = tp.tracked(a) || tp.tracked(b);
  Var o = tp.push(std::move(out), track, "sub");
  if (track) {
    tp.set_backprop(o, [ai = a.id, bi = b.id, oi = o.id](Tape<T>& t) {
      const Tensor<T>& g = t.grad_ref(oi);
      t.accumulate(ai, g);
      if (t.tracked(bi)) {
        Tensor<T> ng = g;
        for (auto& x : ng.data) x = -x;
        t.accumulate(bi, ng);
      }
    });
  }
  return o;
}

template <typename T>
Var mul(Tape<T>& tp, Var a, Var b) {
  const Tensor<T>& av = tp.val(a);
  const Tensor<T>& bv = tp.val(b);
  require_same_shape("mul", av, bv);
  Tensor<T> out = av;
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  bool track = tp.tracked(a) || tp.tracked(b);
  Var o = tp.push(std::move(out), track, "mul");
  if (track) {
    tp.set_backprop(o, [ai = a.id, bi = b.id, oi = o.id](Tape<T>& t) {
      const Tensor<T>& g = t.grad_ref(oi);
      if (t.tracked(ai)) {
        Tensor<T> ga = g;
        const Tensor<T>& bvv = t.value_of(bi);
        for (std::int64_t i = 0; i < ga.size(); ++i) ga[i] *= bvv[i];
        t.accumulate(ai, ga);
      }
      if (t.tracked(bi)) {
        Tensor<T> gb = g;
        const Tensor<T>& avv = t.value_of(ai);
        for (std::int64_t i = 0; i < gb.size(); ++i) gb[i] *= avv[i];
        t.accumulate(bi, gb);
      }
    });
  }
  return o;
}

template <typename T>
Var scale(Tape<T>& tp, Var a, T c) {
  Tensor<T> out = tp.val(a);
  for (auto& x : out.data) x *= c;
  bool track = tp.tracked(a);
  Var o = tp.push(std::move(out), track, "scale");
  if (track) {
    tp.set_backprop(o, [ai = a.id, oi = o.id, c](Tape<T>& t) {
      Tensor<T> g = t.grad_ref(oi);
      for (auto& x : g.data) x *= c;
      t.accumulate(ai, g);
    });
  }
  return o;
}

template <typename T>
Var add_scalar(Tape<T>& tp, Var a, T c) {
  Tensor<T> out = tp.val(a);
  for (auto& x : out.data) x += c;
  bool track = tp.tracked(a);
  Var o = tp.push(std::move(out), track, "add_scalar");
  if (track) {
    tp.set_backprop(o, [ai = a.id, oi = o.id](Tape<T>& t) { t.accumulate(ai, t.grad_ref(oi)); });
  }
  return o;
}

// X[m,n] + v[n], broadcast over rows.
template <typename T>
Var add_rowvec(Tape<T>& tp, Var x, Var v) {
  const Tensor<T>& xv = tp.val(x);
  const Tensor<T>& vv = tp.val(v);
  detail::check_2d("add_rowvec", xv);
  const int m = xv.shape[0], n = xv.shape[1];
  if (vv.size() != n)
    throw ShapeError("add_rowvec: x " + shape_str(xv.shape) + " vs v " + shape_str(vv.shape));
  Tensor<T> out = xv;
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.data[static_cast<std::size_t>(i) * n + j] += vv[j];
  bool track = tp.tracked(x) || tp.tracked(v);
  Var o = tp.push(std::move(out), track, "add_rowvec");
  if (track) {
    tp.set_backprop(o, [xi = x.id, vi = v.id, oi = o.id, m, n](Tape<T>& t) {
      const Tensor<T>& g = t.grad_ref(oi);
      t.accumulate(xi, g);
      if (t.tracked(vi)) {
        Tensor<T> gv = Tensor<T>::zeros(t.value_of(vi).shape);
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j) gv[j] += g[static_cast<std::int64_t>(i) * n + j];
        t.accumulate(vi, gv);
      }
    });
  }
  return o;
}

// ---- activations ----

template <typename T>
Var relu(Tape<T>& tp, Var a) {
  Tensor<T> out = tp.val(a);
  for (auto& x : out.data) x = x > T{0} ? x : T{0};
  bool track = tp.tracked(a);
  Var o = tp.push(std::move(out), track, "relu");
  if (track) {
    tp.set_backprop(o, [ai = a.id, oi = o.id](Tape<T>& t) {
      Tensor<T> g = t.grad_ref(oi);
      const Tensor<T>& av = t.value_of(ai);
      for (std::int64_t i = 0; i < g.size(); ++i)
        if (av[i] <= T{0}) g[i] = T{0};
      t.accumulate(ai, g);
    });
  }
  return o;
}

template <typename T>
Var sigmoid(Tape<T>& tp, Var a) {
  Tensor<T> out = tp.val(a);
  for (auto& x : out.data) x = T{1} / (T{1} + std::exp(-x));
  bool track = tp.tracked(a);
  Var o = tp.push(std::move(out), track, "sigmoid");
  if (track) {
    tp.set_backprop(o, [ai = a.id, oi = o.id](Tape<T>& t) {
      Tensor<T> g = t.grad_ref(oi);
      const Tensor<T>& ov = t.value_of(oi);
      for (std::int64_t i = 0; i < g.size(); ++i) g[i] *= ov[i] * (T{1} - ov[i]);
      t.accumulate(ai, g);
    });
  }
  return o;
}

template <typename T>
Var tanh(Tape<T>& tp, Var a) {
  Tensor<T> out = tp.val(a);
  for (auto& x : out.data) x = std::tanh(x);
  bool track = tp.tracked(a);
  Var o = tp.push(std::move(out), track, "tanh");
  if (track) {
    tp.set_backprop(o, [ai = a.id, oi = o.id](Tape<T>& t) {
      Tensor<T> g = t.grad_ref(oi);
      const Tensor<T>& ov = t.value_of(oi);
      for (std::int64_t i = 0; i < g.size(); ++i) g[i] *= T{1} - ov[i] * ov[i];
      t.accumulate(ai, g);
    });
  }
  return o;
}

// x * sigmoid(x)
template <typename T>
Var swish(Tape<T>& tp, Var a) {
  const Tensor<T>& av = tp.val(a);
  Tensor<T> out = av;
  for (auto& x : out.data) x = x / (T{1} + std::exp(-x));
  bool track = tp.tracked(a);
  Var o = tp.push(std::move(out), track, "swish");
  if (track) {
    tp.set_backprop(o, [ai = a.id, oi = o.id](Tape<T>& t) {
      Tensor<T> g = t.grad_ref(oi);
      const Tensor<T>& x = t.value_of(ai);
      for (std::int64_t i = 0; i < g.size(); ++i) {
        const T s = T{1} / (T{1} + std::exp(-x[i]));
        g[i] *= s * (T{1} + x[i] * (T{1} - s));
      }
      t.accumulate(ai, g);
    });
  }
  return o;
}

// Exact erf form.
template <typename T>
Var gelu(Tape<T>& tp, Var a) {
  const Tensor<T>& av = tp.val(a);
  Tensor<T> out = av;
  const T inv_sqrt2 = static_cast<T>(0.7071067811865475244);
  for (auto& x : out.data) x = T{0.5} * x * (T{1} + std::erf(x * inv_sqrt2));
  bool track = tp.tracked(a);
  Var o = tp.push(std::move(out), track, "gelu");
  if (track) {
    tp.set_backprop(o, [ai = a.id, oi = o.id, inv_sqrt2](Tape<T>& t) {
      Tensor<T> g = t.grad_ref(oi);
      const Tensor<T>& x = t.value_of(ai);
      const T inv_sqrt2pi = static_cast<T>(0.3989422804014326779);
      for (std::int64_t i = 0; i < g.size(); ++i) {
        const T cdf = T{0.5} * (T{1} + std::erf(x[i] * inv_sqrt2));
        const T pdf = inv_sqrt2pi * std::exp(T{-0.5} * x[i] * x[i]);
        g[i] *= cdf + x[i] * pdf;
      }
      t.accumulate(ai, g);
    });
  }
  return o;
}

template <typename T>
Var exp(Tape<T>& tp, Var a) {
  Tensor<T> out = tp.val(a);
  for (auto& x : out.data) x = std::exp(x);
  bool track = tp.tracked(a);
  Var o = tp.push(std::move(out), track, "exp");
  if (track) {
    tp.set_backprop(o, [ai = a.id, oi = o.id](Tape<T>& t) {
      Tensor<T> g = t.grad_ref(oi);
      const Tensor<T>& ov = t.value_of(oi);
      for (std::int64_t i = 0; i < g.size(); ++i) g[i] *= ov[i];
      t.accumulate(ai, g);
    });
  }
  return o;
}

// ---- matmul family (rank-2 only) ----

template <typename T>
Var matmul(Tape<T>& tp, Var a, Var b) {
  const Tensor<T>& av = tp.val(a);
  const Tensor<T>& bv = tp.val(b);
  detail::check_2d("matmul", av);
  detail::check_2d("matmul", bv);
  const int m = av.shape[0], k = av.shape[1], n = bv.shape[1];
  if (bv.shape[0] != k)
    throw ShapeError("matmul: " + shape_str(av.shape) + " x " + shape_str(bv.shape));
  Tensor<T> out = Tensor<T>::zeros({m, n});
  detail::gemm_nn(av.data.data(), bv.data.data(), out.data.data(), m, k, n);
  bool track = tp.tracked(a) || tp.tracked(b);
  Var o = tp.push(std::move(out), track, "matmul");
  if (track) {
    tp.set_backprop(o, [ai = a.id, bi = b.id, oi = o.id, m, k, n](Tape<T>& t) {
      const Tensor<T>& g = t.grad_ref(oi);
      if (t.tracked(ai)) {
        Tensor<T> ga = Tensor<T>::zeros({m, k});
        detail::gemm_nt(g.data.data(), t.value_of(bi).data.data(), ga.data.data(), m, n, k);
        t.accumulate(ai, ga);
      }
      if (t.tracked(bi)) {
        Tensor<T> gb = Tensor<T>::zeros({k, n});
        detail::gemm_tn(t.value_of(ai).data.data(), g.data.data(), gb.data.data(), m, k, n);
        t.accumulate(bi, gb);
      }
    });
  }
  return o;
}

// A[m,k] * B[n,k]^T -> [m,n]
template <typename T>
Var matmul_nt(Tape<T>& tp, Var a, Var b) {
  const Tensor<T>& av = tp.val(a);
  const Tensor<T>& bv = tp.val(b);
  detail::check_2d("matmul_nt", av);
  detail::check_2d("matmul_nt", bv);
  const int m = av.shape[0], k = av.shape[1], n = bv.shape[0];
  if (bv.shape[1] != k)
    throw ShapeError("matmul_nt: " + shape_str(av.shape) + " x " + shape_str(bv.shape) + "^T");
  Tensor<T> out = Tensor<T>::zeros({m, n});
  detail::gemm_nt(av.data.data(), bv.data.data(), out.data.data(), m, k, n);
  bool track = tp.tracked(a) || tp.tracked(b);
  Var o = tp.push(std::move(out), track, "matmul_nt");
  if (track) {
    tp.set_backprop(o, [ai = a.id, bi = b.id, oi = o.id, m, k, n](Tape<T>& t) {
      const Tensor<T>& g = t.grad_ref(oi);
      if (t.tracked(ai)) {
        Tensor<T> ga = Tensor<T>::zeros({m, k});
        detail::gemm_nn(g.data.data(), t.value_of(bi).data.data(), ga.data.data(), m, n, k);
        t.accumulate(ai, ga);
      }
      if (t.tracked(bi)) {
        Tensor<T> gb = Tensor<T>::zeros({n, k});
        detail::gemm_tn(g.data.data(), t.value_of(ai).data.data(), gb.data.data(), m, n, k);
        t.accumulate(bi, gb);
      }
    });
  }
  return o;
}

// A[k,m]^T * B[k,n] -> [m,n]
template <typename T>
Var matmul_tn(Tape<T>& tp, Var a, Var b) {
  const Tensor<T>& av = tp.val(a);
  const Tensor<T>& bv = tp.val(b);
  detail::check_2d("matmul_tn", av);
  detail::check_2d("matmul_tn", bv);
  const int k = av.shape[0], m = av.shape[1], n = bv.shape[1];
  if (bv.shape[0] != k)
    throw ShapeError("matmul_tn: " + shape_str(av.shape) + "^T x " + shape_str(bv.shape));
  Tensor<T> out = Tensor<T>::zeros({m, n});
  detail::gemm_tn(av.data.data(), bv.data.data(), out.data.data(), k, m, n);
  bool track = tp.tracked(a) || tp.tracked(b);
  Var o = tp.push(std::move(out), track, "matmul_tn");
  if (track) {
    tp.set_backprop(o, [ai = a.id, bi = b.id, oi = o.id, k, m, n](Tape<T>& t) {
      const Tensor<T>& g = t.grad_ref(oi);
      if (t.tracked(ai)) {
        Tensor<T> ga = Tensor<T>::zeros({k, m});
        detail::gemm_nt(t.value_of(bi).data.data(), g.data.data(), ga.data.data(), k, n, m);
        t.accumulate(ai, ga);
      }
      if (t.tracked(bi)) {
        Tensor<T> gb = Tensor<T>::zeros({k, n});
        detail::gemm_nn(t.value_of(ai).data.data(), g.data.data(), gb.data.data(), k, m, n);
        t.accumulate(bi, gb);
      }
    });
  }
  return o;
}

// ---- normalization and softmax ----

// Row-wise layernorm with affine gain/bias. eps inside the sqrt.
template <typename T>
Var layernorm(Tape<T>& tp, Var x, Var gain, Var bias, T eps = static_cast<T>(1e-5)) {
  const Tensor<T>& xv = tp.val(x);
  detail::check_2d("layernorm", xv);
  const int m = xv.shape[0], n = xv.shape[1];
  const Tensor<T>& gv = tp.val(gain);
  const Tensor<T>& bv = tp.val(bias);
  if (gv.size() != n || bv.size() != n)
    throw ShapeError("layernorm: gain/bias must have " + std::to_string(n) + " entries");

  Tensor<T> xhat = Tensor<T>::zeros({m, n});
  Tensor<T> rstd = Tensor<T>::zeros({m});
  Tensor<T> out = Tensor<T>::zeros({m, n});
  for (int i = 0; i < m; ++i) {
    const T* row = xv.data.data() + static_cast<std::int64_t>(i) * n;
    T mu{0};
    for (int j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<T>(n);
    T var{0};
    for (int j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<T>(n);
    const T rs = T{1} / std::sqrt(var + eps);
    rstd[i] = rs;
    for (int j = 0; j < n; ++j) {
      const T xh = (row[j] - mu) * rs;
      xhat.data[static_cast<std::size_t>(i) * n + j] = xh;
      out.data[static_cast<std::size_t>(i) * n + j] = gv[j] * xh + bv[j];
    }
  }
  bool track = tp.tracked(x) || tp.tracked(gain) || tp.tracked(bias);
  Var o = tp.push(std::move(out), track, "layernorm");
  if (track) {
    tp.set_backprop(o, [xi = x.id, gi = gain.id, bi = bias.id, oi = o.id, xhat, rstd, m, n](Tape<T>& t) {
      const Tensor<T>& g = t.grad_ref(oi);
      const Tensor<T>& gv = t.value_of(gi);
      if (t.tracked(gi) || t.tracked(bi)) {
        Tensor<T> gg = Tensor<T>::zeros({n});
        Tensor<T> gb = Tensor<T>::zeros({n});
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j) {
            const T gij = g[static_cast<std::int64_t>(i) * n + j];
            gg[j] += gij * xhat[static_cast<std::int64_t>(i) * n + j];
            gb[j] += gij;
          }
        if (t.tracked(gi)) {
          gg.shape = t.value_of(gi).shape;
          t.accumulate(gi, gg);
        }
        if (t.tracked(bi)) {
          gb.shape = t.value_of(bi).shape;
          t.accumulate(bi, gb);
        }
      }
      if (t.tracked(xi)) {
        Tensor<T> gx = Tensor<T>::zeros({m, n});
        for (int i = 0; i < m; ++i) {
          const T rs = rstd[i];
          T sum_dxhat{0}, sum_dxhat_xhat{0};
          for (int j = 0; j < n; ++j) {
            const std::int64_t idx = static_cast<std::int64_t>(i) * n + j;
            const T dxh = g[idx] * gv[j];
            sum_dxhat += dxh;
            sum_dxhat_xhat += dxh * xhat[idx];
          }
          const T inv_n = T{1} / static_cast<T>(n);
          for (int j = 0; j < n; ++j) {
            const std::int64_t idx = static_cast<std::int64_t>(i) * n + j;
            const T dxh = g[idx] * gv[j];
            gx[idx] = rs * (dxh - inv_n * sum_dxhat - xhat[idx] * inv_n * sum_dxhat_xhat);
          }
        }
        gx.shape = t.value_of(xi).shape;
        t.accumulate(xi, gx);
      }
    });
  }
  return o;
}

namespace detail {

// Shared softmax kernel: rows of x, key j allowed for query i iff
// allowed(i,j). Max-subtraction and normalization run over allowed keys
// only; disallowed entries are exactly zero in the output.
template <typename T, typename AllowFn>
Tensor<T> masked_softmax_forward(const Tensor<T>& xv, AllowFn allowed, const char* op) {
  check_2d(op, xv);
  const int m = xv.shape[0], n = xv.shape[1];
  Tensor<T> out = Tensor<T>::zeros({m, n});
  for (int i = 0; i < m; ++i) {
    const T* row = xv.data.data() + static_cast<std::int64_t>(i) * n;
    T mx = -std::numeric_limits<T>::infinity();
    int count = 0;
    for (int j = 0; j < n; ++j)
      if (allowed(i, j)) {
        mx = std::max(mx, row[j]);
        ++count;
      }
    if (count == 0) throw ContractError(std::string(op) + ": row " + std::to_string(i) + " has no allowed keys");
    T denom{0};
    for (int j = 0; j < n; ++j)
      if (allowed(i, j)) denom += std::exp(row[j] - mx);
    for (int j = 0; j < n; ++j)
      if (allowed(i, j)) out.data[static_cast<std::size_t>(i) * n + j] = std::exp(row[j] - mx) / denom;
  }
  return out;
}

// dx_ij = y_ij * (g_ij - sum_k g_ik y_ik), restricted to allowed keys.
template <typename T, typename AllowFn>
void masked_softmax_backward(const Tensor<T>& y, const Tensor<T>& g, Tensor<T>& gx, AllowFn allowed) {
  const int m = y.shape[0], n = y.shape[1];
  for (int i = 0; i < m; ++i) {
    T dot{0};
    for (int j = 0; j < n; ++j)
      if (allowed(i, j)) dot += g[static_cast<std::int64_t>(i) * n + j] * y[static_cast<std::int64_t>(i) * n + j];
    for (int j = 0; j < n; ++j)
      if (allowed(i, j)) {
        const std::int64_t idx = static_cast<std::int64_t>(i) * n + j;
        gx[idx] = y[idx] * (g[idx] - dot);
      }
  }
}

}  // namespace detail

template <typename T>
Var softmax_rows(Tape<T>& tp, Var x) {
  auto all = [](int, int) { return true; };
  Tensor<T> out = detail::masked_softmax_forward(tp.val(x), all, "softmax_rows");
  bool track = tp.tracked(x);
  Var o = tp.push(std::move(out), track, "softmax_rows");
  if (track) {
    tp.set_backprop(o, [xi = x.id, oi = o.id](Tape<T>& t) {
      const Tensor<T>& y = t.value_of(oi);
      Tensor<T> gx = Tensor<T>::zeros(y.shape);
      detail::masked_softmax_backward(y, t.grad_ref(oi), gx, [](int, int) { return true; });
      t.accumulate(xi, gx);
    });
  }
  return o;
}

// Square score matrix; query i may attend keys j <= i.
template <typename T>
Var causal_softmax_rows(Tape<T>& tp, Var x) {
  auto causal = [](int i, int j) { return j <= i; };
  const Tensor<T>& xv = tp.val(x);
  if (xv.rank() != 2 || xv.shape[0] != xv.shape[1])
    throw ShapeError("causal_softmax_rows: expected square matrix, got " + shape_str(xv.shape));
  Tensor<T> out = detail::masked_softmax_forward(xv, causal, "causal_softmax_rows");
  bool track = tp.tracked(x);
  Var o = tp.push(std::move(out), track, "causal_softmax_rows");
  if (track) {
    tp.set_backprop(o, [xi = x.id, oi = o.id](Tape<T>& t) {
      const Tensor<T>& y = t.value_of(oi);
      Tensor<T> gx = Tensor<T>::zeros(y.shape);
      detail::masked_softmax_backward(y, t.grad_ref(oi), gx, [](int i, int j) { return j <= i; });
      t.accumulate(xi, gx);
    });
  }
  return o;
}

// Column mask shared by every query row: key j participates iff keep[j].
template <typename T>
Var keymask_softmax_rows(Tape<T>& tp, Var x, std::vector<std::uint8_t> keep) {
  const Tensor<T>& xv = tp.val(x);
  detail::check_2d("keymask_softmax_rows", xv);
  if (static_cast<int>(keep.size()) != xv.shape[1])
    throw ShapeError("keymask_softmax_rows: mask length " + std::to_string(keep.size()) + " vs " +
                     std::to_string(xv.shape[1]) + " keys");
  auto allow = [&keep](int, int j) { return keep[static_cast<std::size_t>(j)] != 0; };
  Tensor<T> out = detail::masked_softmax_forward(xv, allow, "keymask_softmax_rows");
  bool track = tp.tracked(x);
  Var o = tp.push(std::move(out), track, "keymask_softmax_rows");
  if (track) {
    tp.set_backprop(o, [xi = x.id, oi = o.id, keep = std::move(keep)](Tape<T>& t) {
      const Tensor<T>& y = t.value_of(oi);
      Tensor<T> gx = Tensor<T>::zeros(y.shape);
      detail::masked_softmax_backward(y, t.grad_ref(oi), gx,
                                      [&keep](int, int j) { return keep[static_cast<std::size_t>(j)] != 0; });
      t.accumulate(xi, gx);
    });
  }
  return o;
}

template <typename T>
Var log_softmax_rows(Tape<T>& tp, Var x) {
  const Tensor<T>& xv = tp.val(x);
  detail::check_2d("log_softmax_rows", xv);
  const int m = xv.shape[0], n = xv.shape[1];
  Tensor<T> out = Tensor<T>::zeros({m, n});
  for (int i = 0; i < m; ++i) {
    const T* row = xv.data.data() + static_cast<std::int64_t>(i) * n;
    T mx = row[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    T denom{0};
    for (int j = 0; j < n; ++j) denom += std::exp(row[j] - mx);
    const T lse = mx + std::log(denom);
    for (int j = 0; j < n; ++j) out.data[static_cast<std::size_t>(i) * n + j] = row[j] - lse;
  }
  bool track = tp.tracked(x);
  Var o = tp.push(std::move(out), track, "log_softmax_rows");
  if (track) {
    tp.set_backprop(o, [xi = x.id, oi = o.id, m, n](Tape<T>& t) {
      const Tensor<T>& lp = t.value_of(oi);
      const Tensor<T>& g = t.grad_ref(oi);
      Tensor<T> gx = Tensor<T>::zeros(lp.shape);
      for (int i = 0; i < m; ++i) {
        T gsum{0};
        for (int j = 0; j < n; ++j) gsum += g[static_cast<std::int64_t>(i) * n + j];
        for (int j = 0; j < n; ++j) {
          const std::int64_t idx = static_cast<std::int64_t>(i) * n + j;
          gx[idx] = g[idx] - std::exp(lp[idx]) * gsum;
        }
      }
      t.accumulate(xi, gx);
    });
  }
  return o;
}

// Mean over rows of -log softmax(logits)[target]. Fused: one node, stable
// log-sum-exp inside.
template <typename T>
Var cross_entropy_rows(Tape<T>& tp, Var logits, std::vector<int> targets) {
  const Tensor<T>& xv = tp.val(logits);
  detail::check_2d("cross_entropy_rows", xv);
  const int m = xv.shape[0], n = xv.shape[1];
  if (static_cast<int>(targets.size()) != m)
    throw ShapeError("cross_entropy_rows: " + std::to_string(targets.size()) + " targets for " + std::to_string(m) +
                     " rows");
  for (int t : targets)
    if (t < 0 || t >= n) throw ContractError("cross_entropy_rows: target " + std::to_string(t) + " out of range");

  Tensor<T> probs = Tensor<T>::zeros({m, n});
  T loss{0};
  for (int i = 0; i < m; ++i) {
    const T* row = xv.data.data() + static_cast<std::int64_t>(i) * n;
    T mx = row[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    T denom{0};
    for (int j = 0; j < n; ++j) denom += std::exp(row[j] - mx);
    for (int j = 0; j < n; ++j) probs.data[static_cast<std::size_t>(i) * n + j] = std::exp(row[j] - mx) / denom;
    loss += mx + std::log(denom) - row[targets[static_cast<std::size_t>(i)]];
  }
  loss /= static_cast<T>(m);
  bool track = tp.tracked(logits);
  Var o = tp.push(Tensor<T>::scalar(loss), track, "cross_entropy_rows");
  if (track) {
    tp.set_backprop(o, [xi = logits.id, oi = o.id, probs = std::move(probs), targets = std::move(targets), m,
                        n](Tape<T>& t) {
      const T gy = t.grad_ref(oi)[0];
      Tensor<T> gx = probs;
      const T inv_m = T{1} / static_cast<T>(m);
      for (int i = 0; i < m; ++i) {
        gx[static_cast<std::int64_t>(i) * n + targets[static_cast<std::size_t>(i)]] -= T{1};
        for (int j = 0; j < n; ++j) gx[static_cast<std::int64_t>(i) * n + j] *= gy * inv_m;
      }
      gx.shape = t.value_of(xi).shape;
      t.accumulate(xi, gx);
    });
  }
  return o;
}

// ---- reductions and losses ----

template <typename T>
Var sum_all(Tape<T>& tp, Var x) {
  const Tensor<T>& xv = tp.val(x);
  T s{0};
  for (auto v : xv.data) s += v;
  bool track = tp.tracked(x);
  Var o = tp.push(Tensor<T>::scalar(s), track, "sum_all");
  if (track) {
    tp.set_backprop(o, [xi = x.id, oi = o.id](Tape<T>& t) {
      const T gy = t.grad_ref(oi)[0];
      Tensor<T> gx = Tensor<T>::full(t.value_of(xi).shape, gy);
      t.accumulate(xi, gx);
    });
  }
  return o;
}

template <typename T>
Var mean_all(Tape<T>& tp, Var x) {
  const Tensor<T>& xv = tp.val(x);
  T s{0};
  for (auto v : xv.data) s += v;
  s /= static_cast<T>(xv.size());
  bool track = tp.tracked(x);
  Var o = tp.push(Tensor<T>::scalar(s), track, "mean_all");
  if (track) {
    tp.set_backprop(o, [xi = x.id, oi = o.id](Tape<T>& t) {
      const Tensor<T>& xvv = t.value_of(xi);
      const T gy = t.grad_ref(oi)[0] / static_cast<T>(xvv.size());
      Tensor<T> gx = Tensor<T>::full(xvv.shape, gy);
      t.accumulate(xi, gx);
    });
  }
  return o;
}

template <typename T>
Var mse_loss(Tape<T>& tp, Var pred, const Tensor<T>& target) {
  const Tensor<T>& pv = tp.val(pred);
  require_same_shape("mse_loss", pv, target);
  T s{0};
  for (std::int64_t i = 0; i < pv.size(); ++i) {
    const T d = pv[i] - target[i];
    s += d * d;
  }
  s /= static_cast<T>(pv.size());
  bool track = tp.tracked(pred);
  Tensor<T> tgt = target;  // copy before push: target may alias tape storage
  Var o = tp.push(Tensor<T>::scalar(s), track, "mse_loss");
  if (track) {
    tp.set_backprop(o, [pi = pred.id, oi = o.id, tgt = std::move(tgt)](Tape<T>& t) {
      const Tensor<T>& pv = t.value_of(pi);
      const T gy = t.grad_ref(oi)[0];
      Tensor<T> gx = Tensor<T>::zeros(pv.shape);
      const T c = T{2} * gy / static_cast<T>(pv.size());
      for (std::int64_t i = 0; i < pv.size(); ++i) gx[i] = c * (pv[i] - tgt[i]);
      t.accumulate(pi, gx);
    });
  }
  return o;
}

template <typename T>
Var l1_loss(Tape<T>& tp, Var pred, const Tensor<T>& target) {
  const Tensor<T>& pv = tp.val(pred);
  require_same_shape("l1_loss", pv, target);
  T s{0};
  for (std::int64_t i = 0; i < pv.size(); ++i) s += std::abs(pv[i] - target[i]);
  s /= static_cast<T>(pv.size());
  bool track = tp.tracked(pred);
  Tensor<T> tgt = target;  // copy before push: target may alias tape storage
  Var o = tp.push(Tensor<T>::scalar(s), track, "l1_loss");
  if (track) {
    tp.set_backprop(o, [pi = pred.id, oi = o.id, tgt = std::move(tgt)](Tape<T>& t) {
      const Tensor<T>& pv = t.value_of(pi);
      const T gy = t.grad_ref(oi)[0] / static_cast<T>(pv.size());
      Tensor<T> gx = Tensor<T>::zeros(pv.shape);
      for (std::int64_t i = 0; i < pv.size(); ++i) {
        const T d = pv[i] - tgt[i];
        gx[i] = d > T{0} ? gy : (d < T{0} ? -gy : T{0});
      }
      t.accumulate(pi, gx);
    });
  }
  return o;
}

// ---- structural ----

template <typename T>
Var reshape(Tape<T>& tp, Var x, Shape shape) {
  const Tensor<T>& xv = tp.val(x);
  if (numel(shape) != xv.size())
    throw ShapeError("reshape: " + shape_str(xv.shape) + " -> " + shape_str(shape) + " changes element count");
  Tensor<T> out = xv;
  out.shape = shape;
  bool track = tp.tracked(x);
  Var o = tp.push(std::move(out), track, "reshape");
  if (track) {
    tp.set_backprop(o, [xi = x.id, oi = o.id](Tape<T>& t) {
      Tensor<T> g = t.grad_ref(oi);
      g.shape = t.value_of(xi).shape;
      t.accumulate(xi, g);
    });
  }
  return o;
}

template <typename T>
Var slice_rows(Tape<T>& tp, Var x, int r0, int r1) {
  const Tensor<T>& xv = tp.val(x);
  detail::check_2d("slice_rows", xv);
  const int m = xv.shape[0], n = xv.shape[1];
  if (r0 < 0 || r1 > m || r0 >= r1)
    throw ShapeError("slice_rows: [" + std::to_string(r0) + "," + std::to_string(r1) + ") of " + std::to_string(m) +
                     " rows");
  Tensor<T> out = Tensor<T>::zeros({r1 - r0, n});
  std::copy(xv.data.begin() + static_cast<std::int64_t>(r0) * n, xv.data.begin() + static_cast<std::int64_t>(r1) * n,
            out.data.begin());
  bool track = tp.tracked(x);
  Var o = tp.push(std::move(out), track, "slice_rows");
  if (track) {
    tp.set_backprop(o, [xi = x.id, oi = o.id, r0, n](Tape<T>& t) {
      if (!t.tracked(xi)) return;
      const Tensor<T>& g = t.grad_ref(oi);
      Tensor<T>& gx = t.grad_ref(xi);
      for (std::int64_t i = 0; i < g.size(); ++i) gx[static_cast<std::int64_t>(r0) * n + i] += g[i];
    });
  }
  return o;
}

template <typename T>
Var slice_cols(Tape<T>& tp, Var x, int c0, int c1) {
  const Tensor<T>& xv = tp.val(x);
  detail::check_2d("slice_cols", xv);
  const int m = xv.shape[0], n = xv.shape[1];
  if (c0 < 0 || c1 > n || c0 >= c1)
    throw ShapeError("slice_cols: [" + std::to_string(c0) + "," + std::to_string(c1) + ") of " + std::to_string(n) +
                     " cols");
  const int w = c1 - c0;
  Tensor<T> out = Tensor<T>::zeros({m, w});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < w; ++j)
      out.data[static_cast<std::size_t>(i) * w + j] = xv.data[static_cast<std::size_t>(i) * n + c0 + j];
  bool track = tp.tracked(x);
  Var o = tp.push(std::move(out), track, "slice_cols");
  if (track) {
    tp.set_backprop(o, [xi = x.id, oi = o.id, c0, m, n, w](Tape<T>& t) {
      if (!t.tracked(xi)) return;
      const Tensor<T>& g = t.grad_ref(oi);
      Tensor<T>& gx = t.grad_ref(xi);
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < w; ++j)
          gx[static_cast<std::int64_t>(i) * n + c0 + j] += g[static_cast<std::int64_t>(i) * w + j];
    });
  }
  return o;
}

template <typename T>
Var concat_rows(Tape<T>& tp, const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const int n = tp.val(parts[0]).shape.back();
  int m = 0;
  bool track = false;
  for (Var p : parts) {
    const Tensor<T>& v = tp.val(p);
    detail::check_2d("concat_rows", v);
    if (v.shape[1] != n) throw ShapeError("concat_rows: column mismatch " + shape_str(v.shape));
    m += v.shape[0];
    track = track || tp.tracked(p);
  }
  Tensor<T> out = Tensor<T>::zeros({m, n});
  std::int64_t off = 0;
  for (Var p : parts) {
    const Tensor<T>& v = tp.val(p);
    std::copy(v.data.begin(), v.data.end(), out.data.begin() + off);
    off += v.size();
  }
  Var o = tp.push(std::move(out), track, "concat_rows");
  if (track) {
    std::vector<int> ids;
    ids.reserve(parts.size());
    for (Var p : parts) ids.push_back(p.id);
    tp.set_backprop(o, [ids = std::move(ids), oi = o.id](Tape<T>& t) {
      const Tensor<T>& g = t.grad_ref(oi);
      std::int64_t off = 0;
      for (int id : ids) {
        const Tensor<T>& v = t.value_of(id);
        if (t.tracked(id)) {
          Tensor<T> gp = Tensor<T>::zeros(v.shape);
          std::copy(g.data.begin() + off, g.data.begin() + off + v.size(), gp.data.begin());
          t.accumulate(id, gp);
        }
        off += v.size();
      }
    });
  }
  return o;
}

template <typename T>
Var concat_cols(Tape<T>& tp, const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const int m = tp.val(parts[0]).shape[0];
  int n = 0;
  bool track = false;
  for (Var p : parts) {
    const Tensor<T>& v = tp.val(p);
    detail::check_2d("concat_cols", v);
    if (v.shape[0] != m) throw ShapeError("concat_cols: row mismatch " + shape_str(v.shape));
    n += v.shape[1];
    track = track || tp.tracked(p);
  }
  Tensor<T> out = Tensor<T>::zeros({m, n});
  int coff = 0;
  for (Var p : parts) {
    const Tensor<T>& v = tp.val(p);
    const int w = v.shape[1];
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < w; ++j)
        out.data[static_cast<std::size_t>(i) * n + coff + j] = v.data[static_cast<std::size_t>(i) * w + j];
    coff += w;
  }
  Var o = tp.push(std::move(out), track, "concat_cols");
  if (track) {
    std::vector<int> ids;
    ids.reserve(parts.size());
    for (Var p : parts) ids.push_back(p.id);
    tp.set_backprop(o, [ids = std::move(ids), oi = o.id, m, n](Tape<T>& t) {
      const Tensor<T>& g = t.grad_ref(oi);
      int coff = 0;
      for (int id : ids) {
        const Tensor<T>& v = t.value_of(id);
        const int w = v.shape[1];
        if (t.tracked(id)) {
          Tensor<T> gp = Tensor<T>::zeros(v.shape);
          for (int i = 0; i < m; ++i)
            for (int j = 0; j < w; ++j)
              gp[static_cast<std::int64_t>(i) * w + j] = g[static_cast<std::int64_t>(i) * n + coff + j];
          t.accumulate(id, gp);
        }
        coff += w;
      }
    });
  }
  return o;
}

template <typename T>
Var gather_rows(Tape<T>& tp, Var x, std::vector<int> rows) {
  const Tensor<T>& xv = tp.val(x);
  detail::check_2d("gather_rows", xv);
  const int m = xv.shape[0], n = xv.shape[1];
  for (int r : rows)
    if (r < 0 || r >= m) throw ContractError("gather_rows: row " + std::to_string(r) + " out of range");
  Tensor<T> out = Tensor<T>::zeros({static_cast<int>(rows.size()), n});
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy(xv.data.begin() + static_cast<std::int64_t>(rows[i]) * n,
              xv.data.begin() + static_cast<std::int64_t>(rows[i] + 1) * n, out.data.begin() + static_cast<std::int64_t>(i) * n);
  bool track = tp.tracked(x);
  Var o = tp.push(std::move(out), track, "gather_rows");
  if (track) {
    tp.set_backprop(o, [xi = x.id, oi = o.id, rows = std::move(rows), n](Tape<T>& t) {
      if (!t.tracked(xi)) return;
      const Tensor<T>& g = t.grad_ref(oi);
      Tensor<T>& gx = t.grad_ref(xi);
      for (std::size_t i = 0; i < rows.size(); ++i)
        for (int j = 0; j < n; ++j)
          gx[static_cast<std::int64_t>(rows[i]) * n + j] += g[static_cast<std::int64_t>(i) * n + j];
    });
  }
  return o;
}

// Scalar read of one element by flat index.
template <typename T>
Var pick(Tape<T>& tp, Var x, std::int64_t index) {
  const Tensor<T>& xv = tp.val(x);
  if (index < 0 || index >= xv.size()) throw ContractError("pick: index " + std::to_string(index) + " out of range");
  bool track = tp.tracked(x);
  Var o = tp.push(Tensor<T>::scalar(xv[index]), track, "pick");
  if (track) {
    tp.set_backprop(o, [xi = x.id, oi = o.id, index](Tape<T>& t) {
      if (!t.tracked(xi)) return;
      t.grad_ref(xi)[index] += t.grad_ref(oi)[0];
    });
  }
  return o;
}

// Value passes through, gradient does not.
template <typename T>
Var detach(Tape<T>& tp, Var x) {
  return tp.push(tp.val(x), false, "detach");
}

// Forward emits `quantized`; backward copies the output gradient onto x
// unchanged (straight-through estimator). Shapes must match.
template <typename T>
Var straight_through(Tape<T>& tp, Var x, const Tensor<T>& quantized) {
  require_same_shape("straight_through", tp.val(x), quantized);
  bool track = tp.tracked(x);
  Var o = tp.push(quantized, track, "straight_through");
  if (track) {
    tp.set_backprop(o, [xi = x.id, oi = o.id](Tape<T>& t) { t.accumulate(xi, t.grad_ref(oi)); });
  }
  return o;
}

// table[N,D] indexed by ids -> [len(ids), D]. Gradient scatter-adds into
// the table rows.
template <typename T>
Var embedding(Tape<T>& tp, Var table, std::vector<int> ids) {
  const Tensor<T>& tv = tp.val(table);
  detail::check_2d("embedding", tv);
  const int vocab = tv.shape[0], d = tv.shape[1];
  for (int id : ids)
    if (id < 0 || id >= vocab) throw ContractError("embedding: id " + std::to_string(id) + " outside vocab " + std::to_string(vocab));
  Tensor<T> out = Tensor<T>::zeros({static_cast<int>(ids.size()), d});
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy(tv.data.begin() + static_cast<std::int64_t>(ids[i]) * d,
              tv.data.begin() + static_cast<std::int64_t>(ids[i] + 1) * d, out.data.begin() + static_cast<std::int64_t>(i) * d);
  bool track = tp.tracked(table);
  Var o = tp.push(std::move(out), track, "embedding");
  if (track) {
    tp.set_backprop(o, [ti = table.id, oi = o.id, ids = std::move(ids), d](Tape<T>& t) {
      if (!t.tracked(ti)) return;
      const Tensor<T>& g = t.grad_ref(oi);
      Tensor<T>& gt = t.grad_ref(ti);
      for (std::size_t i = 0; i < ids.size(); ++i)
        for (int j = 0; j < d; ++j)
          gt[static_cast<std::int64_t>(ids[i]) * d + j] += g[static_cast<std::int64_t>(i) * d + j];
    });
  }
  return o;
}

// Two-table embedding for interleaved sequences: position i reads row
// ids[i] from table_a when sel[i]==0, from table_b when sel[i]==1.
template <typename T>
Var dual_embedding(Tape<T>& tp, Var table_a, Var table_b, std::vector<std::uint8_t> sel, std::vector<int> ids) {
  const Tensor<T>& ta = tp.val(table_a);
  const Tensor<T>& tb = tp.val(table_b);
  detail::check_2d("dual_embedding", ta);
  detail::check_2d("dual_embedding", tb);
  if (ta.shape[1] != tb.shape[1]) throw ShapeError("dual_embedding: table widths differ");
  if (sel.size() != ids.size()) throw ShapeError("dual_embedding: sel/ids length mismatch");
  const int d = ta.shape[1];
  Tensor<T> out = Tensor<T>::zeros({static_cast<int>(ids.size()), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const Tensor<T>& src = sel[i] ? tb : ta;
    const int vocab = src.shape[0];
    if (ids[i] < 0 || ids[i] >= vocab)
      throw ContractError("dual_embedding: id " + std::to_string(ids[i]) + " outside vocab " + std::to_string(vocab));
    std::copy(src.data.begin() + static_cast<std::int64_t>(ids[i]) * d,
              src.data.begin() + static_cast<std::int64_t>(ids[i] + 1) * d, out.data.begin() + static_cast<std::int64_t>(i) * d);
  }
  bool track = tp.tracked(table_a) || tp.tracked(table_b);
  Var o = tp.push(std::move(out), track, "dual_embedding");
  if (track) {
    tp.set_backprop(o, [ai = table_a.id, bi = table_b.id, oi = o.id, sel = std::move(sel), ids = std::move(ids),
                        d](Tape<T>& t) {
      const Tensor<T>& g = t.grad_ref(oi);
      for (std::size_t i = 0; i < ids.size(); ++i) {
        const int ti = sel[i] ? bi : ai;
        if (!t.tracked(ti)) continue;
        Tensor<T>& gt = t.grad_ref(ti);
        for (int j = 0; j < d; ++j)
          gt[static_cast<std::int64_t>(ids[i]) * d + j] += g[static_cast<std::int64_t>(i) * d + j];
      }
    });
  }
  return o;
}

// Inverted dropout: kept entries scaled by 1/(1-p). Identity when p == 0.
// Mask draws advance `rng` deterministically.
template <typename T>
Var dropout(Tape<T>& tp, Var x, double p, RngStream& rng) {
  if (p < 0.0 || p >= 1.0) throw ConfigError("dropout: p must be in [0,1), got " + std::to_string(p));
  if (p == 0.0) return x;
  const Tensor<T>& xv = tp.val(x);
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(xv.size()));
  for (auto& m : mask) m = rng.uniform() >= p ? 1 : 0;
  const T s = static_cast<T>(1.0 / (1.0 - p));
  Tensor<T> out = xv;
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = mask[static_cast<std::size_t>(i)] ? out[i] * s : T{0};
  bool track = tp.tracked(x);
  Var o = tp.push(std::move(out), track, "dropout");
  if (track) {
    tp.set_backprop(o, [xi = x.id, oi = o.id, mask = std::move(mask), s](Tape<T>& t) {
      Tensor<T> g = t.grad_ref(oi);
      for (std::int64_t i = 0; i < g.size(); ++i) g[i] = mask[static_cast<std::size_t>(i)] ? g[i] * s : T{0};
      t.accumulate(xi, g);
    });
  }
  return o;
}

// [C,H,W] -> [H*W, C], row k = channel fiber at pixel k (row-major pixels).
template <typename T>
Var rows_from_chw(Tape<T>& tp, Var x) {
  const Tensor<T>& xv = tp.val(x);
  if (xv.rank() != 3) throw ShapeError("rows_from_chw: expected [C,H,W], got " + shape_str(xv.shape));
  const int c = xv.shape[0], hw = xv.shape[1] * xv.shape[2];
  Tensor<T> out = Tensor<T>::zeros({hw, c});
  for (int ch = 0; ch < c; ++ch)
    for (int k = 0; k < hw; ++k) out.data[static_cast<std::size_t>(k) * c + ch] = xv.data[static_cast<std::size_t>(ch) * hw + k];
  bool track = tp.tracked(x);
  Var o = tp.push(std::move(out), track, "rows_from_chw");
  if (track) {
    tp.set_backprop(o, [xi = x.id, oi = o.id, c, hw](Tape<T>& t) {
      const Tensor<T>& g = t.grad_ref(oi);
      Tensor<T> gx = Tensor<T>::zeros(t.value_of(xi).shape);
      for (int ch = 0; ch < c; ++ch)
        for (int k = 0; k < hw; ++k) gx[static_cast<std::int64_t>(ch) * hw + k] = g[static_cast<std::int64_t>(k) * c + ch];
      t.accumulate(xi, gx);
    });
  }
  return o;
}

// [H*W, C] -> [C,H,W]; inverse of rows_from_chw.
template <typename T>
Var chw_from_rows(Tape<T>& tp, Var x, int h, int w) {
  const Tensor<T>& xv = tp.val(x);
  detail::check_2d("chw_from_rows", xv);
  if (xv.shape[0] != h * w)
    throw ShapeError("chw_from_rows: " + std::to_string(xv.shape[0]) + " rows vs " + std::to_string(h) + "x" +
                     std::to_string(w) + " pixels");
  const int c = xv.shape[1], hw = h * w;
  Tensor<T> out = Tensor<T>::zeros({c, h, w});
  for (int ch = 0; ch < c; ++ch)
    for (int k = 0; k < hw; ++k) out.data[static_cast<std::size_t>(ch) * hw + k] = xv.data[static_cast<std::size_t>(k) * c + ch];
  bool track = tp.tracked(x);
  Var o = tp.push(std::move(out), track, "chw_from_rows");
  if (track) {
    tp.set_backprop(o, [xi = x.id, oi = o.id, c, hw](Tape<T>& t) {
      const Tensor<T>& g = t.grad_ref(oi);
      Tensor<T> gx = Tensor<T>::zeros(t.value_of(xi).shape);
      for (int ch = 0; ch < c; ++ch)
        for (int k = 0; k < hw; ++k) gx[static_cast<std::int64_t>(k) * c + ch] = g[static_cast<std::int64_t>(ch) * hw + k];
      t.accumulate(xi, gx);
    });
  }
  return o;
}

// ---- convolutions (single image, CHW) ----

template <typename T>
Var conv2d(Tape<T>& tp, Var x, Var w, Var b, int stride, int pad) {
  const Tensor<T>& xv = tp.val(x);
  const Tensor<T>& wv = tp.val(w);
  const Tensor<T>& bv = tp.val(b);
  if (xv.rank() != 3) throw ShapeError("conv2d: input must be [C,H,W], got " + shape_str(xv.shape));
  if (wv.rank() != 4) throw ShapeError("conv2d: weight must be [Cout,Cin,kh,kw], got " + shape_str(wv.shape));
  const int cin = xv.shape[0], h = xv.shape[1], wd = xv.shape[2];
  const int cout = wv.shape[0], kh = wv.shape[2], kw = wv.shape[3];
  if (wv.shape[1] != cin) throw ShapeError("conv2d: weight cin " + std::to_string(wv.shape[1]) + " vs input " + std::to_string(cin));
  if (bv.size() != cout) throw ShapeError("conv2d: bias size " + std::to_string(bv.size()) + " vs cout " + std::to_string(cout));
  if (stride < 1) throw ConfigError("conv2d: stride must be >= 1");
  const int ho = (h + 2 * pad - kh) / stride + 1;
  const int wo = (wd + 2 * pad - kw) / stride + 1;
  if (ho < 1 || wo < 1) throw ShapeError("conv2d: kernel does not fit input");

  Tensor<T> out = Tensor<T>::zeros({cout, ho, wo});
  for (int co = 0; co < cout; ++co) {
    for (int oy = 0; oy < ho; ++oy)
      for (int ox = 0; ox < wo; ++ox) {
        T s = bv[co];
        for (int ci = 0; ci < cin; ++ci)
          for (int ky = 0; ky < kh; ++ky) {
            const int iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= h) continue;
            for (int kx = 0; kx < kw; ++kx) {
              const int ix = ox * stride - pad + kx;
              if (ix < 0 || ix >= wd) continue;
              s += xv.data[(static_cast<std::size_t>(ci) * h + iy) * wd + ix] *
                   wv.data[((static_cast<std::size_t>(co) * cin + ci) * kh + ky) * kw + kx];
            }
          }
        out.data[(static_cast<std::size_t>(co) * ho + oy) * wo + ox] = s;
      }
  }
  bool track = tp.tracked(x) || tp.tracked(w) || tp.tracked(b);
  Var o = tp.push(std::move(out), track, "conv2d");
  if (track) {
    tp.set_backprop(o, [xi = x.id, wi = w.id, bi = b.id, oi = o.id, cin, h, wd, cout, kh, kw, ho, wo, stride,
                        pad](Tape<T>& t) {
      const Tensor<T>& g = t.grad_ref(oi);
      const Tensor<T>& xv = t.value_of(xi);
      const Tensor<T>& wv = t.value_of(wi);
      const bool want_x = t.tracked(xi), want_w = t.tracked(wi), want_b = t.tracked(bi);
      Tensor<T> gx = want_x ? Tensor<T>::zeros(xv.shape) : Tensor<T>();
      Tensor<T> gw = want_w ? Tensor<T>::zeros(wv.shape) : Tensor<T>();
      Tensor<T> gb = want_b ? Tensor<T>::zeros(t.value_of(bi).shape) : Tensor<T>();
      for (int co = 0; co < cout; ++co)
        for (int oy = 0; oy < ho; ++oy)
          for (int ox = 0; ox < wo; ++ox) {
            const T go = g[(static_cast<std::int64_t>(co) * ho + oy) * wo + ox];
            if (want_b) gb[co] += go;
            for (int ci = 0; ci < cin; ++ci)
              for (int ky = 0; ky < kh; ++ky) {
                const int iy = oy * stride - pad + ky;
                if (iy < 0 || iy >= h) continue;
                for (int kx = 0; kx < kw; ++kx) {
                  const int ix = ox * stride - pad + kx;
                  if (ix < 0 || ix >= wd) continue;
                  const std::int64_t xidx = (static_cast<std::int64_t>(ci) * h + iy) * wd + ix;
                  const std::int64_t widx = ((static_cast<std::int64_t>(co) * cin + ci) * kh + ky) * kw + kx;
                  if (want_x) gx[xidx] += go * wv[widx];
                  if (want_w) gw[widx] += go * xv[xidx];
                }
              }
          }
      if (want_x) t.accumulate(xi, gx);
      if (want_w) t.accumulate(wi, gw);
      if (want_b) t.accumulate(bi, gb);
    });
  }
  return o;
}

// Transposed convolution; weight layout [Cin,Cout,kh,kw].
template <typename T>
Var conv2d_transpose(Tape<T>& tp, Var x, Var w, Var b, int stride, int pad) {
  const Tensor<T>& xv = tp.val(x);
  const Tensor<T>& wv = tp.val(w);
  const Tensor<T>& bv = tp.val(b);
  if (xv.rank() != 3) throw ShapeError("conv2d_transpose: input must be [C,H,W], got " + shape_str(xv.shape));
  if (wv.rank() != 4) throw ShapeError("conv2d_transpose: weight must be [Cin,Cout,kh,kw], got " + shape_str(wv.shape));
  const int cin = xv.shape[0], h = xv.shape[1], wd = xv.shape[2];
  const int cout = wv.shape[1], kh = wv.shape[2], kw = wv.shape[3];
  if (wv.shape[0] != cin)
    throw ShapeError("conv2d_transpose: weight cin " + std::to_string(wv.shape[0]) + " vs input " + std::to_string(cin));
  if (bv.size() != cout) throw ShapeError("conv2d_transpose: bias size mismatch");
  if (stride < 1) throw ConfigError("conv2d_transpose: stride must be >= 1");
  const int ho = (h - 1) * stride - 2 * pad + kh;
  const int wo = (wd - 1) * stride - 2 * pad + kw;
  if (ho < 1 || wo < 1) throw ShapeError("conv2d_transpose: empty output");

  Tensor<T> out = Tensor<T>::zeros({cout, ho, wo});
  for (int co = 0; co < cout; ++co)
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(ho) * wo; ++i) out[static_cast<std::int64_t>(co) * ho * wo + i] = bv[co];
  for (int ci = 0; ci < cin; ++ci)
    for (int iy = 0; iy < h; ++iy)
      for (int ix = 0; ix < wd; ++ix) {
        const T xval = xv.data[(static_cast<std::size_t>(ci) * h + iy) * wd + ix];
        for (int co = 0; co < cout; ++co)
          for (int ky = 0; ky < kh; ++ky) {
            const int oy = iy * stride - pad + ky;
            if (oy < 0 || oy >= ho) continue;
            for (int kx = 0; kx < kw; ++kx) {
              const int ox = ix * stride - pad + kx;
              if (ox < 0 || ox >= wo) continue;
              out.data[(static_cast<std::size_t>(co) * ho + oy) * wo + ox] +=
                  xval * wv.data[((static_cast<std::size_t>(ci) * cout + co) * kh + ky) * kw + kx];
            }
          }
      }
  bool track = tp.tracked(x) || tp.tracked(w) || tp.tracked(b);
  Var o = tp.push(std::move(out), track, "conv2d_transpose");
  if (track) {
    tp.set_backprop(o, [xi = x.id, wi = w.id, bi = b.id, oi = o.id, cin, h, wd, cout, kh, kw, ho, wo, stride,
                        pad](Tape<T>& t) {
      const Tensor<T>& g = t.grad_ref(oi);
      const Tensor<T>& xv = t.value_of(xi);
      const Tensor<T>& wv = t.value_of(wi);
      const bool want_x = t.tracked(xi), want_w = t.tracked(wi), want_b = t.tracked(bi);
      Tensor<T> gx = want_x ? Tensor<T>::zeros(xv.shape) : Tensor<T>();
      Tensor<T> gw = want_w ? Tensor<T>::zeros(wv.shape) : Tensor<T>();
      Tensor<T> gb = want_b ? Tensor<T>::zeros(t.value_of(bi).shape) : Tensor<T>();
      if (want_b)
        for (int co = 0; co < cout; ++co)
          for (std::int64_t i = 0; i < static_cast<std::int64_t>(ho) * wo; ++i)
            gb[co] += g[static_cast<std::int64_t>(co) * ho * wo + i];
      for (int ci = 0; ci < cin; ++ci)
        for (int iy = 0; iy < h; ++iy)
          for (int ix = 0; ix < wd; ++ix) {
            const std::int64_t xidx = (static_cast<std::int64_t>(ci) * h + iy) * wd + ix;
            for (int co = 0; co < cout; ++co)
              for (int ky = 0; ky < kh; ++ky) {
                const int oy = iy * stride - pad + ky;
                if (oy < 0 || oy >= ho) continue;
                for (int kx = 0; kx < kw; ++kx) {
                  const int ox = ix * stride - pad + kx;
                  if (ox < 0 || ox >= wo) continue;
                  const std::int64_t oidx = (static_cast<std::int64_t>(co) * ho + oy) * wo + ox;
                  const std::int64_t widx = ((static_cast<std::int64_t>(ci) * cout + co) * kh + ky) * kw + kx;
                  if (want_x) gx[xidx] += g[oidx] * wv[widx];
                  if (want_w) gw[widx] += g[oidx] * xv[xidx];
                }
              }
          }
      if (want_x) t.accumulate(xi, gx);
      if (want_w) t.accumulate(wi, gw);
      if (want_b) t.accumulate(bi, gb);
    });
  }
  return o;
}

}  // namespace ops
}  // namespace dart
