#pragma once

#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <vector>

#include "cisunet/core/autodiff.hpp"
#include "cisunet/core/blas.hpp"
#include "cisunet/core/tensor.hpp"

namespace cisunet {

namespace detail {

template <typename T>
void accumulate(const NodePtr<T>& p, const Tensor<T>& g) {
  if (!p || !p->requires_grad) return;
  p->ensure_grad();
  T* dst = p->grad.data();
  const T* src = g.data();
  for (long i = 0; i < g.numel(); ++i) dst[i] += src[i];
}

/// Accumulate via a raw visitor writing directly into the parent grad.
template <typename T, class F>
void accumulate_with(const NodePtr<T>& p, F f) {
  if (!p || !p->requires_grad) return;
  p->ensure_grad();
  f(p->grad.data());
}

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (!same_shape(a, b))
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                shape_str(a.shape) + " vs " + shape_str(b.shape));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::check_same_shape(a.val(), b.val(), "add");
  Tensor<T> out(a.val().shape);
  const T* pa = a.val().data();
  const T* pb = b.val().data();
  T* po = out.data();
  for (long i = 0; i < out.numel(); ++i) po[i] = pa[i] + pb[i];
  auto an = a.n, bn = b.n;
  return make_op<T>(std::move(out), {an, bn}, [an, bn](Node<T>& self) {
    detail::accumulate(an, self.grad);
    detail::accumulate(bn, self.grad);
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::check_same_shape(a.val(), b.val(), "mul");
  Tensor<T> out(a.val().shape);
  const T* pa = a.val().data();
  const T* pb = b.val().data();
  T* po = out.data();
  for (long i = 0; i < out.numel(); ++i) po[i] = pa[i] * pb[i];
  auto an = a.n, bn = b.n;
  return make_op<T>(std::move(out), {an, bn}, [an, bn](Node<T>& self) {
    const T* g = self.grad.data();
    detail::accumulate_with<T>(an, [&](T* da) {
      const T* pb2 = bn->value.data();
      for (long i = 0; i < self.grad.numel(); ++i) da[i] += g[i] * pb2[i];
    });
    detail::accumulate_with<T>(bn, [&](T* db) {
      const T* pa2 = an->value.data();
      for (long i = 0; i < self.grad.numel(); ++i) db[i] += g[i] * pa2[i];
    });
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T c) {
  Tensor<T> out(a.val().shape);
  const T* pa = a.val().data();
  T* po = out.data();
  for (long i = 0; i < out.numel(); ++i) po[i] = pa[i] * c;
  auto an = a.n;
  return make_op<T>(std::move(out), {an}, [an, c](Node<T>& self) {
    const T* g = self.grad.data();
    detail::accumulate_with<T>(an, [&](T* da) {
      for (long i = 0; i < self.grad.numel(); ++i) da[i] += g[i] * c;
    });
  });
}

template <typename T>
Var<T> relu(const Var<T>& a) {
  Tensor<T> out(a.val().shape);
  const T* pa = a.val().data();
  T* po = out.data();
  for (long i = 0; i < out.numel(); ++i) po[i] = pa[i] > (T)0 ? pa[i] : (T)0;
  auto an = a.n;
  return make_op<T>(std::move(out), {an}, [an](Node<T>& self) {
    const T* g = self.grad.data();
    const T* x = an->value.data();
    detail::accumulate_with<T>(an, [&](T* da) {
      for (long i = 0; i < self.grad.numel(); ++i)
        if (x[i] > (T)0) da[i] += g[i];
    });
  });
}

/// Exact (erf-based) GELU.
template <typename T>
Var<T> gelu(const Var<T>& a) {
  Tensor<T> out(a.val().shape);
  const T* pa = a.val().data();
  T* po = out.data();
  const T inv_sqrt2 = (T)0.7071067811865475244;
  for (long i = 0; i < out.numel(); ++i)
    po[i] = (T)0.5 * pa[i] * ((T)1 + std::erf(pa[i] * inv_sqrt2));
  auto an = a.n;
  return make_op<T>(std::move(out), {an}, [an, inv_sqrt2](Node<T>& self) {
    const T* g = self.grad.data();
    const T* x = an->value.data();
    const T inv_sqrt2pi = (T)0.3989422804014326779;
    detail::accumulate_with<T>(an, [&](T* da) {
      for (long i = 0; i < self.grad.numel(); ++i) {
        T cdf = (T)0.5 * ((T)1 + std::erf(x[i] * inv_sqrt2));
        T pdf = inv_sqrt2pi * std::exp((T)-0.5 * x[i] * x[i]);
        da[i] += g[i] * (cdf + x[i] * pdf);
      }
    });
  });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

/// y[N,M] = x[N,K] * w[K,M] (+ b[M] if defined).
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  const Shape& xs = x.val().shape;
  const Shape& ws = w.val().shape;
  if (xs.size() != 2 || ws.size() != 2 || xs[1] != ws[0])
    throw std::invalid_argument("linear: bad shapes " + shape_str(xs) + " x " +
                                shape_str(ws));
  long n = xs[0], k = xs[1], m = ws[1];
  Tensor<T> out({n, m});
  gemm(false, false, n, m, k, (T)1, x.val().data(), k, w.val().data(), m, (T)0,
       out.data(), m);
  if (b.defined()) {
    if (b.val().numel() != m)
      throw std::invalid_argument("linear: bias size mismatch");
    T* po = out.data();
    const T* pb = b.val().data();
    for (long i = 0; i < n; ++i)
      for (long j = 0; j < m; ++j) po[i * m + j] += pb[j];
  }
  auto xn = x.n, wn = w.n, bn = b.defined() ? b.n : nullptr;
  return make_op<T>(std::move(out), {xn, wn, bn},
                    [xn, wn, bn, n, k, m](Node<T>& self) {
    const T* g = self.grad.data();
    detail::accumulate_with<T>(xn, [&](T* dx) {
      gemm(false, true, n, k, m, (T)1, g, m, wn->value.data(), m, (T)1, dx, k);
    });
    detail::accumulate_with<T>(wn, [&](T* dw) {
      gemm(true, false, k, m, n, (T)1, xn->value.data(), k, g, m, (T)1, dw, m);
    });
    if (bn)
      detail::accumulate_with<T>(bn, [&](T* db) {
        for (long i = 0; i < n; ++i)
          for (long j = 0; j < m; ++j) db[j] += g[i * m + j];
      });
  });
}

/// Batched matmul, y[G,M,N] = a[G,M,K] * b[G,K,N].
template <typename T>
Var<T> bmm(const Var<T>& a, const Var<T>& b) {
  const Shape& as = a.val().shape;
  const Shape& bs = b.val().shape;
  if (as.size() != 3 || bs.size() != 3 || as[0] != bs[0] || as[2] != bs[1])
    throw std::invalid_argument("bmm: bad shapes " + shape_str(as) + " x " +
                                shape_str(bs));
  long gcount = as[0], m = as[1], k = as[2], n = bs[2];
  Tensor<T> out({gcount, m, n});
  for (long i = 0; i < gcount; ++i)
    gemm(false, false, m, n, k, (T)1, a.val().data() + i * m * k, k,
         b.val().data() + i * k * n, n, (T)0, out.data() + i * m * n, n);
  auto an = a.n, bn = b.n;
  return make_op<T>(std::move(out), {an, bn},
                    [an, bn, gcount, m, k, n](Node<T>& self) {
    const T* g = self.grad.data();
    detail::accumulate_with<T>(an, [&](T* da) {
      for (long i = 0; i < gcount; ++i)
        gemm(false, true, m, k, n, (T)1, g + i * m * n, n,
             bn->value.data() + i * k * n, n, (T)1, da + i * m * k, k);
    });
    detail::accumulate_with<T>(bn, [&](T* db) {
      for (long i = 0; i < gcount; ++i)
        gemm(true, false, k, n, m, (T)1, an->value.data() + i * m * k, k,
             g + i * m * n, n, (T)1, db + i * k * n, n);
    });
  });
}

/// Batched matmul with transposed second factor, y[G,M,N] = a[G,M,K] * b[G,N,K]^T.
template <typename T>
Var<T> bmm_nt(const Var<T>& a, const Var<T>& b) {
  const Shape& as = a.val().shape;
  const Shape& bs = b.val().shape;
  if (as.size() != 3 || bs.size() != 3 || as[0] != bs[0] || as[2] != bs[2])
    throw std::invalid_argument("bmm_nt: bad shapes " + shape_str(as) + " x " +
                                shape_str(bs));
  long gcount = as[0], m = as[1], k = as[2], n = bs[1];
  Tensor<T> out({gcount, m, n});
  for (long i = 0; i < gcount; ++i)
    gemm(false, true, m, n, k, (T)1, a.val().data() + i * m * k, k,
         b.val().data() + i * n * k, k, (T)0, out.data() + i * m * n, n);
  auto an = a.n, bn = b.n;
  return make_op<T>(std::move(out), {an, bn},
                    [an, bn, gcount, m, k, n](Node<T>& self) {
    const T* g = self.grad.data();
    detail::accumulate_with<T>(an, [&](T* da) {
      for (long i = 0; i < gcount; ++i)
        gemm(false, false, m, k, n, (T)1, g + i * m * n, n,
             bn->value.data() + i * n * k, k, (T)1, da + i * m * k, k);
    });
    detail::accumulate_with<T>(bn, [&](T* db) {
      for (long i = 0; i < gcount; ++i)
        gemm(true, false, n, k, m, (T)1, g + i * m * n, n,
             an->value.data() + i * m * k, k, (T)1, db + i * n * k, k);
    });
  });
}

// ---------------------------------------------------------------------------
// Shape plumbing
// ---------------------------------------------------------------------------

template <typename T>
Var<T> reshape(const Var<T>& x, Shape s) {
  Tensor<T> out = x.val().reshaped(std::move(s));
  auto xn = x.n;
  return make_op<T>(std::move(out), {xn}, [xn](Node<T>& self) {
    // Row-major reshape is the identity on flat data.
    detail::accumulate(xn, self.grad.reshaped(xn->value.shape));
  });
}

/// out[i] = idx[i] >= 0 ? x.flat[idx[i]] : 0. One op covers permutes, window
/// partitioning, cyclic shifts, zero-padding (-1 entries) and crops; the
/// backward pass is the scatter-add transpose.
template <typename T>
Var<T> gather(const Var<T>& x, std::shared_ptr<const std::vector<long>> idx,
              Shape out_shape) {
  if ((long)idx->size() != numel_of(out_shape))
    throw std::invalid_argument("gather: index map size mismatch");
  Tensor<T> out(std::move(out_shape));
  const T* px = x.val().data();
  T* po = out.data();
  const long* map = idx->data();
  for (long i = 0; i < out.numel(); ++i) po[i] = map[i] >= 0 ? px[map[i]] : (T)0;
  auto xn = x.n;
  return make_op<T>(std::move(out), {xn}, [xn, idx](Node<T>& self) {
    const T* g = self.grad.data();
    const long* map = idx->data();
    detail::accumulate_with<T>(xn, [&](T* dx) {
      for (long i = 0; i < self.grad.numel(); ++i)
        if (map[i] >= 0) dx[map[i]] += g[i];
    });
  });
}

template <typename T>
Var<T> concat(const Var<T>& a, const Var<T>& b, int axis) {
  const Shape& as = a.val().shape;
  const Shape& bs = b.val().shape;
  if (as.size() != bs.size())
    throw std::invalid_argument("concat: rank mismatch");
  if (axis < 0) axis += (int)as.size();
  for (int i = 0; i < (int)as.size(); ++i)
    if (i != axis && as[(size_t)i] != bs[(size_t)i])
      throw std::invalid_argument("concat: shape mismatch off axis " +
                                  shape_str(as) + " vs " + shape_str(bs));
  Shape os = as;
  os[(size_t)axis] += bs[(size_t)axis];
  long outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= as[(size_t)i];
  for (int i = axis + 1; i < (int)as.size(); ++i) inner *= as[(size_t)i];
  long wa = as[(size_t)axis] * inner, wb = bs[(size_t)axis] * inner;
  Tensor<T> out(os);
  for (long o = 0; o < outer; ++o) {
    std::memcpy(out.data() + o * (wa + wb), a.val().data() + o * wa,
                (size_t)wa * sizeof(T));
    std::memcpy(out.data() + o * (wa + wb) + wa, b.val().data() + o * wb,
                (size_t)wb * sizeof(T));
  }
  auto an = a.n, bn = b.n;
  return make_op<T>(std::move(out), {an, bn},
                    [an, bn, outer, wa, wb](Node<T>& self) {
    const T* g = self.grad.data();
    detail::accumulate_with<T>(an, [&](T* da) {
      for (long o = 0; o < outer; ++o)
        for (long i = 0; i < wa; ++i) da[o * wa + i] += g[o * (wa + wb) + i];
    });
    detail::accumulate_with<T>(bn, [&](T* db) {
      for (long o = 0; o < outer; ++o)
        for (long i = 0; i < wb; ++i)
          db[o * wb + i] += g[o * (wa + wb) + wa + i];
    });
  });
}

// ---------------------------------------------------------------------------
// Normalization & softmax
// ---------------------------------------------------------------------------

/// Softmax over the last axis.
template <typename T>
Var<T> softmax_lastdim(const Var<T>& x) {
  const Shape& s = x.val().shape;
  long cols = s.back();
  long rows = x.val().numel() / cols;
  Tensor<T> out(s);
  const T* px = x.val().data();
  T* po = out.data();
  for (long r = 0; r < rows; ++r) {
    const T* xr = px + r * cols;
    T* yr = po + r * cols;
    T mx = xr[0];
    for (long c = 1; c < cols; ++c) mx = std::max(mx, xr[c]);
    T sum = (T)0;
    for (long c = 0; c < cols; ++c) {
      yr[c] = std::exp(xr[c] - mx);
      sum += yr[c];
    }
    T inv = (T)1 / sum;
    for (long c = 0; c < cols; ++c) yr[c] *= inv;
  }
  auto xn = x.n;
  return make_op<T>(std::move(out), {xn}, [xn, rows, cols](Node<T>& self) {
    const T* g = self.grad.data();
    const T* y = self.value.data();
    detail::accumulate_with<T>(xn, [&](T* dx) {
      for (long r = 0; r < rows; ++r) {
        const T* gr = g + r * cols;
        const T* yr = y + r * cols;
        T dot = (T)0;
        for (long c = 0; c < cols; ++c) dot += gr[c] * yr[c];
        for (long c = 0; c < cols; ++c)
          dx[r * cols + c] += yr[c] * (gr[c] - dot);
      }
    });
  });
}

namespace detail {

/// Shared normalization kernel: rows of length `len`, scale/shift per column
/// group (LayerNorm: param index = column; InstanceNorm: param fixed per row).
/// Backward recomputes statistics from the saved input to avoid caching xhat.
template <typename T>
void norm_row_stats(const T* x, long len, T eps, T& mean, T& invstd) {
  T m = (T)0;
  for (long i = 0; i < len; ++i) m += x[i];
  m /= (T)len;
  T v = (T)0;
  for (long i = 0; i < len; ++i) v += (x[i] - m) * (x[i] - m);
  v /= (T)len;
  mean = m;
  invstd = (T)1 / std::sqrt(v + eps);
}

}  // namespace detail

/// Layer normalization over the last axis with affine parameters.
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                  T eps = (T)1e-5) {
  const Shape& s = x.val().shape;
  long cols = s.back();
  long rows = x.val().numel() / cols;
  if (gamma.val().numel() != cols || beta.val().numel() != cols)
    throw std::invalid_argument("layer_norm: affine size mismatch");
  Tensor<T> out(s);
  const T* px = x.val().data();
  const T* pg = gamma.val().data();
  const T* pb = beta.val().data();
  T* po = out.data();
  for (long r = 0; r < rows; ++r) {
    T mean, invstd;
    detail::norm_row_stats(px + r * cols, cols, eps, mean, invstd);
    for (long c = 0; c < cols; ++c)
      po[r * cols + c] = (px[r * cols + c] - mean) * invstd * pg[c] + pb[c];
  }
  auto xn = x.n, gn = gamma.n, bn = beta.n;
  return make_op<T>(std::move(out), {xn, gn, bn},
                    [xn, gn, bn, rows, cols, eps](Node<T>& self) {
    const T* g = self.grad.data();
    const T* px = xn->value.data();
    const T* pg = gn->value.data();
    std::vector<T> xhat((size_t)cols);
    for (long r = 0; r < rows; ++r) {
      T mean, invstd;
      detail::norm_row_stats(px + r * cols, cols, eps, mean, invstd);
      const T* gr = g + r * cols;
      T sum_gy = (T)0, sum_gyx = (T)0;
      for (long c = 0; c < cols; ++c) {
        xhat[(size_t)c] = (px[r * cols + c] - mean) * invstd;
        T gy = gr[c] * pg[c];
        sum_gy += gy;
        sum_gyx += gy * xhat[(size_t)c];
      }
      T mg = sum_gy / (T)cols, mgx = sum_gyx / (T)cols;
      detail::accumulate_with<T>(xn, [&](T* dx) {
        for (long c = 0; c < cols; ++c)
          dx[r * cols + c] +=
              invstd * (gr[c] * pg[c] - mg - xhat[(size_t)c] * mgx);
      });
      detail::accumulate_with<T>(gn, [&](T* dg) {
        for (long c = 0; c < cols; ++c) dg[c] += gr[c] * xhat[(size_t)c];
      });
      detail::accumulate_with<T>(bn, [&](T* db) {
        for (long c = 0; c < cols; ++c) db[c] += gr[c];
      });
    }
  });
}

/// Instance normalization for (B, C, spatial...) tensors: statistics per
/// (batch, channel) over the spatial extent, affine parameters per channel.
template <typename T>
Var<T> instance_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                     T eps = (T)1e-5) {
  const Shape& s = x.val().shape;
  if (s.size() < 3)
    throw std::invalid_argument("instance_norm: expected (B,C,spatial...)");
  long bdim = s[0], cdim = s[1];
  long sp = x.val().numel() / (bdim * cdim);
  if (gamma.val().numel() != cdim || beta.val().numel() != cdim)
    throw std::invalid_argument("instance_norm: affine size mismatch");
  Tensor<T> out(s);
  const T* px = x.val().data();
  const T* pg = gamma.val().data();
  const T* pb = beta.val().data();
  T* po = out.data();
  for (long bc = 0; bc < bdim * cdim; ++bc) {
    long c = bc % cdim;
    T mean, invstd;
    detail::norm_row_stats(px + bc * sp, sp, eps, mean, invstd);
    T a = invstd * pg[c];
    T sh = pb[c] - mean * a;
    for (long i = 0; i < sp; ++i) po[bc * sp + i] = px[bc * sp + i] * a + sh;
  }
  auto xn = x.n, gn = gamma.n, bn = beta.n;
  return make_op<T>(std::move(out), {xn, gn, bn},
                    [xn, gn, bn, bdim, cdim, sp, eps](Node<T>& self) {
    const T* g = self.grad.data();
    const T* px = xn->value.data();
    const T* pg = gn->value.data();
    for (long bc = 0; bc < bdim * cdim; ++bc) {
      long c = bc % cdim;
      T mean, invstd;
      detail::norm_row_stats(px + bc * sp, sp, eps, mean, invstd);
      const T* gr = g + bc * sp;
      const T* xr = px + bc * sp;
      T sum_g = (T)0, sum_gx = (T)0;
      for (long i = 0; i < sp; ++i) {
        sum_g += gr[i];
        sum_gx += gr[i] * (xr[i] - mean) * invstd;
      }
      T mg = sum_g / (T)sp, mgx = sum_gx / (T)sp;
      detail::accumulate_with<T>(xn, [&](T* dx) {
        for (long i = 0; i < sp; ++i) {
          T xhat = (xr[i] - mean) * invstd;
          dx[bc * sp + i] += invstd * pg[c] * (gr[i] - mg - xhat * mgx);
        }
      });
      detail::accumulate_with<T>(gn, [&](T* dg) { dg[c] += sum_gx; });
      detail::accumulate_with<T>(bn, [&](T* db) { db[c] += sum_g; });
    }
  });
}

// ---------------------------------------------------------------------------
// Broadcast adds used by windowed attention
// ---------------------------------------------------------------------------

/// scores[G,H,L,L] += bias[H,L,L] (broadcast over G). Gradient flows to both.
template <typename T>
Var<T> add_head_bias(const Var<T>& scores, const Var<T>& bias) {
  const Shape& ss = scores.val().shape;
  const Shape& bs = bias.val().shape;
  if (ss.size() != 4 || bs.size() != 3 || ss[1] != bs[0] || ss[2] != bs[1] ||
      ss[3] != bs[2])
    throw std::invalid_argument("add_head_bias: shape mismatch " +
                                shape_str(ss) + " vs " + shape_str(bs));
  long gcount = ss[0];
  long block = bias.val().numel();
  Tensor<T> out(ss);
  const T* ps = scores.val().data();
  const T* pbv = bias.val().data();
  T* po = out.data();
  for (long i = 0; i < gcount; ++i)
    for (long j = 0; j < block; ++j) po[i * block + j] = ps[i * block + j] + pbv[j];
  auto sn = scores.n, bn = bias.n;
  return make_op<T>(std::move(out), {sn, bn},
                    [sn, bn, gcount, block](Node<T>& self) {
    const T* g = self.grad.data();
    detail::accumulate(sn, self.grad);
    detail::accumulate_with<T>(bn, [&](T* db) {
      for (long i = 0; i < gcount; ++i)
        for (long j = 0; j < block; ++j) db[j] += g[i * block + j];
    });
  });
}

/// scores[G,H,L,L] += mask[nW,L,L] with window index = G-index mod nW.
/// The mask is a constant (no gradient).
template <typename T>
Var<T> add_window_mask(const Var<T>& scores, const Tensor<T>& mask) {
  const Shape& ss = scores.val().shape;
  const Shape& ms = mask.shape;
  if (ss.size() != 4 || ms.size() != 3 || ss[2] != ms[1] || ss[3] != ms[2])
    throw std::invalid_argument("add_window_mask: shape mismatch");
  long gcount = ss[0], heads = ss[1], nw = ms[0];
  long ll = ss[2] * ss[3];
  if (gcount % nw != 0)
    throw std::invalid_argument("add_window_mask: batch not divisible by windows");
  Tensor<T> out(ss);
  const T* ps = scores.val().data();
  const T* pm = mask.data();
  T* po = out.data();
  for (long i = 0; i < gcount; ++i) {
    const T* mrow = pm + (i % nw) * ll;
    for (long h = 0; h < heads; ++h) {
      long base = (i * heads + h) * ll;
      for (long j = 0; j < ll; ++j) po[base + j] = ps[base + j] + mrow[j];
    }
  }
  auto sn = scores.n;
  return make_op<T>(std::move(out), {sn}, [sn](Node<T>& self) {
    detail::accumulate(sn, self.grad);
  });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename T>
Var<T> sum_all(const Var<T>& x) {
  Tensor<T> out({1});
  T s = (T)0;
  const T* px = x.val().data();
  for (long i = 0; i < x.val().numel(); ++i) s += px[i];
  out.data()[0] = s;
  auto xn = x.n;
  return make_op<T>(std::move(out), {xn}, [xn](Node<T>& self) {
    T g = self.grad.data()[0];
    detail::accumulate_with<T>(xn, [&](T* dx) {
      for (long i = 0; i < xn->value.numel(); ++i) dx[i] += g;
    });
  });
}

template <typename T>
Var<T> mean_all(const Var<T>& x) {
  return scale(sum_all(x), (T)1 / (T)x.val().numel());
}

}  // namespace cisunet
