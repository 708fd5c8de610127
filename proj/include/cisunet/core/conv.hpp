#pragma once

#include <cstring>
#include <vector>

#include "cisunet/core/autodiff.hpp"
#include "cisunet/core/blas.hpp"
#include "cisunet/core/ops.hpp"

namespace cisunet {

namespace detail {

struct ConvDims {
  long b, cin, x, y, z;        // input
  long cout, kx, ky, kz;       // kernel
  long stride, pad;
  long xo, yo, zo;             // output spatial dims
  long k() const { return cin * kx * ky * kz; }
  long in_sp() const { return x * y * z; }
  long out_sp() const { return xo * yo * zo; }
};

inline ConvDims conv_dims(const Shape& xs, const Shape& ws, long stride,
                          long pad) {
  if (xs.size() != 5 || ws.size() != 5)
    throw std::invalid_argument("conv3d: expected 5-d input and weight");
  if (xs[1] != ws[1])
    throw std::invalid_argument("conv3d: input channels " +
                                std::to_string(xs[1]) + " != weight channels " +
                                std::to_string(ws[1]));
  ConvDims d;
  d.b = xs[0]; d.cin = xs[1]; d.x = xs[2]; d.y = xs[3]; d.z = xs[4];
  d.cout = ws[0]; d.kx = ws[2]; d.ky = ws[3]; d.kz = ws[4];
  d.stride = stride; d.pad = pad;
  d.xo = (d.x + 2 * pad - d.kx) / stride + 1;
  d.yo = (d.y + 2 * pad - d.ky) / stride + 1;
  d.zo = (d.z + 2 * pad - d.kz) / stride + 1;
  if (d.xo < 1 || d.yo < 1 || d.zo < 1)
    throw std::invalid_argument("conv3d: kernel larger than padded input");
  return d;
}

/// Lay out the receptive fields of output rows [x0, x1) as a (K x cols)
/// column matrix. Column order is row-major over (xo, yo, zo); row order is
/// row-major over (cin, kx, ky, kz). Out-of-bounds taps are zero.
template <typename T>
void im2col(const T* x, const ConvDims& d, long x0, long x1, T* col) {
  const long cols = (x1 - x0) * d.yo * d.zo;
  const long yz = d.y * d.z;
  for (long ci = 0; ci < d.cin; ++ci) {
    const T* xc = x + ci * d.in_sp();
    for (long dx = 0; dx < d.kx; ++dx)
      for (long dy = 0; dy < d.ky; ++dy)
        for (long dz = 0; dz < d.kz; ++dz) {
          T* row = col + (((ci * d.kx + dx) * d.ky + dy) * d.kz + dz) * cols;
          for (long xo = x0; xo < x1; ++xo) {
            long xi = xo * d.stride - d.pad + dx;
            T* dst = row + (xo - x0) * d.yo * d.zo;
            if (xi < 0 || xi >= d.x) {
              std::memset(dst, 0, (size_t)(d.yo * d.zo) * sizeof(T));
              continue;
            }
            for (long yo = 0; yo < d.yo; ++yo, dst += d.zo) {
              long yi = yo * d.stride - d.pad + dy;
              if (yi < 0 || yi >= d.y) {
                std::memset(dst, 0, (size_t)d.zo * sizeof(T));
                continue;
              }
              const T* src = xc + xi * yz + yi * d.z;
              if (d.stride == 1) {
                // Contiguous z-run with edge clipping.
                long zi0 = -d.pad + dz;
                long lo = std::max<long>(0, -zi0);
                long hi = std::min<long>(d.zo, d.z - zi0);
                if (lo > 0) std::memset(dst, 0, (size_t)lo * sizeof(T));
                if (hi > lo)
                  std::memcpy(dst + lo, src + zi0 + lo,
                              (size_t)(hi - lo) * sizeof(T));
                if (hi < d.zo)
                  std::memset(dst + std::max<long>(hi, 0), 0,
                              (size_t)(d.zo - std::max<long>(hi, 0)) * sizeof(T));
              } else {
                for (long zo = 0; zo < d.zo; ++zo) {
                  long zi = zo * d.stride - d.pad + dz;
                  dst[zo] = (zi >= 0 && zi < d.z) ? src[zi] : (T)0;
                }
              }
            }
          }
        }
  }
}

/// Transpose of im2col: scatter-add columns back into the input gradient.
template <typename T>
void col2im_add(const T* col, const ConvDims& d, long x0, long x1, T* dx) {
  const long cols = (x1 - x0) * d.yo * d.zo;
  const long yz = d.y * d.z;
  for (long ci = 0; ci < d.cin; ++ci) {
    T* xc = dx + ci * d.in_sp();
    for (long dxk = 0; dxk < d.kx; ++dxk)
      for (long dy = 0; dy < d.ky; ++dy)
        for (long dz = 0; dz < d.kz; ++dz) {
          const T* row =
              col + (((ci * d.kx + dxk) * d.ky + dy) * d.kz + dz) * cols;
          for (long xo = x0; xo < x1; ++xo) {
            long xi = xo * d.stride - d.pad + dxk;
            if (xi < 0 || xi >= d.x) continue;
            const T* src = row + (xo - x0) * d.yo * d.zo;
            for (long yo = 0; yo < d.yo; ++yo, src += d.zo) {
              long yi = yo * d.stride - d.pad + dy;
              if (yi < 0 || yi >= d.y) continue;
              T* dst = xc + xi * yz + yi * d.z;
              for (long zo = 0; zo < d.zo; ++zo) {
                long zi = zo * d.stride - d.pad + dz;
                if (zi >= 0 && zi < d.z) dst[zi] += src[zo];
              }
            }
          }
        }
  }
}

/// Output-row chunking that keeps the column buffer near 64 MB.
inline long conv_chunk_rows(const ConvDims& d, size_t elem_size) {
  const long budget = (long)(64 * 1024 * 1024 / elem_size);
  long rows = budget / std::max<long>(1, d.k() * d.yo * d.zo);
  return std::max<long>(1, std::min(rows, d.xo));
}

}  // namespace detail

/// 3-d convolution, x (B,Cin,X,Y,Z) * w (Cout,Cin,kx,ky,kz) -> (B,Cout,...),
/// symmetric zero padding, cubic stride. Backed by im2col + GEMM.
template <typename T>
Var<T> conv3d(const Var<T>& x, const Var<T>& w, const Var<T>& b, long stride,
              long pad) {
  detail::ConvDims d = detail::conv_dims(x.val().shape, w.val().shape, stride, pad);
  Tensor<T> out({d.b, d.cout, d.xo, d.yo, d.zo});
  const long chunk = detail::conv_chunk_rows(d, sizeof(T));
  {
    std::vector<T> col((size_t)(d.k() * chunk * d.yo * d.zo));
    for (long n = 0; n < d.b; ++n) {
      const T* xn = x.val().data() + n * d.cin * d.in_sp();
      T* on = out.data() + n * d.cout * d.out_sp();
      for (long x0 = 0; x0 < d.xo; x0 += chunk) {
        long x1 = std::min(d.xo, x0 + chunk);
        long cols = (x1 - x0) * d.yo * d.zo;
        detail::im2col(xn, d, x0, x1, col.data());
        gemm(false, false, d.cout, cols, d.k(), (T)1, w.val().data(), d.k(),
             col.data(), cols, (T)0, on + x0 * d.yo * d.zo, d.out_sp());
      }
    }
  }
  if (b.defined()) {
    if (b.val().numel() != d.cout)
      throw std::invalid_argument("conv3d: bias size mismatch");
    const T* pb = b.val().data();
    for (long n = 0; n < d.b; ++n)
      for (long co = 0; co < d.cout; ++co) {
        T* dst = out.data() + (n * d.cout + co) * d.out_sp();
        T bv = pb[co];
        for (long i = 0; i < d.out_sp(); ++i) dst[i] += bv;
      }
  }
  auto xn_ = x.n, wn = w.n, bn = b.defined() ? b.n : nullptr;
  return make_op<T>(std::move(out), {xn_, wn, bn},
                    [xn_, wn, bn, d](Node<T>& self) {
    const long chunk = detail::conv_chunk_rows(d, sizeof(T));
    std::vector<T> col((size_t)(d.k() * chunk * d.yo * d.zo));
    std::vector<T> dcol;
    const bool need_dx = xn_->requires_grad;
    if (need_dx) {
      dcol.resize(col.size());
      xn_->ensure_grad();
    }
    if (wn->requires_grad) wn->ensure_grad();
    const T* g = self.grad.data();
    for (long n = 0; n < d.b; ++n) {
      const T* xv = xn_->value.data() + n * d.cin * d.in_sp();
      const T* gn = g + n * d.cout * d.out_sp();
      for (long x0 = 0; x0 < d.xo; x0 += chunk) {
        long x1 = std::min(d.xo, x0 + chunk);
        long cols = (x1 - x0) * d.yo * d.zo;
        if (wn->requires_grad || need_dx)
          detail::im2col(xv, d, x0, x1, col.data());
        if (wn->requires_grad)
          gemm(false, true, d.cout, d.k(), cols, (T)1, gn + x0 * d.yo * d.zo,
               d.out_sp(), col.data(), cols, (T)1, wn->grad.data(), d.k());
        if (need_dx) {
          gemm(true, false, d.k(), cols, d.cout, (T)1, wn->value.data(), d.k(),
               gn + x0 * d.yo * d.zo, d.out_sp(), (T)0, dcol.data(), cols);
          detail::col2im_add(dcol.data(), d, x0, x1,
                             xn_->grad.data() + n * d.cin * d.in_sp());
        }
      }
    }
    if (bn)
      detail::accumulate_with<T>(bn, [&](T* db) {
        for (long n = 0; n < d.b; ++n)
          for (long co = 0; co < d.cout; ++co) {
            const T* src = g + (n * d.cout + co) * d.out_sp();
            T s = (T)0;
            for (long i = 0; i < d.out_sp(); ++i) s += src[i];
            db[co] += s;
          }
      });
  });
}

/// Transposed 3-d convolution with kernel 2, stride 2 (the only variant the
/// network uses): x (B,Cin,X,Y,Z) * w (Cin,Cout,2,2,2) -> (B,Cout,2X,2Y,2Z).
/// Each of the 8 kernel offsets is one GEMM plus a strided scatter.
template <typename T>
Var<T> conv_transpose3d_k2s2(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  const Shape& xs = x.val().shape;
  const Shape& ws = w.val().shape;
  if (xs.size() != 5 || ws.size() != 5 || ws[2] != 2 || ws[3] != 2 || ws[4] != 2)
    throw std::invalid_argument("conv_transpose3d: expected 5-d input, 2^3 kernel");
  if (xs[1] != ws[0])
    throw std::invalid_argument("conv_transpose3d: channel mismatch");
  const long bdim = xs[0], cin = xs[1], X = xs[2], Y = xs[3], Z = xs[4];
  const long cout = ws[1];
  const long v = X * Y * Z;
  Tensor<T> out({bdim, cout, 2 * X, 2 * Y, 2 * Z});
  out.fill((T)0);
  const long osp = 8 * v;

  // (Cin, Cout) slice of w at kernel offset (a,b2,c). Captured by value by
  // the backward closure, so no references to forward-local state.
  auto off_weight = [cin, cout](const T* wsrc, long a, long b2, long c, T* dst) {
    for (long ci = 0; ci < cin; ++ci)
      for (long co = 0; co < cout; ++co)
        dst[ci * cout + co] = wsrc[((ci * cout + co) * 2 + a) * 4 + b2 * 2 + c];
  };

  {
    std::vector<T> woff((size_t)(cin * cout));
    std::vector<T> obuf((size_t)(cout * v));
    for (long n = 0; n < bdim; ++n) {
      const T* xv = x.val().data() + n * cin * v;
      T* ov = out.data() + n * cout * osp;
      for (long a = 0; a < 2; ++a)
        for (long b2 = 0; b2 < 2; ++b2)
          for (long c = 0; c < 2; ++c) {
            off_weight(w.val().data(), a, b2, c, woff.data());
            gemm(true, false, cout, v, cin, (T)1, woff.data(), cout, xv, v,
                 (T)0, obuf.data(), v);
            for (long co = 0; co < cout; ++co) {
              const T* src = obuf.data() + co * v;
              T* dc = ov + co * osp;
              for (long i = 0; i < X; ++i)
                for (long j = 0; j < Y; ++j) {
                  T* dst = dc + ((2 * i + a) * 2 * Y + 2 * j + b2) * 2 * Z + c;
                  const T* s = src + (i * Y + j) * Z;
                  for (long kk = 0; kk < Z; ++kk) dst[2 * kk] = s[kk];
                }
            }
          }
    }
  }
  if (b.defined()) {
    if (b.val().numel() != cout)
      throw std::invalid_argument("conv_transpose3d: bias size mismatch");
    const T* pb = b.val().data();
    for (long n = 0; n < bdim; ++n)
      for (long co = 0; co < cout; ++co) {
        T* dst = out.data() + (n * cout + co) * osp;
        for (long i = 0; i < osp; ++i) dst[i] += pb[co];
      }
  }
  auto xn = x.n, wn = w.n, bn = b.defined() ? b.n : nullptr;
  return make_op<T>(std::move(out), {xn, wn, bn},
                    [xn, wn, bn, bdim, cin, cout, X, Y, Z, v, osp,
                     off_weight](Node<T>& self) {
    const T* g = self.grad.data();
    std::vector<T> woff((size_t)(cin * cout));
    std::vector<T> gbuf((size_t)(cout * v));
    std::vector<T> dwoff((size_t)(cin * cout));
    if (xn->requires_grad) xn->ensure_grad();
    if (wn->requires_grad) wn->ensure_grad();
    for (long n = 0; n < bdim; ++n) {
      const T* gv = g + n * cout * osp;
      for (long a = 0; a < 2; ++a)
        for (long b2 = 0; b2 < 2; ++b2)
          for (long c = 0; c < 2; ++c) {
            // Gather the strided output-grad samples for this offset.
            for (long co = 0; co < cout; ++co) {
              const T* sc = gv + co * osp;
              T* dst = gbuf.data() + co * v;
              for (long i = 0; i < X; ++i)
                for (long j = 0; j < Y; ++j) {
                  const T* s = sc + ((2 * i + a) * 2 * Y + 2 * j + b2) * 2 * Z + c;
                  T* dd = dst + (i * Y + j) * Z;
                  for (long kk = 0; kk < Z; ++kk) dd[kk] = s[2 * kk];
                }
            }
            if (xn->requires_grad) {
              off_weight(wn->value.data(), a, b2, c, woff.data());
              gemm(false, false, cin, v, cout, (T)1, woff.data(), cout,
                   gbuf.data(), v, (T)1, xn->grad.data() + n * cin * v, v);
            }
            if (wn->requires_grad) {
              gemm(false, true, cin, cout, v, (T)1, xn->value.data() + n * cin * v,
                   v, gbuf.data(), v, (T)0, dwoff.data(), cout);
              T* dw = wn->grad.data();
              for (long ci = 0; ci < cin; ++ci)
                for (long co = 0; co < cout; ++co)
                  dw[((ci * cout + co) * 2 + a) * 4 + b2 * 2 + c] +=
                      dwoff[(size_t)(ci * cout + co)];
            }
          }
    }
    if (bn)
      detail::accumulate_with<T>(bn, [&](T* db) {
        for (long n = 0; n < bdim; ++n)
          for (long co = 0; co < cout; ++co) {
            const T* src = g + (n * cout + co) * osp;
            T s = (T)0;
            for (long i = 0; i < osp; ++i) s += src[i];
            db[co] += s;
          }
      });
  });
}

}  // namespace cisunet
