#pragma once

#include <cmath>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "cisunet/config.hpp"
#include "cisunet/core/ops.hpp"
#include "cisunet/layers.hpp"

namespace cisunet {

// ---------------------------------------------------------------------------
// Index-map builders for the window machinery. Each returns a flat gather map
// (out element i takes input element map[i]; -1 writes zero). Layout
// conventions, used consistently everywhere:
//   * token grids are (B, h, w, d, F), row-major, x slowest spatial axis;
//   * window order is row-major over window coordinates (wx, wy, wz);
//   * token order inside a window is row-major over (tx, ty, tz).
// ---------------------------------------------------------------------------

namespace winmap {

using Map = std::shared_ptr<std::vector<long>>;

/// (B, C, X, Y, Z) -> (B, X, Y, Z, C)
inline Map nchw_to_tokens(long B, long C, long X, long Y, long Z) {
  auto m = std::make_shared<std::vector<long>>();
  m->reserve(B * C * X * Y * Z);
  for (long b = 0; b < B; ++b)
    for (long x = 0; x < X; ++x)
      for (long y = 0; y < Y; ++y)
        for (long z = 0; z < Z; ++z)
          for (long c = 0; c < C; ++c)
            m->push_back((((b * C + c) * X + x) * Y + y) * Z + z);
  return m;
}

/// (B, X, Y, Z, C) -> (B, C, X, Y, Z)
inline Map tokens_to_nchw(long B, long C, long X, long Y, long Z) {
  auto m = std::make_shared<std::vector<long>>();
  m->reserve(B * C * X * Y * Z);
  for (long b = 0; b < B; ++b)
    for (long c = 0; c < C; ++c)
      for (long x = 0; x < X; ++x)
        for (long y = 0; y < Y; ++y)
          for (long z = 0; z < Z; ++z)
            m->push_back((((b * X + x) * Y + y) * Z + z) * C + c);
  return m;
}

/// Zero-pad a token grid at the high end of each spatial axis.
inline Map pad_tokens(long B, long h, long w, long d, long F, long hp, long wp,
                      long dp) {
  auto m = std::make_shared<std::vector<long>>();
  m->reserve(B * hp * wp * dp * F);
  for (long b = 0; b < B; ++b)
    for (long x = 0; x < hp; ++x)
      for (long y = 0; y < wp; ++y)
        for (long z = 0; z < dp; ++z)
          for (long f = 0; f < F; ++f)
            m->push_back(x < h && y < w && z < d
                             ? (((b * h + x) * w + y) * d + z) * F + f
                             : -1);
  return m;
}

/// Undo pad_tokens: keep the low (h, w, d) corner of a (hp, wp, dp) grid.
inline Map crop_tokens(long B, long hp, long wp, long dp, long F, long h,
                       long w, long d) {
  auto m = std::make_shared<std::vector<long>>();
  m->reserve(B * h * w * d * F);
  for (long b = 0; b < B; ++b)
    for (long x = 0; x < h; ++x)
      for (long y = 0; y < w; ++y)
        for (long z = 0; z < d; ++z)
          for (long f = 0; f < F; ++f)
            m->push_back((((b * hp + x) * wp + y) * dp + z) * F + f);
  return m;
}

/// Keep the low (X, Y, Z) corner of a channels-first (Xp, Yp, Zp) volume.
inline Map crop_nchw(long B, long C, long Xp, long Yp, long Zp, long X, long Y,
                     long Z) {
  auto m = std::make_shared<std::vector<long>>();
  m->reserve(B * C * X * Y * Z);
  for (long b = 0; b < B; ++b)
    for (long c = 0; c < C; ++c)
      for (long x = 0; x < X; ++x)
        for (long y = 0; y < Y; ++y)
          for (long z = 0; z < Z; ++z)
            m->push_back((((b * C + c) * Xp + x) * Yp + y) * Zp + z);
  return m;
}

/// (B, h, w, d, F) -> (B*nW, M^3, F); spatial dims must be divisible by M.
inline Map window_partition(long B, long h, long w, long d, long F, long M) {
  const long nx = h / M, ny = w / M, nz = d / M;
  auto m = std::make_shared<std::vector<long>>();
  m->reserve(B * h * w * d * F);
  for (long b = 0; b < B; ++b)
    for (long wx = 0; wx < nx; ++wx)
      for (long wy = 0; wy < ny; ++wy)
        for (long wz = 0; wz < nz; ++wz)
          for (long tx = 0; tx < M; ++tx)
            for (long ty = 0; ty < M; ++ty)
              for (long tz = 0; tz < M; ++tz) {
                const long x = wx * M + tx, y = wy * M + ty, z = wz * M + tz;
                const long base = ((((b * h + x) * w + y) * d + z)) * F;
                for (long f = 0; f < F; ++f) m->push_back(base + f);
              }
  return m;
}

/// (B*nW, M^3, F) -> (B, h, w, d, F); exact inverse of window_partition.
inline Map window_reverse(long B, long h, long w, long d, long F, long M) {
  const long ny = w / M, nz = d / M, L = M * M * M;
  auto m = std::make_shared<std::vector<long>>();
  m->reserve(B * h * w * d * F);
  for (long b = 0; b < B; ++b)
    for (long x = 0; x < h; ++x)
      for (long y = 0; y < w; ++y)
        for (long z = 0; z < d; ++z) {
          const long g = ((b * (h / M) + x / M) * ny + y / M) * nz + z / M;
          const long t = ((x % M) * M + y % M) * M + z % M;
          const long base = (g * L + t) * F;
          for (long f = 0; f < F; ++f) m->push_back(base + f);
        }
  return m;
}

/// Roll the grid contents by -s along each spatial axis (out[p] = in[p + s]).
/// Negative s rolls the other way; used to undo the shift.
inline Map roll_tokens(long B, long h, long w, long d, long F, long s) {
  auto wrap = [](long p, long n) { return ((p % n) + n) % n; };
  auto m = std::make_shared<std::vector<long>>();
  m->reserve(B * h * w * d * F);
  for (long b = 0; b < B; ++b)
    for (long x = 0; x < h; ++x)
      for (long y = 0; y < w; ++y)
        for (long z = 0; z < d; ++z) {
          const long xs = wrap(x + s, h), ys = wrap(y + s, w), zs = wrap(z + s, d);
          const long base = (((b * h + xs) * w + ys) * d + zs) * F;
          for (long f = 0; f < F; ++f) m->push_back(base + f);
        }
  return m;
}

/// (B, h, w, d, F) -> (B, h/2, w/2, d/2, 8F); dims must be even. The eight
/// neighbours (dx, dy, dz) concatenate in row-major order, dz fastest.
inline Map patch_merge(long B, long h, long w, long d, long F) {
  const long h2 = h / 2, w2 = w / 2, d2 = d / 2;
  auto m = std::make_shared<std::vector<long>>();
  m->reserve(B * h * w * d * F);
  for (long b = 0; b < B; ++b)
    for (long i = 0; i < h2; ++i)
      for (long j = 0; j < w2; ++j)
        for (long k = 0; k < d2; ++k)
          for (long o = 0; o < 8; ++o) {
            const long x = 2 * i + (o >> 2), y = 2 * j + ((o >> 1) & 1),
                       z = 2 * k + (o & 1);
            const long base = (((b * h + x) * w + y) * d + z) * F;
            for (long f = 0; f < F; ++f) m->push_back(base + f);
          }
  return m;
}

/// Slice q/k/v out of the fused (G*L, 3F) projection as (G*H, L, F/H).
inline Map qkv_part(long G, long L, long F, long H, long part) {
  const long dh = F / H;
  auto m = std::make_shared<std::vector<long>>();
  m->reserve(G * H * L * dh);
  for (long g = 0; g < G; ++g)
    for (long hh = 0; hh < H; ++hh)
      for (long l = 0; l < L; ++l) {
        const long base = (g * L + l) * 3 * F + part * F + hh * dh;
        for (long e = 0; e < dh; ++e) m->push_back(base + e);
      }
  return m;
}

/// (G*H, L, dh) -> (G*L, H*dh): undo the head split.
inline Map head_merge(long G, long H, long L, long dh) {
  auto m = std::make_shared<std::vector<long>>();
  m->reserve(G * H * L * dh);
  for (long g = 0; g < G; ++g)
    for (long l = 0; l < L; ++l)
      for (long hh = 0; hh < H; ++hh) {
        const long base = ((g * H + hh) * L + l) * dh;
        for (long e = 0; e < dh; ++e) m->push_back(base + e);
      }
  return m;
}

/// Expand the relative-position table ((2M-1)^3, H) to per-pair biases
/// (H, L, L) indexed by the offset between token positions.
inline Map relpos(long M, long H) {
  const long L = M * M * M, R = 2 * M - 1;
  auto coord = [M](long t, long axis) {
    if (axis == 0) return t / (M * M);
    if (axis == 1) return (t / M) % M;
    return t % M;
  };
  auto m = std::make_shared<std::vector<long>>();
  m->reserve(H * L * L);
  for (long hh = 0; hh < H; ++hh)
    for (long p = 0; p < L; ++p)
      for (long q = 0; q < L; ++q) {
        long row = 0;
        for (int axis = 0; axis < 3; ++axis)
          row = row * R + (coord(p, axis) - coord(q, axis) + M - 1);
        m->push_back(row * H + hh);
      }
  return m;
}

}  // namespace winmap

// ---------------------------------------------------------------------------
// Differentiable wrappers
// ---------------------------------------------------------------------------

/// (B, C, X, Y, Z) -> channels-last token grid (B, X, Y, Z, C).
template <typename T>
Var<T> tokens_from_nchw(const Var<T>& x) {
  const Shape& s = x.val().shape;
  if (s.size() != 5) throw std::runtime_error("tokens_from_nchw: need 5-d input");
  return gather(x, winmap::nchw_to_tokens(s[0], s[1], s[2], s[3], s[4]),
                {s[0], s[2], s[3], s[4], s[1]});
}

/// Token grid (B, h, w, d, F) -> (B, F, h, w, d).
template <typename T>
Var<T> nchw_from_tokens(const Var<T>& t) {
  const Shape& s = t.val().shape;
  if (s.size() != 5) throw std::runtime_error("nchw_from_tokens: need 5-d input");
  return gather(t, winmap::tokens_to_nchw(s[0], s[4], s[1], s[2], s[3]),
                {s[0], s[4], s[1], s[2], s[3]});
}

/// Token grid -> stacked windows (B*nW, M^3, F). Dims must divide by M.
template <typename T>
Var<T> window_partition(const Var<T>& t, long M) {
  const Shape& s = t.val().shape;
  if (s.size() != 5) throw std::runtime_error("window_partition: need 5-d token grid");
  if (s[1] % M || s[2] % M || s[3] % M)
    throw std::runtime_error("window_partition: grid dims " + shape_str(s) +
                             " not divisible by window size " + std::to_string(M));
  const long nW = (s[1] / M) * (s[2] / M) * (s[3] / M);
  return gather(t, winmap::window_partition(s[0], s[1], s[2], s[3], s[4], M),
                {s[0] * nW, M * M * M, s[4]});
}

/// Stacked windows back to the (B, h, w, d, F) grid they came from.
template <typename T>
Var<T> window_reverse(const Var<T>& wins, long M, long B, long h, long w, long d) {
  const Shape& s = wins.val().shape;
  if (s.size() != 3 || s[1] != M * M * M)
    throw std::runtime_error("window_reverse: expected (G, M^3, F) windows");
  const long F = s[2];
  if (s[0] * M * M * M != B * h * w * d)
    throw std::runtime_error("window_reverse: window count does not match grid");
  return gather(wins, winmap::window_reverse(B, h, w, d, F, M), {B, h, w, d, F});
}

/// Cyclic shift: roll contents by -s along every spatial axis.
template <typename T>
Var<T> cyclic_shift(const Var<T>& t, long s) {
  const Shape& sh = t.val().shape;
  return gather(t, winmap::roll_tokens(sh[0], sh[1], sh[2], sh[3], sh[4], s), sh);
}

/// Inverse of cyclic_shift.
template <typename T>
Var<T> cyclic_unshift(const Var<T>& t, long s) {
  return cyclic_shift(t, -s);
}

/// Additive attention mask for the shifted pass: (nW, M^3, M^3) with 0 where
/// both tokens come from the same contiguous pre-shift region and -1e9
/// otherwise. Positions along each axis split into three bands of the shifted
/// coordinate: [0, n-M), [n-M, n-s), [n-s, n); the banded triple is the
/// region id. Grid dims must already be padded to multiples of M.
template <typename T>
Tensor<T> build_shift_mask(long h, long w, long d, long M, long s) {
  if (h % M || w % M || d % M)
    throw std::runtime_error("build_shift_mask: dims must be multiples of window size");
  const long nW = (h / M) * (w / M) * (d / M), L = M * M * M;
  Tensor<T> mask({nW, L, L});
  if (s == 0) return mask;  // no shift, nothing to block
  auto band = [M, s](long p, long n) {
    if (p < n - M) return 0L;
    return p < n - s ? 1L : 2L;
  };
  std::vector<long> id(L);
  T* out = mask.data();
  long wi = 0;
  for (long wx = 0; wx < h / M; ++wx)
    for (long wy = 0; wy < w / M; ++wy)
      for (long wz = 0; wz < d / M; ++wz, ++wi) {
        long t = 0;
        for (long tx = 0; tx < M; ++tx)
          for (long ty = 0; ty < M; ++ty)
            for (long tz = 0; tz < M; ++tz, ++t)
              id[t] = (band(wx * M + tx, h) * 3 + band(wy * M + ty, w)) * 3 +
                      band(wz * M + tz, d);
        T* mw = out + wi * L * L;
        for (long p = 0; p < L; ++p)
          for (long q = 0; q < L; ++q)
            mw[p * L + q] = id[p] == id[q] ? (T)0 : (T)-1e9;
      }
  return mask;
}

// ---------------------------------------------------------------------------
// Modules
// ---------------------------------------------------------------------------

/// Multi-head self-attention within each window, with learned relative
/// position biases (table zero-initialised) and an optional additive mask.
template <typename T>
struct WindowAttentionM {
  long dim = 0, heads = 0, M = 0;
  LinearM<T> qkv, proj;
  Var<T> relpos;  // ((2M-1)^3, heads)

  void init(long dim_, long heads_, long M_, Rng& rng) {
    dim = dim_;
    heads = heads_;
    M = M_;
    qkv.init(dim, 3 * dim, true, rng);
    proj.init(dim, dim, true, rng);
    const long R = 2 * M - 1;
    relpos = Var<T>::leaf(Tensor<T>({R * R * R, heads}), true);
  }

  /// windows: (G, M^3, dim). mask, if given: (nW, M^3, M^3) with G % nW == 0.
  /// attn_out, if given, receives a copy of the post-softmax attention
  /// (G, heads, M^3, M^3).
  Var<T> forward(const Var<T>& windows, const Tensor<T>* mask,
                 Tensor<T>* attn_out = nullptr) const {
    const Shape& s = windows.val().shape;
    const long G = s[0], L = s[1], F = s[2], dh = F / heads;
    Var<T> fused = qkv.forward(reshape(windows, {G * L, F}));
    Var<T> q = gather(fused, winmap::qkv_part(G, L, F, heads, 0), {G * heads, L, dh});
    Var<T> k = gather(fused, winmap::qkv_part(G, L, F, heads, 1), {G * heads, L, dh});
    Var<T> v = gather(fused, winmap::qkv_part(G, L, F, heads, 2), {G * heads, L, dh});
    Var<T> scores = scale(bmm_nt(q, k), (T)(1.0 / std::sqrt((double)dh)));
    Var<T> s4 = reshape(scores, {G, heads, L, L});
    Var<T> bias = gather(relpos, winmap::relpos(M, heads), {heads, L, L});
    s4 = add_head_bias(s4, bias);
    if (mask) s4 = add_window_mask(s4, *mask);
    Var<T> attn = softmax_lastdim(s4);
    if (attn_out) *attn_out = attn.val().clone();
    Var<T> ctx = bmm(reshape(attn, {G * heads, L, L}), v);
    Var<T> merged = gather(ctx, winmap::head_merge(G, heads, L, dh), {G * L, F});
    return reshape(proj.forward(merged), {G, L, F});
  }

  void params(ParamList<T>& out, const std::string& p) {
    qkv.params(out, p + ".qkv");
    proj.params(out, p + ".proj");
    out.push_back({p + ".relpos", &relpos});
  }
};

/// Two-layer GELU MLP operating on the token dimension.
template <typename T>
struct MlpM {
  LinearM<T> fc1, fc2;

  void init(long dim, long hidden, Rng& rng) {
    fc1.init(dim, hidden, true, rng);
    fc2.init(hidden, dim, true, rng);
  }
  Var<T> forward(const Var<T>& x) const {
    return fc2.forward(gelu(fc1.forward(x)));
  }
  void params(ParamList<T>& out, const std::string& p) {
    fc1.params(out, p + ".fc1");
    fc2.params(out, p + ".fc2");
  }
};

/// Intermediate token grids of one Swin block, in computation order.
template <typename T>
struct BottleneckActs {
  Tensor<T> z;       // embedded input
  Tensor<T> zhat;    // after W-MSA residual
  Tensor<T> zprime;  // after first MLP residual
  Tensor<T> zbar;    // after SW-MSA residual
  Tensor<T> zpp;     // after second MLP residual (block output)
};

/// One Swin transformer block: pre-norm W-MSA, MLP, shifted-window SW-MSA,
/// MLP, each with an identity residual. Grids whose spatial dims are not
/// multiples of the window size are zero-padded for attention and cropped at
/// the end.
template <typename T>
struct SwinBlockM {
  long dim = 0, heads = 0, M = 0, s = 0;
  LayerNormM<T> ln1, ln2, ln3, ln4;
  WindowAttentionM<T> attn_w, attn_sw;
  MlpM<T> mlp1, mlp2;

  void init(long dim_, long heads_, long M_, long s_, double mlp_ratio, Rng& rng) {
    dim = dim_;
    heads = heads_;
    M = M_;
    s = s_;
    const long hidden = std::lround(mlp_ratio * dim);
    ln1.init(dim);
    attn_w.init(dim, heads, M, rng);
    ln2.init(dim);
    mlp1.init(dim, hidden, rng);
    ln3.init(dim);
    attn_sw.init(dim, heads, M, rng);
    ln4.init(dim);
    mlp2.init(dim, hidden, rng);
  }

  /// z: token grid (B, h, w, d, dim). acts, if given, receives copies of the
  /// five intermediate grids (cropped to the input shape). shifted_attn, if
  /// given, receives the post-softmax attention of the shifted pass.
  Var<T> forward(const Var<T>& z, BottleneckActs<T>* acts = nullptr,
                 Tensor<T>* shifted_attn = nullptr) const {
    const Shape& sh = z.val().shape;
    const long B = sh[0], h = sh[1], w = sh[2], d = sh[3], F = sh[4];
    auto up = [this](long n) { return (n + M - 1) / M * M; };
    const long hp = up(h), wp = up(w), dp = up(d);
    const bool padded = hp != h || wp != w || dp != d;

    Var<T> zp = padded ? gather(z, winmap::pad_tokens(B, h, w, d, F, hp, wp, dp),
                                {B, hp, wp, dp, F})
                       : z;
    auto save = [&](Tensor<T> BottleneckActs<T>::* slot, const Var<T>& v) {
      if (!acts) return;
      if (!padded) {
        acts->*slot = v.val().clone();
        return;
      }
      Tensor<T> c({B, h, w, d, F});
      const auto map = winmap::crop_tokens(B, hp, wp, dp, F, h, w, d);
      const T* src = v.val().data();
      T* dst = c.data();
      for (size_t i = 0; i < map->size(); ++i) dst[i] = src[(*map)[i]];
      acts->*slot = std::move(c);
    };
    save(&BottleneckActs<T>::z, zp);

    auto mlp_step = [&](const MlpM<T>& mlp, const LayerNormM<T>& ln,
                        const Var<T>& x) {
      Var<T> rows = reshape(ln.forward(x), {B * hp * wp * dp, F});
      return add(x, reshape(mlp.forward(rows), {B, hp, wp, dp, F}));
    };

    // W-MSA + residual
    Var<T> a = window_reverse(attn_w.forward(window_partition(ln1.forward(zp), M),
                                             nullptr),
                              M, B, hp, wp, dp);
    Var<T> zhat = add(zp, a);
    save(&BottleneckActs<T>::zhat, zhat);

    // MLP + residual
    Var<T> zprime = mlp_step(mlp1, ln2, zhat);
    save(&BottleneckActs<T>::zprime, zprime);

    // SW-MSA + residual (cyclic shift, masked attention, unshift)
    Tensor<T> mask = build_shift_mask<T>(hp, wp, dp, M, s);
    Var<T> shifted = cyclic_shift(ln3.forward(zprime), s);
    Var<T> b = attn_sw.forward(window_partition(shifted, M), &mask, shifted_attn);
    Var<T> zbar =
        add(zprime, cyclic_unshift(window_reverse(b, M, B, hp, wp, dp), s));
    save(&BottleneckActs<T>::zbar, zbar);

    // MLP + residual
    Var<T> zpp = mlp_step(mlp2, ln4, zbar);
    save(&BottleneckActs<T>::zpp, zpp);

    return padded ? gather(zpp, winmap::crop_tokens(B, hp, wp, dp, F, h, w, d),
                           {B, h, w, d, F})
                  : zpp;
  }

  void params(ParamList<T>& out, const std::string& p) {
    ln1.params(out, p + ".ln1");
    attn_w.params(out, p + ".attn_w");
    ln2.params(out, p + ".ln2");
    mlp1.params(out, p + ".mlp1");
    ln3.params(out, p + ".ln3");
    attn_sw.params(out, p + ".attn_sw");
    ln4.params(out, p + ".ln4");
    mlp2.params(out, p + ".mlp2");
  }
};

/// Patch merging: concatenate each 2x2x2 token neighbourhood (8F), layer-norm,
/// then a learned reduction to 2F. Halves every spatial dim (odd dims are
/// zero-padded first).
template <typename T>
struct PatchMergeM {
  long dim = 0;
  LayerNormM<T> ln;   // over 8F
  LinearM<T> reduce;  // 8F -> 2F

  void init(long F, Rng& rng) {
    dim = F;
    ln.init(8 * F);
    reduce.init(8 * F, 2 * F, true, rng);
  }

  Var<T> forward(const Var<T>& t) const {
    const Shape& s = t.val().shape;
    const long B = s[0], h = s[1], w = s[2], d = s[3], F = s[4];
    const long hp = (h + 1) / 2 * 2, wp = (w + 1) / 2 * 2, dp = (d + 1) / 2 * 2;
    Var<T> x = (hp != h || wp != w || dp != d)
                   ? gather(t, winmap::pad_tokens(B, h, w, d, F, hp, wp, dp),
                            {B, hp, wp, dp, F})
                   : t;
    const long h2 = hp / 2, w2 = wp / 2, d2 = dp / 2;
    Var<T> merged = gather(x, winmap::patch_merge(B, hp, wp, dp, F),
                           {B, h2, w2, d2, 8 * F});
    Var<T> rows = reshape(ln.forward(merged), {B * h2 * w2 * d2, 8 * F});
    return reshape(reduce.forward(rows), {B, h2, w2, d2, 2 * F});
  }

  void params(ParamList<T>& out, const std::string& p) {
    ln.params(out, p + ".ln");
    reduce.params(out, p + ".reduce");
  }
};

/// Context-aware shifted-window bottleneck: embed the deepest encoder map to
/// F tokens, run one Swin block, pool global context by patch merging to 2F at
/// half resolution, upsample it back, fuse with the embedded tokens and refine
/// with two convolutions.
template <typename T>
struct CswSaBottleneck {
  long F = 0;
  Conv3dM<T> embed;    // 1x1x1, C4 -> F
  SwinBlockM<T> swin;
  PatchMergeM<T> merge;
  ConvT3dM<T> up;      // 2F -> F
  ConvBlock<T> refine1, refine2;

  void init(const ModelConfig& cfg, Rng& rng) {
    F = cfg.embed_dim;
    embed.init(cfg.stage_channels[3], F, 1, 1, 0, rng);
    swin.init(F, cfg.num_heads, cfg.window_size, cfg.shift_size, cfg.mlp_ratio,
              rng);
    merge.init(F, rng);
    up.init(2 * F, F, rng);
    refine1.init(2 * F, 16 * F, 3, 1, 1, true, rng);
    refine2.init(16 * F, F, 3, 1, 1, true, rng);
  }

  /// x: deepest encoder features (B, C4, h, w, d). Returns (B, F, h, w, d).
  Var<T> forward(const Var<T>& x, BottleneckActs<T>* acts = nullptr,
                 Tensor<T>* shifted_attn = nullptr) const {
    const Shape& s = x.val().shape;
    const long B = s[0], h = s[2], w = s[3], d = s[4];
    Var<T> z = tokens_from_nchw(embed.forward(x));
    Var<T> zpp = swin.forward(z, acts, shifted_attn);
    Var<T> pooled = merge.forward(zpp);  // (B, ceil(h/2), ..., 2F)
    Var<T> g = up.forward(nchw_from_tokens(pooled));
    const Shape& gs = g.val().shape;
    if (gs[2] != h || gs[3] != w || gs[4] != d)
      g = gather(g, winmap::crop_nchw(B, F, gs[2], gs[3], gs[4], h, w, d),
                 {B, F, h, w, d});
    Var<T> fused = concat(g, nchw_from_tokens(z), 1);  // (B, 2F, h, w, d)
    return refine2.forward(refine1.forward(fused));
  }

  void params(ParamList<T>& out, const std::string& p) {
    embed.params(out, p + ".embed");
    swin.params(out, p + ".swin");
    merge.params(out, p + ".merge");
    up.params(out, p + ".up");
    refine1.params(out, p + ".refine1");
    refine2.params(out, p + ".refine2");
  }
};

/// Ablation bottleneck: same embedding and Swin block, no context branch;
/// two refinement convolutions at width F.
template <typename T>
struct SwSaBottleneck {
  long F = 0;
  Conv3dM<T> embed;
  SwinBlockM<T> swin;
  ConvBlock<T> refine1, refine2;

  void init(const ModelConfig& cfg, Rng& rng) {
    F = cfg.embed_dim;
    embed.init(cfg.stage_channels[3], F, 1, 1, 0, rng);
    swin.init(F, cfg.num_heads, cfg.window_size, cfg.shift_size, cfg.mlp_ratio,
              rng);
    refine1.init(F, F, 3, 1, 1, true, rng);
    refine2.init(F, F, 3, 1, 1, true, rng);
  }

  Var<T> forward(const Var<T>& x, BottleneckActs<T>* acts = nullptr,
                 Tensor<T>* shifted_attn = nullptr) const {
    Var<T> z = tokens_from_nchw(embed.forward(x));
    Var<T> zpp = swin.forward(z, acts, shifted_attn);
    return refine2.forward(refine1.forward(nchw_from_tokens(zpp)));
  }

  void params(ParamList<T>& out, const std::string& p) {
    embed.params(out, p + ".embed");
    swin.params(out, p + ".swin");
    refine1.params(out, p + ".refine1");
    refine2.params(out, p + ".refine2");
  }
};

}  // namespace cisunet
