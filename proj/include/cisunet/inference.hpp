#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "cisunet/volume.hpp"

namespace cisunet {

// ---------------------------------------------------------------------------
// Sliding-window plan
// ---------------------------------------------------------------------------

/// Window origins along one axis: spaced by patch·(1−overlap), with a final
/// window shifted inward to end flush with the volume (never past it), so
/// every voxel is covered without zero-padding at the far border.
inline std::vector<long> window_origins_1d(long dim, long patch,
                                           double overlap) {
  if (patch < 1 || dim < patch)
    throw std::invalid_argument("window_origins: need dim >= patch >= 1");
  if (!(overlap >= 0.0 && overlap < 1.0))
    throw std::invalid_argument("window_origins: overlap must be in [0,1)");
  const long stride =
      std::max(1L, (long)std::llround((double)patch * (1.0 - overlap)));
  std::vector<long> out;
  for (long pos = 0; pos + patch <= dim; pos += stride) out.push_back(pos);
  if (out.back() != dim - patch) out.push_back(dim - patch);
  return out;
}

/// Ordered window origins plus the per-window blend kernel. Blending uses a
/// separable Gaussian centered in the patch with σ = patch/8, so window seams
/// are dominated by window-center predictions.
struct SlidingPlan {
  std::array<long, 3> patch;
  double overlap;
  std::vector<std::array<long, 3>> origins;  // row-major over (x,y,z) steps
  std::array<std::vector<float>, 3> blend_axis;  // separable kernel factors

  SlidingPlan(const Shape& dims, std::array<long, 3> patch_size,
              double overlap_frac)
      : patch(patch_size), overlap(overlap_frac) {
    if (dims.size() != 3)
      throw std::invalid_argument("SlidingPlan: expected 3-d volume dims");
    std::array<std::vector<long>, 3> axis;
    for (int a = 0; a < 3; ++a)
      axis[(size_t)a] =
          window_origins_1d(dims[(size_t)a], patch[(size_t)a], overlap);
    for (long x : axis[0])
      for (long y : axis[1])
        for (long z : axis[2]) origins.push_back({x, y, z});
    for (int a = 0; a < 3; ++a) {
      const long p = patch[(size_t)a];
      const double sigma = (double)p / 8.0;
      const double center = (double)(p - 1) / 2.0;
      blend_axis[(size_t)a].resize((size_t)p);
      for (long i = 0; i < p; ++i) {
        const double d = ((double)i - center) / sigma;
        blend_axis[(size_t)a][(size_t)i] = (float)std::exp(-0.5 * d * d);
      }
    }
  }

  float blend_weight(long i, long j, long k) const {
    return blend_axis[0][(size_t)i] * blend_axis[1][(size_t)j] *
           blend_axis[2][(size_t)k];
  }
};

// ---------------------------------------------------------------------------
// Sliding-window prediction
// ---------------------------------------------------------------------------

/// Predict per-class logits for a whole (X,Y,Z) volume by blending overlapping
/// patch forwards. `forward` maps a (1,1,px,py,pz) tensor to (1,C,px,py,pz)
/// logits. Volumes smaller than the patch are padded symmetrically with zeros
/// and cropped back. Windows execute in plan order, so accumulation — and the
/// result — is bit-deterministic. Returns (1,C,X,Y,Z).
template <typename T, typename ForwardFn>
Tensor<T> sliding_window_logits(const Tensor<T>& volume, long num_classes,
                                std::array<long, 3> patch, double overlap,
                                ForwardFn&& forward) {
  if (volume.ndim() != 3)
    throw std::invalid_argument("sliding_window_logits: expected (X,Y,Z), got " +
                                shape_str(volume.shape));
  if (num_classes < 2)
    throw std::invalid_argument("sliding_window_logits: need >= 2 classes");

  std::array<long, 3> pad_lo{}, pad_hi{};
  Shape dims(3);
  for (int a = 0; a < 3; ++a) {
    const long deficit = std::max(0L, patch[(size_t)a] - volume.dim(a));
    pad_lo[(size_t)a] = deficit / 2;
    pad_hi[(size_t)a] = deficit - deficit / 2;
    dims[(size_t)a] = volume.dim(a) + deficit;
  }
  Tensor<T> padded;
  if (dims == volume.shape) {
    padded = volume;
  } else {
    padded = Tensor<T>(dims, T(0));
    const long Y = volume.dim(1), Z = volume.dim(2);
    for (long x = 0; x < volume.dim(0); ++x)
      for (long y = 0; y < Y; ++y)
        for (long z = 0; z < Z; ++z)
          padded.data()[((x + pad_lo[0]) * dims[1] + y + pad_lo[1]) * dims[2] +
                        z + pad_lo[2]] = volume.data()[(x * Y + y) * Z + z];
  }

  const SlidingPlan plan(dims, patch, overlap);
  const long X = dims[0], Y = dims[1], Z = dims[2];
  Tensor<T> acc({num_classes, X, Y, Z}, T(0));
  Tensor<float> norm({X, Y, Z}, 0.0f);

  Tensor<T> window({1, 1, patch[0], patch[1], patch[2]});
  for (const auto& o : plan.origins) {
    for (long i = 0; i < patch[0]; ++i)
      for (long j = 0; j < patch[1]; ++j)
        for (long k = 0; k < patch[2]; ++k)
          window.data()[(i * patch[1] + j) * patch[2] + k] =
              padded.data()[((o[0] + i) * Y + o[1] + j) * Z + o[2] + k];
    Tensor<T> logits = forward(window);
    const Shape want{1, num_classes, patch[0], patch[1], patch[2]};
    if (logits.shape != want)
      throw std::runtime_error("sliding_window_logits: model returned " +
                               shape_str(logits.shape) + ", expected " +
                               shape_str(want));
    for (long c = 0; c < num_classes; ++c)
      for (long i = 0; i < patch[0]; ++i)
        for (long j = 0; j < patch[1]; ++j)
          for (long k = 0; k < patch[2]; ++k) {
            const float w = plan.blend_weight(i, j, k);
            acc.data()[((c * X + o[0] + i) * Y + o[1] + j) * Z + o[2] + k] +=
                (T)w * logits.data()[((c * patch[0] + i) * patch[1] + j) *
                                     patch[2] + k];
            if (c == 0)
              norm.data()[((o[0] + i) * Y + o[1] + j) * Z + o[2] + k] += w;
          }
  }

  for (long v = 0; v < X * Y * Z; ++v) {
    const float w = norm.data()[v];
    if (!(w > 0.0f))
      throw std::logic_error("sliding_window_logits: uncovered voxel");
    for (long c = 0; c < num_classes; ++c)
      acc.data()[c * X * Y * Z + v] /= (T)w;
  }

  const long OX = volume.dim(0), OY = volume.dim(1), OZ = volume.dim(2);
  Tensor<T> out({1, num_classes, OX, OY, OZ});
  for (long c = 0; c < num_classes; ++c)
    for (long x = 0; x < OX; ++x)
      for (long y = 0; y < OY; ++y)
        for (long z = 0; z < OZ; ++z)
          out.data()[((c * OX + x) * OY + y) * OZ + z] =
              acc.data()[((c * X + x + pad_lo[0]) * Y + y + pad_lo[1]) * Z + z +
                         pad_lo[2]];
  return out;
}

// ---------------------------------------------------------------------------
// Argmax labeling
// ---------------------------------------------------------------------------

/// Voxel-wise argmax over the class axis of (1,C,X,Y,Z) or (C,X,Y,Z) logits.
/// Exact ties resolve to the lowest class id.
template <typename T>
LabelVolume labels_from_logits(const Tensor<T>& logits, const Geometry& geom) {
  Shape s = logits.shape;
  if (s.size() == 5 && s[0] == 1) s.erase(s.begin());
  if (s.size() != 4)
    throw std::invalid_argument("labels_from_logits: expected (1,C,X,Y,Z) or "
                                "(C,X,Y,Z), got " + shape_str(logits.shape));
  const long C = s[0], sp = s[1] * s[2] * s[3];
  if (C < 2 || C > 256)
    throw std::invalid_argument("labels_from_logits: class count " +
                                std::to_string(C) + " out of range");
  LabelVolume out;
  out.voxels = Tensor<uint8_t>({s[1], s[2], s[3]});
  out.geom = geom;
  const T* in = logits.data();
  for (long v = 0; v < sp; ++v) {
    long best = 0;
    T best_val = in[v];
    for (long c = 1; c < C; ++c) {
      const T val = in[c * sp + v];
      if (val > best_val) {  // strict: ties keep the lower id
        best_val = val;
        best = c;
      }
    }
    out.voxels.data()[v] = (uint8_t)best;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Geometry restoration
// ---------------------------------------------------------------------------

/// Nearest-neighbor resample of a label volume back onto the original grid
/// (dims + spacing + origin), inverting the preprocessing resample. Label
/// values are copied, never blended.
inline LabelVolume restore_geometry(const LabelVolume& lbl,
                                    const Shape& original_dims,
                                    const Geometry& original_geom) {
  if (original_dims.size() != 3)
    throw std::invalid_argument("restore_geometry: expected 3-d target dims");
  original_geom.validate();
  lbl.geom.validate();
  LabelVolume out;
  out.voxels = Tensor<uint8_t>(original_dims);
  out.geom = original_geom;
  const long nx = lbl.dim(0), ny = lbl.dim(1), nz = lbl.dim(2);
  const long ox = original_dims[0], oy = original_dims[1], oz = original_dims[2];
  const uint8_t* src = lbl.voxels.data();
  uint8_t* dst = out.voxels.data();
  for (long i = 0; i < ox; ++i) {
    const long x = std::clamp(
        std::lround((double)i * original_geom.spacing[0] / lbl.geom.spacing[0]),
        0L, nx - 1);
    for (long j = 0; j < oy; ++j) {
      const long y = std::clamp(
          std::lround((double)j * original_geom.spacing[1] / lbl.geom.spacing[1]),
          0L, ny - 1);
      for (long k = 0; k < oz; ++k) {
        const long z = std::clamp(
            std::lround((double)k * original_geom.spacing[2] /
                        lbl.geom.spacing[2]),
            0L, nz - 1);
        dst[(i * oy + j) * oz + k] = src[(x * ny + y) * nz + z];
      }
    }
  }
  return out;
}

}  // namespace cisunet
