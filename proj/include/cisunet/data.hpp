#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "cisunet/config.hpp"
#include "cisunet/core/rng.hpp"
#include "cisunet/nifti.hpp"
#include "cisunet/volume.hpp"

namespace cisunet {

// ---------------------------------------------------------------------------
// Resampling
// ---------------------------------------------------------------------------

namespace detail {

inline Shape resampled_shape(const Shape& in, const std::array<double, 3>& sp,
                             double target) {
  if (!(target > 0.0))
    throw std::invalid_argument("resample: target spacing must be > 0");
  Shape out(3);
  for (int a = 0; a < 3; ++a) {
    out[(size_t)a] = std::lround((double)in[(size_t)a] * sp[(size_t)a] / target);
    if (out[(size_t)a] < 1)
      throw std::invalid_argument(
          "resample: degenerate output size along axis " + std::to_string(a));
  }
  return out;
}

}  // namespace detail

/// Trilinear resampling of a scalar volume to isotropic `target` mm spacing.
/// Output size per axis is round(in_dim · in_spacing / target); voxel centers
/// map as index·spacing, so resampling at the input's own spacing is an exact
/// identity.
inline ImageVolume resample_image(const ImageVolume& v, double target = 1.5) {
  const Shape out_shape =
      detail::resampled_shape(v.voxels.shape, v.geom.spacing, target);
  ImageVolume out;
  out.voxels = Tensor<float>(out_shape);
  out.geom = v.geom;
  out.geom.spacing = {target, target, target};
  const long nx = v.dim(0), ny = v.dim(1), nz = v.dim(2);
  const long ox = out_shape[0], oy = out_shape[1], oz = out_shape[2];
  const float* src = v.voxels.data();
  float* dst = out.voxels.data();
  auto src_at = [&](long x, long y, long z) {
    return src[(x * ny + y) * nz + z];
  };
  for (long i = 0; i < ox; ++i) {
    const double fx = std::clamp((double)i * target / v.geom.spacing[0], 0.0,
                                 (double)(nx - 1));
    const long x0 = (long)fx, x1 = std::min(x0 + 1, nx - 1);
    const double tx = fx - (double)x0;
    for (long j = 0; j < oy; ++j) {
      const double fy = std::clamp((double)j * target / v.geom.spacing[1], 0.0,
                                   (double)(ny - 1));
      const long y0 = (long)fy, y1 = std::min(y0 + 1, ny - 1);
      const double ty = fy - (double)y0;
      for (long k = 0; k < oz; ++k) {
        const double fz = std::clamp((double)k * target / v.geom.spacing[2],
                                     0.0, (double)(nz - 1));
        const long z0 = (long)fz, z1 = std::min(z0 + 1, nz - 1);
        const double tz = fz - (double)z0;
        const double c00 = src_at(x0, y0, z0) * (1 - tz) + src_at(x0, y0, z1) * tz;
        const double c01 = src_at(x0, y1, z0) * (1 - tz) + src_at(x0, y1, z1) * tz;
        const double c10 = src_at(x1, y0, z0) * (1 - tz) + src_at(x1, y0, z1) * tz;
        const double c11 = src_at(x1, y1, z0) * (1 - tz) + src_at(x1, y1, z1) * tz;
        dst[(i * oy + j) * oz + k] =
            (float)((c00 * (1 - ty) + c01 * ty) * (1 - tx) +
                    (c10 * (1 - ty) + c11 * ty) * tx);
      }
    }
  }
  return out;
}

/// Nearest-neighbor resampling for label volumes: class ids are copied, never
/// blended, so the output label set is a subset of the input's.
inline LabelVolume resample_labels(const LabelVolume& v, double target = 1.5) {
  const Shape out_shape =
      detail::resampled_shape(v.voxels.shape, v.geom.spacing, target);
  LabelVolume out;
  out.voxels = Tensor<uint8_t>(out_shape);
  out.geom = v.geom;
  out.geom.spacing = {target, target, target};
  const long nx = v.dim(0), ny = v.dim(1), nz = v.dim(2);
  const long ox = out_shape[0], oy = out_shape[1], oz = out_shape[2];
  const uint8_t* src = v.voxels.data();
  uint8_t* dst = out.voxels.data();
  for (long i = 0; i < ox; ++i) {
    const long x = std::clamp(
        std::lround((double)i * target / v.geom.spacing[0]), 0L, nx - 1);
    for (long j = 0; j < oy; ++j) {
      const long y = std::clamp(
          std::lround((double)j * target / v.geom.spacing[1]), 0L, ny - 1);
      for (long k = 0; k < oz; ++k) {
        const long z = std::clamp(
            std::lround((double)k * target / v.geom.spacing[2]), 0L, nz - 1);
        dst[(i * oy + j) * oz + k] = src[(x * ny + y) * nz + z];
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Intensity normalization
// ---------------------------------------------------------------------------

/// Clamp to [lo,hi] and map affinely onto [0,1].
inline ImageVolume normalize_intensity(
    const ImageVolume& v, std::array<double, 2> window = {-175.0, 250.0}) {
  if (!(window[0] < window[1]))
    throw std::invalid_argument("normalize_intensity: window lo must be < hi");
  ImageVolume out;
  out.voxels = Tensor<float>(v.voxels.shape);
  out.geom = v.geom;
  const double lo = window[0], scale = 1.0 / (window[1] - window[0]);
  const float* src = v.voxels.data();
  float* dst = out.voxels.data();
  for (long i = 0; i < v.voxels.numel(); ++i) {
    const double c = std::clamp((double)src[i], window[0], window[1]);
    dst[i] = (float)((c - lo) * scale);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Balanced patch sampling
// ---------------------------------------------------------------------------

/// One training patch plus the provenance needed to reconstruct it exactly.
struct SamplePatch {
  Tensor<float> image;    // (X,Y,Z)
  Tensor<uint8_t> labels;  // (X,Y,Z)
  std::string volume_id;
  std::array<long, 3> origin{0, 0, 0};  // crop origin in the padded volume
  std::array<long, 3> pad_lo{0, 0, 0};  // symmetric padding applied first
  bool foreground_draw = false;          // which side of the pos/neg coin
  bool fallback = false;  // wanted a foreground center but none existed
};

namespace detail {

template <typename T>
Tensor<T> pad_volume(const Tensor<T>& v, const std::array<long, 3>& lo,
                     const std::array<long, 3>& hi) {
  if (lo == std::array<long, 3>{0, 0, 0} && hi == std::array<long, 3>{0, 0, 0})
    return v;
  Tensor<T> out({v.dim(0) + lo[0] + hi[0], v.dim(1) + lo[1] + hi[1],
                 v.dim(2) + lo[2] + hi[2]});
  const long Y = v.dim(1), Z = v.dim(2), OY = out.dim(1), OZ = out.dim(2);
  for (long x = 0; x < v.dim(0); ++x)
    for (long y = 0; y < Y; ++y)
      for (long z = 0; z < Z; ++z)
        out.data()[((x + lo[0]) * OY + y + lo[1]) * OZ + z + lo[2]] =
            v.data()[(x * Y + y) * Z + z];
  return out;
}

template <typename T>
Tensor<T> crop_volume(const Tensor<T>& v, const std::array<long, 3>& origin,
                      const std::array<long, 3>& size) {
  Tensor<T> out({size[0], size[1], size[2]});
  const long Y = v.dim(1), Z = v.dim(2);
  for (long x = 0; x < size[0]; ++x)
    for (long y = 0; y < size[1]; ++y)
      for (long z = 0; z < size[2]; ++z)
        out.data()[(x * size[1] + y) * size[2] + z] =
            v.data()[((x + origin[0]) * Y + y + origin[1]) * Z + z + origin[2]];
  return out;
}

}  // namespace detail

/// Draw `count` patches whose centers are foreground voxels with probability
/// wpos/(wpos+wneg) and background voxels otherwise. Crops are clipped to the
/// volume; volumes smaller than the patch are padded symmetrically (zeros)
/// first. If a foreground center is requested but the volume has none, the
/// draw falls back to background and sets the `fallback` flag.
inline std::vector<SamplePatch> crop_pos_neg(
    const Tensor<float>& image, const Tensor<uint8_t>& labels,
    const std::array<long, 3>& patch_size, std::array<double, 2> ratio,
    Rng& rng, long count, const std::string& volume_id = "") {
  if (image.shape != labels.shape)
    throw std::invalid_argument("crop_pos_neg: image/label shape mismatch " +
                                shape_str(image.shape) + " vs " +
                                shape_str(labels.shape));
  if (image.ndim() != 3)
    throw std::invalid_argument("crop_pos_neg: expected 3-d volumes");
  for (long p : patch_size)
    if (p < 1) throw std::invalid_argument("crop_pos_neg: patch size must be >= 1");
  if (ratio[0] < 0 || ratio[1] < 0 || ratio[0] + ratio[1] <= 0)
    throw std::invalid_argument(
        "crop_pos_neg: ratio weights must be nonnegative with positive sum");

  std::array<long, 3> pad_lo{}, pad_hi{};
  for (int a = 0; a < 3; ++a) {
    const long deficit = std::max(0L, patch_size[(size_t)a] - image.dim(a));
    pad_lo[(size_t)a] = deficit / 2;
    pad_hi[(size_t)a] = deficit - deficit / 2;
  }
  Tensor<float> img = detail::pad_volume(image, pad_lo, pad_hi);
  Tensor<uint8_t> lbl = detail::pad_volume(labels, pad_lo, pad_hi);
  const long X = img.dim(0), Y = img.dim(1), Z = img.dim(2);

  std::vector<long> fg;
  for (long i = 0; i < lbl.numel(); ++i)
    if (lbl.data()[i] != 0) fg.push_back(i);
  const bool has_bg = (long)fg.size() < lbl.numel();

  const double p_fg = ratio[0] / (ratio[0] + ratio[1]);
  std::vector<SamplePatch> out;
  out.reserve((size_t)count);
  for (long s = 0; s < count; ++s) {
    SamplePatch sp;
    sp.volume_id = volume_id;
    sp.pad_lo = pad_lo;
    sp.foreground_draw = rng.uniform() < p_fg;
    long center;
    if (sp.foreground_draw && !fg.empty()) {
      center = fg[(size_t)rng.randint(0, (long)fg.size())];
    } else {
      sp.fallback = sp.foreground_draw;  // wanted foreground, none available
      if (!has_bg) {
        center = fg[(size_t)rng.randint(0, (long)fg.size())];
      } else {
        do {
          center = rng.randint(0, lbl.numel());
        } while (lbl.data()[center] != 0);
      }
    }
    const std::array<long, 3> c{center / (Y * Z), (center / Z) % Y, center % Z};
    const std::array<long, 3> dims{X, Y, Z};
    for (int a = 0; a < 3; ++a)
      sp.origin[(size_t)a] =
          std::clamp(c[(size_t)a] - patch_size[(size_t)a] / 2, 0L,
                     dims[(size_t)a] - patch_size[(size_t)a]);
    sp.image = detail::crop_volume(img, sp.origin, patch_size);
    sp.labels = detail::crop_volume(lbl, sp.origin, patch_size);
    out.push_back(std::move(sp));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic phantom
// ---------------------------------------------------------------------------

/// Seeded tubular phantom: a bright sinusoidal trunk (class 1) along x with
/// at least two side branches (classes 2..C−1, cycling when there are more
/// branches than classes; class 1 when C==2). The image is a smoothed
/// label-dependent intensity field plus Gaussian noise, emitted in
/// Hounsfield-like units so the (−175,250) window maps tissue onto [0,1].
/// Output spacing is 1.5 mm isotropic. Fully determined by the rng state.
inline std::pair<ImageVolume, LabelVolume> synthetic_phantom(Rng& rng,
                                                             long size,
                                                             long num_classes) {
  if (size < 32)
    throw std::invalid_argument("synthetic_phantom: size must be >= 32");
  if (num_classes < 2 || num_classes > 255)
    throw std::invalid_argument(
        "synthetic_phantom: num_classes must be in [2, 255]");

  const long n = size;
  Tensor<uint8_t> lbl({n, n, n}, 0);
  auto at = [&](long x, long y, long z) -> uint8_t& {
    return lbl.data()[(x * n + y) * n + z];
  };

  const double r_trunk = std::max(2.0, (double)n / 16.0);
  const double amp = (double)n / 10.0;
  const double phase_y = rng.uniform(0.0, 6.283185307179586);
  const double phase_z = rng.uniform(0.0, 6.283185307179586);
  auto cy = [&](double x) {
    return (double)n / 2.0 + amp * std::sin(6.283185307179586 * x / (double)n + phase_y);
  };
  auto cz = [&](double x) {
    return (double)n / 2.0 + amp * std::cos(6.283185307179586 * x / (double)n + phase_z);
  };

  // Trunk: per-slice disc of radius r_trunk around the wandering centerline.
  for (long x = 0; x < n; ++x) {
    const double yc = cy((double)x), zc = cz((double)x);
    const long y0 = std::max(0L, (long)std::floor(yc - r_trunk));
    const long y1 = std::min(n - 1, (long)std::ceil(yc + r_trunk));
    const long z0 = std::max(0L, (long)std::floor(zc - r_trunk));
    const long z1 = std::min(n - 1, (long)std::ceil(zc + r_trunk));
    for (long y = y0; y <= y1; ++y)
      for (long z = z0; z <= z1; ++z) {
        const double dy = (double)y - yc, dz = (double)z - zc;
        if (dy * dy + dz * dz <= r_trunk * r_trunk) at(x, y, z) = 1;
      }
  }

  // Branches: straight tubes rooted on the centerline, pointing outward in
  // the y-z plane with golden-angle azimuth spacing (so branches that are
  // neighbors along x diverge immediately and never cross). A branch writes
  // over background or trunk but never over another branch, which keeps every
  // branch a single solid tube.
  const long num_branches = std::max(2L, num_classes - 2);
  const double r_branch = std::max(1.2, 0.55 * r_trunk);
  const double length = (double)n / 3.0;
  for (long b = 0; b < num_branches; ++b) {
    const uint8_t cls =
        num_classes == 2 ? (uint8_t)1 : (uint8_t)(2 + b % (num_classes - 2));
    const double fx = num_branches == 1
                          ? 0.5
                          : 0.15 + 0.7 * (double)b / (double)(num_branches - 1);
    const double xb = fx * (double)n + rng.uniform(-1.5, 1.5);
    const double theta = 2.399963229728653 * (double)b +  // golden angle
                         rng.uniform(-0.15, 0.15);
    const double ax = rng.uniform(-0.3, 0.3);
    const double rr = std::sqrt(1.0 - ax * ax);
    const double dx = ax, dy = rr * std::cos(theta), dz = rr * std::sin(theta);
    // Root on the trunk surface along this branch's own azimuth, so branches
    // sharing a neighborhood diverge from separated starting points.
    const double px = xb;
    const double py = cy(xb) + (r_trunk - 1.0) * std::cos(theta);
    const double pz = cz(xb) + (r_trunk - 1.0) * std::sin(theta);
    for (double t = 0.0; t <= length; t += 0.5) {
      const double sx = px + t * dx, sy = py + t * dy, sz = pz + t * dz;
      const long x0 = std::max(0L, (long)std::floor(sx - r_branch));
      const long x1 = std::min(n - 1, (long)std::ceil(sx + r_branch));
      const long y0 = std::max(0L, (long)std::floor(sy - r_branch));
      const long y1 = std::min(n - 1, (long)std::ceil(sy + r_branch));
      const long z0 = std::max(0L, (long)std::floor(sz - r_branch));
      const long z1 = std::min(n - 1, (long)std::ceil(sz + r_branch));
      for (long x = x0; x <= x1; ++x)
        for (long y = y0; y <= y1; ++y)
          for (long z = z0; z <= z1; ++z) {
            const double ex = (double)x - sx, ey = (double)y - sy,
                         ez = (double)z - sz;
            if (ex * ex + ey * ey + ez * ez > r_branch * r_branch) continue;
            uint8_t& v = at(x, y, z);
            if (v <= 1) v = cls;
          }
    }
  }

  // Voxelized sphere stamps can pinch off single-voxel slivers of an earlier
  // class near junctions. Keep each class's largest 6-connected component and
  // return slivers to background so trunk and every branch are one component.
  {
    std::vector<char> seen((size_t)lbl.numel(), 0);
    std::vector<long> stack, comp;
    for (long cls = 1; cls < num_classes; ++cls) {
      std::fill(seen.begin(), seen.end(), 0);
      std::vector<std::vector<long>> comps;
      for (long s = 0; s < lbl.numel(); ++s) {
        if (lbl.data()[s] != (uint8_t)cls || seen[(size_t)s]) continue;
        comp.clear();
        stack.assign(1, s);
        seen[(size_t)s] = 1;
        while (!stack.empty()) {
          const long i = stack.back();
          stack.pop_back();
          comp.push_back(i);
          const long x = i / (n * n), y = (i / n) % n, z = i % n;
          const long nbr[6][3] = {{x - 1, y, z}, {x + 1, y, z}, {x, y - 1, z},
                                  {x, y + 1, z}, {x, y, z - 1}, {x, y, z + 1}};
          for (auto& q : nbr) {
            if (q[0] < 0 || q[1] < 0 || q[2] < 0 || q[0] >= n || q[1] >= n ||
                q[2] >= n)
              continue;
            const long j = (q[0] * n + q[1]) * n + q[2];
            if (lbl.data()[j] == (uint8_t)cls && !seen[(size_t)j]) {
              seen[(size_t)j] = 1;
              stack.push_back(j);
            }
          }
        }
        comps.push_back(comp);
      }
      size_t largest = 0;
      for (size_t k = 1; k < comps.size(); ++k)
        if (comps[k].size() > comps[largest].size()) largest = k;
      for (size_t k = 0; k < comps.size(); ++k) {
        if (k == largest) continue;
        for (long i : comps[k]) lbl.data()[i] = 0;
      }
    }
  }

  // Intensity field on a [0,1] scale: dim background, bright vessels.
  Tensor<float> base({n, n, n});
  for (long i = 0; i < base.numel(); ++i) {
    const uint8_t c = lbl.data()[i];
    base.data()[i] = c == 0 ? 0.2f : (c == 1 ? 0.9f : 0.78f);
  }
  // Two passes of a separable [1,2,1]/4 blur soften the tube edges.
  Tensor<float> tmp({n, n, n});
  for (int pass = 0; pass < 2; ++pass) {
    for (int axis = 0; axis < 3; ++axis) {
      const long sx = axis == 0 ? n * n : (axis == 1 ? n : 1);
      for (long i = 0; i < base.numel(); ++i) {
        const long pos =
            axis == 0 ? i / (n * n) : (axis == 1 ? (i / n) % n : i % n);
        const float lo = pos > 0 ? base.data()[i - sx] : base.data()[i];
        const float hi = pos < n - 1 ? base.data()[i + sx] : base.data()[i];
        tmp.data()[i] = 0.25f * (lo + 2.0f * base.data()[i] + hi);
      }
      std::swap(base.buf, tmp.buf);
    }
  }
  ImageVolume img;
  img.voxels = Tensor<float>({n, n, n});
  for (long i = 0; i < base.numel(); ++i) {
    const double v = (double)base.data()[i] + rng.normal(0.0, 0.03);
    img.voxels.data()[i] = (float)(-175.0 + v * 425.0);  // onto the CT window
  }
  img.geom.spacing = {1.5, 1.5, 1.5};

  LabelVolume lv;
  lv.voxels = lbl;
  lv.geom = img.geom;
  return {std::move(img), std::move(lv)};
}

// ---------------------------------------------------------------------------
// Dataset directory convention: images/<id>.nii.gz + labels/<id>.nii.gz
// ---------------------------------------------------------------------------

struct DatasetCase {
  std::string id;
  std::string image_path;
  std::string label_path;  // empty when labels are absent (predict-only)
};

/// Enumerate cases under `dir` sorted by id. When `require_labels` is set,
/// every image must have a matching label file.
inline std::vector<DatasetCase> list_dataset(const std::string& dir,
                                             bool require_labels = true) {
  namespace fs = std::filesystem;
  const fs::path images = fs::path(dir) / "images";
  if (!fs::is_directory(images))
    throw std::runtime_error("dataset: missing directory " + images.string());
  std::vector<DatasetCase> out;
  for (const auto& e : fs::directory_iterator(images)) {
    if (!e.is_regular_file()) continue;
    std::string name = e.path().filename().string();
    std::string id = name;
    for (const char* ext : {".nii.gz", ".nii"}) {
      const size_t n = std::strlen(ext);
      if (id.size() > n && id.substr(id.size() - n) == ext) {
        id = id.substr(0, id.size() - n);
        break;
      }
    }
    if (id == name) continue;  // not a NIfTI file
    DatasetCase c;
    c.id = id;
    c.image_path = e.path().string();
    const fs::path lbl = fs::path(dir) / "labels" / name;
    if (fs::exists(lbl)) {
      c.label_path = lbl.string();
    } else if (require_labels) {
      throw std::runtime_error("dataset: missing label file for case " + id);
    }
    out.push_back(std::move(c));
  }
  if (out.empty())
    throw std::runtime_error("dataset: no volumes found under " +
                             images.string());
  std::sort(out.begin(), out.end(),
            [](const DatasetCase& a, const DatasetCase& b) { return a.id < b.id; });
  return out;
}

/// Write `count` phantom cases (images/ + labels/) under `dir`.
inline std::vector<DatasetCase> generate_dataset(const std::string& dir,
                                                 long count, long size,
                                                 long num_classes,
                                                 uint64_t seed) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "images");
  fs::create_directories(fs::path(dir) / "labels");
  Rng rng(seed);
  std::vector<DatasetCase> out;
  for (long i = 0; i < count; ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "case_%03ld", i);
    auto [img, lbl] = synthetic_phantom(rng, size, num_classes);
    DatasetCase c;
    c.id = name;
    c.image_path = (fs::path(dir) / "images" / (std::string(name) + ".nii.gz")).string();
    c.label_path = (fs::path(dir) / "labels" / (std::string(name) + ".nii.gz")).string();
    nifti::write_image(c.image_path, img);
    nifti::write_labels(c.label_path, lbl);
    out.push_back(std::move(c));
  }
  return out;
}

}  // namespace cisunet
