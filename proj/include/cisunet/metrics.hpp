#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cisunet/volume.hpp"

namespace cisunet {

// ---------------------------------------------------------------------------
// Surface point sets
// ---------------------------------------------------------------------------

struct SurfacePoint {
  double x, y, z;
};

/// Boundary voxel centers of one class, in physical millimeters.
struct SurfacePointSet {
  std::vector<SurfacePoint> points;
  long class_id = 0;

  bool empty() const { return points.empty(); }
  long size() const { return (long)points.size(); }
};

// ---------------------------------------------------------------------------
// Dice similarity coefficient
// ---------------------------------------------------------------------------

/// 2|Y∩Ŷ| / (|Y|+|Ŷ|) on binary masks (nonzero = foreground). Returns 1.0
/// when both masks are empty: two empty segments agree perfectly, and the
/// convention keeps cohort means well defined for absent classes.
template <typename T>
double dsc(const Tensor<T>& y, const Tensor<T>& yhat) {
  if (y.shape != yhat.shape)
    throw std::invalid_argument("dsc: shape mismatch " + shape_str(y.shape) +
                                " vs " + shape_str(yhat.shape));
  long ny = 0, nyh = 0, inter = 0;
  const T* a = y.data();
  const T* b = yhat.data();
  for (long i = 0; i < y.numel(); ++i) {
    const bool fa = a[i] != T(0), fb = b[i] != T(0);
    ny += fa;
    nyh += fb;
    inter += fa && fb;
  }
  if (ny + nyh == 0) return 1.0;
  return 2.0 * (double)inter / (double)(ny + nyh);
}

// ---------------------------------------------------------------------------
// Surface extraction
// ---------------------------------------------------------------------------

/// Boundary voxels of a binary mask: foreground voxels with at least one of
/// their 6 face-neighbors background, where anything outside the volume
/// counts as background. Surface points are voxel centers mapped to
/// millimeters as index·spacing (a global half-voxel offset would cancel in
/// every distance, so the simpler convention is used).
template <typename T>
SurfacePointSet extract_surface(const Tensor<T>& mask,
                                const std::array<double, 3>& spacing,
                                long class_id = 0) {
  if (mask.ndim() != 3)
    throw std::invalid_argument("extract_surface: expected a 3-d mask, got " +
                                shape_str(mask.shape));
  const long X = mask.dim(0), Y = mask.dim(1), Z = mask.dim(2);
  const T* m = mask.data();
  auto fg = [&](long x, long y, long z) -> bool {
    if (x < 0 || y < 0 || z < 0 || x >= X || y >= Y || z >= Z) return false;
    return m[(x * Y + y) * Z + z] != T(0);
  };
  SurfacePointSet out;
  out.class_id = class_id;
  for (long x = 0; x < X; ++x)
    for (long y = 0; y < Y; ++y)
      for (long z = 0; z < Z; ++z) {
        if (!fg(x, y, z)) continue;
        const bool boundary = !fg(x - 1, y, z) || !fg(x + 1, y, z) ||
                              !fg(x, y - 1, z) || !fg(x, y + 1, z) ||
                              !fg(x, y, z - 1) || !fg(x, y, z + 1);
        if (boundary)
          out.points.push_back({(double)x * spacing[0], (double)y * spacing[1],
                                (double)z * spacing[2]});
      }
  return out;
}

// ---------------------------------------------------------------------------
// Nearest-neighbor search (uniform grid buckets)
// ---------------------------------------------------------------------------

namespace detail {

/// Uniform-grid spatial index over a point set. Queries expand outward in
/// Chebyshev rings of cells; a cell in ring r is at least (r−1)·cell away, so
/// the search stops as soon as that bound exceeds the best distance found.
struct PointGrid {
  const std::vector<SurfacePoint>& pts;
  double cell = 1.0;
  std::array<double, 3> lo{0, 0, 0};
  long nx = 1, ny = 1, nz = 1;
  std::vector<std::vector<long>> buckets;

  explicit PointGrid(const std::vector<SurfacePoint>& points) : pts(points) {
    if (pts.empty())
      throw std::invalid_argument("PointGrid: empty point set");
    std::array<double, 3> hi = {pts[0].x, pts[0].y, pts[0].z};
    lo = hi;
    for (const auto& p : pts) {
      lo[0] = std::min(lo[0], p.x), hi[0] = std::max(hi[0], p.x);
      lo[1] = std::min(lo[1], p.y), hi[1] = std::max(hi[1], p.y);
      lo[2] = std::min(lo[2], p.z), hi[2] = std::max(hi[2], p.z);
    }
    const double extent = std::max(
        {hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2], 1e-9});
    const long res = std::clamp(
        (long)std::ceil(std::cbrt((double)pts.size())), 1L, 64L);
    cell = extent / (double)res;
    nx = (long)std::floor((hi[0] - lo[0]) / cell) + 1;
    ny = (long)std::floor((hi[1] - lo[1]) / cell) + 1;
    nz = (long)std::floor((hi[2] - lo[2]) / cell) + 1;
    buckets.resize((size_t)(nx * ny * nz));
    for (long i = 0; i < (long)pts.size(); ++i)
      buckets[(size_t)bucket_of(pts[(size_t)i])].push_back(i);
  }

  long coord(double v, double l, long n) const {
    return std::clamp((long)std::floor((v - l) / cell), 0L, n - 1);
  }
  long bucket_of(const SurfacePoint& p) const {
    return (coord(p.x, lo[0], nx) * ny + coord(p.y, lo[1], ny)) * nz +
           coord(p.z, lo[2], nz);
  }

  /// Squared distance from a point to a cell's axis-aligned box.
  double box_dist2(const SurfacePoint& q, long x, long y, long z) const {
    auto axis = [&](double v, double l, long c) {
      const double a = l + (double)c * cell, b = a + cell;
      return v < a ? a - v : (v > b ? v - b : 0.0);
    };
    const double dx = axis(q.x, lo[0], x), dy = axis(q.y, lo[1], y),
                 dz = axis(q.z, lo[2], z);
    return dx * dx + dy * dy + dz * dz;
  }

  double nearest_distance(const SurfacePoint& q) const {
    // Ring center = query cell clamped into the grid. Relative to that
    // center, any cell in ring r is still at least (r−1)·cell away from q
    // (per-axis: the gap crosses r−1 whole cells even when q sits outside
    // the grid), so the stop rule stays valid and rings end at the grid
    // bounds instead of chasing a far-away virtual cell index.
    const long cx = std::clamp((long)std::floor((q.x - lo[0]) / cell), 0L, nx - 1);
    const long cy = std::clamp((long)std::floor((q.y - lo[1]) / cell), 0L, ny - 1);
    const long cz = std::clamp((long)std::floor((q.z - lo[2]) / cell), 0L, nz - 1);
    const long rmax =
        std::max({std::max(cx, nx - 1 - cx), std::max(cy, ny - 1 - cy),
                  std::max(cz, nz - 1 - cz)});
    double best = std::numeric_limits<double>::infinity();
    for (long r = 0; r <= rmax; ++r) {
      if ((double)(r - 1) * cell > best) break;
      const long x0 = std::max(cx - r, 0L), x1 = std::min(cx + r, nx - 1);
      const long y0 = std::max(cy - r, 0L), y1 = std::min(cy + r, ny - 1);
      const long z0 = std::max(cz - r, 0L), z1 = std::min(cz + r, nz - 1);
      for (long x = x0; x <= x1; ++x)
        for (long y = y0; y <= y1; ++y)
          for (long z = z0; z <= z1; ++z) {
            if (std::max({std::abs(x - cx), std::abs(y - cy),
                          std::abs(z - cz)}) != r)
              continue;  // interior cells were visited in earlier rings
            if (box_dist2(q, x, y, z) >= best * best) continue;
            for (long i : buckets[(size_t)((x * ny + y) * nz + z)]) {
              const auto& p = pts[(size_t)i];
              const double dx = p.x - q.x, dy = p.y - q.y, dz = p.z - q.z;
              best = std::min(best, std::sqrt(dx * dx + dy * dy + dz * dz));
            }
          }
    }
    return best;
  }
};

}  // namespace detail

// ---------------------------------------------------------------------------
// Mean surface distance
// ---------------------------------------------------------------------------

/// Directed mean surface distance in mm: (1/N) Σ_{p∈y} min_{q∈ŷ} ‖p−q‖.
/// Note the asymmetry — this averages over the FIRST argument's points.
/// Returns nullopt (UNDEFINED) when either surface is empty, i.e. when the
/// class is missing from prediction or ground truth.
inline std::optional<double> msd(const SurfacePointSet& y,
                                 const SurfacePointSet& yhat) {
  if (y.empty() || yhat.empty()) return std::nullopt;
  detail::PointGrid grid(yhat.points);
  double acc = 0.0;
  for (const auto& p : y.points) acc += grid.nearest_distance(p);
  return acc / (double)y.size();
}

/// Symmetric variant: mean of the two directed means. Never substituted for
/// the directed form; callers choose explicitly.
inline std::optional<double> msd_symmetric(const SurfacePointSet& a,
                                           const SurfacePointSet& b) {
  auto ab = msd(a, b), ba = msd(b, a);
  if (!ab || !ba) return std::nullopt;
  return 0.5 * (*ab + *ba);
}

// ---------------------------------------------------------------------------
// Per-case evaluation and cohort aggregation
// ---------------------------------------------------------------------------

/// Per-class scores for one case. msd_mm is the directed ground-truth→
/// prediction distance and is UNDEFINED (nullopt) when either volume lacks
/// the class.
struct CaseMetrics {
  std::vector<long> class_ids;
  std::vector<double> dsc;
  std::vector<std::optional<double>> msd_mm;
};

/// Binary mask of one class id.
inline Tensor<uint8_t> mask_of_class(const Tensor<uint8_t>& labels, long id) {
  Tensor<uint8_t> out(labels.shape);
  const uint8_t* in = labels.data();
  uint8_t* o = out.data();
  for (long i = 0; i < labels.numel(); ++i) o[i] = in[i] == (uint8_t)id;
  return out;
}

inline CaseMetrics evaluate_case(const LabelVolume& pred, const LabelVolume& gt,
                                 const std::vector<long>& class_ids) {
  if (pred.voxels.shape != gt.voxels.shape)
    throw std::invalid_argument("evaluate_case: shape mismatch " +
                                shape_str(pred.voxels.shape) + " vs " +
                                shape_str(gt.voxels.shape));
  if (!pred.geom.same_grid(gt.geom))
    throw std::invalid_argument("evaluate_case: spacing mismatch");
  CaseMetrics out;
  out.class_ids = class_ids;
  for (long c : class_ids) {
    Tensor<uint8_t> pm = mask_of_class(pred.voxels, c);
    Tensor<uint8_t> gm = mask_of_class(gt.voxels, c);
    out.dsc.push_back(dsc(gm, pm));
    SurfacePointSet gs = extract_surface(gm, gt.geom.spacing, c);
    SurfacePointSet ps = extract_surface(pm, pred.geom.spacing, c);
    out.msd_mm.push_back(msd(gs, ps));
  }
  return out;
}

/// Cohort means. DSC averages over all cases; MSD averages over cases where
/// it is defined, with the skipped count reported per class (how failed cases
/// fold into published averages is ambiguous, so both numbers are surfaced).
struct CohortMetrics {
  std::vector<long> class_ids;
  std::vector<double> mean_dsc;
  std::vector<std::optional<double>> mean_msd;
  std::vector<long> msd_skipped;
  long num_cases = 0;
};

inline CohortMetrics aggregate_cases(const std::vector<CaseMetrics>& cases) {
  if (cases.empty()) throw std::invalid_argument("aggregate_cases: no cases");
  CohortMetrics out;
  out.class_ids = cases[0].class_ids;
  out.num_cases = (long)cases.size();
  const size_t K = out.class_ids.size();
  out.mean_dsc.assign(K, 0.0);
  out.mean_msd.assign(K, std::nullopt);
  out.msd_skipped.assign(K, 0);
  std::vector<double> msd_sum(K, 0.0);
  std::vector<long> msd_n(K, 0);
  for (const auto& cm : cases) {
    if (cm.class_ids != out.class_ids)
      throw std::invalid_argument("aggregate_cases: class-id list mismatch");
    for (size_t k = 0; k < K; ++k) {
      out.mean_dsc[k] += cm.dsc[k];
      if (cm.msd_mm[k]) {
        msd_sum[k] += *cm.msd_mm[k];
        ++msd_n[k];
      } else {
        ++out.msd_skipped[k];
      }
    }
  }
  for (size_t k = 0; k < K; ++k) {
    out.mean_dsc[k] /= (double)out.num_cases;
    if (msd_n[k] > 0) out.mean_msd[k] = msd_sum[k] / (double)msd_n[k];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Report writer
// ---------------------------------------------------------------------------

namespace detail {

inline std::string fmt4(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}

inline std::string class_label(long id, const std::vector<std::string>& names) {
  if (id >= 0 && (size_t)id < names.size()) return names[(size_t)id];
  return "class" + std::to_string(id);
}

}  // namespace detail

/// Structured text report: one row per class per case, then cohort means and
/// an Average row. UNDEFINED surface distances render as '†' with skip counts
/// in the cohort block. Output is byte-stable for identical inputs.
inline void write_report(std::ostream& os,
                         const std::vector<std::string>& case_names,
                         const std::vector<CaseMetrics>& cases,
                         const std::vector<std::string>& class_names) {
  if (case_names.size() != cases.size())
    throw std::invalid_argument("write_report: case name/metric count mismatch");
  os << "# segmentation evaluation report\n";
  os << "# dsc: Dice similarity coefficient (1.0 = perfect)\n";
  os << "# msd: mean surface distance in mm, directed ground-truth -> "
        "prediction; '†' = undefined (class missing)\n";
  for (size_t i = 0; i < cases.size(); ++i) {
    os << "case\t" << case_names[i] << "\n";
    const auto& cm = cases[i];
    for (size_t k = 0; k < cm.class_ids.size(); ++k) {
      os << "  class\t" << cm.class_ids[k] << "\t"
         << detail::class_label(cm.class_ids[k], class_names) << "\tdsc\t"
         << detail::fmt4(cm.dsc[k]) << "\tmsd\t"
         << (cm.msd_mm[k] ? detail::fmt4(*cm.msd_mm[k]) : "†") << "\n";
    }
  }
  const CohortMetrics agg = aggregate_cases(cases);
  os << "cohort\tcases\t" << agg.num_cases << "\n";
  double dsc_acc = 0.0, msd_acc = 0.0;
  long msd_rows = 0;
  for (size_t k = 0; k < agg.class_ids.size(); ++k) {
    os << "  class\t" << agg.class_ids[k] << "\t"
       << detail::class_label(agg.class_ids[k], class_names) << "\tmean_dsc\t"
       << detail::fmt4(agg.mean_dsc[k]) << "\tmean_msd\t"
       << (agg.mean_msd[k] ? detail::fmt4(*agg.mean_msd[k]) : "†")
       << "\tmsd_skipped\t" << agg.msd_skipped[k] << "\n";
    dsc_acc += agg.mean_dsc[k];
    if (agg.mean_msd[k]) {
      msd_acc += *agg.mean_msd[k];
      ++msd_rows;
    }
  }
  const double n = (double)agg.class_ids.size();
  os << "  average\tmean_dsc\t" << detail::fmt4(dsc_acc / n) << "\tmean_msd\t"
     << (msd_rows ? detail::fmt4(msd_acc / (double)msd_rows) : "†")
     << "\n";
}

}  // namespace cisunet
