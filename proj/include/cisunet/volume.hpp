#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "cisunet/core/tensor.hpp"

namespace cisunet {

/// Geometry shared by image and label volumes: voxel spacing in mm, the
/// world-space position of voxel (0,0,0), and the axis direction matrix
/// (columns = world directions of the +x/+y/+z index axes; identity unless a
/// file says otherwise). World position of index (i,j,k) is
///   origin + direction · (i·sx, j·sy, k·sz).
struct Geometry {
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
  std::array<double, 3> origin{0.0, 0.0, 0.0};
  std::array<std::array<double, 3>, 3> direction{
      {{1.0, 0.0, 0.0}, {0.0, 1.0, 0.0}, {0.0, 0.0, 1.0}}};

  void validate() const {
    for (double s : spacing)
      if (!(s > 0.0))
        throw std::invalid_argument("volume geometry: spacing must be > 0, got " +
                                    std::to_string(s));
  }
  bool same_grid(const Geometry& o, double tol = 1e-6) const {
    for (int a = 0; a < 3; ++a)
      if (std::abs(spacing[a] - o.spacing[a]) > tol) return false;
    return true;
  }
};

/// Scalar volume (X,Y,Z) with physical geometry.
struct ImageVolume {
  Tensor<float> voxels;  // shape (X,Y,Z)
  Geometry geom;

  long dim(int i) const { return voxels.dim(i); }
};

/// Integer class-id volume (X,Y,Z); values must stay below the class count of
/// whatever consumes it.
struct LabelVolume {
  Tensor<uint8_t> voxels;  // shape (X,Y,Z)
  Geometry geom;

  long dim(int i) const { return voxels.dim(i); }
};

/// Fixed class-id assignment for the aortic-branch task. Background is 0 and
/// the 14 vessels follow in a fixed order so that files written by one run are
/// readable by any other.
inline const std::vector<std::string>& aorta_label_names() {
  static const std::vector<std::string> names = {
      "Background", "Aorta", "IA",   "LCC",  "LSA",  "CA",   "SMA", "LRA",
      "RRA",        "LCIA",  "LEIA", "LIIA", "RCIA", "REIA", "RIIA"};
  return names;
}

inline constexpr long kAortaNumClasses = 15;

}  // namespace cisunet
