#pragma once

#include <zlib.h>

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <string>
#include <vector>

#include "cisunet/volume.hpp"

namespace cisunet {
namespace nifti {

// NIfTI-1 datatype codes (the subset this reader accepts).
enum : int16_t {
  DT_UINT8 = 2,
  DT_INT16 = 4,
  DT_INT32 = 8,
  DT_FLOAT32 = 16,
  DT_FLOAT64 = 64,
  DT_UINT16 = 512,
};

/// NIfTI-1 header, exactly 348 bytes with no padding (the format was designed
/// so that naturally aligned C fields line up with the on-disk layout).
struct Header {
  int32_t sizeof_hdr;
  char data_type[10];
  char db_name[18];
  int32_t extents;
  int16_t session_error;
  char regular;
  char dim_info;
  int16_t dim[8];
  float intent_p1, intent_p2, intent_p3;
  int16_t intent_code;
  int16_t datatype;
  int16_t bitpix;
  int16_t slice_start;
  float pixdim[8];
  float vox_offset;
  float scl_slope;
  float scl_inter;
  int16_t slice_end;
  char slice_code;
  char xyzt_units;
  float cal_max, cal_min;
  float slice_duration;
  float toffset;
  int32_t glmax, glmin;
  char descrip[80];
  char aux_file[24];
  int16_t qform_code;
  int16_t sform_code;
  float quatern_b, quatern_c, quatern_d;
  float qoffset_x, qoffset_y, qoffset_z;
  float srow_x[4];
  float srow_y[4];
  float srow_z[4];
  char intent_name[16];
  char magic[4];
};
static_assert(sizeof(Header) == 348, "NIfTI-1 header must be 348 bytes");

namespace detail {

inline int bytes_per_voxel(int16_t dtype) {
  switch (dtype) {
    case DT_UINT8: return 1;
    case DT_INT16: return 2;
    case DT_UINT16: return 2;
    case DT_INT32: return 4;
    case DT_FLOAT32: return 4;
    case DT_FLOAT64: return 8;
    default:
      throw std::runtime_error("nifti: unsupported datatype code " +
                               std::to_string(dtype));
  }
}

struct GzFile {
  gzFile f = nullptr;
  explicit GzFile(const std::string& path, const char* mode) {
    f = gzopen(path.c_str(), mode);
    if (!f) throw std::runtime_error("nifti: cannot open " + path);
  }
  ~GzFile() {
    if (f) gzclose(f);
  }
  GzFile(const GzFile&) = delete;
  GzFile& operator=(const GzFile&) = delete;
};

inline void read_exact(gzFile f, void* dst, size_t n, const std::string& what) {
  if (gzread(f, dst, (unsigned)n) != (int)n)
    throw std::runtime_error("nifti: truncated file while reading " + what);
}

inline void write_exact(gzFile f, const void* src, size_t n) {
  if (gzwrite(f, src, (unsigned)n) != (int)n)
    throw std::runtime_error("nifti: short write");
}

/// Decode one voxel to double given the datatype.
inline double decode(const uint8_t* p, int16_t dtype) {
  switch (dtype) {
    case DT_UINT8: return *p;
    case DT_INT16: {
      int16_t v;
      std::memcpy(&v, p, 2);
      return v;
    }
    case DT_UINT16: {
      uint16_t v;
      std::memcpy(&v, p, 2);
      return v;
    }
    case DT_INT32: {
      int32_t v;
      std::memcpy(&v, p, 4);
      return v;
    }
    case DT_FLOAT32: {
      float v;
      std::memcpy(&v, p, 4);
      return v;
    }
    case DT_FLOAT64: {
      double v;
      std::memcpy(&v, p, 8);
      return v;
    }
    default: return 0.0;  // unreachable; bytes_per_voxel already threw
  }
}

/// Geometry from the header: sform if present, else qform (quaternion), else
/// pixdim spacing with identity direction.
inline Geometry geometry_of(const Header& h) {
  Geometry g;
  for (int a = 0; a < 3; ++a) {
    g.spacing[a] = h.pixdim[a + 1];
    if (!(g.spacing[a] > 0.0)) g.spacing[a] = 1.0;
  }
  if (h.sform_code > 0) {
    const float* rows[3] = {h.srow_x, h.srow_y, h.srow_z};
    for (int r = 0; r < 3; ++r) g.origin[r] = rows[r][3];
    for (int c = 0; c < 3; ++c) {
      double n = 0;
      for (int r = 0; r < 3; ++r) n += (double)rows[r][c] * rows[r][c];
      n = std::sqrt(n);
      if (n > 0) {
        g.spacing[c] = n;
        for (int r = 0; r < 3; ++r) g.direction[r][c] = rows[r][c] / n;
      }
    }
  } else if (h.qform_code > 0) {
    const double b = h.quatern_b, c = h.quatern_c, d = h.quatern_d;
    const double a = std::sqrt(std::max(0.0, 1.0 - b * b - c * c - d * d));
    const double qfac = h.pixdim[0] < 0.0f ? -1.0 : 1.0;
    g.direction = {{{a * a + b * b - c * c - d * d, 2 * (b * c - a * d),
                     qfac * 2 * (b * d + a * c)},
                    {2 * (b * c + a * d), a * a + c * c - b * b - d * d,
                     qfac * 2 * (c * d - a * b)},
                    {2 * (b * d - a * c), 2 * (c * d + a * b),
                     qfac * (a * a + d * d - b * b - c * c)}}};
    g.origin = {h.qoffset_x, h.qoffset_y, h.qoffset_z};
  }
  g.validate();
  return g;
}

/// Read header + raw voxel payload, decoded to doubles in our (X,Y,Z)
/// row-major order (NIfTI stores x fastest; we store z fastest).
inline void read_raw(const std::string& path, Header& h,
                     std::vector<double>& out, Shape& shape) {
  GzFile file(path, "rb");
  read_exact(file.f, &h, sizeof(Header), "header");
  if (h.sizeof_hdr != 348) {
    int32_t swapped = __builtin_bswap32((uint32_t)h.sizeof_hdr);
    if (swapped == 348)
      throw std::runtime_error(
          "nifti: byte-swapped (big-endian) file not supported: " + path);
    throw std::runtime_error("nifti: not a NIfTI-1 file (sizeof_hdr=" +
                             std::to_string(h.sizeof_hdr) + "): " + path);
  }
  if (std::strncmp(h.magic, "n+1", 3) != 0) {
    if (std::strncmp(h.magic, "ni1", 3) == 0)
      throw std::runtime_error(
          "nifti: two-file (.hdr/.img) form not supported: " + path);
    throw std::runtime_error("nifti: bad magic: " + path);
  }
  if (h.dim[0] < 3 || h.dim[0] > 7)
    throw std::runtime_error("nifti: expected a 3-d volume, dim[0]=" +
                             std::to_string(h.dim[0]) + ": " + path);
  for (int a = 4; a <= h.dim[0]; ++a)
    if (h.dim[a] > 1)
      throw std::runtime_error("nifti: volumes with a nontrivial dim[" +
                               std::to_string(a) + "] are not supported: " +
                               path);
  const long nx = h.dim[1], ny = h.dim[2], nz = h.dim[3];
  if (nx < 1 || ny < 1 || nz < 1)
    throw std::runtime_error("nifti: degenerate dimensions in " + path);
  const int bpv = bytes_per_voxel(h.datatype);
  if (h.bitpix != 8 * bpv)
    throw std::runtime_error("nifti: bitpix " + std::to_string(h.bitpix) +
                             " inconsistent with datatype " +
                             std::to_string(h.datatype) + ": " + path);
  const long off = (long)h.vox_offset;
  if (off < (long)sizeof(Header))
    throw std::runtime_error("nifti: vox_offset " + std::to_string(off) +
                             " overlaps the header: " + path);
  if (gzseek(file.f, off, SEEK_SET) != off)
    throw std::runtime_error("nifti: cannot seek to voxel data: " + path);

  const long n = nx * ny * nz;
  std::vector<uint8_t> raw((size_t)(n * bpv));
  read_exact(file.f, raw.data(), raw.size(), "voxel data");

  const double slope = h.scl_slope == 0.0f ? 1.0 : h.scl_slope;
  const double inter = h.scl_slope == 0.0f ? 0.0 : h.scl_inter;
  out.resize((size_t)n);
  shape = {nx, ny, nz};
  for (long z = 0; z < nz; ++z)
    for (long y = 0; y < ny; ++y)
      for (long x = 0; x < nx; ++x) {
        const long src = x + nx * (y + ny * z);
        out[(size_t)((x * ny + y) * nz + z)] =
            slope * decode(raw.data() + src * bpv, h.datatype) + inter;
      }
}

inline Header make_header(const Shape& s, const Geometry& g, int16_t dtype) {
  Header h;
  std::memset(&h, 0, sizeof(h));
  h.sizeof_hdr = 348;
  h.regular = 'r';
  h.dim[0] = 3;
  h.dim[1] = (int16_t)s[0];
  h.dim[2] = (int16_t)s[1];
  h.dim[3] = (int16_t)s[2];
  for (int a = 4; a < 8; ++a) h.dim[a] = 1;
  h.datatype = dtype;
  h.bitpix = (int16_t)(8 * bytes_per_voxel(dtype));
  h.pixdim[0] = 1.0f;
  for (int a = 0; a < 3; ++a) h.pixdim[a + 1] = (float)g.spacing[a];
  h.vox_offset = 352.0f;
  h.scl_slope = 1.0f;
  h.scl_inter = 0.0f;
  h.xyzt_units = 2;  // millimeters
  std::strncpy(h.descrip, "cisunet volume", sizeof(h.descrip) - 1);
  h.sform_code = 1;
  float* rows[3] = {h.srow_x, h.srow_y, h.srow_z};
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c)
      rows[r][c] = (float)(g.direction[r][c] * g.spacing[c]);
    rows[r][3] = (float)g.origin[r];
  }
  std::memcpy(h.magic, "n+1", 4);
  return h;
}

/// Write header + payload. Values are encoded from an accessor fn(i) over our
/// row-major order, permuted to NIfTI's x-fastest order.
template <typename EncodeFn>
void write_raw(const std::string& path, const Shape& s, const Geometry& g,
               int16_t dtype, EncodeFn&& encode) {
  const bool gz = path.size() > 3 && path.substr(path.size() - 3) == ".gz";
  // "T" writes plain bytes without a gzip wrapper for uncompressed .nii.
  GzFile file(path, gz ? "wb" : "wbT");
  Header h = make_header(s, g, dtype);
  write_exact(file.f, &h, sizeof(h));
  const char ext[4] = {0, 0, 0, 0};
  write_exact(file.f, ext, 4);
  const long nx = s[0], ny = s[1], nz = s[2];
  const int bpv = bytes_per_voxel(dtype);
  std::vector<uint8_t> row((size_t)(nx * bpv));
  for (long z = 0; z < nz; ++z)
    for (long y = 0; y < ny; ++y) {
      for (long x = 0; x < nx; ++x)
        encode((x * ny + y) * nz + z, row.data() + x * bpv);
      write_exact(file.f, row.data(), row.size());
    }
}

}  // namespace detail

/// Read a scalar volume; scl_slope/scl_inter are applied.
inline ImageVolume read_image(const std::string& path) {
  Header h;
  std::vector<double> vals;
  Shape shape;
  detail::read_raw(path, h, vals, shape);
  ImageVolume v;
  v.voxels = Tensor<float>(shape);
  for (size_t i = 0; i < vals.size(); ++i) {
    if (!std::isfinite(vals[i]))
      throw std::runtime_error("nifti: non-finite voxel value in " + path);
    v.voxels.data()[i] = (float)vals[i];
  }
  v.geom = detail::geometry_of(h);
  return v;
}

/// Read a label volume; every value must be an integer in [0,255] after
/// scaling (labels are class ids, never interpolated or rescaled quantities).
inline LabelVolume read_labels(const std::string& path) {
  Header h;
  std::vector<double> vals;
  Shape shape;
  detail::read_raw(path, h, vals, shape);
  LabelVolume v;
  v.voxels = Tensor<uint8_t>(shape);
  for (size_t i = 0; i < vals.size(); ++i) {
    const double r = std::round(vals[i]);
    if (!std::isfinite(vals[i]) || std::abs(vals[i] - r) > 1e-6 || r < 0.0 ||
        r > 255.0)
      throw std::runtime_error(
          "nifti: non-integer label payload (value " + std::to_string(vals[i]) +
          " at voxel " + std::to_string(i) + ") in " + path);
    v.voxels.data()[i] = (uint8_t)r;
  }
  v.geom = detail::geometry_of(h);
  return v;
}

inline void write_image(const std::string& path, const ImageVolume& v) {
  const float* src = v.voxels.data();
  detail::write_raw(path, v.voxels.shape, v.geom, DT_FLOAT32,
                    [src](long i, uint8_t* dst) {
                      std::memcpy(dst, src + i, sizeof(float));
                    });
}

inline void write_labels(const std::string& path, const LabelVolume& v) {
  const uint8_t* src = v.voxels.data();
  detail::write_raw(path, v.voxels.shape, v.geom, DT_UINT8,
                    [src](long i, uint8_t* dst) { *dst = src[i]; });
}

}  // namespace nifti
}  // namespace cisunet
