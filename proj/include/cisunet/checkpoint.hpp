#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include "cisunet/config.hpp"
#include "cisunet/core/rng.hpp"
#include "cisunet/layers.hpp"
#include "cisunet/optim.hpp"

namespace cisunet {

inline constexpr char kCheckpointMagic[8] = {'C', 'I', 'S', 'U',
                                             'C', 'K', 'P', 'T'};
inline constexpr uint32_t kCheckpointVersion = 1;

namespace detail {

template <typename T>
constexpr uint32_t dtype_code() {
  static_assert(std::is_floating_point_v<T>, "checkpoints hold real weights");
  return (uint32_t)sizeof(T);  // 4 = float32, 8 = float64
}

inline void ck_write(std::ostream& os, const void* p, size_t n) {
  os.write((const char*)p, (std::streamsize)n);
  if (!os) throw std::runtime_error("checkpoint: write failure");
}
template <typename V>
void ck_write_pod(std::ostream& os, V v) {
  ck_write(os, &v, sizeof(V));
}
inline void ck_write_str(std::ostream& os, const std::string& s) {
  ck_write_pod<uint64_t>(os, s.size());
  ck_write(os, s.data(), s.size());
}

inline void ck_read(std::istream& is, void* p, size_t n) {
  is.read((char*)p, (std::streamsize)n);
  if ((size_t)is.gcount() != n)
    throw std::runtime_error("checkpoint: truncated file");
}
template <typename V>
V ck_read_pod(std::istream& is) {
  V v;
  ck_read(is, &v, sizeof(V));
  return v;
}
inline std::string ck_read_str(std::istream& is, uint64_t max_len = 1 << 26) {
  const uint64_t n = ck_read_pod<uint64_t>(is);
  if (n > max_len) throw std::runtime_error("checkpoint: implausible string length");
  std::string s((size_t)n, '\0');
  ck_read(is, s.data(), (size_t)n);
  return s;
}

template <typename T>
void ck_write_tensor(std::ostream& os, const Tensor<T>& t) {
  ck_write_pod<uint32_t>(os, (uint32_t)t.ndim());
  for (long d : t.shape) ck_write_pod<int64_t>(os, d);
  ck_write(os, t.data(), sizeof(T) * (size_t)t.numel());
}

template <typename T>
void ck_read_tensor_into(std::istream& is, Tensor<T>& t,
                         const std::string& what) {
  const uint32_t ndim = ck_read_pod<uint32_t>(is);
  Shape shape((size_t)ndim);
  for (uint32_t i = 0; i < ndim; ++i) shape[i] = ck_read_pod<int64_t>(is);
  if (shape != t.shape)
    throw std::runtime_error("checkpoint: shape mismatch for " + what +
                             ": file has " + shape_str(shape) + ", model has " +
                             shape_str(t.shape));
  ck_read(is, t.data(), sizeof(T) * (size_t)t.numel());
}

/// Read past a tensor without storing it.
template <typename T>
void ck_skip_tensor(std::istream& is) {
  const uint32_t ndim = ck_read_pod<uint32_t>(is);
  long n = 1;
  for (uint32_t i = 0; i < ndim; ++i) n *= ck_read_pod<int64_t>(is);
  is.seekg((std::streamoff)(sizeof(T) * (size_t)n), std::ios::cur);
  if (!is) throw std::runtime_error("checkpoint: truncated tensor payload");
}

inline std::ifstream ck_open_validated(const std::string& path,
                                       uint32_t expect_dtype,
                                       uint32_t* dtype_out = nullptr) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
  char magic[8];
  ck_read(is, magic, 8);
  if (std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path);
  const uint32_t version = ck_read_pod<uint32_t>(is);
  if (version != kCheckpointVersion)
    throw std::runtime_error("checkpoint: unsupported version " +
                             std::to_string(version) + " in " + path);
  const uint32_t dtype = ck_read_pod<uint32_t>(is);
  if (dtype_out) *dtype_out = dtype;
  if (expect_dtype != 0 && dtype != expect_dtype)
    throw std::runtime_error(
        "checkpoint: dtype mismatch in " + path + " (file float" +
        std::to_string(8 * dtype) + ", model float" +
        std::to_string(8 * expect_dtype) + ")");
  return is;
}

}  // namespace detail

struct CheckpointInfo {
  Configs configs;
  long iteration = 0;
  bool has_optimizer = false;
  bool has_rng = false;
};

/// Serialize model weights (named tensors), optimizer moments, and rng state.
/// Pass nullptr for `opt`/`rng` to omit those sections.
template <typename T>
void save_checkpoint(const std::string& path, const Configs& configs,
                     long iteration, const ParamList<T>& params,
                     const std::type_identity_t<AdamW<T>>* opt = nullptr,
                     const Rng* rng = nullptr) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("checkpoint: cannot write " + path);
  detail::ck_write(os, kCheckpointMagic, 8);
  detail::ck_write_pod<uint32_t>(os, kCheckpointVersion);
  detail::ck_write_pod<uint32_t>(os, detail::dtype_code<T>());
  detail::ck_write_pod<int64_t>(os, iteration);
  detail::ck_write_str(os, serialize(configs));

  detail::ck_write_pod<uint64_t>(os, params.size());
  for (const auto& [name, p] : params) {
    detail::ck_write_str(os, name);
    detail::ck_write_tensor(os, p->val());
  }

  detail::ck_write_pod<uint8_t>(os, opt ? 1 : 0);
  if (opt) {
    if (opt->m.size() != params.size())
      throw std::logic_error("checkpoint: optimizer state does not match model");
    detail::ck_write_pod<int64_t>(os, opt->step_count);
    for (size_t i = 0; i < params.size(); ++i) {
      detail::ck_write_tensor(os, opt->m[i]);
      detail::ck_write_tensor(os, opt->v[i]);
    }
  }

  detail::ck_write_pod<uint8_t>(os, rng ? 1 : 0);
  if (rng) detail::ck_write_str(os, rng->state());
  os.flush();
  if (!os) throw std::runtime_error("checkpoint: write failure on " + path);
}

/// Read configs/iteration without touching weights (to build the model first).
inline CheckpointInfo peek_checkpoint(const std::string& path) {
  std::ifstream is = detail::ck_open_validated(path, 0);
  CheckpointInfo info;
  info.iteration = (long)detail::ck_read_pod<int64_t>(is);
  info.configs = parse_config(detail::ck_read_str(is), path + "#config");
  return info;
}

/// Load weights (and optionally optimizer + rng state) into an existing model
/// whose architecture matches the checkpoint. Parameter names and shapes are
/// verified one by one.
template <typename T>
CheckpointInfo load_checkpoint(const std::string& path,
                               const ParamList<T>& params,
                               std::type_identity_t<AdamW<T>>* opt = nullptr,
                               Rng* rng = nullptr) {
  std::ifstream is = detail::ck_open_validated(path, detail::dtype_code<T>());
  CheckpointInfo info;
  info.iteration = (long)detail::ck_read_pod<int64_t>(is);
  info.configs = parse_config(detail::ck_read_str(is), path + "#config");

  const uint64_t count = detail::ck_read_pod<uint64_t>(is);
  if (count != params.size())
    throw std::runtime_error(
        "checkpoint: parameter count mismatch: file has " +
        std::to_string(count) + ", model has " + std::to_string(params.size()));
  for (size_t i = 0; i < params.size(); ++i) {
    const std::string name = detail::ck_read_str(is);
    if (name != params[i].first)
      throw std::runtime_error("checkpoint: parameter name mismatch at index " +
                               std::to_string(i) + ": file has '" + name +
                               "', model has '" + params[i].first + "'");
    detail::ck_read_tensor_into(is, params[i].second->val(), name);
  }

  info.has_optimizer = detail::ck_read_pod<uint8_t>(is) != 0;
  if (info.has_optimizer) {
    const long step = (long)detail::ck_read_pod<int64_t>(is);
    if (opt) {
      opt->init(params);
      opt->step_count = step;
      for (size_t i = 0; i < params.size(); ++i) {
        detail::ck_read_tensor_into(is, opt->m[i], params[i].first + "#m");
        detail::ck_read_tensor_into(is, opt->v[i], params[i].first + "#v");
      }
    } else {
      for (size_t i = 0; i < params.size(); ++i) {
        detail::ck_skip_tensor<T>(is);
        detail::ck_skip_tensor<T>(is);
      }
    }
  } else if (opt) {
    opt->init(params);  // checkpoint had no optimizer: start fresh
  }

  info.has_rng = detail::ck_read_pod<uint8_t>(is) != 0;
  if (info.has_rng) {
    const std::string state = detail::ck_read_str(is);
    if (rng) rng->set_state(state);
  }
  return info;
}

}  // namespace cisunet
