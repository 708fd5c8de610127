#pragma once

#include <cstdint>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace cisunet {

using Shape = std::vector<long>;

inline long numel_of(const Shape& s) {
  long n = 1;
  for (long d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

/// Dense row-major tensor with a shared, contiguous buffer.
///
/// Copies are shallow (buffer shared); ops always allocate fresh outputs, so
/// aliasing only occurs where explicitly intended (reshaped views). Use
/// clone() for a deep copy.
template <typename T>
struct Tensor {
  Shape shape;
  std::shared_ptr<std::vector<T>> buf;

  Tensor() = default;
  explicit Tensor(Shape s)
      : shape(std::move(s)),
        buf(std::make_shared<std::vector<T>>(numel_of(shape))) {}
  Tensor(Shape s, T fill)
      : shape(std::move(s)),
        buf(std::make_shared<std::vector<T>>(numel_of(shape), fill)) {}

  static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
  static Tensor full(Shape s, T v) { return Tensor(std::move(s), v); }

  bool defined() const { return buf != nullptr; }
  long numel() const { return defined() ? (long)buf->size() : 0; }
  int ndim() const { return (int)shape.size(); }
  long dim(int i) const { return shape[(size_t)(i < 0 ? i + ndim() : i)]; }

  T* data() { return buf->data(); }
  const T* data() const { return buf->data(); }

  Tensor clone() const {
    Tensor out;
    out.shape = shape;
    if (buf) out.buf = std::make_shared<std::vector<T>>(*buf);
    return out;
  }

  /// View with a new shape over the same buffer (numel must match).
  Tensor reshaped(Shape s) const {
    if (numel_of(s) != numel())
      throw std::invalid_argument("reshape: numel mismatch " + shape_str(shape) +
                                  " -> " + shape_str(s));
    Tensor out;
    out.shape = std::move(s);
    out.buf = buf;
    return out;
  }

  void fill(T v) { std::fill(buf->begin(), buf->end(), v); }

  /// Convenience element access for tests (slow path).
  T& at(std::initializer_list<long> idx) {
    return (*buf)[(size_t)flat_index(idx)];
  }
  T at(std::initializer_list<long> idx) const {
    return (*buf)[(size_t)flat_index(idx)];
  }

  long flat_index(std::initializer_list<long> idx) const {
    if ((int)idx.size() != ndim())
      throw std::invalid_argument("index rank mismatch for " + shape_str(shape));
    long flat = 0;
    int i = 0;
    for (long v : idx) {
      if (v < 0 || v >= shape[(size_t)i])
        throw std::out_of_range("index out of range at axis " + std::to_string(i));
      flat = flat * shape[(size_t)i] + v;
      ++i;
    }
    return flat;
  }
};

template <typename T>
bool same_shape(const Tensor<T>& a, const Tensor<T>& b) {
  return a.shape == b.shape;
}

}  // namespace cisunet
