#pragma once

#include <cstdint>
#include <random>
#include <sstream>
#include <string>

#include "cisunet/core/tensor.hpp"

namespace cisunet {

/// Seeded random source. All randomness in the library flows through one of
/// these so that runs are reproducible; draws are always made in double and
/// cast, so float and double models see the same underlying sequence.
struct Rng {
  std::mt19937_64 gen;

  explicit Rng(uint64_t seed = 0) : gen(seed) {}

  double uniform(double lo = 0.0, double hi = 1.0) {
    return std::uniform_real_distribution<double>(lo, hi)(gen);
  }
  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(gen);
  }
  /// Uniform integer in [lo, hi).
  long randint(long lo, long hi) {
    return std::uniform_int_distribution<long>(lo, hi - 1)(gen);
  }

  template <typename T>
  void fill_normal(Tensor<T>& t, double mean, double stddev) {
    for (long i = 0; i < t.numel(); ++i) t.data()[i] = (T)normal(mean, stddev);
  }
  template <typename T>
  void fill_uniform(Tensor<T>& t, double lo, double hi) {
    for (long i = 0; i < t.numel(); ++i) t.data()[i] = (T)uniform(lo, hi);
  }

  /// Engine state as text (for checkpointing); mt19937_64 defines the format.
  std::string state() const {
    std::ostringstream os;
    os << gen;
    return os.str();
  }
  void set_state(const std::string& s) {
    std::istringstream is(s);
    is >> gen;
    if (is.fail()) throw std::runtime_error("rng: malformed engine state");
  }
};

}  // namespace cisunet
