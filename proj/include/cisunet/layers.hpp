#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "cisunet/core/conv.hpp"
#include "cisunet/core/ops.hpp"
#include "cisunet/core/rng.hpp"

namespace cisunet {

template <typename T>
using ParamList = std::vector<std::pair<std::string, Var<T>*>>;

/// Affine map y = x*w + b with w stored (in, out). Weights are fan-in scaled
/// (std = sqrt(1/in)); biases start at zero.
template <typename T>
struct LinearM {
  Var<T> w, b;

  void init(long in, long out, bool bias, Rng& rng) {
    Tensor<T> wt({in, out});
    rng.fill_normal(wt, 0.0, std::sqrt(1.0 / (double)in));
    w = Var<T>::leaf(std::move(wt), true);
    if (bias) b = Var<T>::leaf(Tensor<T>({out}), true);
  }
  Var<T> forward(const Var<T>& x) const { return linear(x, w, b); }
  void params(ParamList<T>& out, const std::string& p) {
    out.push_back({p + ".w", &w});
    if (b.defined()) out.push_back({p + ".b", &b});
  }
};

template <typename T>
struct LayerNormM {
  Var<T> gamma, beta;

  void init(long dim) {
    gamma = Var<T>::leaf(Tensor<T>({dim}, (T)1), true);
    beta = Var<T>::leaf(Tensor<T>({dim}), true);
  }
  Var<T> forward(const Var<T>& x) const { return layer_norm(x, gamma, beta); }
  void params(ParamList<T>& out, const std::string& p) {
    out.push_back({p + ".gamma", &gamma});
    out.push_back({p + ".beta", &beta});
  }
};

template <typename T>
struct InstanceNormM {
  Var<T> gamma, beta;

  void init(long channels) {
    gamma = Var<T>::leaf(Tensor<T>({channels}, (T)1), true);
    beta = Var<T>::leaf(Tensor<T>({channels}), true);
  }
  Var<T> forward(const Var<T>& x) const { return instance_norm(x, gamma, beta); }
  void params(ParamList<T>& out, const std::string& p) {
    out.push_back({p + ".gamma", &gamma});
    out.push_back({p + ".beta", &beta});
  }
};

/// Cubic-kernel 3-d convolution; He init (std = sqrt(2 / (cin*k^3))), zero bias.
template <typename T>
struct Conv3dM {
  Var<T> w, b;
  long stride = 1, pad = 0;

  void init(long cin, long cout, long k, long stride_, long pad_, Rng& rng) {
    stride = stride_;
    pad = pad_;
    Tensor<T> wt({cout, cin, k, k, k});
    rng.fill_normal(wt, 0.0, std::sqrt(2.0 / (double)(cin * k * k * k)));
    w = Var<T>::leaf(std::move(wt), true);
    b = Var<T>::leaf(Tensor<T>({cout}), true);
  }
  Var<T> forward(const Var<T>& x) const { return conv3d(x, w, b, stride, pad); }
  void params(ParamList<T>& out, const std::string& p) {
    out.push_back({p + ".w", &w});
    out.push_back({p + ".b", &b});
  }
};

/// Transposed conv, kernel 2 stride 2 (the network's only upsampling shape).
template <typename T>
struct ConvT3dM {
  Var<T> w, b;

  void init(long cin, long cout, Rng& rng) {
    Tensor<T> wt({cin, cout, 2, 2, 2});
    rng.fill_normal(wt, 0.0, std::sqrt(2.0 / (double)(cin * 8)));
    w = Var<T>::leaf(std::move(wt), true);
    b = Var<T>::leaf(Tensor<T>({cout}), true);
  }
  Var<T> forward(const Var<T>& x) const { return conv_transpose3d_k2s2(x, w, b); }
  void params(ParamList<T>& out, const std::string& p) {
    out.push_back({p + ".w", &w});
    out.push_back({p + ".b", &b});
  }
};

/// conv -> instance norm -> optional ReLU.
template <typename T>
struct ConvBlock {
  Conv3dM<T> conv;
  InstanceNormM<T> norm;
  bool act = true;

  void init(long cin, long cout, long k, long stride, long pad, bool act_,
            Rng& rng) {
    conv.init(cin, cout, k, stride, pad, rng);
    norm.init(cout);
    act = act_;
  }
  Var<T> forward(const Var<T>& x) const {
    Var<T> y = norm.forward(conv.forward(x));
    return act ? relu(y) : y;
  }
  void params(ParamList<T>& out, const std::string& p) {
    conv.params(out, p + ".conv");
    norm.params(out, p + ".norm");
  }
};

template <typename T>
long param_count(const ParamList<T>& params) {
  long n = 0;
  for (const auto& [name, v] : params) n += v->val().numel();
  return n;
}

}  // namespace cisunet
