#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "cisunet/layers.hpp"

namespace cisunet {

/// AdamW with decoupled weight decay: moments update from raw gradients and
/// the decay term lr·wd·p is applied directly to the parameter, outside the
/// adaptive rescaling.
template <typename T>
struct AdamW {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-5;

  long step_count = 0;
  std::vector<Tensor<T>> m, v;  // first/second moments, parallel to params

  void init(const ParamList<T>& params) {
    step_count = 0;
    m.clear();
    v.clear();
    for (const auto& [name, p] : params) {
      m.push_back(Tensor<T>::zeros(p->val().shape));
      v.push_back(Tensor<T>::zeros(p->val().shape));
    }
  }

  void step(const ParamList<T>& params) {
    if (m.size() != params.size())
      throw std::logic_error("AdamW: optimizer not initialized for this model");
    ++step_count;
    const double bc1 = 1.0 - std::pow(beta1, (double)step_count);
    const double bc2 = 1.0 - std::pow(beta2, (double)step_count);
    for (size_t i = 0; i < params.size(); ++i) {
      Var<T>& p = *params[i].second;
      T* w = p.val().data();
      const T* g = p.grad().data();
      T* mi = m[i].data();
      T* vi = v[i].data();
      const long n = p.val().numel();
      for (long j = 0; j < n; ++j) {
        const double gj = (double)g[j];
        const double mj = beta1 * (double)mi[j] + (1.0 - beta1) * gj;
        const double vj = beta2 * (double)vi[j] + (1.0 - beta2) * gj * gj;
        mi[j] = (T)mj;
        vi[j] = (T)vj;
        const double update = (mj / bc1) / (std::sqrt(vj / bc2) + eps);
        w[j] = (T)((double)w[j] -
                   lr * (update + weight_decay * (double)w[j]));
      }
    }
  }

  void zero_grad(const ParamList<T>& params) {
    for (const auto& [name, p] : params) p->zero_grad();
  }
};

}  // namespace cisunet
