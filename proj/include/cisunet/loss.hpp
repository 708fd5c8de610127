#pragma once

#include <cmath>
#include <stdexcept>
#include <string>

#include "cisunet/core/ops.hpp"

namespace cisunet {

struct LossWeights {
  double lambda_dice = 1.0;
  double lambda_ce = 1.0;
};

namespace detail {

template <typename T>
void check_probs_shapes(const Tensor<T>& s, const Tensor<T>& g, const char* op) {
  if (!same_shape(s, g))
    throw std::runtime_error(std::string(op) + ": shape mismatch " +
                             shape_str(s.shape) + " vs " + shape_str(g.shape));
  if (s.ndim() < 2)
    throw std::runtime_error(std::string(op) +
                             ": expected (B, C, spatial...) tensors");
}

}  // namespace detail

/// Per-voxel softmax over the class axis of a (B, C, spatial...) tensor.
template <typename T>
Tensor<T> softmax_channels(const Tensor<T>& logits) {
  const long B = logits.dim(0), C = logits.dim(1);
  const long sp = logits.numel() / (B * C);
  Tensor<T> s(logits.shape);
  const T* in = logits.data();
  T* out = s.data();
  for (long b = 0; b < B; ++b)
    for (long i = 0; i < sp; ++i) {
      const long base = b * C * sp + i;
      T mx = in[base];
      for (long c = 1; c < C; ++c) mx = std::max(mx, in[base + c * sp]);
      T denom = (T)0;
      for (long c = 0; c < C; ++c) {
        const T e = std::exp(in[base + c * sp] - mx);
        out[base + c * sp] = e;
        denom += e;
      }
      for (long c = 0; c < C; ++c) out[base + c * sp] /= denom;
    }
  return s;
}

/// One-hot encode an integer label map (B, spatial...) to (B, C, spatial...).
template <typename T>
Tensor<T> one_hot(const Tensor<long>& labels, long num_classes) {
  const long B = labels.dim(0), sp = labels.numel() / labels.dim(0);
  Shape out_shape;
  out_shape.push_back(B);
  out_shape.push_back(num_classes);
  for (int i = 1; i < labels.ndim(); ++i) out_shape.push_back(labels.dim(i));
  Tensor<T> g(out_shape);
  const long* l = labels.data();
  T* out = g.data();
  for (long b = 0; b < B; ++b)
    for (long i = 0; i < sp; ++i) {
      const long v = l[b * sp + i];
      if (v < 0 || v >= num_classes)
        throw std::runtime_error("one_hot: label value " + std::to_string(v) +
                                 " outside [0, " + std::to_string(num_classes) +
                                 ")");
      out[(b * num_classes + v) * sp + i] = (T)1;
    }
  return g;
}

/// Global Dice loss over all classes jointly (background included): one ratio
/// 1 - (2*sum(g*s) + eps) / (sum(g) + sum(s) + eps).
template <typename T>
T dice_loss(const Tensor<T>& s, const Tensor<T>& g, T eps = (T)1e-5) {
  detail::check_probs_shapes(s, g, "dice_loss");
  double inter = 0.0, sum_g = 0.0, sum_s = 0.0;
  const T* ps = s.data();
  const T* pg = g.data();
  for (long i = 0; i < s.numel(); ++i) {
    inter += (double)pg[i] * (double)ps[i];
    sum_g += (double)pg[i];
    sum_s += (double)ps[i];
  }
  return (T)(1.0 - (2.0 * inter + (double)eps) / (sum_g + sum_s + (double)eps));
}

/// Mean voxel-wise cross-entropy -(1/N) * sum g * log(max(s, clamp)).
template <typename T>
T cross_entropy(const Tensor<T>& s, const Tensor<T>& g, T clamp = (T)1e-12) {
  detail::check_probs_shapes(s, g, "cross_entropy");
  const long B = s.dim(0), C = s.dim(1);
  const long N = s.numel() / C;  // voxel count (batch included)
  double acc = 0.0;
  const T* ps = s.data();
  const T* pg = g.data();
  for (long i = 0; i < s.numel(); ++i)
    if (pg[i] != (T)0)
      acc += (double)pg[i] * std::log(std::max((double)ps[i], (double)clamp));
  (void)B;
  return (T)(-acc / (double)N);
}

/// Compound objective lambda_dice * Dice + lambda_ce * CE on raw logits, as a
/// single differentiable op with an analytic backward pass.
///
/// logits: (B, C, spatial...); labels: (B, spatial...) with values in [0, C).
/// Because softmax rows sum to one, the Dice denominator is constant in the
/// logits, which gives the closed forms
///   dDice/dlogit[i,k] = -2/(sum_g + sum_s + eps) * s[i,y_i] *
///                       (1[k == y_i] - s[i,k])
///   dCE/dlogit[i,k]   = (1/N) * (s[i,k] - 1[k == y_i]).
template <typename T>
Var<T> dice_ce(const Var<T>& logits, const Tensor<long>& labels,
               const LossWeights& w = {}, T eps = (T)1e-5,
               T clamp = (T)1e-12) {
  const Shape& ls = logits.val().shape;
  if (ls.size() < 2)
    throw std::runtime_error("dice_ce: logits must be (B, C, spatial...)");
  const long B = ls[0], C = ls[1];
  const long sp = logits.val().numel() / (B * C);
  if (labels.dim(0) != B || labels.numel() != B * sp)
    throw std::runtime_error("dice_ce: labels shape " +
                             shape_str(labels.shape) +
                             " does not match logits " + shape_str(ls));
  if (w.lambda_dice < 0 || w.lambda_ce < 0)
    throw std::runtime_error("dice_ce: loss weights must be >= 0");
  const long* lab = labels.data();
  for (long i = 0; i < labels.numel(); ++i)
    if (lab[i] < 0 || lab[i] >= C)
      throw std::runtime_error("dice_ce: label value " + std::to_string(lab[i]) +
                               " outside [0, " + std::to_string(C) + ")");

  Tensor<T> s = softmax_channels(logits.val());
  const T* ps = s.data();
  const long N = B * sp;

  double inter = 0.0, sum_s = 0.0, ce_acc = 0.0;
  for (long b = 0; b < B; ++b)
    for (long i = 0; i < sp; ++i) {
      const T sv = ps[(b * C + lab[b * sp + i]) * sp + i];
      inter += (double)sv;
      ce_acc += std::log(std::max((double)sv, (double)clamp));
    }
  for (long i = 0; i < s.numel(); ++i) sum_s += (double)ps[i];
  const double denom = (double)N + sum_s + (double)eps;
  const double dice = 1.0 - (2.0 * inter + (double)eps) / denom;
  const double ce = -ce_acc / (double)N;

  Tensor<T> out({1});
  out.data()[0] = (T)(w.lambda_dice * dice + w.lambda_ce * ce);

  auto ln = logits.n;
  // The backward closure keeps its own handles on the softmax values and the
  // label buffer.
  Tensor<long> labs = labels;
  return make_op<T>(
      std::move(out), {ln},
      [ln, s, labs, B, C, sp, N, denom, w](Node<T>& self) {
        const T g0 = self.grad.data()[0];
        const T* ps = s.data();
        const long* lab = labs.data();
        const T dice_coef = (T)(-2.0 / denom) * (T)w.lambda_dice;
        const T ce_coef = (T)(w.lambda_ce / (double)N);
        detail::accumulate_with<T>(ln, [&](T* dx) {
          for (long b = 0; b < B; ++b)
            for (long i = 0; i < sp; ++i) {
              const long y = lab[b * sp + i];
              const T sy = ps[(b * C + y) * sp + i];
              for (long c = 0; c < C; ++c) {
                const T sc = ps[(b * C + c) * sp + i];
                const T is_y = c == y ? (T)1 : (T)0;
                dx[(b * C + c) * sp + i] +=
                    g0 * (dice_coef * sy * (is_y - sc) + ce_coef * (sc - is_y));
              }
            }
        });
      });
}

}  // namespace cisunet
