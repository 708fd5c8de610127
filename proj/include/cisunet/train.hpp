#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <ostream>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "cisunet/backbone.hpp"
#include "cisunet/config.hpp"
#include "cisunet/data.hpp"
#include "cisunet/inference.hpp"
#include "cisunet/loss.hpp"
#include "cisunet/metrics.hpp"
#include "cisunet/optim.hpp"

namespace cisunet {

/// One training (or validation) volume, already resampled and normalized.
struct TrainCase {
  std::string id;
  Tensor<float> image;     // (X,Y,Z), intensities in [0,1]
  Tensor<uint8_t> labels;  // (X,Y,Z), class ids
};

struct TrainLogEntry {
  long iteration = 0;  // 1-based
  double loss = 0.0;
  double val_dsc = std::numeric_limits<double>::quiet_NaN();  // NaN: not run
  double seconds = 0.0;  // wall time since training started
};

struct TrainOptions {
  long val_every = 100;       // 0 disables periodic validation
  long checkpoint_every = 0;  // 0: callback fires only after the last iteration
  std::function<void(long)> on_checkpoint;  // receives the iteration number
  std::ostream* progress = nullptr;         // one line per iteration if set
};

/// Mean Dice over the foreground classes present in the reference volume.
/// NaN when the reference contains no foreground at all.
inline double foreground_dsc(const Tensor<uint8_t>& pred,
                             const Tensor<uint8_t>& gt) {
  std::set<long> classes;
  for (long i = 0; i < gt.numel(); ++i)
    if (gt.data()[i] != 0) classes.insert((long)gt.data()[i]);
  if (classes.empty()) return std::numeric_limits<double>::quiet_NaN();
  double acc = 0.0;
  for (long c : classes) acc += dsc(mask_of_class(pred, c), mask_of_class(gt, c));
  return acc / (double)classes.size();
}

/// Sliding-window prediction of a whole case followed by foreground Dice
/// against its reference labels. Uses no random state, so interleaving
/// validation with training does not perturb the sampling stream.
template <typename T>
double validate_volume(const CisUNet<T>& net, const TrainCase& vc,
                       long num_classes, std::array<long, 3> patch,
                       double overlap = 0.5) {
  Tensor<T> vol(vc.image.shape);
  for (long i = 0; i < vol.numel(); ++i) vol.data()[i] = (T)vc.image.data()[i];
  Tensor<T> logits = sliding_window_logits<T>(
      vol, num_classes, patch, overlap, [&](const Tensor<T>& window) {
        NoGradGuard guard;
        return net.forward(Var<T>::leaf(window)).val();
      });
  LabelVolume pred = labels_from_logits(logits, Geometry{});
  return foreground_dsc(pred.voxels, vc.labels);
}

/// Seeded SGD loop: each iteration draws `batch_size` patches (one per
/// uniformly chosen volume, balanced foreground/background centers), runs a
/// DiceCE step with AdamW, and optionally validates / checkpoints. Aborts
/// with a diagnostic if the loss leaves the finite range. Identical inputs
/// and rng state reproduce the loss sequence bit for bit.
template <typename T>
std::vector<TrainLogEntry> train_loop(CisUNet<T>& net, AdamW<T>& opt,
                                      const TrainConfig& tc,
                                      const DataConfig& dc,
                                      const std::vector<TrainCase>& cases,
                                      const TrainCase* validation, Rng& rng,
                                      const TrainOptions& options = {}) {
  if (cases.empty()) throw std::invalid_argument("train_loop: no training cases");
  validate(tc);
  const auto params = net.named_parameters();
  if (opt.m.size() != params.size()) opt.init(params);
  opt.lr = tc.learning_rate;
  opt.weight_decay = tc.weight_decay;

  const long B = tc.batch_size;
  const auto& ps = tc.patch_size;
  const long pvox = ps[0] * ps[1] * ps[2];
  const long num_classes = net.cfg.num_classes;

  std::vector<TrainLogEntry> log;
  log.reserve((size_t)tc.iterations);
  const auto t0 = std::chrono::steady_clock::now();

  Tensor<T> batch({B, 1, ps[0], ps[1], ps[2]});
  Tensor<long> labels({B, ps[0], ps[1], ps[2]});
  for (long it = 1; it <= tc.iterations; ++it) {
    for (long b = 0; b < B; ++b) {
      const auto& tcse = cases[(size_t)rng.randint(0, (long)cases.size())];
      auto patches = crop_pos_neg(tcse.image, tcse.labels, ps,
                                  dc.pos_neg_ratio, rng, 1, tcse.id);
      const SamplePatch& sp = patches[0];
      T* bx = batch.data() + b * pvox;
      long* bl = labels.data() + b * pvox;
      for (long i = 0; i < pvox; ++i) {
        bx[i] = (T)sp.image.data()[i];
        bl[i] = (long)sp.labels.data()[i];
      }
    }

    Var<T> x = Var<T>::leaf(batch.clone());
    Var<T> logits = net.forward(x);
    Var<T> loss = dice_ce(logits, labels, {tc.lambda_dice, tc.lambda_ce});
    const double loss_val = (double)loss.val().data()[0];
    if (!std::isfinite(loss_val))
      throw std::runtime_error("train_loop: non-finite loss " +
                               std::to_string(loss_val) + " at iteration " +
                               std::to_string(it));
    opt.zero_grad(params);
    backward(loss);
    opt.step(params);

    TrainLogEntry entry;
    entry.iteration = it;
    entry.loss = loss_val;
    if (validation && options.val_every > 0 && it % options.val_every == 0)
      entry.val_dsc =
          validate_volume(net, *validation, num_classes, ps, 0.5);
    entry.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
            .count();
    log.push_back(entry);

    if (options.progress) {
      char line[160];
      if (std::isnan(entry.val_dsc))
        std::snprintf(line, sizeof line, "iter %ld/%ld  loss %.6f  (%.1fs)",
                      it, tc.iterations, entry.loss, entry.seconds);
      else
        std::snprintf(line, sizeof line,
                      "iter %ld/%ld  loss %.6f  val_dsc %.4f  (%.1fs)", it,
                      tc.iterations, entry.loss, entry.val_dsc, entry.seconds);
      (*options.progress) << line << "\n";
      options.progress->flush();
    }

    if (options.on_checkpoint &&
        ((options.checkpoint_every > 0 && it % options.checkpoint_every == 0) ||
         it == tc.iterations))
      options.on_checkpoint(it);
  }
  return log;
}

}  // namespace cisunet
