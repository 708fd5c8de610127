#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "cisunet/attention.hpp"
#include "cisunet/config.hpp"
#include "cisunet/layers.hpp"

namespace cisunet {

/// Two 3x3x3 convolutions with instance norm, identity shortcut, no
/// activation after the addition (so zero-weight units are exact identities).
template <typename T>
struct ResidualUnit {
  Conv3dM<T> conv1, conv2;
  InstanceNormM<T> norm1, norm2;

  void init(long channels, Rng& rng) {
    conv1.init(channels, channels, 3, 1, 1, rng);
    norm1.init(channels);
    conv2.init(channels, channels, 3, 1, 1, rng);
    norm2.init(channels);
  }
  Var<T> forward(const Var<T>& x) const {
    Var<T> y = relu(norm1.forward(conv1.forward(x)));
    y = norm2.forward(conv2.forward(y));
    return add(x, y);
  }
  void params(ParamList<T>& out, const std::string& p) {
    conv1.params(out, p + ".conv1");
    norm1.params(out, p + ".norm1");
    conv2.params(out, p + ".conv2");
    norm2.params(out, p + ".norm2");
  }
};

/// One encoder stage: strided 3x3x3 conv halving resolution, a 1x1x1 mixing
/// conv, then the stage's residual units.
template <typename T>
struct EncoderStage {
  ConvBlock<T> down, mix;
  std::vector<ResidualUnit<T>> units;

  void init(long cin, long cout, long depth, Rng& rng) {
    down.init(cin, cout, 3, 2, 1, true, rng);
    mix.init(cout, cout, 1, 1, 0, true, rng);
    units.resize(depth);
    for (auto& u : units) u.init(cout, rng);
  }
  Var<T> forward(const Var<T>& x) const {
    Var<T> y = mix.forward(down.forward(x));
    for (const auto& u : units) y = u.forward(y);
    return y;
  }
  void params(ParamList<T>& out, const std::string& p) {
    down.params(out, p + ".down");
    mix.params(out, p + ".mix");
    for (size_t i = 0; i < units.size(); ++i)
      units[i].params(out, p + ".unit" + std::to_string(i));
  }
};

/// One decoder stage: transposed conv doubling resolution, concatenation with
/// the encoder skip, two 3x3x3 convolutions, and a residual connection from
/// the upsampled features.
template <typename T>
struct DecoderStage {
  ConvT3dM<T> up;       // F -> F, doubles each spatial dim
  ConvBlock<T> fuse;    // (F + skip) -> F
  Conv3dM<T> conv2;     // F -> F, norm only (identity-preserving residual)
  InstanceNormM<T> norm2;

  void init(long width, long skip_channels, Rng& rng) {
    up.init(width, width, rng);
    fuse.init(width + skip_channels, width, 3, 1, 1, true, rng);
    conv2.init(width, width, 3, 1, 1, rng);
    norm2.init(width);
  }
  Var<T> forward(const Var<T>& x, const Var<T>& skip) const {
    Var<T> u = up.forward(x);
    Var<T> y = fuse.forward(concat(u, skip, 1));
    y = norm2.forward(conv2.forward(y));
    return add(u, y);
  }
  void params(ParamList<T>& out, const std::string& p) {
    up.params(out, p + ".up");
    fuse.params(out, p + ".fuse");
    conv2.params(out, p + ".conv2");
    norm2.params(out, p + ".norm2");
  }
};

/// The full segmentation network: CNN encoder (stem + 4 strided stages), a
/// shifted-window attention bottleneck at 1/16 resolution, and a symmetric
/// decoder with skip connections, ending in a 1x1x1 class head.
template <typename T>
struct CisUNet {
  ModelConfig cfg;
  ConvBlock<T> stem;  // 7x7x7, full resolution
  std::vector<EncoderStage<T>> enc;  // 4 stages
  std::optional<CswSaBottleneck<T>> csw;
  std::optional<SwSaBottleneck<T>> sw;
  std::vector<DecoderStage<T>> dec;  // deepest first
  Conv3dM<T> head;

  void init(const ModelConfig& cfg_, Rng& rng) {
    cfg = cfg_;
    validate(cfg);
    const auto& C = cfg.stage_channels;
    const long F = cfg.embed_dim;

    stem.init(cfg.in_channels, C[0], 7, 1, 3, true, rng);
    enc.resize(4);
    enc[0].init(C[0], C[0], cfg.stage_depths[0], rng);
    enc[1].init(C[0], C[1], cfg.stage_depths[1], rng);
    enc[2].init(C[1], C[2], cfg.stage_depths[2], rng);
    enc[3].init(C[2], C[3], cfg.stage_depths[3], rng);

    if (cfg.attention_variant == AttentionVariant::CSW_SA) {
      csw.emplace();
      csw->init(cfg, rng);
    } else {
      sw.emplace();
      sw->init(cfg, rng);
    }

    // Skip widths, deepest first: stage3, stage2, stage1, stem.
    const long skips[4] = {C[2], C[1], C[0], C[0]};
    dec.resize(4);
    for (int i = 0; i < 4; ++i) dec[i].init(F, skips[i], rng);

    head.init(F, cfg.num_classes, 1, 1, 0, rng);
  }

  /// x: (B, in_channels, X, Y, Z) with every spatial dim divisible by 16.
  /// Returns per-class logits (B, num_classes, X, Y, Z).
  Var<T> forward(const Var<T>& x, BottleneckActs<T>* acts = nullptr,
                 Tensor<T>* shifted_attn = nullptr) const {
    const Shape& s = x.val().shape;
    if (s.size() != 5)
      throw std::runtime_error("forward: expected 5-d input, got " +
                               shape_str(s));
    if (s[1] != cfg.in_channels)
      throw std::runtime_error("forward: input has " + std::to_string(s[1]) +
                               " channels, model expects " +
                               std::to_string(cfg.in_channels));
    for (int i = 2; i < 5; ++i)
      if (s[(size_t)i] % 16 != 0)
        throw std::runtime_error("forward: spatial dims of " + shape_str(s) +
                                 " must be divisible by 16");

    Var<T> s0 = stem.forward(x);          // C1 @ 1/1
    Var<T> e1 = enc[0].forward(s0);       // C1 @ 1/2
    Var<T> e2 = enc[1].forward(e1);       // C2 @ 1/4
    Var<T> e3 = enc[2].forward(e2);       // C3 @ 1/8
    Var<T> e4 = enc[3].forward(e3);       // C4 @ 1/16

    Var<T> b = csw ? csw->forward(e4, acts, shifted_attn)
                   : sw->forward(e4, acts, shifted_attn);  // F @ 1/16

    Var<T> y = dec[0].forward(b, e3);     // F @ 1/8
    y = dec[1].forward(y, e2);            // F @ 1/4
    y = dec[2].forward(y, e1);            // F @ 1/2
    y = dec[3].forward(y, s0);            // F @ 1/1
    return head.forward(y);               // classes @ 1/1
  }

  /// Deterministic (name, tensor) list covering every learnable tensor, in
  /// construction order. Names are stable across runs and processes.
  ParamList<T> named_parameters() {
    ParamList<T> out;
    stem.params(out, "stem");
    for (int i = 0; i < 4; ++i)
      enc[i].params(out, "enc" + std::to_string(i + 1));
    if (csw)
      csw->params(out, "bottleneck");
    else
      sw->params(out, "bottleneck");
    for (int i = 0; i < 4; ++i)
      dec[i].params(out, "dec" + std::to_string(4 - i));
    head.params(out, "head");
    return out;
  }
};

/// Closed-form parameter count for a given configuration; matches
/// CisUNet::named_parameters() tensor-for-tensor.
inline long count_parameters(const ModelConfig& cfg) {
  const auto& C = cfg.stage_channels;
  const long F = cfg.embed_dim, H = cfg.num_heads, M = cfg.window_size;
  const long hidden = std::lround(cfg.mlp_ratio * (double)F);

  auto conv = [](long ci, long co, long k) { return ci * co * k * k * k + co; };
  auto conv_in = [&](long ci, long co, long k) { return conv(ci, co, k) + 2 * co; };

  // Encoder
  long n = conv_in(cfg.in_channels, C[0], 7);  // stem
  long cin = C[0];
  for (int k = 0; k < 4; ++k) {
    const long c = C[(size_t)k];
    n += conv_in(cin, c, 3) + conv_in(c, c, 1);               // down + mix
    n += cfg.stage_depths[(size_t)k] * 2 * conv_in(c, c, 3);  // residual units
    cin = c;
  }

  // Swin block (shared by both variants)
  const long attn = (F * 3 * F + 3 * F) + (F * F + F) +
                    (2 * M - 1) * (2 * M - 1) * (2 * M - 1) * H;
  const long mlp = (F * hidden + hidden) + (hidden * F + F);
  const long swin = 4 * 2 * F + 2 * attn + 2 * mlp;

  n += conv(C[3], F, 1) + swin;  // embedding + swin block
  if (cfg.attention_variant == AttentionVariant::CSW_SA) {
    n += 2 * 8 * F + (8 * F * 2 * F + 2 * F);      // patch merge (LN + reduce)
    n += 2 * F * F * 8 + F;                        // upsampling transposed conv
    n += conv_in(2 * F, 16 * F, 3) + conv_in(16 * F, F, 3);
  } else {
    n += 2 * conv_in(F, F, 3);
  }

  // Decoder
  const long skips[4] = {C[2], C[1], C[0], C[0]};
  for (long sc : skips)
    n += (F * F * 8 + F) + conv_in(F + sc, F, 3) + conv_in(F, F, 3);

  n += conv(F, cfg.num_classes, 1);  // head
  return n;
}

}  // namespace cisunet
