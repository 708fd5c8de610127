#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <cstring>
#include <set>

#include "cisunet/backbone.hpp"
#include "cisunet/data.hpp"
#include "cisunet/inference.hpp"

using namespace cisunet;

namespace {

/// Fake model: logit for class c at a voxel with input value v is (c+1)·v.
/// Depends only on the voxel's own value, so any blend of overlapping windows
/// must reproduce it exactly — a sharp probe of origin/offset bookkeeping.
struct PointwiseModel {
  long classes;
  Tensor<float> operator()(const Tensor<float>& patch) const {
    const long px = patch.dim(2), py = patch.dim(3), pz = patch.dim(4);
    Tensor<float> out({1, classes, px, py, pz});
    const long sp = px * py * pz;
    for (long c = 0; c < classes; ++c)
      for (long i = 0; i < sp; ++i)
        out.data()[c * sp + i] = (float)(c + 1) * patch.data()[i];
    return out;
  }
};

ModelConfig micro_config() {
  ModelConfig cfg;
  cfg.in_channels = 1;
  cfg.num_classes = 3;
  cfg.stage_depths = {1, 1, 1, 1};
  cfg.stage_channels = {4, 6, 8, 10};
  cfg.embed_dim = 6;
  cfg.num_heads = 2;
  cfg.window_size = 2;
  cfg.shift_size = 1;
  cfg.mlp_ratio = 2.0;
  return cfg;
}

}  // namespace

TEST_CASE("window origins cover the volume with clipped final windows",
          "[inference]") {
  SECTION("the 160/128 case yields origins {0,32}") {
    REQUIRE(window_origins_1d(160, 128, 0.5) == std::vector<long>{0, 32});
  }
  SECTION("volume equal to the patch is a single window") {
    REQUIRE(window_origins_1d(128, 128, 0.5) == std::vector<long>{0});
    REQUIRE(window_origins_1d(128, 128, 0.0) == std::vector<long>{0});
  }
  SECTION("coverage, ordering, and bounds over many sizes") {
    for (long dim : {32, 33, 47, 64, 100, 160, 200}) {
      for (double ov : {0.0, 0.25, 0.5, 0.75}) {
        auto org = window_origins_1d(dim, 32, ov);
        REQUIRE(org.front() == 0);
        REQUIRE(org.back() == dim - 32);
        std::vector<char> covered((size_t)dim, 0);
        for (size_t i = 0; i < org.size(); ++i) {
          REQUIRE(org[i] + 32 <= dim);
          if (i) REQUIRE(org[i] > org[i - 1]);
          for (long p = org[i]; p < org[i] + 32; ++p) covered[(size_t)p] = 1;
        }
        REQUIRE(std::count(covered.begin(), covered.end(), 1) == dim);
      }
    }
  }
  SECTION("a 160^3 volume at overlap 0.5 uses 8 windows") {
    SlidingPlan plan({160, 160, 160}, {128, 128, 128}, 0.5);
    REQUIRE(plan.origins.size() == 8);
  }
  SECTION("invalid arguments") {
    REQUIRE_THROWS_WITH(window_origins_1d(16, 32, 0.5),
                        Catch::Matchers::ContainsSubstring("dim >= patch"));
    REQUIRE_THROWS_WITH(window_origins_1d(64, 32, 1.0),
                        Catch::Matchers::ContainsSubstring("overlap"));
  }
}

TEST_CASE("blend weights are positive and normalize to one", "[inference]") {
  // A constant-one model must yield exactly one everywhere after blending:
  // sum_w(w·1)/sum_w(w) == 1 at every voxel regardless of window layout.
  Tensor<float> vol({40, 36, 33}, 0.0f);
  auto ones = [](const Tensor<float>& patch) {
    return Tensor<float>({1, 2, patch.dim(2), patch.dim(3), patch.dim(4)},
                         1.0f);
  };
  Tensor<float> logits = sliding_window_logits(vol, 2, {16, 16, 16}, 0.5, ones);
  REQUIRE(logits.shape == Shape{1, 2, 40, 36, 33});
  for (long i = 0; i < logits.numel(); ++i)
    REQUIRE(std::abs(logits.data()[i] - 1.0f) < 1e-6);

  SlidingPlan plan({40, 36, 33}, {16, 16, 16}, 0.5);
  for (long i = 0; i < 16; ++i)
    for (long j = 0; j < 16; ++j)
      for (long k = 0; k < 16; ++k) REQUIRE(plan.blend_weight(i, j, k) > 0.0f);
}

TEST_CASE("blending of a pointwise model reproduces it exactly", "[inference]") {
  Rng rng(131);
  Tensor<float> vol({48, 41, 37});
  rng.fill_uniform(vol, -1.0, 1.0);
  PointwiseModel model{3};
  Tensor<float> logits =
      sliding_window_logits(vol, 3, {32, 32, 32}, 0.5, model);
  REQUIRE(logits.shape == Shape{1, 3, 48, 41, 37});
  const long sp = 48L * 41 * 37;
  for (long c = 0; c < 3; ++c)
    for (long i = 0; i < sp; ++i)
      REQUIRE(std::abs(logits.data()[c * sp + i] -
                       (float)(c + 1) * vol.data()[i]) < 1e-5);
}

TEST_CASE("volumes smaller than the patch are padded and cropped back",
          "[inference]") {
  Rng rng(137);
  Tensor<float> vol({20, 20, 20});
  rng.fill_uniform(vol, 0.0, 1.0);
  PointwiseModel model{2};
  Tensor<float> logits =
      sliding_window_logits(vol, 2, {32, 32, 32}, 0.5, model);
  REQUIRE(logits.shape == Shape{1, 2, 20, 20, 20});
  const long sp = 20L * 20 * 20;
  for (long i = 0; i < sp; ++i)
    REQUIRE(std::abs(logits.data()[i] - vol.data()[i]) < 1e-6);
}

TEST_CASE("degenerate plan equals a direct forward of the real model",
          "[inference]") {
  Rng rng(139);
  CisUNet<float> net;
  net.init(micro_config(), rng);

  Tensor<float> vol({32, 32, 32});
  rng.fill_uniform(vol, 0.0, 1.0);

  NoGradGuard guard;
  auto fwd = [&](const Tensor<float>& patch) {
    return net.forward(Var<float>::leaf(patch.clone())).val();
  };
  Tensor<float> swept = sliding_window_logits(vol, 3, {32, 32, 32}, 0.5, fwd);
  Tensor<float> direct =
      net.forward(Var<float>::leaf(vol.reshaped({1, 1, 32, 32, 32}).clone()))
          .val();
  REQUIRE(swept.shape == direct.shape);
  for (long i = 0; i < swept.numel(); ++i)
    REQUIRE(std::abs(swept.data()[i] - direct.data()[i]) < 1e-6);

  SECTION("rerun is bit-identical") {
    Tensor<float> again = sliding_window_logits(vol, 3, {32, 32, 32}, 0.5, fwd);
    REQUIRE(std::memcmp(again.data(), swept.data(),
                        sizeof(float) * (size_t)swept.numel()) == 0);
  }
}

TEST_CASE("model channel mismatch is reported", "[inference]") {
  Tensor<float> vol({16, 16, 16}, 0.0f);
  PointwiseModel model{4};
  REQUIRE_THROWS_WITH(
      sliding_window_logits(vol, 3, {16, 16, 16}, 0.5, model),
      Catch::Matchers::ContainsSubstring("expected (1,3,16,16,16)"));
}

TEST_CASE("argmax labeling with lowest-id tie-break", "[inference]") {
  Geometry g;
  SECTION("one-hot logits pick the hot class") {
    Tensor<float> logits({1, 3, 2, 2, 2}, 0.0f);
    const long sp = 8;
    for (long i = 0; i < sp; ++i) logits.data()[(i % 3) * sp + i] = 5.0f;
    LabelVolume lv = labels_from_logits(logits, g);
    for (long i = 0; i < sp; ++i)
      REQUIRE(lv.voxels.data()[i] == (uint8_t)(i % 3));
  }
  SECTION("exact ties resolve to the lower id") {
    Tensor<float> logits({1, 4, 1, 1, 2}, 1.25f);  // all classes tied
    LabelVolume lv = labels_from_logits(logits, g);
    REQUIRE(lv.voxels.data()[0] == 0);
    logits.data()[0] = -1.0f;  // voxel 0: classes 1..3 still tied
    lv = labels_from_logits(logits, g);
    REQUIRE(lv.voxels.data()[0] == 1);
  }
  SECTION("adding a constant per voxel never changes the label") {
    Rng rng(149);
    Tensor<float> logits({1, 5, 3, 3, 3});
    rng.fill_uniform(logits, -2.0, 2.0);
    LabelVolume a = labels_from_logits(logits, g);
    const long sp = 27;
    for (long v = 0; v < sp; ++v)
      for (long c = 0; c < 5; ++c) logits.data()[c * sp + v] += 0.37f * (float)v;
    LabelVolume b = labels_from_logits(logits, g);
    REQUIRE(std::memcmp(a.voxels.data(), b.voxels.data(), (size_t)sp) == 0);
  }
  SECTION("4-d logits are accepted too") {
    Tensor<float> logits({2, 2, 2, 2}, 0.0f);
    REQUIRE(labels_from_logits(logits, g).voxels.shape == Shape{2, 2, 2});
  }
}

TEST_CASE("geometry restoration inverts the preprocessing resample",
          "[inference]") {
  SECTION("identity when already at the target spacing") {
    Rng rng(151);
    LabelVolume lv;
    lv.voxels = Tensor<uint8_t>({9, 8, 7});
    for (long i = 0; i < lv.voxels.numel(); ++i)
      lv.voxels.data()[i] = (uint8_t)rng.randint(0, 4);
    lv.geom.spacing = {1.5, 1.5, 1.5};
    LabelVolume r = restore_geometry(lv, {9, 8, 7}, lv.geom);
    REQUIRE(std::memcmp(r.voxels.data(), lv.voxels.data(),
                        (size_t)lv.voxels.numel()) == 0);
  }
  SECTION("dims match the original grid and labels never grow") {
    Rng rng(157);
    LabelVolume orig;
    orig.voxels = Tensor<uint8_t>({10, 12, 14});
    for (long i = 0; i < orig.voxels.numel(); ++i)
      orig.voxels.data()[i] = (uint8_t)(rng.randint(0, 3) == 0 ? 5 : 0);
    orig.geom.spacing = {3.0, 2.0, 1.0};
    LabelVolume resampled = resample_labels(orig, 1.5);
    LabelVolume back =
        restore_geometry(resampled, orig.voxels.shape, orig.geom);
    REQUIRE(back.voxels.shape == orig.voxels.shape);
    REQUIRE(back.geom.spacing == orig.geom.spacing);
    std::set<uint8_t> in, out;
    for (long i = 0; i < resampled.voxels.numel(); ++i)
      in.insert(resampled.voxels.data()[i]);
    for (long i = 0; i < back.voxels.numel(); ++i)
      out.insert(back.voxels.data()[i]);
    for (uint8_t c : out) REQUIRE(in.count(c) == 1);
  }
  SECTION("nearest-neighbor mapping matches the direct oracle") {
    LabelVolume lv;
    lv.voxels = Tensor<uint8_t>({6, 6, 6});
    for (long i = 0; i < lv.voxels.numel(); ++i)
      lv.voxels.data()[i] = (uint8_t)(i % 7);
    lv.geom.spacing = {1.5, 1.5, 1.5};
    Geometry og;
    og.spacing = {0.8, 1.1, 2.3};
    LabelVolume r = restore_geometry(lv, {8, 7, 4}, og);
    for (long i = 0; i < 8; ++i)
      for (long j = 0; j < 7; ++j)
        for (long k = 0; k < 4; ++k) {
          const long x = std::clamp(std::lround((double)i * 0.8 / 1.5), 0L, 5L);
          const long y = std::clamp(std::lround((double)j * 1.1 / 1.5), 0L, 5L);
          const long z = std::clamp(std::lround((double)k * 2.3 / 1.5), 0L, 5L);
          REQUIRE(r.voxels.at({i, j, k}) == lv.voxels.at({x, y, z}));
        }
  }
}
