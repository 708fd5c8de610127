#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "cisunet/backbone.hpp"
#include "testutil.hpp"

using namespace cisunet;
using testutil::random_tensor;

namespace {

/// Small configuration for shape/wiring tests (fast to build and run).
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

TEST_CASE("named parameter totals equal the closed-form count", "[backbone]") {
  auto check = [](ModelConfig cfg) {
    for (auto variant : {AttentionVariant::CSW_SA, AttentionVariant::SW_SA}) {
      cfg.attention_variant = variant;
      Rng rng(1);
      CisUNet<float> net;
      net.init(cfg, rng);
      long actual = 0;
      for (auto& [name, v] : net.named_parameters()) actual += v->val().numel();
      CAPTURE(attention_variant_name(variant));
      REQUIRE(actual == count_parameters(cfg));
    }
  };
  check(micro_config());

  ModelConfig odd;
  odd.in_channels = 2;
  odd.num_classes = 7;
  odd.stage_depths = {2, 1, 3, 1};
  odd.stage_channels = {8, 8, 24, 40};
  odd.embed_dim = 12;
  odd.num_heads = 3;
  odd.window_size = 3;
  odd.shift_size = 2;
  odd.mlp_ratio = 3.0;
  check(odd);

  check(preset("tiny"));
}

TEST_CASE("preset parameter counts sit within the published tolerances",
          "[backbone]") {
  // Closed-form counts (validated against real modules in the test above).
  const long tiny = count_parameters(preset("tiny"));
  const long small = count_parameters(preset("small"));
  ModelConfig base = preset("base");
  const long base_csw = count_parameters(base);
  base.attention_variant = AttentionVariant::SW_SA;
  const long base_sw = count_parameters(base);

  // Frozen regression values for this architecture.
  REQUIRE(tiny == 14735193);
  REQUIRE(small == 22316313);
  REQUIRE(base_csw == 77440985);
  REQUIRE(base_sw == 74502617);

  auto within = [](long got, double target, double tol) {
    return std::abs((double)got - target) / target <= tol;
  };
  REQUIRE(within(tiny, 13.921e6, 0.10));
  REQUIRE(within(small, 21.5e6, 0.10));
  REQUIRE(within(base_csw, 75.038e6, 0.10));
  REQUIRE(within(base_sw, 71.789e6, 0.10));
  REQUIRE(within(base_csw - base_sw, 3.249e6, 0.25));
}

TEST_CASE("forward produces per-class logits at input resolution", "[backbone]") {
  Rng rng(3);
  CisUNet<float> net;
  net.init(micro_config(), rng);

  Tensor<float> x({1, 1, 32, 32, 32});
  rng.fill_uniform(x, -1.0, 1.0);
  NoGradGuard ng;
  Var<float> y = net.forward(Var<float>::leaf(std::move(x)));
  REQUIRE(y.val().shape == Shape{1, 3, 32, 32, 32});

  SECTION("anisotropic batch") {
    Tensor<float> x2({2, 1, 16, 32, 48});
    rng.fill_uniform(x2, -1.0, 1.0);
    Var<float> y2 = net.forward(Var<float>::leaf(std::move(x2)));
    REQUIRE(y2.val().shape == Shape{2, 3, 16, 32, 48});
  }
}

TEST_CASE("forward rejects malformed inputs with informative errors",
          "[backbone]") {
  Rng rng(5);
  CisUNet<float> net;
  net.init(micro_config(), rng);

  Tensor<float> bad_dims({1, 1, 24, 32, 32});
  REQUIRE_THROWS_WITH(net.forward(Var<float>::leaf(std::move(bad_dims))),
                      Catch::Matchers::ContainsSubstring("divisible by 16"));
  Tensor<float> bad_ch({1, 2, 32, 32, 32});
  REQUIRE_THROWS_WITH(net.forward(Var<float>::leaf(std::move(bad_ch))),
                      Catch::Matchers::ContainsSubstring("channels"));
  Tensor<float> bad_rank({1, 32, 32, 32});
  REQUIRE_THROWS_WITH(net.forward(Var<float>::leaf(std::move(bad_rank))),
                      Catch::Matchers::ContainsSubstring("5-d"));
}

TEST_CASE("zeroed residual unit is an exact identity", "[backbone]") {
  Rng rng(7);
  ResidualUnit<double> unit;
  unit.init(5, rng);
  unit.conv1.w.val().fill(0.0);
  unit.conv1.b.val().fill(0.0);
  unit.conv2.w.val().fill(0.0);
  unit.conv2.b.val().fill(0.0);
  Tensor<double> x = random_tensor({2, 5, 4, 4, 4}, rng);
  Var<double> y = unit.forward(Var<double>::leaf(x.clone()));
  for (long i = 0; i < x.numel(); ++i)
    REQUIRE(y.val().data()[i] == x.data()[i]);
}

TEST_CASE("zeroed decoder convolutions leave the upsampled features",
          "[backbone]") {
  Rng rng(9);
  DecoderStage<double> dstage;
  dstage.init(4, 6, rng);
  dstage.fuse.conv.w.val().fill(0.0);
  dstage.fuse.conv.b.val().fill(0.0);
  dstage.conv2.w.val().fill(0.0);
  dstage.conv2.b.val().fill(0.0);

  Var<double> x = Var<double>::leaf(random_tensor({1, 4, 3, 3, 3}, rng));
  Var<double> skip = Var<double>::leaf(random_tensor({1, 6, 6, 6, 6}, rng));
  Var<double> up = dstage.up.forward(x);
  Var<double> y = dstage.forward(x, skip);
  REQUIRE(y.val().shape == up.val().shape);
  for (long i = 0; i < up.val().numel(); ++i)
    REQUIRE(y.val().data()[i] == up.val().data()[i]);
}

TEST_CASE("bottleneck probes surface through the network", "[backbone]") {
  Rng rng(11);
  ModelConfig cfg = micro_config();
  for (auto variant : {AttentionVariant::CSW_SA, AttentionVariant::SW_SA}) {
    cfg.attention_variant = variant;
    CisUNet<float> net;
    net.init(cfg, rng);
    Tensor<float> x({1, 1, 32, 32, 32});
    rng.fill_uniform(x, -1.0, 1.0);
    BottleneckActs<float> acts;
    Tensor<float> attn;
    NoGradGuard ng;
    net.forward(Var<float>::leaf(std::move(x)), &acts, &attn);
    REQUIRE(acts.z.shape == Shape{1, 2, 2, 2, 6});
    REQUIRE(acts.zpp.shape == acts.z.shape);
    // 2^3 token grid with M = 2 -> one window; attention (1, heads, 8, 8).
    REQUIRE(attn.shape == Shape{1, 2, 8, 8});
  }
}

TEST_CASE("construction and forward are seed-deterministic", "[backbone]") {
  auto run = [](unsigned long long seed) {
    Rng rng(seed);
    CisUNet<float> net;
    net.init(micro_config(), rng);
    Tensor<float> x({1, 1, 16, 16, 16});
    Rng xr(99);
    xr.fill_uniform(x, -1.0, 1.0);
    NoGradGuard ng;
    return net.forward(Var<float>::leaf(std::move(x))).val().clone();
  };
  Tensor<float> a = run(42), b = run(42), c = run(43);
  long same = 0, diff = 0;
  for (long i = 0; i < a.numel(); ++i) {
    same += a.data()[i] == b.data()[i];
    diff += a.data()[i] != c.data()[i];
  }
  REQUIRE(same == a.numel());
  REQUIRE(diff > 0);
}

TEST_CASE("training-mode backward reaches every parameter", "[backbone]") {
  Rng rng(13);
  CisUNet<double> net;
  net.init(micro_config(), rng);
  // 32^3 keeps the bottleneck grid at 2^3; a 16^3 input would collapse it to
  // a single voxel, where instance norm's output (and gradient) is zero.
  Tensor<double> x({1, 1, 32, 32, 32});
  rng.fill_uniform(x, -1.0, 1.0);
  Tensor<double> proj({1, 3, 32, 32, 32});
  rng.fill_uniform(proj, -1.0, 1.0);
  Var<double> loss =
      mean_all(mul(net.forward(Var<double>::leaf(std::move(x))),
                   Var<double>::leaf(std::move(proj))));
  backward(loss);
  long missing = 0, nonfinite = 0, nonzero_tensors = 0, total = 0;
  for (auto& [name, v] : net.named_parameters()) {
    ++total;
    if (!v->n->grad.defined()) {
      ++missing;
      continue;
    }
    double asum = 0.0;
    for (long i = 0; i < v->n->grad.numel(); ++i) {
      const double g = v->n->grad.data()[i];
      if (!std::isfinite(g)) ++nonfinite;
      asum += std::abs(g);
    }
    nonzero_tensors += asum > 0.0;
  }
  REQUIRE(missing == 0);
  REQUIRE(nonfinite == 0);
  // Nearly all tensors should receive signal; allow a few dead ReLU corners.
  REQUIRE(nonzero_tensors >= total - 3);
}
