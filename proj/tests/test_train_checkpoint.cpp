#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "cisunet/backbone.hpp"
#include "cisunet/checkpoint.hpp"
#include "cisunet/data.hpp"
#include "cisunet/train.hpp"

using namespace cisunet;

namespace {

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

std::filesystem::path fresh_dir(const std::string& tag) {
  auto dir = std::filesystem::temp_directory_path() / ("cisunet_train_" + tag);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

/// Normalized 32-cube phantom as a training case.
TrainCase phantom_case(uint64_t seed) {
  Rng rng(seed);
  auto [img, lbl] = synthetic_phantom(rng, 32, 3);
  TrainCase c;
  c.id = "phantom" + std::to_string(seed);
  c.image = normalize_intensity(img).voxels;
  c.labels = lbl.voxels;
  return c;
}

TrainConfig smoke_config(long iterations) {
  TrainConfig tc;
  tc.learning_rate = 1e-3;
  tc.weight_decay = 1e-5;
  tc.iterations = iterations;
  tc.batch_size = 1;
  tc.patch_size = {32, 32, 32};
  return tc;
}

/// Overwrite bytes at a file offset.
void patch_bytes(const std::filesystem::path& p, std::streamoff off,
                 const void* bytes, size_t n) {
  std::fstream f(p, std::ios::in | std::ios::out | std::ios::binary);
  REQUIRE(f.good());
  f.seekp(off);
  f.write((const char*)bytes, (std::streamsize)n);
  REQUIRE(f.good());
}

}  // namespace

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

TEST_CASE("adamw matches hand-computed steps", "[train]") {
  // With a constant gradient g, bias correction cancels exactly:
  // m_hat = g and v_hat = g^2 on every step, so each update is
  // lr * g / (|g| + eps) regardless of the step index.
  Var<double> p = Var<double>::leaf(Tensor<double>({1}, 1.0), true);
  ParamList<double> params{{"p", &p}};
  AdamW<double> opt;
  opt.lr = 0.1;
  opt.weight_decay = 0.0;
  opt.init(params);

  const double g = 0.5;
  const double upd = 0.5 / (0.5 + 1e-8);  // m_hat / (sqrt(v_hat) + eps)

  p.grad().fill(g);
  opt.step(params);
  REQUIRE(p.val().data()[0] == Catch::Approx(1.0 - 0.1 * upd).margin(1e-14));

  p.grad().fill(g);
  opt.step(params);
  REQUIRE(p.val().data()[0] ==
          Catch::Approx(1.0 - 2 * 0.1 * upd).margin(1e-14));
  REQUIRE(opt.step_count == 2);

  // Internal moments follow the EMA recurrences.
  REQUIRE(opt.m[0].data()[0] == Catch::Approx(0.9 * 0.05 + 0.05).margin(1e-15));
  REQUIRE(opt.v[0].data()[0] ==
          Catch::Approx(0.999 * 0.00025 + 0.00025).margin(1e-15));
}

TEST_CASE("adamw weight decay is decoupled", "[train]") {
  // Zero gradient: the adaptive term is 0/(0+eps) = 0, so the only movement
  // is the multiplicative decay p <- p(1 - lr*wd). Moments must stay zero —
  // decay folded into the gradient would contaminate them.
  Var<double> p = Var<double>::leaf(Tensor<double>({2}, 4.0), true);
  ParamList<double> params{{"p", &p}};
  AdamW<double> opt;
  opt.lr = 0.1;
  opt.weight_decay = 0.01;
  opt.init(params);

  p.grad().fill(0.0);
  opt.step(params);
  REQUIRE(p.val().data()[0] == Catch::Approx(4.0 * (1.0 - 0.001)).margin(1e-15));
  p.grad().fill(0.0);
  opt.step(params);
  REQUIRE(p.val().data()[1] ==
          Catch::Approx(4.0 * (1.0 - 0.001) * (1.0 - 0.001)).margin(1e-15));
  REQUIRE(opt.m[0].data()[0] == 0.0);
  REQUIRE(opt.v[0].data()[0] == 0.0);
}

TEST_CASE("adamw tracks a scalar reference over a random stream", "[train]") {
  Rng rng(31);
  const long n = 5;
  Var<double> p = Var<double>::leaf(Tensor<double>({n}), true);
  rng.fill_uniform(p.val(), -1.0, 1.0);
  std::vector<double> w(p.val().data(), p.val().data() + n);
  std::vector<double> m(n, 0.0), v(n, 0.0);

  ParamList<double> params{{"p", &p}};
  AdamW<double> opt;
  opt.lr = 3e-3;
  opt.weight_decay = 0.02;
  opt.init(params);

  for (int step = 1; step <= 10; ++step) {
    Tensor<double> g({n});
    rng.fill_normal(g, 0.0, 1.0);
    std::memcpy(p.grad().data(), g.data(), sizeof(double) * n);
    opt.step(params);

    const double bc1 = 1.0 - std::pow(0.9, step);
    const double bc2 = 1.0 - std::pow(0.999, step);
    for (long i = 0; i < n; ++i) {
      m[i] = 0.9 * m[i] + 0.1 * g.data()[i];
      v[i] = 0.999 * v[i] + 0.001 * g.data()[i] * g.data()[i];
      const double update = (m[i] / bc1) / (std::sqrt(v[i] / bc2) + 1e-8);
      w[i] -= opt.lr * (update + opt.weight_decay * w[i]);
    }
  }
  for (long i = 0; i < n; ++i)
    REQUIRE(p.val().data()[i] == Catch::Approx(w[i]).margin(1e-12));
}

TEST_CASE("adamw step before init is rejected", "[train]") {
  Var<float> p = Var<float>::leaf(Tensor<float>({1}, 1.0f), true);
  ParamList<float> params{{"p", &p}};
  AdamW<float> opt;
  REQUIRE_THROWS_AS(opt.step(params), std::logic_error);
}

// ---------------------------------------------------------------------------
// Foreground Dice helper
// ---------------------------------------------------------------------------

TEST_CASE("foreground_dsc averages per-class dice over reference classes",
          "[train]") {
  Tensor<uint8_t> gt({2, 2, 1}, 0);
  gt.at({0, 0, 0}) = 1;
  gt.at({0, 1, 0}) = 1;
  gt.at({1, 0, 0}) = 2;

  // Prediction nails class 1, misses class 2 entirely.
  Tensor<uint8_t> pred({2, 2, 1}, 0);
  pred.at({0, 0, 0}) = 1;
  pred.at({0, 1, 0}) = 1;
  REQUIRE(foreground_dsc(pred, gt) == Catch::Approx(0.5).margin(1e-12));

  // Background-only reference: undefined.
  Tensor<uint8_t> empty({2, 2, 1}, 0);
  REQUIRE(std::isnan(foreground_dsc(pred, empty)));

  // Classes predicted but absent from the reference are ignored.
  Tensor<uint8_t> gt1({2, 2, 1}, 0);
  gt1.at({0, 0, 0}) = 1;
  Tensor<uint8_t> pred1 = gt1.clone();
  pred1.at({1, 1, 0}) = 2;
  REQUIRE(foreground_dsc(pred1, gt1) == Catch::Approx(1.0).margin(1e-12));
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

TEST_CASE("training reduces the loss and is seed-deterministic", "[train]") {
  const TrainCase cse = phantom_case(5);
  const TrainConfig tc = smoke_config(8);
  const DataConfig dc;

  auto run = [&]() {
    Rng init_rng(42);
    CisUNet<float> net;
    net.init(micro_config(), init_rng);
    AdamW<float> opt;
    Rng data_rng(7);
    return train_loop(net, opt, tc, dc, {cse}, nullptr, data_rng);
  };

  auto log = run();
  REQUIRE(log.size() == 8);
  for (const auto& e : log) REQUIRE(std::isfinite(e.loss));
  double later_min = log[1].loss;
  for (size_t i = 2; i < log.size(); ++i)
    later_min = std::min(later_min, log[i].loss);
  REQUIRE(later_min < log[0].loss);
  REQUIRE(log.back().iteration == 8);
  REQUIRE(log.back().seconds >= log.front().seconds);

  auto log2 = run();
  for (size_t i = 0; i < log.size(); ++i)
    REQUIRE(log2[i].loss == log[i].loss);  // bit-exact reproducibility
}

TEST_CASE("validation and checkpoint cadence", "[train]") {
  const TrainCase cse = phantom_case(9);
  const TrainConfig tc = smoke_config(4);
  const DataConfig dc;

  Rng init_rng(1);
  CisUNet<float> net;
  net.init(micro_config(), init_rng);
  AdamW<float> opt;
  Rng data_rng(2);

  TrainOptions opts;
  opts.val_every = 2;
  opts.checkpoint_every = 3;
  std::vector<long> ckpt_iters;
  opts.on_checkpoint = [&](long it) { ckpt_iters.push_back(it); };

  auto log = train_loop(net, opt, tc, dc, {cse}, &cse, data_rng, opts);
  REQUIRE(log.size() == 4);
  REQUIRE(std::isnan(log[0].val_dsc));
  REQUIRE(std::isnan(log[2].val_dsc));
  for (size_t i : {size_t(1), size_t(3)}) {
    REQUIRE(std::isfinite(log[i].val_dsc));
    REQUIRE(log[i].val_dsc >= 0.0);
    REQUIRE(log[i].val_dsc <= 1.0);
  }
  REQUIRE(ckpt_iters == std::vector<long>{3, 4});
}

TEST_CASE("training aborts on non-finite loss", "[train]") {
  const TrainCase cse = phantom_case(3);
  const TrainConfig tc = smoke_config(2);
  const DataConfig dc;

  Rng init_rng(4);
  CisUNet<float> net;
  net.init(micro_config(), init_rng);
  // Poison the head bias: it feeds the logits directly, with no normalization
  // or rectifier behind it to absorb the resulting NaN/inf.
  auto params = net.named_parameters();
  params.back().second->val().data()[0] = std::numeric_limits<float>::infinity();

  AdamW<float> opt;
  Rng data_rng(5);
  REQUIRE_THROWS_WITH(train_loop(net, opt, tc, dc, {cse}, nullptr, data_rng),
                      Catch::Matchers::ContainsSubstring("non-finite"));
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

TEST_CASE("checkpoint round-trip restores weights, moments, and rng",
          "[train]") {
  auto dir = fresh_dir("roundtrip");
  const auto path = (dir / "model.ckpt").string();

  Configs cfgs;
  cfgs.model = micro_config();
  cfgs.train = smoke_config(2);

  // Train two iterations so optimizer moments are nonzero.
  const TrainCase cse = phantom_case(17);
  Rng init_rng(6);
  CisUNet<float> net;
  net.init(cfgs.model, init_rng);
  AdamW<float> opt;
  Rng data_rng(8);
  train_loop(net, opt, cfgs.train, cfgs.data, {cse}, nullptr, data_rng);

  auto params = net.named_parameters();
  Tensor<float> probe({1, 1, 32, 32, 32});
  Rng probe_rng(99);
  probe_rng.fill_uniform(probe, 0.0f, 1.0f);
  Tensor<float> y0;
  {
    NoGradGuard guard;
    y0 = net.forward(Var<float>::leaf(probe)).val();
  }

  save_checkpoint(path, cfgs, 2, params, &opt, &data_rng);
  REQUIRE(std::filesystem::file_size(path) > 0);

  // Perturb everything the checkpoint should restore.
  for (auto& [name, p] : params)
    for (long i = 0; i < p->val().numel(); ++i) p->val().data()[i] += 0.125f;
  AdamW<float> opt2;
  Rng rng2(12345);

  CheckpointInfo info = load_checkpoint(path, params, &opt2, &rng2);
  REQUIRE(info.iteration == 2);
  REQUIRE(info.has_optimizer);
  REQUIRE(info.has_rng);
  REQUIRE(info.configs == cfgs);

  Tensor<float> y1;
  {
    NoGradGuard guard;
    y1 = net.forward(Var<float>::leaf(probe)).val();
  }
  REQUIRE(y1.shape == y0.shape);
  REQUIRE(std::memcmp(y1.data(), y0.data(),
                      sizeof(float) * (size_t)y0.numel()) == 0);

  REQUIRE(opt2.step_count == opt.step_count);
  REQUIRE(opt2.m.size() == opt.m.size());
  for (size_t i = 0; i < opt.m.size(); ++i) {
    REQUIRE(std::memcmp(opt2.m[i].data(), opt.m[i].data(),
                        sizeof(float) * (size_t)opt.m[i].numel()) == 0);
    REQUIRE(std::memcmp(opt2.v[i].data(), opt.v[i].data(),
                        sizeof(float) * (size_t)opt.v[i].numel()) == 0);
  }
  REQUIRE(rng2.state() == data_rng.state());

  // Header-only peek agrees without constructing a model.
  CheckpointInfo peek = peek_checkpoint(path);
  REQUIRE(peek.iteration == 2);
  REQUIRE(peek.configs == cfgs);

  std::filesystem::remove_all(dir);
}

TEST_CASE("training resumes from a checkpoint bit-exactly", "[train]") {
  auto dir = fresh_dir("resume");
  const auto path = (dir / "mid.ckpt").string();

  const TrainCase cse = phantom_case(23);
  const DataConfig dc;
  Configs cfgs;
  cfgs.model = micro_config();

  // Uninterrupted run: six iterations.
  cfgs.train = smoke_config(6);
  Rng init_a(42);
  CisUNet<float> net_a;
  net_a.init(cfgs.model, init_a);
  AdamW<float> opt_a;
  Rng rng_a(11);
  auto log_a = train_loop(net_a, opt_a, cfgs.train, dc, {cse}, nullptr, rng_a);

  // Interrupted run: three iterations, checkpoint, then three more in a
  // freshly built (differently seeded) model restored from the file.
  cfgs.train = smoke_config(3);
  Rng init_b(42);
  CisUNet<float> net_b;
  net_b.init(cfgs.model, init_b);
  AdamW<float> opt_b;
  Rng rng_b(11);
  auto log_b1 = train_loop(net_b, opt_b, cfgs.train, dc, {cse}, nullptr, rng_b);
  for (int i = 0; i < 3; ++i) REQUIRE(log_b1[(size_t)i].loss == log_a[(size_t)i].loss);
  save_checkpoint(path, cfgs, 3, net_b.named_parameters(), &opt_b, &rng_b);

  Rng init_c(999);  // deliberately different: load must overwrite all weights
  CisUNet<float> net_c;
  net_c.init(cfgs.model, init_c);
  AdamW<float> opt_c;
  Rng rng_c(0);
  load_checkpoint(path, net_c.named_parameters(), &opt_c, &rng_c);
  auto log_b2 = train_loop(net_c, opt_c, cfgs.train, dc, {cse}, nullptr, rng_c);

  for (int i = 0; i < 3; ++i)
    REQUIRE(log_b2[(size_t)i].loss == log_a[(size_t)(3 + i)].loss);

  std::filesystem::remove_all(dir);
}

TEST_CASE("checkpoint rejects corrupt or mismatched files", "[train]") {
  auto dir = fresh_dir("corrupt");

  Configs cfgs;
  cfgs.model = micro_config();

  Var<float> w = Var<float>::leaf(Tensor<float>({3, 2}, 1.5f), true);
  ParamList<float> params{{"w", &w}};

  SECTION("missing file") {
    REQUIRE_THROWS_WITH(
        load_checkpoint((dir / "nope.ckpt").string(), params, nullptr, nullptr),
        Catch::Matchers::ContainsSubstring("cannot open"));
    REQUIRE_THROWS_AS(peek_checkpoint((dir / "nope.ckpt").string()),
                      std::runtime_error);
  }

  SECTION("bad magic") {
    const auto p = dir / "magic.ckpt";
    save_checkpoint(p.string(), cfgs, 1, params, nullptr, nullptr);
    const char junk = 'X';
    patch_bytes(p, 0, &junk, 1);
    REQUIRE_THROWS_WITH(load_checkpoint(p.string(), params, nullptr, nullptr),
                        Catch::Matchers::ContainsSubstring("bad magic"));
  }

  SECTION("unsupported version") {
    const auto p = dir / "version.ckpt";
    save_checkpoint(p.string(), cfgs, 1, params, nullptr, nullptr);
    const uint32_t v = 77;
    patch_bytes(p, 8, &v, sizeof v);
    REQUIRE_THROWS_WITH(load_checkpoint(p.string(), params, nullptr, nullptr),
                        Catch::Matchers::ContainsSubstring("version"));
  }

  SECTION("truncated payload") {
    const auto p = dir / "trunc.ckpt";
    save_checkpoint(p.string(), cfgs, 1, params, nullptr, nullptr);
    const auto full = std::filesystem::file_size(p);
    std::filesystem::resize_file(p, full - 8);
    REQUIRE_THROWS_WITH(load_checkpoint(p.string(), params, nullptr, nullptr),
                        Catch::Matchers::ContainsSubstring("truncated"));
  }

  SECTION("dtype mismatch") {
    const auto p = dir / "dtype.ckpt";
    Var<double> wd = Var<double>::leaf(Tensor<double>({3, 2}, 1.5), true);
    ParamList<double> dparams{{"w", &wd}};
    save_checkpoint(p.string(), cfgs, 1, dparams, nullptr, nullptr);
    REQUIRE_THROWS_WITH(load_checkpoint(p.string(), params, nullptr, nullptr),
                        Catch::Matchers::ContainsSubstring("dtype mismatch"));
  }

  SECTION("parameter name mismatch") {
    const auto p = dir / "name.ckpt";
    save_checkpoint(p.string(), cfgs, 1, params, nullptr, nullptr);
    Var<float> other = Var<float>::leaf(Tensor<float>({3, 2}, 0.0f), true);
    ParamList<float> renamed{{"different", &other}};
    REQUIRE_THROWS_WITH(load_checkpoint(p.string(), renamed, nullptr, nullptr),
                        Catch::Matchers::ContainsSubstring("name mismatch"));
  }

  SECTION("parameter shape mismatch") {
    const auto p = dir / "shape.ckpt";
    save_checkpoint(p.string(), cfgs, 1, params, nullptr, nullptr);
    Var<float> other = Var<float>::leaf(Tensor<float>({2, 3}, 0.0f), true);
    ParamList<float> reshaped{{"w", &other}};
    REQUIRE_THROWS_WITH(load_checkpoint(p.string(), reshaped, nullptr, nullptr),
                        Catch::Matchers::ContainsSubstring("shape mismatch"));
  }

  SECTION("parameter count mismatch") {
    const auto p = dir / "count.ckpt";
    save_checkpoint(p.string(), cfgs, 1, params, nullptr, nullptr);
    Var<float> extra = Var<float>::leaf(Tensor<float>({1}, 0.0f), true);
    ParamList<float> more = params;
    more.push_back({"extra", &extra});
    REQUIRE_THROWS_WITH(load_checkpoint(p.string(), more, nullptr, nullptr),
                        Catch::Matchers::ContainsSubstring("count mismatch"));
  }

  std::filesystem::remove_all(dir);
}
