#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "cisunet/checkpoint.hpp"
#include "cisunet/nifti.hpp"
#include "cisunet/train.hpp"

using namespace cisunet;
namespace fs = std::filesystem;

namespace {

// ---------------------------------------------------------------------------
// Shared option plumbing
// ---------------------------------------------------------------------------

struct ModelFlags {
  std::string config_path;
  std::string preset_name;
  std::string attention;
  long classes = 0;  // 0: keep configured value
  long seed = -1;    // <0: keep configured value
};

void add_model_flags(CLI::App* cmd, ModelFlags& f) {
  cmd->add_option("--config", f.config_path,
                  "config file (one `key = value` per line)")
      ->check(CLI::ExistingFile);
  cmd->add_option("--preset", f.preset_name, "architecture preset")
      ->check(CLI::IsMember({"tiny", "small", "base"}));
  cmd->add_option("--attention", f.attention, "bottleneck attention variant")
      ->check(CLI::IsMember({"csw_sa", "sw_sa"}));
  cmd->add_option("--classes", f.classes,
                  "number of classes including background");
  cmd->add_option("--seed", f.seed, "seed for weight init and patch sampling");
}

/// Precedence: defaults < --config < --preset < remaining flags. The preset
/// replaces the architecture scale (depths/channels) but keeps channel count,
/// class count, and attention variant from the config so flags can adjust
/// them afterwards.
Configs resolve(const ModelFlags& f) {
  Configs c;
  if (!f.config_path.empty()) c = load_config(f.config_path);
  if (!f.preset_name.empty()) {
    ModelConfig p = preset(f.preset_name);
    p.in_channels = c.model.in_channels;
    p.num_classes = c.model.num_classes;
    p.attention_variant = c.model.attention_variant;
    c.model = p;
  }
  if (!f.attention.empty())
    c.model.attention_variant = parse_attention_variant(f.attention);
  if (f.classes > 0) c.model.num_classes = f.classes;
  if (f.seed >= 0) c.train.rng_seed = f.seed;
  validate(c);
  return c;
}

std::string with_commas(long v) {
  std::string s = std::to_string(v);
  for (long i = (long)s.size() - 3; i > 0; i -= 3) s.insert((size_t)i, ",");
  return s;
}

std::vector<std::string> class_names_for(long num_classes) {
  if (num_classes == kAortaNumClasses) return aorta_label_names();
  std::vector<std::string> names{"Background"};
  for (long i = 1; i < num_classes; ++i)
    names.push_back("class" + std::to_string(i));
  return names;
}

void check_label_range(const Tensor<uint8_t>& lbl, long num_classes,
                       const std::string& id) {
  for (long i = 0; i < lbl.numel(); ++i)
    if ((long)lbl.data()[i] >= num_classes)
      throw std::runtime_error(
          "case " + id + ": label value " + std::to_string(lbl.data()[i]) +
          " out of range for " + std::to_string(num_classes) + " classes");
}

/// Read one dataset case and run the training-side preprocessing: resample to
/// the target spacing, window intensities to [0,1].
TrainCase load_case(const DatasetCase& dc, const DataConfig& data,
                    long num_classes) {
  ImageVolume img = nifti::read_image(dc.image_path);
  LabelVolume lbl = nifti::read_labels(dc.label_path);
  if (img.voxels.shape != lbl.voxels.shape)
    throw std::runtime_error("case " + dc.id + ": image " +
                             shape_str(img.voxels.shape) + " vs labels " +
                             shape_str(lbl.voxels.shape));
  TrainCase c;
  c.id = dc.id;
  c.image = normalize_intensity(resample_image(img, data.target_spacing),
                                data.intensity_window)
                .voxels;
  c.labels = resample_labels(lbl, data.target_spacing).voxels;
  check_label_range(c.labels, num_classes, dc.id);
  return c;
}

/// Build the network and load checkpoint weights (no optimizer/rng state).
Configs load_model(const std::string& ckpt_path, CisUNet<float>& net) {
  CheckpointInfo info = peek_checkpoint(ckpt_path);
  validate(info.configs);
  Rng rng(0);  // init values are overwritten by the load
  net.init(info.configs.model, rng);
  auto params = net.named_parameters();
  load_checkpoint(ckpt_path, params);
  return info.configs;
}

/// Whole-volume prediction on the original grid of `img`.
LabelVolume predict_volume(const CisUNet<float>& net, const Configs& c,
                           const ImageVolume& img) {
  ImageVolume norm = normalize_intensity(
      resample_image(img, c.data.target_spacing), c.data.intensity_window);
  Tensor<float> logits = sliding_window_logits<float>(
      norm.voxels, c.model.num_classes, c.train.patch_size, 0.5,
      [&](const Tensor<float>& window) {
        NoGradGuard guard;
        return net.forward(Var<float>::leaf(window)).val();
      });
  LabelVolume pred = labels_from_logits(logits, norm.geom);
  return restore_geometry(pred, img.voxels.shape, img.geom);
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

int cmd_info(const ModelFlags& f) {
  Configs c = resolve(f);
  Rng rng(0);
  CisUNet<float> net;
  net.init(c.model, rng);

  std::printf("variant          %s\n",
              f.preset_name.empty() ? "custom" : f.preset_name.c_str());
  std::printf("attention        %s\n",
              attention_variant_name(c.model.attention_variant));
  std::printf("stage depths     %ld,%ld,%ld,%ld\n", c.model.stage_depths[0],
              c.model.stage_depths[1], c.model.stage_depths[2],
              c.model.stage_depths[3]);
  std::printf("stage channels   %ld,%ld,%ld,%ld\n", c.model.stage_channels[0],
              c.model.stage_channels[1], c.model.stage_channels[2],
              c.model.stage_channels[3]);
  std::printf("embed dim        %ld\n", c.model.embed_dim);
  std::printf("window / shift   %ld / %ld\n", c.model.window_size,
              c.model.shift_size);
  std::printf("heads            %ld\n", c.model.num_heads);
  std::printf("classes          %ld\n", c.model.num_classes);
  std::printf("parameters\n");

  // Group tensors by module prefix, preserving construction order.
  std::vector<std::pair<std::string, long>> groups;
  long total = 0;
  for (const auto& [name, p] : net.named_parameters()) {
    const std::string prefix = name.substr(0, name.find('.'));
    if (groups.empty() || groups.back().first != prefix)
      groups.push_back({prefix, 0});
    groups.back().second += p->val().numel();
    total += p->val().numel();
  }
  for (const auto& [prefix, n] : groups)
    std::printf("  %-12s %14s\n", prefix.c_str(), with_commas(n).c_str());
  std::printf("  %-12s %14s\n", "total", with_commas(total).c_str());

  if (total != count_parameters(c.model))
    throw std::logic_error("parameter accounting mismatch: counted " +
                           std::to_string(total) + ", closed form " +
                           std::to_string(count_parameters(c.model)));
  return 0;
}

int cmd_gen_synth(const std::string& out_dir, long count, long size,
                  long classes, long seed) {
  auto cases = generate_dataset(out_dir, count, size, classes, (uint64_t)seed);
  std::printf("wrote %zu cases (%ld^3 voxels, %ld classes) under %s\n",
              cases.size(), size, classes, out_dir.c_str());
  return 0;
}

int cmd_train(const ModelFlags& f, const std::string& data_dir,
              const std::string& out_dir, long val_every, long ckpt_every,
              const std::string& resume_path) {
  Configs c = resolve(f);

  std::vector<TrainCase> cases;
  for (const auto& dc : list_dataset(data_dir, true))
    cases.push_back(load_case(dc, c.data, c.model.num_classes));
  std::printf("loaded %zu cases from %s\n", cases.size(), data_dir.c_str());

  Rng rng((uint64_t)c.train.rng_seed);
  CisUNet<float> net;
  net.init(c.model, rng);
  AdamW<float> opt;
  auto params = net.named_parameters();

  long start_iter = 0;
  if (!resume_path.empty()) {
    CheckpointInfo info = load_checkpoint(resume_path, params, &opt, &rng);
    if (!(info.configs.model == c.model))
      throw std::runtime_error(
          "resume: checkpoint architecture differs from the requested config");
    start_iter = info.iteration;
    std::printf("resumed from %s at iteration %ld\n", resume_path.c_str(),
                start_iter);
  }

  fs::create_directories(out_dir);
  save_config(c, (fs::path(out_dir) / "config.cfg").string());
  const std::string ckpt_path = (fs::path(out_dir) / "model.ckpt").string();

  TrainOptions topts;
  topts.val_every = val_every;
  topts.checkpoint_every = ckpt_every;
  topts.progress = &std::cout;
  topts.on_checkpoint = [&](long it) {
    save_checkpoint(ckpt_path, c, start_iter + it, params, &opt, &rng);
  };

  // The first case doubles as the validation volume for the periodic DSC log.
  auto log = train_loop(net, opt, c.train, c.data, cases, &cases[0], rng, topts);

  std::ofstream lf(fs::path(out_dir) / "train_log.tsv");
  lf << "iteration\tloss\tval_dsc\tseconds\n";
  for (const auto& e : log) {
    char row[128];
    if (std::isnan(e.val_dsc))
      std::snprintf(row, sizeof row, "%ld\t%.6f\t-\t%.3f",
                    start_iter + e.iteration, e.loss, e.seconds);
    else
      std::snprintf(row, sizeof row, "%ld\t%.6f\t%.4f\t%.3f",
                    start_iter + e.iteration, e.loss, e.val_dsc, e.seconds);
    lf << row << "\n";
  }
  if (!lf) throw std::runtime_error("cannot write training log under " + out_dir);

  std::printf("training complete: %s (iteration %ld)\n", ckpt_path.c_str(),
              start_iter + c.train.iterations);
  return 0;
}

int cmd_evaluate(const std::string& ckpt_path, const std::string& data_dir,
                 const std::string& report_path, bool identity, long classes) {
  auto listed = list_dataset(data_dir, true);

  CisUNet<float> net;
  Configs c;
  long num_classes = classes;
  if (!identity) {
    c = load_model(ckpt_path, net);
    num_classes = c.model.num_classes;
  }

  // Identity mode without --classes: infer the label alphabet from the data.
  std::vector<LabelVolume> gts;
  gts.reserve(listed.size());
  for (const auto& dc : listed) gts.push_back(nifti::read_labels(dc.label_path));
  if (num_classes <= 0) {
    long max_label = 0;
    for (const auto& gt : gts)
      for (long i = 0; i < gt.voxels.numel(); ++i)
        max_label = std::max(max_label, (long)gt.voxels.data()[i]);
    num_classes = max_label + 1;
    if (num_classes < 2) num_classes = 2;
  }

  std::vector<long> class_ids;
  for (long i = 1; i < num_classes; ++i) class_ids.push_back(i);

  std::vector<std::string> case_names;
  std::vector<CaseMetrics> case_metrics;
  for (size_t i = 0; i < listed.size(); ++i) {
    check_label_range(gts[i].voxels, num_classes, listed[i].id);
    LabelVolume pred;
    if (identity) {
      pred = gts[i];
    } else {
      ImageVolume img = nifti::read_image(listed[i].image_path);
      pred = predict_volume(net, c, img);
    }
    case_metrics.push_back(evaluate_case(pred, gts[i], class_ids));
    case_names.push_back(listed[i].id);
    std::printf("evaluated %s\n", listed[i].id.c_str());
  }

  const auto names = class_names_for(num_classes);
  if (report_path == "-") {
    write_report(std::cout, case_names, case_metrics, names);
  } else {
    std::ofstream os(report_path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write report to " + report_path);
    write_report(os, case_names, case_metrics, names);
  }

  const CohortMetrics agg = aggregate_cases(case_metrics);
  double mean = 0.0;
  for (double d : agg.mean_dsc) mean += d;
  mean /= (double)agg.mean_dsc.size();
  std::printf("evaluated %ld cases; mean foreground DSC %.4f\n", agg.num_cases,
              mean);
  return 0;
}

int cmd_predict(const std::string& ckpt_path, const std::string& input,
                const std::string& out_path) {
  CisUNet<float> net;
  Configs c = load_model(ckpt_path, net);
  ImageVolume img = nifti::read_image(input);
  LabelVolume pred = predict_volume(net, c, img);
  nifti::write_labels(out_path, pred);
  std::printf("wrote %s %s (%ld classes)\n", out_path.c_str(),
              shape_str(pred.voxels.shape).c_str(), c.model.num_classes);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CIS-UNet volumetric multi-class segmentation"};
  app.require_subcommand(1);

  ModelFlags info_flags;
  auto* info = app.add_subcommand("info", "print architecture and parameter counts");
  add_model_flags(info, info_flags);

  std::string gen_out;
  long gen_count = 4, gen_size = 64, gen_classes = 3, gen_seed = 0;
  auto* gen = app.add_subcommand("gen-synth", "generate a synthetic phantom dataset");
  gen->add_option("--out", gen_out, "output dataset directory")->required();
  gen->add_option("--count", gen_count, "number of cases");
  gen->add_option("--size", gen_size, "cube edge in voxels (>= 32)");
  gen->add_option("--classes", gen_classes, "classes including background");
  gen->add_option("--seed", gen_seed, "generator seed");

  ModelFlags train_flags;
  std::string train_data, train_out, train_resume;
  long train_val_every = 100, train_ckpt_every = 0;
  auto* train = app.add_subcommand("train", "train a model on a dataset");
  add_model_flags(train, train_flags);
  train->add_option("--data-dir", train_data, "dataset directory")->required();
  train->add_option("--out", train_out, "output directory for checkpoint/logs")
      ->required();
  train->add_option("--ckpt", train_resume, "checkpoint to resume from")
      ->check(CLI::ExistingFile);
  train->add_option("--val-every", train_val_every,
                    "validation cadence in iterations (0 = off)");
  train->add_option("--ckpt-every", train_ckpt_every,
                    "checkpoint cadence in iterations (0 = end only)");

  std::string eval_ckpt, eval_data, eval_out = "-";
  bool eval_identity = false;
  long eval_classes = 0;
  auto* eval = app.add_subcommand("evaluate", "evaluate a model on labeled data");
  eval->add_option("--ckpt", eval_ckpt, "checkpoint to evaluate")
      ->check(CLI::ExistingFile);
  eval->add_option("--data-dir", eval_data, "dataset directory")->required();
  eval->add_option("--out", eval_out, "report path ('-' = stdout)");
  eval->add_flag("--identity", eval_identity,
                 "score ground truth against itself (oracle path)");
  eval->add_option("--classes", eval_classes,
                   "class count for --identity (default: inferred)");

  std::string pred_ckpt, pred_in, pred_out;
  auto* pred = app.add_subcommand("predict", "segment one volume");
  pred->add_option("--ckpt", pred_ckpt, "checkpoint to use")
      ->required()
      ->check(CLI::ExistingFile);
  pred->add_option("input", pred_in, "input NIfTI volume")
      ->required()
      ->check(CLI::ExistingFile);
  pred->add_option("--out", pred_out, "output NIfTI path")->required();

  try {
    app.parse(argc, argv);
    if (info->parsed()) return cmd_info(info_flags);
    if (gen->parsed())
      return cmd_gen_synth(gen_out, gen_count, gen_size, gen_classes, gen_seed);
    if (train->parsed())
      return cmd_train(train_flags, train_data, train_out, train_val_every,
                       train_ckpt_every, train_resume);
    if (eval->parsed()) {
      if (!eval_identity && eval_ckpt.empty())
        throw std::runtime_error("evaluate: --ckpt is required unless --identity");
      return cmd_evaluate(eval_ckpt, eval_data, eval_out, eval_identity,
                          eval_classes);
    }
    if (pred->parsed()) return cmd_predict(pred_ckpt, pred_in, pred_out);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
