// Command-line front end: two-stage training, fusion inference, quality
// evaluation and the ablation variants. Exit codes: 0 success, 1 usage or
// configuration error, 2 runtime/data failure.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <iostream>

#include "smfnet/config.hpp"
#include "smfnet/metrics.hpp"
#include "smfnet/train.hpp"

namespace fs = std::filesystem;
using namespace smfnet;

using Scalar = float;

namespace {

bool verbose() {
  const char* v = std::getenv("SMFNET_VERBOSE");
  return v && std::string(v) != "0";
}

struct CommonTrainOpts {
  std::string ir_dir, vis_dir, out_path, config_path, log_path, curve_path;
  std::vector<std::string> overrides;
  bool toy = false;
  long long seed = -1;

  void attach(CLI::App* cmd) {
    cmd->add_option("--ir", ir_dir, "directory of infrared images")->required();
    cmd->add_option("--vis", vis_dir, "directory of visible images (matching filenames)")
        ->required();
    cmd->add_option("--out", out_path, "output checkpoint path")->required();
    cmd->add_option("--config", config_path, "config file ([model]/[loss]/[train] sections)");
    cmd->add_option("--set", overrides, "override, e.g. train.lr=0.001")->take_all();
    cmd->add_option("--log", log_path, "append-only tab-delimited training log");
    cmd->add_option("--curve", curve_path, "write a loss-curve PNG here");
    cmd->add_flag("--toy", toy, "tiny preset (seconds instead of hours)");
    cmd->add_option("--seed", seed, "training seed (shorthand for train.seed)");
  }

  TrainConfig config() const {
    TrainConfig cfg = config_path.empty() ? TrainConfig{} : load_config_file(config_path);
    if (toy) cfg.apply_toy();
    for (auto& o : overrides) apply_override(cfg, o);
    if (seed >= 0) cfg.seed = static_cast<std::uint64_t>(seed);
    cfg.validate();
    return cfg;
  }
};

EpochCallback progress(const std::string& stage) {
  if (!verbose()) return {};
  return [stage](int epoch, const LossReport& rep) {
    std::cerr << stage << " epoch " << epoch << " total " << rep.total;
    for (auto& [k, v] : rep.terms) std::cerr << " " << k << "=" << v;
    std::cerr << "\n";
  };
}

void finish_training(const TrainResult& res, const CommonTrainOpts& opts) {
  if (!opts.curve_path.empty()) render_loss_curve(res.iter_totals, opts.curve_path);
  std::cout << "trained " << res.iters << " steps, final loss "
            << (res.iter_totals.empty() ? 0.0 : res.iter_totals.back()) << "\n";
  std::cout << "checkpoint: " << opts.out_path << "\n";
}

int run_train_stage1(const CommonTrainOpts& opts) {
  TrainConfig cfg = opts.config();
  auto ds = load_pair_dataset<Scalar>(opts.ir_dir, opts.vis_dir,
                                      {cfg.patch_size, cfg.patch_stride});
  SmfNet<Scalar> model(cfg.model_config(), cfg.seed, /*fusion_layers=*/false);
  auto res = train_stage1(model, ds, cfg, opts.log_path, 0, progress("stage1"));
  save_stage_checkpoint(opts.out_path, model, cfg, "stage1", cfg.epochs_stage1);
  finish_training(res, opts);
  return 0;
}

int run_train_stage2(const CommonTrainOpts& opts, const std::string& init_path) {
  TrainConfig cfg = opts.config();
  auto ds = load_pair_dataset<Scalar>(opts.ir_dir, opts.vis_dir,
                                      {cfg.patch_size, cfg.patch_stride});
  SmfNet<Scalar> model = init_path.empty()
                             ? SmfNet<Scalar>(cfg.model_config(), cfg.seed, true)
                             : model_from_stage1<Scalar>(init_path, cfg);
  auto res = cfg.joint ? train_joint(model, ds, cfg, opts.log_path, 0, progress("joint"))
                       : train_stage2(model, ds, cfg, opts.log_path, 0, progress("stage2"));
  save_stage_checkpoint(opts.out_path, model, cfg, cfg.joint ? "joint" : "stage2",
                        cfg.epochs_stage2);
  finish_training(res, opts);
  return 0;
}

int run_fuse(const std::string& ckpt, const std::string& ir_path, const std::string& vis_path,
             const std::string& out_path, bool gray) {
  TrainConfig cfg;
  auto model = load_model_checkpoint<Scalar>(ckpt, cfg);
  auto one = [&](const std::string& irp, const std::string& visp, const std::string& outp) {
    auto ir = load_image<Scalar>(irp, Channels::GRAY1);
    auto vis = load_image<Scalar>(visp, gray ? Channels::GRAY1 : Channels::RGB3);
    auto fused = fuse_pair(model, ir, vis);
    save_image(fused, outp);
    if (verbose()) std::cerr << "fused " << irp << " + " << visp << " -> " << outp << "\n";
  };
  if (fs::is_directory(ir_path)) {
    if (!fs::is_directory(vis_path)) throw IoError("--vis must be a directory too");
    fs::create_directories(out_path);
    std::vector<std::string> names;
    for (auto& e : fs::directory_iterator(ir_path))
      if (e.is_regular_file()) names.push_back(e.path().filename().string());
    std::sort(names.begin(), names.end());
    if (names.empty()) throw IoError("no images under " + ir_path);
    for (auto& n : names) {
      if (!fs::exists(fs::path(vis_path) / n)) throw IoError("missing visible counterpart: " + n);
      std::string stem = fs::path(n).stem().string();
      one((fs::path(ir_path) / n).string(), (fs::path(vis_path) / n).string(),
          (fs::path(out_path) / (stem + ".png")).string());
    }
  } else {
    one(ir_path, vis_path, out_path);
  }
  return 0;
}

int run_evaluate(const std::string& fused_dir, const std::string& ir_dir,
                 const std::string& vis_dir, const std::string& csv, bool ssim_mean) {
  MetricsOptions opt;
  opt.ssim_mean = ssim_mean;
  auto tbl = evaluate_directory<Scalar>(fused_dir, ir_dir, vis_dir, opt);
  std::cout << format_table(tbl);
  if (!csv.empty()) write_csv(tbl, csv);
  if (tbl.empty()) throw IoError("no evaluable pairs under " + fused_dir);
  return 0;
}

int run_ablate(const CommonTrainOpts& opts, const std::string& name) {
  TrainConfig cfg = opts.config();
  apply_ablation(cfg, name);
  cfg.validate();
  auto ds = load_pair_dataset<Scalar>(opts.ir_dir, opts.vis_dir,
                                      {cfg.patch_size, cfg.patch_stride});
  fs::create_directories(opts.out_path);
  std::string s1 = (fs::path(opts.out_path) / (name + "_stage1.ckpt")).string();
  std::string s2 = (fs::path(opts.out_path) / (name + "_stage2.ckpt")).string();
  auto report = [](const std::string& stage, const TrainResult& res, const std::string& path) {
    std::cout << stage << ": trained " << res.iters << " steps, final loss "
              << (res.iter_totals.empty() ? 0.0 : res.iter_totals.back()) << " -> " << path
              << "\n";
  };
  if (cfg.joint) {
    SmfNet<Scalar> model(cfg.model_config(), cfg.seed, true);
    auto res = train_joint(model, ds, cfg, opts.log_path, 0, progress(name));
    save_stage_checkpoint(s2, model, cfg, "joint", cfg.epochs_stage1 + cfg.epochs_stage2);
    if (!opts.curve_path.empty()) render_loss_curve(res.iter_totals, opts.curve_path);
    report(name + " joint", res, s2);
  } else {
    SmfNet<Scalar> m1(cfg.model_config(), cfg.seed, false);
    auto res1 = train_stage1(m1, ds, cfg, opts.log_path, 0, progress(name + "/stage1"));
    save_stage_checkpoint(s1, m1, cfg, "stage1", cfg.epochs_stage1);
    report(name + " stage1", res1, s1);
    SmfNet<Scalar> m2 = model_from_stage1<Scalar>(s1, cfg);
    auto res2 = train_stage2(m2, ds, cfg, opts.log_path, 0, progress(name + "/stage2"));
    save_stage_checkpoint(s2, m2, cfg, "stage2", cfg.epochs_stage2);
    if (!opts.curve_path.empty()) render_loss_curve(res2.iter_totals, opts.curve_path);
    report(name + " stage2", res2, s2);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"infrared/visible image fusion: training, inference, evaluation"};
  app.require_subcommand(1);

  CommonTrainOpts t1, t2, ab;
  std::string init_path, ablation_name;
  auto* c1 = app.add_subcommand("train-stage1", "train the reconstruction stage");
  t1.attach(c1);
  auto* c2 = app.add_subcommand("train-stage2", "train the fusion stage");
  t2.attach(c2);
  c2->add_option("--init", init_path, "stage-1 checkpoint to initialize the trunk from");

  std::string f_ckpt, f_ir, f_vis, f_out;
  bool f_gray = false;
  auto* cf = app.add_subcommand("fuse", "fuse an image pair (or matched directories)");
  cf->add_option("--ckpt", f_ckpt, "fusion checkpoint")->required();
  cf->add_option("--ir", f_ir, "infrared image or directory")->required();
  cf->add_option("--vis", f_vis, "visible image or directory")->required();
  cf->add_option("--out", f_out, "output image or directory")->required();
  cf->add_flag("--gray", f_gray, "treat the visible input as grayscale");

  std::string e_fused, e_ir, e_vis, e_csv;
  bool e_ssim_mean = false;
  auto* ce = app.add_subcommand("evaluate", "quality metrics over a fused directory");
  ce->add_option("--fused", e_fused, "directory of fused images")->required();
  ce->add_option("--ir", e_ir, "directory of infrared sources")->required();
  ce->add_option("--vis", e_vis, "directory of visible sources")->required();
  ce->add_option("--csv", e_csv, "also write a CSV here");
  ce->add_flag("--ssim-mean", e_ssim_mean, "report mean instead of summed SSIM");

  auto* ca = app.add_subcommand("ablate", "train a named structural/loss variant");
  ca->add_option("name", ablation_name, "variant name (AE1..AE13)")->required();
  ab.attach(ca);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (c1->parsed()) return run_train_stage1(t1);
    if (c2->parsed()) return run_train_stage2(t2, init_path);
    if (cf->parsed()) return run_fuse(f_ckpt, f_ir, f_vis, f_out, f_gray);
    if (ce->parsed()) return run_evaluate(e_fused, e_ir, e_vis, e_csv, e_ssim_mean);
    if (ca->parsed()) return run_ablate(ab, ablation_name);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
