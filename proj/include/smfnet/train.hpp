#pragma once

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "smfnet/config.hpp"
#include "smfnet/core/optim.hpp"
#include "smfnet/core/serialize.hpp"
#include "smfnet/imaging.hpp"
#include "smfnet/losses.hpp"
#include "smfnet/net/model.hpp"

namespace smfnet {

struct TrainError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

/// Aligned infrared/visible patch pairs, both single-channel in [0,1].
template <class T>
struct PairDataset {
  std::vector<Tensor<T>> ir, vis;  // (1,1,h,w) each, aligned by index
  std::vector<std::string> source;  // originating filename per patch

  std::size_t size() const { return ir.size(); }
};

/// Loads every image present in both directories (matched by filename),
/// converts to grayscale luminance and cuts aligned patches.
template <class T>
PairDataset<T> load_pair_dataset(const std::string& ir_dir, const std::string& vis_dir,
                                 const PatchSpec& spec) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(ir_dir)) throw TrainError("not a directory: " + ir_dir);
  if (!fs::is_directory(vis_dir)) throw TrainError("not a directory: " + vis_dir);
  std::vector<std::string> names;
  for (auto& e : fs::directory_iterator(ir_dir))
    if (e.is_regular_file()) names.push_back(e.path().filename().string());
  std::sort(names.begin(), names.end());
  std::vector<std::string> missing;
  PairDataset<T> ds;
  for (auto& name : names) {
    fs::path visp = fs::path(vis_dir) / name;
    if (!fs::exists(visp)) {
      missing.push_back(name);
      continue;
    }
    auto ir = load_image<T>((fs::path(ir_dir) / name).string(), Channels::GRAY1);
    auto vis = load_image<T>(visp.string(), Channels::GRAY1);
    if (ir.height() != vis.height() || ir.width() != vis.width())
      throw TrainError("size mismatch for pair " + name);
    if (ir.height() < spec.size || ir.width() < spec.size)
      continue;  // smaller than one patch
    auto pir = crop_patches(ir, spec);
    auto pvis = crop_patches(vis, spec);
    for (std::size_t i = 0; i < pir.size(); ++i) {
      ds.ir.push_back(std::move(pir[i].data));
      ds.vis.push_back(std::move(pvis[i].data));
      ds.source.push_back(name);
    }
  }
  if (!missing.empty()) {
    std::string msg = "infrared images without a visible counterpart:";
    for (auto& m : missing) msg += " " + m;
    throw TrainError(msg);
  }
  if (ds.size() == 0)
    throw TrainError("empty dataset: no usable pairs under " + ir_dir + " and " + vis_dir);
  return ds;
}

/// Shuffled full batches (the trailing partial batch is dropped).
inline std::vector<std::vector<std::size_t>> make_batches(std::size_t n, int batch,
                                                          std::mt19937_64& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::shuffle(idx.begin(), idx.end(), rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i + batch <= n; i += batch)
    out.push_back({idx.begin() + static_cast<long>(i), idx.begin() + static_cast<long>(i + batch)});
  return out;
}

template <class T>
Tensor<T> stack_batch(const std::vector<Tensor<T>>& items, const std::vector<std::size_t>& idx) {
  int h = items[idx[0]].dim(2), w = items[idx[0]].dim(3);
  Tensor<T> out({static_cast<int>(idx.size()), 1, h, w});
  long long per = static_cast<long long>(h) * w;
  for (std::size_t b = 0; b < idx.size(); ++b)
    for (long long i = 0; i < per; ++i) out[static_cast<long long>(b) * per + i] = items[idx[b]][i];
  return out;
}

// ---------------------------------------------------------------------------
// Logging
// ---------------------------------------------------------------------------

/// Append-only tab-delimited training log; one row per optimizer step.
class TrainLog {
 public:
  TrainLog() = default;
  explicit TrainLog(const std::string& path) : path_(path) {}

  void row(const std::string& stage, int epoch, long long iter, const LossReport& rep) {
    if (path_.empty()) return;
    bool fresh = !std::filesystem::exists(path_) || std::filesystem::file_size(path_) == 0;
    std::ofstream os(path_, std::ios::app);
    check(static_cast<bool>(os), "TrainLog: cannot open " + path_);
    if (fresh) {
      os << "stage\tepoch\titer\ttotal";
      for (auto& [k, v] : rep.terms) os << "\t" << k;
      os << "\n";
    }
    os << stage << "\t" << epoch << "\t" << iter << "\t" << rep.total;
    for (auto& [k, v] : rep.terms) os << "\t" << v;
    os << "\n";
  }

 private:
  std::string path_;
};

/// Renders per-iteration loss totals as a simple polyline PNG.
inline void render_loss_curve(const std::vector<double>& totals, const std::string& path) {
  check(!totals.empty(), "render_loss_curve: no data");
  int W = 640, H = 360, margin = 24;
  cv::Mat img(H, W, CV_8UC3, cv::Scalar(255, 255, 255));
  double lo = *std::min_element(totals.begin(), totals.end());
  double hi = *std::max_element(totals.begin(), totals.end());
  if (hi - lo < 1e-12) hi = lo + 1.0;
  std::vector<cv::Point> pts;
  for (std::size_t i = 0; i < totals.size(); ++i) {
    double x = margin + (W - 2.0 * margin) * (totals.size() == 1 ? 0.0 : double(i) / (totals.size() - 1));
    double y = H - margin - (H - 2.0 * margin) * (totals[i] - lo) / (hi - lo);
    pts.emplace_back(cv::Point(static_cast<int>(x), static_cast<int>(y)));
  }
  cv::rectangle(img, {margin, margin}, {W - margin, H - margin}, cv::Scalar(200, 200, 200));
  cv::polylines(img, pts, false, cv::Scalar(180, 60, 30), 1, cv::LINE_AA);
  cv::putText(img, "loss", {margin, margin - 6}, cv::FONT_HERSHEY_SIMPLEX, 0.4,
              cv::Scalar(60, 60, 60));
  if (!cv::imwrite(path, img)) throw IoError("render_loss_curve: cannot write " + path);
}

// ---------------------------------------------------------------------------
// Training loops
// ---------------------------------------------------------------------------

struct TrainResult {
  std::vector<LossReport> epoch_reports;  // batch-averaged terms per epoch
  std::vector<double> iter_totals;        // total loss at every step
  long long iters = 0;
};

namespace train_detail {

inline LossReport average_reports(const std::vector<LossReport>& reps) {
  LossReport out = reps.front();
  for (std::size_t t = 0; t < out.terms.size(); ++t) {
    double s = 0;
    for (auto& r : reps) s += r.terms[t].second;
    out.terms[t].second = s / reps.size();
  }
  double s = 0;
  for (auto& r : reps) s += r.total;
  out.total = s / reps.size();
  return out;
}

inline void check_finite(const LossReport& rep, const std::string& stage, int epoch,
                         long long iter) {
  if (std::isfinite(rep.total)) return;
  std::string msg = "non-finite loss in " + stage + " at epoch " + std::to_string(epoch) +
                    ", iter " + std::to_string(iter) + ":";
  for (auto& [k, v] : rep.terms) msg += " " + k + "=" + std::to_string(v);
  throw TrainError(msg);
}

}  // namespace train_detail

using EpochCallback = std::function<void(int epoch, const LossReport&)>;

/// Shared driver: one optimizer step per batch, abort on non-finite loss.
template <class T, class StepFn>
TrainResult run_training(SmfNet<T>& model, const PairDataset<T>& ds, const TrainConfig& cfg,
                         int epochs, const std::string& stage, StepFn step,
                         const std::string& log_path, long long max_iters,
                         const EpochCallback& on_epoch) {
  cfg.validate();
  if (ds.size() < static_cast<std::size_t>(cfg.batch_size))
    throw TrainError("dataset smaller than one batch (" + std::to_string(ds.size()) + " < " +
                     std::to_string(cfg.batch_size) + ")");
  auto params = model.named_params();
  Adam<T> opt(params, cfg.lr, 0.9, 0.999, 1e-8, cfg.clip_norm);
  TrainLog log(log_path);
  TrainResult res;
  std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);
  for (int epoch = 0; epoch < epochs; ++epoch) {
    std::vector<LossReport> reps;
    for (auto& batch : make_batches(ds.size(), cfg.batch_size, rng)) {
      if (max_iters > 0 && res.iters >= max_iters) break;
      auto ir = Var<T>::constant(stack_batch(ds.ir, batch));
      auto vis = Var<T>::constant(stack_batch(ds.vis, batch));
      opt.zero_grad();
      StageLoss<T> loss = step(vis, ir);
      train_detail::check_finite(loss.report, stage, epoch, res.iters);
      backward(loss.total);
      opt.step();
      res.iter_totals.push_back(loss.report.total);
      ++res.iters;
      log.row(stage, epoch, res.iters, loss.report);
      reps.push_back(std::move(loss.report));
    }
    if (!reps.empty()) {
      res.epoch_reports.push_back(train_detail::average_reports(reps));
      if (on_epoch) on_epoch(epoch, res.epoch_reports.back());
    }
    if (max_iters > 0 && res.iters >= max_iters) break;
  }
  return res;
}

/// Stage I: per-modality reconstruction with the decomposition penalty.
template <class T>
TrainResult train_stage1(SmfNet<T>& model, const PairDataset<T>& ds, const TrainConfig& cfg,
                         const std::string& log_path = "", long long max_iters = 0,
                         const EpochCallback& on_epoch = {}) {
  LossWeights w = cfg.loss_weights();
  LossOptions lo = cfg.loss_options();
  auto step = [&](const Var<T>& vis, const Var<T>& ir) {
    auto [tv, ti] = model.encode(vis, ir);
    auto vis_hat = model.decode_recon(tv);
    auto ir_hat = model.decode_recon(ti);
    return stage1_total(vis, vis_hat, ir, ir_hat, tv.detail, ti.detail, tv.base, ti.base, tv.graph,
                        ti.graph, w, lo);
  };
  return run_training(model, ds, cfg, cfg.epochs_stage1, "stage1", step, log_path, max_iters,
                      on_epoch);
}

/// Stage II: end-to-end fusion on a model with fusion layers.
template <class T>
TrainResult train_stage2(SmfNet<T>& model, const PairDataset<T>& ds, const TrainConfig& cfg,
                         const std::string& log_path = "", long long max_iters = 0,
                         const EpochCallback& on_epoch = {}) {
  check(model.with_fusion, "train_stage2: model lacks fusion layers");
  LossWeights w = cfg.loss_weights();
  LossOptions lo = cfg.loss_options();
  auto step = [&](const Var<T>& vis, const Var<T>& ir) {
    auto [tv, ti] = model.encode(vis, ir);
    auto fused = model.decoder(model.streams_of(model.fuse_features(tv, ti)));
    return stage2_total(fused, vis, ir, tv.detail, ti.detail, tv.base, ti.base, tv.graph, ti.graph,
                        w, lo);
  };
  return run_training(model, ds, cfg, cfg.epochs_stage2, "stage2", step, log_path, max_iters,
                      on_epoch);
}

/// Single-stage variant: both objectives share one backward pass.
template <class T>
TrainResult train_joint(SmfNet<T>& model, const PairDataset<T>& ds, const TrainConfig& cfg,
                        const std::string& log_path = "", long long max_iters = 0,
                        const EpochCallback& on_epoch = {}) {
  check(model.with_fusion, "train_joint: model lacks fusion layers");
  LossWeights w = cfg.loss_weights();
  LossOptions lo = cfg.loss_options();
  auto step = [&](const Var<T>& vis, const Var<T>& ir) {
    auto [tv, ti] = model.encode(vis, ir);
    auto vis_hat = model.decode_recon(tv);
    auto ir_hat = model.decode_recon(ti);
    auto s1 = stage1_total(vis, vis_hat, ir, ir_hat, tv.detail, ti.detail, tv.base, ti.base,
                           tv.graph, ti.graph, w, lo);
    auto fused = model.decoder(model.streams_of(model.fuse_features(tv, ti)));
    auto s2 = stage2_total(fused, vis, ir, tv.detail, ti.detail, tv.base, ti.base, tv.graph,
                           ti.graph, w, lo);
    StageLoss<T> out;
    out.total = s1.total + s2.total;
    out.report = s1.report;
    for (std::size_t i = 0; i < s2.report.terms.size(); ++i)
      out.report.add("fusion_" + s2.report.terms[i].first, s2.report.terms[i].second,
                     s2.report.weights[i]);
    out.report.total = s1.report.total + s2.report.total;
    return out;
  };
  return run_training(model, ds, cfg, cfg.epochs_stage1 + cfg.epochs_stage2, "joint", step,
                      log_path, max_iters, on_epoch);
}

// ---------------------------------------------------------------------------
// Checkpoint wiring
// ---------------------------------------------------------------------------

template <class T>
void save_stage_checkpoint(const std::string& path, SmfNet<T>& model, const TrainConfig& cfg,
                           const std::string& stage, int epoch) {
  Manifest m;
  m["format"] = "1";
  m["stage"] = stage;
  m["epoch"] = std::to_string(epoch);
  m["seed"] = std::to_string(cfg.seed);
  m["with_fusion"] = model.with_fusion ? "true" : "false";
  std::istringstream cfg_lines(config_to_text(cfg));
  std::string line, section;
  while (std::getline(cfg_lines, line)) {
    if (line.size() > 2 && line.front() == '[') {
      section = line.substr(1, line.size() - 2);
      continue;
    }
    auto eq = line.find(" = ");
    if (eq != std::string::npos)
      m["config." + section + "." + line.substr(0, eq)] = line.substr(eq + 3);
  }
  auto params = model.named_params();
  save_checkpoint(path, m, params);
}

/// Rebuilds the exact model a checkpoint was saved from, then loads weights.
template <class T>
SmfNet<T> load_model_checkpoint(const std::string& path, TrainConfig& cfg_out) {
  Manifest m = read_manifest(path);
  TrainConfig cfg;
  for (auto& [k, v] : m.kv) {
    if (k.rfind("config.", 0) != 0) continue;
    apply_override(cfg, k.substr(7) + "=" + v);
  }
  bool fusion = m.get("with_fusion") == "true";
  SmfNet<T> model(cfg.model_config(), cfg.seed, fusion);
  auto params = model.named_params();
  load_checkpoint(path, params);
  cfg_out = cfg;
  return model;
}

/// Builds a fusion-enabled model and seeds the shared trunk from a stage-I
/// checkpoint; fusion layers keep their fresh initialization.
template <class T>
SmfNet<T> model_from_stage1(const std::string& path, const TrainConfig& cfg) {
  SmfNet<T> model(cfg.model_config(), cfg.seed, /*fusion_layers=*/true);
  auto params = model.named_params();
  load_checkpoint_partial(path, params);
  return model;
}

}  // namespace smfnet
