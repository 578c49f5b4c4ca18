#pragma once

// Episode training loop: sample -> forward -> assign -> loss -> backward ->
// optimizer step, with CSV loss logging, NaN diagnostics, and best-checkpoint
// selection on validation episodes drawn from held-out classes.

#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "ots/data.hpp"
#include "ots/eval.hpp"
#include "ots/losses.hpp"
#include "ots/model.hpp"
#include "ots/optim.hpp"

namespace ots {

struct TrainConfig {
  int steps = 800;
  int crop = 256;
  double lr = 1e-4;
  uint64_t seed = 1;
  int val_interval = 0;  // 0 disables validation-based selection
  int val_episodes = 8;
  LossConfig loss;
  bool normalize_losses = true;
  double val_score_threshold = 0.55;
  double val_nms_iou = 0.3;
  // When set, a resumable checkpoint (model + optimizer) is written to
  // checkpoint_path every checkpoint_every steps, so an interrupted run can
  // continue bit-for-bit from the last write.
  int checkpoint_every = 0;
  std::string checkpoint_path;
};

struct TrainResult {
  std::vector<std::string> log_lines;  // "step,loc,spot,total"
  Checkpoint final_ckpt;
  Checkpoint best_ckpt;  // by validation mAP; equals final when validation is off
  double best_val_map = -1;
  int best_val_step = -1;
};

// Single-crop inference used for validation scoring (level 1.0 only).
template <typename T>
std::vector<SpotPrediction> spot_crop(OtsModel<T>& model, const GrayImage& crop,
                                      const Tensor<T>& support_feat, double score_threshold,
                                      double nms_iou) {
  NoGradGuard ng;
  GrayImage padded = pad_to_multiple(crop, model.config().backbone.downsample_factor);
  Tensor<T> fq = model.query_features(image_to_tensor<T>(padded), false);
  auto fwd = model.forward_from_features(fq, support_feat, false);
  auto preds = model.predictions(fwd, score_threshold, crop.width, crop.height);
  return nms(std::move(preds), nms_iou);
}

template <typename T>
double validation_map(OtsModel<T>& model, const LoadedDataset& ds, const TrainConfig& tc,
                      Rng& rng) {
  NoGradGuard ng;
  const std::vector<int>& pool =
      ds.meta.novel_ids.empty() ? ds.meta.base_ids : ds.meta.novel_ids;
  double total = 0;
  int counted = 0;
  for (int e = 0; e < tc.val_episodes; ++e) {
    Episode ep = sample_episode(ds, rng, tc.crop, pool);
    if (ep.gt.empty()) continue;
    GrayImage sp = pad_to_multiple(ep.support, model.config().backbone.downsample_factor);
    Tensor<T> fs = model.support_features(image_to_tensor<T>(sp), false);
    auto preds = spot_crop(model, ep.query, fs, tc.val_score_threshold, tc.val_nms_iou);
    std::vector<PagePrediction> pp;
    for (auto& p : preds) pp.push_back({0, p});
    std::map<int, std::vector<Box>> gt;
    gt[0] = ep.gt;
    total += voc_ap(std::move(pp), gt, 0.5);
    ++counted;
  }
  return counted > 0 ? total / counted : 0.0;
}

// Distinct, well-mixed stream seed per (run seed, step). Seeding each step
// independently makes a run resumed from a checkpoint sample the exact same
// episodes as the uninterrupted run.
inline uint64_t mix_seed(uint64_t seed, uint64_t step) {
  uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (step + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

template <typename T>
TrainResult train_model(OtsModel<T>& model, const LoadedDataset& ds, const TrainConfig& tc,
                        const Checkpoint* resume = nullptr) {
  tc.loss.validate();
  AdamConfig<T> acfg;
  acfg.lr = (T)tc.lr;
  Adam<T> opt(acfg);
  ParamList<T> params = model.params();
  int df = model.config().backbone.downsample_factor;

  int start_step = 0;
  if (resume) {
    model.from_checkpoint(*resume, &opt);
    start_step = (int)resume->opt_step;
    check(start_step <= tc.steps, "resume checkpoint is already past the requested step count");
  }

  TrainResult result;
  for (int step = start_step; step < tc.steps; ++step) {
    Rng rng(mix_seed(tc.seed, (uint64_t)step));
    Episode ep = sample_episode(ds, rng, tc.crop, ds.meta.base_ids);
    GrayImage q = pad_to_multiple(ep.query, df);
    GrayImage s = pad_to_multiple(ep.support, df);

    zero_grads(params);
    auto fwd = model.forward(image_to_tensor<T>(q), image_to_tensor<T>(s), true);

    std::vector<Box> gt_feat;
    for (const Box& b : ep.gt) gt_feat.push_back(model.pixel_box_to_features(b));
    TargetAssignment assign = assign_targets(fwd.anchors, gt_feat, tc.loss);

    Tensor<T> spot = spotting_loss(fwd.align.scores, assign.labels, tc.loss,
                                   tc.normalize_losses, &fwd.align.oob);
    Tensor<T> loc = localization_loss(fwd.align.boxes, assign, gt_feat, fwd.anchors,
                                      tc.normalize_losses, &fwd.align.oob);
    Tensor<T> total = total_loss(loc, spot, tc.loss);

    double loc_v = (double)loc.item(), spot_v = (double)spot.item(),
           total_v = (double)total.item();
    if (!std::isfinite(total_v)) {
      std::string which = !std::isfinite(loc_v)    ? "localization"
                          : !std::isfinite(spot_v) ? "spotting"
                                                   : "combined";
      tensor_fail("non-finite loss at step " + std::to_string(step) + " (component: " + which +
                  ", lr=" + std::to_string(tc.lr) + ", loc=" + std::to_string(loc_v) +
                  ", spot=" + std::to_string(spot_v) + ")");
    }

    backward(total);
    opt.step(params);

    char line[128];
    std::snprintf(line, sizeof(line), "%d,%.17g,%.17g,%.17g", step, loc_v, spot_v, total_v);
    result.log_lines.emplace_back(line);

    if (tc.checkpoint_every > 0 && !tc.checkpoint_path.empty() &&
        (step + 1) % tc.checkpoint_every == 0) {
      model.to_checkpoint(&opt).save(tc.checkpoint_path);
    }

    if (tc.val_interval > 0 && (step + 1) % tc.val_interval == 0) {
      Rng val_rng(mix_seed(tc.seed ^ 0x5851f42d4c957f2dULL, (uint64_t)step));
      double v = validation_map(model, ds, tc, val_rng);
      if (v > result.best_val_map) {
        result.best_val_map = v;
        result.best_val_step = step + 1;
        result.best_ckpt = model.to_checkpoint(&opt);
      }
    }
  }
  result.final_ckpt = model.to_checkpoint(&opt);
  if (result.best_val_step < 0) result.best_ckpt = result.final_ckpt;
  return result;
}

}  // namespace ots
