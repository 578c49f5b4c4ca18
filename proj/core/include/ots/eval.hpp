#pragma once

// Detection-quality measurement: greedy NMS, Pascal-VOC-style AP/recall with
// all-points interpolation, base/novel/harmonic-mean reporting, image-pyramid
// inference, the sliding-window baseline inference path, rotation sweep, and
// rendered spotting output.

#include <chrono>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "ots/data.hpp"
#include "ots/geometry.hpp"
#include "ots/model.hpp"

namespace ots {

double harmonic_mean(double a, double b);

// greedy score-descending suppression; deterministic tie-break by
// (score desc, level asc, lexicographic box)
std::vector<SpotPrediction> nms(std::vector<SpotPrediction> preds, double iou_thresh);

struct PagePrediction {
  int page = 0;
  SpotPrediction pred;
};

// All-points-interpolated average precision for one class over a page set.
// Each ground-truth box matches at most one prediction; `matched_out`
// receives the count of matched ground truths (for recall).
double voc_ap(std::vector<PagePrediction> preds, const std::map<int, std::vector<Box>>& gt,
              double iou_thresh = 0.5, int* matched_out = nullptr,
              std::vector<std::pair<double, double>>* pr_curve = nullptr);

struct SplitMetrics {
  std::map<int, double> per_class_ap;
  double mAP = 0;
  double recall = 0;
  int classes_evaluated = 0;
  int classes_skipped = 0;  // zero ground truth
};

struct EvalReport {
  SplitMetrics base, novel;
  double hm_map = 0, hm_recall = 0;
  std::map<int, int> per_level_detections;
  double wall_clock_sec = 0;

  void finalize() {
    hm_map = harmonic_mean(base.mAP, novel.mAP);
    hm_recall = harmonic_mean(base.recall, novel.recall);
  }
  std::string to_json() const;
};

struct PyramidConfig {
  std::vector<double> levels = {0.4, 0.6, 0.8, 1.0, 1.2};
  double base_scale = 640;  // longest page side at level 1.0
  double score_threshold = 0.55;
  double nms_iou = 0.3;
  bool warn_on_skip = false;
};

// infer(page_index, class_id) -> page-frame predictions for that class
using InferFn = std::function<std::vector<SpotPrediction>(int, int)>;

SplitMetrics evaluate_classes(const LoadedDataset& ds, const std::vector<int>& class_ids,
                              const InferFn& infer, double iou_thresh = 0.5,
                              std::map<int, int>* level_counts = nullptr,
                              std::vector<std::pair<int, std::vector<std::pair<double, double>>>>*
                                  pr_curves = nullptr);

// ---------------------------------------------------------------------------
// pyramid inference

template <typename T>
struct PageLevelFeatures {
  std::vector<Tensor<T>> feats;  // [D, hq, wq] per usable level
  std::vector<double> fx, fy;    // page -> level pixel scale factors
  std::vector<int> level_index;
  double page_w = 0, page_h = 0;
};

template <typename T>
PageLevelFeatures<T> compute_page_features(OtsModel<T>& model, const GrayImage& page,
                                           const PyramidConfig& pcfg) {
  NoGradGuard ng;
  PageLevelFeatures<T> out;
  out.page_w = page.width;
  out.page_h = page.height;
  int df = model.config().backbone.downsample_factor;
  const int min_feat = 5;  // regression window of the alignment head
  for (size_t li = 0; li < pcfg.levels.size(); ++li) {
    double f = pcfg.levels[li] * pcfg.base_scale / std::max(page.width, page.height);
    int rw = std::max(1, (int)std::lround(page.width * f));
    int rh = std::max(1, (int)std::lround(page.height * f));
    GrayImage resized = resize_bilinear(page, rw, rh);
    GrayImage padded = pad_to_multiple(resized, df);
    if (padded.width / df < min_feat || padded.height / df < min_feat) {
      if (pcfg.warn_on_skip)
        std::fprintf(stderr, "warning: pyramid level %.2f gives a %dx%d feature map, skipped\n",
                     pcfg.levels[li], padded.height / df, padded.width / df);
      continue;
    }
    out.feats.push_back(model.query_features(image_to_tensor<T>(padded), false));
    out.fx.push_back((double)rw / page.width);
    out.fy.push_back((double)rh / page.height);
    out.level_index.push_back((int)li);
  }
  return out;
}

template <typename T>
std::vector<SpotPrediction> spot_from_features(OtsModel<T>& model,
                                               const PageLevelFeatures<T>& pf,
                                               const Tensor<T>& support_feat,
                                               const PyramidConfig& pcfg, int class_id) {
  NoGradGuard ng;
  std::vector<SpotPrediction> all;
  for (size_t i = 0; i < pf.feats.size(); ++i) {
    auto fwd = model.forward_from_features(pf.feats[i], support_feat, false);
    // threshold in the resized frame, then map back to page pixels
    auto preds = model.predictions(fwd, pcfg.score_threshold,
                                   pf.feats[i].dim(2) * model.config().backbone.downsample_factor,
                                   pf.feats[i].dim(1) * model.config().backbone.downsample_factor,
                                   class_id, pf.level_index[i]);
    for (auto& p : preds) {
      Box b{p.box.x0 / pf.fx[i], p.box.y0 / pf.fy[i], p.box.x1 / pf.fx[i], p.box.y1 / pf.fy[i]};
      b = b.clipped(pf.page_w, pf.page_h);
      if (!b.valid()) continue;
      p.box = b;
      all.push_back(p);
    }
  }
  return nms(std::move(all), pcfg.nms_iou);
}

template <typename T>
std::vector<SpotPrediction> pyramid_inference(OtsModel<T>& model, const GrayImage& page,
                                              const Tensor<T>& support_feat,
                                              const PyramidConfig& pcfg, int class_id) {
  return spot_from_features(model, compute_page_features(model, page, pcfg), support_feat, pcfg,
                            class_id);
}

// Sliding-window baseline: the support feature block is the correlation
// kernel; peaks become fixed-size boxes at the support extent.
template <typename T>
std::vector<SpotPrediction> dsw_from_features(OtsModel<T>& model,
                                              const PageLevelFeatures<T>& pf,
                                              const Tensor<T>& support_feat,
                                              const PyramidConfig& pcfg, int class_id) {
  NoGradGuard ng;
  int df = model.config().backbone.downsample_factor;
  int hs = support_feat.dim(1), ws = support_feat.dim(2);
  std::vector<SpotPrediction> all;
  for (size_t i = 0; i < pf.feats.size(); ++i) {
    if (pf.feats[i].dim(1) < hs || pf.feats[i].dim(2) < ws) continue;
    Tensor<T> sm = dsw_score_map(pf.feats[i], support_feat);
    int oh = sm.dim(0), ow = sm.dim(1);
    for (int y = 0; y < oh; ++y)
      for (int x = 0; x < ow; ++x) {
        double s = (double)sm.values()[(int64_t)y * ow + x];
        if (s < pcfg.score_threshold) continue;
        Box b{x * (double)df / pf.fx[i], y * (double)df / pf.fy[i],
              (x + ws) * (double)df / pf.fx[i], (y + hs) * (double)df / pf.fy[i]};
        b = b.clipped(pf.page_w, pf.page_h);
        if (!b.valid()) continue;
        all.push_back({b, s, class_id, pf.level_index[i]});
      }
  }
  return nms(std::move(all), pcfg.nms_iou);
}

// ---------------------------------------------------------------------------
// rotation sweep and rendering

struct RotationPoint {
  double angle = 0;
  double mAP = 0;
  double recall = 0;
};

// infer_rotated(rotated pages, rotated gt, class) signature is handled by the
// caller: this helper owns only the rotation of the data and the metric calls.
std::vector<RotationPoint> rotation_sweep(
    const LoadedDataset& ds, const std::vector<int>& class_ids,
    const std::vector<double>& angles,
    const std::function<std::vector<SpotPrediction>(const GrayImage&, int)>& infer,
    double iou_thresh = 0.5);

std::string rotation_sweep_csv(const std::vector<RotationPoint>& pts);

// Pasted-gallery rendering plus a box overlay on the original page.
GrayImage render_spotting(int page_w, int page_h, const std::vector<SpotPrediction>& dets,
                          const std::map<int, GrayImage>& gallery);
RgbImage render_overlay(const GrayImage& page, const std::vector<SpotPrediction>& dets);

}  // namespace ots
