#pragma once

// Full spotting model: shared-weight feature extractor, cosine correlation,
// spatial alignment head. Owns the parameter registry and checkpoint glue.

#include <map>
#include <string>
#include <vector>

#include "ots/alignment.hpp"
#include "ots/backbone.hpp"
#include "ots/checkpoint.hpp"
#include "ots/correlation.hpp"
#include "ots/geometry.hpp"
#include "ots/losses.hpp"
#include "ots/tensor.hpp"

namespace ots {

struct SpotPrediction {
  Box box;  // query-image pixels
  double score = 0;
  int class_id = -1;
  int level = 0;
};

struct ModelConfig {
  BackboneConfig backbone;
  AlignConfig align;
};

template <typename T>
struct ModelForward {
  CorrelationMap<T> corr;
  AlignOutput<T> align;
  std::vector<Box> anchors;  // identity-extent anchor boxes, feature coords
};

template <typename T>
class OtsModel {
 public:
  OtsModel(const ModelConfig& cfg, uint64_t seed)
      : cfg_(cfg),
        rng_(seed),
        backbone_(cfg.backbone, rng_),
        align_(cfg.align, cfg.backbone.support_h, cfg.backbone.support_w, rng_) {
    if (cfg_.backbone.frozen) backbone_.set_learnable(false);
  }

  // support image [1,3,h,w] -> fixed-lattice support features [D,hs,ws]
  Tensor<T> support_features(const Tensor<T>& support_img, bool training) {
    Tensor<T> f = backbone_.extract_features(support_img, training);
    f = backbone_.resize_support_features(f);
    return reshape(f, {f.dim(1), f.dim(2), f.dim(3)});
  }

  Tensor<T> query_features(const Tensor<T>& query_img, bool training) {
    Tensor<T> f = backbone_.extract_features(query_img, training);
    return reshape(f, {f.dim(1), f.dim(2), f.dim(3)});
  }

  ModelForward<T> forward(const Tensor<T>& query_img, const Tensor<T>& support_img,
                          bool training) {
    Tensor<T> fq = query_features(query_img, training);
    Tensor<T> fs = support_features(support_img, training);
    return forward_from_features(fq, fs, training);
  }

  // split entry point so inference can cache either feature map
  ModelForward<T> forward_from_features(const Tensor<T>& fq, const Tensor<T>& fs,
                                        bool training) {
    ModelForward<T> out;
    out.corr = correlation_map(fq, fs);
    out.align = align_.forward(out.corr, training);
    out.anchors.reserve((size_t)out.align.Ha * out.align.Wa);
    for (int i = 0; i < out.align.Ha; ++i)
      for (int j = 0; j < out.align.Wa; ++j)
        out.anchors.push_back(align_.anchor_feature_box(i, j, out.align.off_y, out.align.off_x));
    return out;
  }

  // pixel box -> feature coordinates (inverse of feature_box_to_pixels)
  Box pixel_box_to_features(const Box& pb) const {
    double df = cfg_.backbone.downsample_factor;
    return {pb.x0 / df, pb.y0 / df, pb.x1 / df - 1, pb.y1 / df - 1};
  }

  // Dense forward -> thresholded pixel-space predictions (no NMS here).
  std::vector<SpotPrediction> predictions(const ModelForward<T>& fwd, double score_threshold,
                                          double img_w, double img_h, int class_id = -1,
                                          int level = 0) const {
    std::vector<SpotPrediction> out;
    double df = cfg_.backbone.downsample_factor;
    int64_t na = (int64_t)fwd.align.Ha * fwd.align.Wa;
    const auto& sv = fwd.align.scores.values();
    const auto& bv = fwd.align.boxes.values();
    for (int64_t a = 0; a < na; ++a) {
      if (fwd.align.oob[a]) continue;
      double s = (double)sv[a];
      if (s < score_threshold) continue;
      Box fb{(double)bv[0 * na + a], (double)bv[1 * na + a], (double)bv[2 * na + a],
             (double)bv[3 * na + a]};
      if (cfg_.align.force_square_box) {
        double side = std::max(fb.w(), fb.h()) / 2, cx = fb.cx(), cy = fb.cy();
        fb = {cx - side, cy - side, cx + side, cy + side};
      }
      Box pb = feature_box_to_pixels(fb, df).clipped(img_w, img_h);
      if (!pb.valid()) continue;  // degenerate after clipping: dropped
      out.push_back({pb, s, class_id, level});
    }
    return out;
  }

  ParamList<T> params() {
    ParamList<T> ps;
    backbone_.collect(ps);
    align_.collect(ps);
    return ps;
  }

  Checkpoint to_checkpoint(Adam<T>* opt = nullptr) {
    ParamList<T> ps = params();
    Checkpoint ck = snapshot(ps, opt);
    std::map<std::string, std::vector<T>> stats;
    backbone_.export_stats(stats);
    align_.export_stats(stats);
    for (const auto& [name, v] : stats) {
      CheckpointEntry e;
      e.data.assign(v.begin(), v.end());
      ck.params["stats." + name] = std::move(e);
    }
    return ck;
  }

  void from_checkpoint(const Checkpoint& ck, Adam<T>* opt = nullptr) {
    ParamList<T> ps = params();
    restore(ck, ps, opt);
    std::map<std::string, std::vector<T>> stats;
    for (const auto& [name, e] : ck.params) {
      if (name.rfind("stats.", 0) != 0) continue;
      std::vector<T> v(e.data.begin(), e.data.end());
      stats[name.substr(6)] = std::move(v);
    }
    backbone_.import_stats(stats);
    align_.import_stats(stats);
  }

  Backbone<T>& backbone() { return backbone_; }
  SpatialAlignment<T>& alignment() { return align_; }
  const ModelConfig& config() const { return cfg_; }

 private:
  ModelConfig cfg_;
  Rng rng_;
  Backbone<T> backbone_;
  SpatialAlignment<T> align_;
};

}  // namespace ots
