#include "ots/eval.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

using nlohmann::json;

namespace ots {

double harmonic_mean(double a, double b) { return a + b > 0 ? 2 * a * b / (a + b) : 0.0; }

namespace {

// score desc, then lower pyramid level, then lexicographic box
bool pred_before(const SpotPrediction& a, const SpotPrediction& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.level != b.level) return a.level < b.level;
  if (a.box.x0 != b.box.x0) return a.box.x0 < b.box.x0;
  if (a.box.y0 != b.box.y0) return a.box.y0 < b.box.y0;
  if (a.box.x1 != b.box.x1) return a.box.x1 < b.box.x1;
  return a.box.y1 < b.box.y1;
}

}  // namespace

std::vector<SpotPrediction> nms(std::vector<SpotPrediction> preds, double iou_thresh) {
  std::sort(preds.begin(), preds.end(), pred_before);
  std::vector<SpotPrediction> kept;
  std::vector<bool> dead(preds.size(), false);
  for (size_t i = 0; i < preds.size(); ++i) {
    if (dead[i]) continue;
    kept.push_back(preds[i]);
    for (size_t j = i + 1; j < preds.size(); ++j)
      if (!dead[j] && iou(preds[i].box, preds[j].box) > iou_thresh) dead[j] = true;
  }
  return kept;
}

double voc_ap(std::vector<PagePrediction> preds, const std::map<int, std::vector<Box>>& gt,
              double iou_thresh, int* matched_out,
              std::vector<std::pair<double, double>>* pr_curve) {
  int total_gt = 0;
  for (const auto& [page, boxes] : gt) total_gt += (int)boxes.size();
  if (matched_out) *matched_out = 0;
  if (total_gt == 0) return 0.0;

  std::sort(preds.begin(), preds.end(), [](const PagePrediction& a, const PagePrediction& b) {
    if (a.pred.score != b.pred.score) return a.pred.score > b.pred.score;
    if (a.page != b.page) return a.page < b.page;
    return pred_before(a.pred, b.pred);
  });

  std::map<int, std::vector<bool>> used;
  for (const auto& [page, boxes] : gt) used[page].assign(boxes.size(), false);

  int tp = 0;
  std::vector<double> precision, recall;
  for (size_t i = 0; i < preds.size(); ++i) {
    const auto& p = preds[i];
    double best = iou_thresh;
    int best_j = -1;
    auto git = gt.find(p.page);
    if (git != gt.end()) {
      for (size_t j = 0; j < git->second.size(); ++j) {
        if (used[p.page][j]) continue;
        double v = iou(p.pred.box, git->second[j]);
        if (v >= best) {
          best = v;
          best_j = (int)j;
        }
      }
    }
    if (best_j >= 0) {
      used[p.page][best_j] = true;
      ++tp;
    }
    precision.push_back((double)tp / (double)(i + 1));
    recall.push_back((double)tp / total_gt);
  }
  if (matched_out) *matched_out = tp;
  if (pr_curve) {
    pr_curve->clear();
    for (size_t i = 0; i < precision.size(); ++i)
      pr_curve->push_back({recall[i], precision[i]});
  }
  if (precision.empty()) return 0.0;

  // all-points interpolation: running max of precision from the right,
  // integrated over recall increments
  for (int i = (int)precision.size() - 2; i >= 0; --i)
    precision[i] = std::max(precision[i], precision[i + 1]);
  double ap = 0, prev_r = 0;
  for (size_t i = 0; i < precision.size(); ++i) {
    ap += (recall[i] - prev_r) * precision[i];
    prev_r = recall[i];
  }
  return ap;
}

SplitMetrics evaluate_classes(
    const LoadedDataset& ds, const std::vector<int>& class_ids, const InferFn& infer,
    double iou_thresh, std::map<int, int>* level_counts,
    std::vector<std::pair<int, std::vector<std::pair<double, double>>>>* pr_curves) {
  SplitMetrics m;
  int total_gt = 0, total_matched = 0;
  for (int cls : class_ids) {
    std::map<int, std::vector<Box>> gt;
    int n_gt = 0;
    for (size_t p = 0; p < ds.meta.pages.size(); ++p) {
      const auto& pa = ds.meta.pages[p];
      for (size_t b = 0; b < pa.boxes.size(); ++b)
        if (pa.classes[b] == cls) {
          gt[(int)p].push_back(pa.boxes[b]);
          ++n_gt;
        }
    }
    if (n_gt == 0) {
      std::fprintf(stderr, "warning: class %d has no ground truth, excluded from mAP\n", cls);
      ++m.classes_skipped;
      continue;
    }
    std::vector<PagePrediction> preds;
    for (size_t p = 0; p < ds.meta.pages.size(); ++p) {
      for (auto& pr : infer((int)p, cls)) {
        if (level_counts) ++(*level_counts)[pr.level];
        preds.push_back({(int)p, pr});
      }
    }
    int matched = 0;
    std::vector<std::pair<double, double>> curve;
    double ap = voc_ap(std::move(preds), gt, iou_thresh, &matched,
                       pr_curves ? &curve : nullptr);
    if (pr_curves) pr_curves->push_back({cls, std::move(curve)});
    m.per_class_ap[cls] = ap;
    m.mAP += ap;
    total_gt += n_gt;
    total_matched += matched;
    ++m.classes_evaluated;
  }
  if (m.classes_evaluated > 0) m.mAP /= m.classes_evaluated;
  m.recall = total_gt > 0 ? (double)total_matched / total_gt : 0.0;
  return m;
}

std::string EvalReport::to_json() const {
  json j;
  auto split_json = [](const SplitMetrics& s) {
    json sj;
    sj["mAP"] = s.mAP;
    sj["recall"] = s.recall;
    sj["classes_evaluated"] = s.classes_evaluated;
    sj["classes_skipped"] = s.classes_skipped;
    json ap = json::object();
    for (const auto& [cls, v] : s.per_class_ap) ap[std::to_string(cls)] = v;
    sj["per_class_ap"] = ap;
    return sj;
  };
  j["base"] = split_json(base);
  j["novel"] = split_json(novel);
  j["hm_map"] = hm_map;
  j["hm_recall"] = hm_recall;
  json lv = json::object();
  for (const auto& [level, n] : per_level_detections) lv[std::to_string(level)] = n;
  j["per_level_detections"] = lv;
  j["wall_clock_sec"] = wall_clock_sec;
  return j.dump(1);
}

std::vector<RotationPoint> rotation_sweep(
    const LoadedDataset& ds, const std::vector<int>& class_ids,
    const std::vector<double>& angles,
    const std::function<std::vector<SpotPrediction>(const GrayImage&, int)>& infer,
    double iou_thresh) {
  std::vector<RotationPoint> out;
  for (double angle : angles) {
    // rotate every page (and its boxes) once, then measure as usual
    LoadedDataset rot;
    rot.meta = ds.meta;
    rot.gallery = ds.gallery;
    rot.pages.reserve(ds.pages.size());
    for (size_t p = 0; p < ds.pages.size(); ++p) {
      auto [img, boxes] = rotate_page(ds.pages[p], ds.meta.pages[p].boxes, angle);
      rot.pages.push_back(std::move(img));
      rot.meta.pages[p].boxes = std::move(boxes);
    }
    SplitMetrics m = evaluate_classes(
        rot, class_ids,
        [&](int page, int cls) { return infer(rot.pages[page], cls); }, iou_thresh);
    out.push_back({angle, m.mAP, m.recall});
  }
  return out;
}

std::string rotation_sweep_csv(const std::vector<RotationPoint>& pts) {
  std::ostringstream os;
  os << "angle_deg,mAP,recall\n";
  for (const auto& p : pts) {
    char line[96];
    std::snprintf(line, sizeof(line), "%.2f,%.6f,%.6f\n", p.angle, p.mAP, p.recall);
    os << line;
  }
  return os.str();
}

GrayImage render_spotting(int page_w, int page_h, const std::vector<SpotPrediction>& dets,
                          const std::map<int, GrayImage>& gallery) {
  GrayImage canvas(page_w, page_h, 1.0f);
  for (const auto& d : dets) {
    auto git = gallery.find(d.class_id);
    if (git == gallery.end()) continue;
    int w = std::max(1, (int)std::lround(d.box.w()));
    int h = std::max(1, (int)std::lround(d.box.h()));
    GrayImage glyph = resize_bilinear(git->second, w, h);
    int ox = (int)std::lround(d.box.x0), oy = (int)std::lround(d.box.y0);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        int px = ox + x, py = oy + y;
        if (px < 0 || py < 0 || px >= page_w || py >= page_h) continue;
        canvas.at(px, py) = std::min(canvas.at(px, py), glyph.at(x, y));
      }
  }
  return canvas;
}

RgbImage render_overlay(const GrayImage& page, const std::vector<SpotPrediction>& dets) {
  RgbImage out = RgbImage::from_gray(page);
  for (const auto& d : dets)
    draw_rect_outline(out, (int)std::lround(d.box.x0), (int)std::lround(d.box.y0),
                      (int)std::lround(d.box.x1) - 1, (int)std::lround(d.box.y1) - 1, 220, 40,
                      40);
  return out;
}

}  // namespace ots
