#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <random>

#include "ots/eval.hpp"

using namespace ots;

namespace {

// Reference AP sweep, written independently of the engine implementation:
// computes the raw PR points, then for every recall increment scans the
// remaining points directly for the best precision (no running-max pass).
double reference_ap(std::vector<PagePrediction> preds,
                    const std::map<int, std::vector<Box>>& gt, double iou_thresh) {
  int total_gt = 0;
  for (auto& [p, b] : gt) total_gt += (int)b.size();
  if (total_gt == 0) return 0.0;
  std::stable_sort(preds.begin(), preds.end(),
                   [](const PagePrediction& a, const PagePrediction& b) {
                     if (a.pred.score != b.pred.score) return a.pred.score > b.pred.score;
                     if (a.page != b.page) return a.page < b.page;
                     if (a.pred.level != b.pred.level) return a.pred.level < b.pred.level;
                     if (a.pred.box.x0 != b.pred.box.x0) return a.pred.box.x0 < b.pred.box.x0;
                     if (a.pred.box.y0 != b.pred.box.y0) return a.pred.box.y0 < b.pred.box.y0;
                     if (a.pred.box.x1 != b.pred.box.x1) return a.pred.box.x1 < b.pred.box.x1;
                     return a.pred.box.y1 < b.pred.box.y1;
                   });
  std::map<int, std::vector<bool>> used;
  for (auto& [p, b] : gt) used[p].assign(b.size(), false);
  std::vector<double> prec, rec;
  int tp = 0;
  for (size_t i = 0; i < preds.size(); ++i) {
    auto git = gt.find(preds[i].page);
    double best = iou_thresh;
    int bj = -1;
    if (git != gt.end())
      for (size_t j = 0; j < git->second.size(); ++j) {
        if (used[preds[i].page][j]) continue;
        double v = iou(preds[i].pred.box, git->second[j]);
        if (v >= best) { best = v; bj = (int)j; }
      }
    if (bj >= 0) { used[preds[i].page][bj] = true; ++tp; }
    prec.push_back((double)tp / (i + 1));
    rec.push_back((double)tp / total_gt);
  }
  double ap = 0, prev = 0;
  for (size_t i = 0; i < rec.size(); ++i) {
    if (rec[i] == prev) continue;
    double pmax = 0;
    for (size_t j = i; j < prec.size(); ++j) pmax = std::max(pmax, prec[j]);
    ap += (rec[i] - prev) * pmax;
    prev = rec[i];
  }
  return ap;
}

SpotPrediction mk(double x0, double y0, double x1, double y1, double score, int level = 0) {
  return {{x0, y0, x1, y1}, score, 0, level};
}

}  // namespace

TEST_CASE("harmonic mean") {
  CHECK(harmonic_mean(0.5, 0.5) == doctest::Approx(0.5));
  CHECK(harmonic_mean(0.2, 0.8) == doctest::Approx(harmonic_mean(0.8, 0.2)));
  CHECK(harmonic_mean(0, 0) == 0.0);
  CHECK(harmonic_mean(1.0, 0.0) == 0.0);
}

TEST_CASE("iou fixtures") {
  CHECK(iou({0, 0, 10, 10}, {0, 0, 10, 10}) == 1.0);
  CHECK(iou({0, 0, 10, 10}, {5, 0, 15, 10}) == doctest::Approx(1.0 / 3).epsilon(1e-12));
  CHECK(iou({0, 0, 10, 10}, {20, 20, 30, 30}) == 0.0);
}

TEST_CASE("nms") {
  SUBCASE("single prediction unchanged") {
    auto out = nms({mk(0, 0, 10, 10, 0.9)}, 0.3);
    CHECK(out.size() == 1);
  }
  SUBCASE("identical boxes keep the higher score") {
    auto out = nms({mk(0, 0, 10, 10, 0.5), mk(0, 0, 10, 10, 0.9)}, 0.3);
    CHECK(out.size() == 1);
    CHECK(out[0].score == 0.9);
  }
  SUBCASE("random sets match a brute-force reference") {
    Rng rng(3);
    std::uniform_real_distribution<double> pos(0, 80), sz(5, 25), sc(-1, 1);
    for (int trial = 0; trial < 100; ++trial) {
      std::vector<SpotPrediction> preds;
      for (int i = 0; i < 50; ++i) {
        double x = pos(rng), y = pos(rng);
        preds.push_back(mk(x, y, x + sz(rng), y + sz(rng), sc(rng), i % 3));
      }
      auto got = nms(preds, 0.3);
      // brute force: repeatedly take the best remaining, erase overlaps
      std::vector<SpotPrediction> pool = preds, want;
      auto before = [](const SpotPrediction& a, const SpotPrediction& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.level != b.level) return a.level < b.level;
        if (a.box.x0 != b.box.x0) return a.box.x0 < b.box.x0;
        if (a.box.y0 != b.box.y0) return a.box.y0 < b.box.y0;
        if (a.box.x1 != b.box.x1) return a.box.x1 < b.box.x1;
        return a.box.y1 < b.box.y1;
      };
      while (!pool.empty()) {
        auto it = std::min_element(pool.begin(), pool.end(), before);
        SpotPrediction top = *it;
        want.push_back(top);
        std::vector<SpotPrediction> next;
        for (auto& p : pool)
          if (!(p.box.x0 == top.box.x0 && p.box.y0 == top.box.y0 && p.box.x1 == top.box.x1 &&
                p.box.y1 == top.box.y1 && p.score == top.score && p.level == top.level) &&
              iou(p.box, top.box) <= 0.3)
            next.push_back(p);
        pool = next;
      }
      REQUIRE(got.size() == want.size());
      for (size_t i = 0; i < got.size(); ++i) {
        CHECK(got[i].score == want[i].score);
        CHECK(got[i].box.x0 == want[i].box.x0);
      }
      // survivors never overlap above the threshold
      for (size_t i = 0; i < got.size(); ++i)
        for (size_t j = i + 1; j < got.size(); ++j)
          CHECK(iou(got[i].box, got[j].box) <= 0.3);
    }
  }
}

TEST_CASE("voc_ap fixtures") {
  std::map<int, std::vector<Box>> gt;
  gt[0] = {{0, 0, 10, 10}, {20, 0, 30, 10}, {40, 0, 50, 10}};

  SUBCASE("single perfect prediction") {
    std::map<int, std::vector<Box>> one;
    one[0] = {{0, 0, 10, 10}};
    int matched = 0;
    double ap = voc_ap({{0, mk(0, 0, 10, 10, 0.9)}}, one, 0.5, &matched);
    CHECK(ap == doctest::Approx(1.0));
    CHECK(matched == 1);
  }
  SUBCASE("ranked TP, FP, TP against the reference sweep") {
    std::vector<PagePrediction> preds = {
        {0, mk(0, 0, 10, 10, 0.9)},    // TP
        {0, mk(60, 60, 70, 70, 0.8)},  // FP
        {0, mk(20, 0, 30, 10, 0.7)},   // TP
    };
    double got = voc_ap(preds, gt, 0.5);
    double want = reference_ap(preds, gt, 0.5);
    CHECK(std::abs(got - want) < 1e-9);
    // by hand: PR points (1/1,1/3), (1/2,1/3), (2/3,2/3) -> 1/3 + (1/3)*(2/3)
    CHECK(got == doctest::Approx(1.0 / 3 + 2.0 / 9).epsilon(1e-12));
  }
  SUBCASE("duplicate detection on one gt counts as FP") {
    std::vector<PagePrediction> preds = {
        {0, mk(0, 0, 10, 10, 0.9)},
        {0, mk(0, 0, 10, 10, 0.8)},  // duplicate -> FP
    };
    int matched = 0;
    (void)voc_ap(preds, gt, 0.5, &matched);
    CHECK(matched == 1);
  }
  SUBCASE("50 randomized fixtures match the reference within 1e-9") {
    Rng rng(11);
    std::uniform_real_distribution<double> pos(0, 90), sz(4, 20), sc(0, 1);
    std::uniform_int_distribution<int> npred(0, 25), ngt(1, 8), pg(0, 2);
    for (int trial = 0; trial < 50; ++trial) {
      std::map<int, std::vector<Box>> g;
      int n_gt = ngt(rng);
      for (int i = 0; i < n_gt; ++i) {
        double x = pos(rng), y = pos(rng);
        g[pg(rng)].push_back({x, y, x + sz(rng), y + sz(rng)});
      }
      std::vector<PagePrediction> preds;
      int np = npred(rng);
      for (int i = 0; i < np; ++i) {
        double x = pos(rng), y = pos(rng);
        preds.push_back({pg(rng), mk(x, y, x + sz(rng), y + sz(rng), sc(rng))});
      }
      CHECK(std::abs(voc_ap(preds, g, 0.5) - reference_ap(preds, g, 0.5)) < 1e-9);
    }
  }
  SUBCASE("AP invariant under monotone score transforms") {
    Rng rng(13);
    std::uniform_real_distribution<double> pos(0, 90), sz(4, 20), sc(0, 1);
    std::vector<PagePrediction> preds;
    for (int i = 0; i < 15; ++i) {
      double x = pos(rng), y = pos(rng);
      preds.push_back({0, mk(x, y, x + sz(rng), y + sz(rng), sc(rng))});
    }
    double base = voc_ap(preds, gt, 0.5);
    for (auto& p : preds) p.pred.score = std::tanh(3 * p.pred.score) + 2;
    CHECK(voc_ap(preds, gt, 0.5) == doctest::Approx(base).epsilon(1e-12));
  }
  SUBCASE("adding a lowest-ranked FP never increases AP; a TP never lowers recall") {
    std::vector<PagePrediction> preds = {
        {0, mk(0, 0, 10, 10, 0.9)},
        {0, mk(20, 0, 30, 10, 0.7)},
    };
    int matched_before = 0, matched_after = 0;
    double ap = voc_ap(preds, gt, 0.5, &matched_before);
    auto with_fp = preds;
    with_fp.push_back({0, mk(60, 60, 70, 70, 0.01)});
    CHECK(voc_ap(with_fp, gt, 0.5) <= ap + 1e-12);
    auto with_tp = preds;
    with_tp.push_back({0, mk(40, 0, 50, 10, 0.01)});
    (void)voc_ap(with_tp, gt, 0.5, &matched_after);
    CHECK(matched_after >= matched_before);
  }
}

TEST_CASE("evaluate_classes skips classes with no ground truth") {
  LoadedDataset ds;
  PageAnnotation pa;
  pa.width = pa.height = 100;
  pa.boxes = {{0, 0, 10, 10}};
  pa.classes = {1};
  ds.meta.pages.push_back(pa);
  ds.pages.emplace_back(100, 100);
  auto infer = [](int, int cls) -> std::vector<SpotPrediction> {
    if (cls == 1) return {{{0, 0, 10, 10}, 0.9, 1, 0}};
    return {};
  };
  SplitMetrics m = evaluate_classes(ds, {1, 2}, infer);
  CHECK(m.classes_evaluated == 1);
  CHECK(m.classes_skipped == 1);
  CHECK(m.mAP == doctest::Approx(1.0));
  CHECK(m.recall == doctest::Approx(1.0));
}

TEST_CASE("spotting render") {
  std::map<int, GrayImage> gallery;
  gallery[3] = GrayImage(16, 16, 0.0f);  // solid dark glyph

  SUBCASE("no detections gives a blank canvas") {
    GrayImage canvas = render_spotting(50, 40, {}, gallery);
    CHECK(canvas.width == 50);
    CHECK(canvas.height == 40);
    for (float v : canvas.pix) CHECK(v == 1.0f);
  }
  SUBCASE("one detection occupies exactly its box") {
    std::vector<SpotPrediction> dets = {{{10, 5, 20, 15}, 0.9, 3, 0}};
    GrayImage canvas = render_spotting(50, 40, dets, gallery);
    for (int y = 0; y < 40; ++y)
      for (int x = 0; x < 50; ++x) {
        bool inside = x >= 10 && x < 20 && y >= 5 && y < 15;
        CHECK(canvas.at(x, y) == (inside ? 0.0f : 1.0f));
      }
  }
  SUBCASE("overlay has the page dimensions") {
    GrayImage page(30, 20, 0.5f);
    RgbImage ov = render_overlay(page, {{{2, 2, 10, 10}, 0.8, 3, 0}});
    CHECK(ov.width == 30);
    CHECK(ov.height == 20);
  }
}

TEST_CASE("rotation sweep output") {
  LoadedDataset ds;
  PageAnnotation pa;
  pa.width = pa.height = 64;
  pa.boxes = {{10, 10, 30, 30}};
  pa.classes = {0};
  ds.meta.pages.push_back(pa);
  GrayImage page(64, 64, 1.0f);
  for (int y = 10; y < 30; ++y)
    for (int x = 10; x < 30; ++x) page.at(x, y) = 0.0f;
  ds.pages.push_back(page);

  // oracle "model": finds the dark pixels and boxes them
  auto infer = [](const GrayImage& img, int cls) -> std::vector<SpotPrediction> {
    int xmin = img.width, ymin = img.height, xmax = -1, ymax = -1;
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x)
        if (img.at(x, y) < 0.5f) {
          xmin = std::min(xmin, x);
          xmax = std::max(xmax, x);
          ymin = std::min(ymin, y);
          ymax = std::max(ymax, y);
        }
    if (xmax < 0) return {};
    return {{{(double)xmin, (double)ymin, (double)xmax + 1, (double)ymax + 1}, 0.9, cls, 0}};
  };

  std::vector<double> angles = {0, 2.5, 5.0};
  auto pts = rotation_sweep(ds, {0}, angles, infer);
  REQUIRE(pts.size() == 3);
  for (size_t i = 1; i < pts.size(); ++i) CHECK(pts[i].angle > pts[i - 1].angle);
  CHECK(pts[0].mAP == doctest::Approx(1.0));  // angle 0 is the plain evaluation

  std::string csv = rotation_sweep_csv(pts);
  CHECK(csv.find("angle_deg,mAP,recall") == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 4);
}
