// Command-line entry point: dataset synthesis, training, evaluation,
// single-image spotting, and self-verification suites, all behind one binary.
//
// Exit codes: 0 success, 1 usage/config error, 2 data/runtime error,
// 3 verification failure.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "CLI11.hpp"
#include "gradcheck.hpp"
#include "json.hpp"
#include "ots/config.hpp"
#include "ots/data.hpp"
#include "ots/eval.hpp"
#include "ots/image.hpp"
#include "ots/model.hpp"
#include "ots/train.hpp"

namespace fs = std::filesystem;
using namespace ots;

namespace {

void apply_thread_cap() {
#ifdef _OPENMP
  const char* t = std::getenv("OTS_THREADS");
  if (t != nullptr) {
    int n = std::atoi(t);
    if (n > 0) omp_set_num_threads(n);
  }
#endif
}

// ---------------------------------------------------------------------------
// config -> typed run configurations

SynthConfig synth_config(Config& c) {
  SynthConfig s;
  s.n_base_classes = c.get_int("synth.base_classes", s.n_base_classes);
  s.n_novel_classes = c.get_int("synth.novel_classes", s.n_novel_classes);
  s.pages = c.get_int("synth.pages", s.pages);
  s.page_w = c.get_int("synth.page_w", s.page_w);
  s.page_h = c.get_int("synth.page_h", s.page_h);
  s.glyphs_min = c.get_int("synth.glyphs_min", s.glyphs_min);
  s.glyphs_max = c.get_int("synth.glyphs_max", s.glyphs_max);
  s.glyph_min_px = c.get_int("synth.glyph_min_px", s.glyph_min_px);
  s.glyph_max_px = c.get_int("synth.glyph_max_px", s.glyph_max_px);
  s.frequency_skew = c.get_double("synth.frequency_skew", s.frequency_skew);
  s.max_jitter_rot_deg = c.get_double("synth.max_jitter_rot_deg", s.max_jitter_rot_deg);
  s.noise_amp = c.get_double("synth.noise_amp", s.noise_amp);
  s.gallery_px = c.get_int("synth.gallery_px", s.gallery_px);
  s.seed = (uint64_t)c.get_int("synth.seed", (int)s.seed);
  return s;
}

ModelConfig model_config(Config& c) {
  ModelConfig m;
  m.backbone.stage_channels = c.get_ints("backbone.stages", m.backbone.stage_channels);
  m.backbone.downsample_factor =
      c.get_int("backbone.downsample_factor", 1 << (int)m.backbone.stage_channels.size());
  m.backbone.support_h = c.get_int("backbone.support_h", m.backbone.support_h);
  m.backbone.support_w = c.get_int("backbone.support_w", m.backbone.support_w);
  m.backbone.frozen = c.get_bool("backbone.frozen", m.backbone.frozen);
  m.align.tau = c.get_int("align.tau", m.align.tau);
  m.align.order = parse_attention_order(c.get_str("align.attention_order", "support_first"));
  m.align.gm_c1 = c.get_int("align.gm_c1", m.align.gm_c1);
  m.align.gm_c2 = c.get_int("align.gm_c2", m.align.gm_c2);
  m.align.score_on_refined = c.get_bool("align.score_on_refined", m.align.score_on_refined);
  m.align.force_square_box = c.get_bool("align.force_square_box", m.align.force_square_box);
  m.backbone.validate();
  return m;
}

LossConfig loss_config(Config& c) {
  LossConfig l;
  l.kind = parse_spot_loss_kind(c.get_str("loss.kind", "torus"));
  l.m_pos = c.get_double("loss.m_pos", l.m_pos);
  l.m_neg = c.get_double("loss.m_neg", l.m_neg);
  l.temperature = c.get_double("loss.temperature", l.temperature);
  l.lambda = c.get_double("loss.lambda", l.lambda);
  l.pos_iou = c.get_double("loss.pos_iou", l.pos_iou);
  l.neg_iou = c.get_double("loss.neg_iou", l.neg_iou);
  l.triplet_margin = c.get_double("loss.triplet_margin", l.triplet_margin);
  l.compat_double_weight = c.get_bool("loss.compat_double_weight", l.compat_double_weight);
  l.validate();
  return l;
}

TrainConfig train_config(Config& c) {
  TrainConfig t;
  t.steps = c.get_int("train.steps", t.steps);
  t.crop = c.get_int("train.crop", t.crop);
  t.lr = c.get_double("train.lr", t.lr);
  t.seed = (uint64_t)c.get_int("train.seed", (int)t.seed);
  t.val_interval = c.get_int("train.val_interval", t.val_interval);
  t.val_episodes = c.get_int("train.val_episodes", t.val_episodes);
  t.normalize_losses = c.get_bool("train.normalize_losses", t.normalize_losses);
  t.val_score_threshold = c.get_double("train.val_score_threshold", t.val_score_threshold);
  t.val_nms_iou = c.get_double("train.val_nms_iou", t.val_nms_iou);
  t.loss = loss_config(c);
  return t;
}

PyramidConfig pyramid_config(Config& c) {
  PyramidConfig p;
  p.levels = c.get_doubles("eval.levels", p.levels);
  p.base_scale = c.get_double("eval.base_scale", p.base_scale);
  p.score_threshold = c.get_double("eval.score_threshold", p.score_threshold);
  p.nms_iou = c.get_double("eval.nms_iou", p.nms_iou);
  p.warn_on_skip = c.get_bool("eval.warn_on_skip", true);
  return p;
}

void write_snapshot(const Config& c, const std::string& out_dir) {
  fs::create_directories(out_dir);
  c.save((fs::path(out_dir) / "config.txt").string());
}

// ---------------------------------------------------------------------------
// synth

int cmd_synth(Config& cfg, const std::string& out) {
  SynthConfig sc = synth_config(cfg);
  fs::create_directories(out);
  generate_synthetic_dataset(sc, out);
  Dataset ds = load_dataset(out);

  std::map<int, int> hist;
  int64_t total = 0;
  for (const auto& pg : ds.pages) {
    for (int cls : pg.classes) ++hist[cls];
    total += (int64_t)pg.classes.size();
  }
  std::printf("dataset written to %s\n", out.c_str());
  std::printf("pages: %zu  classes: %zu base + %zu novel  instances: %lld (%.1f/page)\n",
              ds.pages.size(), ds.base_ids.size(), ds.novel_ids.size(), (long long)total,
              ds.pages.empty() ? 0.0 : (double)total / ds.pages.size());
  std::printf("class histogram (id:count):");
  for (const auto& [cls, n] : hist) std::printf(" %d:%d", cls, n);
  std::printf("\n");
  write_snapshot(cfg, out);
  return 0;
}

// ---------------------------------------------------------------------------
// train

template <typename T>
int cmd_train(Config& cfg, const std::string& data_dir, const std::string& out,
              const std::string& resume_path) {
  LoadedDataset ds = load_dataset_images(load_dataset(data_dir));
  ModelConfig mc = model_config(cfg);
  TrainConfig tc = train_config(cfg);
  OtsModel<T> model(mc, tc.seed);

  Checkpoint resume;
  const Checkpoint* resume_ptr = nullptr;
  if (!resume_path.empty()) {
    resume = Checkpoint::load(resume_path);
    resume_ptr = &resume;
    std::printf("resuming from %s at step %lld\n", resume_path.c_str(),
                (long long)resume.opt_step);
  }

  auto t0 = std::chrono::steady_clock::now();
  TrainResult res = train_model(model, ds, tc, resume_ptr);
  double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  fs::create_directories(out);
  {
    std::ofstream log((fs::path(out) / "loss_log.csv").string());
    log << "step,loc,spot,total\n";
    for (const auto& l : res.log_lines) log << l << "\n";
  }
  res.final_ckpt.save((fs::path(out) / "checkpoint.bin").string());
  res.best_ckpt.save((fs::path(out) / "best_checkpoint.bin").string());
  write_snapshot(cfg, out);

  if (!res.log_lines.empty())
    std::printf("trained %zu steps in %.1fs, final loss line: %s\n", res.log_lines.size(), secs,
                res.log_lines.back().c_str());
  if (res.best_val_step >= 0)
    std::printf("best validation mAP %.4f at step %d\n", res.best_val_map, res.best_val_step);
  return 0;
}

// ---------------------------------------------------------------------------
// eval

template <typename T>
int cmd_eval(Config& cfg, const std::string& data_dir, const std::string& ckpt_path,
             const std::string& out, const std::string& split, bool baseline_dsw, double angle) {
  LoadedDataset ds = load_dataset_images(load_dataset(data_dir));
  if (angle != 0.0) {
    for (size_t i = 0; i < ds.pages.size(); ++i) {
      auto [img, boxes] = rotate_page(ds.pages[i], ds.meta.pages[i].boxes, angle);
      ds.pages[i] = std::move(img);
      ds.meta.pages[i].boxes = std::move(boxes);
      ds.meta.pages[i].width = ds.pages[i].width;
      ds.meta.pages[i].height = ds.pages[i].height;
    }
  }

  ModelConfig mc = model_config(cfg);
  PyramidConfig pc = pyramid_config(cfg);
  uint64_t seed = (uint64_t)cfg.get_int("train.seed", 1);
  OtsModel<T> model(mc, seed);
  if (!ckpt_path.empty())
    model.from_checkpoint(Checkpoint::load(ckpt_path));
  else if (!baseline_dsw)
    throw ConfigError("eval requires a checkpoint unless --baseline dsw is given");

  auto t0 = std::chrono::steady_clock::now();

  std::vector<PageLevelFeatures<T>> feats;
  feats.reserve(ds.pages.size());
  for (const auto& page : ds.pages) feats.push_back(compute_page_features(model, page, pc));

  std::map<int, Tensor<T>> support;
  for (const auto& [cls, img] : ds.gallery) {
    NoGradGuard ng;
    GrayImage padded = pad_to_multiple(img, mc.backbone.downsample_factor);
    support.emplace(cls, model.support_features(image_to_tensor<T>(padded), false));
  }

  InferFn infer = [&](int page, int cls) {
    return baseline_dsw ? dsw_from_features(model, feats[page], support.at(cls), pc, cls)
                        : spot_from_features(model, feats[page], support.at(cls), pc, cls);
  };

  EvalReport rep;
  std::vector<std::pair<int, std::vector<std::pair<double, double>>>> curves;
  if (split == "base" || split == "both")
    rep.base = evaluate_classes(ds, ds.meta.base_ids, infer, 0.5, &rep.per_level_detections,
                                &curves);
  if (split == "novel" || split == "both")
    rep.novel = evaluate_classes(ds, ds.meta.novel_ids, infer, 0.5, &rep.per_level_detections,
                                 &curves);
  rep.finalize();
  rep.wall_clock_sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  fs::create_directories(out);
  {
    std::ofstream js((fs::path(out) / "report.json").string());
    js << rep.to_json() << "\n";
  }
  {
    std::ofstream pr((fs::path(out) / "pr_curves.csv").string());
    pr << "class,recall,precision\n";
    for (const auto& [cls, curve] : curves)
      for (const auto& [r, p] : curve)
        pr << cls << "," << r << "," << p << "\n";
  }
  write_snapshot(cfg, out);

  std::printf("%s | base mAP %.4f recall %.4f | novel mAP %.4f recall %.4f | HM mAP %.4f "
              "recall %.4f | %.1fs\n",
              baseline_dsw ? "dsw" : "ots", rep.base.mAP, rep.base.recall, rep.novel.mAP,
              rep.novel.recall, rep.hm_map, rep.hm_recall, rep.wall_clock_sec);
  return 0;
}

// ---------------------------------------------------------------------------
// spot

template <typename T>
int cmd_spot(Config& cfg, const std::string& ckpt_path, const std::string& page_path,
             const std::string& support_path, const std::string& out) {
  GrayImage page = load_png_gray(page_path);
  GrayImage glyph = load_png_gray(support_path);
  ModelConfig mc = model_config(cfg);
  PyramidConfig pc = pyramid_config(cfg);
  OtsModel<T> model(mc, 1);
  model.from_checkpoint(Checkpoint::load(ckpt_path));

  NoGradGuard ng;
  GrayImage padded = pad_to_multiple(glyph, mc.backbone.downsample_factor);
  Tensor<T> sup = model.support_features(image_to_tensor<T>(padded), false);
  std::vector<SpotPrediction> dets = pyramid_inference(model, page, sup, pc, 0);

  fs::create_directories(out);
  nlohmann::json boxes = nlohmann::json::array();
  for (const auto& d : dets)
    boxes.push_back({{"x0", d.box.x0},
                     {"y0", d.box.y0},
                     {"x1", d.box.x1},
                     {"y1", d.box.y1},
                     {"score", d.score},
                     {"level", d.level}});
  {
    std::ofstream js((fs::path(out) / "boxes.json").string());
    js << boxes.dump(2) << "\n";
  }
  std::map<int, GrayImage> gallery;
  gallery[0] = glyph;
  save_png_gray(render_spotting(page.width, page.height, dets, gallery),
                (fs::path(out) / "pasted.png").string());
  save_png_rgb(render_overlay(page, dets), (fs::path(out) / "overlay.png").string());
  write_snapshot(cfg, out);

  std::printf("%zu detections written to %s\n", dets.size(), out.c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// verify

struct VerifyState {
  int failed = 0;
  void report(const std::string& name, bool ok, const std::string& detail = "") {
    std::printf("[%s] %s%s%s\n", ok ? "pass" : "FAIL", name.c_str(),
                detail.empty() ? "" : " — ", detail.c_str());
    if (!ok) ++failed;
  }
};

void verify_gradcheck(VerifyState& vs) {
  using testing::gradcheck;
  // composed graph: features -> correlation -> attention/warp -> loss
  for (uint64_t seed = 1; seed <= 3; ++seed) {
    ModelConfig mc;
    mc.backbone.stage_channels = {4, 8};
    mc.backbone.downsample_factor = 4;
    mc.backbone.support_h = 2;
    mc.backbone.support_w = 2;
    mc.align.tau = 2;
    mc.align.gm_c1 = 8;
    mc.align.gm_c2 = 8;
    OtsModel<double> model(mc, seed);
    Rng rng(seed * 977);
    Tensor<double> fq = randn<double>({8, 7, 7}, rng, 0.5);
    Tensor<double> fs = randn<double>({8, 2, 2}, rng, 0.5);
    fq.set_requires_grad(true);
    fs.set_requires_grad(true);
    LossConfig lc;
    auto forward = [&]() {
      auto fwd = model.forward_from_features(fq, fs, false);
      std::vector<Box> gt = {fwd.anchors[fwd.anchors.size() / 2]};
      TargetAssignment assign = assign_targets(fwd.anchors, gt, lc);
      Tensor<double> spot =
          spotting_loss(fwd.align.scores, assign.labels, lc, true, &fwd.align.oob);
      Tensor<double> loc =
          localization_loss(fwd.align.boxes, assign, gt, fwd.anchors, true, &fwd.align.oob);
      return total_loss(loc, spot, lc);
    };
    auto res = gradcheck<double>({fq, fs}, forward, 1e-4, 1e-4);
    char buf[128];
    std::snprintf(buf, sizeof(buf), "seed %llu, max rel err %.2e, kink failures %lld",
                  (unsigned long long)seed, res.max_rel_err, (long long)res.kink_failures);
    vs.report("gradcheck: composed correlation/warp/loss graph", res.ok(1e-5), buf);
  }
  // feature extractor on a small input
  {
    BackboneConfig bc;
    bc.stage_channels = {4};
    bc.downsample_factor = 2;
    bc.support_h = 2;
    bc.support_w = 2;
    Rng rng(7);
    Backbone<double> bb(bc, rng);
    Tensor<double> img = randn<double>({1, 3, 8, 8}, rng, 0.5);
    img.set_requires_grad(true);
    Tensor<double> w = randn<double>({4, 4, 4}, rng, 1.0);
    auto forward = [&]() {
      Tensor<double> f = bb.extract_features(img, false);
      return sum(mul(reshape(f, {4, 4, 4}), w));
    };
    auto res = testing::gradcheck<double>({img}, forward, 1e-4, 1e-4);
    char buf[96];
    std::snprintf(buf, sizeof(buf), "max rel err %.2e, kink failures %lld", res.max_rel_err,
                  (long long)res.kink_failures);
    vs.report("gradcheck: feature extractor input gradient", res.ok(1e-5), buf);
  }
}

void verify_oracles(VerifyState& vs) {
  // correlation vs a direct double-loop cosine computation
  {
    bool ok = true;
    double worst = 0;
    for (uint64_t seed = 1; seed <= 20 && ok; ++seed) {
      Rng rng(seed);
      int d = 6, hq = 5, wq = 4, hs = 3, ws = 2;
      Tensor<double> fq = randn<double>({d, hq, wq}, rng, 1.0);
      Tensor<double> fs = randn<double>({d, hs, ws}, rng, 1.0);
      auto cm = correlation_map(fq, fs);
      const auto& v = cm.four_d.values();
      for (int a = 0; a < hq && ok; ++a)
        for (int b = 0; b < wq && ok; ++b)
          for (int k = 0; k < hs && ok; ++k)
            for (int l = 0; l < ws && ok; ++l) {
              double dot = 0, nq = 0, ns = 0;
              for (int c = 0; c < d; ++c) {
                double q = fq.values()[((int64_t)c * hq + a) * wq + b];
                double s = fs.values()[((int64_t)c * hs + k) * ws + l];
                dot += q * s;
                nq += q * q;
                ns += s * s;
              }
              double ref = dot / (std::sqrt(nq) * std::sqrt(ns));
              double got = v[(((int64_t)a * wq + b) * hs + k) * ws + l];
              worst = std::max(worst, std::abs(got - ref));
              if (std::abs(got - ref) > 1e-5) ok = false;
            }
    }
    char buf[64];
    std::snprintf(buf, sizeof(buf), "max abs err %.2e over 20 pairs", worst);
    vs.report("oracle: cosine correlation vs double loop", ok, buf);
  }
  // greedy suppression vs a literal O(n^2) re-selection
  {
    bool ok = true;
    Rng rng(11);
    std::uniform_real_distribution<double> U(0, 1);
    for (int trial = 0; trial < 20 && ok; ++trial) {
      std::vector<SpotPrediction> preds;
      for (int i = 0; i < 40; ++i) {
        double x = U(rng) * 80, y = U(rng) * 80, w = 4 + U(rng) * 20, h = 4 + U(rng) * 20;
        preds.push_back({{x, y, x + w, y + h}, U(rng), 0, 0});
      }
      auto fast = nms(preds, 0.3);
      // reference: repeatedly take the best-scored remaining box
      std::vector<SpotPrediction> pool = preds, ref;
      while (!pool.empty()) {
        size_t best = 0;
        for (size_t i = 1; i < pool.size(); ++i)
          if (pool[i].score > pool[best].score) best = i;
        SpotPrediction keep = pool[best];
        ref.push_back(keep);
        std::vector<SpotPrediction> next;
        for (size_t i = 0; i < pool.size(); ++i)
          if (i != best && iou(pool[i].box, keep.box) <= 0.3) next.push_back(pool[i]);
        pool = std::move(next);
      }
      if (fast.size() != ref.size()) ok = false;
      for (size_t i = 0; ok && i < ref.size(); ++i)
        if (std::abs(fast[i].score - ref[i].score) > 0) ok = false;
    }
    vs.report("oracle: greedy suppression vs quadratic reference", ok);
  }
  // average precision vs an independent sweep
  {
    bool ok = true;
    double worst = 0;
    Rng rng(13);
    std::uniform_real_distribution<double> U(0, 1);
    for (int trial = 0; trial < 20 && ok; ++trial) {
      std::map<int, std::vector<Box>> gt;
      int pages = 3;
      for (int p = 0; p < pages; ++p)
        for (int g = 0; g < 4; ++g) {
          double x = U(rng) * 60, y = U(rng) * 60;
          gt[p].push_back({x, y, x + 10, y + 10});
        }
      std::vector<PagePrediction> preds;
      for (int p = 0; p < pages; ++p)
        for (int i = 0; i < 10; ++i) {
          const Box& b = gt[p][(size_t)i % 4];
          double dx = (U(rng) - 0.5) * 10, dy = (U(rng) - 0.5) * 10;
          preds.push_back({p, {{b.x0 + dx, b.y0 + dy, b.x1 + dx, b.y1 + dy}, U(rng), 0, 0}});
        }
      double got = voc_ap(preds, gt, 0.5);
      // reference: sort, greedy-match, precision envelope from the right
      std::stable_sort(preds.begin(), preds.end(), [](const auto& a, const auto& b) {
        return a.pred.score > b.pred.score;
      });
      std::map<int, std::vector<bool>> used;
      for (auto& [p, boxes] : gt) used[p].assign(boxes.size(), false);
      int total_gt = 0;
      for (auto& [p, boxes] : gt) total_gt += (int)boxes.size();
      std::vector<int> tp;
      for (const auto& pp : preds) {
        int best = -1;
        double best_iou = 0.5;
        const auto& boxes = gt[pp.page];
        for (size_t i = 0; i < boxes.size(); ++i) {
          double v = iou(pp.pred.box, boxes[i]);
          if (v >= best_iou && !used[pp.page][i]) {
            best_iou = v;
            best = (int)i;
          }
        }
        if (best >= 0) {
          used[pp.page][best] = true;
          tp.push_back(1);
        } else {
          tp.push_back(0);
        }
      }
      double ap = 0;
      int cum = 0;
      std::vector<double> prec(tp.size()), rec(tp.size());
      for (size_t i = 0; i < tp.size(); ++i) {
        cum += tp[i];
        prec[i] = (double)cum / (double)(i + 1);
        rec[i] = (double)cum / total_gt;
      }
      double prev_r = 0;
      for (size_t i = 0; i < tp.size(); ++i) {
        if (tp[i] == 0) continue;
        double pmax = 0;
        for (size_t j = i; j < tp.size(); ++j) pmax = std::max(pmax, prec[j]);
        ap += (rec[i] - prev_r) * pmax;
        prev_r = rec[i];
      }
      worst = std::max(worst, std::abs(got - ap));
      if (std::abs(got - ap) > 1e-9) ok = false;
    }
    char buf[64];
    std::snprintf(buf, sizeof(buf), "max abs err %.2e over 20 fixtures", worst);
    vs.report("oracle: average precision vs reference sweep", ok, buf);
  }
  {
    double v = iou({0, 0, 10, 10}, {5, 0, 15, 10});
    vs.report("fixture: overlap ratio (0,0,10,10)x(5,0,15,10) = 1/3", v == 1.0 / 3.0);
  }
}

void verify_losses(VerifyState& vs) {
  LossConfig lc;
  double pos = spot_pos_term(0.55, lc);
  vs.report("fixture: positive margin-gap penalty at s=0.55",
            std::abs(pos - 0.13701) < 1e-4, "got " + std::to_string(pos));
  double neg = spot_neg_term(0.55, lc);
  vs.report("fixture: negative margin-gap penalty at s=0.55, T=10",
            std::abs(neg - 0.16945) < 1e-4, "got " + std::to_string(neg));
  vs.report("fixture: satisfied margins give exactly zero",
            spot_pos_term(0.8, lc) == 0.0 && spot_neg_term(0.3, lc) == 0.0);
  bool dominance = true;
  LossConfig rl = lc;
  rl.kind = SpotLossKind::ranked_list;
  for (int i = 1; i <= 99; ++i) {
    double s = 0.5 + i * 0.001;
    if (!(spot_neg_term(s, lc) > spot_neg_term(s, rl) &&
          spot_pos_term(s, lc) > spot_pos_term(s, rl)))
      dominance = false;
  }
  vs.report("property: gap penalty dominates plain ranked-list term on (0.5, 0.6)", dominance);
}

int cmd_verify(const std::string& mode) {
  VerifyState vs;
  auto t0 = std::chrono::steady_clock::now();
  if (mode == "gradcheck" || mode == "all") verify_gradcheck(vs);
  if (mode == "oracles" || mode == "all") verify_oracles(vs);
  if (mode == "losses" || mode == "all") verify_losses(vs);
  double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::printf("verification %s in %.1fs\n", vs.failed == 0 ? "passed" : "FAILED", secs);
  return vs.failed == 0 ? 0 : 3;
}

}  // namespace

int main(int argc, char** argv) {
  apply_thread_cap();

  CLI::App app{"one-shot glyph spotting: synthesis, training, evaluation, spotting"};
  app.require_subcommand(1);

  std::string config_path, out = "out", split = "both", baseline, precision = "f32";
  std::string data_dir, ckpt_path, resume_path, page_path, support_path, levels_csv;
  std::string verify_mode = "all";
  std::vector<std::string> overrides;
  int64_t seed = -1;
  double angle = 0.0;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "key/value config file");
    sub->add_option("--seed", seed, "seed override");
    sub->add_option("--out", out, "output directory");
    sub->add_option("--set", overrides, "config override, section.key=value")->take_all();
    sub->add_option("--precision", precision, "float width")
        ->check(CLI::IsMember({"f32", "f64"}));
  };

  CLI::App* synth = app.add_subcommand("synth", "generate a synthetic page corpus");
  add_common(synth);

  CLI::App* train = app.add_subcommand("train", "train the spotting model");
  add_common(train);
  train->add_option("dataset", data_dir, "dataset root")->required();
  train->add_option("--resume", resume_path, "checkpoint to resume from");

  CLI::App* eval = app.add_subcommand("eval", "evaluate on a dataset");
  add_common(eval);
  eval->add_option("dataset", data_dir, "dataset root")->required();
  eval->add_option("--checkpoint", ckpt_path, "model checkpoint");
  eval->add_option("--split", split, "class split to evaluate")
      ->check(CLI::IsMember({"base", "novel", "both"}));
  eval->add_option("--baseline", baseline, "baseline instead of the trained model")
      ->check(CLI::IsMember({"dsw"}));
  eval->add_option("--levels", levels_csv, "pyramid levels, comma-separated");
  eval->add_option("--angle", angle, "rotate pages by this many degrees before evaluating");

  CLI::App* spot = app.add_subcommand("spot", "spot one glyph on one page");
  add_common(spot);
  spot->add_option("--checkpoint", ckpt_path, "model checkpoint")->required();
  spot->add_option("page", page_path, "query page image (PNG)")->required();
  spot->add_option("support", support_path, "support glyph image (PNG)")->required();
  spot->add_option("--levels", levels_csv, "pyramid levels, comma-separated");

  CLI::App* verify = app.add_subcommand("verify", "run the self-check suites");
  verify->add_option("--mode", verify_mode, "which suite")
      ->check(CLI::IsMember({"gradcheck", "oracles", "losses", "all"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;  // usage errors exit 1, --help exits 0
  }

  try {
    Config cfg = config_path.empty() ? Config() : Config::from_file(config_path);
    for (const auto& o : overrides) cfg.parse_override(o);
    if (seed >= 0) {
      cfg.apply_override("train.seed", std::to_string(seed));
      cfg.apply_override("synth.seed", std::to_string(seed));
    }
    if (!levels_csv.empty()) cfg.apply_override("eval.levels", levels_csv);

    bool f64 = precision == "f64";
    if (synth->parsed()) return cmd_synth(cfg, out);
    if (train->parsed())
      return f64 ? cmd_train<double>(cfg, data_dir, out, resume_path)
                 : cmd_train<float>(cfg, data_dir, out, resume_path);
    if (eval->parsed())
      return f64 ? cmd_eval<double>(cfg, data_dir, ckpt_path, out, split, baseline == "dsw", angle)
                 : cmd_eval<float>(cfg, data_dir, ckpt_path, out, split, baseline == "dsw", angle);
    if (spot->parsed())
      return f64 ? cmd_spot<double>(cfg, ckpt_path, page_path, support_path, out)
                 : cmd_spot<float>(cfg, ckpt_path, page_path, support_path, out);
    if (verify->parsed()) return cmd_verify(verify_mode);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 1;
  } catch (const DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 1;
}
