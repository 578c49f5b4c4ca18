#include "ots/data.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

namespace fs = std::filesystem;
using nlohmann::json;

namespace ots {

namespace {

[[noreturn]] void data_fail(const std::string& msg) { throw DataError(msg); }

// ink threshold separating glyph pixels from paper when measuring extents
constexpr float kInkThreshold = 0.6f;

}  // namespace

GlyphClass make_glyph_class(uint64_t seed, int class_id) {
  Rng rng(seed * 0x9e3779b97f4a7c15ULL + (uint64_t)class_id + 1);
  std::uniform_int_distribution<int> n_strokes(3, 6);
  std::uniform_real_distribution<double> coord(0.12, 0.88);
  std::uniform_real_distribution<double> rad(0.035, 0.06);
  GlyphClass cls;
  int n = n_strokes(rng);
  for (int i = 0; i < n; ++i) {
    GlyphClass::Stroke s;
    s.x0 = coord(rng);
    s.y0 = coord(rng);
    // bias toward medium-length strokes so glyphs stay legible
    double ang = std::uniform_real_distribution<double>(0, 2 * M_PI)(rng);
    double len = std::uniform_real_distribution<double>(0.25, 0.6)(rng);
    s.x1 = std::clamp(s.x0 + len * std::cos(ang), 0.08, 0.92);
    s.y1 = std::clamp(s.y0 + len * std::sin(ang), 0.08, 0.92);
    s.radius = rad(rng);
    cls.strokes.push_back(s);
  }
  // Rescale the stroke geometry to span a fixed extent so the rendered ink
  // box tracks the nominal glyph size instead of the luck of the draw.
  double lo_x = 1, hi_x = 0, lo_y = 1, hi_y = 0;
  for (const auto& s : cls.strokes) {
    lo_x = std::min({lo_x, s.x0 - s.radius, s.x1 - s.radius});
    hi_x = std::max({hi_x, s.x0 + s.radius, s.x1 + s.radius});
    lo_y = std::min({lo_y, s.y0 - s.radius, s.y1 - s.radius});
    hi_y = std::max({hi_y, s.y0 + s.radius, s.y1 + s.radius});
  }
  const double target_lo = 0.08, target_hi = 0.92;
  double sx = (target_hi - target_lo) / std::max(hi_x - lo_x, 1e-6);
  double sy = (target_hi - target_lo) / std::max(hi_y - lo_y, 1e-6);
  for (auto& s : cls.strokes) {
    s.x0 = target_lo + (s.x0 - lo_x) * sx;
    s.x1 = target_lo + (s.x1 - lo_x) * sx;
    s.y0 = target_lo + (s.y0 - lo_y) * sy;
    s.y1 = target_lo + (s.y1 - lo_y) * sy;
  }
  return cls;
}

GrayImage render_glyph(const GlyphClass& cls, int size_px, double rot_deg,
                       double thickness_scale, Box* tight_box) {
  GrayImage img(size_px, size_px, 1.0f);
  double c = std::cos(rot_deg * M_PI / 180.0), s = std::sin(rot_deg * M_PI / 180.0);
  auto map_pt = [&](double u, double v, double& x, double& y) {
    // rotate about the unit-square center, then scale to pixels
    double du = u - 0.5, dv = v - 0.5;
    x = (c * du - s * dv + 0.5) * (size_px - 1);
    y = (s * du + c * dv + 0.5) * (size_px - 1);
  };
  for (const auto& st : cls.strokes) {
    double x0, y0, x1, y1;
    map_pt(st.x0, st.y0, x0, y0);
    map_pt(st.x1, st.y1, x1, y1);
    draw_stroke(img, x0, y0, x1, y1, st.radius * size_px * thickness_scale, 0.05f);
  }
  if (tight_box) {
    int xmin = size_px, ymin = size_px, xmax = -1, ymax = -1;
    for (int y = 0; y < size_px; ++y)
      for (int x = 0; x < size_px; ++x)
        if (img.at(x, y) < kInkThreshold) {
          xmin = std::min(xmin, x);
          xmax = std::max(xmax, x);
          ymin = std::min(ymin, y);
          ymax = std::max(ymax, y);
        }
    if (xmax < xmin)
      *tight_box = {0, 0, 0, 0};
    else
      *tight_box = {(double)xmin, (double)ymin, (double)xmax + 1, (double)ymax + 1};
  }
  return img;
}

void generate_synthetic_dataset(const SynthConfig& cfg, const std::string& out_dir) {
  check(cfg.n_base_classes > 0 && cfg.n_novel_classes > 0, "class counts must be positive");
  check(cfg.glyph_max_px >= cfg.glyph_min_px, "glyph size range inverted");
  std::error_code ec;
  fs::create_directories(fs::path(out_dir) / "pages", ec);
  fs::create_directories(fs::path(out_dir) / "gallery", ec);
  if (ec) data_fail("cannot create dataset directory: " + out_dir + ": " + ec.message());

  int n_classes = cfg.n_base_classes + cfg.n_novel_classes;
  std::vector<GlyphClass> classes;
  for (int i = 0; i < n_classes; ++i) classes.push_back(make_glyph_class(cfg.seed, i));

  Rng rng(cfg.seed);

  // base/novel membership is a seeded shuffle of the class ids
  std::vector<int> ids(n_classes);
  for (int i = 0; i < n_classes; ++i) ids[i] = i;
  std::shuffle(ids.begin(), ids.end(), rng);
  std::vector<int> base_ids(ids.begin(), ids.begin() + cfg.n_base_classes);
  std::vector<int> novel_ids(ids.begin() + cfg.n_base_classes, ids.end());
  std::sort(base_ids.begin(), base_ids.end());
  std::sort(novel_ids.begin(), novel_ids.end());

  // long-tail class weights over a seeded rank permutation
  std::vector<int> rank(ids);
  std::shuffle(rank.begin(), rank.end(), rng);
  std::vector<double> weights(n_classes);
  for (int r = 0; r < n_classes; ++r)
    weights[rank[r]] = std::pow((double)(r + 1), -cfg.frequency_skew);
  std::discrete_distribution<int> class_dist(weights.begin(), weights.end());

  // loose grid sized for the largest glyph
  int cell = cfg.glyph_max_px + 8;
  int cols = std::max(1, cfg.page_w / cell);
  int rows = std::max(1, cfg.page_h / cell);
  int max_per_page = cols * rows;

  // every class gets at least one guaranteed placement somewhere in the
  // corpus so evaluation always has ground truth per class
  std::vector<int> forced(n_classes);
  for (int i = 0; i < n_classes; ++i) forced[i] = i;
  std::shuffle(forced.begin(), forced.end(), rng);
  std::vector<std::vector<int>> page_forced(cfg.pages);
  for (int i = 0; i < n_classes; ++i) page_forced[i % cfg.pages].push_back(forced[i]);

  json pages_json = json::array();
  for (int p = 0; p < cfg.pages; ++p) {
    GrayImage page(cfg.page_w, cfg.page_h, 1.0f);
    // paper texture
    std::uniform_real_distribution<float> noise(-(float)cfg.noise_amp, (float)cfg.noise_amp);
    for (auto& v : page.pix) v = std::clamp(v - std::abs(noise(rng)), 0.0f, 1.0f);

    std::uniform_int_distribution<int> n_glyphs_dist(cfg.glyphs_min, cfg.glyphs_max);
    int n_glyphs = std::min(n_glyphs_dist(rng), max_per_page);

    std::vector<int> cells(max_per_page);
    for (int i = 0; i < max_per_page; ++i) cells[i] = i;
    std::shuffle(cells.begin(), cells.end(), rng);

    json boxes_json = json::array();
    std::uniform_int_distribution<int> size_dist(cfg.glyph_min_px, cfg.glyph_max_px);
    std::uniform_real_distribution<double> rot_dist(-cfg.max_jitter_rot_deg,
                                                    cfg.max_jitter_rot_deg);
    std::uniform_real_distribution<double> thick_dist(0.85, 1.15);

    n_glyphs = std::max(n_glyphs, (int)page_forced[p].size());
    for (int g = 0; g < n_glyphs; ++g) {
      int cls = g < (int)page_forced[p].size() ? page_forced[p][g] : class_dist(rng);
      int size_px = size_dist(rng);
      Box tight;
      GrayImage glyph = render_glyph(classes[cls], size_px, rot_dist(rng), thick_dist(rng),
                                     &tight);
      if (!tight.valid()) continue;

      int cell_idx = cells[g];
      int cx0 = (cell_idx % cols) * cell, cy0 = (cell_idx / cols) * cell;
      std::uniform_int_distribution<int> jx(0, std::max(0, cell - size_px));
      int ox = std::min(cx0 + jx(rng), cfg.page_w - size_px);
      int oy = std::min(cy0 + jx(rng), cfg.page_h - size_px);

      for (int y = 0; y < size_px; ++y)
        for (int x = 0; x < size_px; ++x)
          page.at(ox + x, oy + y) = std::min(page.at(ox + x, oy + y), glyph.at(x, y));

      boxes_json.push_back({{"x0", (int)std::floor(tight.x0) + ox},
                            {"y0", (int)std::floor(tight.y0) + oy},
                            {"x1", (int)std::ceil(tight.x1) + ox},
                            {"y1", (int)std::ceil(tight.y1) + oy},
                            {"class", cls}});
    }

    char name[32];
    std::snprintf(name, sizeof(name), "page_%03d.png", p);
    save_png_gray(page, (fs::path(out_dir) / "pages" / name).string());
    pages_json.push_back({{"image", std::string("pages/") + name},
                          {"width", cfg.page_w},
                          {"height", cfg.page_h},
                          {"boxes", boxes_json}});
  }

  // clean exemplars, no jitter
  for (int i = 0; i < n_classes; ++i) {
    GrayImage g = render_glyph(classes[i], cfg.gallery_px, 0.0, 1.0);
    save_png_gray(g, (fs::path(out_dir) / "gallery" / (std::to_string(i) + ".png")).string());
  }

  {
    std::ofstream os(fs::path(out_dir) / "annotations.json");
    if (!os) data_fail("cannot write annotations.json in " + out_dir);
    os << pages_json.dump(1) << "\n";
  }
  {
    json split = {{"base", base_ids}, {"novel", novel_ids}};
    std::ofstream os(fs::path(out_dir) / "split.json");
    if (!os) data_fail("cannot write split.json in " + out_dir);
    os << split.dump(1) << "\n";
  }
}

Dataset load_dataset(const std::string& root) {
  Dataset ds;
  ds.root = root;

  auto read_json = [&](const std::string& name) {
    std::ifstream is(fs::path(root) / name);
    if (!is) data_fail("missing " + name + " under " + root);
    json j;
    try {
      is >> j;
    } catch (const json::exception& e) {
      data_fail(root + "/" + name + ": " + e.what());
    }
    return j;
  };

  json split = read_json("split.json");
  ds.base_ids = split.at("base").get<std::vector<int>>();
  ds.novel_ids = split.at("novel").get<std::vector<int>>();
  for (int b : ds.base_ids)
    for (int n : ds.novel_ids)
      if (b == n) data_fail("split.json: class " + std::to_string(b) + " is in both base and novel");

  json pages = read_json("annotations.json");
  if (!pages.is_array()) data_fail("annotations.json: expected a top-level array");
  int page_no = 0;
  for (const auto& pj : pages) {
    PageAnnotation pa;
    pa.image_path = pj.at("image").get<std::string>();
    pa.width = pj.at("width").get<int>();
    pa.height = pj.at("height").get<int>();
    int box_no = 0;
    for (const auto& bj : pj.at("boxes")) {
      Box b{(double)bj.at("x0").get<int>(), (double)bj.at("y0").get<int>(),
            (double)bj.at("x1").get<int>(), (double)bj.at("y1").get<int>()};
      int cls = bj.at("class").get<int>();
      std::string where = "annotations.json: page " + std::to_string(page_no) + " box " +
                          std::to_string(box_no);
      if (cls < 0) data_fail(where + ": negative class id");
      if (b.x0 < 0 || b.y0 < 0 || b.x1 > pa.width || b.y1 > pa.height || !b.valid())
        data_fail(where + ": box outside page bounds");
      pa.boxes.push_back(b);
      pa.classes.push_back(cls);
      ++box_no;
    }
    ds.pages.push_back(std::move(pa));
    ++page_no;
  }

  // gallery files, one per annotated class
  for (const auto& pa : ds.pages)
    for (int cls : pa.classes)
      if (!ds.gallery_paths.count(cls)) {
        fs::path p = fs::path(root) / "gallery" / (std::to_string(cls) + ".png");
        if (!fs::exists(p))
          data_fail("gallery entry missing for annotated class " + std::to_string(cls));
        ds.gallery_paths[cls] = p.string();
      }
  for (int cls : ds.base_ids)
    if (!ds.gallery_paths.count(cls)) {
      fs::path p = fs::path(root) / "gallery" / (std::to_string(cls) + ".png");
      if (fs::exists(p)) ds.gallery_paths[cls] = p.string();
    }
  for (int cls : ds.novel_ids)
    if (!ds.gallery_paths.count(cls)) {
      fs::path p = fs::path(root) / "gallery" / (std::to_string(cls) + ".png");
      if (fs::exists(p)) ds.gallery_paths[cls] = p.string();
    }
  return ds;
}

LoadedDataset load_dataset_images(const Dataset& meta) {
  LoadedDataset out;
  out.meta = meta;
  for (const auto& pa : meta.pages)
    out.pages.push_back(load_png_gray((fs::path(meta.root) / pa.image_path).string()));
  for (const auto& [cls, path] : meta.gallery_paths) out.gallery[cls] = load_png_gray(path);
  return out;
}

GrayImage pad_to_multiple(const GrayImage& img, int factor) {
  int w = (img.width + factor - 1) / factor * factor;
  int h = (img.height + factor - 1) / factor * factor;
  if (w == img.width && h == img.height) return img;
  GrayImage out(w, h, 1.0f);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) out.at(x, y) = img.at(x, y);
  return out;
}

Episode sample_episode(const LoadedDataset& ds, Rng& rng, int crop,
                       const std::vector<int>& support_pool, double min_area_frac,
                       int max_retries) {
  check(!ds.pages.empty(), "sample_episode: empty dataset");
  check(!support_pool.empty(), "sample_episode: empty support pool");

  auto crop_once = [&](Episode& ep) {
    std::uniform_int_distribution<size_t> page_dist(0, ds.pages.size() - 1);
    size_t pi = page_dist(rng);
    const GrayImage& page_raw = ds.pages[pi];
    const PageAnnotation& ann = ds.meta.pages[pi];

    GrayImage page = page_raw;
    if (page.width < crop || page.height < crop) {
      GrayImage padded(std::max(crop, page.width), std::max(crop, page.height), 1.0f);
      for (int y = 0; y < page.height; ++y)
        for (int x = 0; x < page.width; ++x) padded.at(x, y) = page.at(x, y);
      page = padded;
    }
    std::uniform_int_distribution<int> xd(0, page.width - crop), yd(0, page.height - crop);
    int cx = xd(rng), cy = yd(rng);

    ep.page_index = (int)pi;
    ep.crop_x = cx;
    ep.crop_y = cy;
    ep.query = GrayImage(crop, crop);
    for (int y = 0; y < crop; ++y)
      for (int x = 0; x < crop; ++x) ep.query.at(x, y) = page.at(cx + x, cy + y);

    // support classes with a surviving instance in the crop
    Box crop_box{(double)cx, (double)cy, (double)(cx + crop), (double)(cy + crop)};
    std::vector<int> present;
    for (size_t b = 0; b < ann.boxes.size(); ++b) {
      int cls = ann.classes[b];
      bool in_pool = false;
      for (int pc : support_pool)
        if (pc == cls) { in_pool = true; break; }
      if (!in_pool) continue;
      double inter = intersection_area(ann.boxes[b], crop_box);
      if (inter >= min_area_frac * ann.boxes[b].area()) {
        bool seen = false;
        for (int pcls : present)
          if (pcls == cls) { seen = true; break; }
        if (!seen) present.push_back(cls);
      }
    }
    return present;
  };

  Episode ep;
  std::vector<int> present;
  for (int attempt = 0; attempt <= max_retries; ++attempt) {
    present = crop_once(ep);
    if (!present.empty()) break;
  }

  int cls;
  if (present.empty()) {
    // negative-only episode: any pool class works as the support
    std::uniform_int_distribution<size_t> cd(0, support_pool.size() - 1);
    cls = support_pool[cd(rng)];
  } else {
    std::sort(present.begin(), present.end());
    std::uniform_int_distribution<size_t> cd(0, present.size() - 1);
    cls = present[cd(rng)];
  }
  ep.class_id = cls;

  auto git = ds.gallery.find(cls);
  if (git == ds.gallery.end()) data_fail("no gallery exemplar for class " + std::to_string(cls));
  ep.support = git->second;

  const PageAnnotation& ann = ds.meta.pages[ep.page_index];
  Box crop_box{(double)ep.crop_x, (double)ep.crop_y, (double)(ep.crop_x + crop),
               (double)(ep.crop_y + crop)};
  for (size_t b = 0; b < ann.boxes.size(); ++b) {
    if (ann.classes[b] != cls) continue;
    const Box& orig = ann.boxes[b];
    double inter = intersection_area(orig, crop_box);
    if (inter < min_area_frac * orig.area()) continue;
    Box clipped{std::max(orig.x0, crop_box.x0) - ep.crop_x,
                std::max(orig.y0, crop_box.y0) - ep.crop_y,
                std::min(orig.x1, crop_box.x1) - ep.crop_x,
                std::min(orig.y1, crop_box.y1) - ep.crop_y};
    if (clipped.valid()) ep.gt.push_back(clipped);
  }
  return ep;
}

std::pair<GrayImage, std::vector<Box>> rotate_page(const GrayImage& img,
                                                   const std::vector<Box>& boxes,
                                                   double angle_deg) {
  check(std::abs(angle_deg) <= 45.0, "rotate_page: |angle| must be <= 45 degrees");
  GrayImage rot = rotate_gray(img, angle_deg, 1.0f);
  // forward map matching rotate_gray's inverse sampling
  double a = angle_deg * M_PI / 180.0;
  double c = std::cos(a), s = std::sin(a);
  double cx = (img.width - 1) / 2.0, cy = (img.height - 1) / 2.0;
  std::vector<Box> out;
  out.reserve(boxes.size());
  for (const Box& b : boxes) {
    double xs[4] = {b.x0, b.x1, b.x1, b.x0};
    double ys[4] = {b.y0, b.y0, b.y1, b.y1};
    double xmin = 1e30, xmax = -1e30, ymin = 1e30, ymax = -1e30;
    for (int i = 0; i < 4; ++i) {
      double dx = xs[i] - cx, dy = ys[i] - cy;
      double rx = c * dx - s * dy + cx;
      double ry = s * dx + c * dy + cy;
      xmin = std::min(xmin, rx);
      xmax = std::max(xmax, rx);
      ymin = std::min(ymin, ry);
      ymax = std::max(ymax, ry);
    }
    out.push_back(Box{xmin, ymin, xmax, ymax}.clipped(img.width, img.height));
  }
  return {std::move(rot), std::move(out)};
}

}  // namespace ots
