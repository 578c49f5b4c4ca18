#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "ots/data.hpp"

using namespace ots;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream is(p);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

SynthConfig tiny_config() {
  SynthConfig cfg;
  cfg.n_base_classes = 6;
  cfg.n_novel_classes = 3;
  cfg.pages = 4;
  cfg.page_w = 320;
  cfg.page_h = 320;
  cfg.glyphs_min = 6;
  cfg.glyphs_max = 12;
  cfg.seed = 42;
  return cfg;
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("generation is deterministic per seed") {
  TempDir a("ots_data_a"), b("ots_data_b");
  SynthConfig cfg = tiny_config();
  generate_synthetic_dataset(cfg, a.path.string());
  generate_synthetic_dataset(cfg, b.path.string());
  CHECK(slurp(a.path / "annotations.json") == slurp(b.path / "annotations.json"));
  CHECK(slurp(a.path / "split.json") == slurp(b.path / "split.json"));
  CHECK(slurp(a.path / "pages/page_000.png") == slurp(b.path / "pages/page_000.png"));
}

TEST_CASE("generated corpus loads, boxes in bounds, every class present") {
  TempDir dir("ots_data_load");
  SynthConfig cfg = tiny_config();
  generate_synthetic_dataset(cfg, dir.path.string());
  Dataset ds = load_dataset(dir.path.string());  // load validates bounds
  CHECK((int)ds.pages.size() == cfg.pages);
  CHECK((int)ds.base_ids.size() == cfg.n_base_classes);
  CHECK((int)ds.novel_ids.size() == cfg.n_novel_classes);

  std::map<int, int> counts;
  for (const auto& pa : ds.pages)
    for (int cls : pa.classes) ++counts[cls];
  for (int c = 0; c < cfg.n_base_classes + cfg.n_novel_classes; ++c)
    CHECK(counts[c] >= 1);  // guaranteed placement
  for (const auto& [cls, path] : ds.gallery_paths) CHECK(fs::exists(path));
}

TEST_CASE("high frequency skew produces singleton classes") {
  TempDir dir("ots_data_skew");
  SynthConfig cfg = tiny_config();
  cfg.n_base_classes = 20;
  cfg.n_novel_classes = 10;
  cfg.frequency_skew = 3.0;
  cfg.pages = 6;
  generate_synthetic_dataset(cfg, dir.path.string());
  Dataset ds = load_dataset(dir.path.string());
  std::map<int, int> counts;
  for (const auto& pa : ds.pages)
    for (int cls : pa.classes) ++counts[cls];
  int singletons = 0;
  for (const auto& [cls, n] : counts)
    if (n == 1) ++singletons;
  CHECK(singletons > 0);
}

TEST_CASE("loader rejects malformed datasets") {
  TempDir dir("ots_data_bad");
  SynthConfig cfg = tiny_config();
  generate_synthetic_dataset(cfg, dir.path.string());

  SUBCASE("overlapping base and novel ids") {
    std::ofstream(dir.path / "split.json") << R"({"base":[0,1,2],"novel":[2,3]})";
    CHECK_THROWS_AS(load_dataset(dir.path.string()), DataError);
  }
  SUBCASE("negative class id") {
    std::ofstream(dir.path / "annotations.json")
        << R"([{"image":"pages/page_000.png","width":320,"height":320,)"
         << R"("boxes":[{"x0":1,"y0":1,"x1":5,"y1":5,"class":-1}]}])";
    CHECK_THROWS_AS(load_dataset(dir.path.string()), DataError);
  }
  SUBCASE("box outside page bounds") {
    std::ofstream(dir.path / "annotations.json")
        << R"([{"image":"pages/page_000.png","width":320,"height":320,)"
         << R"("boxes":[{"x0":1,"y0":1,"x1":500,"y1":5,"class":0}]}])";
    CHECK_THROWS_AS(load_dataset(dir.path.string()), DataError);
  }
  SUBCASE("missing gallery entry") {
    fs::remove(dir.path / "gallery" / "0.png");
    std::ofstream(dir.path / "annotations.json")
        << R"([{"image":"pages/page_000.png","width":320,"height":320,)"
         << R"("boxes":[{"x0":1,"y0":1,"x1":5,"y1":5,"class":0}]}])";
    CHECK_THROWS_AS(load_dataset(dir.path.string()), DataError);
  }
}

TEST_CASE("episode sampling") {
  TempDir dir("ots_data_ep");
  SynthConfig cfg = tiny_config();
  generate_synthetic_dataset(cfg, dir.path.string());
  LoadedDataset ds = load_dataset_images(load_dataset(dir.path.string()));

  SUBCASE("fixed rng reproduces the episode") {
    Rng r1(5), r2(5);
    Episode e1 = sample_episode(ds, r1, 160, ds.meta.base_ids);
    Episode e2 = sample_episode(ds, r2, 160, ds.meta.base_ids);
    CHECK(e1.class_id == e2.class_id);
    CHECK(e1.page_index == e2.page_index);
    CHECK(e1.crop_x == e2.crop_x);
    CHECK(e1.gt.size() == e2.gt.size());
    CHECK(e1.query.pix == e2.query.pix);
  }
  SUBCASE("full-page crop keeps boxes unchanged") {
    Rng rng(7);
    Episode ep = sample_episode(ds, rng, 320, ds.meta.base_ids);
    CHECK(ep.crop_x == 0);
    CHECK(ep.crop_y == 0);
    const auto& pa = ds.meta.pages[ep.page_index];
    std::vector<Box> want;
    for (size_t b = 0; b < pa.boxes.size(); ++b)
      if (pa.classes[b] == ep.class_id) want.push_back(pa.boxes[b]);
    REQUIRE(ep.gt.size() == want.size());
    for (size_t i = 0; i < want.size(); ++i) {
      CHECK(ep.gt[i].x0 == want[i].x0);
      CHECK(ep.gt[i].y1 == want[i].y1);
    }
  }
  SUBCASE("support class is always in the requested pool") {
    Rng rng(11);
    for (int i = 0; i < 20; ++i) {
      Episode ep = sample_episode(ds, rng, 160, ds.meta.base_ids);
      CHECK(ds.meta.is_base(ep.class_id));
    }
  }
  SUBCASE("clipped boxes match the interval-intersection oracle") {
    Rng rng(13);
    for (int i = 0; i < 20; ++i) {
      Episode ep = sample_episode(ds, rng, 160, ds.meta.base_ids);
      Box crop{(double)ep.crop_x, (double)ep.crop_y, ep.crop_x + 160.0, ep.crop_y + 160.0};
      const auto& pa = ds.meta.pages[ep.page_index];
      std::vector<Box> want;
      for (size_t b = 0; b < pa.boxes.size(); ++b) {
        if (pa.classes[b] != ep.class_id) continue;
        const Box& orig = pa.boxes[b];
        double ix0 = std::max(orig.x0, crop.x0), iy0 = std::max(orig.y0, crop.y0);
        double ix1 = std::min(orig.x1, crop.x1), iy1 = std::min(orig.y1, crop.y1);
        double inter = std::max(0.0, ix1 - ix0) * std::max(0.0, iy1 - iy0);
        if (inter >= 0.25 * orig.area())
          want.push_back({ix0 - crop.x0, iy0 - crop.y0, ix1 - crop.x0, iy1 - crop.y0});
      }
      REQUIRE(ep.gt.size() == want.size());
      for (size_t b = 0; b < want.size(); ++b) {
        CHECK(ep.gt[b].x0 == doctest::Approx(want[b].x0).epsilon(1e-12));
        CHECK(ep.gt[b].x1 == doctest::Approx(want[b].x1).epsilon(1e-12));
        CHECK(ep.gt[b].y0 == doctest::Approx(want[b].y0).epsilon(1e-12));
        CHECK(ep.gt[b].y1 == doctest::Approx(want[b].y1).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("page rotation") {
  GrayImage img(100, 100, 1.0f);
  for (int y = 40; y < 60; ++y)
    for (int x = 20; x < 35; ++x) img.at(x, y) = 0.0f;
  std::vector<Box> boxes = {{20, 40, 35, 60}};

  SUBCASE("zero angle is the identity") {
    auto [rot, rb] = rotate_page(img, boxes, 0.0);
    CHECK(rot.pix == img.pix);
    CHECK(rb[0].x0 == doctest::Approx(20.0));
    CHECK(rb[0].y1 == doctest::Approx(60.0));
  }
  SUBCASE("corners match an independent rotation-matrix computation") {
    double angle = 10.0;
    auto [rot, rb] = rotate_page(img, boxes, angle);
    double a = angle * M_PI / 180.0, c = std::cos(a), s = std::sin(a);
    double cx = 49.5, cy = 49.5;
    double xmin = 1e30, xmax = -1e30, ymin = 1e30, ymax = -1e30;
    double xs[4] = {20, 35, 35, 20}, ys[4] = {40, 40, 60, 60};
    for (int i = 0; i < 4; ++i) {
      double rx = c * (xs[i] - cx) - s * (ys[i] - cy) + cx;
      double ry = s * (xs[i] - cx) + c * (ys[i] - cy) + cy;
      xmin = std::min(xmin, rx);
      xmax = std::max(xmax, rx);
      ymin = std::min(ymin, ry);
      ymax = std::max(ymax, ry);
    }
    CHECK(rb[0].x0 == doctest::Approx(xmin).epsilon(1e-9));
    CHECK(rb[0].x1 == doctest::Approx(xmax).epsilon(1e-9));
    CHECK(rb[0].y0 == doctest::Approx(ymin).epsilon(1e-9));
    CHECK(rb[0].y1 == doctest::Approx(ymax).epsilon(1e-9));
    // the rotated ink should sit inside the rotated box (sample the centroid)
    CHECK(rot.at((int)((xmin + xmax) / 2), (int)((ymin + ymax) / 2)) < 0.5f);
  }
  SUBCASE("angles beyond 45 degrees are rejected") {
    CHECK_THROWS_AS(rotate_page(img, boxes, 60.0), TensorError);
  }
}

TEST_CASE("tensor conversion and padding") {
  GrayImage img(5, 3, 0.25f);
  img.at(1, 2) = 0.75f;
  Tensor<float> t = image_to_tensor<float>(img);
  CHECK(t.shape() == Shape{1, 3, 3, 5});
  for (int c = 0; c < 3; ++c) {
    CHECK(t.values()[(size_t)c * 15] == 0.25f);
    CHECK(t.values()[(size_t)c * 15 + 2 * 5 + 1] == 0.75f);
  }
  GrayImage padded = pad_to_multiple(img, 4);
  CHECK(padded.width == 8);
  CHECK(padded.height == 4);
  CHECK(padded.at(1, 2) == 0.75f);
  CHECK(padded.at(7, 3) == 1.0f);
  GrayImage same = pad_to_multiple(padded, 4);
  CHECK(same.pix == padded.pix);
}
