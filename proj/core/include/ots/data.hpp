#pragma once

// Synthetic manuscript corpus: procedural stroke glyph classes, page
// rendering with per-instance jitter and a long-tail class distribution,
// dataset IO against a fixed JSON schema, episode sampling for training, and
// the page-rotation disturbance used by the robustness sweep.

#include <map>
#include <string>
#include <vector>

#include "ots/geometry.hpp"
#include "ots/image.hpp"
#include "ots/tensor.hpp"

namespace ots {

struct DataError : std::runtime_error {
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

struct SynthConfig {
  int n_base_classes = 30;
  int n_novel_classes = 10;
  int pages = 30;
  int page_w = 640;
  int page_h = 640;
  int glyphs_min = 40;
  int glyphs_max = 120;
  int glyph_min_px = 40;  // rendered glyph size range
  int glyph_max_px = 72;
  double frequency_skew = 0.8;  // power-law exponent over class ranks
  double max_jitter_rot_deg = 3.0;
  double noise_amp = 0.04;
  int gallery_px = 64;
  uint64_t seed = 1;
};

struct PageAnnotation {
  std::string image_path;  // relative to the dataset root
  int width = 0, height = 0;
  std::vector<Box> boxes;
  std::vector<int> classes;  // parallel to boxes
};

struct Dataset {
  std::string root;
  std::vector<PageAnnotation> pages;
  std::map<int, std::string> gallery_paths;
  std::vector<int> base_ids, novel_ids;

  bool is_base(int cls) const {
    for (int b : base_ids)
      if (b == cls) return true;
    return false;
  }
};

// page pixel data alongside the metadata, for training and evaluation
struct LoadedDataset {
  Dataset meta;
  std::vector<GrayImage> pages;
  std::map<int, GrayImage> gallery;
};

struct Episode {
  GrayImage query;           // crop
  GrayImage support;         // gallery exemplar
  std::vector<Box> gt;       // support-class boxes in crop coordinates
  int class_id = -1;
  int page_index = -1;
  int crop_x = 0, crop_y = 0;
};

// deterministic per (seed, class) stroke composition in the unit square
struct GlyphClass {
  // x0, y0, x1, y1 in [0,1]; radius as a fraction of the glyph size
  struct Stroke {
    double x0, y0, x1, y1, radius;
  };
  std::vector<Stroke> strokes;
};

GlyphClass make_glyph_class(uint64_t seed, int class_id);

// Renders a glyph into a (size_px x size_px) buffer; rotation is applied to
// the stroke geometry. Returns the image and the tight ink bounding box.
GrayImage render_glyph(const GlyphClass& cls, int size_px, double rot_deg,
                       double thickness_scale, Box* tight_box = nullptr);

void generate_synthetic_dataset(const SynthConfig& cfg, const std::string& out_dir);

Dataset load_dataset(const std::string& root);
LoadedDataset load_dataset_images(const Dataset& meta);

// Uniform random crop; support class drawn uniformly from the base classes
// present in the crop, with bounded resampling before falling back to a
// negative-only episode. Boxes keeping under min_area_frac of their area
// after clipping are dropped.
Episode sample_episode(const LoadedDataset& ds, Rng& rng, int crop,
                       const std::vector<int>& support_pool, double min_area_frac = 0.25,
                       int max_retries = 8);

// Rotation about the page center (|angle| <= 45°); ground-truth boxes are
// replaced by the axis-aligned bounds of their rotated corners, clipped.
std::pair<GrayImage, std::vector<Box>> rotate_page(const GrayImage& img,
                                                   const std::vector<Box>& boxes,
                                                   double angle_deg);

// gray image -> [1,3,H,W] model input (channel-replicated)
template <typename T>
Tensor<T> image_to_tensor(const GrayImage& img) {
  Tensor<T> t = Tensor<T>::zeros({1, 3, img.height, img.width});
  int64_t hw = (int64_t)img.height * img.width;
  for (int64_t i = 0; i < hw; ++i) {
    T v = (T)img.pix[i];
    t.data()[i] = v;
    t.data()[hw + i] = v;
    t.data()[2 * hw + i] = v;
  }
  return t;
}

// pads right/bottom with white so both dimensions are multiples of `factor`
GrayImage pad_to_multiple(const GrayImage& img, int factor);

}  // namespace ots
