#pragma once

// Grayscale float images (0 = black ink, 1 = white page) plus PNG IO and the
// small set of raster ops the generator and evaluator need.

#include <cstdint>
#include <string>
#include <vector>

namespace ots {

struct GrayImage {
  int width = 0;
  int height = 0;
  std::vector<float> pix;  // row-major, [0,1]

  GrayImage() = default;
  GrayImage(int w, int h, float fill = 1.0f) : width(w), height(h), pix((size_t)w * h, fill) {}

  float& at(int x, int y) { return pix[(size_t)y * width + x]; }
  float at(int x, int y) const { return pix[(size_t)y * width + x]; }
};

struct RgbImage {
  int width = 0;
  int height = 0;
  std::vector<uint8_t> pix;  // interleaved RGB

  RgbImage() = default;
  RgbImage(int w, int h, uint8_t fill = 255) : width(w), height(h), pix((size_t)w * h * 3, fill) {}

  static RgbImage from_gray(const GrayImage& g);
  void set(int x, int y, uint8_t r, uint8_t gg, uint8_t b) {
    size_t i = ((size_t)y * width + x) * 3;
    pix[i] = r;
    pix[i + 1] = gg;
    pix[i + 2] = b;
  }
};

GrayImage load_png_gray(const std::string& path);
void save_png_gray(const GrayImage& img, const std::string& path);
void save_png_rgb(const RgbImage& img, const std::string& path);

GrayImage resize_bilinear(const GrayImage& img, int out_w, int out_h);

// Rotation about the image center, inverse-mapped bilinear, border fill.
GrayImage rotate_gray(const GrayImage& img, double angle_deg, float fill = 1.0f);

// Draws a thick line segment by stamping disks (ink = min blend).
void draw_stroke(GrayImage& img, double x0, double y0, double x1, double y1, double radius,
                 float ink);

void draw_rect_outline(RgbImage& img, int x0, int y0, int x1, int y1, uint8_t r, uint8_t g,
                       uint8_t b);

}  // namespace ots
