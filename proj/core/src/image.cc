#include "ots/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

namespace ots {

namespace {

struct FileCloser {
  FILE* f;
  ~FileCloser() {
    if (f) std::fclose(f);
  }
};

[[noreturn]] void io_fail(const std::string& msg) { throw std::runtime_error(msg); }

}  // namespace

RgbImage RgbImage::from_gray(const GrayImage& g) {
  RgbImage out(g.width, g.height);
  for (size_t i = 0; i < g.pix.size(); ++i) {
    uint8_t v = (uint8_t)std::clamp((int)std::lround(g.pix[i] * 255.0f), 0, 255);
    out.pix[i * 3] = out.pix[i * 3 + 1] = out.pix[i * 3 + 2] = v;
  }
  return out;
}

GrayImage load_png_gray(const std::string& path) {
  FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) io_fail("cannot open PNG: " + path);
  FileCloser closer{f};

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (!png || !info) io_fail("libpng init failed");
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    io_fail("PNG decode failed: " + path);
  }
  png_init_io(png, f);
  png_read_info(png, info);

  png_uint_32 w = png_get_image_width(png, info);
  png_uint_32 h = png_get_image_height(png, info);
  int color = png_get_color_type(png, info);
  int depth = png_get_bit_depth(png, info);

  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (color == PNG_COLOR_TYPE_RGB || color == PNG_COLOR_TYPE_RGB_ALPHA ||
      color == PNG_COLOR_TYPE_PALETTE)
    png_set_rgb_to_gray_fixed(png, 1, -1, -1);
  png_read_update_info(png, info);

  GrayImage img((int)w, (int)h);
  std::vector<png_byte> row(png_get_rowbytes(png, info));
  for (png_uint_32 y = 0; y < h; ++y) {
    png_read_row(png, row.data(), nullptr);
    for (png_uint_32 x = 0; x < w; ++x) img.at((int)x, (int)y) = row[x] / 255.0f;
  }
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

namespace {

void save_png_impl(const std::string& path, int w, int h, int channels,
                   const std::vector<uint8_t>& bytes) {
  FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) io_fail("cannot write PNG: " + path);
  FileCloser closer{f};

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (!png || !info) io_fail("libpng init failed");
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    io_fail("PNG encode failed: " + path);
  }
  png_init_io(png, f);
  png_set_IHDR(png, info, w, h, 8,
               channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < h; ++y)
    png_write_row(png, const_cast<png_bytep>(bytes.data() + (size_t)y * w * channels));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace

void save_png_gray(const GrayImage& img, const std::string& path) {
  std::vector<uint8_t> bytes(img.pix.size());
  for (size_t i = 0; i < img.pix.size(); ++i)
    bytes[i] = (uint8_t)std::clamp((int)std::lround(img.pix[i] * 255.0f), 0, 255);
  save_png_impl(path, img.width, img.height, 1, bytes);
}

void save_png_rgb(const RgbImage& img, const std::string& path) {
  save_png_impl(path, img.width, img.height, 3, img.pix);
}

GrayImage resize_bilinear(const GrayImage& img, int out_w, int out_h) {
  GrayImage out(out_w, out_h);
  float sx = out_w > 1 ? (float)(img.width - 1) / (out_w - 1) : 0.0f;
  float sy = out_h > 1 ? (float)(img.height - 1) / (out_h - 1) : 0.0f;
  for (int y = 0; y < out_h; ++y) {
    float fy = y * sy;
    int y0 = std::min((int)fy, img.height - 1);
    int y1 = std::min(y0 + 1, img.height - 1);
    float wy = fy - y0;
    for (int x = 0; x < out_w; ++x) {
      float fx = x * sx;
      int x0 = std::min((int)fx, img.width - 1);
      int x1 = std::min(x0 + 1, img.width - 1);
      float wx = fx - x0;
      out.at(x, y) = (1 - wy) * ((1 - wx) * img.at(x0, y0) + wx * img.at(x1, y0)) +
                     wy * ((1 - wx) * img.at(x0, y1) + wx * img.at(x1, y1));
    }
  }
  return out;
}

GrayImage rotate_gray(const GrayImage& img, double angle_deg, float fill) {
  double a = angle_deg * M_PI / 180.0;
  double c = std::cos(a), s = std::sin(a);
  double cx = (img.width - 1) / 2.0, cy = (img.height - 1) / 2.0;
  GrayImage out(img.width, img.height, fill);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      // inverse map: rotate by -angle about the center
      double dx = x - cx, dy = y - cy;
      double sxp = c * dx + s * dy + cx;
      double syp = -s * dx + c * dy + cy;
      if (sxp < 0 || syp < 0 || sxp > img.width - 1 || syp > img.height - 1) continue;
      int x0 = (int)sxp, y0 = (int)syp;
      int x1 = std::min(x0 + 1, img.width - 1), y1 = std::min(y0 + 1, img.height - 1);
      double wx = sxp - x0, wy = syp - y0;
      out.at(x, y) = (float)((1 - wy) * ((1 - wx) * img.at(x0, y0) + wx * img.at(x1, y0)) +
                             wy * ((1 - wx) * img.at(x0, y1) + wx * img.at(x1, y1)));
    }
  }
  return out;
}

void draw_stroke(GrayImage& img, double x0, double y0, double x1, double y1, double radius,
                 float ink) {
  double len = std::hypot(x1 - x0, y1 - y0);
  int steps = std::max(2, (int)std::ceil(len * 2));
  for (int i = 0; i <= steps; ++i) {
    double t = (double)i / steps;
    double cx = x0 + t * (x1 - x0);
    double cy = y0 + t * (y1 - y0);
    int lo_x = std::max(0, (int)std::floor(cx - radius - 1));
    int hi_x = std::min(img.width - 1, (int)std::ceil(cx + radius + 1));
    int lo_y = std::max(0, (int)std::floor(cy - radius - 1));
    int hi_y = std::min(img.height - 1, (int)std::ceil(cy + radius + 1));
    for (int y = lo_y; y <= hi_y; ++y)
      for (int x = lo_x; x <= hi_x; ++x) {
        double d = std::hypot(x - cx, y - cy);
        if (d <= radius) {
          img.at(x, y) = std::min(img.at(x, y), ink);
        } else if (d <= radius + 1.0) {
          // soft 1px edge
          float v = ink + (float)(d - radius) * (1.0f - ink);
          img.at(x, y) = std::min(img.at(x, y), v);
        }
      }
  }
}

void draw_rect_outline(RgbImage& img, int x0, int y0, int x1, int y1, uint8_t r, uint8_t g,
                       uint8_t b) {
  x0 = std::clamp(x0, 0, img.width - 1);
  x1 = std::clamp(x1, 0, img.width - 1);
  y0 = std::clamp(y0, 0, img.height - 1);
  y1 = std::clamp(y1, 0, img.height - 1);
  for (int x = x0; x <= x1; ++x) {
    img.set(x, y0, r, g, b);
    img.set(x, y1, r, g, b);
  }
  for (int y = y0; y <= y1; ++y) {
    img.set(x0, y, r, g, b);
    img.set(x1, y, r, g, b);
  }
}

}  // namespace ots
