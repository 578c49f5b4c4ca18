#pragma once

// Spatial alignment: dual spatial attention over the correlation map, dense
// per-anchor affine regression, grid warping, spotting-score aggregation and
// tight-box extraction.
//
// Coordinate conventions. The support lattice point (k,l) has base
// normalized coordinates u = 2l/(ws-1)-1, v = 2k/(hs-1)-1 in [-1,1]^2. An
// affine theta = (a11,a12,tx,a21,a22,ty) maps (u,v) -> (x',y'); the warped
// query feature coordinate for an anchor centered at feature cell (a,b) is
//   qx = b + x' * (ws-1)/2,   qy = a + y' * (hs-1)/2.
// Identity theta therefore lays the support lattice onto the query lattice
// centered at the anchor. Feature boxes convert to pixels via
// [x0*df, (x1+1)*df) so that a lattice spanning N cells covers N*df pixels.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "ots/backbone.hpp"
#include "ots/correlation.hpp"
#include "ots/geometry.hpp"
#include "ots/tensor.hpp"

namespace ots {

enum class AttentionOrder { support_first, query_first, no_support, no_query, none };

inline AttentionOrder parse_attention_order(const std::string& s) {
  if (s == "support_first") return AttentionOrder::support_first;
  if (s == "query_first") return AttentionOrder::query_first;
  if (s == "no_support") return AttentionOrder::no_support;
  if (s == "no_query") return AttentionOrder::no_query;
  if (s == "none") return AttentionOrder::none;
  tensor_fail("unknown attention_order: " + s);
}

struct AlignConfig {
  int tau = 16;  // channel reduction ratio of the support refinement
  AttentionOrder order = AttentionOrder::support_first;
  int gm_c1 = 128;
  int gm_c2 = 64;
  bool score_on_refined = true;  // sample the attention-refined map (else raw)
  bool force_square_box = false;
};

inline Box feature_box_to_pixels(const Box& fb, double df) {
  return {fb.x0 * df, fb.y0 * df, (fb.x1 + 1) * df, (fb.y1 + 1) * df};
}

// ---------------------------------------------------------------------------
// grid generation (single anchor, differentiable in theta)

// theta: [6] -> grid [hs,ws,2] of warped normalized coordinates (x', y').
template <typename T>
Tensor<T> generate_grid(const Tensor<T>& theta, int hs, int ws) {
  check(theta.size() == 6, "generate_grid expects 6 affine parameters");
  Tensor<T> out = make_result<T>({hs, ws, 2}, {theta});
  const T* t = theta.data();
  T* po = out.data();
  for (int k = 0; k < hs; ++k) {
    T v = hs > 1 ? T(2) * k / T(hs - 1) - T(1) : T(0);
    for (int l = 0; l < ws; ++l) {
      T u = ws > 1 ? T(2) * l / T(ws - 1) - T(1) : T(0);
      po[(k * ws + l) * 2 + 0] = t[0] * u + t[1] * v + t[2];
      po[(k * ws + l) * 2 + 1] = t[3] * u + t[4] * v + t[5];
    }
  }
  if (out.requires_grad()) {
    auto tn = theta.node();
    auto on = out.node();
    out.node()->backprop = [tn, on, hs, ws]() {
      tn->ensure_grad();
      const T* g = on->grad.data();
      for (int k = 0; k < hs; ++k) {
        T v = hs > 1 ? T(2) * k / T(hs - 1) - T(1) : T(0);
        for (int l = 0; l < ws; ++l) {
          T u = ws > 1 ? T(2) * l / T(ws - 1) - T(1) : T(0);
          T gx = g[(k * ws + l) * 2 + 0];
          T gy = g[(k * ws + l) * 2 + 1];
          tn->grad[0] += gx * u;
          tn->grad[1] += gx * v;
          tn->grad[2] += gx;
          tn->grad[3] += gy * u;
          tn->grad[4] += gy * v;
          tn->grad[5] += gy;
        }
      }
    };
  }
  return out;
}

// Tight axis-aligned feature-coordinate box of a warped grid at anchor (a,b).
template <typename T>
Box grid_feature_box(const Tensor<T>& grid, int hs, int ws, double a, double b) {
  double ex = (ws - 1) / 2.0, ey = (hs - 1) / 2.0;
  double xmin = 1e30, xmax = -1e30, ymin = 1e30, ymax = -1e30;
  const T* g = grid.data();
  for (int i = 0; i < hs * ws; ++i) {
    double qx = b + (double)g[i * 2 + 0] * ex;
    double qy = a + (double)g[i * 2 + 1] * ey;
    xmin = std::min(xmin, qx);
    xmax = std::max(xmax, qx);
    ymin = std::min(ymin, qy);
    ymax = std::max(ymax, qy);
  }
  return {xmin, ymin, xmax, ymax};
}

// ---------------------------------------------------------------------------
// single-anchor spotting score (differentiable in grid and correlation map)

// corr3: [d,hq,wq] with channel (k,l) = k*ws+l. Samples channel (k,l) at the
// warped position of lattice point (k,l), border-clamped, and returns the
// mean. A grid entirely outside the feature bounds yields the -1 sentinel.
template <typename T>
Tensor<T> spotting_score_at(const Tensor<T>& grid, const Tensor<T>& corr3, int hs, int ws,
                            double a, double b, bool* fully_oob = nullptr) {
  check(corr3.ndim() == 3 && corr3.dim(0) == hs * ws,
        "spotting_score_at: correlation map channel count must be hs*ws");
  int hq = corr3.dim(1), wq = corr3.dim(2);
  double ex = (ws - 1) / 2.0, ey = (hs - 1) / 2.0;

  const T* g = grid.data();
  bool any_in = false;
  for (int i = 0; i < hs * ws && !any_in; ++i) {
    double qx = b + (double)g[i * 2 + 0] * ex;
    double qy = a + (double)g[i * 2 + 1] * ey;
    if (qx >= 0 && qx <= wq - 1 && qy >= 0 && qy <= hq - 1) any_in = true;
  }
  if (fully_oob) *fully_oob = !any_in;
  if (!any_in) return Tensor<T>::scalar(T(-1));

  Tensor<T> out = make_result<T>({1}, {grid, corr3});
  const T* c = corr3.data();
  T acc = T(0);
  for (int k = 0; k < hs; ++k)
    for (int l = 0; l < ws; ++l) {
      int ch = k * ws + l;
      T qx = (T)b + g[(k * ws + l) * 2 + 0] * (T)ex;
      T qy = (T)a + g[(k * ws + l) * 2 + 1] * (T)ey;
      T cx = std::clamp(qx, T(0), T(wq - 1));
      T cy = std::clamp(qy, T(0), T(hq - 1));
      int x0 = std::min((int)cx, wq - 1), y0 = std::min((int)cy, hq - 1);
      int x1 = std::min(x0 + 1, wq - 1), y1 = std::min(y0 + 1, hq - 1);
      T wx = cx - x0, wy = cy - y0;
      acc += (T(1) - wy) * ((T(1) - wx) * c[((int64_t)ch * hq + y0) * wq + x0] +
                            wx * c[((int64_t)ch * hq + y0) * wq + x1]) +
             wy * ((T(1) - wx) * c[((int64_t)ch * hq + y1) * wq + x0] +
                   wx * c[((int64_t)ch * hq + y1) * wq + x1]);
    }
  out.data()[0] = acc / T(hs * ws);

  if (out.requires_grad()) {
    auto gn = grid.node();
    auto cn = corr3.node();
    auto on = out.node();
    out.node()->backprop = [gn, cn, on, hs, ws, hq, wq, a, b, ex, ey]() {
      T gscale = on->grad[0] / T(hs * ws);
      const T* g = gn->value.data();
      const T* c = cn->value.data();
      if (gn->requires_grad) gn->ensure_grad();
      if (cn->requires_grad) cn->ensure_grad();
      for (int k = 0; k < hs; ++k)
        for (int l = 0; l < ws; ++l) {
          int ch = k * ws + l;
          T qx = (T)b + g[(k * ws + l) * 2 + 0] * (T)ex;
          T qy = (T)a + g[(k * ws + l) * 2 + 1] * (T)ey;
          bool clx = qx < T(0) || qx > T(wq - 1);
          bool cly = qy < T(0) || qy > T(hq - 1);
          T cx = std::clamp(qx, T(0), T(wq - 1));
          T cy = std::clamp(qy, T(0), T(hq - 1));
          int x0 = std::min((int)cx, wq - 1), y0 = std::min((int)cy, hq - 1);
          int x1 = std::min(x0 + 1, wq - 1), y1 = std::min(y0 + 1, hq - 1);
          T wx = cx - x0, wy = cy - y0;
          T v00 = c[((int64_t)ch * hq + y0) * wq + x0];
          T v01 = c[((int64_t)ch * hq + y0) * wq + x1];
          T v10 = c[((int64_t)ch * hq + y1) * wq + x0];
          T v11 = c[((int64_t)ch * hq + y1) * wq + x1];
          if (cn->requires_grad) {
            cn->grad[((int64_t)ch * hq + y0) * wq + x0] += gscale * (T(1) - wy) * (T(1) - wx);
            cn->grad[((int64_t)ch * hq + y0) * wq + x1] += gscale * (T(1) - wy) * wx;
            cn->grad[((int64_t)ch * hq + y1) * wq + x0] += gscale * wy * (T(1) - wx);
            cn->grad[((int64_t)ch * hq + y1) * wq + x1] += gscale * wy * wx;
          }
          if (gn->requires_grad) {
            T dvdx = clx ? T(0) : (T(1) - wy) * (v01 - v00) + wy * (v11 - v10);
            T dvdy = cly ? T(0) : (T(1) - wx) * (v10 - v00) + wx * (v11 - v01);
            gn->grad[(k * ws + l) * 2 + 0] += gscale * dvdx * (T)ex;
            gn->grad[(k * ws + l) * 2 + 1] += gscale * dvdy * (T)ey;
          }
        }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// dense fused ops over every anchor of a theta map

// theta_map: [1,6,Ha,Wa]; corr3: [d,hq,wq]. Anchor (i,j) sits at query
// feature cell (i+off_y, j+off_x). Returns per-anchor mean warped similarity.
// Anchors whose grids land fully outside the feature bounds get the -1
// sentinel, no gradient, and a set flag in `oob`.
template <typename T>
Tensor<T> dense_warp_scores(const Tensor<T>& theta_map, const Tensor<T>& corr3, int hs, int ws,
                            int off_y, int off_x, std::vector<uint8_t>* oob = nullptr) {
  check(theta_map.ndim() == 4 && theta_map.dim(1) == 6, "dense_warp_scores expects [1,6,Ha,Wa]");
  int Ha = theta_map.dim(2), Wa = theta_map.dim(3);
  int hq = corr3.dim(1), wq = corr3.dim(2);
  double ex = (ws - 1) / 2.0, ey = (hs - 1) / 2.0;
  int64_t na = (int64_t)Ha * Wa;

  Tensor<T> out = make_result<T>({Ha, Wa}, {theta_map, corr3});
  std::vector<uint8_t> oob_local((size_t)na, 0);
  const T* th = theta_map.data();
  const T* c = corr3.data();
  T* po = out.data();

#pragma omp parallel for schedule(static)
  for (int64_t anchor = 0; anchor < na; ++anchor) {
    int i = (int)(anchor / Wa), j = (int)(anchor % Wa);
    double a = i + off_y, b = j + off_x;
    T t[6];
    for (int p = 0; p < 6; ++p) t[p] = th[(int64_t)p * na + anchor];
    T acc = T(0);
    bool any_in = false;
    for (int k = 0; k < hs; ++k) {
      T v = hs > 1 ? T(2) * k / T(hs - 1) - T(1) : T(0);
      for (int l = 0; l < ws; ++l) {
        T u = ws > 1 ? T(2) * l / T(ws - 1) - T(1) : T(0);
        int ch = k * ws + l;
        T qx = (T)b + (t[0] * u + t[1] * v + t[2]) * (T)ex;
        T qy = (T)a + (t[3] * u + t[4] * v + t[5]) * (T)ey;
        if (qx >= 0 && qx <= wq - 1 && qy >= 0 && qy <= hq - 1) any_in = true;
        T cx = std::clamp(qx, T(0), T(wq - 1));
        T cy = std::clamp(qy, T(0), T(hq - 1));
        int x0 = std::min((int)cx, wq - 1), y0 = std::min((int)cy, hq - 1);
        int x1 = std::min(x0 + 1, wq - 1), y1 = std::min(y0 + 1, hq - 1);
        T wx = cx - x0, wy = cy - y0;
        acc += (T(1) - wy) * ((T(1) - wx) * c[((int64_t)ch * hq + y0) * wq + x0] +
                              wx * c[((int64_t)ch * hq + y0) * wq + x1]) +
               wy * ((T(1) - wx) * c[((int64_t)ch * hq + y1) * wq + x0] +
                     wx * c[((int64_t)ch * hq + y1) * wq + x1]);
      }
    }
    if (!any_in) {
      oob_local[anchor] = 1;
      po[anchor] = T(-1);
    } else {
      po[anchor] = acc / T(hs * ws);
    }
  }
  if (oob) *oob = oob_local;

  if (out.requires_grad()) {
    auto tn = theta_map.node();
    auto cn = corr3.node();
    auto on = out.node();
    out.node()->backprop = [tn, cn, on, oob_local, hs, ws, off_y, off_x, hq, wq, Ha, Wa, ex,
                            ey]() {
      int64_t na = (int64_t)Ha * Wa;
      if (tn->requires_grad) tn->ensure_grad();
      if (cn->requires_grad) cn->ensure_grad();
      const T* th = tn->value.data();
      const T* c = cn->value.data();
      // serial: scatters into the shared correlation grad
      for (int64_t anchor = 0; anchor < na; ++anchor) {
        if (oob_local[anchor]) continue;
        T gs = on->grad[anchor] / T(hs * ws);
        if (gs == T(0)) continue;
        int i = (int)(anchor / Wa), j = (int)(anchor % Wa);
        double a = i + off_y, b = j + off_x;
        T t[6];
        for (int p = 0; p < 6; ++p) t[p] = th[(int64_t)p * na + anchor];
        for (int k = 0; k < hs; ++k) {
          T v = hs > 1 ? T(2) * k / T(hs - 1) - T(1) : T(0);
          for (int l = 0; l < ws; ++l) {
            T u = ws > 1 ? T(2) * l / T(ws - 1) - T(1) : T(0);
            int ch = k * ws + l;
            T qx = (T)b + (t[0] * u + t[1] * v + t[2]) * (T)ex;
            T qy = (T)a + (t[3] * u + t[4] * v + t[5]) * (T)ey;
            bool clx = qx < T(0) || qx > T(wq - 1);
            bool cly = qy < T(0) || qy > T(hq - 1);
            T cx = std::clamp(qx, T(0), T(wq - 1));
            T cy = std::clamp(qy, T(0), T(hq - 1));
            int x0 = std::min((int)cx, wq - 1), y0 = std::min((int)cy, hq - 1);
            int x1 = std::min(x0 + 1, wq - 1), y1 = std::min(y0 + 1, hq - 1);
            T wx = cx - x0, wy = cy - y0;
            T v00 = c[((int64_t)ch * hq + y0) * wq + x0];
            T v01 = c[((int64_t)ch * hq + y0) * wq + x1];
            T v10 = c[((int64_t)ch * hq + y1) * wq + x0];
            T v11 = c[((int64_t)ch * hq + y1) * wq + x1];
            if (cn->requires_grad) {
              cn->grad[((int64_t)ch * hq + y0) * wq + x0] += gs * (T(1) - wy) * (T(1) - wx);
              cn->grad[((int64_t)ch * hq + y0) * wq + x1] += gs * (T(1) - wy) * wx;
              cn->grad[((int64_t)ch * hq + y1) * wq + x0] += gs * wy * (T(1) - wx);
              cn->grad[((int64_t)ch * hq + y1) * wq + x1] += gs * wy * wx;
            }
            if (tn->requires_grad) {
              T dvdx = clx ? T(0) : (T(1) - wy) * (v01 - v00) + wy * (v11 - v10);
              T dvdy = cly ? T(0) : (T(1) - wx) * (v10 - v00) + wx * (v11 - v01);
              T gx = gs * dvdx * (T)ex;
              T gy = gs * dvdy * (T)ey;
              tn->grad[0 * na + anchor] += gx * u;
              tn->grad[1 * na + anchor] += gx * v;
              tn->grad[2 * na + anchor] += gx;
              tn->grad[3 * na + anchor] += gy * u;
              tn->grad[4 * na + anchor] += gy * v;
              tn->grad[5 * na + anchor] += gy;
            }
          }
        }
      }
    };
  }
  return out;
}

// Per-anchor tight boxes in query feature coordinates, differentiable in
// theta: [4,Ha,Wa] holding (xmin, ymin, xmax, ymax). Ties break on the first
// lattice index so the gradient routing is deterministic.
template <typename T>
Tensor<T> dense_warp_boxes(const Tensor<T>& theta_map, int hs, int ws, int off_y, int off_x) {
  check(theta_map.ndim() == 4 && theta_map.dim(1) == 6, "dense_warp_boxes expects [1,6,Ha,Wa]");
  int Ha = theta_map.dim(2), Wa = theta_map.dim(3);
  double ex = (ws - 1) / 2.0, ey = (hs - 1) / 2.0;
  int64_t na = (int64_t)Ha * Wa;

  Tensor<T> out = make_result<T>({4, Ha, Wa}, {theta_map});
  // argmin/argmax lattice indices per anchor, for backward
  std::vector<int> arg((size_t)na * 4);
  const T* th = theta_map.data();
  T* po = out.data();

#pragma omp parallel for schedule(static)
  for (int64_t anchor = 0; anchor < na; ++anchor) {
    int i = (int)(anchor / Wa), j = (int)(anchor % Wa);
    double a = i + off_y, b = j + off_x;
    T t[6];
    for (int p = 0; p < 6; ++p) t[p] = th[(int64_t)p * na + anchor];
    T xmin = T(0), xmax = T(0), ymin = T(0), ymax = T(0);
    int axmin = 0, axmax = 0, aymin = 0, aymax = 0;
    for (int k = 0; k < hs; ++k) {
      T v = hs > 1 ? T(2) * k / T(hs - 1) - T(1) : T(0);
      for (int l = 0; l < ws; ++l) {
        T u = ws > 1 ? T(2) * l / T(ws - 1) - T(1) : T(0);
        T qx = (T)b + (t[0] * u + t[1] * v + t[2]) * (T)ex;
        T qy = (T)a + (t[3] * u + t[4] * v + t[5]) * (T)ey;
        int idx = k * ws + l;
        if (idx == 0 || qx < xmin) { xmin = qx; axmin = idx; }
        if (idx == 0 || qx > xmax) { xmax = qx; axmax = idx; }
        if (idx == 0 || qy < ymin) { ymin = qy; aymin = idx; }
        if (idx == 0 || qy > ymax) { ymax = qy; aymax = idx; }
      }
    }
    po[0 * na + anchor] = xmin;
    po[1 * na + anchor] = ymin;
    po[2 * na + anchor] = xmax;
    po[3 * na + anchor] = ymax;
    arg[anchor * 4 + 0] = axmin;
    arg[anchor * 4 + 1] = aymin;
    arg[anchor * 4 + 2] = axmax;
    arg[anchor * 4 + 3] = aymax;
  }

  if (out.requires_grad()) {
    auto tn = theta_map.node();
    auto on = out.node();
    out.node()->backprop = [tn, on, arg, hs, ws, Ha, Wa, ex, ey]() {
      tn->ensure_grad();
      int64_t na = (int64_t)Ha * Wa;
      for (int64_t anchor = 0; anchor < na; ++anchor) {
        for (int coord = 0; coord < 4; ++coord) {
          // output channel order is (xmin,ymin,xmax,ymax); arg order matches
          T g = on->grad[(int64_t)coord * na + anchor];
          if (g == T(0)) continue;
          int idx = arg[anchor * 4 + coord];
          int k = idx / ws, l = idx % ws;
          T v = hs > 1 ? T(2) * k / T(hs - 1) - T(1) : T(0);
          T u = ws > 1 ? T(2) * l / T(ws - 1) - T(1) : T(0);
          bool is_x = (coord == 0 || coord == 2);
          if (is_x) {
            T gx = g * (T)ex;
            tn->grad[0 * na + anchor] += gx * u;
            tn->grad[1 * na + anchor] += gx * v;
            tn->grad[2 * na + anchor] += gx;
          } else {
            T gy = g * (T)ey;
            tn->grad[3 * na + anchor] += gy * u;
            tn->grad[4 * na + anchor] += gy * v;
            tn->grad[5 * na + anchor] += gy;
          }
        }
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// the alignment module

template <typename T>
struct AlignOutput {
  Tensor<T> m_s;      // [1,d,1,1] support attention (undefined when ablated)
  Tensor<T> m_q;      // [1,1,hq,wq] query attention (undefined when ablated)
  Tensor<T> refined;  // [1,d,hq,wq] after the configured attention chain
  Tensor<T> theta;    // [1,6,Ha,Wa]
  Tensor<T> scores;   // [Ha,Wa]
  Tensor<T> boxes;    // [4,Ha,Wa] in query feature coordinates
  std::vector<uint8_t> oob;
  int Ha = 0, Wa = 0;
  int off_y = 0, off_x = 0;
};

template <typename T>
class SpatialAlignment {
 public:
  SpatialAlignment(const AlignConfig& cfg, int support_h, int support_w, Rng& rng)
      : cfg_(cfg), hs_(support_h), ws_(support_w), d_(support_h * support_w) {
    check(d_ % cfg_.tau == 0, "attention reduction: d=" + std::to_string(d_) +
                                  " not divisible by tau=" + std::to_string(cfg_.tau));
    int dr = d_ / cfg_.tau;
    w0_ = Conv2dLayer<T>("align.support_attn.w0", d_, dr, 1, 1, 0, rng);
    w1_ = Conv2dLayer<T>("align.support_attn.w1", dr, d_, 1, 1, 0, rng);
    query_conv_ = Conv2dLayer<T>("align.query_attn.conv", 2, 1, 3, 1, 1, rng);
    gm_conv1_ = Conv2dLayer<T>("align.gm.conv1", d_, cfg_.gm_c1, 3, 1, 0, rng);
    gm_bn_ = BatchNormLayer<T>("align.gm.bn", cfg_.gm_c1);
    gm_conv2_ = Conv2dLayer<T>("align.gm.conv2", cfg_.gm_c1, cfg_.gm_c2, 3, 1, 0, rng);
    gm_fc_ = Conv2dLayer<T>("align.gm.fc", cfg_.gm_c2, 6, 1, 1, 0, rng);
    // identity transform at init: zero weights, identity bias
    std::fill(gm_fc_.w.tensor.values().begin(), gm_fc_.w.tensor.values().end(), T(0));
    auto& fcb = gm_fc_.b.tensor.values();
    fcb = {T(1), T(0), T(0), T(0), T(1), T(0)};
  }

  // Support attention (Step 1): 1d channel attention over the d dimension.
  std::pair<Tensor<T>, Tensor<T>> dsa_support_refine(const Tensor<T>& c_r) {
    Tensor<T> avg = w1_(w0_(avg_pool_global(c_r)));
    Tensor<T> mx = w1_(w0_(max_pool_global(c_r)));
    Tensor<T> m_s = sigmoid(add(avg, mx));  // [1,d,1,1]
    return {m_s, mul(m_s, c_r)};
  }

  // Query attention (Step 2): 2d spatial attention over (hq,wq).
  std::pair<Tensor<T>, Tensor<T>> dsa_query_refine(const Tensor<T>& c) {
    Tensor<T> m_q = sigmoid(query_conv_(channel_pool(c)));  // [1,1,hq,wq]
    return {m_q, mul(m_q, c)};
  }

  AlignOutput<T> forward(const CorrelationMap<T>& corr, bool training) {
    check(corr.d == d_, "correlation map d=" + std::to_string(corr.d) +
                            " does not match alignment module d=" + std::to_string(d_));
    int window = 5;  // two 3x3 valid convs
    check(corr.hq >= window && corr.wq >= window,
          "query feature " + std::to_string(corr.hq) + "x" + std::to_string(corr.wq) +
              " smaller than the regression window; minimum query feature size is " +
              std::to_string(window) + "x" + std::to_string(window));

    // [hq,wq,d] -> [1,d,hq,wq]
    Tensor<T> c_r = reshape(permute(corr.reshaped, {2, 0, 1}), {1, d_, corr.hq, corr.wq});

    AlignOutput<T> out;
    Tensor<T> c = c_r;
    switch (cfg_.order) {
      case AttentionOrder::support_first: {
        auto [ms, cs] = dsa_support_refine(c);
        out.m_s = ms;
        auto [mq, csq] = dsa_query_refine(cs);
        out.m_q = mq;
        c = csq;
        break;
      }
      case AttentionOrder::query_first: {
        auto [mq, cq] = dsa_query_refine(c);
        out.m_q = mq;
        auto [ms, cqs] = dsa_support_refine(cq);
        out.m_s = ms;
        c = cqs;
        break;
      }
      case AttentionOrder::no_support: {
        auto [mq, cq] = dsa_query_refine(c);
        out.m_q = mq;
        c = cq;
        break;
      }
      case AttentionOrder::no_query: {
        auto [ms, cs] = dsa_support_refine(c);
        out.m_s = ms;
        c = cs;
        break;
      }
      case AttentionOrder::none:
        break;
    }
    out.refined = c;

    Tensor<T> h = relu(gm_bn_(gm_conv1_(c), training));
    h = gm_conv2_(h);
    out.theta = gm_fc_(h);  // [1,6,Ha,Wa]
    out.Ha = out.theta.dim(2);
    out.Wa = out.theta.dim(3);
    out.off_y = (corr.hq - out.Ha) / 2;
    out.off_x = (corr.wq - out.Wa) / 2;

    Tensor<T> score_src = cfg_.score_on_refined ? c : c_r;
    Tensor<T> score_src3 = reshape(score_src, {d_, corr.hq, corr.wq});
    out.scores = dense_warp_scores(out.theta, score_src3, hs_, ws_, out.off_y, out.off_x,
                                   &out.oob);
    out.boxes = dense_warp_boxes(out.theta, hs_, ws_, out.off_y, out.off_x);
    return out;
  }

  // Identity-extent anchor box in feature coordinates for anchor (i,j).
  Box anchor_feature_box(int i, int j, int off_y, int off_x) const {
    double a = i + off_y, b = j + off_x;
    double ex = (ws_ - 1) / 2.0, ey = (hs_ - 1) / 2.0;
    return {b - ex, a - ey, b + ex, a + ey};
  }

  void collect(ParamList<T>& out) {
    w0_.collect(out);
    w1_.collect(out);
    query_conv_.collect(out);
    gm_conv1_.collect(out);
    gm_bn_.collect(out);
    gm_conv2_.collect(out);
    gm_fc_.collect(out);
  }

  void export_stats(std::map<std::string, std::vector<T>>& out) const {
    out["align.gm.bn.running_mean"] = gm_bn_.state.running_mean;
    out["align.gm.bn.running_var"] = gm_bn_.state.running_var;
  }
  void import_stats(const std::map<std::string, std::vector<T>>& in) {
    auto it = in.find("align.gm.bn.running_mean");
    if (it != in.end()) gm_bn_.state.running_mean = it->second;
    it = in.find("align.gm.bn.running_var");
    if (it != in.end()) gm_bn_.state.running_var = it->second;
  }

  const AlignConfig& config() const { return cfg_; }
  int support_h() const { return hs_; }
  int support_w() const { return ws_; }

 private:
  AlignConfig cfg_;
  int hs_, ws_, d_;
  Conv2dLayer<T> w0_, w1_, query_conv_;
  Conv2dLayer<T> gm_conv1_, gm_conv2_, gm_fc_;
  BatchNormLayer<T> gm_bn_;
};

}  // namespace ots
