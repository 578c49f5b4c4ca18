#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "ots/alignment.hpp"

using namespace ots;

namespace {

// correlation-map shell around a raw [hq,wq,d] tensor for module tests
template <typename T>
CorrelationMap<T> wrap_corr(const Tensor<T>& reshaped, int hs, int ws) {
  CorrelationMap<T> m;
  m.hq = reshaped.dim(0);
  m.wq = reshaped.dim(1);
  m.hs = hs;
  m.ws = ws;
  m.d = hs * ws;
  m.reshaped = reshaped;
  return m;
}

Tensor<double> identity_theta() {
  return Tensor<double>::from_data({6}, {1, 0, 0, 0, 1, 0});
}

}  // namespace

TEST_CASE("grid generation") {
  SUBCASE("identity theta reproduces the base lattice") {
    Tensor<double> g = generate_grid(identity_theta(), 3, 5);
    for (int k = 0; k < 3; ++k)
      for (int l = 0; l < 5; ++l) {
        CHECK(g.values()[(k * 5 + l) * 2 + 0] == doctest::Approx(2.0 * l / 4 - 1).epsilon(1e-12));
        CHECK(g.values()[(k * 5 + l) * 2 + 1] == doctest::Approx(2.0 * k / 2 - 1).epsilon(1e-12));
      }
  }
  SUBCASE("pure translation shifts every point") {
    Tensor<double> t = Tensor<double>::from_data({6}, {1, 0, 0.25, 0, 1, -0.5});
    Tensor<double> g = generate_grid(t, 4, 4);
    Tensor<double> g0 = generate_grid(identity_theta(), 4, 4);
    for (int i = 0; i < 16; ++i) {
      CHECK(g.values()[i * 2 + 0] == doctest::Approx(g0.values()[i * 2 + 0] + 0.25));
      CHECK(g.values()[i * 2 + 1] == doctest::Approx(g0.values()[i * 2 + 1] - 0.5));
    }
  }
  SUBCASE("gradient w.r.t. theta") {
    Rng rng(3);
    Tensor<double> theta = Tensor<double>::from_data({6}, {0.9, 0.1, 0.2, -0.1, 1.1, -0.3});
    Tensor<double> w = randn<double>({4, 3, 2}, rng);
    theta.set_requires_grad(true);
    auto res = ots::testing::gradcheck<double>(
        {theta}, [&]() { return sum(mul(generate_grid(theta, 4, 3), w)); });
    CHECK(res.ok(1e-6));
  }
}

TEST_CASE("tight box from a warped grid matches a brute-force oracle") {
  Rng rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor<double> theta = randn<double>({6}, rng, 0.5);
    Tensor<double> g = generate_grid(theta, 4, 4);
    double a = 3.0, b = 5.0, ex = 1.5, ey = 1.5;
    Box box = grid_feature_box(g, 4, 4, a, b);
    double xmin = 1e30, xmax = -1e30, ymin = 1e30, ymax = -1e30;
    for (int i = 0; i < 16; ++i) {
      double qx = b + g.values()[i * 2 + 0] * ex;
      double qy = a + g.values()[i * 2 + 1] * ey;
      xmin = std::min(xmin, qx);
      xmax = std::max(xmax, qx);
      ymin = std::min(ymin, qy);
      ymax = std::max(ymax, qy);
    }
    CHECK(box.x0 == doctest::Approx(xmin).epsilon(1e-12));
    CHECK(box.x1 == doctest::Approx(xmax).epsilon(1e-12));
    CHECK(box.y0 == doctest::Approx(ymin).epsilon(1e-12));
    CHECK(box.y1 == doctest::Approx(ymax).epsilon(1e-12));
  }
}

TEST_CASE("single-anchor spotting score") {
  int hs = 2, ws = 2, d = 4;
  SUBCASE("identity warp on a perfect match scores 1.0") {
    // 3x3 lattice so identity sample positions land on integer cells;
    // channel (k,l) is 1.0 exactly at its identity lattice position
    int h3 = 3, w3 = 3;
    Tensor<double> c = Tensor<double>::zeros({h3 * w3, 7, 7});
    double a = 3, b = 2, ex = 1.0, ey = 1.0;
    for (int k = 0; k < h3; ++k)
      for (int l = 0; l < w3; ++l) {
        double u = 2.0 * l / (w3 - 1) - 1, v = 2.0 * k / (h3 - 1) - 1;
        int qx = (int)std::lround(b + u * ex), qy = (int)std::lround(a + v * ey);
        c.data()[((int64_t)(k * w3 + l) * 7 + qy) * 7 + qx] = 1.0;
      }
    Tensor<double> g = generate_grid(identity_theta(), h3, w3);
    bool oob = true;
    Tensor<double> s = spotting_score_at(g, c, h3, w3, a, b, &oob);
    CHECK(!oob);
    CHECK(s.item() == doctest::Approx(1.0).epsilon(1e-3));
  }
  SUBCASE("blank region scores approximately zero") {
    Tensor<double> c = Tensor<double>::zeros({d, 6, 6});
    Tensor<double> g = generate_grid(identity_theta(), hs, ws);
    Tensor<double> s = spotting_score_at(g, c, hs, ws, 3, 3);
    CHECK(std::abs(s.item()) < 1e-9);
  }
  SUBCASE("matches a brute-force resampling oracle") {
    Rng rng(9);
    for (int trial = 0; trial < 10; ++trial) {
      Tensor<double> c = randn<double>({d, 6, 7}, rng);
      Tensor<double> theta = randn<double>({6}, rng, 0.4);
      Tensor<double> g = generate_grid(theta, hs, ws);
      double a = 2.5, b = 3.5, ex = 0.5, ey = 0.5;
      double want = 0;
      for (int k = 0; k < hs; ++k)
        for (int l = 0; l < ws; ++l) {
          int ch = k * ws + l;
          double qx = std::clamp(b + g.values()[(k * ws + l) * 2 + 0] * ex, 0.0, 6.0);
          double qy = std::clamp(a + g.values()[(k * ws + l) * 2 + 1] * ey, 0.0, 5.0);
          int x0 = std::min((int)qx, 6), y0 = std::min((int)qy, 5);
          int x1 = std::min(x0 + 1, 6), y1 = std::min(y0 + 1, 5);
          double wx = qx - x0, wy = qy - y0;
          auto at = [&](int y, int x) { return c.values()[((int64_t)ch * 6 + y) * 7 + x]; };
          want += (1 - wy) * ((1 - wx) * at(y0, x0) + wx * at(y0, x1)) +
                  wy * ((1 - wx) * at(y1, x0) + wx * at(y1, x1));
        }
      want /= hs * ws;
      Tensor<double> s = spotting_score_at(g, c, hs, ws, a, b);
      CHECK(s.item() == doctest::Approx(want).epsilon(1e-5));
    }
  }
  SUBCASE("fully out-of-bounds grid yields the sentinel") {
    Rng rng(1);
    Tensor<double> c = randn<double>({d, 6, 6}, rng);
    Tensor<double> t = Tensor<double>::from_data({6}, {1, 0, 100, 0, 1, 100});
    Tensor<double> g = generate_grid(t, hs, ws);
    bool oob = false;
    Tensor<double> s = spotting_score_at(g, c, hs, ws, 3, 3, &oob);
    CHECK(oob);
    CHECK(s.item() == -1.0);
  }
  SUBCASE("gradient w.r.t. grid and correlation") {
    Rng rng(13);
    Tensor<double> c = randn<double>({d, 6, 6}, rng);
    Tensor<double> theta = randn<double>({6}, rng, 0.3);
    theta.data()[0] += 1;
    theta.data()[4] += 1;
    c.set_requires_grad(true);
    theta.set_requires_grad(true);
    auto res = ots::testing::gradcheck<double>(
        {c, theta},
        [&]() {
          return spotting_score_at(generate_grid(theta, hs, ws), c, hs, ws, 2.3, 3.1);
        },
        1e-4);
    CHECK(res.ok(1e-4));
  }
}

TEST_CASE("dense warp ops agree with the single-anchor ops") {
  Rng rng(17);
  int hs = 2, ws = 2, d = 4;
  Tensor<double> c = randn<double>({d, 7, 8}, rng);
  int Ha = 3, Wa = 4, off_y = 2, off_x = 2;
  Tensor<double> theta_map = randn<double>({1, 6, Ha, Wa}, rng, 0.3);
  std::vector<uint8_t> oob;
  Tensor<double> scores = dense_warp_scores(theta_map, c, hs, ws, off_y, off_x, &oob);
  Tensor<double> boxes = dense_warp_boxes(theta_map, hs, ws, off_y, off_x);
  int64_t na = (int64_t)Ha * Wa;
  for (int i = 0; i < Ha; ++i)
    for (int j = 0; j < Wa; ++j) {
      int64_t anchor = (int64_t)i * Wa + j;
      Tensor<double> t = Tensor<double>::zeros({6});
      for (int p = 0; p < 6; ++p) t.data()[p] = theta_map.values()[p * na + anchor];
      Tensor<double> g = generate_grid(t, hs, ws);
      bool single_oob = false;
      Tensor<double> s =
          spotting_score_at(g, c, hs, ws, i + off_y, j + off_x, &single_oob);
      CHECK((bool)oob[anchor] == single_oob);
      CHECK(scores.values()[anchor] == doctest::Approx(s.item()).epsilon(1e-9));
      Box fb = grid_feature_box(g, hs, ws, i + off_y, j + off_x);
      CHECK(boxes.values()[0 * na + anchor] == doctest::Approx(fb.x0).epsilon(1e-9));
      CHECK(boxes.values()[1 * na + anchor] == doctest::Approx(fb.y0).epsilon(1e-9));
      CHECK(boxes.values()[2 * na + anchor] == doctest::Approx(fb.x1).epsilon(1e-9));
      CHECK(boxes.values()[3 * na + anchor] == doctest::Approx(fb.y1).epsilon(1e-9));
    }
}

TEST_CASE("dense warp gradients") {
  Rng rng(19);
  int hs = 2, ws = 2, d = 4;
  Tensor<double> c = randn<double>({d, 6, 6}, rng);
  Tensor<double> theta_map = randn<double>({1, 6, 2, 2}, rng, 0.2);
  // bias toward identity so grids stay in-bounds
  int64_t na = 4;
  for (int64_t a = 0; a < na; ++a) {
    theta_map.data()[0 * na + a] += 1;
    theta_map.data()[4 * na + a] += 1;
  }
  Tensor<double> wb = randn<double>({4, 2, 2}, rng);
  c.set_requires_grad(true);
  theta_map.set_requires_grad(true);
  auto res = ots::testing::gradcheck<double>(
      {c, theta_map},
      [&]() {
        Tensor<double> s = dense_warp_scores(theta_map, c, hs, ws, 2, 2);
        Tensor<double> b = dense_warp_boxes(theta_map, hs, ws, 2, 2);
        return add(sum(s), sum(mul(b, wb)));
      },
      1e-4);
  CHECK(res.ok(1e-4));
}

TEST_CASE("attention blocks") {
  Rng rng(23);
  int hs = 4, ws = 4, d = 16;
  AlignConfig cfg;
  cfg.tau = 4;
  cfg.gm_c1 = 8;
  cfg.gm_c2 = 8;
  SpatialAlignment<double> align(cfg, hs, ws, rng);
  Tensor<double> c_r = randn<double>({1, d, 6, 6}, rng);

  SUBCASE("attention values live in (0,1) and preserve sign") {
    auto [ms, cs] = align.dsa_support_refine(c_r);
    auto [mq, csq] = align.dsa_query_refine(cs);
    CHECK(ms.shape() == Shape{1, d, 1, 1});
    CHECK(mq.shape() == Shape{1, 1, 6, 6});
    for (double v : ms.values()) { CHECK(v > 0); CHECK(v < 1); }
    for (double v : mq.values()) { CHECK(v > 0); CHECK(v < 1); }
    for (int64_t i = 0; i < csq.size(); ++i) {
      double a = csq.values()[i], b = c_r.values()[i];
      CHECK(((a >= 0 && b >= 0) || (a <= 0 && b <= 0)));
    }
  }
  SUBCASE("constant map equalizes the avg and max branches") {
    Tensor<double> cc = Tensor<double>::full({1, d, 5, 5}, 0.3);
    Tensor<double> avg = avg_pool_global(cc);
    Tensor<double> mx = max_pool_global(cc);
    for (int64_t i = 0; i < avg.size(); ++i)
      CHECK(avg.values()[i] == doctest::Approx(mx.values()[i]).epsilon(1e-12));
  }
  SUBCASE("gradient through both attention blocks") {
    Tensor<double> x = randn<double>({1, d, 5, 5}, rng);
    x.set_requires_grad(true);
    auto res = ots::testing::gradcheck<double>({x}, [&]() {
      auto [ms, cs] = align.dsa_support_refine(x);
      auto [mq, csq] = align.dsa_query_refine(cs);
      return sum(csq);
    });
    CHECK(res.ok(1e-5));
  }
}

TEST_CASE("zeroed attention weights give the 0.5 sigmoid plateau") {
  Rng rng(29);
  int hs = 4, ws = 4, d = 16;
  AlignConfig cfg;
  cfg.tau = 4;
  cfg.gm_c1 = 8;
  cfg.gm_c2 = 8;
  SpatialAlignment<double> align(cfg, hs, ws, rng);
  ParamList<double> ps;
  align.collect(ps);
  for (auto* p : ps)
    if (p->name.rfind("align.support_attn", 0) == 0 || p->name.rfind("align.query_attn", 0) == 0)
      std::fill(p->tensor.values().begin(), p->tensor.values().end(), 0.0);
  Tensor<double> c_r = randn<double>({1, d, 5, 5}, rng);
  auto [ms, cs] = align.dsa_support_refine(c_r);
  for (double v : ms.values()) CHECK(v == doctest::Approx(0.5).epsilon(1e-12));
  for (int64_t i = 0; i < cs.size(); ++i)
    CHECK(cs.values()[i] == doctest::Approx(0.5 * c_r.values()[i]).epsilon(1e-12));
  auto [mq, csq] = align.dsa_query_refine(c_r);
  for (double v : mq.values()) CHECK(v == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("module forward: identity at initialization") {
  Rng rng(31);
  int hs = 4, ws = 4;
  AlignConfig cfg;
  cfg.tau = 4;
  cfg.gm_c1 = 8;
  cfg.gm_c2 = 8;
  SpatialAlignment<double> align(cfg, hs, ws, rng);
  Tensor<double> raw = randn<double>({8, 8, 16}, rng);
  auto corr = wrap_corr(raw, hs, ws);
  NoGradGuard ng;
  auto out = align.forward(corr, false);
  CHECK(out.Ha == 4);
  CHECK(out.Wa == 4);
  CHECK(out.off_y == 2);
  CHECK(out.off_x == 2);
  int64_t na = (int64_t)out.Ha * out.Wa;
  for (int64_t a = 0; a < na; ++a) {
    CHECK(out.theta.values()[0 * na + a] == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(out.theta.values()[1 * na + a] == doctest::Approx(0.0).epsilon(1e-6));
    CHECK(out.theta.values()[2 * na + a] == doctest::Approx(0.0).epsilon(1e-6));
    CHECK(out.theta.values()[3 * na + a] == doctest::Approx(0.0).epsilon(1e-6));
    CHECK(out.theta.values()[4 * na + a] == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(out.theta.values()[5 * na + a] == doctest::Approx(0.0).epsilon(1e-6));
  }
  // identity boxes sit at the anchor receptive extent
  for (int i = 0; i < out.Ha; ++i)
    for (int j = 0; j < out.Wa; ++j) {
      int64_t a = (int64_t)i * out.Wa + j;
      Box want = align.anchor_feature_box(i, j, out.off_y, out.off_x);
      CHECK(out.boxes.values()[0 * na + a] == doctest::Approx(want.x0).epsilon(1e-6));
      CHECK(out.boxes.values()[1 * na + a] == doctest::Approx(want.y0).epsilon(1e-6));
      CHECK(out.boxes.values()[2 * na + a] == doctest::Approx(want.x1).epsilon(1e-6));
      CHECK(out.boxes.values()[3 * na + a] == doctest::Approx(want.y1).epsilon(1e-6));
    }
  for (double s : out.scores.values()) {
    CHECK(s >= -1.0 - 1e-9);
    CHECK(s <= 1.0 + 1e-9);
  }
}

TEST_CASE("attention order changes the output") {
  Rng rng(37);
  int hs = 4, ws = 4;
  AlignConfig cfg;
  cfg.tau = 4;
  cfg.gm_c1 = 8;
  cfg.gm_c2 = 8;
  cfg.order = AttentionOrder::support_first;
  SpatialAlignment<double> a1(cfg, hs, ws, rng);
  Rng rng2(37);  // identical weights
  cfg.order = AttentionOrder::query_first;
  SpatialAlignment<double> a2(cfg, hs, ws, rng2);
  Tensor<double> raw = randn<double>({8, 8, 16}, rng);
  auto corr = wrap_corr(raw, hs, ws);
  NoGradGuard ng;
  auto o1 = a1.forward(corr, false);
  auto o2 = a2.forward(corr, false);
  double diff = 0;
  for (int64_t i = 0; i < o1.refined.size(); ++i)
    diff = std::max(diff, std::abs(o1.refined.values()[i] - o2.refined.values()[i]));
  CHECK(diff > 1e-9);
}

TEST_CASE("build-time and shape errors") {
  Rng rng(41);
  AlignConfig cfg;
  cfg.tau = 16;
  CHECK_THROWS_AS(SpatialAlignment<double>(cfg, 3, 3, rng), TensorError);  // 9 % 16

  cfg.tau = 4;
  cfg.gm_c1 = 8;
  cfg.gm_c2 = 8;
  SpatialAlignment<double> align(cfg, 4, 4, rng);
  Tensor<double> raw = randn<double>({4, 4, 16}, rng);  // below the 5x5 window
  auto corr = wrap_corr(raw, 4, 4);
  try {
    (void)align.forward(corr, false);
    FAIL("expected an error");
  } catch (const TensorError& e) {
    CHECK(std::string(e.what()).find("minimum query feature size") != std::string::npos);
  }
}

TEST_CASE("gradient through the full module") {
  Rng rng(43);
  int hs = 2, ws = 2;
  AlignConfig cfg;
  cfg.tau = 2;
  cfg.gm_c1 = 4;
  cfg.gm_c2 = 4;
  SpatialAlignment<double> align(cfg, hs, ws, rng);
  // nudge the regressor off exact identity so theta gradients are exercised
  ParamList<double> ps;
  align.collect(ps);
  Rng rng2(44);
  for (auto* p : ps)
    if (p->name == "align.gm.fc.w") {
      Tensor<double> noise = randn<double>(p->tensor.shape(), rng2, 0.05);
      p->tensor.values() = noise.values();
    }
  Tensor<double> raw = randn<double>({6, 6, 4}, rng);
  raw.set_requires_grad(true);
  auto res = ots::testing::gradcheck<double>(
      {raw},
      [&]() {
        auto corr = wrap_corr(raw, hs, ws);
        auto out = align.forward(corr, true);
        return add(sum(out.scores), sum(out.boxes));
      },
      1e-4);
  CHECK(res.ok(1e-4));
}
