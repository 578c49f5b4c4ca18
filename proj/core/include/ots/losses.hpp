#pragma once

// Training objectives: IoU target assignment over the dense anchor grid,
// smooth-L1 localization loss, and the four spotting losses (triplet,
// contrastive, ranked-list, torus) as fused tensor ops with analytic
// gradients. Scalar per-example helpers are exposed for fixtures and as the
// single source of truth for the fused forward passes.

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "ots/geometry.hpp"
#include "ots/tensor.hpp"

namespace ots {

enum class SpotLossKind { triplet, contrastive, ranked_list, torus };

inline SpotLossKind parse_spot_loss_kind(const std::string& s) {
  if (s == "triplet") return SpotLossKind::triplet;
  if (s == "contrastive") return SpotLossKind::contrastive;
  if (s == "ranked_list") return SpotLossKind::ranked_list;
  if (s == "torus") return SpotLossKind::torus;
  tensor_fail("unknown spotting loss kind: " + s);
}

struct LossConfig {
  double m_pos = 0.6;
  double m_neg = 0.5;
  double temperature = 10.0;
  double lambda = 0.2;
  SpotLossKind kind = SpotLossKind::torus;
  double pos_iou = 0.5;
  double neg_iou = 0.1;
  double triplet_margin = 0.1;
  // apply the exponential negative weight twice (outer sum times the
  // per-example definition); kept for study, squares the weight
  bool compat_double_weight = false;

  void validate() const {
    check(m_neg >= 0 && m_neg < m_pos && m_pos <= 1, "margins must satisfy 0 <= m_neg < m_pos <= 1");
    check(temperature > 0, "temperature must be positive");
    check(lambda >= 0, "lambda must be non-negative");
  }
};

// ---------------------------------------------------------------------------
// scalar per-example pieces

inline double hinge_pos(double s, double m_pos) { return std::max(m_pos - s, 0.0); }
inline double hinge_neg(double s, double m_neg) { return std::max(s - m_neg, 0.0); }

inline double margin_clamp_g(double s, const LossConfig& cfg) {
  if (s >= cfg.m_pos) return cfg.m_pos;
  if (s <= cfg.m_neg) return cfg.m_neg;
  return s;
}

inline double rl_neg_weight(double s, const LossConfig& cfg) {
  return s > cfg.m_neg ? std::exp(cfg.temperature * (s - cfg.m_neg)) : 0.0;
}

// per-example losses and their derivatives in s
inline double spot_pos_term(double s, const LossConfig& cfg) {
  switch (cfg.kind) {
    case SpotLossKind::torus: {
      double g = margin_clamp_g(s, cfg);
      return hinge_pos(s, cfg.m_pos) - std::log(g / cfg.m_pos);
    }
    default:
      return hinge_pos(s, cfg.m_pos);
  }
}

inline double spot_pos_deriv(double s, const LossConfig& cfg) {
  double d = s < cfg.m_pos ? -1.0 : 0.0;
  if (cfg.kind == SpotLossKind::torus && s > cfg.m_neg && s < cfg.m_pos) d -= 1.0 / s;
  return d;
}

inline double spot_neg_term(double s, const LossConfig& cfg) {
  double ln = hinge_neg(s, cfg.m_neg);
  switch (cfg.kind) {
    case SpotLossKind::contrastive:
      return ln;
    case SpotLossKind::ranked_list:
      return s > cfg.m_neg ? rl_neg_weight(s, cfg) * ln : 0.0;
    case SpotLossKind::torus: {
      if (s <= cfg.m_neg) return 0.0;  // g = m_neg makes the log term vanish
      double g = margin_clamp_g(s, cfg);
      double base = -std::log((cfg.m_pos + cfg.m_neg - g) / cfg.m_pos);
      double w = rl_neg_weight(s, cfg);
      double core = w * ln + base;
      return cfg.compat_double_weight ? w * core : core;
    }
    default:
      return 0.0;
  }
}

inline double spot_neg_deriv(double s, const LossConfig& cfg) {
  if (s <= cfg.m_neg) return 0.0;
  double T = cfg.temperature;
  double ln = s - cfg.m_neg;
  switch (cfg.kind) {
    case SpotLossKind::contrastive:
      return 1.0;
    case SpotLossKind::ranked_list:
      return std::exp(T * ln) * (T * ln + 1.0);
    case SpotLossKind::torus: {
      double w = std::exp(T * ln);
      double gap = cfg.m_pos + cfg.m_neg - margin_clamp_g(s, cfg);
      double dbase = s < cfg.m_pos ? 1.0 / gap : 0.0;
      double dcore = w * (T * ln + 1.0) + dbase;
      if (!cfg.compat_double_weight) return dcore;
      double base = -std::log(gap / cfg.m_pos);
      double core = w * ln + base;
      return T * w * core + w * dcore;
    }
    default:
      return 0.0;
  }
}

inline double smooth_l1(const std::array<double, 4>& v, const std::array<double, 4>& t) {
  double acc = 0;
  for (int i = 0; i < 4; ++i) {
    double d = std::abs(v[i] - t[i]);
    acc += d < 1.0 ? 0.5 * d * d : d - 0.5;
  }
  return acc;
}

// ---------------------------------------------------------------------------
// target assignment

struct TargetAssignment {
  std::vector<int8_t> labels;   // +1 positive, -1 negative, 0 ignore
  std::vector<int> matched_gt;  // gt index for positives, -1 otherwise
  int num_pos = 0, num_neg = 0;
};

// Anchors and ground truth in the same coordinate frame. Each anchor is
// labeled by its best-IoU ground-truth box; no ground truth means all
// anchors are negative.
inline TargetAssignment assign_targets(const std::vector<Box>& anchors,
                                       const std::vector<Box>& gt, const LossConfig& cfg) {
  TargetAssignment out;
  out.labels.assign(anchors.size(), -1);
  out.matched_gt.assign(anchors.size(), -1);
  for (size_t i = 0; i < anchors.size(); ++i) {
    double best = 0;
    int best_j = -1;
    for (size_t j = 0; j < gt.size(); ++j) {
      double v = iou(anchors[i], gt[j]);
      if (v > best) { best = v; best_j = (int)j; }
    }
    if (best >= cfg.pos_iou) {
      out.labels[i] = 1;
      out.matched_gt[i] = best_j;
      ++out.num_pos;
    } else if (best <= cfg.neg_iou) {
      out.labels[i] = -1;
      ++out.num_neg;
    } else {
      out.labels[i] = 0;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// fused losses over the dense score / box maps

// scores: any shape with numel == labels.size(). Sum of per-example losses;
// divided by the contributing-anchor count when normalize is set. Anchors
// flagged in `skip` (out-of-bounds warps) contribute nothing.
template <typename T>
Tensor<T> spotting_loss(const Tensor<T>& scores, const std::vector<int8_t>& labels,
                        const LossConfig& cfg, bool normalize = false,
                        const std::vector<uint8_t>* skip = nullptr) {
  cfg.validate();
  int64_t n = scores.size();
  check((int64_t)labels.size() == n, "spotting_loss: labels/scores size mismatch");
  check(!skip || (int64_t)skip->size() == n, "spotting_loss: skip/scores size mismatch");
  const T* s = scores.data();
  auto active = [&](int64_t i) { return labels[i] != 0 && !(skip && (*skip)[i]); };

  Tensor<T> out = make_result<T>({1}, {scores});
  double acc = 0;
  int64_t contributing = 0;
  if (cfg.kind == SpotLossKind::triplet) {
    int64_t pairs = 0;
    for (int64_t i = 0; i < n; ++i) {
      if (!active(i) || labels[i] != 1) continue;
      for (int64_t j = 0; j < n; ++j) {
        if (!active(j) || labels[j] != -1) continue;
        acc += std::max(cfg.triplet_margin - (double)s[i] + (double)s[j], 0.0);
        ++pairs;
      }
    }
    contributing = pairs;
  } else {
    for (int64_t i = 0; i < n; ++i) {
      if (!active(i)) continue;
      acc += labels[i] == 1 ? spot_pos_term((double)s[i], cfg)
                            : spot_neg_term((double)s[i], cfg);
      ++contributing;
    }
  }
  double norm = normalize ? (double)std::max<int64_t>(1, contributing) : 1.0;
  out.data()[0] = T(acc / norm);

  if (out.requires_grad()) {
    auto sn = scores.node();
    auto on = out.node();
    auto skip_copy = skip ? *skip : std::vector<uint8_t>();
    out.node()->backprop = [sn, on, labels, cfg, norm, skip_copy, n]() {
      sn->ensure_grad();
      const T* s = sn->value.data();
      auto active = [&](int64_t i) {
        return labels[i] != 0 && (skip_copy.empty() || !skip_copy[i]);
      };
      T g = on->grad[0] / T(norm);
      if (cfg.kind == SpotLossKind::triplet) {
        for (int64_t i = 0; i < n; ++i) {
          if (!active(i) || labels[i] != 1) continue;
          for (int64_t j = 0; j < n; ++j) {
            if (!active(j) || labels[j] != -1) continue;
            if (cfg.triplet_margin - (double)s[i] + (double)s[j] > 0) {
              sn->grad[i] -= g;
              sn->grad[j] += g;
            }
          }
        }
      } else {
        for (int64_t i = 0; i < n; ++i) {
          if (!active(i)) continue;
          double d = labels[i] == 1 ? spot_pos_deriv((double)s[i], cfg)
                                    : spot_neg_deriv((double)s[i], cfg);
          sn->grad[i] += g * T(d);
        }
      }
    };
  }
  return out;
}

// boxes: [4,Ha*Wa-shaped] corner map from the warp; targets/anchors give the
// ground-truth and identity-extent corner boxes per anchor. Corner deltas
// are normalized by the anchor width/height before the smooth-L1; summed
// over positive anchors, divided by their count when normalize is set.
template <typename T>
Tensor<T> localization_loss(const Tensor<T>& boxes, const TargetAssignment& assign,
                            const std::vector<Box>& gt, const std::vector<Box>& anchors,
                            bool normalize = false,
                            const std::vector<uint8_t>* skip = nullptr) {
  check(boxes.ndim() >= 1 && boxes.dim(0) == 4, "localization_loss expects a [4,...] box map");
  int64_t n = boxes.size() / 4;
  check((int64_t)assign.labels.size() == n && (int64_t)anchors.size() == n,
        "localization_loss: anchor count mismatch");

  auto active_pos = [&](int64_t i) {
    return assign.labels[i] == 1 && !(skip && (*skip)[i]);
  };
  auto norm_denom = [&](int64_t i, int c) {
    // x-coords normalized by anchor width, y-coords by height
    const Box& a = anchors[i];
    return (c == 0 || c == 2) ? std::max(a.w(), 1e-6) : std::max(a.h(), 1e-6);
  };
  auto target_coord = [&](int64_t i, int c) {
    const Box& gb = gt[assign.matched_gt[i]];
    switch (c) {
      case 0: return gb.x0;
      case 1: return gb.y0;
      case 2: return gb.x1;
      default: return gb.y1;
    }
  };

  Tensor<T> out = make_result<T>({1}, {boxes});
  const T* b = boxes.data();
  double acc = 0;
  int64_t npos = 0;
  for (int64_t i = 0; i < n; ++i) {
    if (!active_pos(i)) continue;
    ++npos;
    for (int c = 0; c < 4; ++c) {
      double d = std::abs(((double)b[c * n + i] - target_coord(i, c)) / norm_denom(i, c));
      acc += d < 1.0 ? 0.5 * d * d : d - 0.5;
    }
  }
  double norm = normalize ? (double)std::max<int64_t>(1, npos) : 1.0;
  out.data()[0] = T(acc / norm);

  if (out.requires_grad()) {
    auto bn = boxes.node();
    auto on = out.node();
    // capture target/denominator tables so the closure owns plain data
    std::vector<double> tgt((size_t)n * 4, 0), den((size_t)n * 4, 1);
    std::vector<uint8_t> pos((size_t)n, 0);
    for (int64_t i = 0; i < n; ++i) {
      if (!active_pos(i)) continue;
      pos[i] = 1;
      for (int c = 0; c < 4; ++c) {
        tgt[i * 4 + c] = target_coord(i, c);
        den[i * 4 + c] = norm_denom(i, c);
      }
    }
    out.node()->backprop = [bn, on, tgt, den, pos, norm, n]() {
      bn->ensure_grad();
      const T* b = bn->value.data();
      T g = on->grad[0] / T(norm);
      for (int64_t i = 0; i < n; ++i) {
        if (!pos[i]) continue;
        for (int c = 0; c < 4; ++c) {
          double d = ((double)b[c * n + i] - tgt[i * 4 + c]) / den[i * 4 + c];
          double dd = std::abs(d) < 1.0 ? d : (d > 0 ? 1.0 : -1.0);
          bn->grad[c * n + i] += g * T(dd / den[i * 4 + c]);
        }
      }
    };
  }
  return out;
}

template <typename T>
Tensor<T> total_loss(const Tensor<T>& loc, const Tensor<T>& spot, const LossConfig& cfg) {
  return add(scale(loc, T(cfg.lambda)), spot);
}

}  // namespace ots
