#pragma once

// Normalized cosine correlation between support and query feature maps, the
// 3D reshaped view used by the attention blocks, and the sliding-window
// baseline scorer.

#include "ots/tensor.hpp"

namespace ots {

template <typename T>
struct CorrelationMap {
  Tensor<T> four_d;    // [hq, wq, hs, ws]
  Tensor<T> reshaped;  // [hq, wq, hs*ws]
  int hq = 0, wq = 0, hs = 0, ws = 0;
  int d = 0;  // hs*ws
};

namespace detail {

// out[a,b,k,l] = sum_D uq[D,a,b] * us[D,k,l] for unit-normalized features.
template <typename T>
Tensor<T> corr_contract(const Tensor<T>& uq, const Tensor<T>& us) {
  int D = uq.dim(0), hq = uq.dim(1), wq = uq.dim(2);
  int hs = us.dim(1), ws = us.dim(2);
  Tensor<T> out = make_result<T>({hq, wq, hs, ws}, {uq, us});
  const T* pq = uq.data();
  const T* ps = us.data();
  T* po = out.data();
  int64_t qhw = (int64_t)hq * wq;
  int64_t shw = (int64_t)hs * ws;
#pragma omp parallel for schedule(static)
  for (int64_t ab = 0; ab < qhw; ++ab) {
    for (int64_t kl = 0; kl < shw; ++kl) {
      T acc = T(0);
      for (int c = 0; c < D; ++c) acc += pq[c * qhw + ab] * ps[c * shw + kl];
      po[ab * shw + kl] = acc;
    }
  }
  if (out.requires_grad()) {
    auto qn = uq.node();
    auto sn = us.node();
    auto on = out.node();
    out.node()->backprop = [qn, sn, on, D, qhw, shw]() {
      const T* g = on->grad.data();
      if (qn->requires_grad) {
        qn->ensure_grad();
#pragma omp parallel for schedule(static)
        for (int64_t ab = 0; ab < qhw; ++ab)
          for (int c = 0; c < D; ++c) {
            T acc = T(0);
            for (int64_t kl = 0; kl < shw; ++kl)
              acc += g[ab * shw + kl] * sn->value[c * shw + kl];
            qn->grad[c * qhw + ab] += acc;
          }
      }
      if (sn->requires_grad) {
        sn->ensure_grad();
#pragma omp parallel for schedule(static)
        for (int64_t kl = 0; kl < shw; ++kl)
          for (int c = 0; c < D; ++c) {
            T acc = T(0);
            for (int64_t ab = 0; ab < qhw; ++ab)
              acc += g[ab * shw + kl] * qn->value[c * qhw + ab];
            sn->grad[c * shw + kl] += acc;
          }
      }
    };
  }
  return out;
}

}  // namespace detail

// f_q: [D,hq,wq], f_s: [D,hs,ws]. Entry (a,b,k,l) is the cosine similarity of
// the channel vectors at query position (a,b) and support position (k,l).
// Zero-norm vectors (possible after ReLU) yield similarity 0 with zero grad.
template <typename T>
CorrelationMap<T> correlation_map(const Tensor<T>& f_q, const Tensor<T>& f_s) {
  check(f_q.ndim() == 3 && f_s.ndim() == 3, "correlation_map expects 3D [D,h,w] features");
  check(f_q.dim(0) == f_s.dim(0),
        "correlation_map channel mismatch: query D=" + std::to_string(f_q.dim(0)) +
            " vs support D=" + std::to_string(f_s.dim(0)));
  Tensor<T> uq = l2_normalize(f_q, 0);
  Tensor<T> us = l2_normalize(f_s, 0);
  CorrelationMap<T> m;
  m.hq = f_q.dim(1);
  m.wq = f_q.dim(2);
  m.hs = f_s.dim(1);
  m.ws = f_s.dim(2);
  m.d = m.hs * m.ws;
  m.four_d = detail::corr_contract(uq, us);
  m.reshaped = reshape(m.four_d, {m.hq, m.wq, m.d});
  return m;
}

// Sliding-window normalized cross-correlation baseline: the support feature
// block is slid over the query feature map; each placement scores the cosine
// between the flattened support feature and the query window.
template <typename T>
Tensor<T> dsw_score_map(const Tensor<T>& f_q, const Tensor<T>& f_s) {
  check(f_q.ndim() == 3 && f_s.ndim() == 3, "dsw_score_map expects 3D [D,h,w] features");
  check(f_q.dim(0) == f_s.dim(0), "dsw_score_map channel mismatch");
  int D = f_q.dim(0), hq = f_q.dim(1), wq = f_q.dim(2);
  int hs = f_s.dim(1), ws = f_s.dim(2);
  check(hs <= hq && ws <= wq, "dsw_score_map: support feature larger than query feature");
  int oh = hq - hs + 1, ow = wq - ws + 1;

  const T* q = f_q.data();
  const T* s = f_s.data();
  T s_norm_sq = T(0);
  for (int64_t i = 0; i < f_s.size(); ++i) s_norm_sq += s[i] * s[i];
  T s_norm = std::sqrt(s_norm_sq);

  Tensor<T> out = Tensor<T>::zeros({oh, ow});
  T* po = out.data();
  const T eps = T(1e-8);
#pragma omp parallel for schedule(static)
  for (int y = 0; y < oh; ++y) {
    for (int x = 0; x < ow; ++x) {
      T dot = T(0), wn = T(0);
      for (int c = 0; c < D; ++c)
        for (int k = 0; k < hs; ++k)
          for (int l = 0; l < ws; ++l) {
            T qv = q[((int64_t)c * hq + y + k) * wq + x + l];
            T sv = s[((int64_t)c * hs + k) * ws + l];
            dot += qv * sv;
            wn += qv * qv;
          }
      po[(int64_t)y * ow + x] = dot / (std::sqrt(wn) * s_norm + eps);
    }
  }
  return out;
}

}  // namespace ots
