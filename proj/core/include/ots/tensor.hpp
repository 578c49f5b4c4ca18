#pragma once

// Dense tensor engine with reverse-mode differentiation. Layout is
// batch-major NCHW; ops cover exactly what the spotting pipeline needs.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace ots {

using Shape = std::vector<int>;

struct TensorError : std::runtime_error {
  explicit TensorError(const std::string& what) : std::runtime_error(what) {}
};

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

[[noreturn]] inline void tensor_fail(const std::string& msg) { throw TensorError(msg); }

inline void check(bool ok, const std::string& msg) {
  if (!ok) tensor_fail(msg);
}

// Thread-local switch: when false, ops do not record the tape.
inline bool& grad_enabled() {
  thread_local bool enabled = true;
  return enabled;
}

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(grad_enabled()) { grad_enabled() = false; }
  ~NoGradGuard() { grad_enabled() = prev; }
};

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // lazily allocated, same length as value
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void()> backprop;

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T(0));
  }
};

template <typename T>
class Tensor {
 public:
  using Scalar = T;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorNode<T>> n) : node_(std::move(n)) {}

  static Tensor zeros(Shape shape) { return full(std::move(shape), T(0)); }

  static Tensor full(Shape shape, T v) {
    auto n = std::make_shared<TensorNode<T>>();
    n->value.assign(shape_numel(shape), v);
    n->shape = std::move(shape);
    return Tensor(n);
  }

  static Tensor from_data(Shape shape, std::vector<T> data) {
    check((int64_t)data.size() == shape_numel(shape),
          "tensor data length " + std::to_string(data.size()) +
              " does not match shape " + shape_str(shape));
    auto n = std::make_shared<TensorNode<T>>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    return Tensor(n);
  }

  static Tensor scalar(T v) { return from_data({1}, {v}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int ndim() const { return (int)node_->shape.size(); }
  int dim(int i) const { return node_->shape[i]; }
  int64_t size() const { return (int64_t)node_->value.size(); }

  std::vector<T>& values() { return node_->value; }
  const std::vector<T>& values() const { return node_->value; }
  T* data() { return node_->value.data(); }
  const T* data() const { return node_->value.data(); }

  T item() const {
    check(size() == 1, "item() requires a scalar tensor, got " + shape_str(shape()));
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    node_->requires_grad = on;
    return *this;
  }

  const std::vector<T>& grad() const { return node_->grad; }
  std::vector<T>& grad_buffer() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }

  std::shared_ptr<TensorNode<T>> node() const { return node_; }

 private:
  std::shared_ptr<TensorNode<T>> node_;
};

// Allocates the result node and wires tape parents when grad mode is on.
// The caller fills value and, when result.requires_grad(), sets the backprop.
template <typename T>
Tensor<T> make_result(Shape shape, std::initializer_list<Tensor<T>> parents) {
  auto n = std::make_shared<TensorNode<T>>();
  n->value.assign(shape_numel(shape), T(0));
  n->shape = std::move(shape);
  if (grad_enabled()) {
    for (const auto& p : parents) {
      if (p.defined() && p.requires_grad()) {
        n->requires_grad = true;
        break;
      }
    }
    if (n->requires_grad) {
      for (const auto& p : parents)
        if (p.defined()) n->parents.push_back(p.node());
    }
  }
  return Tensor<T>(n);
}

// ---------------------------------------------------------------------------
// backward

template <typename T>
void backward(Tensor<T> loss) {
  check(loss.size() == 1, "backward() requires a scalar loss, got " + shape_str(loss.shape()));
  check(loss.requires_grad(), "backward() on a tensor with no tape");

  // Iterative post-order DFS for topological order.
  std::vector<TensorNode<T>*> topo;
  std::unordered_set<TensorNode<T>*> visited;
  std::vector<std::pair<TensorNode<T>*, size_t>> stack;
  stack.push_back({loss.node().get(), 0});
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      TensorNode<T>* p = node->parents[idx++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      topo.push_back(node);
      stack.pop_back();
    }
  }

  loss.node()->ensure_grad();
  loss.node()->grad[0] += T(1);
  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    if ((*it)->backprop) (*it)->backprop();
  }

  // The tape is single-use: release closures and parent edges now. Closures
  // capture shared pointers to the nodes they touch (including their own), so
  // the graph would otherwise keep itself alive across steps.
  for (auto* n : topo) {
    n->backprop = nullptr;
    n->parents.clear();
  }
}

// ---------------------------------------------------------------------------
// broadcasting helpers (trailing-dimension alignment)

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  size_t nd = std::max(a.size(), b.size());
  Shape out(nd);
  for (size_t i = 0; i < nd; ++i) {
    int da = i < nd - a.size() ? 1 : a[i - (nd - a.size())];
    int db = i < nd - b.size() ? 1 : b[i - (nd - b.size())];
    if (da != db && da != 1 && db != 1)
      tensor_fail("incompatible broadcast shapes " + shape_str(a) + " vs " + shape_str(b));
    out[i] = std::max(da, db);
  }
  return out;
}

// Strides of `s` padded to rank nd, with zero stride on broadcast dims.
inline std::vector<int64_t> broadcast_strides(const Shape& s, const Shape& out) {
  size_t nd = out.size();
  std::vector<int64_t> strides(nd, 0);
  int64_t st = 1;
  for (size_t i = 0; i < s.size(); ++i) {
    size_t j = s.size() - 1 - i;
    size_t oj = nd - 1 - i;
    strides[oj] = (s[j] == 1 && out[oj] != 1) ? 0 : st;
    st *= s[j];
  }
  return strides;
}

namespace detail {

// Walks the flattened output index space, producing source offsets for both
// operands under broadcasting.
template <typename Fn>
void for_each_broadcast(const Shape& out, const std::vector<int64_t>& sa,
                        const std::vector<int64_t>& sb, Fn&& fn) {
  int64_t n = shape_numel(out);
  size_t nd = out.size();
  std::vector<int> idx(nd, 0);
  int64_t oa = 0, ob = 0;
  for (int64_t i = 0; i < n; ++i) {
    fn(i, oa, ob);
    for (size_t d = nd; d-- > 0;) {
      ++idx[d];
      oa += sa[d];
      ob += sb[d];
      if (idx[d] < out[d]) break;
      oa -= (int64_t)idx[d] * sa[d];
      ob -= (int64_t)idx[d] * sb[d];
      idx[d] = 0;
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise binary ops

template <typename T, typename FwdFn, typename BwdA, typename BwdB>
Tensor<T> binary_op(const Tensor<T>& a, const Tensor<T>& b, FwdFn f, BwdA dfa, BwdB dfb) {
  Shape out_shape = broadcast_shape(a.shape(), b.shape());
  auto sa = broadcast_strides(a.shape(), out_shape);
  auto sb = broadcast_strides(b.shape(), out_shape);
  Tensor<T> out = make_result(out_shape, {a, b});
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  detail::for_each_broadcast(out_shape, sa, sb,
                             [&](int64_t i, int64_t oa, int64_t ob) { po[i] = f(pa[oa], pb[ob]); });
  if (out.requires_grad()) {
    auto an = a.node();
    auto bn = b.node();
    auto on = out.node();
    out.node()->backprop = [an, bn, on, sa, sb, out_shape, dfa, dfb]() {
      if (an->requires_grad) an->ensure_grad();
      if (bn->requires_grad) bn->ensure_grad();
      const T* pa = an->value.data();
      const T* pb = bn->value.data();
      const T* g = on->grad.data();
      detail::for_each_broadcast(out_shape, sa, sb, [&](int64_t i, int64_t oa, int64_t ob) {
        if (an->requires_grad) an->grad[oa] += g[i] * dfa(pa[oa], pb[ob]);
        if (bn->requires_grad) bn->grad[ob] += g[i] * dfb(pa[oa], pb[ob]);
      });
    };
  }
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(
      a, b, [](T x, T y) { return x + y; }, [](T, T) { return T(1); },
      [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(
      a, b, [](T x, T y) { return x - y; }, [](T, T) { return T(1); },
      [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(
      a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; },
      [](T x, T) { return x; });
}

// ---------------------------------------------------------------------------
// elementwise unary ops

template <typename T, typename FwdFn, typename BwdFn>
Tensor<T> unary_op(const Tensor<T>& a, FwdFn f, BwdFn df) {
  Tensor<T> out = make_result(a.shape(), {a});
  const T* pa = a.data();
  T* po = out.data();
  int64_t n = a.size();
  for (int64_t i = 0; i < n; ++i) po[i] = f(pa[i]);
  if (out.requires_grad()) {
    auto an = a.node();
    auto on = out.node();
    out.node()->backprop = [an, on, df]() {
      an->ensure_grad();
      int64_t n = (int64_t)an->value.size();
      for (int64_t i = 0; i < n; ++i) an->grad[i] += on->grad[i] * df(an->value[i], on->value[i]);
    };
  }
  return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  return unary_op(
      a, [](T x) { return x > T(0) ? x : T(0); },
      [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return unary_op(
      a, [](T x) { return T(1) / (T(1) + std::exp(-x)); },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  return unary_op(
      a, [s](T x) { return x * s; }, [s](T, T) { return s; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  return unary_op(
      a, [s](T x) { return x + s; }, [](T, T) { return T(1); });
}

// ---------------------------------------------------------------------------
// reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  Tensor<T> out = make_result<T>({1}, {a});
  T acc = T(0);
  const T* pa = a.data();
  for (int64_t i = 0; i < a.size(); ++i) acc += pa[i];
  out.data()[0] = acc;
  if (out.requires_grad()) {
    auto an = a.node();
    auto on = out.node();
    out.node()->backprop = [an, on]() {
      an->ensure_grad();
      T g = on->grad[0];
      for (auto& v : an->grad) v += g;
    };
  }
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / T(a.size()));
}

// ---------------------------------------------------------------------------
// shape ops (exact round-trips)

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  check(shape_numel(shape) == a.size(),
        "reshape " + shape_str(a.shape()) + " -> " + shape_str(shape) + " changes element count");
  Tensor<T> out = make_result(shape, {a});
  out.values() = a.values();
  if (out.requires_grad()) {
    auto an = a.node();
    auto on = out.node();
    out.node()->backprop = [an, on]() {
      an->ensure_grad();
      for (size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += on->grad[i];
    };
  }
  return out;
}

template <typename T>
Tensor<T> permute(const Tensor<T>& a, const std::vector<int>& perm) {
  check((int)perm.size() == a.ndim(), "permute order rank mismatch");
  const Shape& in = a.shape();
  size_t nd = in.size();
  Shape out_shape(nd);
  for (size_t i = 0; i < nd; ++i) out_shape[i] = in[perm[i]];

  std::vector<int64_t> in_strides(nd, 1);
  for (size_t i = nd - 1; i > 0; --i) in_strides[i - 1] = in_strides[i] * in[i];
  std::vector<int64_t> src_strides(nd);
  for (size_t i = 0; i < nd; ++i) src_strides[i] = in_strides[perm[i]];

  Tensor<T> out = make_result(out_shape, {a});
  const T* pa = a.data();
  T* po = out.data();
  std::vector<int> idx(nd, 0);
  int64_t src = 0;
  int64_t n = a.size();
  for (int64_t i = 0; i < n; ++i) {
    po[i] = pa[src];
    for (size_t d = nd; d-- > 0;) {
      ++idx[d];
      src += src_strides[d];
      if (idx[d] < out_shape[d]) break;
      src -= (int64_t)idx[d] * src_strides[d];
      idx[d] = 0;
    }
  }
  if (out.requires_grad()) {
    auto an = a.node();
    auto on = out.node();
    out.node()->backprop = [an, on, src_strides, out_shape]() {
      an->ensure_grad();
      size_t nd = out_shape.size();
      std::vector<int> idx(nd, 0);
      int64_t src = 0;
      int64_t n = (int64_t)on->value.size();
      for (int64_t i = 0; i < n; ++i) {
        an->grad[src] += on->grad[i];
        for (size_t d = nd; d-- > 0;) {
          ++idx[d];
          src += src_strides[d];
          if (idx[d] < out_shape[d]) break;
          src -= (int64_t)idx[d] * src_strides[d];
          idx[d] = 0;
        }
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// conv2d

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 int stride = 1, int padding = 0) {
  check(input.ndim() == 4, "conv2d input must be 4D, got " + shape_str(input.shape()));
  check(weight.ndim() == 4, "conv2d weight must be 4D, got " + shape_str(weight.shape()));
  int N = input.dim(0), Cin = input.dim(1), H = input.dim(2), W = input.dim(3);
  int Cout = weight.dim(0), Kh = weight.dim(2), Kw = weight.dim(3);
  check(weight.dim(1) == Cin, "conv2d channel mismatch: input C=" + std::to_string(Cin) +
                                  " weight expects C=" + std::to_string(weight.dim(1)));
  if (bias.defined())
    check(bias.size() == Cout, "conv2d bias length must equal output channels");
  int Ho = (H + 2 * padding - Kh) / stride + 1;
  int Wo = (W + 2 * padding - Kw) / stride + 1;
  check(Ho >= 1 && Wo >= 1, "conv2d output would be empty for input " + shape_str(input.shape()));

  Tensor<T> out = make_result<T>({N, Cout, Ho, Wo}, {input, weight, bias});
  const T* x = input.data();
  const T* w = weight.data();
  const T* b = bias.defined() ? bias.data() : nullptr;
  T* y = out.data();

#pragma omp parallel for collapse(2) schedule(static)
  for (int n = 0; n < N; ++n) {
    for (int co = 0; co < Cout; ++co) {
      for (int oh = 0; oh < Ho; ++oh) {
        for (int ow = 0; ow < Wo; ++ow) {
          T acc = b ? b[co] : T(0);
          for (int ci = 0; ci < Cin; ++ci) {
            for (int kh = 0; kh < Kh; ++kh) {
              int ih = oh * stride - padding + kh;
              if (ih < 0 || ih >= H) continue;
              const T* xrow = x + (((int64_t)n * Cin + ci) * H + ih) * W;
              const T* wrow = w + (((int64_t)co * Cin + ci) * Kh + kh) * Kw;
              for (int kw = 0; kw < Kw; ++kw) {
                int iw = ow * stride - padding + kw;
                if (iw < 0 || iw >= W) continue;
                acc += xrow[iw] * wrow[kw];
              }
            }
          }
          y[(((int64_t)n * Cout + co) * Ho + oh) * Wo + ow] = acc;
        }
      }
    }
  }

  if (out.requires_grad()) {
    auto xn = input.node();
    auto wn = weight.node();
    auto bn = bias.defined() ? bias.node() : nullptr;
    auto on = out.node();
    out.node()->backprop = [xn, wn, bn, on, N, Cin, Cout, H, W, Kh, Kw, Ho, Wo, stride,
                            padding]() {
      const T* g = on->grad.data();
      const T* x = xn->value.data();
      const T* w = wn->value.data();
      if (xn->requires_grad) {
        xn->ensure_grad();
        T* gx = xn->grad.data();
        // gather formulation keeps parallel writes disjoint and deterministic
#pragma omp parallel for collapse(2) schedule(static)
        for (int n = 0; n < N; ++n) {
          for (int ci = 0; ci < Cin; ++ci) {
            for (int ih = 0; ih < H; ++ih) {
              for (int iw = 0; iw < W; ++iw) {
                T acc = T(0);
                for (int co = 0; co < Cout; ++co) {
                  for (int kh = 0; kh < Kh; ++kh) {
                    int oh_num = ih + padding - kh;
                    if (oh_num < 0 || oh_num % stride) continue;
                    int oh = oh_num / stride;
                    if (oh >= Ho) continue;
                    for (int kw = 0; kw < Kw; ++kw) {
                      int ow_num = iw + padding - kw;
                      if (ow_num < 0 || ow_num % stride) continue;
                      int ow = ow_num / stride;
                      if (ow >= Wo) continue;
                      acc += g[(((int64_t)n * Cout + co) * Ho + oh) * Wo + ow] *
                             w[(((int64_t)co * Cin + ci) * Kh + kh) * Kw + kw];
                    }
                  }
                }
                gx[(((int64_t)n * Cin + ci) * H + ih) * W + iw] += acc;
              }
            }
          }
        }
      }
      if (wn->requires_grad) {
        wn->ensure_grad();
        T* gw = wn->grad.data();
#pragma omp parallel for collapse(2) schedule(static)
        for (int co = 0; co < Cout; ++co) {
          for (int ci = 0; ci < Cin; ++ci) {
            for (int kh = 0; kh < Kh; ++kh) {
              for (int kw = 0; kw < Kw; ++kw) {
                T acc = T(0);
                for (int n = 0; n < N; ++n) {
                  for (int oh = 0; oh < Ho; ++oh) {
                    int ih = oh * stride - padding + kh;
                    if (ih < 0 || ih >= H) continue;
                    for (int ow = 0; ow < Wo; ++ow) {
                      int iw = ow * stride - padding + kw;
                      if (iw < 0 || iw >= W) continue;
                      acc += g[(((int64_t)n * Cout + co) * Ho + oh) * Wo + ow] *
                             x[(((int64_t)n * Cin + ci) * H + ih) * W + iw];
                    }
                  }
                }
                gw[(((int64_t)co * Cin + ci) * Kh + kh) * Kw + kw] += acc;
              }
            }
          }
        }
      }
      if (bn && bn->requires_grad) {
        bn->ensure_grad();
        for (int co = 0; co < Cout; ++co) {
          T acc = T(0);
          for (int n = 0; n < N; ++n)
            for (int64_t i = 0; i < (int64_t)Ho * Wo; ++i)
              acc += g[((int64_t)n * Cout + co) * Ho * Wo + i];
          bn->grad[co] += acc;
        }
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// linear: x [N,F] * w [O,F]^T + b [O]

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  check(x.ndim() == 2 && w.ndim() == 2, "linear expects 2D input and weight");
  int N = x.dim(0), F = x.dim(1), O = w.dim(0);
  check(w.dim(1) == F, "linear feature mismatch: input F=" + std::to_string(F) +
                           " weight expects F=" + std::to_string(w.dim(1)));
  Tensor<T> out = make_result<T>({N, O}, {x, w, b});
  const T* px = x.data();
  const T* pw = w.data();
  const T* pb = b.defined() ? b.data() : nullptr;
  T* py = out.data();
  for (int n = 0; n < N; ++n) {
    for (int o = 0; o < O; ++o) {
      T acc = pb ? pb[o] : T(0);
      for (int f = 0; f < F; ++f) acc += px[n * F + f] * pw[o * F + f];
      py[n * O + o] = acc;
    }
  }
  if (out.requires_grad()) {
    auto xn = x.node();
    auto wn = w.node();
    auto bn = b.defined() ? b.node() : nullptr;
    auto on = out.node();
    out.node()->backprop = [xn, wn, bn, on, N, F, O]() {
      const T* g = on->grad.data();
      if (xn->requires_grad) {
        xn->ensure_grad();
        for (int n = 0; n < N; ++n)
          for (int f = 0; f < F; ++f) {
            T acc = T(0);
            for (int o = 0; o < O; ++o) acc += g[n * O + o] * wn->value[o * F + f];
            xn->grad[n * F + f] += acc;
          }
      }
      if (wn->requires_grad) {
        wn->ensure_grad();
        for (int o = 0; o < O; ++o)
          for (int f = 0; f < F; ++f) {
            T acc = T(0);
            for (int n = 0; n < N; ++n) acc += g[n * O + o] * xn->value[n * F + f];
            wn->grad[o * F + f] += acc;
          }
      }
      if (bn && bn->requires_grad) {
        bn->ensure_grad();
        for (int o = 0; o < O; ++o) {
          T acc = T(0);
          for (int n = 0; n < N; ++n) acc += g[n * O + o];
          bn->grad[o] += acc;
        }
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// global pooling

template <typename T>
Tensor<T> avg_pool_global(const Tensor<T>& x) {
  check(x.ndim() == 4, "avg_pool_global expects a 4D tensor");
  int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  check(H > 0 && W > 0, "avg_pool_global on empty spatial extent");
  Tensor<T> out = make_result<T>({N, C, 1, 1}, {x});
  const T* px = x.data();
  T* py = out.data();
  int64_t hw = (int64_t)H * W;
  for (int64_t nc = 0; nc < (int64_t)N * C; ++nc) {
    T acc = T(0);
    for (int64_t i = 0; i < hw; ++i) acc += px[nc * hw + i];
    py[nc] = acc / T(hw);
  }
  if (out.requires_grad()) {
    auto xn = x.node();
    auto on = out.node();
    out.node()->backprop = [xn, on, hw]() {
      xn->ensure_grad();
      int64_t nc_total = (int64_t)on->value.size();
      for (int64_t nc = 0; nc < nc_total; ++nc) {
        T g = on->grad[nc] / T(hw);
        for (int64_t i = 0; i < hw; ++i) xn->grad[nc * hw + i] += g;
      }
    };
  }
  return out;
}

template <typename T>
Tensor<T> max_pool_global(const Tensor<T>& x) {
  check(x.ndim() == 4, "max_pool_global expects a 4D tensor");
  int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  check(H > 0 && W > 0, "max_pool_global on empty spatial extent");
  Tensor<T> out = make_result<T>({N, C, 1, 1}, {x});
  const T* px = x.data();
  T* py = out.data();
  int64_t hw = (int64_t)H * W;
  std::vector<int64_t> argmax((size_t)N * C);
  for (int64_t nc = 0; nc < (int64_t)N * C; ++nc) {
    int64_t best = 0;
    for (int64_t i = 1; i < hw; ++i)
      if (px[nc * hw + i] > px[nc * hw + best]) best = i;  // first index wins ties
    argmax[nc] = best;
    py[nc] = px[nc * hw + best];
  }
  if (out.requires_grad()) {
    auto xn = x.node();
    auto on = out.node();
    out.node()->backprop = [xn, on, argmax, hw]() {
      xn->ensure_grad();
      for (int64_t nc = 0; nc < (int64_t)on->value.size(); ++nc)
        xn->grad[nc * hw + argmax[nc]] += on->grad[nc];
    };
  }
  return out;
}

// Per-position channel mean and channel max -> [N,2,H,W].
template <typename T>
Tensor<T> channel_pool(const Tensor<T>& x) {
  check(x.ndim() == 4, "channel_pool expects a 4D tensor");
  int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  check(C >= 1, "channel_pool requires C >= 1");
  Tensor<T> out = make_result<T>({N, 2, H, W}, {x});
  const T* px = x.data();
  T* py = out.data();
  int64_t hw = (int64_t)H * W;
  std::vector<int> argmax((size_t)N * hw);
  for (int n = 0; n < N; ++n) {
    for (int64_t i = 0; i < hw; ++i) {
      T acc = T(0);
      int best = 0;
      for (int c = 0; c < C; ++c) {
        T v = px[((int64_t)n * C + c) * hw + i];
        acc += v;
        if (v > px[((int64_t)n * C + best) * hw + i]) best = c;
      }
      argmax[n * hw + i] = best;
      py[((int64_t)n * 2 + 0) * hw + i] = acc / T(C);
      py[((int64_t)n * 2 + 1) * hw + i] = px[((int64_t)n * C + best) * hw + i];
    }
  }
  if (out.requires_grad()) {
    auto xn = x.node();
    auto on = out.node();
    out.node()->backprop = [xn, on, argmax, N, C, hw]() {
      xn->ensure_grad();
      for (int n = 0; n < N; ++n)
        for (int64_t i = 0; i < hw; ++i) {
          T ga = on->grad[((int64_t)n * 2 + 0) * hw + i] / T(C);
          for (int c = 0; c < C; ++c) xn->grad[((int64_t)n * C + c) * hw + i] += ga;
          xn->grad[((int64_t)n * C + argmax[n * hw + i]) * hw + i] +=
              on->grad[((int64_t)n * 2 + 1) * hw + i];
        }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// concat along channel dim of 4D tensors

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  check(a.ndim() == 4 && b.ndim() == 4, "concat_channels expects 4D tensors");
  check(a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) && a.dim(3) == b.dim(3),
        "concat_channels non-channel dims must match");
  int N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), H = a.dim(2), W = a.dim(3);
  Tensor<T> out = make_result<T>({N, Ca + Cb, H, W}, {a, b});
  int64_t hw = (int64_t)H * W;
  for (int n = 0; n < N; ++n) {
    std::copy_n(a.data() + (int64_t)n * Ca * hw, Ca * hw, out.data() + (int64_t)n * (Ca + Cb) * hw);
    std::copy_n(b.data() + (int64_t)n * Cb * hw, Cb * hw,
                out.data() + ((int64_t)n * (Ca + Cb) + Ca) * hw);
  }
  if (out.requires_grad()) {
    auto an = a.node();
    auto bn = b.node();
    auto on = out.node();
    out.node()->backprop = [an, bn, on, N, Ca, Cb, hw]() {
      for (int n = 0; n < N; ++n) {
        if (an->requires_grad) {
          an->ensure_grad();
          for (int64_t i = 0; i < Ca * hw; ++i)
            an->grad[(int64_t)n * Ca * hw + i] += on->grad[(int64_t)n * (Ca + Cb) * hw + i];
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          for (int64_t i = 0; i < Cb * hw; ++i)
            bn->grad[(int64_t)n * Cb * hw + i] +=
                on->grad[((int64_t)n * (Ca + Cb) + Ca) * hw + i];
        }
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// l2 normalize along one axis; zero-norm slices map to zero with zero gradient

template <typename T>
Tensor<T> l2_normalize(const Tensor<T>& x, int axis) {
  check(axis >= 0 && axis < x.ndim(), "l2_normalize axis out of range");
  const Shape& s = x.shape();
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[i];
  for (int i = axis + 1; i < (int)s.size(); ++i) inner *= s[i];
  int64_t len = s[axis];

  Tensor<T> out = make_result(x.shape(), {x});
  const T* px = x.data();
  T* py = out.data();
  std::vector<T> norms((size_t)(outer * inner));
  const T kZeroNorm = T(1e-12);
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t i = 0; i < inner; ++i) {
      T nsq = T(0);
      for (int64_t k = 0; k < len; ++k) {
        T v = px[(o * len + k) * inner + i];
        nsq += v * v;
      }
      T nrm = std::sqrt(nsq);
      norms[o * inner + i] = nrm;
      if (nrm < kZeroNorm) {
        for (int64_t k = 0; k < len; ++k) py[(o * len + k) * inner + i] = T(0);
      } else {
        for (int64_t k = 0; k < len; ++k)
          py[(o * len + k) * inner + i] = px[(o * len + k) * inner + i] / nrm;
      }
    }
  if (out.requires_grad()) {
    auto xn = x.node();
    auto on = out.node();
    out.node()->backprop = [xn, on, norms, outer, inner, len, kZeroNorm]() {
      xn->ensure_grad();
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t i = 0; i < inner; ++i) {
          T nrm = norms[o * inner + i];
          if (nrm < kZeroNorm) continue;
          T dot = T(0);
          for (int64_t k = 0; k < len; ++k)
            dot += on->value[(o * len + k) * inner + i] * on->grad[(o * len + k) * inner + i];
          for (int64_t k = 0; k < len; ++k) {
            int64_t idx = (o * len + k) * inner + i;
            xn->grad[idx] += (on->grad[idx] - on->value[idx] * dot) / nrm;
          }
        }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// bilinear resize (align-corners), differentiable

template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& x, int oh, int ow) {
  check(x.ndim() == 4, "bilinear_resize expects a 4D tensor");
  check(oh >= 1 && ow >= 1, "bilinear_resize target must be >= 1x1");
  int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  Tensor<T> out = make_result<T>({N, C, oh, ow}, {x});
  T sy = oh > 1 ? T(H - 1) / T(oh - 1) : T(0);
  T sx = ow > 1 ? T(W - 1) / T(ow - 1) : T(0);
  const T* px = x.data();
  T* py = out.data();
  for (int64_t nc = 0; nc < (int64_t)N * C; ++nc) {
    const T* src = px + nc * H * W;
    T* dst = py + nc * (int64_t)oh * ow;
    for (int y = 0; y < oh; ++y) {
      T fy = y * sy;
      int y0 = std::min((int)fy, H - 1);
      int y1 = std::min(y0 + 1, H - 1);
      T wy = fy - y0;
      for (int xo = 0; xo < ow; ++xo) {
        T fx = xo * sx;
        int x0 = std::min((int)fx, W - 1);
        int x1 = std::min(x0 + 1, W - 1);
        T wx = fx - x0;
        dst[(int64_t)y * ow + xo] = (T(1) - wy) * ((T(1) - wx) * src[y0 * W + x0] + wx * src[y0 * W + x1]) +
                                    wy * ((T(1) - wx) * src[y1 * W + x0] + wx * src[y1 * W + x1]);
      }
    }
  }
  if (out.requires_grad()) {
    auto xn = x.node();
    auto on = out.node();
    out.node()->backprop = [xn, on, N, C, H, W, oh, ow, sy, sx]() {
      xn->ensure_grad();
      for (int64_t nc = 0; nc < (int64_t)N * C; ++nc) {
        T* gx = xn->grad.data() + nc * H * W;
        const T* g = on->grad.data() + nc * (int64_t)oh * ow;
        for (int y = 0; y < oh; ++y) {
          T fy = y * sy;
          int y0 = std::min((int)fy, H - 1);
          int y1 = std::min(y0 + 1, H - 1);
          T wy = fy - y0;
          for (int xo = 0; xo < ow; ++xo) {
            T fx = xo * sx;
            int x0 = std::min((int)fx, W - 1);
            int x1 = std::min(x0 + 1, W - 1);
            T wx = fx - x0;
            T gv = g[(int64_t)y * ow + xo];
            gx[y0 * W + x0] += gv * (T(1) - wy) * (T(1) - wx);
            gx[y0 * W + x1] += gv * (T(1) - wy) * wx;
            gx[y1 * W + x0] += gv * wy * (T(1) - wx);
            gx[y1 * W + x1] += gv * wy * wx;
          }
        }
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// batch norm over (N,H,W) per channel

template <typename T>
struct BatchNormState {
  std::vector<T> running_mean;
  std::vector<T> running_var;
  T momentum = T(0.1);
  T eps = T(1e-5);
};

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     BatchNormState<T>& state, bool training) {
  check(x.ndim() == 4, "batch_norm expects a 4D tensor");
  int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  check((int)state.running_mean.size() == C, "batch_norm state channel mismatch");
  int64_t hw = (int64_t)H * W;
  int64_t cnt = (int64_t)N * hw;

  std::vector<T> mean_c(C), var_c(C);
  if (training) {
    for (int c = 0; c < C; ++c) {
      T m = T(0);
      for (int n = 0; n < N; ++n)
        for (int64_t i = 0; i < hw; ++i) m += x.data()[((int64_t)n * C + c) * hw + i];
      m /= T(cnt);
      T v = T(0);
      for (int n = 0; n < N; ++n)
        for (int64_t i = 0; i < hw; ++i) {
          T d = x.data()[((int64_t)n * C + c) * hw + i] - m;
          v += d * d;
        }
      v /= T(cnt);
      mean_c[c] = m;
      var_c[c] = v;
      state.running_mean[c] = (T(1) - state.momentum) * state.running_mean[c] + state.momentum * m;
      state.running_var[c] = (T(1) - state.momentum) * state.running_var[c] + state.momentum * v;
    }
  } else {
    mean_c = state.running_mean;
    var_c = state.running_var;
  }

  Tensor<T> out = make_result(x.shape(), {x, gamma, beta});
  std::vector<T> inv_std(C);
  for (int c = 0; c < C; ++c) inv_std[c] = T(1) / std::sqrt(var_c[c] + state.eps);
  const T* px = x.data();
  T* py = out.data();
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int64_t i = 0; i < hw; ++i) {
        int64_t idx = ((int64_t)n * C + c) * hw + i;
        py[idx] = gamma.data()[c] * (px[idx] - mean_c[c]) * inv_std[c] + beta.data()[c];
      }

  if (out.requires_grad()) {
    auto xn = x.node();
    auto gn = gamma.node();
    auto bn = beta.node();
    auto on = out.node();
    out.node()->backprop = [xn, gn, bn, on, mean_c, inv_std, N, C, hw, cnt, training]() {
      const T* g = on->grad.data();
      const T* px = xn->value.data();
      for (int c = 0; c < C; ++c) {
        T sum_g = T(0), sum_gx = T(0);
        for (int n = 0; n < N; ++n)
          for (int64_t i = 0; i < hw; ++i) {
            int64_t idx = ((int64_t)n * C + c) * hw + i;
            T xhat = (px[idx] - mean_c[c]) * inv_std[c];
            sum_g += g[idx];
            sum_gx += g[idx] * xhat;
          }
        if (gn->requires_grad) {
          gn->ensure_grad();
          gn->grad[c] += sum_gx;
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          bn->grad[c] += sum_g;
        }
        if (xn->requires_grad) {
          xn->ensure_grad();
          T gam = gn->value[c];
          for (int n = 0; n < N; ++n)
            for (int64_t i = 0; i < hw; ++i) {
              int64_t idx = ((int64_t)n * C + c) * hw + i;
              if (training) {
                T xhat = (px[idx] - mean_c[c]) * inv_std[c];
                xn->grad[idx] += gam * inv_std[c] *
                                 (g[idx] - sum_g / T(cnt) - xhat * sum_gx / T(cnt));
              } else {
                xn->grad[idx] += gam * inv_std[c] * g[idx];
              }
            }
        }
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// RNG helpers

using Rng = std::mt19937_64;

template <typename T>
Tensor<T> randn(Shape shape, Rng& rng, T stddev = T(1)) {
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<T> data((size_t)shape_numel(shape));
  for (auto& v : data) v = T(dist(rng)) * stddev;
  return Tensor<T>::from_data(std::move(shape), std::move(data));
}

}  // namespace ots
