#pragma once

#include <map>
#include <string>
#include <vector>

#include "ots/tensor.hpp"

namespace ots {

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> tensor;
  bool learnable = true;
};

template <typename T>
using ParamList = std::vector<Parameter<T>*>;

template <typename T>
void zero_grads(const ParamList<T>& params) {
  for (auto* p : params) p->tensor.zero_grad();
}

template <typename T>
struct AdamConfig {
  T lr = T(1e-4);
  T beta1 = T(0.9);
  T beta2 = T(0.999);
  T eps = T(1e-8);
};

template <typename T>
class Adam {
 public:
  explicit Adam(AdamConfig<T> cfg = {}) : cfg_(cfg) {}

  void step(const ParamList<T>& params) {
    ++t_;
    T bc1 = T(1) - std::pow(cfg_.beta1, T(t_));
    T bc2 = T(1) - std::pow(cfg_.beta2, T(t_));
    for (auto* p : params) {
      if (!p->learnable) continue;
      // Parameters that did not participate in the forward pass (e.g. an
      // attention block disabled by configuration) have no gradient; skip
      // them rather than failing.
      if (p->tensor.grad().empty()) continue;
      auto& st = state_[p->name];
      size_t n = p->tensor.values().size();
      if (st.m.empty()) {
        st.m.assign(n, T(0));
        st.v.assign(n, T(0));
      }
      T* w = p->tensor.data();
      const std::vector<T>& g = p->tensor.grad();
      for (size_t i = 0; i < n; ++i) {
        st.m[i] = cfg_.beta1 * st.m[i] + (T(1) - cfg_.beta1) * g[i];
        st.v[i] = cfg_.beta2 * st.v[i] + (T(1) - cfg_.beta2) * g[i] * g[i];
        T mhat = st.m[i] / bc1;
        T vhat = st.v[i] / bc2;
        w[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      }
    }
  }

  int64_t step_count() const { return t_; }
  void set_step_count(int64_t t) { t_ = t; }
  AdamConfig<T>& config() { return cfg_; }

  struct Slot {
    std::vector<T> m, v;
  };
  std::map<std::string, Slot>& state() { return state_; }

 private:
  AdamConfig<T> cfg_;
  int64_t t_ = 0;
  std::map<std::string, Slot> state_;
};

}  // namespace ots
