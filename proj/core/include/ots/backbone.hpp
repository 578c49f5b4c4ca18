#pragma once

// Siamese convolutional feature extractor. Query and support images go
// through the same weights; support feature maps are resized to a fixed
// lattice before correlation.

#include <string>
#include <vector>

#include "ots/optim.hpp"
#include "ots/tensor.hpp"

namespace ots {

struct BackboneConfig {
  std::vector<int> stage_channels = {16, 32, 64};
  int downsample_factor = 8;
  int support_h = 8;
  int support_w = 8;
  bool frozen = false;

  void validate() const {
    int df = 1 << (int)stage_channels.size();
    check(downsample_factor == df,
          "downsample_factor must equal 2^stages = " + std::to_string(df) + ", got " +
              std::to_string(downsample_factor));
    check(support_h >= 2 && support_w >= 2, "support_feat_size must be at least 2x2");
  }
  int out_channels() const { return stage_channels.back(); }
};

template <typename T>
struct Conv2dLayer {
  Parameter<T> w, b;
  int stride = 1, padding = 0;

  Conv2dLayer() = default;
  Conv2dLayer(const std::string& name, int cin, int cout, int k, int stride_, int padding_,
              Rng& rng)
      : stride(stride_), padding(padding_) {
    T std_dev = std::sqrt(T(2) / T(cin * k * k));  // He fan-in
    w = {name + ".w", randn<T>({cout, cin, k, k}, rng, std_dev)};
    b = {name + ".b", Tensor<T>::zeros({cout})};
    w.tensor.set_requires_grad(true);
    b.tensor.set_requires_grad(true);
  }

  Tensor<T> operator()(const Tensor<T>& x) const {
    return conv2d(x, w.tensor, b.tensor, stride, padding);
  }
  void collect(ParamList<T>& out) {
    out.push_back(&w);
    out.push_back(&b);
  }
};

template <typename T>
struct BatchNormLayer {
  Parameter<T> gamma, beta;
  BatchNormState<T> state;

  BatchNormLayer() = default;
  BatchNormLayer(const std::string& name, int c) {
    gamma = {name + ".gamma", Tensor<T>::full({c}, T(1))};
    beta = {name + ".beta", Tensor<T>::zeros({c})};
    gamma.tensor.set_requires_grad(true);
    beta.tensor.set_requires_grad(true);
    state.running_mean.assign(c, T(0));
    state.running_var.assign(c, T(1));
  }

  Tensor<T> operator()(const Tensor<T>& x, bool training) {
    return batch_norm(x, gamma.tensor, beta.tensor, state, training);
  }
  void collect(ParamList<T>& out) {
    out.push_back(&gamma);
    out.push_back(&beta);
  }
};

template <typename T>
class Backbone {
 public:
  Backbone(const BackboneConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    int cin = 3;
    for (size_t i = 0; i < cfg_.stage_channels.size(); ++i) {
      int cout = cfg_.stage_channels[i];
      std::string base = "backbone.stage" + std::to_string(i);
      conv_a_.emplace_back(base + ".conv_a", cin, cout, 3, 2, 1, rng);
      bn_a_.emplace_back(base + ".bn_a", cout);
      conv_b_.emplace_back(base + ".conv_b", cout, cout, 3, 1, 1, rng);
      bn_b_.emplace_back(base + ".bn_b", cout);
      cin = cout;
    }
  }

  // image: [B,3,H,W] with H,W divisible by the downsample factor.
  Tensor<T> extract_features(const Tensor<T>& image, bool training) {
    check(image.ndim() == 4 && image.dim(1) == 3,
          "extract_features expects [B,3,H,W], got " + shape_str(image.shape()));
    int df = cfg_.downsample_factor;
    check(image.dim(2) % df == 0 && image.dim(3) % df == 0,
          "input spatial size " + std::to_string(image.dim(2)) + "x" +
              std::to_string(image.dim(3)) + " not divisible by downsample factor " +
              std::to_string(df) + "; pad the image first");
    bool train_bn = training && !cfg_.frozen;
    Tensor<T> h = image;
    for (size_t i = 0; i < conv_a_.size(); ++i) {
      h = relu(bn_a_[i](conv_a_[i](h), train_bn));
      h = relu(bn_b_[i](conv_b_[i](h), train_bn));
    }
    return h;
  }

  // Bilinear resize of a raw support feature map to the fixed support lattice.
  Tensor<T> resize_support_features(const Tensor<T>& f_raw) const {
    check(f_raw.ndim() == 4, "resize_support_features expects a 4D tensor");
    return bilinear_resize(f_raw, cfg_.support_h, cfg_.support_w);
  }

  void collect(ParamList<T>& out) {
    for (size_t i = 0; i < conv_a_.size(); ++i) {
      conv_a_[i].collect(out);
      bn_a_[i].collect(out);
      conv_b_[i].collect(out);
      bn_b_[i].collect(out);
    }
  }

  void set_learnable(bool on) {
    ParamList<T> ps;
    collect(ps);
    for (auto* p : ps) p->learnable = on;
  }

  // BN running statistics, for checkpointing.
  void export_stats(std::map<std::string, std::vector<T>>& out) const {
    for (size_t i = 0; i < bn_a_.size(); ++i) {
      std::string base = "backbone.stage" + std::to_string(i);
      out[base + ".bn_a.running_mean"] = bn_a_[i].state.running_mean;
      out[base + ".bn_a.running_var"] = bn_a_[i].state.running_var;
      out[base + ".bn_b.running_mean"] = bn_b_[i].state.running_mean;
      out[base + ".bn_b.running_var"] = bn_b_[i].state.running_var;
    }
  }
  void import_stats(const std::map<std::string, std::vector<T>>& in) {
    for (size_t i = 0; i < bn_a_.size(); ++i) {
      std::string base = "backbone.stage" + std::to_string(i);
      auto get = [&](const std::string& k, std::vector<T>& dst) {
        auto it = in.find(k);
        if (it != in.end()) dst = it->second;
      };
      get(base + ".bn_a.running_mean", bn_a_[i].state.running_mean);
      get(base + ".bn_a.running_var", bn_a_[i].state.running_var);
      get(base + ".bn_b.running_mean", bn_b_[i].state.running_mean);
      get(base + ".bn_b.running_var", bn_b_[i].state.running_var);
    }
  }

  const BackboneConfig& config() const { return cfg_; }

 private:
  BackboneConfig cfg_;
  std::vector<Conv2dLayer<T>> conv_a_, conv_b_;
  std::vector<BatchNormLayer<T>> bn_a_, bn_b_;
};

}  // namespace ots
