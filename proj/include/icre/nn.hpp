#pragma once

#include <string>
#include <vector>

#include "icre/autodiff.hpp"
#include "icre/rng.hpp"

namespace icre::nn {

/// Named references to every learnable tensor and persistent buffer of a
/// model; drives the optimizer, checkpointing and the parameter audits.
struct ParamRegistry {
  struct Entry {
    std::string name;
    Tensor* value;
  };
  std::vector<Entry> params;
  std::vector<Entry> state;  // running stats and similar non-learnable buffers

  void add_param(std::string name, Tensor* t) { params.push_back({std::move(name), t}); }
  void add_state(std::string name, Tensor* t) { state.push_back({std::move(name), t}); }
  int64_t param_count() const {
    int64_t n = 0;
    for (const auto& e : params) n += e.value->numel();
    return n;
  }
  Tensor* find_param(const std::string& name) const {
    for (const auto& e : params)
      if (e.name == name) return e.value;
    return nullptr;
  }
};

struct Conv2d {
  Tensor weight;  // [O, I/groups, k, k]
  Tensor bias;    // [O] or empty
  ad::Conv2dSpec spec;

  void init(int64_t in_ch, int64_t out_ch, int64_t kernel, int64_t stride, int64_t pad,
            int64_t dilation, int64_t groups, bool with_bias, Rng& rng);
  Var forward(Tape& tp, Var x) const;
  void reg(ParamRegistry& r, const std::string& prefix);
};

struct BatchNorm {
  Tensor gamma;
  Tensor beta;  // empty => normalization without a bias term (BNNeck)
  ad::BnState state;
  double momentum = 0.1;
  double eps = 1e-5;

  void init(int64_t channels, bool with_bias);
  Var forward(Tape& tp, Var x, bool train, bool update_stats = true);
  void reg(ParamRegistry& r, const std::string& prefix);
};

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out] or empty

  void init(int64_t in, int64_t out, Rng& rng, double init_std = -1.0, bool with_bias = true);
  Var forward(Tape& tp, Var x) const;
  void reg(ParamRegistry& r, const std::string& prefix);
};

struct LayerNorm {
  Tensor gamma, beta;
  double eps = 1e-5;

  void init(int64_t channels);
  Var forward(Tape& tp, Var x) const;
  void reg(ParamRegistry& r, const std::string& prefix);
};

/// Conv -> BatchNorm -> ReLU, the ConvBlock used throughout.
struct ConvBnRelu {
  Conv2d conv;
  BatchNorm bn;

  void init(int64_t in_ch, int64_t out_ch, int64_t kernel, int64_t stride, int64_t pad, Rng& rng);
  Var forward(Tape& tp, Var x, bool train, bool update_stats = true);
  void reg(ParamRegistry& r, const std::string& prefix);
};

}  // namespace icre::nn
