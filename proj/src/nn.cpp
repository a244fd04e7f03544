#include "icre/nn.hpp"

#include <cmath>

namespace icre::nn {

void Conv2d::init(int64_t in_ch, int64_t out_ch, int64_t kernel, int64_t stride, int64_t pad,
                  int64_t dilation, int64_t groups, bool with_bias, Rng& rng) {
  weight = Tensor({out_ch, in_ch / groups, kernel, kernel});
  double fan_in = static_cast<double>((in_ch / groups) * kernel * kernel);
  double std = std::sqrt(2.0 / fan_in);
  for (double& v : weight.vec()) v = rng.normal(0.0, std);
  bias = with_bias ? Tensor({out_ch}) : Tensor();
  spec = ad::Conv2dSpec{stride, stride, pad, pad, dilation, dilation, groups};
}

Var Conv2d::forward(Tape& tp, Var x) const {
  Var w = tp.leaf(&weight, true);
  Var b = bias.empty() ? Var{} : tp.leaf(&bias, true);
  return ad::conv2d(x, w, b, spec);
}

void Conv2d::reg(ParamRegistry& r, const std::string& prefix) {
  r.add_param(prefix + ".weight", &weight);
  if (!bias.empty()) r.add_param(prefix + ".bias", &bias);
}

void BatchNorm::init(int64_t channels, bool with_bias) {
  gamma = Tensor::ones({channels});
  beta = with_bias ? Tensor({channels}) : Tensor();
  state.running_mean = Tensor({channels});
  state.running_var = Tensor::ones({channels});
}

Var BatchNorm::forward(Tape& tp, Var x, bool train, bool update_stats) {
  Var g = tp.leaf(&gamma, true);
  Var b = beta.empty() ? Var{} : tp.leaf(&beta, true);
  return ad::batchnorm(x, g, b, &state, train, train && update_stats, momentum, eps);
}

void BatchNorm::reg(ParamRegistry& r, const std::string& prefix) {
  r.add_param(prefix + ".gamma", &gamma);
  if (!beta.empty()) r.add_param(prefix + ".beta", &beta);
  r.add_state(prefix + ".running_mean", &state.running_mean);
  r.add_state(prefix + ".running_var", &state.running_var);
}

void Linear::init(int64_t in, int64_t out, Rng& rng, double init_std, bool with_bias) {
  weight = Tensor({in, out});
  double std = init_std > 0.0 ? init_std : std::sqrt(2.0 / static_cast<double>(in + out));
  for (double& v : weight.vec()) v = rng.normal(0.0, std);
  bias = with_bias ? Tensor({out}) : Tensor();
}

Var Linear::forward(Tape& tp, Var x) const {
  Var w = tp.leaf(&weight, true);
  Var b = bias.empty() ? Var{} : tp.leaf(&bias, true);
  return ad::linear(x, w, b);
}

void Linear::reg(ParamRegistry& r, const std::string& prefix) {
  r.add_param(prefix + ".weight", &weight);
  if (!bias.empty()) r.add_param(prefix + ".bias", &bias);
}

void LayerNorm::init(int64_t channels) {
  gamma = Tensor::ones({channels});
  beta = Tensor({channels});
}

Var LayerNorm::forward(Tape& tp, Var x) const {
  return ad::layernorm(x, tp.leaf(&gamma, true), tp.leaf(&beta, true), eps);
}

void LayerNorm::reg(ParamRegistry& r, const std::string& prefix) {
  r.add_param(prefix + ".gamma", &gamma);
  r.add_param(prefix + ".beta", &beta);
}

void ConvBnRelu::init(int64_t in_ch, int64_t out_ch, int64_t kernel, int64_t stride, int64_t pad,
                      Rng& rng) {
  conv.init(in_ch, out_ch, kernel, stride, pad, 1, 1, /*with_bias=*/false, rng);
  bn.init(out_ch, /*with_bias=*/true);
}

Var ConvBnRelu::forward(Tape& tp, Var x, bool train, bool update_stats) {
  return ad::relu(bn.forward(tp, conv.forward(tp, x), train, update_stats));
}

void ConvBnRelu::reg(ParamRegistry& r, const std::string& prefix) {
  conv.reg(r, prefix + ".conv");
  bn.reg(r, prefix + ".bn");
}

}  // namespace icre::nn
