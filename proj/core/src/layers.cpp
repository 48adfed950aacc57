#include "hrefnet/layers.hpp"

namespace hrefnet {

Conv2d::Conv2d(ParameterSet& ps, const std::string& name, int in_channels, int out_channels,
               int kernel, ops::Conv2dOptions opts_, bool with_bias)
    : opts(opts_) {
  const int in_per_group = in_channels / opts.groups;
  const std::int64_t fan_in = static_cast<std::int64_t>(in_per_group) * kernel * kernel;
  weight = ps.add_parameter(name + ".weight", {out_channels, in_per_group, kernel, kernel},
                            InitKind::kaiming_normal, fan_in);
  if (with_bias) bias = ps.add_parameter(name + ".bias", {out_channels}, InitKind::zeros);
}

BatchNorm2d::BatchNorm2d(ParameterSet& ps, const std::string& name, int channels) {
  state.gamma = ps.add_parameter(name + ".gamma", {channels}, InitKind::ones);
  state.beta = ps.add_parameter(name + ".beta", {channels}, InitKind::zeros);
  state.running_mean = ps.add_buffer(name + ".running_mean", {channels}, 0.0);
  state.running_var = ps.add_buffer(name + ".running_var", {channels}, 1.0);
  Var(state.gamma).mutable_value().fill(1.0);
}

Var BatchNorm2d::operator()(const Var& x, bool training) const {
  ops::BatchNormState s = state;  // handles alias the registered tensors
  return ops::batch_norm(x, s, training);
}

ConvBnAct::ConvBnAct(ParameterSet& ps, const std::string& name, int in_channels, int out_channels,
                     int kernel, ops::Conv2dOptions opts, bool relu_)
    : conv(ps, name + ".conv", in_channels, out_channels, kernel, opts, false),
      bn(ps, name + ".bn", out_channels),
      relu(relu_) {}

Var ConvBnAct::operator()(const Var& x, bool training) const {
  Var y = bn(conv(x), training);
  return relu ? ops::relu(y) : y;
}

LayerNorm2d::LayerNorm2d(ParameterSet& ps, const std::string& name, int channels) {
  gamma = ps.add_parameter(name + ".gamma", {channels}, InitKind::ones);
  beta = ps.add_parameter(name + ".beta", {channels}, InitKind::zeros);
  gamma.mutable_value().fill(1.0);
}

Linear::Linear(ParameterSet& ps, const std::string& name, int in_features, int out_features,
               bool with_bias) {
  weight = ps.add_parameter(name + ".weight", {out_features, in_features}, InitKind::kaiming_normal,
                            in_features);
  if (with_bias) bias = ps.add_parameter(name + ".bias", {out_features}, InitKind::zeros);
}

}  // namespace hrefnet
