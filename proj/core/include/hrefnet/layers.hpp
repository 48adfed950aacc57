#pragma once

#include <string>

#include "hrefnet/ops.hpp"
#include "hrefnet/parameters.hpp"

namespace hrefnet {

struct Conv2d {
  Conv2d() = default;
  Conv2d(ParameterSet& ps, const std::string& name, int in_channels, int out_channels, int kernel,
         ops::Conv2dOptions opts = {}, bool bias = true);

  Var operator()(const Var& x) const { return ops::conv2d(x, weight, bias, opts); }

  Var weight;
  Var bias;
  ops::Conv2dOptions opts;
};

struct BatchNorm2d {
  BatchNorm2d() = default;
  BatchNorm2d(ParameterSet& ps, const std::string& name, int channels);

  Var operator()(const Var& x, bool training) const;

  ops::BatchNormState state;
};

// Conv -> BN -> optional ReLU.
struct ConvBnAct {
  ConvBnAct() = default;
  ConvBnAct(ParameterSet& ps, const std::string& name, int in_channels, int out_channels, int kernel,
            ops::Conv2dOptions opts = {}, bool relu = true);

  Var operator()(const Var& x, bool training) const;

  Conv2d conv;
  BatchNorm2d bn;
  bool relu = true;
};

struct LayerNorm2d {
  LayerNorm2d() = default;
  LayerNorm2d(ParameterSet& ps, const std::string& name, int channels);

  Var operator()(const Var& x) const { return ops::layer_norm_channels(x, gamma, beta); }

  Var gamma;
  Var beta;
};

struct Linear {
  Linear() = default;
  Linear(ParameterSet& ps, const std::string& name, int in_features, int out_features, bool bias);

  Var operator()(const Var& x) const { return ops::linear(x, weight, bias); }

  Var weight;
  Var bias;
};

}  // namespace hrefnet
