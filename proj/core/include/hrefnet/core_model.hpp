#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "hrefnet/config.hpp"
#include "hrefnet/dsvss.hpp"
#include "hrefnet/layers.hpp"
#include "hrefnet/mref.hpp"

namespace hrefnet::model {

// 1x1 -> 3x3 -> 1x1 conv/BN/ReLU with a residual connection. A 1x1 projection
// carries the shortcut when the channel counts differ.
struct Bottleneck {
  Bottleneck() = default;
  Bottleneck(ParameterSet& ps, const std::string& name, int in_channels, int out_channels,
             bool allow_projection = true);

  ConvBnAct reduce;
  ConvBnAct conv;
  ConvBnAct expand;
  Conv2d projection;  // undefined weight when in == out
  int in_channels = 0;
  int out_channels = 0;
};

Var bottleneck_forward(const Var& x, const Bottleneck& block, bool training);

// Cross-resolution exchange for branches at levels 0..k-1.
// paths[j][i] resamples branch i to branch j (empty when i == j).
struct MultiScaleFusion {
  MultiScaleFusion() = default;
  MultiScaleFusion(ParameterSet& ps, const std::string& name, const std::vector<int>& widths);

  std::vector<int> widths;
  std::vector<std::vector<std::vector<Conv2d>>> paths;
};

// Output j = sum_i resample(i -> j)(branch i).
std::vector<Var> multi_scale_fuse(const std::vector<Var>& branches, const MultiScaleFusion& fusion);

// Stride-2 3x3 conv + BN + ReLU opening the next lower-resolution branch.
Var new_branch_transition(const Var& parent, const ConvBnAct& transition, bool training);

// Y1: channel concatenation of the branches bilinearly upsampled to (height, width).
Var stage4_concat_head(const std::vector<Var>& branch_outputs, std::int64_t height, std::int64_t width);

struct Head {
  Head() = default;
  Head(ParameterSet& ps, const std::string& name, int in_channels, int hidden_channels);

  ConvBnAct conv;
  Conv2d out;
};

// concat(y1, y2) -> 3x3 conv/BN/ReLU -> 1x1 conv to one logit channel.
Var final_head(const Var& y1, const Var& y2, const Head& head, bool training);

struct Stage {
  ConvBnAct transition;  // absent in stage 1
  std::vector<std::vector<dsvss::DsvssBlock>> blocks;  // [branch][block]
  MultiScaleFusion fusion;
};

// Intermediate tensors of one forward pass.
struct ForwardResult {
  std::vector<Var> stage_outputs;  // F_stage_1 .. F_stage_S
  std::vector<Var> final_branches;
  std::vector<Var> qs;
  Var y1;
  Var y2;
  Var logits;
};

struct CostReport {
  std::int64_t parameters = 0;
  std::uint64_t macs = 0;
  double flops() const { return 2.0 * static_cast<double>(macs); }
};

class HrefNet {
 public:
  explicit HrefNet(ModelConfig cfg);

  const ModelConfig& config() const noexcept { return cfg_; }
  ParameterSet& parameters() noexcept { return params_; }
  const ParameterSet& parameters() const noexcept { return params_; }

  void init(std::mt19937_64& rng) { kaiming_init(params_, rng); }

  // x: (N, 1, H, W) with H and W multiples of config().spatial_divisor().
  Var forward(const Var& x, bool training) const;
  ForwardResult forward_detailed(const Var& x, bool training) const;

  // Eval-mode logits of one (H, W) image without recording a graph.
  Tensor predict_logits(const Tensor& image) const;

  // Parameter count and multiply-accumulates of one eval forward at (height, width).
  CostReport cost(std::int64_t height, std::int64_t width) const;

  void check_input(const Shape& shape) const;

 private:
  ModelConfig cfg_;
  ParameterSet params_;
  ConvBnAct stem_;
  std::vector<Bottleneck> stage1_;
  std::vector<Stage> stages_;  // stages 2..S
  std::vector<mref::MrefModule> mref_;
  Head head_;
};

}  // namespace hrefnet::model
