#pragma once

#include <array>
#include <string>
#include <vector>

#include "hrefnet/layers.hpp"

// Multi-scale Retina Edge Fusion.
namespace hrefnet::mref {

inline constexpr std::array<int, 4> kDilations{1, 1, 3, 5};

// D1 = ELU(conv3x3(z)); Dk = ELU(conv1x1(conv3x3_dk(z))) for k = 2..4.
struct EdgeBranches {
  EdgeBranches() = default;
  EdgeBranches(ParameterSet& ps, const std::string& name, int channels);

  std::array<Conv2d, 4> dilated;
  std::array<Conv2d, 3> pointwise;  // follow-ups of D2..D4
};

std::array<Var, 4> dilated_edge_branches(const Var& z, const EdgeBranches& branches);

// F_edge = D1 + D2 + D3 + D4 (+ z when `identity` is defined).
Var fuse_edges(const std::array<Var, 4>& d, const Var& identity = Var());

struct SqueezeExcitation {
  SqueezeExcitation() = default;
  SqueezeExcitation(ParameterSet& ps, const std::string& name, int channels, int reduction);

  Linear fc1;  // C -> max(1, C / r), no bias
  Linear fc2;  // -> C, no bias
};

// s = sigmoid(W2 relu(W1 mean_hw(f))); returns f * s.
Var se_attention(const Var& f_edge, const SqueezeExcitation& se);
// Per-channel attention vector s, shape (N, C).
Var se_weights(const Var& f_edge, const SqueezeExcitation& se);

// 1x1 projection followed by bilinear resize to (height, width).
Var scale_align(const Var& q, const Conv2d& projection, std::int64_t height, std::int64_t width);

struct MrefModule {
  MrefModule() = default;
  MrefModule(ParameterSet& ps, const std::string& name, int channels, int common_channels,
             int se_reduction, bool identity_residual);

  Var operator()(const Var& f_stage, std::int64_t height, std::int64_t width) const;

  EdgeBranches edges;
  SqueezeExcitation se;
  Conv2d align;
  bool identity_residual = false;
};

// Y2 = Q1 * Q2 * ... * Qn, multiplied left to right.
Var cross_stage_product(const std::vector<Var>& qs);

}  // namespace hrefnet::mref
