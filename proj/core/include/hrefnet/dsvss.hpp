#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <vector>

#include "hrefnet/config.hpp"
#include "hrefnet/layers.hpp"

// Dynamic Snake Visual State Space block and its parts.
namespace hrefnet::dsvss {

inline constexpr int kNumDirections = 8;

// x_aligned: the kernel runs along columns (x), sample points drift in rows.
// y_aligned: the kernel runs along rows (y), sample points drift in columns.
enum class SnakeAxis { x_aligned, y_aligned };

// Sampling coordinates of one snake kernel at every output position.
// Point k (0..num_points-1) sits at signed offset c = k - num_points/2.
struct SnakeKernelGeometry {
  SnakeAxis axis = SnakeAxis::x_aligned;
  int num_points = 0;
  double curvature_factor_e = 1.0;
  std::int64_t height = 0;
  std::int64_t width = 0;
  // Indexed [(k * height + h) * width + w]; unclamped.
  std::vector<double> row;
  std::vector<double> col;

  double row_at(int k, std::int64_t h, std::int64_t w) const {
    return row[static_cast<std::size_t>((k * height + h) * width + w)];
  }
  double col_at(int k, std::int64_t h, std::int64_t w) const {
    return col[static_cast<std::size_t>((k * height + h) * width + w)];
  }
};

// steps: (num_points, H, W) bounded per-point increments (already squashed to
// [-1, 1]). The primary coordinate moves by exactly +-c; the transverse one
// accumulates e * step outward from the center, which never moves.
SnakeKernelGeometry snake_coordinates(const Tensor& steps, SnakeAxis axis, double e, int num_points);

// Bilinear samples of x at the snake kernel points with border clamping.
// x: (N, C, H, W), steps: (N, K, H, W) -> (N, C * K, H, W), channel c * K + k.
Var snake_sample(const Var& x, const Var& steps, SnakeAxis axis, double e);

// Sum of the x-aligned and y-aligned snake convolutions. weight_x/weight_y are
// (Cout, C * K, 1, 1); bias is (Cout) or undefined.
Var snake_conv_forward(const Var& x, const Var& steps_x_aligned, const Var& steps_y_aligned,
                       const Var& weight_x, const Var& weight_y, const Var& bias, double e);

// Traversal order of a grid for one of the eight scan directions (1..8):
//   1 rows left->right, 2 rows right->left, 3 columns top->bottom,
//   4 columns bottom->top, 5 anti-diagonals from the top-left corner,
//   6 diagonals from the top-right corner, 7 reverse of 5, 8 reverse of 6.
// Within a diagonal of 5 and 6 cells are visited by increasing row.
struct ScanOrder {
  int direction = 1;
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::shared_ptr<const std::vector<std::int64_t>> sequence_to_grid;

  static ScanOrder make(int direction, std::int64_t height, std::int64_t width);
  std::int64_t length() const { return height * width; }
};

// (N, C, H, W) -> (N, C, 1, H*W)
Var serialize_scan(const Var& x, const ScanOrder& order);
// (N, C, 1, H*W) -> (N, C, H, W)
Var deserialize_scan(const Var& seq, const ScanOrder& order);

// Selective state-space recurrence with zero-order-hold discretization, run
// independently per channel:
//   dt_t = softplus(delta_t + delta_bias),  A = -exp(a_log)
//   h_t  = exp(dt_t A) h_{t-1} + (exp(dt_t A) - 1) / A * B_t u_t
//   y_t  = <C_t, h_t> + D u_t
// u, delta: (N, E, 1, L); a_log: (E, S); b, c: (N, S, 1, L); d, delta_bias: (E).
// Throws NumericError on non-finite parameters.
Var selective_scan(const Var& u, const Var& delta, const Var& a_log, const Var& b, const Var& c,
                   const Var& d, const Var& delta_bias);

// Softmax of the eight direction logits.
Var direction_softmax(const Var& logits);
// sum_i attention_i * features_i over the eight directional outputs.
Var aggregate_directions(const std::vector<Var>& features, const Var& attention);

// Per-direction selective-scan parameters.
struct DirectionalSsm {
  Var x_proj;      // (R + 2S, E, 1, 1): step rank, B and C rows
  Var dt_proj;     // (E, R, 1, 1)
  Var dt_bias;     // (E)
  Var a_log;       // (E, S)
  Var d;           // (E)
};

// Eight-direction snake-selective 2D scan with learned direction weighting.
struct SnakeSelectiveScan2d {
  SnakeSelectiveScan2d() = default;
  SnakeSelectiveScan2d(ParameterSet& ps, const std::string& name, int channels, int state_dim,
                       int dt_rank);

  Var operator()(const Var& x) const;

  int channels = 0;
  int state_dim = 0;
  int dt_rank = 0;
  std::array<DirectionalSsm, kNumDirections> directions;
  Var direction_logits;  // (8)
};

// Both snake orientations with a shared offset predictor.
struct SnakeConv {
  SnakeConv() = default;
  SnakeConv(ParameterSet& ps, const std::string& name, int channels, int num_points, double e);

  Var operator()(const Var& x) const;
  // tanh-bounded steps (N, 2K, H, W): first K for x-aligned, last K for y-aligned.
  Var steps(const Var& x) const;

  Conv2d offset_conv;
  Var weight_x;
  Var weight_y;
  Var bias;
  int num_points = 0;
  double e = 1.0;
};

struct DsvssBlock {
  DsvssBlock() = default;
  DsvssBlock(ParameterSet& ps, const std::string& name, int channels, const ModelConfig& cfg);

  Var operator()(const Var& x, bool training) const;

  // Gated state-space branch on its own.
  Var ssm_branch(const Var& x) const;

  int channels = 0;
  int expanded = 0;
  SnakeConv snake;
  LayerNorm2d norm;
  Conv2d gate_proj;
  Conv2d in_proj;
  Conv2d dw_conv;
  SnakeSelectiveScan2d ss2d;
  Conv2d out_proj;
  ConvBnAct final_conv;
};

}  // namespace hrefnet::dsvss
