#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "hrefnet/autograd.hpp"

// Differentiable primitives over NCHW float64 tensors. Every op records its
// backward closure only when some input requires a gradient.
namespace hrefnet::ops {

struct Conv2dOptions {
  int stride = 1;
  int padding = 0;
  int dilation = 1;
  int groups = 1;
};

// x: (N, Cin, H, W); weight: (Cout, Cin/groups, kh, kw); bias: (Cout) or undefined.
Var conv2d(const Var& x, const Var& weight, const Var& bias, const Conv2dOptions& opts = {});

struct BatchNormState {
  Var gamma;
  Var beta;
  Var running_mean;  // buffers, never require grad
  Var running_var;
  double momentum = 0.1;
  double eps = 1e-5;
};

// Training mode normalizes with batch statistics (biased variance) and
// updates the running buffers; eval mode uses the running buffers.
Var batch_norm(const Var& x, BatchNormState& bn, bool training);

// Normalizes across channels independently at every (n, h, w).
Var layer_norm_channels(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);

Var relu(const Var& x);
Var elu(const Var& x, double alpha = 1.0);
Var silu(const Var& x);
Var sigmoid(const Var& x);
Var tanh(const Var& x);

Var add(const Var& a, const Var& b);
Var add_n(const std::vector<Var>& xs);
Var mul(const Var& a, const Var& b);
Var scale(const Var& x, double factor);

// x: (N, Cin); weight: (Cout, Cin); bias: (Cout) or undefined.
Var linear(const Var& x, const Var& weight, const Var& bias);
// (N, C, H, W) -> (N, C)
Var global_avg_pool(const Var& x);
// x: (N, C, H, W) scaled by s: (N, C) broadcast over space.
Var scale_channels(const Var& x, const Var& s);

Var concat_channels(const std::vector<Var>& xs);
Var slice_channels(const Var& x, std::int64_t begin, std::int64_t end);

// Bilinear resize with half-pixel centers (align_corners = false). Same-size
// resize is an exact copy.
Var upsample_bilinear(const Var& x, std::int64_t out_h, std::int64_t out_w);

// Softmax over a rank-1 tensor with max subtraction.
Var softmax(const Var& logits);
// sum_k weights[k] * xs[k]; weights is rank-1 with xs.size() entries.
Var weighted_sum(const Var& weights, const std::vector<Var>& xs);

// Spatial gather: (N, C, H, W) -> (N, C, 1, L) with out[..., i] = x[..., order[i]].
Var gather_spatial(const Var& x, std::shared_ptr<const std::vector<std::int64_t>> order);
// Inverse of gather_spatial for a permutation: (N, C, 1, L) -> (N, C, H, W).
Var scatter_spatial(const Var& seq, std::shared_ptr<const std::vector<std::int64_t>> order,
                    std::int64_t height, std::int64_t width);

Var sum(const Var& x);
Var mean(const Var& x);
// Scalar sum(x * weights) against a constant tensor.
Var dot_constant(const Var& x, const Tensor& weights);

// Mean binary cross entropy on logits in log-sum-exp form.
Var bce_with_logits(const Var& logits, const Tensor& targets);

// Pure-tensor helpers shared with non-differentiable code paths.
Tensor bilinear_resize(const Tensor& x, std::int64_t out_h, std::int64_t out_w);
double softplus(double x);
double sigmoid_scalar(double x);

// Multiply-accumulate counter for cost reporting (per thread).
struct MacCounter {
  MacCounter();
  ~MacCounter();
  MacCounter(const MacCounter&) = delete;
  MacCounter& operator=(const MacCounter&) = delete;
  std::uint64_t count() const;

 private:
  std::uint64_t start_;
  bool previous_active_;
};
void count_macs(std::uint64_t macs);

}  // namespace hrefnet::ops
