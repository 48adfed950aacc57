#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "hrefnet/autograd.hpp"

namespace hrefnet {

// How a tensor is (re)initialized by kaiming_init.
enum class InitKind {
  kaiming_normal,  // N(0, 2 / fan_in)
  zeros,
  ones,
  ssm_a_log,       // row e holds log(1..N), so A = -(1..N)
  ssm_dt_bias,     // inverse softplus of a log-uniform step in [1e-3, 1e-1]
  ssm_dt_proj,     // U(-rank^-1/2, rank^-1/2)
};

struct NamedTensor {
  std::string name;
  Var var;
  InitKind init = InitKind::zeros;
  std::int64_t fan_in = 0;
};

// Flat registry of trainable parameters and non-trainable buffers
// (batch-norm running statistics). Names are hierarchical, dot-separated.
class ParameterSet {
 public:
  Var add_parameter(std::string name, Shape shape, InitKind init, std::int64_t fan_in = 0);
  Var add_buffer(std::string name, Shape shape, double fill);

  const std::vector<NamedTensor>& parameters() const noexcept { return params_; }
  const std::vector<NamedTensor>& buffers() const noexcept { return buffers_; }

  // Searches parameters then buffers; nullptr when absent.
  const NamedTensor* find(std::string_view name) const;

  std::int64_t parameter_count() const;
  void zero_grad();

 private:
  void check_unique(const std::string& name) const;

  std::vector<NamedTensor> params_;
  std::vector<NamedTensor> buffers_;
};

// Conv kernels from the fan-in scaled normal, batch-norm scale 1 and shift 0,
// direction logits 0, state-space parameters from their selective-scan
// defaults. Buffers reset to mean 0 / variance 1.
void kaiming_init(ParameterSet& params, std::mt19937_64& rng);

}  // namespace hrefnet
