#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace hrefnet {

// Architecture hyperparameters. Presets differ only in stage count.
struct ModelConfig {
  int num_stages = 4;
  int base_width = 32;
  std::vector<int> branch_widths{32, 64, 128, 256};
  int stage1_blocks = 2;
  int blocks_per_branch = 2;
  int ssm_state_dim = 16;
  double ssm_expand = 2.0;
  int ssm_dt_rank = 0;  // 0 selects ceil(width / 16)
  int snake_kernel_points = 9;
  double curvature_factor_e = 1.0;
  int common_fusion_channels = 32;
  int head_channels = 32;
  int se_reduction = 16;
  bool mref_identity_residual = false;

  // "tiny" (2 stages), "middle" (3), "large" (4).
  static ModelConfig preset(std::string_view name);
  std::string preset_name() const;

  // Throws InvalidConfig naming the offending field.
  void validate() const;

  // Width of the DSVSS inner (expanded) channels for a branch width.
  int expanded_width(int width) const;
  // Rank of the step-size projection for a branch width.
  int dt_rank(int width) const;

  // Input sides must be multiples of this.
  int spatial_divisor() const { return 1 << (num_stages - 1); }

  std::string to_json() const;
  // Fields missing from `json` keep their value in `base`; a "preset" key
  // replaces the base first.
  static ModelConfig from_json(std::string_view json, const ModelConfig& base);

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

}  // namespace hrefnet
