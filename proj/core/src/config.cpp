#include "hrefnet/config.hpp"

#include <algorithm>
#include <cmath>
#include <nlohmann/json.hpp>

#include "hrefnet/errors.hpp"

namespace hrefnet {

namespace {

void require(bool ok, const std::string& message) {
  if (!ok) throw InvalidConfig(message);
}

template <typename T>
void read_field(const nlohmann::json& j, const char* key, T& field) {
  if (j.contains(key)) {
    try {
      field = j.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw InvalidConfig(std::string("model config field '") + key + "': " + e.what());
    }
  }
}

}  // namespace

ModelConfig ModelConfig::preset(std::string_view name) {
  ModelConfig cfg;
  if (name == "tiny") {
    cfg.num_stages = 2;
  } else if (name == "middle") {
    cfg.num_stages = 3;
  } else if (name == "large") {
    cfg.num_stages = 4;
  } else {
    throw InvalidConfig("unknown preset '" + std::string(name) + "' (expected tiny|middle|large)");
  }
  cfg.branch_widths.resize(static_cast<std::size_t>(cfg.num_stages));
  return cfg;
}

std::string ModelConfig::preset_name() const {
  switch (num_stages) {
    case 2:
      return "tiny";
    case 3:
      return "middle";
    case 4:
      return "large";
    default:
      return "custom";
  }
}

void ModelConfig::validate() const {
  require(num_stages >= 2 && num_stages <= 4, "num_stages must be 2, 3 or 4");
  require(static_cast<int>(branch_widths.size()) == num_stages,
          "branch_widths must have num_stages entries");
  for (int w : branch_widths) require(w > 0, "branch_widths entries must be positive");
  require(base_width > 0, "base_width must be positive");
  require(stage1_blocks >= 1, "stage1_blocks must be >= 1");
  require(blocks_per_branch >= 1, "blocks_per_branch must be >= 1");
  require(ssm_state_dim >= 1, "ssm_state_dim must be >= 1");
  require(ssm_expand > 0.0 && std::isfinite(ssm_expand), "ssm_expand must be positive");
  require(ssm_dt_rank >= 0, "ssm_dt_rank must be >= 0");
  require(snake_kernel_points >= 3 && snake_kernel_points % 2 == 1,
          "snake_kernel_points must be odd and >= 3");
  require(curvature_factor_e >= 0.0 && std::isfinite(curvature_factor_e),
          "curvature_factor_e must be finite and >= 0");
  require(common_fusion_channels >= 1, "common_fusion_channels must be >= 1");
  require(head_channels >= 1, "head_channels must be >= 1");
  require(se_reduction >= 1, "se_reduction must be >= 1");
}

int ModelConfig::expanded_width(int width) const {
  return std::max(1, static_cast<int>(std::lround(ssm_expand * width)));
}

int ModelConfig::dt_rank(int width) const {
  if (ssm_dt_rank > 0) return ssm_dt_rank;
  return std::max(1, (width + 15) / 16);
}

std::string ModelConfig::to_json() const {
  nlohmann::json j;
  j["num_stages"] = num_stages;
  j["base_width"] = base_width;
  j["branch_widths"] = branch_widths;
  j["stage1_blocks"] = stage1_blocks;
  j["blocks_per_branch"] = blocks_per_branch;
  j["ssm_state_dim"] = ssm_state_dim;
  j["ssm_expand"] = ssm_expand;
  j["ssm_dt_rank"] = ssm_dt_rank;
  j["snake_kernel_points"] = snake_kernel_points;
  j["curvature_factor_e"] = curvature_factor_e;
  j["common_fusion_channels"] = common_fusion_channels;
  j["head_channels"] = head_channels;
  j["se_reduction"] = se_reduction;
  j["mref_identity_residual"] = mref_identity_residual;
  return j.dump(2);
}

ModelConfig ModelConfig::from_json(std::string_view json, const ModelConfig& base) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(json);
  } catch (const nlohmann::json::parse_error& e) {
    throw InvalidConfig(std::string("model config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw InvalidConfig("model config must be a JSON object");
  ModelConfig cfg = base;
  if (j.contains("preset")) cfg = preset(j.at("preset").get<std::string>());
  read_field(j, "num_stages", cfg.num_stages);
  if (j.contains("num_stages") && !j.contains("branch_widths")) {
    // Keep the default width ladder consistent with the stage count.
    std::vector<int> ladder{32, 64, 128, 256};
    ladder.resize(static_cast<std::size_t>(std::clamp(cfg.num_stages, 0, 4)));
    cfg.branch_widths = ladder;
  }
  read_field(j, "base_width", cfg.base_width);
  read_field(j, "branch_widths", cfg.branch_widths);
  read_field(j, "stage1_blocks", cfg.stage1_blocks);
  read_field(j, "blocks_per_branch", cfg.blocks_per_branch);
  read_field(j, "ssm_state_dim", cfg.ssm_state_dim);
  read_field(j, "ssm_expand", cfg.ssm_expand);
  read_field(j, "ssm_dt_rank", cfg.ssm_dt_rank);
  read_field(j, "snake_kernel_points", cfg.snake_kernel_points);
  read_field(j, "curvature_factor_e", cfg.curvature_factor_e);
  read_field(j, "common_fusion_channels", cfg.common_fusion_channels);
  read_field(j, "head_channels", cfg.head_channels);
  read_field(j, "se_reduction", cfg.se_reduction);
  read_field(j, "mref_identity_residual", cfg.mref_identity_residual);
  cfg.validate();
  return cfg;
}

}  // namespace hrefnet
