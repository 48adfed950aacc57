#include "hrefnet/mref.hpp"

#include <algorithm>

#include "hrefnet/errors.hpp"

namespace hrefnet::mref {

EdgeBranches::EdgeBranches(ParameterSet& ps, const std::string& name, int channels) {
  for (std::size_t k = 0; k < kDilations.size(); ++k) {
    const int d = kDilations[k];
    const std::string p = name + ".d" + std::to_string(k + 1);
    dilated[k] = Conv2d(ps, p + ".conv3", channels, channels, 3, {.padding = d, .dilation = d});
    if (k > 0) pointwise[k - 1] = Conv2d(ps, p + ".conv1", channels, channels, 1);
  }
}

std::array<Var, 4> dilated_edge_branches(const Var& z, const EdgeBranches& branches) {
  std::array<Var, 4> out;
  out[0] = ops::elu(branches.dilated[0](z));
  for (std::size_t k = 1; k < 4; ++k) out[k] = ops::elu(branches.pointwise[k - 1](branches.dilated[k](z)));
  return out;
}

Var fuse_edges(const std::array<Var, 4>& d, const Var& identity) {
  for (const Var& v : d) {
    if (v.shape() != d[0].shape()) {
      throw InvalidArgument("fuse_edges: branch shapes differ: " + shape_string(d[0].shape()) + " vs " +
                            shape_string(v.shape()));
    }
  }
  std::vector<Var> terms(d.begin(), d.end());
  if (identity.defined()) {
    if (identity.shape() != d[0].shape()) throw InvalidArgument("fuse_edges: residual shape mismatch");
    terms.push_back(identity);
  }
  return ops::add_n(terms);
}

SqueezeExcitation::SqueezeExcitation(ParameterSet& ps, const std::string& name, int channels, int reduction)
    : fc1(ps, name + ".fc1", channels, std::max(1, channels / reduction), false),
      fc2(ps, name + ".fc2", std::max(1, channels / reduction), channels, false) {}

Var se_weights(const Var& f_edge, const SqueezeExcitation& se) {
  return ops::sigmoid(se.fc2(ops::relu(se.fc1(ops::global_avg_pool(f_edge)))));
}

Var se_attention(const Var& f_edge, const SqueezeExcitation& se) {
  return ops::scale_channels(f_edge, se_weights(f_edge, se));
}

Var scale_align(const Var& q, const Conv2d& projection, std::int64_t height, std::int64_t width) {
  return ops::upsample_bilinear(projection(q), height, width);
}

MrefModule::MrefModule(ParameterSet& ps, const std::string& name, int channels, int common_channels,
                       int se_reduction, bool identity_residual_)
    : edges(ps, name + ".edges", channels),
      se(ps, name + ".se", channels, se_reduction),
      align(ps, name + ".align", channels, common_channels, 1),
      identity_residual(identity_residual_) {}

Var MrefModule::operator()(const Var& f_stage, std::int64_t height, std::int64_t width) const {
  const Var f_edge = fuse_edges(dilated_edge_branches(f_stage, edges), identity_residual ? f_stage : Var());
  return scale_align(se_attention(f_edge, se), align, height, width);
}

Var cross_stage_product(const std::vector<Var>& qs) {
  if (qs.empty()) throw InvalidArgument("cross_stage_product: no inputs");
  Var y = qs.front();
  for (std::size_t i = 1; i < qs.size(); ++i) {
    if (qs[i].shape() != y.shape()) {
      throw InvalidArgument("cross_stage_product: Q" + std::to_string(i + 1) + " has shape " +
                            shape_string(qs[i].shape()) + ", expected " + shape_string(y.shape()));
    }
    y = ops::mul(y, qs[i]);
  }
  return y;
}

}  // namespace hrefnet::mref
