#include "hrefnet/core_model.hpp"

#include <numeric>

#include "hrefnet/errors.hpp"

namespace hrefnet::model {

Bottleneck::Bottleneck(ParameterSet& ps, const std::string& name, int in, int out, bool allow_projection)
    : reduce(ps, name + ".conv1", in, out, 1),
      conv(ps, name + ".conv2", out, out, 3, {.padding = 1}),
      expand(ps, name + ".conv3", out, out, 1),
      in_channels(in),
      out_channels(out) {
  if (in != out) {
    if (!allow_projection) {
      throw InvalidConfig("bottleneck '" + name + "': residual has " + std::to_string(in) +
                          " channels but the main path has " + std::to_string(out) +
                          " and no projection is configured");
    }
    projection = Conv2d(ps, name + ".projection", in, out, 1, {}, false);
  }
}

Var bottleneck_forward(const Var& x, const Bottleneck& block, bool training) {
  if (x.value().rank() != 4 || x.dim(1) != block.in_channels) {
    throw InvalidArgument("bottleneck expects " + std::to_string(block.in_channels) + " channels, got " +
                          shape_string(x.shape()));
  }
  const Var main = block.expand(block.conv(block.reduce(x, training), training), training);
  const Var shortcut = block.projection.weight.defined() ? block.projection(x) : x;
  return ops::add(main, shortcut);
}

MultiScaleFusion::MultiScaleFusion(ParameterSet& ps, const std::string& name, const std::vector<int>& widths_)
    : widths(widths_) {
  const std::size_t k = widths.size();
  paths.resize(k);
  for (std::size_t j = 0; j < k; ++j) {
    paths[j].resize(k);
    for (std::size_t i = 0; i < k; ++i) {
      const std::string p = name + "." + std::to_string(i + 1) + "to" + std::to_string(j + 1);
      if (i > j) {
        paths[j][i].emplace_back(ps, p, widths[i], widths[j], 1, ops::Conv2dOptions{}, false);
      } else if (i < j) {
        for (std::size_t step = i; step < j; ++step) {
          const int out = step + 1 == j ? widths[j] : widths[i];
          paths[j][i].emplace_back(ps, p + ".down" + std::to_string(step - i + 1), widths[i], out, 3,
                                   ops::Conv2dOptions{.stride = 2, .padding = 1}, false);
        }
      }
    }
  }
}

std::vector<Var> multi_scale_fuse(const std::vector<Var>& branches, const MultiScaleFusion& fusion) {
  if (branches.empty()) throw InvalidArgument("multi_scale_fuse: empty branch list");
  if (branches.size() != fusion.widths.size()) {
    throw InvalidArgument("multi_scale_fuse: " + std::to_string(branches.size()) + " branches for a " +
                          std::to_string(fusion.widths.size()) + "-branch fusion");
  }
  const std::size_t k = branches.size();
  std::vector<Var> out(k);
  for (std::size_t j = 0; j < k; ++j) {
    std::vector<Var> terms;
    terms.reserve(k);
    for (std::size_t i = 0; i < k; ++i) {
      if (i == j) {
        terms.push_back(branches[i]);
      } else if (i > j) {
        terms.push_back(ops::upsample_bilinear(fusion.paths[j][i].front()(branches[i]), branches[j].dim(2),
                                               branches[j].dim(3)));
      } else {
        Var v = branches[i];
        for (const Conv2d& down : fusion.paths[j][i]) v = down(v);
        terms.push_back(v);
      }
    }
    out[j] = ops::add_n(terms);
  }
  return out;
}

Var new_branch_transition(const Var& parent, const ConvBnAct& transition, bool training) {
  return transition(parent, training);
}

Var stage4_concat_head(const std::vector<Var>& branch_outputs, std::int64_t height, std::int64_t width) {
  if (branch_outputs.empty()) throw InvalidArgument("stage4_concat_head: no branches");
  std::vector<Var> up;
  up.reserve(branch_outputs.size());
  for (const Var& b : branch_outputs) {
    if (b.value().rank() != 4) throw InvalidArgument("stage4_concat_head: branch must be rank 4");
    up.push_back(ops::upsample_bilinear(b, height, width));
  }
  return ops::concat_channels(up);
}

Head::Head(ParameterSet& ps, const std::string& name, int in_channels, int hidden)
    : conv(ps, name + ".conv", in_channels, hidden, 3, {.padding = 1}),
      out(ps, name + ".out", hidden, 1, 1) {}

Var final_head(const Var& y1, const Var& y2, const Head& head, bool training) {
  if (y1.dim(0) != y2.dim(0) || y1.dim(2) != y2.dim(2) || y1.dim(3) != y2.dim(3)) {
    throw InvalidArgument("final_head: Y1 " + shape_string(y1.shape()) + " and Y2 " +
                          shape_string(y2.shape()) + " differ spatially");
  }
  return head.out(head.conv(ops::concat_channels({y1, y2}), training));
}

HrefNet::HrefNet(ModelConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  const auto& w = cfg_.branch_widths;
  const int s_count = cfg_.num_stages;

  stem_ = ConvBnAct(params_, "stem", 1, cfg_.base_width, 3, {.padding = 1});
  for (int b = 0; b < cfg_.stage1_blocks; ++b) {
    const int in = b == 0 ? cfg_.base_width : w[0];
    stage1_.emplace_back(params_, "stage1.block" + std::to_string(b + 1), in, w[0]);
  }
  if (cfg_.stage1_blocks == 0 && cfg_.base_width != w[0]) {
    throw InvalidConfig("stage1_blocks = 0 requires base_width == branch_widths[0]");
  }

  for (int s = 2; s <= s_count; ++s) {
    const std::string p = "stage" + std::to_string(s);
    Stage st;
    st.transition = ConvBnAct(params_, p + ".transition", w[s - 2], w[s - 1], 3, {.stride = 2, .padding = 1});
    st.blocks.resize(static_cast<std::size_t>(s));
    for (int b = 0; b < s; ++b) {
      for (int k = 0; k < cfg_.blocks_per_branch; ++k) {
        st.blocks[b].emplace_back(params_, p + ".branch" + std::to_string(b + 1) + ".block" + std::to_string(k + 1),
                                  w[b], cfg_);
      }
    }
    st.fusion = MultiScaleFusion(params_, p + ".fuse", std::vector<int>(w.begin(), w.begin() + s));
    stages_.push_back(std::move(st));
  }

  for (int s = 1; s <= s_count; ++s) {
    mref_.emplace_back(params_, "mref" + std::to_string(s), w[s - 1], cfg_.common_fusion_channels,
                       cfg_.se_reduction, cfg_.mref_identity_residual);
  }
  const int y1_channels = std::accumulate(w.begin() + 1, w.begin() + s_count, 0);
  head_ = Head(params_, "head", y1_channels + cfg_.common_fusion_channels, cfg_.head_channels);
}

void HrefNet::check_input(const Shape& shape) const {
  if (shape.size() != 4 || shape[1] != 1) {
    throw InvalidArgument("HREFNet expects a (N, 1, H, W) grayscale input, got " + shape_string(shape));
  }
  const int div = cfg_.spatial_divisor();
  if (shape[2] % div != 0 || shape[3] % div != 0 || shape[2] == 0 || shape[3] == 0) {
    throw InvalidArgument("input size " + std::to_string(shape[2]) + "x" + std::to_string(shape[3]) +
                          " must be divisible by " + std::to_string(div) + " for " +
                          std::to_string(cfg_.num_stages) + " stages");
  }
}

ForwardResult HrefNet::forward_detailed(const Var& x, bool training) const {
  check_input(x.shape());
  const std::int64_t h = x.dim(2), w = x.dim(3);
  ForwardResult r;

  Var f = stem_(x, training);
  for (const Bottleneck& b : stage1_) f = bottleneck_forward(f, b, training);
  r.stage_outputs.push_back(f);

  std::vector<Var> branches{f};
  for (const Stage& st : stages_) {
    branches.push_back(new_branch_transition(branches.back(), st.transition, training));
    for (std::size_t b = 0; b < branches.size(); ++b) {
      for (const dsvss::DsvssBlock& blk : st.blocks[b]) branches[b] = blk(branches[b], training);
    }
    branches = multi_scale_fuse(branches, st.fusion);
    r.stage_outputs.push_back(branches.back());
  }
  r.final_branches = branches;

  for (std::size_t s = 0; s < mref_.size(); ++s) r.qs.push_back(mref_[s](r.stage_outputs[s], h, w));
  r.y2 = mref::cross_stage_product(r.qs);
  r.y1 = stage4_concat_head(std::vector<Var>(branches.begin() + 1, branches.end()), h, w);
  r.logits = final_head(r.y1, r.y2, head_, training);
  return r;
}

Var HrefNet::forward(const Var& x, bool training) const { return forward_detailed(x, training).logits; }

Tensor HrefNet::predict_logits(const Tensor& image) const {
  if (image.rank() != 2) throw InvalidArgument("predict_logits: expected an (H, W) image");
  NoGradGuard guard;
  const Var x(image.reshaped({1, 1, image.dim(0), image.dim(1)}));
  return forward(x, false).value().reshaped({image.dim(0), image.dim(1)});
}

CostReport HrefNet::cost(std::int64_t height, std::int64_t width) const {
  CostReport c;
  c.parameters = params_.parameter_count();
  NoGradGuard guard;
  ops::MacCounter counter;
  forward(Var(Tensor({1, 1, height, width})), false);
  c.macs = counter.count();
  return c;
}

}  // namespace hrefnet::model
