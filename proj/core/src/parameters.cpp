#include "hrefnet/parameters.hpp"

#include <algorithm>
#include <cmath>

#include "hrefnet/errors.hpp"

namespace hrefnet {

Var ParameterSet::add_parameter(std::string name, Shape shape, InitKind init, std::int64_t fan_in) {
  check_unique(name);
  Var v = Var::parameter(Tensor(std::move(shape)));
  params_.push_back({std::move(name), v, init, fan_in});
  return v;
}

Var ParameterSet::add_buffer(std::string name, Shape shape, double fill) {
  check_unique(name);
  Var v(Tensor(std::move(shape), fill));
  buffers_.push_back({std::move(name), v, fill == 1.0 ? InitKind::ones : InitKind::zeros, 0});
  return v;
}

const NamedTensor* ParameterSet::find(std::string_view name) const {
  for (const auto* list : {&params_, &buffers_}) {
    auto it = std::find_if(list->begin(), list->end(), [&](const NamedTensor& t) { return t.name == name; });
    if (it != list->end()) return &*it;
  }
  return nullptr;
}

std::int64_t ParameterSet::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& p : params_) n += p.var.value().numel();
  return n;
}

void ParameterSet::zero_grad() {
  for (auto& p : params_) p.var.zero_grad();
}

void ParameterSet::check_unique(const std::string& name) const {
  if (find(name) != nullptr) throw InvalidConfig("duplicate parameter name '" + name + "'");
}

void kaiming_init(ParameterSet& params, std::mt19937_64& rng) {
  for (const auto& p : params.parameters()) {
    Tensor& t = Var(p.var).mutable_value();
    switch (p.init) {
      case InitKind::kaiming_normal: {
        if (p.fan_in <= 0) throw InvalidConfig("parameter '" + p.name + "' has no fan-in");
        std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / static_cast<double>(p.fan_in)));
        for (auto& v : t.values()) v = normal(rng);
        break;
      }
      case InitKind::zeros:
        t.fill(0.0);
        break;
      case InitKind::ones:
        t.fill(1.0);
        break;
      case InitKind::ssm_a_log: {
        const std::int64_t cols = t.dim(t.rank() - 1);
        for (std::int64_t i = 0; i < t.numel(); ++i) {
          t[i] = std::log(static_cast<double>(i % cols + 1));
        }
        break;
      }
      case InitKind::ssm_dt_bias: {
        std::uniform_real_distribution<double> unit(0.0, 1.0);
        const double lo = std::log(1e-3), hi = std::log(1e-1);
        for (auto& v : t.values()) {
          const double dt = std::max(std::exp(lo + unit(rng) * (hi - lo)), 1e-4);
          v = dt + std::log(-std::expm1(-dt));  // softplus^-1(dt)
        }
        break;
      }
      case InitKind::ssm_dt_proj: {
        const double bound = 1.0 / std::sqrt(static_cast<double>(std::max<std::int64_t>(p.fan_in, 1)));
        std::uniform_real_distribution<double> uniform(-bound, bound);
        for (auto& v : t.values()) v = uniform(rng);
        break;
      }
    }
  }
  for (const auto& b : params.buffers()) {
    Var(b.var).mutable_value().fill(b.init == InitKind::ones ? 1.0 : 0.0);
  }
}

}  // namespace hrefnet
