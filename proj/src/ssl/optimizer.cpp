// SPDX-License-Identifier: Apache-2.0

#include "vfmseg/ssl/optimizer.hpp"

#include <cmath>

#include "vfmseg/core/error.hpp"
#include "vfmseg/kernels/kernels.hpp"

namespace vfmseg::ssl {

AdamW::AdamW(student::ParamStore& params, AdamWConfig config)
    : params_(&params), config_(config) {
  if (config_.lr_encoder < 0.0 || config_.lr_decoder < 0.0 ||
      config_.beta1 < 0.0 || config_.beta1 >= 1.0 || config_.beta2 < 0.0 ||
      config_.beta2 >= 1.0 || config_.eps <= 0.0 ||
      config_.weight_decay < 0.0) {
    throw ConfigError("invalid AdamW hyperparameters");
  }
}

double AdamW::lr_for(const std::string& name) const {
  return name.rfind("encoder.", 0) == 0 ? config_.lr_encoder
                                        : config_.lr_decoder;
}

void AdamW::step() {
  for (auto& [name, tensor] : params_->mutable_all()) {
    double* grad = tensor.grad_data();
    if (grad == nullptr) continue;  // no gradient reached this parameter
    auto& st = state_[name];
    const auto n = static_cast<std::size_t>(tensor.numel());
    if (st.m.empty()) {
      st.m.assign(n, 0.0);
      st.v.assign(n, 0.0);
    }
    ++st.t;
    const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(st.t));
    const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(st.t));
    kernels::active().adamw(tensor.data(), st.m.data(), st.v.data(), grad, n,
                            lr_for(name), config_.beta1, config_.beta2,
                            config_.eps, config_.weight_decay, bc1, bc2);
  }
}

void AdamW::zero_grad() { params_->zero_grads(); }

void AdamW::save_state(Archive& archive, const std::string& prefix) const {
  nlohmann::ordered_json steps;
  for (const auto& [name, st] : state_) {
    archive.tensors[prefix + "m." + name] = Tensor::from_data(
        {static_cast<std::int64_t>(st.m.size())}, st.m);
    archive.tensors[prefix + "v." + name] = Tensor::from_data(
        {static_cast<std::int64_t>(st.v.size())}, st.v);
    steps[name] = st.t;
  }
  archive.meta["optimizer_steps"] = steps;
}

void AdamW::load_state(const Archive& archive, const std::string& prefix) {
  state_.clear();
  if (!archive.meta.contains("optimizer_steps")) return;
  for (const auto& [name, t] : archive.meta.at("optimizer_steps").items()) {
    auto mi = archive.tensors.find(prefix + "m." + name);
    auto vi = archive.tensors.find(prefix + "v." + name);
    if (mi == archive.tensors.end() || vi == archive.tensors.end()) {
      throw DataError("checkpoint missing optimizer moments for '" + name +
                      "'");
    }
    State st;
    st.m = mi->second.vec();
    st.v = vi->second.vec();
    st.t = t.get<std::int64_t>();
    state_.emplace(name, std::move(st));
  }
}

}  // namespace vfmseg::ssl
