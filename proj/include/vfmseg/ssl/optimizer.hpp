// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "vfmseg/core/archive.hpp"
#include "vfmseg/student/student.hpp"

namespace vfmseg::ssl {

struct AdamWConfig {
  double lr_encoder = 5e-6;
  double lr_decoder = 2e-4;  // also translators, projectors and the head
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// Decoupled-weight-decay Adam over a ParamStore with two learning-rate
/// groups: names under "encoder." use lr_encoder, everything else (decoder,
/// translators, projectors) uses lr_decoder. Parameters that carry no
/// gradient on a step are skipped entirely; moment state and the per-param
/// step count are lazily created on first use.
class AdamW {
 public:
  AdamW(student::ParamStore& params, AdamWConfig config);

  void step();
  void zero_grad();

  double lr_for(const std::string& name) const;
  const AdamWConfig& config() const { return config_; }

  /// Moment buffers and per-param step counts, under `prefix` ("opt.").
  void save_state(Archive& archive, const std::string& prefix) const;
  void load_state(const Archive& archive, const std::string& prefix);

 private:
  struct State {
    std::vector<double> m;
    std::vector<double> v;
    std::int64_t t = 0;
  };

  student::ParamStore* params_;
  AdamWConfig config_;
  std::map<std::string, State> state_;
};

}  // namespace vfmseg::ssl
