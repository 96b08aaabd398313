#pragma once

#include <cstdint>
#include <vector>

#include "ncdpo/tensor.hpp"

namespace ncdpo {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // Only used by the decoupled variant.
  double weight_decay = 0.0;
};

// Adam (coupled = plain) or AdamW (decoupled weight decay) over a fixed list
// of parameter tensors. Moment buffers follow the parameter order.
class Adam {
 public:
  Adam() = default;
  Adam(AdamConfig config, bool decoupled_weight_decay);

  void step(const std::vector<Tensor*>& params, const std::vector<Tensor>& grads);

  const AdamConfig& config() const { return config_; }
  AdamConfig& config() { return config_; }
  bool decoupled() const { return decoupled_; }
  std::int64_t steps() const { return t_; }

  // Flat state for checkpoints: [t, m..., v...].
  std::vector<double> state() const;
  void load_state(const std::vector<double>& flat, const std::vector<Tensor*>& params);

 private:
  AdamConfig config_;
  bool decoupled_ = false;
  std::int64_t t_ = 0;
  std::vector<Tensor> m_, v_;
};

inline Adam make_adam(AdamConfig c) { return Adam(c, false); }
inline Adam make_adamw(AdamConfig c) { return Adam(c, true); }

// Scales grads in place so their joint L2 norm is at most max_norm
// (max_norm <= 0 disables). Returns the norm before clipping.
double clip_grad_norm(std::vector<Tensor>& grads, double max_norm);

}  // namespace ncdpo
