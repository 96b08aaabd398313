#include "ncdpo/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace ncdpo {

Adam::Adam(AdamConfig config, bool decoupled_weight_decay)
    : config_(config), decoupled_(decoupled_weight_decay) {}

void Adam::step(const std::vector<Tensor*>& params, const std::vector<Tensor>& grads) {
  if (params.size() != grads.size()) throw std::invalid_argument("Adam::step: size mismatch");
  if (m_.empty()) {
    for (const Tensor* p : params) {
      m_.emplace_back(p->shape(), 0.0);
      v_.emplace_back(p->shape(), 0.0);
    }
  }
  if (m_.size() != params.size()) throw std::invalid_argument("Adam::step: parameter list changed");
  ++t_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    const Tensor& g = grads[i];
    if (g.size() != p.size()) {
      throw std::invalid_argument("Adam::step: gradient shape " + shape_string(g.shape()) +
                                  " vs parameter " + shape_string(p.shape()));
    }
    for (std::size_t j = 0; j < p.size(); ++j) {
      m_[i][j] = b1 * m_[i][j] + (1.0 - b1) * g[j];
      v_[i][j] = b2 * v_[i][j] + (1.0 - b2) * g[j] * g[j];
      const double mhat = m_[i][j] / c1;
      const double vhat = v_[i][j] / c2;
      if (decoupled_) p[j] -= config_.lr * config_.weight_decay * p[j];
      p[j] -= config_.lr * mhat / (std::sqrt(vhat) + config_.eps);
    }
  }
}

std::vector<double> Adam::state() const {
  std::vector<double> flat{static_cast<double>(t_)};
  for (const Tensor& m : m_) flat.insert(flat.end(), m.data().begin(), m.data().end());
  for (const Tensor& v : v_) flat.insert(flat.end(), v.data().begin(), v.data().end());
  return flat;
}

void Adam::load_state(const std::vector<double>& flat, const std::vector<Tensor*>& params) {
  std::size_t n = 0;
  for (const Tensor* p : params) n += p->size();
  if (flat.size() == 1 && flat[0] == 0.0) {
    t_ = 0;
    m_.clear();
    v_.clear();
    return;
  }
  if (flat.size() != 1 + 2 * n) {
    throw std::invalid_argument("Adam::load_state: expected " + std::to_string(1 + 2 * n) +
                                " values, got " + std::to_string(flat.size()));
  }
  t_ = static_cast<std::int64_t>(flat[0]);
  m_.clear();
  v_.clear();
  std::size_t off = 1;
  for (const Tensor* p : params) {
    m_.emplace_back(p->shape(), std::vector<double>(flat.begin() + static_cast<long>(off),
                                                    flat.begin() + static_cast<long>(off + p->size())));
    off += p->size();
  }
  for (const Tensor* p : params) {
    v_.emplace_back(p->shape(), std::vector<double>(flat.begin() + static_cast<long>(off),
                                                    flat.begin() + static_cast<long>(off + p->size())));
    off += p->size();
  }
}

double clip_grad_norm(std::vector<Tensor>& grads, double max_norm) {
  double sq = 0.0;
  for (const Tensor& g : grads)
    for (double v : g.data()) sq += v * v;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / (norm + 1e-12);
    for (Tensor& g : grads)
      for (double& v : g.data()) v *= s;
  }
  return norm;
}

}  // namespace ncdpo
