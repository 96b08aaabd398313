#include "ncdpo/policy.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace ncdpo {

namespace {
const double kHalfLog2Pi = 0.5 * std::log(2.0 * std::numbers::pi);
}

GaussianHead GaussianHead::create(std::size_t dim, double init_log_sigma) {
  GaussianHead h;
  h.log_sigma = Tensor(Shape{1, dim}, init_log_sigma);
  h.clamp_log_sigma();
  return h;
}

void GaussianHead::clamp_log_sigma() {
  for (double& v : log_sigma.data()) v = std::clamp(v, log_sigma_min, log_sigma_max);
}

ad::Var gaussian_log_prob(ad::Tape& tape, ad::Var f, ad::Var log_sigma, const Tensor& action) {
  if (action.shape() != f.shape()) {
    throw std::invalid_argument("gaussian_log_prob: action " + shape_string(action.shape()) +
                                " vs mean " + shape_string(f.shape()));
  }
  // sum_d -0.5 ((a - f) / sigma)^2 - log sigma - 0.5 log 2 pi
  const ad::Var z = ad::mul_row(ad::sub(tape.constant(action), f), ad::exp(ad::neg(log_sigma)));
  const ad::Var per_dim =
      ad::add_row(ad::scale(ad::square(z), -0.5), ad::add_scalar(ad::neg(log_sigma), -kHalfLog2Pi));
  return ad::sum_cols(per_dim);
}

ad::Var gaussian_entropy(ad::Tape& tape, ad::Var log_sigma, std::size_t batch) {
  const std::size_t d = log_sigma.value().size();
  const ad::Var per_dim =
      ad::add_row(tape.constant(Tensor(Shape{batch, d}, 0.0)), ad::add_scalar(log_sigma, 0.5 + kHalfLog2Pi));
  return ad::sum_cols(per_dim);
}

namespace {

void check_logits(const SoftmaxHead& head, const Tensor& logits) {
  if (logits.cols() != head.num_agents * head.num_actions) {
    throw std::invalid_argument("softmax head: logits " + shape_string(logits.shape()) +
                                " do not hold " + std::to_string(head.num_agents) + " x " +
                                std::to_string(head.num_actions) + " entries per row");
  }
}

}  // namespace

ad::Var categorical_log_prob(ad::Tape& tape, const SoftmaxHead& head, ad::Var logits,
                             const Tensor& one_hot_action) {
  check_logits(head, logits.value());
  const std::size_t B = logits.value().rows();
  const std::size_t N = head.num_agents, A = head.num_actions;
  if (one_hot_action.shape() != logits.shape()) {
    throw std::invalid_argument("categorical_log_prob: action " +
                                shape_string(one_hot_action.shape()) + " vs logits " +
                                shape_string(logits.shape()));
  }
  const ad::Var lp = ad::log_softmax(ad::reshape(logits, {B * N, A}), head.inv_temperature);
  const ad::Var picked = ad::mul(lp, tape.constant(one_hot_action.reshaped({B * N, A})));
  return ad::sum_cols(ad::reshape(picked, {B, N * A}));
}

ad::Var categorical_entropy(const SoftmaxHead& head, ad::Var logits) {
  check_logits(head, logits.value());
  const std::size_t B = logits.value().rows();
  const std::size_t N = head.num_agents, A = head.num_actions;
  const ad::Var x = ad::reshape(logits, {B * N, A});
  const ad::Var plogp = ad::mul(ad::softmax(x, head.inv_temperature),
                                ad::log_softmax(x, head.inv_temperature));
  return ad::neg(ad::sum_cols(ad::reshape(plogp, {B, N * A})));
}

Tensor categorical_probs(const SoftmaxHead& head, const Tensor& logits) {
  check_logits(head, logits);
  ad::Tape tape(false);
  const std::size_t B = logits.rows();
  return ad::softmax(tape.constant(logits.reshaped({B * head.num_agents, head.num_actions})),
                     head.inv_temperature)
      .value();
}

Tensor one_hot(const SoftmaxHead& head, std::span<const std::size_t> indices) {
  const std::size_t N = head.num_agents, A = head.num_actions;
  if (indices.size() % N != 0) throw std::invalid_argument("one_hot: ragged agent indices");
  const std::size_t B = indices.size() / N;
  Tensor out(Shape{B, N * A}, 0.0);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= A) {
      throw std::out_of_range("discrete action index " + std::to_string(indices[i]) +
                              " out of range for " + std::to_string(A) + " actions");
    }
    out[i * A + indices[i]] = 1.0;
  }
  return out;
}

std::vector<std::size_t> argmax_actions(const SoftmaxHead& head, const Tensor& logits) {
  check_logits(head, logits);
  const std::size_t A = head.num_actions;
  std::vector<std::size_t> idx(logits.size() / A);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < A; ++j)
      if (logits[i * A + j] > logits[i * A + best]) best = j;
    idx[i] = best;
  }
  return idx;
}

PolicyOutput act_continuous(const GaussianHead& head, const Tensor& f_out, Rng& rng) {
  const std::size_t B = f_out.rows(), D = f_out.cols();
  if (head.log_sigma.size() != D) {
    throw std::invalid_argument("act_continuous: head has " +
                                std::to_string(head.log_sigma.size()) + " dims, mean has " +
                                std::to_string(D));
  }
  PolicyOutput out{f_out, Tensor(f_out.shape()), {}};
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t d = 0; d < D; ++d)
      out.action.at(b, d) = f_out.at(b, d) + std::exp(head.log_sigma[d]) * rng.normal();
  Head h{HeadKind::gaussian, head, {}};
  out.log_prob = log_prob(h, f_out, out.action);
  return out;
}

PolicyOutput act_discrete(const SoftmaxHead& head, const Tensor& f_out, Rng& rng) {
  const Tensor probs = categorical_probs(head, f_out);
  const std::size_t A = head.num_actions;
  std::vector<std::size_t> idx(probs.rows());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const double u = rng.uniform();
    double acc = 0.0;
    idx[i] = A - 1;
    for (std::size_t j = 0; j < A; ++j) {
      acc += probs.at(i, j);
      if (u < acc) {
        idx[i] = j;
        break;
      }
    }
  }
  PolicyOutput out{f_out, one_hot(head, idx), {}};
  Head h{HeadKind::softmax, {}, head};
  out.log_prob = log_prob(h, f_out, out.action);
  return out;
}

Tensor log_prob(const Head& head, const Tensor& f_out, const Tensor& action) {
  ad::Tape tape(false);
  const ad::Var f = tape.constant(f_out);
  if (head.kind == HeadKind::gaussian) {
    return gaussian_log_prob(tape, f, tape.constant(head.gaussian.log_sigma), action).value();
  }
  return categorical_log_prob(tape, head.softmax, f, action).value();
}

Tensor entropy(const Head& head, const Tensor& f_out) {
  ad::Tape tape(false);
  if (head.kind == HeadKind::gaussian) {
    return gaussian_entropy(tape, tape.constant(head.gaussian.log_sigma), f_out.rows()).value();
  }
  return categorical_entropy(head.softmax, tape.constant(f_out)).value();
}

// ---------------------------------------------------------------------------

std::vector<Tensor*> Actor::parameters() {
  std::vector<Tensor*> out;
  for (Tensor& p : body_params()) out.push_back(&p);
  if (head.kind == HeadKind::gaussian) out.push_back(&head.gaussian.log_sigma);
  return out;
}

std::vector<Tensor> Actor::parameter_values() const {
  std::vector<Tensor> out = body_params();
  if (head.kind == HeadKind::gaussian) out.push_back(head.gaussian.log_sigma);
  return out;
}

void Actor::set_parameter_values(const std::vector<Tensor>& values) {
  const auto ptrs = parameters();
  if (values.size() != ptrs.size()) {
    throw std::invalid_argument("Actor: expected " + std::to_string(ptrs.size()) +
                                " parameter tensors, got " + std::to_string(values.size()));
  }
  for (std::size_t i = 0; i < ptrs.size(); ++i) {
    if (values[i].shape() != ptrs[i]->shape()) {
      throw std::invalid_argument("Actor: parameter " + std::to_string(i) + " has shape " +
                                  shape_string(values[i].shape()) + ", expected " +
                                  shape_string(ptrs[i]->shape()));
    }
    *ptrs[i] = values[i];
  }
}

Actor::Eval Actor::evaluate(ad::Tape& tape, std::span<const ad::Var> params, const Tensor& s,
                            const Tensor& noise, const Tensor& action) const {
  const std::size_t nbody = body_params().size();
  const ad::Var f = body_forward(tape, params.subspan(0, nbody), tape.constant(s), noise);
  Eval e{f, {}, {}};
  if (head.kind == HeadKind::gaussian) {
    const ad::Var log_sigma = params[nbody];
    e.log_prob = gaussian_log_prob(tape, f, log_sigma, action);
    e.entropy = gaussian_entropy(tape, log_sigma, s.rows());
  } else {
    e.log_prob = categorical_log_prob(tape, head.softmax, f, action);
    e.entropy = categorical_entropy(head.softmax, f);
  }
  return e;
}

Tensor Actor::pre_noise(const Tensor& s, const Tensor& noise) const {
  ad::Tape tape(false);
  const auto p = ad::leaves(tape, body_params());
  return body_forward(tape, p, tape.constant(s), noise).value();
}

PolicyOutput Actor::act(const Tensor& s, const Tensor& noise, Rng& rng) const {
  const Tensor f = pre_noise(s, noise);
  return head.kind == HeadKind::gaussian ? act_continuous(head.gaussian, f, rng)
                                         : act_discrete(head.softmax, f, rng);
}

Tensor Actor::act_deterministic(const Tensor& s, const Tensor& noise) const {
  const Tensor f = pre_noise(s, noise);
  if (head.kind == HeadKind::gaussian) return f;
  return one_hot(head.softmax, argmax_actions(head.softmax, f));
}

void Actor::clamp_head() {
  if (head.kind == HeadKind::gaussian) head.gaussian.clamp_log_sigma();
}

Tensor DiffusionActor::sample_noise(std::size_t batch, Rng& rng) const {
  return sample_noise_stack(schedule.K, batch, net.action_dim, rng).flatten();
}

ad::Var DiffusionActor::body_forward(ad::Tape& tape, std::span<const ad::Var> body, ad::Var s,
                                     const Tensor& noise) const {
  const EpsFn eps = bind_eps(net, body);
  return denoise_deterministic(eps, tape, schedule, s, NoiseStack::unflatten(noise, schedule.K));
}

ad::Var MlpActor::body_forward(ad::Tape&, std::span<const ad::Var> body, ad::Var s,
                               const Tensor&) const {
  return mlp_forward(spec, body, s);
}

Tensor gather_rows(const Tensor& t, std::span<const std::size_t> rows) {
  const std::size_t W = t.cols();
  Tensor out(Shape{rows.size(), W});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= t.rows()) throw std::out_of_range("gather_rows: row index out of range");
    std::copy_n(t.data().data() + rows[i] * W, W, out.data().data() + i * W);
  }
  return out;
}

}  // namespace ncdpo
