#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "ncdpo/autodiff.hpp"
#include "ncdpo/diffusion.hpp"
#include "ncdpo/nets.hpp"
#include "ncdpo/rng.hpp"
#include "ncdpo/tensor.hpp"

namespace ncdpo {

struct GaussianHead {
  Tensor log_sigma;  // [1, D]
  double log_sigma_min = -5.0;
  double log_sigma_max = 1.0;

  static GaussianHead create(std::size_t dim, double init_log_sigma);
  void clamp_log_sigma();
};

struct SoftmaxHead {
  double inv_temperature = 20.0;
  std::size_t num_agents = 1;
  std::size_t num_actions = 1;
};

enum class HeadKind { gaussian, softmax };

struct Head {
  HeadKind kind = HeadKind::gaussian;
  GaussianHead gaussian;
  SoftmaxHead softmax;
};

// Batched: f_out and action are [B, D], log_prob is [B, 1].
struct PolicyOutput {
  Tensor f_out;
  Tensor action;
  Tensor log_prob;
};

// Differentiable per-row log densities / masses and entropies, all [B, 1].
ad::Var gaussian_log_prob(ad::Tape& tape, ad::Var f, ad::Var log_sigma, const Tensor& action);
ad::Var gaussian_entropy(ad::Tape& tape, ad::Var log_sigma, std::size_t batch);
ad::Var categorical_log_prob(ad::Tape& tape, const SoftmaxHead& head, ad::Var logits,
                             const Tensor& one_hot_action);
ad::Var categorical_entropy(const SoftmaxHead& head, ad::Var logits);

// Per-agent probabilities [B * N, A].
Tensor categorical_probs(const SoftmaxHead& head, const Tensor& logits);

// indices: B rows of N agent choices, flattened row-major.
Tensor one_hot(const SoftmaxHead& head, std::span<const std::size_t> indices);
std::vector<std::size_t> argmax_actions(const SoftmaxHead& head, const Tensor& logits);

PolicyOutput act_continuous(const GaussianHead& head, const Tensor& f_out, Rng& rng);
PolicyOutput act_discrete(const SoftmaxHead& head, const Tensor& f_out, Rng& rng);

// Non-differentiable evaluations through the same code path as the losses.
Tensor log_prob(const Head& head, const Tensor& f_out, const Tensor& action);
Tensor entropy(const Head& head, const Tensor& f_out);

// A stochastic policy: a deterministic body f(s, noise) followed by a head.
class Actor {
 public:
  Head head;

  virtual ~Actor() = default;
  virtual std::string kind() const = 0;
  virtual std::size_t obs_dim() const = 0;
  virtual std::size_t action_dim() const = 0;
  // Width of the per-row noise fed to the body (0 when the body is deterministic).
  virtual std::size_t noise_dim() const = 0;
  virtual Tensor sample_noise(std::size_t batch, Rng& rng) const = 0;
  virtual std::vector<Tensor>& body_params() = 0;
  virtual const std::vector<Tensor>& body_params() const = 0;
  virtual ad::Var body_forward(ad::Tape& tape, std::span<const ad::Var> body, ad::Var s,
                               const Tensor& noise) const = 0;
  virtual std::unique_ptr<Actor> clone() const = 0;

  // Body parameters followed by log sigma for a Gaussian head.
  std::vector<Tensor*> parameters();
  std::vector<Tensor> parameter_values() const;
  void set_parameter_values(const std::vector<Tensor>& values);

  // Full differentiable pass: returns f and the per-row log-prob of action.
  struct Eval {
    ad::Var f;
    ad::Var log_prob;
    ad::Var entropy;
  };
  Eval evaluate(ad::Tape& tape, std::span<const ad::Var> params, const Tensor& s,
                const Tensor& noise, const Tensor& action) const;

  Tensor pre_noise(const Tensor& s, const Tensor& noise) const;
  PolicyOutput act(const Tensor& s, const Tensor& noise, Rng& rng) const;
  // Mean action (continuous) or per-agent argmax one-hot (discrete).
  Tensor act_deterministic(const Tensor& s, const Tensor& noise) const;

  void clamp_head();
};

// Noise-conditioned diffusion policy: f = denoise_deterministic(s, stack).
class DiffusionActor : public Actor {
 public:
  DenoisingNet net;
  NoiseSchedule schedule;

  std::string kind() const override { return "diffusion"; }
  std::size_t obs_dim() const override { return net.obs_dim; }
  std::size_t action_dim() const override { return net.action_dim; }
  std::size_t noise_dim() const override { return (schedule.K + 1) * net.action_dim; }
  Tensor sample_noise(std::size_t batch, Rng& rng) const override;
  std::vector<Tensor>& body_params() override { return net.params; }
  const std::vector<Tensor>& body_params() const override { return net.params; }
  ad::Var body_forward(ad::Tape& tape, std::span<const ad::Var> body, ad::Var s,
                       const Tensor& noise) const override;
  std::unique_ptr<Actor> clone() const override {
    return std::make_unique<DiffusionActor>(*this);
  }
};

// Plain MLP mean / logits network.
class MlpActor : public Actor {
 public:
  MlpSpec spec;
  std::vector<Tensor> params;

  std::string kind() const override { return "mlp"; }
  std::size_t obs_dim() const override { return spec.input_dim; }
  std::size_t action_dim() const override { return spec.output_dim; }
  std::size_t noise_dim() const override { return 0; }
  Tensor sample_noise(std::size_t batch, Rng&) const override { return Tensor(Shape{batch, 0}); }
  std::vector<Tensor>& body_params() override { return params; }
  const std::vector<Tensor>& body_params() const override { return params; }
  ad::Var body_forward(ad::Tape& tape, std::span<const ad::Var> body, ad::Var s,
                       const Tensor& noise) const override;
  std::unique_ptr<Actor> clone() const override { return std::make_unique<MlpActor>(*this); }
};

// Gathers rows of a [N, W] tensor.
Tensor gather_rows(const Tensor& t, std::span<const std::size_t> rows);

}  // namespace ncdpo
