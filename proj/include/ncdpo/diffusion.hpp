#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "ncdpo/autodiff.hpp"
#include "ncdpo/nets.hpp"
#include "ncdpo/rng.hpp"
#include "ncdpo/tensor.hpp"

namespace ncdpo {

enum class ScheduleKind { linear, cosine };

ScheduleKind parse_schedule_kind(const std::string& name);
std::string schedule_kind_name(ScheduleKind kind);

// What the denoising network outputs: the added noise (eps) or the clean
// action a^0 (x0). Both give the same mean family; x0 starts an untrained
// chain near zero instead of near the clip boundary.
enum class Prediction { eps, x0 };

Prediction parse_prediction(const std::string& name);
std::string prediction_name(Prediction p);

struct ScheduleParams {
  ScheduleKind kind = ScheduleKind::linear;
  double beta_min = 1e-4;
  double beta_max = 0.02;
  // Linear kind: > 0 lays the linear betas over this many fine steps and
  // respaces them onto K (alpha_bar_k = fine alpha_bar at k*R/K). 0 uses the
  // endpoints directly over K steps.
  std::size_t reference_steps = 1000;
  double cosine_s = 0.008;
  double max_beta = 0.999;
  double eta = 1.0;
  double beta_base = 0.7;
  // > 0: predicted a^0 is clipped to [-x0_clip, x0_clip] inside the mean.
  double x0_clip = 0.0;
  Prediction prediction = Prediction::eps;
};

// Arrays are indexed by k-1 for k = 1..K.
struct NoiseSchedule {
  std::size_t K = 0;
  ScheduleParams params;
  std::vector<double> base_beta;  // before the eta transform
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;
  std::vector<double> sigma;

  // alpha_bar_k with alpha_bar_0 = 1.
  double alpha_bar_at(std::size_t k) const { return k == 0 ? 1.0 : alpha_bar.at(k - 1); }
};

NoiseSchedule make_schedule(std::size_t K, const ScheduleParams& params);
// Schedule from explicit betas (used by tests and constant schedules).
NoiseSchedule schedule_from_betas(std::vector<double> beta, const ScheduleParams& params = {});
// beta'_k = beta_base * (base_beta_k / beta_base)^eta; sigma recomputed.
NoiseSchedule apply_eta(const NoiseSchedule& schedule, double eta);

// sqrt(alpha_bar_k) a0 + sqrt(1 - alpha_bar_k) eps
Tensor q_sample(const NoiseSchedule& schedule, const Tensor& a0, std::size_t k, const Tensor& eps);

// Pre-sampled noise for one batch: a^K and z^1..z^K, each [B, action_dim].
struct NoiseStack {
  Tensor a_K;
  std::vector<Tensor> z;  // z[k-1] = z^k

  std::size_t K() const { return z.size(); }
  // Row layout [a^K | z^1 | ... | z^K], shape [B, (K+1) * action_dim].
  Tensor flatten() const;
  static NoiseStack unflatten(const Tensor& flat, std::size_t K);
};

NoiseStack sample_noise_stack(std::size_t K, std::size_t batch, std::size_t action_dim, Rng& rng);

// eps_theta evaluated on a batch; ks holds one timestep per row, or a single
// timestep shared by every row.
using EpsFn = std::function<ad::Var(ad::Tape&, ad::Var a_k, std::span<const std::size_t> ks,
                                    ad::Var s)>;

EpsFn bind_eps(const DenoisingNet& net, std::span<const ad::Var> params);

ad::Var denoise_mean(const EpsFn& eps, ad::Tape& tape, ad::Var a_k, std::size_t k, ad::Var s,
                     const NoiseSchedule& schedule);

// Same mean with a timestep per row.
ad::Var denoise_mean_rows(const EpsFn& eps, ad::Tape& tape, ad::Var a_k,
                          std::span<const std::size_t> ks, ad::Var s,
                          const NoiseSchedule& schedule);

// a^{k-1} = mu(a^k, k, s) + sigma_k z^k for k = K..1, from a^K = stack.a_K.
ad::Var denoise_deterministic(const EpsFn& eps, ad::Tape& tape, const NoiseSchedule& schedule,
                              ad::Var s, const NoiseStack& stack);

// Mean over rows of ||eps - eps_theta(q_sample(a0, k, eps), k, s)||^2 with
// k ~ U{1..K} and eps ~ N(0, I) drawn per row from rng. Under x0 prediction
// the target is a0 instead of eps.
ad::Var bc_loss(const EpsFn& eps, ad::Tape& tape, const NoiseSchedule& schedule, const Tensor& s,
                const Tensor& a0, Rng& rng);

}  // namespace ncdpo
