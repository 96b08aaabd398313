#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "ncdpo/autodiff.hpp"
#include "ncdpo/diffusion.hpp"
#include "ncdpo/envs.hpp"
#include "ncdpo/nets.hpp"
#include "ncdpo/optim.hpp"
#include "ncdpo/policy.hpp"

namespace ncdpo {

// Raised when a loss or ratio stops being finite; training halts on it.
class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Algo { ncdpo, mlp_ppo, dppo };
Algo parse_algo(const std::string& name);
std::string algo_name(Algo algo);

struct PpoConfig {
  double gamma = 0.99;
  double lambda = 0.95;
  double clip_eps = 0.2;
  std::size_t epochs = 5;
  std::size_t minibatches = 4;
  double actor_lr = 1e-4;
  double critic_lr = 1e-3;
  double critic_weight_decay = 1e-2;
  double value_coef = 0.5;
  double entropy_coef = 0.0;
  double max_grad_norm = 0.5;
  bool normalize_advantages = true;

  void validate() const;
};

struct SelfImitationConfig {
  std::size_t clone_epochs = 0;
  double clone_lr = 1e-4;
  std::size_t batch_size = 256;
};

struct ActorSpec {
  std::size_t width = 256;
  std::size_t layers = 3;
  bool residual = false;
  Activation activation = Activation::mish;
  std::size_t emb_dim = 16;
  std::size_t K = 5;
  ScheduleParams schedule;
  double init_log_sigma = -2.0;
  double inv_temperature = 20.0;
};

struct CriticSpec {
  std::size_t width = 256;
  std::size_t layers = 3;
  bool residual = false;
  Activation activation = Activation::mish;
};

// Diffusion actor for ncdpo/dppo, plain MLP for mlp_ppo.
std::unique_ptr<Actor> make_actor(Algo algo, const ActorSpec& spec, const EnvConfig& env,
                                  std::uint64_t seed);
// DPPO critics see (s, emb(k), a^k); the others see s.
CriticNet make_critic(Algo algo, const CriticSpec& spec, const ActorSpec& actor,
                      const EnvConfig& env, std::uint64_t seed);

// Per-step records, row t * num_envs + e for step t of env e.
struct RolloutBuffer {
  std::size_t num_envs = 0;
  std::size_t steps = 0;
  Tensor obs;     // [N, obs_dim]
  Tensor noise;   // [N, noise_dim]  (a^K, z^1..z^K)
  Tensor f_out;   // [N, action_dim] pre-noise output
  Tensor action;  // [N, action_dim] interactive action
  std::vector<double> log_prob, reward, value;
  std::vector<std::uint8_t> done, success;
  std::vector<double> bootstrap;  // V(s_T) per env
  std::vector<double> advantages, returns;
  // Episodes completed inside this rollout.
  std::vector<double> episode_returns;
  std::vector<std::uint8_t> episode_success;
  // Undiscounted return of each env's unfinished tail episode.
  std::vector<double> partial_returns;
  std::size_t env_steps = 0;

  std::size_t size() const { return log_prob.size(); }
  std::size_t index(std::size_t t, std::size_t e) const { return t * num_envs + e; }
};

// Parallel environments with independent RNG streams.
struct VecEnv {
  std::vector<std::unique_ptr<Env>> envs;
  std::vector<Rng> rngs;
};
VecEnv make_vec_env(const EnvConfig& config, std::size_t count, std::uint64_t seed);

RolloutBuffer collect_rollout(const Actor& actor, const CriticNet& critic, VecEnv& venv,
                              std::size_t steps_per_env);

struct GaeResult {
  std::vector<double> advantages;
  std::vector<double> returns;
};

// One env's sequence. bootstrap = V(s_T) is required unless the last step is done.
GaeResult gae(std::span<const double> rewards, std::span<const double> values,
              std::span<const std::uint8_t> dones, std::optional<double> bootstrap, double gamma,
              double lambda);
// Per-step discounts (gammas[t] multiplies V_{t+1} and A_{t+1}).
GaeResult gae_discounts(std::span<const double> rewards, std::span<const double> values,
                        std::span<const std::uint8_t> dones, std::span<const double> gammas,
                        std::optional<double> bootstrap, double lambda);

void compute_advantages(RolloutBuffer& buffer, double gamma, double lambda);

struct LossStats {
  double loss = 0.0;
  double mean_ratio = 0.0;
  double clip_fraction = 0.0;
  double entropy = 0.0;
};

struct PolicyLoss {
  ad::Var loss;          // negated clipped objective, scalar
  ad::Var entropy_mean;  // scalar
  LossStats stats;
};

// Recomputes f through the body (the whole denoising chain for diffusion
// actors) from the stored noise and scores the stored actions.
PolicyLoss ncdpo_loss(const Actor& actor, ad::Tape& tape, std::span<const ad::Var> params,
                      const Tensor& obs, const Tensor& noise, const Tensor& action,
                      std::span<const double> old_log_prob, std::span<const double> advantages,
                      double clip_eps);

struct PpoStats {
  double actor_loss = 0.0;
  double value_loss = 0.0;
  double mean_ratio = 0.0;
  double clip_fraction = 0.0;
  double entropy = 0.0;
};

PpoStats ppo_update(Actor& actor, CriticNet& critic, Adam& actor_opt, Adam& critic_opt,
                    const RolloutBuffer& buffer, const PpoConfig& config, Rng& rng);

// Behavior cloning on (obs, action) pairs: diffusion bc_loss for diffusion
// actors, squared error / cross-entropy for MLP actors. Returns the per-epoch
// mean loss.
std::vector<double> clone_epochs(Actor& actor, Adam& opt, const Tensor& obs,
                                 const Tensor& action, std::size_t epochs,
                                 std::size_t batch_size, Rng& rng);

// clone_epochs of behavior cloning on the previous buffer's interactive actions.
std::vector<double> self_imitation_update(Actor& actor, Adam& opt,
                                          const RolloutBuffer& previous,
                                          const SelfImitationConfig& config, Rng& rng);

// Behavior-cloning loss of the actor on (obs, action) with a fixed RNG.
double measure_bc_loss(const Actor& actor, const Tensor& obs, const Tensor& action,
                       std::uint64_t seed);

struct PretrainConfig {
  std::size_t max_epochs = 200;
  std::size_t batch_size = 256;
  double lr = 1e-3;
  std::size_t patience = 20;
  double min_delta = 1e-3;  // relative improvement that resets patience
};

// Trains until the loss plateaus over the patience window or max_epochs.
std::vector<double> pretrain(Actor& actor, const DemoSet& demos, const PretrainConfig& config,
                             std::uint64_t seed);

struct EvalResult {
  double mean_return = 0.0;
  double success_rate = 0.0;
  std::vector<double> returns;
};

// Deterministic acting (mean action / per-agent argmax); the diffusion
// noise stack is still sampled per decision.
EvalResult evaluate_policy(const Actor& actor, const EnvConfig& env, std::size_t episodes,
                           std::uint64_t seed, bool deterministic = true);

struct TrainConfig {
  Algo algo = Algo::ncdpo;
  std::size_t env_step_budget = 200000;
  std::size_t num_envs = 32;
  std::size_t steps_per_env = 64;
  std::uint64_t seed = 0;
  PpoConfig ppo;
  SelfImitationConfig self_imitation;
  double dppo_min_std = 0.1;
  std::size_t eval_episodes = 50;
  bool log_wall_time = true;
};

struct IterationMetrics {
  std::size_t iteration = 0;
  std::size_t env_steps = 0;
  double mean_return = 0.0;
  double success_rate = 0.0;
  double actor_loss = 0.0;
  double value_loss = 0.0;
  double bc_loss = 0.0;
  double mean_ratio = 0.0;
  double clip_fraction = 0.0;
  double entropy = 0.0;
  double wall_time_s = 0.0;
};

struct TrainState {
  std::unique_ptr<Actor> actor;
  CriticNet critic;
  Adam actor_opt;
  Adam critic_opt;
  Adam clone_opt;
  std::size_t iteration = 0;
  std::size_t env_steps = 0;

  TrainState() = default;
  TrainState(TrainState&&) = default;
  TrainState& operator=(TrainState&&) = default;
  TrainState clone() const;
};

// Fresh optimizers for a state built from config.
TrainState make_train_state(std::unique_ptr<Actor> actor, CriticNet critic,
                            const TrainConfig& config);

using IterationCallback = std::function<void(const IterationMetrics&, const TrainState&)>;

// Runs iterations until state.env_steps >= env_step_budget. Each iteration's
// randomness derives from (seed, iteration) only, so a run resumed from a
// saved state continues exactly.
std::vector<IterationMetrics> train(const EnvConfig& env, const TrainConfig& config,
                                    TrainState& state, const IterationCallback& on_iteration = {});

std::vector<IterationMetrics> train_ncdpo(const EnvConfig& env, const TrainConfig& config,
                                          TrainState& state, const IterationCallback& cb = {});
std::vector<IterationMetrics> train_mlp_ppo(const EnvConfig& env, const TrainConfig& config,
                                            TrainState& state, const IterationCallback& cb = {});
std::vector<IterationMetrics> train_dppo_baseline(const EnvConfig& env, const TrainConfig& config,
                                                  TrainState& state,
                                                  const IterationCallback& cb = {});

// DPPO pieces, exposed for tests.
struct DppoBuffer {
  std::size_t num_envs = 0;
  std::size_t steps = 0;
  std::size_t K = 0;
  // Row ((t * num_envs + e) * K + (K - k)) is denoising step k of env step t.
  Tensor obs;     // [N, obs_dim]
  Tensor a_k;     // [N, action_dim]
  Tensor a_prev;  // [N, action_dim] = a^{k-1}
  std::vector<std::size_t> k;
  std::vector<double> std_dev;
  std::vector<double> log_prob, value, reward, gammas;
  std::vector<std::uint8_t> done;
  std::vector<double> bootstrap;
  std::vector<double> advantages, returns;
  Tensor env_obs;     // [num_envs * steps, obs_dim]
  Tensor env_action;  // [num_envs * steps, action_dim] executed a^0
  std::vector<double> episode_returns;
  std::vector<std::uint8_t> episode_success;
  std::vector<double> partial_returns;
  std::size_t env_steps = 0;

  std::size_t size() const { return log_prob.size(); }
};

// Per-step standard deviations used by the baseline: max(sigma_k, min_std).
std::vector<double> dppo_step_std(const NoiseSchedule& schedule, double min_std);

// log N(x; mu, diag(std^2)) per row.
ad::Var gaussian_rows_log_prob(ad::Tape& tape, ad::Var mu, const Tensor& x,
                               std::span<const double> std_dev);

DppoBuffer collect_dppo_rollout(const DiffusionActor& actor, const CriticNet& critic,
                                VecEnv& venv, std::size_t steps_per_env, double min_std);
void compute_dppo_advantages(DppoBuffer& buffer, double gamma, double lambda);
// DPPO critic input rows concat(s, emb(k), a^k).
Tensor dppo_critic_input(const Tensor& obs, std::span<const std::size_t> ks, const Tensor& a_k,
                         std::size_t emb_dim);

}  // namespace ncdpo
