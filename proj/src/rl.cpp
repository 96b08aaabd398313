#include "ncdpo/rl.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>

namespace ncdpo {

namespace {

// RNG stream ids under the master seed.
enum Stream : std::uint64_t {
  kCollect = 11,
  kPpo = 12,
  kClone = 13,
  kBcMeasure = 14,
};

const double kHalfLog2Pi = 0.5 * std::log(2.0 * std::numbers::pi);

std::vector<Tensor> values_of(const std::vector<Tensor*>& ptrs) {
  std::vector<Tensor> out;
  out.reserve(ptrs.size());
  for (const Tensor* p : ptrs) out.push_back(*p);
  return out;
}

std::vector<Tensor> gradients(const ad::Tape& tape, std::span<const ad::Var> vars) {
  std::vector<Tensor> out;
  out.reserve(vars.size());
  for (const ad::Var& v : vars) out.push_back(tape.gradient(v));
  return out;
}

Tensor column(std::span<const double> v) {
  return Tensor(Shape{v.size(), 1}, std::vector<double>(v.begin(), v.end()));
}

std::vector<double> gather(std::span<const double> v, std::span<const std::size_t> idx) {
  std::vector<double> out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) out[i] = v[idx[i]];
  return out;
}

void normalize(std::vector<double>& v) {
  const double n = static_cast<double>(v.size());
  const double mu = std::accumulate(v.begin(), v.end(), 0.0) / n;
  double var = 0.0;
  for (double x : v) var += (x - mu) * (x - mu);
  const double sd = std::max(std::sqrt(var / n), 1e-8);
  for (double& x : v) x = (x - mu) / sd;
}

std::vector<std::vector<std::size_t>> minibatch_split(std::size_t n, std::size_t count, Rng& rng) {
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng.engine());
  count = std::max<std::size_t>(1, std::min(count, n));
  std::vector<std::vector<std::size_t>> out(count);
  for (std::size_t i = 0; i < n; ++i) out[i * count / n].push_back(perm[i]);
  return out;
}

void copy_row(const std::vector<double>& src, Tensor& dst, std::size_t row) {
  std::copy(src.begin(), src.end(), dst.row_span(row).begin());
}

std::vector<double> to_vector(std::span<const double> s) { return {s.begin(), s.end()}; }

// One optimizer step on loss (a scalar on tape) w.r.t. vars -> ptrs.
double apply_step(ad::Tape& tape, ad::Var loss, std::span<const ad::Var> vars,
                  const std::vector<Tensor*>& ptrs, Adam& opt, double max_grad_norm) {
  tape.backward(loss);
  std::vector<Tensor> g = gradients(tape, vars);
  const double norm = clip_grad_norm(g, max_grad_norm);
  if (!std::isfinite(norm)) throw NonFiniteError("non-finite gradient norm");
  opt.step(ptrs, g);
  return norm;
}

// -min(r A, clip(r) A) averaged, plus diagnostics.
PolicyLoss clipped_objective(ad::Tape& tape, ad::Var new_log_prob,
                             std::span<const double> old_log_prob,
                             std::span<const double> advantages, double clip_eps) {
  const std::size_t B = old_log_prob.size();
  if (advantages.size() != B || new_log_prob.value().size() != B) {
    throw std::invalid_argument("clipped objective: batch size mismatch");
  }
  const ad::Var ratio = ad::exp(ad::sub(new_log_prob, tape.constant(column(old_log_prob))));
  PolicyLoss out;
  double sum_ratio = 0.0;
  std::size_t clipped = 0;
  for (std::size_t i = 0; i < B; ++i) {
    const double r = ratio.value()[i];
    if (!std::isfinite(r)) {
      std::ostringstream msg;
      msg << "non-finite PPO ratio at minibatch row " << i << ": new log-prob "
          << new_log_prob.value()[i] << ", stored log-prob " << old_log_prob[i];
      throw NonFiniteError(msg.str());
    }
    sum_ratio += r;
    if (std::abs(r - 1.0) > clip_eps) ++clipped;
  }
  const ad::Var adv = tape.constant(column(advantages));
  const ad::Var surr1 = ad::mul(ratio, adv);
  const ad::Var surr2 = ad::mul(ad::clamp(ratio, 1.0 - clip_eps, 1.0 + clip_eps), adv);
  out.loss = ad::neg(ad::mean(ad::minimum(surr1, surr2)));
  out.stats.loss = out.loss.value().item();
  out.stats.mean_ratio = sum_ratio / static_cast<double>(B);
  out.stats.clip_fraction = static_cast<double>(clipped) / static_cast<double>(B);
  return out;
}

ad::Var critic_loss(const CriticNet& critic, std::span<const ad::Var> p, ad::Tape& tape,
                    const Tensor& input, std::span<const double> returns) {
  const ad::Var v = critic.value(p, tape.constant(input));
  return ad::mean(ad::square(ad::sub(v, tape.constant(column(returns)))));
}

Tensor critic_values(const CriticNet& critic, const Tensor& input) {
  ad::Tape tape(false);
  const auto p = ad::leaves(tape, critic.params);
  return critic.value(p, tape.constant(input)).value();
}

const DiffusionActor* as_diffusion(const Actor& a) {
  return dynamic_cast<const DiffusionActor*>(&a);
}

// Loss used for all behavior cloning.
ad::Var clone_loss(const Actor& actor, ad::Tape& tape, std::span<const ad::Var> body,
                   const Tensor& obs, const Tensor& action, Rng& rng) {
  if (const DiffusionActor* d = as_diffusion(actor)) {
    return bc_loss(bind_eps(d->net, body), tape, d->schedule, obs, action, rng);
  }
  const ad::Var f = actor.body_forward(tape, body, tape.constant(obs), Tensor{});
  if (actor.head.kind == HeadKind::softmax) {
    return ad::neg(ad::mean(categorical_log_prob(tape, actor.head.softmax, f, action)));
  }
  const double B = static_cast<double>(obs.rows());
  return ad::scale(ad::sum(ad::square(ad::sub(f, tape.constant(action)))), 1.0 / B);
}

}  // namespace

Algo parse_algo(const std::string& name) {
  if (name == "ncdpo") return Algo::ncdpo;
  if (name == "mlp_ppo") return Algo::mlp_ppo;
  if (name == "dppo") return Algo::dppo;
  throw std::invalid_argument("unknown algo '" + name + "' (expected ncdpo, mlp_ppo or dppo)");
}

std::string algo_name(Algo algo) {
  switch (algo) {
    case Algo::ncdpo: return "ncdpo";
    case Algo::mlp_ppo: return "mlp_ppo";
    case Algo::dppo: return "dppo";
  }
  return "?";
}

void PpoConfig::validate() const {
  if (!(gamma > 0.0 && gamma <= 1.0)) throw std::invalid_argument("ppo.gamma must be in (0, 1]");
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw std::invalid_argument("ppo.lambda must be in [0, 1]");
  if (!(clip_eps > 0.0 && clip_eps < 1.0)) throw std::invalid_argument("ppo.clip_eps must be in (0, 1)");
  if (minibatches < 1) throw std::invalid_argument("ppo.minibatches must be >= 1");
}

std::unique_ptr<Actor> make_actor(Algo algo, const ActorSpec& spec, const EnvConfig& env,
                                  std::uint64_t seed) {
  const auto probe = make_env(env);
  const std::size_t od = probe->obs_dim(), ad_ = probe->action_dim();
  Head head;
  if (env_is_discrete(env)) {
    head.kind = HeadKind::softmax;
    head.softmax = SoftmaxHead{spec.inv_temperature, env_num_agents(env), 3};
  } else {
    head.kind = HeadKind::gaussian;
    head.gaussian = GaussianHead::create(ad_, spec.init_log_sigma);
  }
  if (algo == Algo::mlp_ppo) {
    auto a = std::make_unique<MlpActor>();
    a->spec = MlpSpec{od, spec.width, spec.layers, spec.residual, ad_, spec.activation, 0.01};
    a->params = init_params(a->spec, seed);
    a->head = head;
    return a;
  }
  auto a = std::make_unique<DiffusionActor>();
  a->net = DenoisingNet::create(ad_, od, spec.width, spec.layers, spec.residual, spec.activation,
                                seed, spec.emb_dim);
  a->schedule = make_schedule(spec.K, spec.schedule);
  a->head = head;
  return a;
}

CriticNet make_critic(Algo algo, const CriticSpec& spec, const ActorSpec& actor,
                      const EnvConfig& env, std::uint64_t seed) {
  const auto probe = make_env(env);
  std::size_t in = probe->obs_dim();
  if (algo == Algo::dppo) in += actor.emb_dim + probe->action_dim();
  return CriticNet::create(in, spec.width, spec.layers, spec.residual, spec.activation, seed);
}

// ---------------------------------------------------------------------------
// Rollouts

VecEnv make_vec_env(const EnvConfig& config, std::size_t count, std::uint64_t seed) {
  VecEnv v;
  for (std::size_t e = 0; e < count; ++e) {
    v.envs.push_back(make_env(config));
    v.rngs.emplace_back(derive_seed(seed, e));
  }
  return v;
}

namespace {

struct EpisodeTracker {
  std::vector<std::vector<double>> obs;
  std::vector<double> ret;
  std::vector<std::uint8_t> success;

  explicit EpisodeTracker(VecEnv& venv) {
    const std::size_t E = venv.envs.size();
    obs.resize(E);
    ret.assign(E, 0.0);
    success.assign(E, 0);
    for (std::size_t e = 0; e < E; ++e) obs[e] = venv.envs[e]->reset(venv.rngs[e]);
  }

  Tensor batch_obs() const {
    Tensor s(Shape{obs.size(), obs[0].size()});
    for (std::size_t e = 0; e < obs.size(); ++e) copy_row(obs[e], s, e);
    return s;
  }
};

}  // namespace

RolloutBuffer collect_rollout(const Actor& actor, const CriticNet& critic, VecEnv& venv,
                              std::size_t steps_per_env) {
  const std::size_t E = venv.envs.size();
  if (E == 0) throw std::invalid_argument("collect_rollout: no environments");
  const std::size_t T = steps_per_env, N = E * T;
  const std::size_t od = actor.obs_dim(), A = actor.action_dim(), nd = actor.noise_dim();

  RolloutBuffer b;
  b.num_envs = E;
  b.steps = T;
  b.obs = Tensor(Shape{N, od});
  b.noise = Tensor(Shape{N, nd});
  b.f_out = Tensor(Shape{N, A});
  b.action = Tensor(Shape{N, A});
  b.log_prob.resize(N);
  b.reward.resize(N);
  b.value.resize(N);
  b.done.resize(N);
  b.success.resize(N);

  EpisodeTracker ep(venv);
  for (std::size_t t = 0; t < T; ++t) {
    const Tensor S = ep.batch_obs();
    Tensor noise(Shape{E, nd});
    for (std::size_t e = 0; e < E; ++e) {
      const Tensor row = actor.sample_noise(1, venv.rngs[e]);
      std::copy(row.data().begin(), row.data().end(), noise.row_span(e).begin());
    }
    const Tensor f = actor.pre_noise(S, noise);
    Tensor action(Shape{E, A});
    for (std::size_t e = 0; e < E; ++e) {
      const Tensor fe(Shape{1, A}, to_vector(f.row_span(e)));
      const PolicyOutput o = actor.head.kind == HeadKind::gaussian
                                 ? act_continuous(actor.head.gaussian, fe, venv.rngs[e])
                                 : act_discrete(actor.head.softmax, fe, venv.rngs[e]);
      std::copy(o.action.data().begin(), o.action.data().end(), action.row_span(e).begin());
    }
    const Tensor lp = log_prob(actor.head, f, action);
    const Tensor v = critic_values(critic, S);

    for (std::size_t e = 0; e < E; ++e) {
      const std::size_t i = b.index(t, e);
      std::copy(S.row_span(e).begin(), S.row_span(e).end(), b.obs.row_span(i).begin());
      std::copy(noise.row_span(e).begin(), noise.row_span(e).end(), b.noise.row_span(i).begin());
      std::copy(f.row_span(e).begin(), f.row_span(e).end(), b.f_out.row_span(i).begin());
      std::copy(action.row_span(e).begin(), action.row_span(e).end(),
                b.action.row_span(i).begin());
      b.log_prob[i] = lp[e];
      b.value[i] = v[e];

      StepResult r;
      try {
        r = venv.envs[e]->step(action.row_span(e));
      } catch (const std::exception& ex) {
        throw std::runtime_error("rollout aborted: env " + std::to_string(e) + " at step " +
                                 std::to_string(t) + ": " + ex.what());
      }
      b.reward[i] = r.reward;
      b.done[i] = r.done ? 1 : 0;
      b.success[i] = r.success ? 1 : 0;
      b.env_steps += r.substeps;
      ep.ret[e] += r.reward;
      ep.success[e] = ep.success[e] || r.success;
      if (r.done) {
        b.episode_returns.push_back(ep.ret[e]);
        b.episode_success.push_back(ep.success[e]);
        ep.ret[e] = 0.0;
        ep.success[e] = 0;
        ep.obs[e] = venv.envs[e]->reset(venv.rngs[e]);
      } else {
        ep.obs[e] = std::move(r.obs);
      }
    }
  }
  const Tensor tail = critic_values(critic, ep.batch_obs());
  b.bootstrap = to_vector(tail.data());
  b.partial_returns = ep.ret;
  return b;
}

// ---------------------------------------------------------------------------
// Advantages

GaeResult gae_discounts(std::span<const double> rewards, std::span<const double> values,
                        std::span<const std::uint8_t> dones, std::span<const double> gammas,
                        std::optional<double> bootstrap, double lambda) {
  const std::size_t T = rewards.size();
  if (values.size() != T || dones.size() != T || gammas.size() != T) {
    throw std::invalid_argument("gae: rewards, values, dones and discounts differ in length");
  }
  if (T > 0 && !dones[T - 1] && !bootstrap) {
    throw std::invalid_argument("gae: sequence ends mid-episode but no bootstrap value given");
  }
  GaeResult out;
  out.advantages.assign(T, 0.0);
  out.returns.assign(T, 0.0);
  double next_value = bootstrap.value_or(0.0);
  double next_adv = 0.0;
  for (std::size_t t = T; t-- > 0;) {
    const double live = dones[t] ? 0.0 : 1.0;
    const double delta = rewards[t] + gammas[t] * live * next_value - values[t];
    next_adv = delta + gammas[t] * lambda * live * next_adv;
    out.advantages[t] = next_adv;
    out.returns[t] = next_adv + values[t];
    next_value = values[t];
  }
  return out;
}

GaeResult gae(std::span<const double> rewards, std::span<const double> values,
              std::span<const std::uint8_t> dones, std::optional<double> bootstrap, double gamma,
              double lambda) {
  const std::vector<double> gammas(rewards.size(), gamma);
  return gae_discounts(rewards, values, dones, gammas, bootstrap, lambda);
}

void compute_advantages(RolloutBuffer& b, double gamma, double lambda) {
  if (b.bootstrap.size() != b.num_envs) {
    throw std::invalid_argument("compute_advantages: missing bootstrap values");
  }
  b.advantages.assign(b.size(), 0.0);
  b.returns.assign(b.size(), 0.0);
  std::vector<double> r(b.steps), v(b.steps);
  std::vector<std::uint8_t> d(b.steps);
  for (std::size_t e = 0; e < b.num_envs; ++e) {
    for (std::size_t t = 0; t < b.steps; ++t) {
      const std::size_t i = b.index(t, e);
      r[t] = b.reward[i];
      v[t] = b.value[i];
      d[t] = b.done[i];
    }
    const GaeResult g = gae(r, v, d, b.bootstrap[e], gamma, lambda);
    for (std::size_t t = 0; t < b.steps; ++t) {
      b.advantages[b.index(t, e)] = g.advantages[t];
      b.returns[b.index(t, e)] = g.returns[t];
    }
  }
}

// ---------------------------------------------------------------------------
// PPO

PolicyLoss ncdpo_loss(const Actor& actor, ad::Tape& tape, std::span<const ad::Var> params,
                      const Tensor& obs, const Tensor& noise, const Tensor& action,
                      std::span<const double> old_log_prob, std::span<const double> advantages,
                      double clip_eps) {
  const Actor::Eval e = actor.evaluate(tape, params, obs, noise, action);
  PolicyLoss out = clipped_objective(tape, e.log_prob, old_log_prob, advantages, clip_eps);
  out.entropy_mean = ad::mean(e.entropy);
  out.stats.entropy = out.entropy_mean.value().item();
  return out;
}

PpoStats ppo_update(Actor& actor, CriticNet& critic, Adam& actor_opt, Adam& critic_opt,
                    const RolloutBuffer& buffer, const PpoConfig& config, Rng& rng) {
  config.validate();
  if (buffer.advantages.size() != buffer.size()) {
    throw std::invalid_argument("ppo_update: advantages not computed");
  }
  PpoStats stats;
  std::size_t updates = 0;
  const auto actor_ptrs = actor.parameters();
  const auto critic_ptrs = [&] {
    std::vector<Tensor*> p;
    for (Tensor& t : critic.params) p.push_back(&t);
    return p;
  }();
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    for (const auto& idx : minibatch_split(buffer.size(), config.minibatches, rng)) {
      const Tensor obs = gather_rows(buffer.obs, idx);
      const Tensor noise = gather_rows(buffer.noise, idx);
      const Tensor action = gather_rows(buffer.action, idx);
      const std::vector<double> old_lp = gather(buffer.log_prob, idx);
      std::vector<double> adv = gather(buffer.advantages, idx);
      const std::vector<double> ret = gather(buffer.returns, idx);
      if (config.normalize_advantages) normalize(adv);

      {
        ad::Tape tape;
        const auto vars = ad::leaves(tape, values_of(actor_ptrs));
        PolicyLoss pl = ncdpo_loss(actor, tape, vars, obs, noise, action, old_lp, adv,
                                   config.clip_eps);
        ad::Var total = pl.loss;
        if (config.entropy_coef != 0.0) {
          total = ad::sub(total, ad::scale(pl.entropy_mean, config.entropy_coef));
        }
        if (!std::isfinite(total.value().item())) throw NonFiniteError("non-finite actor loss");
        apply_step(tape, total, vars, actor_ptrs, actor_opt, config.max_grad_norm);
        actor.clamp_head();
        stats.actor_loss += pl.stats.loss;
        stats.mean_ratio += pl.stats.mean_ratio;
        stats.clip_fraction += pl.stats.clip_fraction;
        stats.entropy += pl.stats.entropy;
      }
      {
        ad::Tape tape(config.value_coef != 0.0);
        const auto vars = ad::leaves(tape, critic.params);
        const ad::Var vl = critic_loss(critic, vars, tape, obs, ret);
        if (!std::isfinite(vl.value().item())) throw NonFiniteError("non-finite value loss");
        if (config.value_coef != 0.0) {
          apply_step(tape, ad::scale(vl, config.value_coef), vars, critic_ptrs, critic_opt,
                     config.max_grad_norm);
        }
        stats.value_loss += vl.value().item();
      }
      ++updates;
    }
  }
  if (updates > 0) {
    const double n = static_cast<double>(updates);
    stats.actor_loss /= n;
    stats.value_loss /= n;
    stats.mean_ratio /= n;
    stats.clip_fraction /= n;
    stats.entropy /= n;
  }
  return stats;
}

// ---------------------------------------------------------------------------
// Behavior cloning

std::vector<double> clone_epochs(Actor& actor, Adam& opt, const Tensor& obs,
                                 const Tensor& action, std::size_t epochs,
                                 std::size_t batch_size, Rng& rng) {
  if (obs.rows() != action.rows() || obs.rows() == 0) {
    throw std::invalid_argument("clone_epochs: need matching nonempty obs/action rows");
  }
  if (obs.cols() != actor.obs_dim() || action.cols() != actor.action_dim()) {
    throw std::invalid_argument("clone_epochs: data dims (" + std::to_string(obs.cols()) + ", " +
                                std::to_string(action.cols()) + ") do not match the actor (" +
                                std::to_string(actor.obs_dim()) + ", " +
                                std::to_string(actor.action_dim()) + ")");
  }
  std::vector<Tensor*> ptrs;
  for (Tensor& p : actor.body_params()) ptrs.push_back(&p);
  const std::size_t n = obs.rows();
  const std::size_t batches = std::max<std::size_t>(1, (n + batch_size - 1) / std::max<std::size_t>(1, batch_size));
  std::vector<double> trace;
  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    double total = 0.0;
    std::size_t count = 0;
    for (const auto& idx : minibatch_split(n, batches, rng)) {
      const Tensor s = gather_rows(obs, idx);
      const Tensor a = gather_rows(action, idx);
      ad::Tape tape;
      const auto vars = ad::leaves(tape, values_of(ptrs));
      const ad::Var loss = clone_loss(actor, tape, vars, s, a, rng);
      if (!std::isfinite(loss.value().item())) throw NonFiniteError("non-finite bc loss");
      apply_step(tape, loss, vars, ptrs, opt, 0.0);
      total += loss.value().item();
      ++count;
    }
    trace.push_back(total / static_cast<double>(count));
  }
  return trace;
}

std::vector<double> self_imitation_update(Actor& actor, Adam& opt,
                                          const RolloutBuffer& previous,
                                          const SelfImitationConfig& config, Rng& rng) {
  if (config.clone_epochs == 0) return {};
  return clone_epochs(actor, opt, previous.obs, previous.action, config.clone_epochs,
                      config.batch_size, rng);
}

double measure_bc_loss(const Actor& actor, const Tensor& obs, const Tensor& action,
                       std::uint64_t seed) {
  ad::Tape tape(false);
  const auto vars = ad::leaves(tape, actor.body_params());
  Rng rng(seed);
  return clone_loss(actor, tape, vars, obs, action, rng).value().item();
}

std::vector<double> pretrain(Actor& actor, const DemoSet& demos, const PretrainConfig& config,
                             std::uint64_t seed) {
  Adam opt = make_adam(AdamConfig{config.lr});
  Rng rng(seed);
  std::vector<double> trace;
  double best = INFINITY;
  std::size_t since_best = 0;
  for (std::size_t epoch = 0; epoch < config.max_epochs; ++epoch) {
    const double loss =
        clone_epochs(actor, opt, demos.obs, demos.actions, 1, config.batch_size, rng).front();
    trace.push_back(loss);
    if (loss < best * (1.0 - config.min_delta)) {
      best = loss;
      since_best = 0;
    } else if (++since_best >= config.patience) {
      break;
    }
  }
  return trace;
}

// ---------------------------------------------------------------------------
// Evaluation

EvalResult evaluate_policy(const Actor& actor, const EnvConfig& env, std::size_t episodes,
                           std::uint64_t seed, bool deterministic) {
  EvalResult out;
  if (episodes == 0) return out;
  VecEnv venv = make_vec_env(env, episodes, seed);
  EpisodeTracker ep(venv);
  std::vector<std::size_t> active(episodes);
  std::iota(active.begin(), active.end(), 0);
  while (!active.empty()) {
    const std::size_t B = active.size();
    Tensor S(Shape{B, actor.obs_dim()});
    Tensor noise(Shape{B, actor.noise_dim()});
    for (std::size_t i = 0; i < B; ++i) {
      copy_row(ep.obs[active[i]], S, i);
      const Tensor row = actor.sample_noise(1, venv.rngs[active[i]]);
      std::copy(row.data().begin(), row.data().end(), noise.row_span(i).begin());
    }
    Tensor action;
    if (deterministic) {
      action = actor.act_deterministic(S, noise);
    } else {
      const Tensor f = actor.pre_noise(S, noise);
      action = Tensor(f.shape());
      for (std::size_t i = 0; i < B; ++i) {
        const Tensor fi(Shape{1, f.cols()}, to_vector(f.row_span(i)));
        Rng& rng = venv.rngs[active[i]];
        const PolicyOutput o = actor.head.kind == HeadKind::gaussian
                                   ? act_continuous(actor.head.gaussian, fi, rng)
                                   : act_discrete(actor.head.softmax, fi, rng);
        std::copy(o.action.data().begin(), o.action.data().end(), action.row_span(i).begin());
      }
    }
    std::vector<std::size_t> still;
    for (std::size_t i = 0; i < B; ++i) {
      const std::size_t e = active[i];
      StepResult r = venv.envs[e]->step(action.row_span(i));
      ep.ret[e] += r.reward;
      ep.success[e] = ep.success[e] || r.success;
      ep.obs[e] = std::move(r.obs);
      if (!r.done) still.push_back(e);
    }
    active = std::move(still);
  }
  out.returns = ep.ret;
  out.mean_return = std::accumulate(ep.ret.begin(), ep.ret.end(), 0.0) / static_cast<double>(episodes);
  out.success_rate = std::accumulate(ep.success.begin(), ep.success.end(), 0.0) /
                     static_cast<double>(episodes);
  return out;
}

// ---------------------------------------------------------------------------
// DPPO baseline

std::vector<double> dppo_step_std(const NoiseSchedule& schedule, double min_std) {
  std::vector<double> out(schedule.K);
  for (std::size_t k = 0; k < schedule.K; ++k) out[k] = std::max(schedule.sigma[k], min_std);
  return out;
}

ad::Var gaussian_rows_log_prob(ad::Tape& tape, ad::Var mu, const Tensor& x,
                               std::span<const double> std_dev) {
  const std::size_t B = x.rows(), D = x.cols();
  if (mu.shape() != x.shape() || std_dev.size() != B) {
    throw std::invalid_argument("gaussian_rows_log_prob: shape mismatch " +
                                shape_string(mu.shape()) + " vs " + shape_string(x.shape()));
  }
  Tensor inv(Shape{B, 1}), norm(Shape{B, 1});
  for (std::size_t b = 0; b < B; ++b) {
    inv[b] = 1.0 / std_dev[b];
    norm[b] = -static_cast<double>(D) * (std::log(std_dev[b]) + kHalfLog2Pi);
  }
  const ad::Var z = ad::mul_col(ad::sub(tape.constant(x), mu), tape.constant(std::move(inv)));
  return ad::add(ad::sum_cols(ad::scale(ad::square(z), -0.5)), tape.constant(std::move(norm)));
}

Tensor dppo_critic_input(const Tensor& obs, std::span<const std::size_t> ks, const Tensor& a_k,
                         std::size_t emb_dim) {
  const std::size_t B = obs.rows(), od = obs.cols(), A = a_k.cols();
  Tensor out(Shape{B, od + emb_dim + A});
  for (std::size_t b = 0; b < B; ++b) {
    const Tensor emb = timestep_embedding(static_cast<double>(ks[b]), emb_dim);
    auto row = out.row_span(b);
    std::copy(obs.row_span(b).begin(), obs.row_span(b).end(), row.begin());
    std::copy(emb.data().begin(), emb.data().end(), row.begin() + static_cast<long>(od));
    std::copy(a_k.row_span(b).begin(), a_k.row_span(b).end(),
              row.begin() + static_cast<long>(od + emb_dim));
  }
  return out;
}

namespace {

Tensor dppo_mean(const DiffusionActor& actor, std::span<const ad::Var> body, ad::Tape& tape,
                 const Tensor& obs, const Tensor& a_k, std::span<const std::size_t> ks) {
  return denoise_mean_rows(bind_eps(actor.net, body), tape, tape.constant(a_k), ks,
                           tape.constant(obs), actor.schedule)
      .value();
}

}  // namespace

DppoBuffer collect_dppo_rollout(const DiffusionActor& actor, const CriticNet& critic,
                                VecEnv& venv, std::size_t steps_per_env, double min_std) {
  if (actor.head.kind != HeadKind::gaussian) {
    throw std::invalid_argument("dppo baseline supports continuous actions only");
  }
  const std::size_t E = venv.envs.size(), T = steps_per_env, K = actor.schedule.K;
  const std::size_t od = actor.obs_dim(), A = actor.action_dim();
  const std::size_t N = E * T * K;
  const std::vector<double> stds = dppo_step_std(actor.schedule, min_std);

  DppoBuffer b;
  b.num_envs = E;
  b.steps = T;
  b.K = K;
  b.obs = Tensor(Shape{N, od});
  b.a_k = Tensor(Shape{N, A});
  b.a_prev = Tensor(Shape{N, A});
  b.k.resize(N);
  b.std_dev.resize(N);
  b.log_prob.resize(N);
  b.value.resize(N);
  b.reward.assign(N, 0.0);
  b.gammas.assign(N, 1.0);
  b.done.assign(N, 0);
  b.env_obs = Tensor(Shape{E * T, od});
  b.env_action = Tensor(Shape{E * T, A});

  ad::Tape body_tape(false);
  const auto body = ad::leaves(body_tape, actor.net.params);
  EpisodeTracker ep(venv);
  for (std::size_t t = 0; t < T; ++t) {
    const Tensor S = ep.batch_obs();
    std::vector<NoiseStack> stacks;
    for (std::size_t e = 0; e < E; ++e) {
      stacks.push_back(NoiseStack::unflatten(actor.sample_noise(1, venv.rngs[e]), K));
    }
    Tensor a(Shape{E, A});
    for (std::size_t e = 0; e < E; ++e) {
      std::copy(stacks[e].a_K.data().begin(), stacks[e].a_K.data().end(), a.row_span(e).begin());
    }
    for (std::size_t k = K; k >= 1; --k) {
      const std::vector<std::size_t> ks(E, k);
      const std::vector<double> sd(E, stds[k - 1]);
      const Tensor v = critic_values(critic, dppo_critic_input(S, ks, a, actor.net.emb_dim));
      const Tensor mu = dppo_mean(actor, body, body_tape, S, a, ks);
      Tensor next(Shape{E, A});
      for (std::size_t e = 0; e < E; ++e)
        for (std::size_t j = 0; j < A; ++j)
          next.at(e, j) = mu.at(e, j) + stds[k - 1] * stacks[e].z[k - 1][j];
      ad::Tape lp_tape(false);
      const Tensor lp = gaussian_rows_log_prob(lp_tape, lp_tape.constant(mu), next, sd).value();
      for (std::size_t e = 0; e < E; ++e) {
        const std::size_t i = ((t * E + e) * K) + (K - k);
        std::copy(S.row_span(e).begin(), S.row_span(e).end(), b.obs.row_span(i).begin());
        std::copy(a.row_span(e).begin(), a.row_span(e).end(), b.a_k.row_span(i).begin());
        std::copy(next.row_span(e).begin(), next.row_span(e).end(), b.a_prev.row_span(i).begin());
        b.k[i] = k;
        b.std_dev[i] = stds[k - 1];
        b.log_prob[i] = lp[e];
        b.value[i] = v[e];
      }
      a = std::move(next);
    }
    for (std::size_t e = 0; e < E; ++e) {
      const std::size_t last = ((t * E + e) * K) + (K - 1);
      std::copy(S.row_span(e).begin(), S.row_span(e).end(), b.env_obs.row_span(t * E + e).begin());
      std::copy(a.row_span(e).begin(), a.row_span(e).end(),
                b.env_action.row_span(t * E + e).begin());
      StepResult r;
      try {
        r = venv.envs[e]->step(a.row_span(e));
      } catch (const std::exception& ex) {
        throw std::runtime_error("rollout aborted: env " + std::to_string(e) + " at step " +
                                 std::to_string(t) + ": " + ex.what());
      }
      b.reward[last] = r.reward;
      b.done[last] = r.done ? 1 : 0;
      b.env_steps += r.substeps;
      ep.ret[e] += r.reward;
      ep.success[e] = ep.success[e] || r.success;
      if (r.done) {
        b.episode_returns.push_back(ep.ret[e]);
        b.episode_success.push_back(ep.success[e]);
        ep.ret[e] = 0.0;
        ep.success[e] = 0;
        ep.obs[e] = venv.envs[e]->reset(venv.rngs[e]);
      } else {
        ep.obs[e] = std::move(r.obs);
      }
    }
  }
  // Next augmented state is (s_T, a^K) with a fresh a^K.
  const Tensor S = ep.batch_obs();
  Tensor aK(Shape{E, A});
  for (std::size_t e = 0; e < E; ++e) {
    const NoiseStack st = NoiseStack::unflatten(actor.sample_noise(1, venv.rngs[e]), K);
    std::copy(st.a_K.data().begin(), st.a_K.data().end(), aK.row_span(e).begin());
  }
  const std::vector<std::size_t> ks(E, K);
  b.bootstrap = to_vector(critic_values(critic, dppo_critic_input(S, ks, aK, actor.net.emb_dim)).data());
  b.partial_returns = ep.ret;
  return b;
}

void compute_dppo_advantages(DppoBuffer& b, double gamma, double lambda) {
  if (b.bootstrap.size() != b.num_envs) {
    throw std::invalid_argument("compute_dppo_advantages: missing bootstrap values");
  }
  const std::size_t L = b.steps * b.K;
  b.advantages.assign(b.size(), 0.0);
  b.returns.assign(b.size(), 0.0);
  std::vector<double> r(L), v(L), g(L);
  std::vector<std::uint8_t> d(L);
  std::vector<std::size_t> rows(L);
  for (std::size_t e = 0; e < b.num_envs; ++e) {
    for (std::size_t t = 0; t < b.steps; ++t) {
      for (std::size_t j = 0; j < b.K; ++j) {
        const std::size_t i = (t * b.num_envs + e) * b.K + j;
        const std::size_t q = t * b.K + j;
        rows[q] = i;
        r[q] = b.reward[i];
        v[q] = b.value[i];
        d[q] = b.done[i];
        // discount only when crossing into the next environment step
        g[q] = j + 1 == b.K ? gamma : 1.0;
      }
    }
    const GaeResult res = gae_discounts(r, v, d, g, b.bootstrap[e], lambda);
    for (std::size_t q = 0; q < L; ++q) {
      b.advantages[rows[q]] = res.advantages[q];
      b.returns[rows[q]] = res.returns[q];
    }
  }
}

namespace {

PpoStats dppo_update(DiffusionActor& actor, CriticNet& critic, Adam& actor_opt, Adam& critic_opt,
                     const DppoBuffer& buffer, const PpoConfig& config, Rng& rng) {
  PpoStats stats;
  std::size_t updates = 0;
  std::vector<Tensor*> actor_ptrs, critic_ptrs;
  for (Tensor& t : actor.net.params) actor_ptrs.push_back(&t);
  for (Tensor& t : critic.params) critic_ptrs.push_back(&t);
  const std::size_t A = actor.action_dim();
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    for (const auto& idx : minibatch_split(buffer.size(), config.minibatches, rng)) {
      const Tensor obs = gather_rows(buffer.obs, idx);
      const Tensor a_k = gather_rows(buffer.a_k, idx);
      const Tensor a_prev = gather_rows(buffer.a_prev, idx);
      std::vector<std::size_t> ks(idx.size());
      for (std::size_t i = 0; i < idx.size(); ++i) ks[i] = buffer.k[idx[i]];
      const std::vector<double> sd = gather(buffer.std_dev, idx);
      const std::vector<double> old_lp = gather(buffer.log_prob, idx);
      std::vector<double> adv = gather(buffer.advantages, idx);
      const std::vector<double> ret = gather(buffer.returns, idx);
      if (config.normalize_advantages) normalize(adv);
      {
        ad::Tape tape;
        const auto vars = ad::leaves(tape, actor.net.params);
        const ad::Var mu = denoise_mean_rows(bind_eps(actor.net, vars), tape,
                                             tape.constant(a_k), ks, tape.constant(obs),
                                             actor.schedule);
        const ad::Var lp = gaussian_rows_log_prob(tape, mu, a_prev, sd);
        PolicyLoss pl = clipped_objective(tape, lp, old_lp, adv, config.clip_eps);
        if (!std::isfinite(pl.loss.value().item())) throw NonFiniteError("non-finite actor loss");
        apply_step(tape, pl.loss, vars, actor_ptrs, actor_opt, config.max_grad_norm);
        stats.actor_loss += pl.stats.loss;
        stats.mean_ratio += pl.stats.mean_ratio;
        stats.clip_fraction += pl.stats.clip_fraction;
        double ent = 0.0;
        for (double s : sd) ent += static_cast<double>(A) * (0.5 + kHalfLog2Pi + std::log(s));
        stats.entropy += ent / static_cast<double>(sd.size());
      }
      {
        ad::Tape tape(config.value_coef != 0.0);
        const auto vars = ad::leaves(tape, critic.params);
        const ad::Var vl = critic_loss(critic, vars, tape,
                                       dppo_critic_input(obs, ks, a_k, actor.net.emb_dim), ret);
        if (!std::isfinite(vl.value().item())) throw NonFiniteError("non-finite value loss");
        if (config.value_coef != 0.0) {
          apply_step(tape, ad::scale(vl, config.value_coef), vars, critic_ptrs, critic_opt,
                     config.max_grad_norm);
        }
        stats.value_loss += vl.value().item();
      }
      ++updates;
    }
  }
  if (updates > 0) {
    const double n = static_cast<double>(updates);
    stats.actor_loss /= n;
    stats.value_loss /= n;
    stats.mean_ratio /= n;
    stats.clip_fraction /= n;
    stats.entropy /= n;
  }
  return stats;
}

void episode_stats(IterationMetrics& m, const std::vector<double>& returns,
                   const std::vector<std::uint8_t>& success, const std::vector<double>& partial) {
  const auto& src = returns.empty() ? partial : returns;
  m.mean_return = src.empty() ? 0.0
                              : std::accumulate(src.begin(), src.end(), 0.0) /
                                    static_cast<double>(src.size());
  m.success_rate = success.empty() ? 0.0
                                   : std::accumulate(success.begin(), success.end(), 0.0) /
                                         static_cast<double>(success.size());
}

bool finite_metrics(const IterationMetrics& m) {
  return std::isfinite(m.mean_return) && std::isfinite(m.actor_loss) &&
         std::isfinite(m.value_loss) && std::isfinite(m.bc_loss) && std::isfinite(m.mean_ratio);
}

bool finite_params(const TrainState& s) {
  for (const Tensor& p : s.actor->parameter_values())
    if (!p.all_finite()) return false;
  for (const Tensor& p : s.critic.params)
    if (!p.all_finite()) return false;
  return true;
}

}  // namespace

// ---------------------------------------------------------------------------
// Training loops

TrainState TrainState::clone() const {
  TrainState s;
  s.actor = actor ? actor->clone() : nullptr;
  s.critic = critic;
  s.actor_opt = actor_opt;
  s.critic_opt = critic_opt;
  s.clone_opt = clone_opt;
  s.iteration = iteration;
  s.env_steps = env_steps;
  return s;
}

TrainState make_train_state(std::unique_ptr<Actor> actor, CriticNet critic,
                            const TrainConfig& config) {
  TrainState s;
  s.actor = std::move(actor);
  s.critic = std::move(critic);
  s.actor_opt = make_adam(AdamConfig{config.ppo.actor_lr});
  AdamConfig c{config.ppo.critic_lr};
  c.weight_decay = config.ppo.critic_weight_decay;
  s.critic_opt = make_adamw(c);
  s.clone_opt = make_adam(AdamConfig{config.self_imitation.clone_lr});
  return s;
}

std::vector<IterationMetrics> train(const EnvConfig& env, const TrainConfig& config,
                                    TrainState& state, const IterationCallback& on_iteration) {
  config.ppo.validate();
  if (!state.actor) throw std::invalid_argument("train: no actor");
  const bool diffusion = as_diffusion(*state.actor) != nullptr;
  if ((config.algo == Algo::mlp_ppo) == diffusion) {
    throw std::invalid_argument("train: algo " + algo_name(config.algo) +
                                " does not match a " + state.actor->kind() + " actor");
  }
  if (config.num_envs == 0 || config.steps_per_env == 0) {
    throw std::invalid_argument("train: num_envs and steps_per_env must be positive");
  }
  std::vector<IterationMetrics> out;
  const auto start = std::chrono::steady_clock::now();
  while (state.env_steps < config.env_step_budget) {
    const std::size_t it = state.iteration;
    TrainState last_good = state.clone();
    IterationMetrics m;
    m.iteration = it + 1;
    try {
      VecEnv venv = make_vec_env(env, config.num_envs, derive_seed(config.seed, kCollect, it));
      Rng ppo_rng(derive_seed(config.seed, kPpo, it));
      std::size_t steps = 0;
      PpoStats st;
      if (config.algo == Algo::dppo) {
        auto& actor = static_cast<DiffusionActor&>(*state.actor);
        DppoBuffer buf = collect_dppo_rollout(actor, state.critic, venv, config.steps_per_env,
                                              config.dppo_min_std);
        compute_dppo_advantages(buf, config.ppo.gamma, config.ppo.lambda);
        st = dppo_update(actor, state.critic, state.actor_opt, state.critic_opt, buf, config.ppo,
                         ppo_rng);
        m.bc_loss = measure_bc_loss(actor, buf.env_obs, buf.env_action,
                                    derive_seed(config.seed, kBcMeasure, it));
        episode_stats(m, buf.episode_returns, buf.episode_success, buf.partial_returns);
        steps = buf.env_steps;
      } else {
        RolloutBuffer buf = collect_rollout(*state.actor, state.critic, venv, config.steps_per_env);
        compute_advantages(buf, config.ppo.gamma, config.ppo.lambda);
        st = ppo_update(*state.actor, state.critic, state.actor_opt, state.critic_opt, buf,
                        config.ppo, ppo_rng);
        m.bc_loss = measure_bc_loss(*state.actor, buf.obs, buf.action,
                                    derive_seed(config.seed, kBcMeasure, it));
        if (config.algo == Algo::ncdpo && config.self_imitation.clone_epochs > 0) {
          Rng clone_rng(derive_seed(config.seed, kClone, it));
          self_imitation_update(*state.actor, state.clone_opt, buf, config.self_imitation,
                                clone_rng);
        }
        episode_stats(m, buf.episode_returns, buf.episode_success, buf.partial_returns);
        steps = buf.env_steps;
      }
      m.actor_loss = st.actor_loss;
      m.value_loss = st.value_loss;
      m.mean_ratio = st.mean_ratio;
      m.clip_fraction = st.clip_fraction;
      m.entropy = st.entropy;
      if (!finite_metrics(m) || !finite_params(state)) {
        throw NonFiniteError("non-finite loss or parameters at iteration " + std::to_string(it + 1));
      }
      state.iteration = it + 1;
      state.env_steps += steps;
      m.env_steps = state.env_steps;
    } catch (const NonFiniteError&) {
      state = std::move(last_good);
      throw;
    }
    if (config.log_wall_time) {
      m.wall_time_s =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    }
    out.push_back(m);
    if (on_iteration) on_iteration(m, state);
  }
  return out;
}

std::vector<IterationMetrics> train_ncdpo(const EnvConfig& env, const TrainConfig& config,
                                          TrainState& state, const IterationCallback& cb) {
  TrainConfig c = config;
  c.algo = Algo::ncdpo;
  return train(env, c, state, cb);
}

std::vector<IterationMetrics> train_mlp_ppo(const EnvConfig& env, const TrainConfig& config,
                                            TrainState& state, const IterationCallback& cb) {
  TrainConfig c = config;
  c.algo = Algo::mlp_ppo;
  return train(env, c, state, cb);
}

std::vector<IterationMetrics> train_dppo_baseline(const EnvConfig& env, const TrainConfig& config,
                                                  TrainState& state, const IterationCallback& cb) {
  TrainConfig c = config;
  c.algo = Algo::dppo;
  return train(env, c, state, cb);
}

}  // namespace ncdpo
