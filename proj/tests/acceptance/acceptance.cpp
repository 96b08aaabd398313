// Acceptance suite: one PASS/FAIL line per criterion. `--criterion N` runs a
// single one (ctest registers each separately with its own timeout).

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <numbers>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "ncdpo/config.hpp"
#include "ncdpo/diffusion.hpp"
#include "ncdpo/envs.hpp"
#include "ncdpo/pipeline.hpp"
#include "ncdpo/policy.hpp"
#include "ncdpo/rl.hpp"
#include "scenarios.hpp"

using namespace ncdpo;

namespace {

using accept::Outcome;

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// ---------------------------------------------------------------------------
// 1. gradient through the whole denoising chain

double chain_gradient_error(const ScheduleParams& schedule) {
  EnvConfig env;
  ActorSpec as;
  as.width = 32;
  as.layers = 2;
  as.K = 5;
  as.init_log_sigma = -1.0;
  as.schedule = schedule;
  as.schedule.x0_clip = 0.0;
  auto actor = make_actor(Algo::ncdpo, as, env, 101);
  // Push the 0.01-gain output layer away from zero so every layer carries signal.
  Rng prng(102);
  for (Tensor& p : actor->body_params())
    for (double& x : p.data()) x += 0.05 * prng.normal();

  Rng rng(103);
  const std::size_t B = 6;
  Tensor s(Shape{B, actor->obs_dim()});
  rng.fill_normal(s.data());
  const Tensor noise = actor->sample_noise(B, rng);
  const PolicyOutput o = act_continuous(actor->head.gaussian, actor->pre_noise(s, noise), rng);
  std::vector<double> old(B), adv(B);
  for (std::size_t b = 0; b < B; ++b) {
    old[b] = o.log_prob[b] + 0.05 * rng.normal();  // ratios near 1, mostly unclipped
    adv[b] = rng.normal();
  }
  auto loss = [&](ad::Tape& tape, std::span<const ad::Var> p) {
    return ncdpo_loss(*actor, tape, p, s, noise, o.action, old, adv, 0.2).loss;
  };
  return ad::finite_diff_check(loss, actor->parameter_values(), 1e-5);
}

// Two chains: epsilon-prediction on the plain K-step linear schedule, and
// x0-prediction on the respaced default. (Unclipped epsilon-prediction on the
// respaced schedule compounds 1/sqrt(alpha_k) up to ~157x, and the h = 1e-5
// central difference itself is then off by ~1e-3; test_rl checks that this
// error is truncation, shrinking with h^2.)
Outcome gradient_check() {
  ScheduleParams plain;
  plain.reference_steps = 0;
  ScheduleParams x0;
  x0.prediction = Prediction::x0;
  const double e1 = chain_gradient_error(plain);
  const double e2 = chain_gradient_error(x0);
  return {e1 < 1e-4 && e2 < 1e-4,
          "max rel err eps " + fmt("%.3g", e1) + ", x0 " + fmt("%.3g", e2) + " (< 1e-4)"};
}

// ---------------------------------------------------------------------------
// 2. stored noise replays the executed transition exactly

Outcome noise_reuse() {
  EnvConfig env;
  ActorSpec as;
  as.width = 32;
  as.layers = 2;
  as.K = 5;
  as.init_log_sigma = -1.0;
  as.schedule.x0_clip = 1.0;
  auto actor = make_actor(Algo::ncdpo, as, env, 201);
  Rng prng(202);
  for (Tensor& p : actor->body_params())
    for (double& x : p.data()) x += 0.05 * prng.normal();
  CriticSpec cs;
  cs.width = 16;
  cs.layers = 1;
  const CriticNet critic = make_critic(Algo::ncdpo, cs, as, env, 203);

  VecEnv venv = make_vec_env(env, 8, 204);
  const RolloutBuffer buf = collect_rollout(*actor, critic, venv, 125);
  const std::size_t n = buf.size();

  const Tensor f = actor->pre_noise(buf.obs, buf.noise);
  const Tensor lp = log_prob(actor->head, f, buf.action);
  std::size_t mismatched = 0;
  for (std::size_t i = 0; i < n; ++i) {
    bool same = lp[i] == buf.log_prob[i];
    for (std::size_t j = 0; j < f.cols(); ++j) same = same && f.at(i, j) == buf.f_out.at(i, j);
    if (!same) ++mismatched;
  }
  // and the first PPO evaluation sees ratio exactly 1
  std::vector<double> adv(n, 1.0);
  ad::Tape tape;
  const auto p = ad::leaves(tape, actor->parameter_values());
  const PolicyLoss pl = ncdpo_loss(*actor, tape, p, buf.obs, buf.noise, buf.action,
                                   buf.log_prob, adv, 0.2);
  const bool ok = n >= 1000 && mismatched == 0 && pl.stats.mean_ratio == 1.0 &&
                  pl.stats.clip_fraction == 0.0;
  return {ok, std::to_string(n) + " transitions, " + std::to_string(mismatched) +
                  " mismatched, mean ratio " + fmt("%.17g", pl.stats.mean_ratio)};
}

// ---------------------------------------------------------------------------
// 3. GAE against the double sum

std::vector<double> brute_force_advantages(const std::vector<double>& r,
                                           const std::vector<double>& v,
                                           const std::vector<std::uint8_t>& d, double boot,
                                           double gamma, double lambda) {
  const std::size_t T = r.size();
  std::vector<double> adv(T, 0.0);
  for (std::size_t t = 0; t < T; ++t) {
    double acc = 0.0, w = 1.0;
    for (std::size_t u = t; u < T; ++u) {
      const double next = d[u] ? 0.0 : (u + 1 < T ? v[u + 1] : boot);
      acc += w * (r[u] + gamma * next - v[u]);
      if (d[u]) break;
      w *= gamma * lambda;
    }
    adv[t] = acc;
  }
  return adv;
}

Outcome gae_check() {
  Rng rng(301);
  double worst = 0.0;
  for (int ep = 0; ep < 1000; ++ep) {
    const std::size_t T = 1 + rng.index(20);
    const double gamma = rng.uniform(0.8, 1.0), lambda = rng.uniform(0.0, 1.0);
    std::vector<double> r(T), v(T);
    std::vector<std::uint8_t> d(T, 0);
    for (std::size_t t = 0; t < T; ++t) {
      r[t] = rng.normal();
      v[t] = rng.normal();
    }
    // half the episodes terminate, the rest are truncated and bootstrap
    const bool terminal = rng.bernoulli(0.5);
    d[T - 1] = terminal;
    const double boot = rng.normal();
    const GaeResult g =
        gae(r, v, d, terminal ? std::optional<double>{} : std::optional<double>{boot}, gamma,
            lambda);
    const auto ref = brute_force_advantages(r, v, d, boot, gamma, lambda);
    for (std::size_t t = 0; t < T; ++t) {
      worst = std::max(worst, std::abs(g.advantages[t] - ref[t]));
      worst = std::max(worst, std::abs(g.returns[t] - (ref[t] + v[t])));
    }
  }
  return {worst < 1e-12, "1000 episodes, max abs err " + fmt("%.3g", worst)};
}

// ---------------------------------------------------------------------------
// 4. scheduler identities

Outcome scheduler_identities() {
  Stopwatch clock;
  std::size_t cases = 0, bad = 0;
  for (ScheduleKind kind : {ScheduleKind::linear, ScheduleKind::cosine}) {
    for (std::size_t K : {1, 2, 5, 10, 20, 100}) {
      ScheduleParams p;
      p.kind = kind;
      const NoiseSchedule base = make_schedule(K, p);
      const NoiseSchedule one = apply_eta(base, 1.0);
      const NoiseSchedule zero = apply_eta(base, 0.0);
      for (std::size_t k = 0; k < K; ++k) {
        ++cases;
        if (one.beta[k] != base.beta[k]) ++bad;
        if (zero.beta[k] != 0.7) ++bad;
      }
      for (const NoiseSchedule* s : {&base, &one, &zero})
        if (s->sigma[0] != 0.0) ++bad;
    }
  }
  const double t = clock.seconds();
  return {bad == 0 && t < 1.0, std::to_string(cases) + " steps checked, " + std::to_string(bad) +
                                   " violations, " + fmt("%.3f s", t)};
}

// ---------------------------------------------------------------------------
// 10. policy heads

Outcome heads() {
  Stopwatch clock;
  Rng rng(1001);
  double sum_err = 0.0, lp_err = 0.0;
  std::size_t argmax_changes = 0;
  for (int c = 0; c < 1000; ++c) {
    SoftmaxHead h;
    h.num_agents = 1 + rng.index(4);
    h.num_actions = 3;
    h.inv_temperature = std::exp(rng.uniform(std::log(0.1), std::log(100.0)));
    Tensor logits(Shape{2, h.num_agents * 3});
    for (double& x : logits.data()) x = 3.0 * rng.normal();
    const Tensor probs = categorical_probs(h, logits);
    for (std::size_t r = 0; r < probs.rows(); ++r) {
      double s = 0.0;
      for (std::size_t j = 0; j < probs.cols(); ++j) s += probs.at(r, j);
      sum_err = std::max(sum_err, std::abs(s - 1.0));
    }
    const auto ref = argmax_actions(h, logits);
    for (double inv_t : {0.01, 1.0, 1e4}) {
      SoftmaxHead g = h;
      g.inv_temperature = inv_t;
      if (argmax_actions(g, logits) != ref) ++argmax_changes;
    }

    // Gaussian: log N(a; f, diag(sigma^2)) in closed form.
    const std::size_t D = 1 + rng.index(6);
    Head head;
    head.gaussian = GaussianHead::create(D, 0.0);
    Tensor f(Shape{1, D}), a(Shape{1, D});
    double expect = 0.0;
    for (std::size_t j = 0; j < D; ++j) {
      const double ls = rng.uniform(-3.0, 0.5);
      head.gaussian.log_sigma[j] = ls;
      f[j] = rng.normal();
      a[j] = f[j] + std::exp(ls) * rng.normal();
      const double z = (a[j] - f[j]) / std::exp(ls);
      expect += -0.5 * z * z - ls - 0.5 * std::log(2.0 * std::numbers::pi);
    }
    lp_err = std::max(lp_err, std::abs(log_prob(head, f, a)[0] - expect));
  }
  const double t = clock.seconds();
  const bool ok = sum_err < 1e-12 && argmax_changes == 0 && lp_err < 1e-12 && t < 5.0;
  return {ok, "prob sum err " + fmt("%.2g", sum_err) + ", argmax changes " +
                  std::to_string(argmax_changes) + ", log_prob err " + fmt("%.2g", lp_err) +
                  ", " + fmt("%.2f s", t)};
}

struct Criterion {
  int id;
  const char* name;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance checks"};
  std::vector<int> only;
  app.add_option("--criterion", only, "run only these criteria (1-10)");
  CLI11_PARSE(app, argc, argv);

  const std::vector<Criterion> all{
      {1, "gradient through the denoising chain", gradient_check},
      {2, "noise reuse", noise_reuse},
      {3, "gae", gae_check},
      {4, "scheduler identities", scheduler_identities},
      {5, "lqr fine-tuning", accept::lqr_fine_tuning},
      {6, "point mass dense from scratch", accept::point_mass_from_scratch},
      {7, "K robustness", accept::k_robustness},
      {8, "grid coordination", accept::grid_coordination},
      {9, "self-imitation", accept::self_imitation},
      {10, "policy heads", heads},
  };
  for (int id : only) {
    if (id < 1 || id > 10) {
      std::fprintf(stderr, "no criterion %d\n", id);
      return 1;
    }
  }
  int failures = 0;
  for (const Criterion& c : all) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    std::printf("criterion %d (%s): %s  %s\n", c.id, c.name, o.pass ? "PASS" : "FAIL",
                o.detail.c_str());
    std::fflush(stdout);
    if (!o.pass) ++failures;
  }
  return failures == 0 ? 0 : 1;
}
