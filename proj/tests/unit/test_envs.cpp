#include <cmath>
#include <filesystem>
#include <numeric>

#include "doctest.h"
#include "ncdpo/envs.hpp"

using namespace ncdpo;

namespace {

double mean(const std::vector<double>& v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double success_rate(const DemoSet& d) {
  double s = 0;
  for (bool b : d.episode_success) s += b;
  return s / static_cast<double>(d.episode_success.size());
}

}  // namespace

TEST_CASE("point mass at goal with zero velocity has zero dense reward") {
  EnvConfig c;
  PointMassEnv env(c);
  env.set_state({0.3, -0.2}, {0, 0}, {0.3, -0.2});
  const double a[] = {0.0, 0.0};
  const StepResult r = env.step(a);
  CHECK(r.reward == 0.0);
  CHECK(r.success);
}

TEST_CASE("point mass dynamics and reward signs") {
  EnvConfig c;
  PointMassEnv env(c);
  env.set_state({0, 0}, {0, 0}, {1, 1});
  const double a[] = {5.0, -0.5};  // first component clipped to 1
  const StepResult r = env.step(a);
  CHECK(env.velocity()[0] == doctest::Approx(0.1));
  CHECK(env.velocity()[1] == doctest::Approx(-0.05));
  CHECK(env.position()[0] == doctest::Approx(0.01));
  CHECK(r.reward <= 0.0);

  c.reward_mode = RewardMode::sparse;
  PointMassEnv sparse(c);
  Rng rng(1);
  sparse.reset(rng);
  for (int i = 0; i < 64 && !sparse.done(); ++i) {
    const double b[] = {rng.uniform(-1, 1), rng.uniform(-1, 1)};
    const StepResult s = sparse.step(b);
    CHECK((s.reward == 0.0 || s.reward == 1.0));
  }
  CHECK(sparse.done());
  CHECK_THROWS_AS(sparse.step(a), std::logic_error);
}

TEST_CASE("lqr fixed point and optimum") {
  EnvConfig c;
  c.kind = EnvKind::lqr;
  LqrEnv env(c);
  env.set_state(0.0);
  const double a[] = {0.0};
  const StepResult r = env.step(a);
  CHECK(r.reward == 0.0);
  CHECK(env.state() == 0.0);

  EnvConfig one = c;
  one.horizon = 1;
  CHECK(lqr_optimal_return(one, 1.0) == -1.0);
  CHECK(lqr_optimal_return(c, 0.0) == 0.0);
}

TEST_CASE("lqr optimum agrees with a grid search over action sequences") {
  EnvConfig c;
  c.kind = EnvKind::lqr;
  const std::size_t H = c.effective_horizon();
  const double s0 = 1.0;
  auto rollout = [&](const std::vector<double>& acts) {
    double s = s0, ret = 0.0;
    for (double a : acts) {
      ret -= s * s + a * a;
      s += a;
    }
    return ret;
  };
  // Coordinate ascent on a discretized grid with successively finer steps.
  std::vector<double> acts(H, 0.0);
  double best = rollout(acts);
  for (double step : {0.1, 0.01, 0.001, 0.0001}) {
    for (int sweep = 0; sweep < 200; ++sweep) {
      bool improved = false;
      for (std::size_t t = 0; t < H; ++t) {
        for (double delta : {-step, step}) {
          acts[t] += delta;
          const double v = rollout(acts);
          if (v > best + 1e-15) {
            best = v;
            improved = true;
          } else {
            acts[t] -= delta;
          }
        }
      }
      if (!improved) break;
    }
  }
  CHECK(std::abs(best - lqr_optimal_return(c, s0)) < 1e-3);
}

TEST_CASE("grid coord success on distinct targets") {
  EnvConfig c;
  c.kind = EnvKind::grid_coord;
  GridCoordEnv env(c);
  CHECK(env.targets() == std::vector<int>{1, 2, 3});
  env.set_positions({3, 1, 2});
  const double stay[] = {0, 1, 0, 0, 1, 0, 0, 1, 0};
  const StepResult r = env.step(stay);
  CHECK(r.reward == 1.0);
  CHECK(r.done);

  Rng rng(0);
  env.reset(rng);
  CHECK(env.positions() == std::vector<int>{2, 2, 2});
  const double left_all[] = {1, 0, 0, 1, 0, 0, 1, 0, 0};
  for (int i = 0; i < 5; ++i) env.step(left_all);
  CHECK(env.positions() == std::vector<int>{0, 0, 0});
}

TEST_CASE("replaying an action sequence reproduces rewards") {
  for (EnvKind kind : {EnvKind::point_mass, EnvKind::lqr, EnvKind::grid_coord}) {
    EnvConfig c;
    c.kind = kind;
    auto env = make_env(c);
    Rng act_rng(9);
    std::vector<std::vector<double>> actions;
    std::vector<double> rewards;
    Rng r1(4);
    env->reset(r1);
    while (!env->done()) {
      std::vector<double> a(env->action_dim());
      for (double& x : a) x = act_rng.uniform(-1, 1);
      actions.push_back(a);
      rewards.push_back(env->step(a).reward);
    }
    Rng r2(4);
    env->reset(r2);
    for (std::size_t i = 0; i < actions.size(); ++i) CHECK(env->step(actions[i]).reward == rewards[i]);
  }
}

TEST_CASE("chunked env sums rewards and stops at termination") {
  EnvConfig c;
  c.kind = EnvKind::lqr;
  c.chunk = 4;
  auto env = make_env(c);
  CHECK(env->action_dim() == 4);
  Rng rng(2);
  env->reset(rng);
  std::size_t steps = 0, substeps = 0;
  while (!env->done()) {
    const double a[] = {0.1, 0.1, 0.1, 0.1};
    substeps += env->step(a).substeps;
    ++steps;
  }
  CHECK(steps == 3);  // 10 = 4 + 4 + 2
  CHECK(substeps == 10);

  EnvConfig base = c;
  base.chunk = 1;
  LqrEnv plain(base);
  plain.set_state(0.5);
  auto chunked = ChunkedEnv(std::make_unique<LqrEnv>(plain), 2);
  Rng unused(0);
  chunked.reset(unused);
  static_cast<LqrEnv&>(chunked.base()).set_state(0.5);
  const double two[] = {0.2, -0.3};
  const StepResult r = chunked.step(two);
  double expect = 0.0, s = 0.5;
  for (double a : {0.2, -0.3}) {
    expect -= s * s + a * a;
    s += a;
  }
  CHECK(r.reward == doctest::Approx(expect));
}

TEST_CASE("expert point mass demos reach the goal region") {
  EnvConfig c;
  Rng rng(10);
  const DemoSet d = make_demonstrations(c, DemoQuality::expert, 200, rng);
  CHECK(success_rate(d) >= 0.95);
  CHECK(d.size() == 200 * 64);
}

TEST_CASE("medium demos sit between random and expert") {
  for (EnvKind kind : {EnvKind::point_mass, EnvKind::lqr}) {
    EnvConfig c;
    c.kind = kind;
    Rng rng(11);
    const double rnd = mean(make_demonstrations(c, DemoQuality::random, 100, rng).episode_returns);
    const double med = mean(make_demonstrations(c, DemoQuality::medium, 100, rng).episode_returns);
    const double exp = mean(make_demonstrations(c, DemoQuality::expert, 100, rng).episode_returns);
    INFO(env_kind_name(kind), " random ", rnd, " medium ", med, " expert ", exp);
    CHECK(rnd < med);
    CHECK(med < exp);
  }
}

TEST_CASE("grid mixture demos are bimodal at the shared start state") {
  EnvConfig c;
  c.kind = EnvKind::grid_coord;
  Rng rng(12);
  const DemoSet d = make_demonstrations(c, DemoQuality::mixture, 1000, rng);
  int mode_a = 0, mode_b = 0;
  for (std::size_t start : d.episode_starts) {
    const auto a = d.actions.row_span(start);
    // agent 0 block [0..3), agent 2 block [6..9)
    if (a[0] == 1.0 && a[8] == 1.0) ++mode_a;
    if (a[2] == 1.0 && a[6] == 1.0) ++mode_b;
  }
  CHECK(mode_a >= 250);
  CHECK(mode_b >= 250);
  const double sr = success_rate(d);
  CHECK(sr > 0.5);
  CHECK(sr < 0.95);
}

TEST_CASE("demo files round-trip with their spec hash") {
  EnvConfig c;
  c.kind = EnvKind::point_mass;
  c.chunk = 4;
  Rng rng(13);
  const DemoSet d = make_demonstrations(c, DemoQuality::medium, 3, rng);
  const auto path = std::filesystem::temp_directory_path() / "ncdpo_demo_roundtrip.bin";
  save_demos(d, path);
  const DemoSet back = load_demos(path);
  CHECK(back.spec_hash == c.spec_hash());
  CHECK(back.chunk == 4);
  CHECK(back.obs == d.obs);
  CHECK(back.actions == d.actions);
  std::filesystem::remove(path);

  EnvConfig other = c;
  other.chunk = 1;
  CHECK(other.spec_hash() != c.spec_hash());
  CHECK_THROWS(make_demonstrations(c, DemoQuality::expert, 0, rng));
  CHECK_THROWS(parse_env_kind("mujoco"));
}
