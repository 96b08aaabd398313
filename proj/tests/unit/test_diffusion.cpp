#include <doctest.h>

#include <cmath>
#include <stdexcept>

#include "ncdpo/diffusion.hpp"

using namespace ncdpo;
using namespace ncdpo::ad;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = scale * rng.normal();
  return t;
}

EpsFn zero_eps() {
  return [](Tape& tape, Var a_k, std::span<const std::size_t>, Var) {
    return tape.constant(Tensor(a_k.shape(), 0.0));
  };
}

ScheduleParams direct_linear() {
  ScheduleParams p;
  p.reference_steps = 0;
  return p;
}

}  // namespace

TEST_CASE("constant beta products") {
  const NoiseSchedule s = schedule_from_betas({0.1, 0.1});
  CHECK(s.K == 2);
  CHECK(s.alpha_bar[0] == doctest::Approx(0.9).epsilon(1e-15));
  CHECK(s.alpha_bar[1] == doctest::Approx(0.81).epsilon(1e-15));
  CHECK(s.alpha_bar_at(0) == 1.0);
  CHECK(s.sigma[0] == 0.0);
  // posterior variance at k = 2: (1 - 0.9) / (1 - 0.81) * 0.1
  CHECK(s.sigma[1] == doctest::Approx(std::sqrt(0.1 / 0.19 * 0.1)));
}

TEST_CASE("K = 1 has zero sigma") {
  CHECK(make_schedule(1, {}).sigma[0] == 0.0);
  CHECK(make_schedule(1, direct_linear()).sigma[0] == 0.0);
  ScheduleParams cos;
  cos.kind = ScheduleKind::cosine;
  CHECK(make_schedule(1, cos).sigma[0] == 0.0);
}

TEST_CASE("linear alpha_bar_5 matches a direct product") {
  // Endpoints over K steps.
  const NoiseSchedule s = make_schedule(5, direct_linear());
  double prod = 1.0;
  for (int i = 0; i < 5; ++i) prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * i / 4.0);
  CHECK(std::abs(s.alpha_bar[4] - prod) < 1e-12);
  CHECK(s.beta.front() == doctest::Approx(1e-4));
  CHECK(s.beta.back() == doctest::Approx(0.02));

  // Respaced from 1000 fine steps: alpha_bar_5 is the fine product over all of them.
  const NoiseSchedule r = make_schedule(5, {});
  double fine = 1.0;
  for (int j = 0; j < 1000; ++j) fine *= 1.0 - (1e-4 + (0.02 - 1e-4) * j / 999.0);
  CHECK(std::abs(r.alpha_bar[4] - fine) < 1e-12);
  double fine_400 = 1.0;
  for (int j = 0; j < 400; ++j) fine_400 *= 1.0 - (1e-4 + (0.02 - 1e-4) * j / 999.0);
  CHECK(std::abs(r.alpha_bar[1] - fine_400) < 1e-12);
}

TEST_CASE("schedule invariants across kinds and K") {
  for (ScheduleKind kind : {ScheduleKind::linear, ScheduleKind::cosine}) {
    for (std::size_t K : {1, 2, 5, 10, 20, 100}) {
      ScheduleParams p;
      p.kind = kind;
      const NoiseSchedule s = make_schedule(K, p);
      CHECK(s.beta.size() == K);
      for (std::size_t i = 0; i < K; ++i) {
        CHECK(s.beta[i] > 0.0);
        CHECK(s.beta[i] < 1.0);
        CHECK(s.sigma[i] >= 0.0);
        if (i > 0) CHECK(s.alpha_bar[i] < s.alpha_bar[i - 1]);
        const double var = (1.0 - s.alpha_bar_at(i)) / (1.0 - s.alpha_bar_at(i + 1)) * s.beta[i];
        CHECK(s.sigma[i] * s.sigma[i] == doctest::Approx(var).epsilon(1e-12));
      }
    }
  }
  CHECK_THROWS_AS(make_schedule(0, {}), std::invalid_argument);
  CHECK_THROWS_AS(schedule_from_betas({0.1, 1.0}), std::invalid_argument);
  CHECK_THROWS_AS(schedule_from_betas({0.0}), std::invalid_argument);
  CHECK_THROWS_AS(parse_schedule_kind("quadratic"), std::invalid_argument);
}

TEST_CASE("eta transform") {
  const NoiseSchedule s = make_schedule(10, {});
  const NoiseSchedule one = apply_eta(s, 1.0);
  CHECK(one.beta == s.beta);
  const NoiseSchedule zero = apply_eta(s, 0.0);
  for (double b : zero.beta) CHECK(b == 0.7);
  CHECK(zero.sigma[0] == 0.0);

  const NoiseSchedule fixed = schedule_from_betas({0.7, 0.7, 0.7});
  for (double eta : {0.0, 0.3, 1.0, 2.5}) {
    for (double b : apply_eta(fixed, eta).beta) CHECK(b == doctest::Approx(0.7).epsilon(1e-15));
  }
  // monotone in beta_k for eta > 0; eta < 1 pulls every beta toward beta_base
  const NoiseSchedule half = apply_eta(s, 0.5);
  for (std::size_t i = 1; i < half.K; ++i) CHECK(half.beta[i] > half.beta[i - 1]);
  for (std::size_t i = 0; i < half.K; ++i) {
    CHECK(std::abs(half.beta[i] - 0.7) < std::abs(s.beta[i] - 0.7));
    CHECK((half.beta[i] - 0.7) * (s.beta[i] - 0.7) > 0.0);
  }
  CHECK_THROWS_AS(apply_eta(s, -1.0), std::invalid_argument);

  ScheduleParams p;
  p.eta = 0.0;
  CHECK(make_schedule(5, p).beta == apply_eta(make_schedule(5, {}), 0.0).beta);
}

TEST_CASE("q_sample closed form") {
  Rng rng(1);
  const Tensor a0 = random_tensor({3, 2}, rng), eps = random_tensor({3, 2}, rng);
  // all beta tiny: alpha_bar ~ 1 is not exact, so build the exact case by hand
  const NoiseSchedule s = schedule_from_betas({0.19});
  const Tensor zero(Shape{3, 2}, 0.0);
  const Tensor q = q_sample(s, zero, 1, eps);
  for (std::size_t i = 0; i < q.size(); ++i) CHECK(q[i] == doctest::Approx(std::sqrt(0.19) * eps[i]));
  const Tensor q0 = q_sample(s, a0, 1, zero);
  for (std::size_t i = 0; i < q.size(); ++i) CHECK(q0[i] == doctest::Approx(0.9 * a0[i]));
  CHECK_THROWS_AS(q_sample(s, a0, 2, eps), std::out_of_range);
  CHECK_THROWS_AS(q_sample(s, a0, 0, eps), std::out_of_range);
}

TEST_CASE("q_sample marginal moments") {
  const NoiseSchedule s = make_schedule(5, {});
  const std::size_t n = 100000;
  const std::size_t k = 2;
  const double a = 0.8;
  const Tensor a0(Shape{n, 1}, a);
  Rng rng(3);
  const Tensor eps = random_tensor({n, 1}, rng);
  const Tensor q = q_sample(s, a0, k, eps);
  double sum = 0.0, sq = 0.0;
  for (double v : q.data()) sum += v;
  const double mean = sum / n;
  for (double v : q.data()) sq += (v - mean) * (v - mean);
  const double var = sq / (n - 1);
  const double ab = s.alpha_bar[k - 1];
  const double true_var = 1.0 - ab;
  CHECK(std::abs(mean - std::sqrt(ab) * a) < 3.0 * std::sqrt(true_var / n));
  // std error of the sample variance of a normal: var * sqrt(2 / (n - 1))
  CHECK(std::abs(var - true_var) < 3.0 * true_var * std::sqrt(2.0 / (n - 1)));
}

TEST_CASE("noise stack") {
  Rng r1(5), r2(5);
  const NoiseStack a = sample_noise_stack(4, 3, 2, r1);
  const NoiseStack b = sample_noise_stack(4, 3, 2, r2);
  CHECK(a.K() == 4);
  CHECK(a.a_K == b.a_K);
  for (std::size_t k = 0; k < 4; ++k) CHECK(a.z[k] == b.z[k]);
  CHECK(sample_noise_stack(1, 3, 2, r1).z.size() == 1);
  CHECK_THROWS_AS(sample_noise_stack(0, 3, 2, r1), std::invalid_argument);

  const NoiseStack round = NoiseStack::unflatten(a.flatten(), 4);
  CHECK(round.a_K == a.a_K);
  for (std::size_t k = 0; k < 4; ++k) CHECK(round.z[k] == a.z[k]);
  CHECK_THROWS_AS(NoiseStack::unflatten(a.flatten(), 3), std::invalid_argument);

  // 10^5 entries: mean 0, variance 1
  Rng rng(6);
  const NoiseStack big = sample_noise_stack(4, 5000, 4, rng);
  const Tensor flat = big.flatten();
  REQUIRE(flat.size() == 100000);
  double sum = 0.0, sq = 0.0;
  for (double v : flat.data()) sum += v;
  const double n = static_cast<double>(flat.size());
  const double mean = sum / n;
  for (double v : flat.data()) sq += (v - mean) * (v - mean);
  const double var = sq / (n - 1);
  CHECK(std::abs(mean) < 3.0 / std::sqrt(n));
  CHECK(std::abs(var - 1.0) < 3.0 * std::sqrt(2.0 / (n - 1)));
}

TEST_CASE("denoise_mean arithmetic with a zero network") {
  Rng rng(7);
  const Tensor a = random_tensor({4, 3}, rng), s = random_tensor({4, 2}, rng);
  Tape tape(false);
  const NoiseSchedule sched = schedule_from_betas({0.19, 0.19});
  const Tensor mu = denoise_mean(zero_eps(), tape, tape.constant(a), 2, tape.constant(s), sched).value();
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(mu[i] == doctest::Approx(a[i] / 0.9));
  CHECK_THROWS_AS(denoise_mean(zero_eps(), tape, tape.constant(a), 3, tape.constant(s), sched),
                  std::out_of_range);
  CHECK_THROWS_AS(denoise_mean(zero_eps(), tape, tape.constant(a), 0, tape.constant(s), sched),
                  std::out_of_range);

  // beta -> 0 limit: mu -> a^k. beta must stay in (0, 1), so compare with a tolerance.
  const NoiseSchedule tiny = schedule_from_betas({1e-14});
  const Tensor id = denoise_mean(zero_eps(), tape, tape.constant(a), 1, tape.constant(s), tiny).value();
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(id[i] == doctest::Approx(a[i]).epsilon(1e-12));
}

TEST_CASE("clipped mean equals the unclipped mean inside the clip box") {
  const DenoisingNet net = DenoisingNet::create(2, 3, 16, 2, false, Activation::mish, 2);
  Rng rng(8);
  const Tensor a = random_tensor({6, 2}, rng, 0.01), s = random_tensor({6, 3}, rng);
  ScheduleParams p;
  const NoiseSchedule plain = make_schedule(5, p);
  p.x0_clip = 1e6;
  const NoiseSchedule boxed = make_schedule(5, p);
  Tape tape(false);
  const auto params = leaves(tape, net.params);
  const EpsFn eps = bind_eps(net, params);
  for (std::size_t k = 1; k <= 5; ++k) {
    const Tensor m1 = denoise_mean(eps, tape, tape.constant(a), k, tape.constant(s), plain).value();
    const Tensor m2 = denoise_mean(eps, tape, tape.constant(a), k, tape.constant(s), boxed).value();
    for (std::size_t i = 0; i < m1.size(); ++i) CHECK(m2[i] == doctest::Approx(m1[i]).epsilon(1e-9));
    // per-row variant agrees with the shared-k path
    const std::vector<std::size_t> ks(6, k);
    const Tensor m3 = denoise_mean_rows(eps, tape, tape.constant(a), ks, tape.constant(s), boxed).value();
    for (std::size_t i = 0; i < m1.size(); ++i) CHECK(m3[i] == doctest::Approx(m2[i]).epsilon(1e-12));
  }
}

TEST_CASE("denoise_mean gradient") {
  const DenoisingNet net = DenoisingNet::create(2, 3, 12, 2, false, Activation::mish, 5);
  Rng rng(9);
  const Tensor a = random_tensor({4, 2}, rng), s = random_tensor({4, 3}, rng);
  auto params = net.params;
  params[params.size() - 2] = random_tensor(params[params.size() - 2].shape(), rng, 0.3);
  const NoiseSchedule sched = make_schedule(5, direct_linear());
  const double err = finite_diff_check(
      [&](Tape& tape, std::span<const Var> p) {
        const EpsFn eps = bind_eps(net, p);
        return sum(square(denoise_mean(eps, tape, tape.constant(a), 3, tape.constant(s), sched)));
      },
      params, 1e-6);
  CHECK(err < 1e-5);
}

TEST_CASE("deterministic chain") {
  const DenoisingNet net = DenoisingNet::create(2, 3, 12, 2, false, Activation::mish, 5);
  Rng rng(10);
  const Tensor s = random_tensor({4, 3}, rng);
  const NoiseSchedule sched = make_schedule(5, {});
  const NoiseStack stack = sample_noise_stack(5, 4, 2, rng);
  auto run = [&](const NoiseSchedule& sc, const NoiseStack& st) {
    Tape tape(false);
    const auto p = leaves(tape, net.params);
    return denoise_deterministic(bind_eps(net, p), tape, sc, tape.constant(s), st).value();
  };
  const Tensor a0 = run(sched, stack);
  CHECK(a0 == run(sched, stack));
  CHECK(a0.shape() == Shape{4, 2});
  {
    Tape tape(false);
    const auto p = leaves(tape, net.params);
    CHECK_THROWS_AS(denoise_deterministic(bind_eps(net, p), tape, make_schedule(4, {}),
                                          tape.constant(s), stack),
                    std::invalid_argument);
  }

  // K = 1: the chain is exactly the mean (sigma_1 = 0), whatever z^1 is.
  const NoiseSchedule one = make_schedule(1, {});
  NoiseStack st1 = sample_noise_stack(1, 4, 2, rng);
  Tensor mu;
  {
    Tape tape(false);
    const auto p = leaves(tape, net.params);
    mu = denoise_mean(bind_eps(net, p), tape, tape.constant(st1.a_K), 1, tape.constant(s), one)
             .value();
  }
  CHECK(run(one, st1) == mu);
  st1.z[0].fill(100.0);
  CHECK(run(one, st1) == mu);

  // Fresh stacks give different actions.
  const NoiseStack other = sample_noise_stack(5, 4, 2, rng);
  CHECK_FALSE(run(sched, other) == a0);
}

TEST_CASE("gradient through the K = 5 chain") {
  const DenoisingNet net = DenoisingNet::create(2, 3, 12, 2, false, Activation::mish, 6);
  Rng rng(11);
  const Tensor s = random_tensor({3, 3}, rng);
  auto params = net.params;
  params[params.size() - 2] = random_tensor(params[params.size() - 2].shape(), rng, 0.3);
  const NoiseSchedule sched = make_schedule(5, direct_linear());
  const NoiseStack stack = sample_noise_stack(5, 3, 2, rng);
  const double err = finite_diff_check(
      [&](Tape& tape, std::span<const Var> p) {
        return sum(square(
            denoise_deterministic(bind_eps(net, p), tape, sched, tape.constant(s), stack)));
      },
      params, 1e-5);
  CHECK(err < 1e-4);
}

TEST_CASE("bc_loss with stub networks") {
  const NoiseSchedule sched = make_schedule(5, {});
  Rng rng(12);
  const std::size_t n = 10000, A = 2;
  const Tensor s = random_tensor({n, 1}, rng), a0 = random_tensor({n, A}, rng);

  // eps_theta = 0: per-row loss is ||eps||^2 ~ chi^2_A, mean A, variance 2A.
  {
    Tape tape(false);
    const double loss = bc_loss(zero_eps(), tape, sched, s, a0, rng).value().item();
    CHECK(std::abs(loss - A) < 3.0 * std::sqrt(2.0 * A / n));
  }
  // eps_theta recovers eps from the noisy input exactly.
  {
    const EpsFn oracle = [&](Tape& tape, Var a_k, std::span<const std::size_t> ks, Var) {
      Tensor e(a_k.shape());
      const Tensor& x = a_k.value();
      for (std::size_t b = 0; b < x.rows(); ++b) {
        const double ab = sched.alpha_bar_at(ks.size() == 1 ? ks[0] : ks[b]);
        for (std::size_t j = 0; j < x.cols(); ++j) {
          e.at(b, j) = (x.at(b, j) - std::sqrt(ab) * a0.at(b, j)) / std::sqrt(1.0 - ab);
        }
      }
      return tape.constant(std::move(e));
    };
    Tape tape(false);
    CHECK(bc_loss(oracle, tape, sched, s, a0, rng).value().item() < 1e-18);
  }
  Tape tape(false);
  CHECK_THROWS_AS(bc_loss(zero_eps(), tape, sched, Tensor(Shape{0, 1}), Tensor(Shape{0, A}), rng),
                  std::invalid_argument);
  CHECK_THROWS_AS(bc_loss(zero_eps(), tape, sched, random_tensor({3, 1}, rng), a0, rng),
                  std::invalid_argument);
}

TEST_CASE("bc_loss gradient") {
  const DenoisingNet net = DenoisingNet::create(2, 3, 12, 2, false, Activation::mish, 7);
  Rng rng(13);
  const Tensor s = random_tensor({8, 3}, rng), a0 = random_tensor({8, 2}, rng);
  const NoiseSchedule sched = make_schedule(5, {});
  const double err = finite_diff_check(
      [&](Tape& tape, std::span<const Var> p) {
        Rng fixed(99);  // same k and eps on every evaluation
        return bc_loss(bind_eps(net, p), tape, sched, s, a0, fixed);
      },
      net.params, 1e-5);
  CHECK(err < 1e-4);
}

TEST_CASE("x0 prediction: the network output is the clean action") {
  ScheduleParams p;
  p.prediction = Prediction::x0;
  const NoiseSchedule sched = make_schedule(5, p);
  Rng rng(14);
  const Tensor s = random_tensor({4, 1}, rng);
  const Tensor target = Tensor::matrix(4, 1, {0.3, -0.7, 0.0, 2.5});
  const EpsFn constant = [&](Tape& tape, Var, std::span<const std::size_t>, Var) {
    return tape.constant(target);
  };
  // k = 1 mean is exactly the prediction; with a clip it is clipped.
  const NoiseStack stack = sample_noise_stack(5, 4, 1, rng);
  {
    Tape tape(false);
    const Tensor a0 = denoise_deterministic(constant, tape, sched, tape.constant(s), stack).value();
    for (std::size_t i = 0; i < 4; ++i) CHECK(a0[i] == doctest::Approx(target[i]).epsilon(1e-12));
  }
  ScheduleParams pc = p;
  pc.x0_clip = 1.0;
  const NoiseSchedule clipped = make_schedule(5, pc);
  {
    Tape tape(false);
    const Tensor a0 = denoise_deterministic(constant, tape, clipped, tape.constant(s), stack).value();
    CHECK(a0[3] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(a0[1] == doctest::Approx(-0.7).epsilon(1e-12));
  }
  // intermediate mean: c1 x0 + c2 a^k
  {
    Tape tape(false);
    const Tensor ak = random_tensor({4, 1}, rng);
    const Tensor mu = denoise_mean(constant, tape, tape.constant(ak), 3, tape.constant(s), sched).value();
    const double ab = sched.alpha_bar[2], abp = sched.alpha_bar[1];
    const double c1 = std::sqrt(abp) * sched.beta[2] / (1 - ab);
    const double c2 = std::sqrt(sched.alpha[2]) * (1 - abp) / (1 - ab);
    for (std::size_t i = 0; i < 4; ++i) CHECK(mu[i] == doctest::Approx(c1 * target[i] + c2 * ak[i]));
    const std::vector<std::size_t> ks(4, 3);
    const Tensor rows = denoise_mean_rows(constant, tape, tape.constant(ak), ks, tape.constant(s), sched).value();
    for (std::size_t i = 0; i < 4; ++i) CHECK(rows[i] == doctest::Approx(mu[i]).epsilon(1e-12));
  }
  // bc_loss regresses onto a0
  {
    Tape tape(false);
    CHECK(bc_loss(constant, tape, sched, s, target, rng).value().item() == 0.0);
  }
  CHECK(parse_prediction(prediction_name(Prediction::x0)) == Prediction::x0);
  CHECK_THROWS_AS(parse_prediction("v"), std::invalid_argument);
}

TEST_CASE("x0 prediction gradient through the chain") {
  const DenoisingNet net = DenoisingNet::create(2, 3, 12, 2, false, Activation::mish, 8);
  Rng rng(15);
  const Tensor s = random_tensor({3, 3}, rng);
  auto params = net.params;
  params[params.size() - 2] = random_tensor(params[params.size() - 2].shape(), rng, 0.3);
  ScheduleParams p;
  p.prediction = Prediction::x0;
  const NoiseSchedule sched = make_schedule(5, p);
  const NoiseStack stack = sample_noise_stack(5, 3, 2, rng);
  const double err = finite_diff_check(
      [&](Tape& tape, std::span<const Var> pv) {
        return sum(square(
            denoise_deterministic(bind_eps(net, pv), tape, sched, tape.constant(s), stack)));
      },
      params, 1e-5);
  CHECK(err < 1e-4);
}
