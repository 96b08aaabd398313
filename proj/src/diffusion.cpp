#include "ncdpo/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace ncdpo {

ScheduleKind parse_schedule_kind(const std::string& name) {
  if (name == "linear") return ScheduleKind::linear;
  if (name == "cosine") return ScheduleKind::cosine;
  throw std::invalid_argument("unknown schedule kind '" + name + "'");
}

std::string schedule_kind_name(ScheduleKind kind) {
  return kind == ScheduleKind::linear ? "linear" : "cosine";
}

Prediction parse_prediction(const std::string& name) {
  if (name == "eps") return Prediction::eps;
  if (name == "x0") return Prediction::x0;
  throw std::invalid_argument("unknown prediction '" + name + "'");
}

std::string prediction_name(Prediction p) { return p == Prediction::eps ? "eps" : "x0"; }

namespace {

void finish(NoiseSchedule& s) {
  const std::size_t K = s.beta.size();
  s.K = K;
  s.alpha.resize(K);
  s.alpha_bar.resize(K);
  s.sigma.resize(K);
  double prod = 1.0;
  for (std::size_t i = 0; i < K; ++i) {
    const double b = s.beta[i];
    if (!(b > 0.0 && b < 1.0)) {
      throw std::invalid_argument("noise schedule: beta_" + std::to_string(i + 1) + " = " +
                                  std::to_string(b) + " outside (0, 1)");
    }
    s.alpha[i] = 1.0 - b;
    const double prev = prod;
    prod *= s.alpha[i];
    s.alpha_bar[i] = prod;
    // posterior variance; zero at k = 1 since alpha_bar_0 = 1
    s.sigma[i] = std::sqrt((1.0 - prev) / (1.0 - prod) * b);
  }
}

std::vector<double> linear_betas(std::size_t K, const ScheduleParams& p) {
  std::vector<double> beta(K);
  const std::size_t R = p.reference_steps;
  if (R == 0 || R == K) {
    for (std::size_t i = 0; i < K; ++i) {
      const double t = K == 1 ? 1.0 : static_cast<double>(i) / static_cast<double>(K - 1);
      beta[i] = p.beta_min + t * (p.beta_max - p.beta_min);
    }
    return beta;
  }
  if (R < K) throw std::invalid_argument("make_schedule: reference_steps < K");
  std::vector<double> fine_bar(R + 1, 1.0);
  for (std::size_t j = 1; j <= R; ++j) {
    const double t = R == 1 ? 1.0 : static_cast<double>(j - 1) / static_cast<double>(R - 1);
    fine_bar[j] = fine_bar[j - 1] * (1.0 - (p.beta_min + t * (p.beta_max - p.beta_min)));
  }
  double prev = 1.0;
  for (std::size_t k = 1; k <= K; ++k) {
    const double cur = fine_bar[(k * R) / K];
    beta[k - 1] = std::min(1.0 - cur / prev, p.max_beta);
    prev = cur;
  }
  return beta;
}

std::vector<double> cosine_betas(std::size_t K, const ScheduleParams& p) {
  auto f = [&](double t) {
    const double x = (t / static_cast<double>(K) + p.cosine_s) / (1.0 + p.cosine_s);
    const double c = std::cos(x * std::numbers::pi / 2.0);
    return c * c;
  };
  std::vector<double> beta(K);
  const double f0 = f(0.0);
  for (std::size_t k = 1; k <= K; ++k) {
    const double cur = f(static_cast<double>(k)) / f0;
    const double prev = f(static_cast<double>(k - 1)) / f0;
    beta[k - 1] = std::min(1.0 - cur / prev, p.max_beta);
  }
  return beta;
}

Tensor scaled(const Tensor& t, double c) {
  Tensor out(t.shape());
  for (std::size_t i = 0; i < t.size(); ++i) out[i] = c * t[i];
  return out;
}

void check_k(const char* op, const NoiseSchedule& s, std::size_t k) {
  if (k < 1 || k > s.K) {
    throw std::out_of_range(std::string(op) + ": k = " + std::to_string(k) + " outside 1.." +
                            std::to_string(s.K));
  }
}

}  // namespace

NoiseSchedule schedule_from_betas(std::vector<double> beta, const ScheduleParams& params) {
  if (beta.empty()) throw std::invalid_argument("make_schedule: K must be >= 1");
  NoiseSchedule s;
  s.params = params;
  s.params.eta = 1.0;
  s.base_beta = beta;
  s.beta = std::move(beta);
  finish(s);
  return s;
}

NoiseSchedule make_schedule(std::size_t K, const ScheduleParams& params) {
  if (K < 1) throw std::invalid_argument("make_schedule: K must be >= 1");
  std::vector<double> beta =
      params.kind == ScheduleKind::linear ? linear_betas(K, params) : cosine_betas(K, params);
  NoiseSchedule s = schedule_from_betas(std::move(beta), params);
  return params.eta == 1.0 ? s : apply_eta(s, params.eta);
}

NoiseSchedule apply_eta(const NoiseSchedule& schedule, double eta) {
  const double base = schedule.params.beta_base;
  if (!(base > 0.0)) throw std::invalid_argument("apply_eta: beta_base must be positive");
  if (!(eta >= 0.0)) throw std::invalid_argument("apply_eta: eta must be >= 0");
  NoiseSchedule out = schedule;
  out.params.eta = eta;
  for (std::size_t i = 0; i < out.base_beta.size(); ++i) {
    // eta = 1 is kept exact instead of round-tripping through pow
    out.beta[i] = eta == 1.0 ? out.base_beta[i]
                             : base * std::pow(out.base_beta[i] / base, eta);
  }
  finish(out);
  return out;
}

Tensor q_sample(const NoiseSchedule& schedule, const Tensor& a0, std::size_t k,
                const Tensor& eps) {
  check_k("q_sample", schedule, k);
  if (a0.shape() != eps.shape()) {
    throw std::invalid_argument("q_sample: shape mismatch " + shape_string(a0.shape()) + " vs " +
                                shape_string(eps.shape()));
  }
  const double ab = schedule.alpha_bar_at(k);
  const double c0 = std::sqrt(ab), c1 = std::sqrt(1.0 - ab);
  Tensor out(a0.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = c0 * a0[i] + c1 * eps[i];
  return out;
}

Tensor NoiseStack::flatten() const {
  const std::size_t B = a_K.rows(), A = a_K.cols(), K = z.size();
  Tensor out(Shape{B, (K + 1) * A});
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t j = 0; j < A; ++j) out.at(b, j) = a_K.at(b, j);
    for (std::size_t k = 0; k < K; ++k)
      for (std::size_t j = 0; j < A; ++j) out.at(b, (k + 1) * A + j) = z[k].at(b, j);
  }
  return out;
}

NoiseStack NoiseStack::unflatten(const Tensor& flat, std::size_t K) {
  const std::size_t B = flat.rows(), W = flat.cols();
  if (K < 1 || W % (K + 1) != 0) {
    throw std::invalid_argument("NoiseStack::unflatten: width " + std::to_string(W) +
                                " not divisible by K+1 = " + std::to_string(K + 1));
  }
  const std::size_t A = W / (K + 1);
  NoiseStack st;
  st.a_K = Tensor(Shape{B, A});
  st.z.assign(K, Tensor(Shape{B, A}));
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t j = 0; j < A; ++j) st.a_K.at(b, j) = flat.at(b, j);
    for (std::size_t k = 0; k < K; ++k)
      for (std::size_t j = 0; j < A; ++j) st.z[k].at(b, j) = flat.at(b, (k + 1) * A + j);
  }
  return st;
}

NoiseStack sample_noise_stack(std::size_t K, std::size_t batch, std::size_t action_dim,
                              Rng& rng) {
  if (K < 1) throw std::invalid_argument("sample_noise_stack: K must be >= 1");
  // Drawn row by row in the flattened layout.
  Tensor flat(Shape{batch, (K + 1) * action_dim});
  rng.fill_normal(flat.data());
  return NoiseStack::unflatten(flat, K);
}

EpsFn bind_eps(const DenoisingNet& net, std::span<const ad::Var> params) {
  std::vector<ad::Var> p(params.begin(), params.end());
  return [&net, p = std::move(p)](ad::Tape& tape, ad::Var a_k, std::span<const std::size_t> ks,
                                  ad::Var s) {
    const std::size_t batch = a_k.value().rows();
    if (ks.size() == 1) return net.eps(tape, p, a_k, ks[0], s);
    if (ks.size() != batch) throw std::invalid_argument("eps: one timestep per row required");
    Tensor emb(Shape{batch, net.emb_dim});
    for (std::size_t b = 0; b < batch; ++b) {
      const Tensor row = timestep_embedding(static_cast<double>(ks[b]), net.emb_dim);
      for (std::size_t j = 0; j < net.emb_dim; ++j) emb.at(b, j) = row[j];
    }
    const ad::Var parts[] = {a_k, tape.constant(std::move(emb)), s};
    return mlp_forward(net.spec, p, ad::concat_cols(parts));
  };
}

ad::Var denoise_mean(const EpsFn& eps, ad::Tape& tape, ad::Var a_k, std::size_t k, ad::Var s,
                     const NoiseSchedule& schedule) {
  check_k("denoise_mean", schedule, k);
  const std::size_t ks[] = {k};
  const ad::Var e = eps(tape, a_k, ks, s);
  const double beta = schedule.beta[k - 1];
  const double alpha = schedule.alpha[k - 1];
  const double ab = schedule.alpha_bar_at(k);
  const double ab_prev = schedule.alpha_bar_at(k - 1);
  const double clip = schedule.params.x0_clip;
  const bool eps_out = schedule.params.prediction == Prediction::eps;
  if (eps_out && clip <= 0.0) {
    // (a^k - beta / sqrt(1 - ab) eps) / sqrt(alpha)
    const double inv = 1.0 / std::sqrt(alpha);
    return ad::add(ad::scale(a_k, inv), ad::scale(e, -inv * beta / std::sqrt(1.0 - ab)));
  }
  ad::Var x0 = eps_out ? ad::add(ad::scale(a_k, 1.0 / std::sqrt(ab)),
                                 ad::scale(e, -std::sqrt(1.0 - ab) / std::sqrt(ab)))
                       : e;
  if (clip > 0.0) x0 = ad::clamp(x0, -clip, clip);
  const double c1 = std::sqrt(ab_prev) * beta / (1.0 - ab);
  const double c2 = std::sqrt(alpha) * (1.0 - ab_prev) / (1.0 - ab);
  return ad::add(ad::scale(x0, c1), ad::scale(a_k, c2));
}

ad::Var denoise_mean_rows(const EpsFn& eps, ad::Tape& tape, ad::Var a_k,
                          std::span<const std::size_t> ks, ad::Var s,
                          const NoiseSchedule& schedule) {
  const std::size_t B = a_k.value().rows();
  if (ks.size() != B) throw std::invalid_argument("denoise_mean_rows: one timestep per row");
  for (std::size_t k : ks) check_k("denoise_mean_rows", schedule, k);
  const ad::Var e = eps(tape, a_k, ks, s);
  auto column = [&](auto coeff) {
    Tensor c(Shape{B, 1});
    for (std::size_t b = 0; b < B; ++b) c[b] = coeff(ks[b]);
    return tape.constant(std::move(c));
  };
  const double clip = schedule.params.x0_clip;
  const bool eps_out = schedule.params.prediction == Prediction::eps;
  if (eps_out && clip <= 0.0) {
    const ad::Var ca = column([&](std::size_t k) { return 1.0 / std::sqrt(schedule.alpha[k - 1]); });
    const ad::Var ce = column([&](std::size_t k) {
      return -schedule.beta[k - 1] /
             (std::sqrt(schedule.alpha[k - 1]) * std::sqrt(1.0 - schedule.alpha_bar_at(k)));
    });
    return ad::add(ad::mul_col(a_k, ca), ad::mul_col(e, ce));
  }
  const ad::Var c1 = column([&](std::size_t k) {
    return std::sqrt(schedule.alpha_bar_at(k - 1)) * schedule.beta[k - 1] /
           (1.0 - schedule.alpha_bar_at(k));
  });
  const ad::Var c2 = column([&](std::size_t k) {
    return std::sqrt(schedule.alpha[k - 1]) * (1.0 - schedule.alpha_bar_at(k - 1)) /
           (1.0 - schedule.alpha_bar_at(k));
  });
  ad::Var x0 = e;
  if (eps_out) {
    const ad::Var xa =
        column([&](std::size_t k) { return 1.0 / std::sqrt(schedule.alpha_bar_at(k)); });
    const ad::Var xe = column([&](std::size_t k) {
      return -std::sqrt(1.0 - schedule.alpha_bar_at(k)) / std::sqrt(schedule.alpha_bar_at(k));
    });
    x0 = ad::add(ad::mul_col(a_k, xa), ad::mul_col(e, xe));
  }
  if (clip > 0.0) x0 = ad::clamp(x0, -clip, clip);
  return ad::add(ad::mul_col(x0, c1), ad::mul_col(a_k, c2));
}

ad::Var denoise_deterministic(const EpsFn& eps, ad::Tape& tape, const NoiseSchedule& schedule,
                              ad::Var s, const NoiseStack& stack) {
  if (stack.K() != schedule.K) {
    throw std::invalid_argument("denoise_deterministic: noise stack has K = " +
                                std::to_string(stack.K()) + ", schedule has K = " +
                                std::to_string(schedule.K));
  }
  ad::Var a = tape.constant(stack.a_K);
  for (std::size_t k = schedule.K; k >= 1; --k) {
    a = denoise_mean(eps, tape, a, k, s, schedule);
    const double sig = schedule.sigma[k - 1];
    if (sig != 0.0) a = ad::add(a, tape.constant(scaled(stack.z[k - 1], sig)));
  }
  return a;
}

ad::Var bc_loss(const EpsFn& eps, ad::Tape& tape, const NoiseSchedule& schedule, const Tensor& s,
                const Tensor& a0, Rng& rng) {
  const std::size_t B = a0.rows(), A = a0.cols();
  if (B == 0 || a0.empty()) throw std::invalid_argument("bc_loss: empty batch");
  if (s.rows() != B) {
    throw std::invalid_argument("bc_loss: " + std::to_string(s.rows()) + " states vs " +
                                std::to_string(B) + " actions");
  }
  std::vector<std::size_t> ks(B);
  Tensor noise(Shape{B, A});
  Tensor noisy(Shape{B, A});
  for (std::size_t b = 0; b < B; ++b) {
    ks[b] = 1 + rng.index(schedule.K);
    const double ab = schedule.alpha_bar_at(ks[b]);
    for (std::size_t j = 0; j < A; ++j) {
      noise.at(b, j) = rng.normal();
      noisy.at(b, j) = std::sqrt(ab) * a0.at(b, j) + std::sqrt(1.0 - ab) * noise.at(b, j);
    }
  }
  const ad::Var pred = eps(tape, tape.constant(std::move(noisy)), ks, tape.constant(s));
  const ad::Var target = schedule.params.prediction == Prediction::eps
                             ? tape.constant(std::move(noise))
                             : tape.constant(a0);
  const ad::Var diff = ad::sub(pred, target);
  return ad::scale(ad::sum(ad::square(diff)), 1.0 / static_cast<double>(B));
}

}  // namespace ncdpo
