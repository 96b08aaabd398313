#include "ncdpo/nets.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>

#include "ncdpo/rng.hpp"

namespace ncdpo {

Activation parse_activation(const std::string& name) {
  if (name == "mish") return Activation::mish;
  if (name == "tanh") return Activation::tanh;
  throw std::invalid_argument("unknown activation '" + name + "'");
}

std::string activation_name(Activation a) { return a == Activation::mish ? "mish" : "tanh"; }

void MlpSpec::validate() const {
  if (input_dim == 0 || output_dim == 0 || hidden_width == 0) {
    throw std::invalid_argument("MlpSpec: zero width (input " + std::to_string(input_dim) +
                                ", hidden " + std::to_string(hidden_width) + ", output " +
                                std::to_string(output_dim) + ")");
  }
  if (num_layers < 1) throw std::invalid_argument("MlpSpec: num_layers must be >= 1");
}

namespace {

// Orthogonal [fan_in, fan_out] matrix. Wide matrices get orthonormal rows
// rescaled so every layer has entry std ~ 1/sqrt(fan_in).
Tensor orthogonal(std::size_t fan_in, std::size_t fan_out, double gain, Rng& rng) {
  const bool tall = fan_in >= fan_out;
  const Eigen::Index r = static_cast<Eigen::Index>(tall ? fan_in : fan_out);
  const Eigen::Index c = static_cast<Eigen::Index>(tall ? fan_out : fan_in);
  Eigen::MatrixXd g(r, c);
  for (Eigen::Index j = 0; j < c; ++j)
    for (Eigen::Index i = 0; i < r; ++i) g(i, j) = rng.normal();
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(r, c);
  const Eigen::MatrixXd rr = qr.matrixQR().topLeftCorner(c, c);
  for (Eigen::Index j = 0; j < c; ++j) {
    if (rr(j, j) < 0) q.col(j) = -q.col(j);
  }
  const double wide_scale =
      tall ? 1.0 : std::sqrt(static_cast<double>(fan_out) / static_cast<double>(fan_in));
  Tensor w(Shape{fan_in, fan_out});
  for (std::size_t i = 0; i < fan_in; ++i)
    for (std::size_t j = 0; j < fan_out; ++j) {
      const double v = tall ? q(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j))
                            : q(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i));
      w.at(i, j) = gain * wide_scale * v;
    }
  return w;
}

ad::Var activate(Activation a, ad::Var x) {
  return a == Activation::mish ? ad::mish(x) : ad::tanh(x);
}

}  // namespace

std::vector<Tensor> init_params(const MlpSpec& spec, std::uint64_t seed) {
  spec.validate();
  std::vector<Tensor> params;
  std::size_t fan_in = spec.input_dim;
  for (std::size_t layer = 0; layer <= spec.num_layers; ++layer) {
    const bool last = layer == spec.num_layers;
    const std::size_t fan_out = last ? spec.output_dim : spec.hidden_width;
    Rng rng(derive_seed(seed, 0x1a7e5, layer));
    params.push_back(orthogonal(fan_in, fan_out, last ? spec.output_gain : 1.0, rng));
    params.emplace_back(Shape{1, fan_out}, 0.0);
    fan_in = fan_out;
  }
  return params;
}

std::size_t count_params(const std::vector<Tensor>& params) {
  std::size_t n = 0;
  for (const Tensor& p : params) n += p.size();
  return n;
}

ad::Var mlp_forward(const MlpSpec& spec, std::span<const ad::Var> p, ad::Var x) {
  const std::size_t expected = 2 * (spec.num_layers + 1);
  if (p.size() != expected) {
    throw std::invalid_argument("mlp_forward: expected " + std::to_string(expected) +
                                " parameter tensors, got " + std::to_string(p.size()));
  }
  ad::Var h = activate(spec.activation, ad::add_row(ad::matmul(x, p[0]), p[1]));
  for (std::size_t layer = 1; layer < spec.num_layers; ++layer) {
    ad::Var z = activate(spec.activation,
                         ad::add_row(ad::matmul(h, p[2 * layer]), p[2 * layer + 1]));
    h = spec.residual ? ad::add(h, z) : z;
  }
  return ad::add_row(ad::matmul(h, p[expected - 2]), p[expected - 1]);
}

Tensor timestep_embedding(double k, std::size_t dim, std::size_t batch) {
  if (dim == 0 || dim % 2 != 0) throw std::invalid_argument("timestep_embedding: dim must be even");
  Tensor row(Shape{1, dim});
  for (std::size_t i = 0; i < dim / 2; ++i) {
    const double w = std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(dim));
    row[2 * i] = std::sin(k * w);
    row[2 * i + 1] = std::cos(k * w);
  }
  Tensor out(Shape{batch, dim});
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t j = 0; j < dim; ++j) out.at(b, j) = row[j];
  return out;
}

DenoisingNet DenoisingNet::create(std::size_t action_dim, std::size_t obs_dim, std::size_t width,
                                  std::size_t layers, bool residual, Activation act,
                                  std::uint64_t seed, std::size_t emb_dim) {
  DenoisingNet net;
  net.action_dim = action_dim;
  net.obs_dim = obs_dim;
  net.emb_dim = emb_dim;
  net.spec = MlpSpec{action_dim + emb_dim + obs_dim, width, layers, residual, action_dim, act,
                     0.01};
  net.params = init_params(net.spec, seed);
  return net;
}

ad::Var DenoisingNet::eps(ad::Tape& tape, std::span<const ad::Var> p, ad::Var a_k,
                          std::size_t k, ad::Var s) const {
  const std::size_t batch = a_k.value().rows();
  if (a_k.value().cols() != action_dim || s.value().cols() != obs_dim ||
      s.value().rows() != batch) {
    throw std::invalid_argument("DenoisingNet: input shapes " + shape_string(a_k.shape()) +
                                " and " + shape_string(s.shape()) + " do not match action " +
                                std::to_string(action_dim) + ", obs " + std::to_string(obs_dim));
  }
  const ad::Var emb = tape.constant(timestep_embedding(static_cast<double>(k), emb_dim, batch));
  const ad::Var parts[] = {a_k, emb, s};
  return mlp_forward(spec, p, ad::concat_cols(parts));
}

CriticNet CriticNet::create(std::size_t input_dim, std::size_t width, std::size_t layers,
                            bool residual, Activation act, std::uint64_t seed,
                            bool zero_output) {
  CriticNet net;
  net.spec = MlpSpec{input_dim, width, layers, residual, 1, act, zero_output ? 0.0 : 1.0};
  net.params = init_params(net.spec, seed);
  return net;
}

ad::Var CriticNet::value(std::span<const ad::Var> p, ad::Var s) const {
  return mlp_forward(spec, p, s);
}

}  // namespace ncdpo
