#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ncdpo/autodiff.hpp"
#include "ncdpo/tensor.hpp"

namespace ncdpo {

enum class Activation { mish, tanh };

Activation parse_activation(const std::string& name);
std::string activation_name(Activation a);

// num_layers counts hidden layers, all of width hidden_width.
struct MlpSpec {
  std::size_t input_dim = 0;
  std::size_t hidden_width = 256;
  std::size_t num_layers = 3;
  bool residual = false;
  std::size_t output_dim = 0;
  Activation activation = Activation::mish;
  // Multiplier on the final layer's initial weights (0.01 for actors).
  double output_gain = 1.0;

  void validate() const;
};

// Layout: [W_0, b_0, ..., W_L, b_L] with W_i shaped [fan_in, fan_out] and
// b_i shaped [1, fan_out]. The last pair is the output layer.
std::vector<Tensor> init_params(const MlpSpec& spec, std::uint64_t seed);

std::size_t count_params(const std::vector<Tensor>& params);

// x: [B, input_dim] -> [B, output_dim]
ad::Var mlp_forward(const MlpSpec& spec, std::span<const ad::Var> params, ad::Var x);

// [batch, dim] rows of [sin(k w_0), cos(k w_0), sin(k w_1), ...],
// w_i = 10000^(-2i/dim).
Tensor timestep_embedding(double k, std::size_t dim, std::size_t batch = 1);

// eps_theta(a^k, k, s) over concat(a^k, emb(k), s).
struct DenoisingNet {
  std::size_t action_dim = 0;
  std::size_t obs_dim = 0;
  std::size_t emb_dim = 16;
  MlpSpec spec;
  std::vector<Tensor> params;

  static DenoisingNet create(std::size_t action_dim, std::size_t obs_dim, std::size_t width,
                             std::size_t layers, bool residual, Activation act,
                             std::uint64_t seed, std::size_t emb_dim = 16);

  // a_k [B, action_dim], s [B, obs_dim]
  ad::Var eps(ad::Tape& tape, std::span<const ad::Var> p, ad::Var a_k, std::size_t k,
              ad::Var s) const;
};

// V_phi(s): [B, input_dim] -> [B, 1]
struct CriticNet {
  MlpSpec spec;
  std::vector<Tensor> params;

  static CriticNet create(std::size_t input_dim, std::size_t width, std::size_t layers,
                          bool residual, Activation act, std::uint64_t seed,
                          bool zero_output = false);

  ad::Var value(std::span<const ad::Var> p, ad::Var s) const;
};

}  // namespace ncdpo
