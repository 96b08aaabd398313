#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "ncdpo/envs.hpp"
#include "ncdpo/rl.hpp"

namespace ncdpo {

// Bad file, unknown key or invalid value. The CLI maps this to exit code 1.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  // [run]
  std::uint64_t seed = 0;
  Algo algo = Algo::ncdpo;
  std::size_t env_step_budget = 200000;
  std::size_t num_envs = 32;
  std::size_t steps_per_env = 64;
  std::size_t eval_episodes = 50;
  bool eval_stochastic = false;  // sample the head at evaluation instead of mean/argmax
  std::size_t checkpoint_every = 0;  // iterations; 0 keeps only final/last-good
  bool log_wall_time = true;
  double dppo_min_std = 0.1;
  // [env]
  EnvConfig env;
  // [schedule] (K lives here too)
  std::size_t K = 5;
  ScheduleParams schedule;
  // [actor] / [critic]
  ActorSpec actor;
  CriticSpec critic;
  // [ppo] / [self_imitation]
  PpoConfig ppo;
  SelfImitationConfig self_imitation;
  // [pretrain]
  PretrainConfig pretrain;
  std::string demos_path;
  // [demos]
  DemoQuality demo_quality = DemoQuality::medium;
  std::size_t demo_episodes = 500;
  // [ablate]
  std::vector<std::size_t> k_list{5, 10, 20};
  bool ablate_pretrain = true;

  // Actor spec with K and schedule folded in.
  ActorSpec actor_spec() const;
  TrainConfig train_config() const;
  void validate() const;
};

RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);
// Every key, fixed order, shortest round-trip number formatting.
std::string serialize_config(const RunConfig& config);
void save_config(const RunConfig& config, const std::filesystem::path& path);

// Shortest decimal text that parses back to the same double.
std::string format_double(double v);

}  // namespace ncdpo
