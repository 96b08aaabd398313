#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "ncdpo/rng.hpp"
#include "ncdpo/tensor.hpp"

namespace ncdpo {

enum class EnvKind { point_mass, lqr, grid_coord };
enum class RewardMode { dense, sparse };

EnvKind parse_env_kind(const std::string& name);
std::string env_kind_name(EnvKind kind);
RewardMode parse_reward_mode(const std::string& name);
std::string reward_mode_name(RewardMode mode);

struct EnvConfig {
  EnvKind kind = EnvKind::point_mass;
  RewardMode reward_mode = RewardMode::dense;
  std::size_t horizon = 0;  // 0 picks the kind's default (64 / 10 / 32)
  std::size_t chunk = 1;
  // point mass
  double dt = 0.1;
  double accel_limit = 1.0;
  double goal_radius = 0.1;
  // lqr
  double lqr_gamma = 1.0;
  // grid
  std::size_t grid_agents = 3;
  std::size_t grid_cells = 5;

  std::size_t effective_horizon() const;
  // Canonical text of every field that changes the MDP.
  std::string spec_string() const;
  std::uint64_t spec_hash() const;
};

std::uint64_t fnv1a64(std::string_view text);

struct StepResult {
  std::vector<double> obs;
  double reward = 0.0;
  bool done = false;
  bool success = false;
  std::size_t substeps = 1;
};

class Env {
 public:
  virtual ~Env() = default;
  virtual std::size_t obs_dim() const = 0;
  virtual std::size_t action_dim() const = 0;
  virtual std::vector<double> reset(Rng& rng) = 0;
  virtual StepResult step(std::span<const double> action) = 0;
  virtual std::unique_ptr<Env> clone() const = 0;
  virtual std::vector<double> observe() const = 0;

  bool done() const { return done_; }
  std::size_t t() const { return t_; }

 protected:
  void begin_step(std::span<const double> action, std::size_t expected_dim);

  bool done_ = true;
  std::size_t t_ = 0;
};

class PointMassEnv : public Env {
 public:
  explicit PointMassEnv(const EnvConfig& config);
  std::size_t obs_dim() const override { return 7; }
  std::size_t action_dim() const override { return 2; }
  std::vector<double> reset(Rng& rng) override;
  StepResult step(std::span<const double> action) override;
  std::unique_ptr<Env> clone() const override { return std::make_unique<PointMassEnv>(*this); }
  std::vector<double> observe() const override;

  void set_state(std::array<double, 2> pos, std::array<double, 2> vel,
                 std::array<double, 2> goal);
  double distance_to_goal() const;
  const std::array<double, 2>& position() const { return pos_; }
  const std::array<double, 2>& velocity() const { return vel_; }
  const std::array<double, 2>& goal() const { return goal_; }

 private:
  EnvConfig config_;
  std::array<double, 2> pos_{}, vel_{}, goal_{};
};

class LqrEnv : public Env {
 public:
  explicit LqrEnv(const EnvConfig& config);
  std::size_t obs_dim() const override { return 2; }
  std::size_t action_dim() const override { return 1; }
  std::vector<double> reset(Rng& rng) override;
  StepResult step(std::span<const double> action) override;
  std::unique_ptr<Env> clone() const override { return std::make_unique<LqrEnv>(*this); }
  std::vector<double> observe() const override;

  void set_state(double s);
  double state() const { return s_; }

 private:
  EnvConfig config_;
  double s_ = 0.0;
};

// Agents on a line; each action row holds N blocks of 3 scores
// (left, stay, right) and the per-block argmax is applied.
class GridCoordEnv : public Env {
 public:
  explicit GridCoordEnv(const EnvConfig& config);
  std::size_t obs_dim() const override { return config_.grid_agents + 1; }
  std::size_t action_dim() const override { return 3 * config_.grid_agents; }
  std::vector<double> reset(Rng& rng) override;
  StepResult step(std::span<const double> action) override;
  std::unique_ptr<Env> clone() const override { return std::make_unique<GridCoordEnv>(*this); }
  std::vector<double> observe() const override;

  void set_positions(std::vector<int> positions);
  const std::vector<int>& positions() const { return pos_; }
  const std::vector<int>& targets() const { return targets_; }
  int start_cell() const;
  bool on_distinct_targets() const;

 private:
  EnvConfig config_;
  std::vector<int> pos_;
  std::vector<int> targets_;
};

// h consecutive base actions per step; rewards summed, done if any sub-step ends.
class ChunkedEnv : public Env {
 public:
  ChunkedEnv(std::unique_ptr<Env> base, std::size_t chunk);
  ChunkedEnv(const ChunkedEnv& other);
  std::size_t obs_dim() const override { return base_->obs_dim(); }
  std::size_t action_dim() const override { return chunk_ * base_->action_dim(); }
  std::vector<double> reset(Rng& rng) override;
  StepResult step(std::span<const double> action) override;
  std::unique_ptr<Env> clone() const override { return std::make_unique<ChunkedEnv>(*this); }
  std::vector<double> observe() const override { return base_->observe(); }
  Env& base() { return *base_; }

 private:
  std::unique_ptr<Env> base_;
  std::size_t chunk_;
};

std::unique_ptr<Env> make_env(const EnvConfig& config);

// Discrete action layout for the softmax head; agents = N * chunk, 3 actions.
bool env_is_discrete(const EnvConfig& config);
std::size_t env_num_agents(const EnvConfig& config);

// Exact optimum of sum_t gamma^t -(s_t^2 + a_t^2) over the horizon.
double lqr_optimal_return(const EnvConfig& config, double s0);
// Expectation of the above for s0 ~ U[-1, 1].
double lqr_expected_optimal_return(const EnvConfig& config);
// Optimal feedback gains g_t (a_t = -g_t s_t), t = 0..H-1.
std::vector<double> lqr_gains(const EnvConfig& config);

enum class DemoQuality { expert, medium, mixture, random };
DemoQuality parse_demo_quality(const std::string& name);
std::string demo_quality_name(DemoQuality q);

struct DemoSet {
  EnvKind kind = EnvKind::point_mass;
  std::uint64_t spec_hash = 0;
  std::size_t chunk = 1;
  Tensor obs;      // [n, obs_dim]
  Tensor actions;  // [n, chunk * base_action_dim]
  // Generation-time statistics (not serialized).
  std::vector<double> episode_returns;
  std::vector<bool> episode_success;
  // Index into obs/actions of every episode's first step.
  std::vector<std::size_t> episode_starts;

  std::size_t size() const { return obs.rows(); }
};

DemoSet make_demonstrations(const EnvConfig& config, DemoQuality quality, std::size_t episodes,
                            Rng& rng);

void save_demos(const DemoSet& demos, const std::filesystem::path& path);
DemoSet load_demos(const std::filesystem::path& path);

}  // namespace ncdpo
