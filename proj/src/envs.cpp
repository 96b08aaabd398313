#include "ncdpo/envs.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace ncdpo {

EnvKind parse_env_kind(const std::string& name) {
  if (name == "point_mass") return EnvKind::point_mass;
  if (name == "lqr") return EnvKind::lqr;
  if (name == "grid_coord") return EnvKind::grid_coord;
  throw std::invalid_argument("unknown env kind '" + name + "'");
}

std::string env_kind_name(EnvKind kind) {
  switch (kind) {
    case EnvKind::point_mass: return "point_mass";
    case EnvKind::lqr: return "lqr";
    case EnvKind::grid_coord: return "grid_coord";
  }
  return "?";
}

RewardMode parse_reward_mode(const std::string& name) {
  if (name == "dense") return RewardMode::dense;
  if (name == "sparse") return RewardMode::sparse;
  throw std::invalid_argument("unknown reward mode '" + name + "'");
}

std::string reward_mode_name(RewardMode mode) {
  return mode == RewardMode::dense ? "dense" : "sparse";
}

std::size_t EnvConfig::effective_horizon() const {
  if (horizon > 0) return horizon;
  switch (kind) {
    case EnvKind::point_mass: return 64;
    case EnvKind::lqr: return 10;
    case EnvKind::grid_coord: return 32;
  }
  return 0;
}

std::string EnvConfig::spec_string() const {
  std::ostringstream out;
  out.precision(17);
  out << "kind=" << env_kind_name(kind) << ";horizon=" << effective_horizon()
      << ";chunk=" << chunk;
  switch (kind) {
    case EnvKind::point_mass:
      out << ";reward=" << reward_mode_name(reward_mode) << ";dt=" << dt
          << ";accel_limit=" << accel_limit << ";goal_radius=" << goal_radius;
      break;
    case EnvKind::lqr: out << ";gamma=" << lqr_gamma; break;
    case EnvKind::grid_coord:
      out << ";agents=" << grid_agents << ";cells=" << grid_cells;
      break;
  }
  return out.str();
}

std::uint64_t fnv1a64(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t EnvConfig::spec_hash() const { return fnv1a64(spec_string()); }

void Env::begin_step(std::span<const double> action, std::size_t expected_dim) {
  if (done_) throw std::logic_error("step called on a finished episode; reset first");
  if (action.size() != expected_dim) {
    throw std::invalid_argument("step: action has " + std::to_string(action.size()) +
                                " entries, expected " + std::to_string(expected_dim));
  }
  for (double a : action) {
    if (!std::isfinite(a)) throw std::invalid_argument("step: non-finite action");
  }
}

// ---------------------------------------------------------------------------

PointMassEnv::PointMassEnv(const EnvConfig& config) : config_(config) {}

std::vector<double> PointMassEnv::reset(Rng& rng) {
  pos_ = {rng.uniform(-1, 1), rng.uniform(-1, 1)};
  goal_ = {rng.uniform(-1, 1), rng.uniform(-1, 1)};
  vel_ = {0.0, 0.0};
  t_ = 0;
  done_ = false;
  return observe();
}

void PointMassEnv::set_state(std::array<double, 2> pos, std::array<double, 2> vel,
                             std::array<double, 2> goal) {
  pos_ = pos;
  vel_ = vel;
  goal_ = goal;
  t_ = 0;
  done_ = false;
}

double PointMassEnv::distance_to_goal() const {
  return std::hypot(pos_[0] - goal_[0], pos_[1] - goal_[1]);
}

std::vector<double> PointMassEnv::observe() const {
  const double h = static_cast<double>(config_.effective_horizon());
  return {pos_[0], pos_[1], vel_[0], vel_[1], goal_[0], goal_[1], static_cast<double>(t_) / h};
}

StepResult PointMassEnv::step(std::span<const double> action) {
  begin_step(action, 2);
  const double lim = config_.accel_limit;
  for (int d = 0; d < 2; ++d) {
    vel_[d] += std::clamp(action[d], -lim, lim) * config_.dt;
    pos_[d] += vel_[d] * config_.dt;
  }
  ++t_;
  StepResult r;
  const double dist = distance_to_goal();
  r.success = dist < config_.goal_radius;
  if (config_.reward_mode == RewardMode::dense) {
    r.reward = -dist;
  } else {
    r.reward = r.success ? 1.0 : 0.0;
  }
  r.done = t_ >= config_.effective_horizon() ||
           (config_.reward_mode == RewardMode::sparse && r.success);
  done_ = r.done;
  r.obs = observe();
  return r;
}

// ---------------------------------------------------------------------------

LqrEnv::LqrEnv(const EnvConfig& config) : config_(config) {}

std::vector<double> LqrEnv::reset(Rng& rng) {
  s_ = rng.uniform(-1, 1);
  t_ = 0;
  done_ = false;
  return observe();
}

void LqrEnv::set_state(double s) {
  s_ = s;
  t_ = 0;
  done_ = false;
}

std::vector<double> LqrEnv::observe() const {
  return {s_, static_cast<double>(t_) / static_cast<double>(config_.effective_horizon())};
}

StepResult LqrEnv::step(std::span<const double> action) {
  begin_step(action, 1);
  const double a = action[0];
  StepResult r;
  r.reward = -(s_ * s_ + a * a);
  s_ += a;
  ++t_;
  r.done = t_ >= config_.effective_horizon();
  done_ = r.done;
  r.obs = observe();
  return r;
}

// ---------------------------------------------------------------------------

GridCoordEnv::GridCoordEnv(const EnvConfig& config) : config_(config) {
  const int n = static_cast<int>(config.grid_agents);
  const int l = static_cast<int>(config.grid_cells);
  if (n < 1 || n > l) throw std::invalid_argument("grid_coord: need 1 <= agents <= cells");
  const int first = (l - n) / 2;
  for (int i = 0; i < n; ++i) targets_.push_back(first + i);
  pos_.assign(static_cast<std::size_t>(n), start_cell());
}

int GridCoordEnv::start_cell() const { return static_cast<int>(config_.grid_cells) / 2; }

std::vector<double> GridCoordEnv::reset(Rng&) {
  pos_.assign(config_.grid_agents, start_cell());
  t_ = 0;
  done_ = false;
  return observe();
}

void GridCoordEnv::set_positions(std::vector<int> positions) {
  if (positions.size() != config_.grid_agents) {
    throw std::invalid_argument("grid_coord: wrong number of positions");
  }
  pos_ = std::move(positions);
  t_ = 0;
  done_ = false;
}

std::vector<double> GridCoordEnv::observe() const {
  std::vector<double> obs;
  const double span = static_cast<double>(config_.grid_cells - 1);
  for (int p : pos_) obs.push_back(span > 0 ? p / span : 0.0);
  obs.push_back(static_cast<double>(t_) / static_cast<double>(config_.effective_horizon()));
  return obs;
}

bool GridCoordEnv::on_distinct_targets() const {
  std::vector<int> sorted = pos_;
  std::sort(sorted.begin(), sorted.end());
  return sorted == targets_;
}

StepResult GridCoordEnv::step(std::span<const double> action) {
  begin_step(action, action_dim());
  const int hi = static_cast<int>(config_.grid_cells) - 1;
  for (std::size_t i = 0; i < pos_.size(); ++i) {
    const auto block = action.subspan(3 * i, 3);
    const auto best = std::max_element(block.begin(), block.end()) - block.begin();
    pos_[i] = std::clamp(pos_[i] + static_cast<int>(best) - 1, 0, hi);
  }
  ++t_;
  StepResult r;
  r.success = on_distinct_targets();
  r.reward = r.success ? 1.0 : 0.0;
  r.done = r.success || t_ >= config_.effective_horizon();
  done_ = r.done;
  r.obs = observe();
  return r;
}

// ---------------------------------------------------------------------------

ChunkedEnv::ChunkedEnv(std::unique_ptr<Env> base, std::size_t chunk)
    : base_(std::move(base)), chunk_(chunk) {
  if (chunk_ < 1) throw std::invalid_argument("chunk size must be >= 1");
}

ChunkedEnv::ChunkedEnv(const ChunkedEnv& other)
    : Env(other), base_(other.base_->clone()), chunk_(other.chunk_) {}

std::vector<double> ChunkedEnv::reset(Rng& rng) {
  t_ = 0;
  done_ = false;
  return base_->reset(rng);
}

StepResult ChunkedEnv::step(std::span<const double> action) {
  begin_step(action, action_dim());
  const std::size_t d = base_->action_dim();
  StepResult total;
  total.substeps = 0;
  for (std::size_t i = 0; i < chunk_; ++i) {
    StepResult r = base_->step(action.subspan(i * d, d));
    total.reward += r.reward;
    total.success = total.success || r.success;
    total.obs = std::move(r.obs);
    ++total.substeps;
    if (r.done) {
      total.done = true;
      break;
    }
  }
  ++t_;
  done_ = total.done;
  return total;
}

std::unique_ptr<Env> make_env(const EnvConfig& config) {
  std::unique_ptr<Env> env;
  switch (config.kind) {
    case EnvKind::point_mass: env = std::make_unique<PointMassEnv>(config); break;
    case EnvKind::lqr: env = std::make_unique<LqrEnv>(config); break;
    case EnvKind::grid_coord: env = std::make_unique<GridCoordEnv>(config); break;
  }
  if (config.chunk > 1) return std::make_unique<ChunkedEnv>(std::move(env), config.chunk);
  if (config.chunk == 0) throw std::invalid_argument("chunk size must be >= 1");
  return env;
}

bool env_is_discrete(const EnvConfig& config) { return config.kind == EnvKind::grid_coord; }

std::size_t env_num_agents(const EnvConfig& config) {
  return env_is_discrete(config) ? config.grid_agents * config.chunk : 0;
}

// ---------------------------------------------------------------------------

namespace {

// V_t(s) = -p_t s^2 with p_H = 0.
std::vector<double> riccati(const EnvConfig& config) {
  const std::size_t H = config.effective_horizon();
  const double g = config.lqr_gamma;
  std::vector<double> p(H + 1, 0.0);
  for (std::size_t t = H; t-- > 0;) p[t] = 1.0 + g * p[t + 1] / (1.0 + g * p[t + 1]);
  return p;
}

}  // namespace

double lqr_optimal_return(const EnvConfig& config, double s0) {
  return -riccati(config)[0] * s0 * s0;
}

double lqr_expected_optimal_return(const EnvConfig& config) { return -riccati(config)[0] / 3.0; }

std::vector<double> lqr_gains(const EnvConfig& config) {
  const auto p = riccati(config);
  const double g = config.lqr_gamma;
  std::vector<double> gains(config.effective_horizon());
  for (std::size_t t = 0; t < gains.size(); ++t) gains[t] = g * p[t + 1] / (1.0 + g * p[t + 1]);
  return gains;
}

// ---------------------------------------------------------------------------
// Demonstrations

DemoQuality parse_demo_quality(const std::string& name) {
  if (name == "expert") return DemoQuality::expert;
  if (name == "medium") return DemoQuality::medium;
  if (name == "mixture") return DemoQuality::mixture;
  if (name == "random") return DemoQuality::random;
  throw std::invalid_argument("unknown demo quality '" + name + "'");
}

std::string demo_quality_name(DemoQuality q) {
  switch (q) {
    case DemoQuality::expert: return "expert";
    case DemoQuality::medium: return "medium";
    case DemoQuality::mixture: return "mixture";
    case DemoQuality::random: return "random";
  }
  return "?";
}

namespace {

// One scripted episode controller; called once per base step.
class Script {
 public:
  virtual ~Script() = default;
  virtual std::vector<double> act(Env& base, Rng& rng) = 0;
};

constexpr double kPdGain = 2.0;
constexpr double kPdDamping = 2.5;

std::vector<double> pd_toward(const PointMassEnv& env, double tx, double ty, double lim) {
  const auto& p = env.position();
  const auto& v = env.velocity();
  return {std::clamp(kPdGain * (tx - p[0]) - kPdDamping * v[0], -lim, lim),
          std::clamp(kPdGain * (ty - p[1]) - kPdDamping * v[1], -lim, lim)};
}

class PointMassScript : public Script {
 public:
  PointMassScript(const EnvConfig& c, bool noisy, Rng& rng) : config_(c), noisy_(noisy) {
    if (noisy_ && rng.bernoulli(0.6)) {
      detour_steps_ = 8 + rng.index(16);
      waypoint_ = {rng.uniform(-1, 1), rng.uniform(-1, 1)};
    }
  }
  std::vector<double> act(Env& base, Rng& rng) override {
    auto& env = static_cast<PointMassEnv&>(base);
    const bool detour = env.t() < detour_steps_;
    const double tx = detour ? waypoint_[0] : env.goal()[0];
    const double ty = detour ? waypoint_[1] : env.goal()[1];
    auto a = pd_toward(env, tx, ty, config_.accel_limit);
    if (noisy_) {
      for (double& x : a)
        x = std::clamp(x + 0.3 * rng.normal(), -config_.accel_limit, config_.accel_limit);
    }
    return a;
  }

 private:
  EnvConfig config_;
  bool noisy_;
  std::size_t detour_steps_ = 0;
  std::array<double, 2> waypoint_{};
};

class LqrScript : public Script {
 public:
  LqrScript(const EnvConfig& c, bool medium) : gains_(lqr_gains(c)), medium_(medium) {}
  std::vector<double> act(Env& base, Rng& rng) override {
    auto& env = static_cast<LqrEnv&>(base);
    const double g = gains_[std::min(env.t(), gains_.size() - 1)];
    if (!medium_) return {-g * env.state()};
    return {-0.5 * g * env.state() + 0.1 * rng.normal()};
  }

 private:
  std::vector<double> gains_;
  bool medium_;
};

// Routes agent i to targets[i] (mode A) or targets[N-1-i] (mode B). A failing
// episode sends the middle agent one cell past its target instead.
class GridScript : public Script {
 public:
  GridScript(bool mode_b, bool failing) : mode_b_(mode_b), failing_(failing) {}
  std::vector<double> act(Env& base, Rng&) override {
    auto& env = static_cast<GridCoordEnv&>(base);
    const auto& pos = env.positions();
    const auto& tg = env.targets();
    const std::size_t n = pos.size();
    std::vector<double> a(3 * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      int goal = tg[mode_b_ ? n - 1 - i : i];
      if (failing_ && i == n / 2) goal += 1;
      const int move = goal > pos[i] ? 1 : (goal < pos[i] ? -1 : 0);
      a[3 * i + static_cast<std::size_t>(move + 1)] = 1.0;
    }
    return a;
  }

 private:
  bool mode_b_;
  bool failing_;
};

class RandomScript : public Script {
 public:
  explicit RandomScript(const EnvConfig& c) : config_(c) {}
  std::vector<double> act(Env& base, Rng& rng) override {
    std::vector<double> a(base.action_dim());
    if (config_.kind == EnvKind::grid_coord) {
      for (std::size_t i = 0; i < a.size() / 3; ++i) a[3 * i + rng.index(3)] = 1.0;
    } else {
      for (double& x : a) x = rng.uniform(-1, 1);
    }
    return a;
  }

 private:
  EnvConfig config_;
};

std::unique_ptr<Script> make_script(const EnvConfig& c, DemoQuality q, Rng& rng) {
  if (q == DemoQuality::random) return std::make_unique<RandomScript>(c);
  if (q == DemoQuality::mixture && c.kind != EnvKind::grid_coord) {
    q = rng.bernoulli(0.5) ? DemoQuality::expert : DemoQuality::medium;
  }
  switch (c.kind) {
    case EnvKind::point_mass:
      return std::make_unique<PointMassScript>(c, q != DemoQuality::expert, rng);
    case EnvKind::lqr: return std::make_unique<LqrScript>(c, q != DemoQuality::expert);
    case EnvKind::grid_coord: {
      if (q == DemoQuality::expert) return std::make_unique<GridScript>(false, false);
      // two routing policies with different reliability
      const bool mode_b = rng.bernoulli(0.5);
      const double fail_p = mode_b ? 0.4 : 0.1;
      return std::make_unique<GridScript>(mode_b, rng.bernoulli(fail_p));
    }
  }
  throw std::invalid_argument("make_demonstrations: unknown env kind");
}

}  // namespace

DemoSet make_demonstrations(const EnvConfig& config, DemoQuality quality, std::size_t episodes,
                            Rng& rng) {
  if (episodes < 1) throw std::invalid_argument("make_demonstrations: episodes must be >= 1");
  EnvConfig base_cfg = config;
  base_cfg.chunk = 1;
  auto env = make_env(base_cfg);
  const std::size_t h = config.chunk;
  const std::size_t od = env->obs_dim(), ad = env->action_dim();

  DemoSet demos;
  demos.kind = config.kind;
  demos.spec_hash = config.spec_hash();
  demos.chunk = h;
  std::vector<double> obs_rows, act_rows;
  for (std::size_t ep = 0; ep < episodes; ++ep) {
    auto script = make_script(config, quality, rng);
    std::vector<double> obs = env->reset(rng);
    double ret = 0.0;
    bool success = false;
    demos.episode_starts.push_back(obs_rows.size() / od);
    while (!env->done()) {
      obs_rows.insert(obs_rows.end(), obs.begin(), obs.end());
      std::vector<double> last;
      for (std::size_t i = 0; i < h; ++i) {
        if (!env->done()) {
          last = script->act(*env, rng);
          StepResult r = env->step(last);
          ret += r.reward;
          success = success || r.success;
          obs = std::move(r.obs);
        }
        // pad a chunk cut short by termination with its last action
        act_rows.insert(act_rows.end(), last.begin(), last.end());
      }
    }
    demos.episode_returns.push_back(ret);
    demos.episode_success.push_back(success);
  }
  const std::size_t n = obs_rows.size() / od;
  demos.obs = Tensor(Shape{n, od}, std::move(obs_rows));
  demos.actions = Tensor(Shape{n, h * ad}, std::move(act_rows));
  return demos;
}

void save_demos(const DemoSet& demos, const std::filesystem::path& path) {
  static_assert(std::endian::native == std::endian::little, "little-endian host required");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write demos to " + path.string());
  out << "ncdpo-demos 1\n"
      << "env=" << env_kind_name(demos.kind) << "\n"
      << "spec_hash=" << demos.spec_hash << "\n"
      << "chunk=" << demos.chunk << "\n"
      << "obs_dim=" << demos.obs.cols() << "\n"
      << "action_dim=" << demos.actions.cols() << "\n"
      << "count=" << demos.size() << "\n"
      << "---\n";
  for (std::size_t i = 0; i < demos.size(); ++i) {
    out.write(reinterpret_cast<const char*>(demos.obs.row_span(i).data()),
              static_cast<std::streamsize>(demos.obs.cols() * sizeof(double)));
    out.write(reinterpret_cast<const char*>(demos.actions.row_span(i).data()),
              static_cast<std::streamsize>(demos.actions.cols() * sizeof(double)));
  }
  if (!out) throw std::runtime_error("failed writing demos to " + path.string());
}

DemoSet load_demos(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open demos " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != "ncdpo-demos 1") throw std::runtime_error(path.string() + ": not a demo file");
  DemoSet d;
  std::size_t obs_dim = 0, action_dim = 0, count = 0;
  while (std::getline(in, line) && line != "---") {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw std::runtime_error(path.string() + ": bad header line");
    const std::string key = line.substr(0, eq), val = line.substr(eq + 1);
    if (key == "env") d.kind = parse_env_kind(val);
    else if (key == "spec_hash") d.spec_hash = std::stoull(val);
    else if (key == "chunk") d.chunk = std::stoul(val);
    else if (key == "obs_dim") obs_dim = std::stoul(val);
    else if (key == "action_dim") action_dim = std::stoul(val);
    else if (key == "count") count = std::stoul(val);
    else throw std::runtime_error(path.string() + ": unknown header key " + key);
  }
  d.obs = Tensor(Shape{count, obs_dim});
  d.actions = Tensor(Shape{count, action_dim});
  for (std::size_t i = 0; i < count; ++i) {
    in.read(reinterpret_cast<char*>(d.obs.row_span(i).data()),
            static_cast<std::streamsize>(obs_dim * sizeof(double)));
    in.read(reinterpret_cast<char*>(d.actions.row_span(i).data()),
            static_cast<std::streamsize>(action_dim * sizeof(double)));
  }
  if (!in) throw std::runtime_error(path.string() + ": truncated demo records");
  return d;
}

}  // namespace ncdpo
