#include "ncdpo/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace ncdpo {

namespace {

namespace pt = boost::property_tree;

struct Field {
  std::string section;
  std::string key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename T>
T parse_number(const std::string& text) {
  T v{};
  const char* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc{} || ptr != end) throw std::invalid_argument("not a number: '" + text + "'");
  return v;
}

bool parse_bool(const std::string& text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw std::invalid_argument("expected true or false, got '" + text + "'");
}

std::vector<std::size_t> parse_list(const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto b = item.find_first_not_of(' ');
    const auto e = item.find_last_not_of(' ');
    if (b == std::string::npos) throw std::invalid_argument("empty list entry");
    out.push_back(parse_number<std::size_t>(item.substr(b, e - b + 1)));
  }
  return out;
}

std::string join(const std::vector<std::size_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

// expr names the member through `c`.
#define NCDPO_SIZE(sec, name, expr)                                                      \
  Field {                                                                                \
    sec, name, [](RunConfig& c, const std::string& v) { expr = parse_number<std::size_t>(v); }, \
        [](const RunConfig& c) { return std::to_string(expr); }                          \
  }
#define NCDPO_U64(sec, name, expr)                                                          \
  Field {                                                                                   \
    sec, name, [](RunConfig& c, const std::string& v) { expr = parse_number<std::uint64_t>(v); }, \
        [](const RunConfig& c) { return std::to_string(expr); }                             \
  }
#define NCDPO_REAL(sec, name, expr)                                                 \
  Field {                                                                           \
    sec, name, [](RunConfig& c, const std::string& v) { expr = parse_number<double>(v); }, \
        [](const RunConfig& c) { return format_double(expr); }                      \
  }
#define NCDPO_BOOL(sec, name, expr)                                                         \
  Field {                                                                                   \
    sec, name, [](RunConfig& c, const std::string& v) { expr = parse_bool(v); },            \
        [](const RunConfig& c) { return std::string(expr ? "true" : "false"); }             \
  }
#define NCDPO_ENUM(sec, name, expr, parse, print)                                 \
  Field {                                                                         \
    sec, name, [](RunConfig& c, const std::string& v) { expr = parse(v); },       \
        [](const RunConfig& c) { return print(expr); }                            \
  }

std::string identity(const std::string& s) { return s; }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      NCDPO_U64("run", "seed", c.seed),
      NCDPO_ENUM("run", "algo", c.algo, parse_algo, algo_name),
      NCDPO_SIZE("run", "env_step_budget", c.env_step_budget),
      NCDPO_SIZE("run", "num_envs", c.num_envs),
      NCDPO_SIZE("run", "steps_per_env", c.steps_per_env),
      NCDPO_SIZE("run", "eval_episodes", c.eval_episodes),
      NCDPO_BOOL("run", "eval_stochastic", c.eval_stochastic),
      NCDPO_SIZE("run", "checkpoint_every", c.checkpoint_every),
      NCDPO_BOOL("run", "log_wall_time", c.log_wall_time),
      NCDPO_REAL("run", "dppo_min_std", c.dppo_min_std),

      NCDPO_ENUM("env", "kind", c.env.kind, parse_env_kind, env_kind_name),
      NCDPO_ENUM("env", "reward", c.env.reward_mode, parse_reward_mode, reward_mode_name),
      NCDPO_SIZE("env", "horizon", c.env.horizon),
      NCDPO_SIZE("env", "chunk", c.env.chunk),
      NCDPO_REAL("env", "dt", c.env.dt),
      NCDPO_REAL("env", "accel_limit", c.env.accel_limit),
      NCDPO_REAL("env", "goal_radius", c.env.goal_radius),
      NCDPO_REAL("env", "lqr_gamma", c.env.lqr_gamma),
      NCDPO_SIZE("env", "grid_agents", c.env.grid_agents),
      NCDPO_SIZE("env", "grid_cells", c.env.grid_cells),

      NCDPO_SIZE("schedule", "K", c.K),
      NCDPO_ENUM("schedule", "kind", c.schedule.kind, parse_schedule_kind, schedule_kind_name),
      NCDPO_REAL("schedule", "beta_min", c.schedule.beta_min),
      NCDPO_REAL("schedule", "beta_max", c.schedule.beta_max),
      NCDPO_SIZE("schedule", "reference_steps", c.schedule.reference_steps),
      NCDPO_REAL("schedule", "cosine_s", c.schedule.cosine_s),
      NCDPO_REAL("schedule", "max_beta", c.schedule.max_beta),
      NCDPO_REAL("schedule", "eta", c.schedule.eta),
      NCDPO_REAL("schedule", "beta_base", c.schedule.beta_base),
      NCDPO_REAL("schedule", "x0_clip", c.schedule.x0_clip),
      NCDPO_ENUM("schedule", "prediction", c.schedule.prediction, parse_prediction, prediction_name),

      NCDPO_SIZE("actor", "width", c.actor.width),
      NCDPO_SIZE("actor", "layers", c.actor.layers),
      NCDPO_BOOL("actor", "residual", c.actor.residual),
      NCDPO_ENUM("actor", "activation", c.actor.activation, parse_activation, activation_name),
      NCDPO_SIZE("actor", "emb_dim", c.actor.emb_dim),
      NCDPO_REAL("actor", "init_log_sigma", c.actor.init_log_sigma),
      NCDPO_REAL("actor", "inv_temperature", c.actor.inv_temperature),

      NCDPO_SIZE("critic", "width", c.critic.width),
      NCDPO_SIZE("critic", "layers", c.critic.layers),
      NCDPO_BOOL("critic", "residual", c.critic.residual),
      NCDPO_ENUM("critic", "activation", c.critic.activation, parse_activation, activation_name),

      NCDPO_REAL("ppo", "gamma", c.ppo.gamma),
      NCDPO_REAL("ppo", "lambda", c.ppo.lambda),
      NCDPO_REAL("ppo", "clip_eps", c.ppo.clip_eps),
      NCDPO_SIZE("ppo", "epochs", c.ppo.epochs),
      NCDPO_SIZE("ppo", "minibatches", c.ppo.minibatches),
      NCDPO_REAL("ppo", "actor_lr", c.ppo.actor_lr),
      NCDPO_REAL("ppo", "critic_lr", c.ppo.critic_lr),
      NCDPO_REAL("ppo", "critic_weight_decay", c.ppo.critic_weight_decay),
      NCDPO_REAL("ppo", "value_coef", c.ppo.value_coef),
      NCDPO_REAL("ppo", "entropy_coef", c.ppo.entropy_coef),
      NCDPO_REAL("ppo", "max_grad_norm", c.ppo.max_grad_norm),
      NCDPO_BOOL("ppo", "normalize_advantages", c.ppo.normalize_advantages),

      NCDPO_SIZE("self_imitation", "clone_epochs", c.self_imitation.clone_epochs),
      NCDPO_REAL("self_imitation", "clone_lr", c.self_imitation.clone_lr),
      NCDPO_SIZE("self_imitation", "batch_size", c.self_imitation.batch_size),

      NCDPO_SIZE("pretrain", "max_epochs", c.pretrain.max_epochs),
      NCDPO_SIZE("pretrain", "batch_size", c.pretrain.batch_size),
      NCDPO_REAL("pretrain", "lr", c.pretrain.lr),
      NCDPO_SIZE("pretrain", "patience", c.pretrain.patience),
      NCDPO_REAL("pretrain", "min_delta", c.pretrain.min_delta),
      NCDPO_ENUM("pretrain", "demos", c.demos_path, identity, identity),

      NCDPO_ENUM("demos", "quality", c.demo_quality, parse_demo_quality, demo_quality_name),
      NCDPO_SIZE("demos", "episodes", c.demo_episodes),

      NCDPO_ENUM("ablate", "k_list", c.k_list, parse_list, join),
      NCDPO_BOOL("ablate", "pretrain", c.ablate_pretrain),
  };
  return table;
}

#undef NCDPO_SIZE
#undef NCDPO_U64
#undef NCDPO_REAL
#undef NCDPO_BOOL
#undef NCDPO_ENUM

}  // namespace

std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

ActorSpec RunConfig::actor_spec() const {
  ActorSpec a = actor;
  a.K = K;
  a.schedule = schedule;
  return a;
}

TrainConfig RunConfig::train_config() const {
  TrainConfig t;
  t.algo = algo;
  t.env_step_budget = env_step_budget;
  t.num_envs = num_envs;
  t.steps_per_env = steps_per_env;
  t.seed = seed;
  t.ppo = ppo;
  t.self_imitation = self_imitation;
  t.dppo_min_std = dppo_min_std;
  t.eval_episodes = eval_episodes;
  t.log_wall_time = log_wall_time;
  return t;
}

void RunConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError(m); };
  try {
    ppo.validate();
  } catch (const std::invalid_argument& e) {
    fail(e.what());
  }
  if (K < 1) fail("schedule.K must be >= 1");
  if (num_envs == 0) fail("run.num_envs must be >= 1");
  if (steps_per_env == 0) fail("run.steps_per_env must be >= 1");
  if (actor.width == 0 || critic.width == 0) fail("network width must be >= 1");
  if (env.chunk == 0) fail("env.chunk must be >= 1");
  if (schedule.eta < 0.0) fail("schedule.eta must be >= 0");
  if (schedule.beta_base <= 0.0) fail("schedule.beta_base must be > 0");
  if (!(actor.inv_temperature > 0.0)) fail("actor.inv_temperature must be > 0");
  if (k_list.empty()) fail("ablate.k_list must be nonempty");
  for (std::size_t k : k_list)
    if (k == 0) fail("ablate.k_list entries must be >= 1");
  if (algo == Algo::dppo && env_is_discrete(env)) fail("dppo supports continuous envs only");
  if (!(dppo_min_std > 0.0)) fail("run.dppo_min_std must be > 0");
}

RunConfig parse_config(const std::string& text) {
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError("config line " + std::to_string(e.line()) + ": " + e.message());
  }
  std::map<std::pair<std::string, std::string>, const Field*> index;
  for (const Field& f : fields()) index[{f.section, f.key}] = &f;

  RunConfig c;
  for (const auto& [section, body] : tree) {
    if (body.empty() && !body.data().empty()) {
      throw ConfigError("config: key '" + section + "' outside any section");
    }
    for (const auto& [key, value] : body) {
      const auto it = index.find({section, key});
      if (it == index.end()) throw ConfigError("config: unknown key " + section + "." + key);
      try {
        it->second->set(c, value.get_value<std::string>());
      } catch (const std::exception& e) {
        throw ConfigError("config: " + section + "." + key + ": " + e.what());
      }
    }
  }
  c.validate();
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string serialize_config(const RunConfig& c) {
  std::string out;
  std::string current;
  for (const Field& f : fields()) {
    if (f.section != current) {
      out += (current.empty() ? "" : "\n") + std::string("[") + f.section + "]\n";
      current = f.section;
    }
    out += f.key + " = " + f.get(c) + "\n";
  }
  return out;
}

void save_config(const RunConfig& config, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << serialize_config(config);
}

}  // namespace ncdpo
