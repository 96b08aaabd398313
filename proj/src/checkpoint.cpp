#include "ncdpo/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace ncdpo {

namespace {

constexpr std::uint64_t kActorInitStream = 21;
constexpr std::uint64_t kCriticInitStream = 22;

std::vector<double> flatten(const std::vector<Tensor>& ts) {
  std::vector<double> out;
  for (const Tensor& t : ts) out.insert(out.end(), t.data().begin(), t.data().end());
  return out;
}

std::string shapes_of(const std::vector<Tensor>& ts) {
  std::string out;
  for (const Tensor& t : ts) out += shape_string(t.shape());
  return out;
}

std::vector<Tensor*> critic_ptrs(CriticNet& c) {
  std::vector<Tensor*> out;
  for (Tensor& t : c.params) out.push_back(&t);
  return out;
}

std::vector<Tensor*> body_ptrs(Actor& a) {
  std::vector<Tensor*> out;
  for (Tensor& t : a.body_params()) out.push_back(&t);
  return out;
}

std::size_t take(const std::vector<double>& flat, std::size_t at, std::vector<Tensor>& into) {
  for (Tensor& t : into) {
    if (at + t.size() > flat.size()) throw ConfigError("checkpoint: params.bin is truncated");
    std::copy(flat.begin() + static_cast<long>(at), flat.begin() + static_cast<long>(at + t.size()),
              t.data().begin());
    at += t.size();
  }
  return at;
}

std::size_t manifest_size(const std::map<std::string, std::string>& m, const std::string& key) {
  const auto it = m.find(key);
  if (it == m.end()) throw ConfigError("checkpoint manifest lacks " + key);
  try {
    return static_cast<std::size_t>(std::stoull(it->second));
  } catch (const std::exception&) {
    throw ConfigError("checkpoint manifest: bad value for " + key);
  }
}

}  // namespace

void write_f64(const std::filesystem::path& path, const std::vector<double>& values) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (double v : values) {
    std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
    unsigned char bytes[8];
    for (int i = 0; i < 8; ++i) bytes[i] = static_cast<unsigned char>(bits >> (8 * i));
    out.write(reinterpret_cast<const char*>(bytes), 8);
  }
}

std::vector<double> read_f64(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read " + path.string());
  std::vector<double> out;
  unsigned char bytes[8];
  while (in.read(reinterpret_cast<char*>(bytes), 8)) {
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
    out.push_back(std::bit_cast<double>(bits));
  }
  if (in.gcount() != 0) throw ConfigError(path.string() + ": size is not a multiple of 8 bytes");
  return out;
}

TrainState build_state(const RunConfig& config) {
  const ActorSpec spec = config.actor_spec();
  return make_train_state(
      make_actor(config.algo, spec, config.env, derive_seed(config.seed, kActorInitStream)),
      make_critic(config.algo, config.critic, spec, config.env,
                  derive_seed(config.seed, kCriticInitStream)),
      config.train_config());
}

void save_checkpoint(const std::filesystem::path& dir, const RunConfig& config,
                     const TrainState& state) {
  std::filesystem::create_directories(dir);
  const Actor& actor = *state.actor;
  const std::vector<double> actor_flat = flatten(actor.parameter_values());
  const std::vector<double> critic_flat = flatten(state.critic.params);
  std::vector<double> params = actor_flat;
  params.insert(params.end(), critic_flat.begin(), critic_flat.end());
  write_f64(dir / "params.bin", params);

  const auto a = state.actor_opt.state(), c = state.critic_opt.state(),
             k = state.clone_opt.state();
  std::vector<double> optim = a;
  optim.insert(optim.end(), c.begin(), c.end());
  optim.insert(optim.end(), k.begin(), k.end());
  write_f64(dir / "optim.bin", optim);

  save_config(config, dir / "config.ini");

  std::ofstream m(dir / "manifest.txt", std::ios::binary);
  m << "format_version=" << kCheckpointFormatVersion << "\n"
    << "algo=" << algo_name(config.algo) << "\n"
    << "actor_kind=" << actor.kind() << "\n"
    << "head=" << (actor.head.kind == HeadKind::gaussian ? "gaussian" : "softmax") << "\n"
    << "inv_temperature=" << format_double(actor.head.softmax.inv_temperature) << "\n"
    << "env=" << env_kind_name(config.env.kind) << "\n"
    << "env_spec_hash=" << config.env.spec_hash() << "\n"
    << "obs_dim=" << actor.obs_dim() << "\n"
    << "action_dim=" << actor.action_dim() << "\n"
    << "K=" << config.K << "\n"
    << "schedule_kind=" << schedule_kind_name(config.schedule.kind) << "\n"
    << "beta_min=" << format_double(config.schedule.beta_min) << "\n"
    << "beta_max=" << format_double(config.schedule.beta_max) << "\n"
    << "eta=" << format_double(config.schedule.eta) << "\n"
    << "beta_base=" << format_double(config.schedule.beta_base) << "\n"
    << "actor_width=" << config.actor.width << "\n"
    << "actor_layers=" << config.actor.layers << "\n"
    << "actor_shapes=" << shapes_of(actor.parameter_values()) << "\n"
    << "critic_shapes=" << shapes_of(state.critic.params) << "\n"
    << "actor_param_count=" << actor_flat.size() << "\n"
    << "critic_param_count=" << critic_flat.size() << "\n"
    << "actor_optim_size=" << a.size() << "\n"
    << "critic_optim_size=" << c.size() << "\n"
    << "clone_optim_size=" << k.size() << "\n"
    << "seed=" << config.seed << "\n"
    << "iteration=" << state.iteration << "\n"
    << "env_steps=" << state.env_steps << "\n";
  if (!m) throw std::runtime_error("cannot write manifest in " + dir.string());
}

std::map<std::string, std::string> read_manifest(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.txt");
  if (!in) throw ConfigError("no checkpoint manifest in " + dir.string());
  std::map<std::string, std::string> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("manifest line " + std::to_string(n) + ": expected key=value");
    }
    out[line.substr(0, eq)] = line.substr(eq + 1);
  }
  if (out["format_version"] != std::to_string(kCheckpointFormatVersion)) {
    throw ConfigError("unsupported checkpoint format_version '" + out["format_version"] + "'");
  }
  return out;
}

RunConfig checkpoint_config(const std::filesystem::path& dir) {
  return load_config(dir / "config.ini");
}

void load_checkpoint_into(const std::filesystem::path& dir, TrainState& state) {
  const auto m = read_manifest(dir);
  Actor& actor = *state.actor;
  std::vector<Tensor> actor_params = actor.parameter_values();
  if (m.at("actor_shapes") != shapes_of(actor_params) ||
      m.at("critic_shapes") != shapes_of(state.critic.params)) {
    throw ConfigError("checkpoint " + dir.string() + " has networks " + m.at("actor_shapes") +
                      " / " + m.at("critic_shapes") + ", config builds " +
                      shapes_of(actor_params) + " / " + shapes_of(state.critic.params));
  }
  if (m.at("actor_kind") != actor.kind()) {
    throw ConfigError("checkpoint holds a " + m.at("actor_kind") + " actor, config needs " +
                      actor.kind());
  }
  const std::vector<double> params = read_f64(dir / "params.bin");
  std::size_t at = take(params, 0, actor_params);
  at = take(params, at, state.critic.params);
  if (at != params.size()) throw ConfigError("checkpoint: params.bin has trailing values");
  actor.set_parameter_values(actor_params);

  const std::vector<double> optim = read_f64(dir / "optim.bin");
  const std::size_t na = manifest_size(m, "actor_optim_size"),
                    nc = manifest_size(m, "critic_optim_size"),
                    nk = manifest_size(m, "clone_optim_size");
  if (na + nc + nk != optim.size()) throw ConfigError("checkpoint: optim.bin size mismatch");
  auto slice = [&](std::size_t from, std::size_t n) {
    return std::vector<double>(optim.begin() + static_cast<long>(from),
                               optim.begin() + static_cast<long>(from + n));
  };
  state.actor_opt.load_state(slice(0, na), actor.parameters());
  state.critic_opt.load_state(slice(na, nc), critic_ptrs(state.critic));
  state.clone_opt.load_state(slice(na + nc, nk), body_ptrs(actor));
  state.iteration = manifest_size(m, "iteration");
  state.env_steps = manifest_size(m, "env_steps");
}

TrainState load_checkpoint(const std::filesystem::path& dir) {
  TrainState state = build_state(checkpoint_config(dir));
  load_checkpoint_into(dir, state);
  return state;
}

}  // namespace ncdpo
