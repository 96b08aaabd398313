#include "ncdpo/pipeline.hpp"

#include <fstream>

#include "ncdpo/checkpoint.hpp"
#include "ncdpo/metrics.hpp"

#ifndef NCDPO_BUILD_ID
#define NCDPO_BUILD_ID "unknown"
#endif

namespace ncdpo {

namespace {

constexpr std::uint64_t kDemoStream = 31;
constexpr std::uint64_t kPretrainStream = 32;
constexpr std::uint64_t kEvalStream = 33;

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

}  // namespace

EvalResult evaluate_run(const RunConfig& config, const Actor& actor) {
  return evaluate_policy(actor, config.env, config.eval_episodes,
                         derive_seed(config.seed, kEvalStream), !config.eval_stochastic);
}

std::string build_id() { return NCDPO_BUILD_ID; }

void write_run_metadata(const std::filesystem::path& dir, const RunConfig& config) {
  std::filesystem::create_directories(dir);
  save_config(config, dir / "config.ini");
  write_text(dir / "seed.txt", std::to_string(config.seed) + "\n");
  write_text(dir / "build_id.txt", build_id() + "\n");
}

void write_eval_csv(const std::filesystem::path& path, const EvalResult& eval) {
  std::string text = "episodes,mean_return,success_rate\n";
  text += std::to_string(eval.returns.size()) + "," + format_double(eval.mean_return) + "," +
          format_double(eval.success_rate) + "\n";
  write_text(path, text);
}

DemoSet obtain_demos(const RunConfig& config) {
  if (!config.demos_path.empty()) {
    DemoSet d = load_demos(config.demos_path);
    if (d.spec_hash != config.env.spec_hash()) {
      throw ConfigError("demonstrations " + config.demos_path +
                        " were made for a different env spec (hash " +
                        std::to_string(d.spec_hash) + ", config has " +
                        std::to_string(config.env.spec_hash()) + ")");
    }
    return d;
  }
  Rng rng(derive_seed(config.seed, kDemoStream));
  return make_demonstrations(config.env, config.demo_quality, config.demo_episodes, rng);
}

PretrainResult run_pretrain(const RunConfig& config, const DemoSet& demos,
                            const std::filesystem::path& out) {
  if (config.algo == Algo::dppo && env_is_discrete(config.env)) {
    throw ConfigError("dppo supports continuous envs only");
  }
  PretrainResult r{build_state(config), {}, {}};
  r.loss_trace = pretrain(*r.state.actor, demos, config.pretrain,
                          derive_seed(config.seed, kPretrainStream));
  r.eval = evaluate_run(config, *r.state.actor);
  if (!out.empty()) {
    write_run_metadata(out, config);
    std::string csv = "epoch,bc_loss\n";
    for (std::size_t i = 0; i < r.loss_trace.size(); ++i) {
      csv += std::to_string(i + 1) + "," + format_double(r.loss_trace[i]) + "\n";
    }
    write_text(out / "bc_loss.csv", csv);
    write_eval_csv(out / "eval.csv", r.eval);
    save_checkpoint(out / "checkpoint", config, r.state);
  }
  return r;
}

TrainResult run_train(const RunConfig& config, TrainState state,
                      const std::filesystem::path& out) {
  const TrainConfig tc = config.train_config();
  std::optional<MetricsWriter> writer;
  if (!out.empty()) {
    write_run_metadata(out, config);
    writer.emplace(out / "metrics.csv");
  }
  TrainResult r;
  auto on_iteration = [&](const IterationMetrics& m, const TrainState& s) {
    if (writer) {
      writer->write(m);
      if (config.checkpoint_every > 0 && m.iteration % config.checkpoint_every == 0) {
        char name[32];
        std::snprintf(name, sizeof name, "iter_%06zu", m.iteration);
        save_checkpoint(out / "checkpoints" / name, config, s);
      }
    }
  };
  try {
    r.metrics = train(config.env, tc, state, on_iteration);
  } catch (const NonFiniteError& e) {
    r.halted = true;
    r.halt_reason = e.what();
  }
  r.eval = evaluate_run(config, *state.actor);
  if (!out.empty()) {
    save_checkpoint(out / "checkpoints" / (r.halted ? "last_good" : "final"), config, state);
    write_eval_csv(out / "eval.csv", r.eval);
  }
  r.state = std::move(state);
  return r;
}

TrainResult run_pretrain_and_train(const RunConfig& config, bool pretrain_first,
                                   const std::filesystem::path& out) {
  if (!pretrain_first) return run_train(config, build_state(config), out.empty() ? out : out / "train");
  const DemoSet demos = obtain_demos(config);
  PretrainResult p = run_pretrain(config, demos, out.empty() ? out : out / "pretrain");
  return run_train(config, std::move(p.state), out.empty() ? out : out / "train");
}

}  // namespace ncdpo
