// ncdpo command-line entry point.
//
// Exit codes: 0 success, 1 config/usage error, 2 runtime failure (non-finite halt).

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>

#include "ncdpo/checkpoint.hpp"
#include "ncdpo/config.hpp"
#include "ncdpo/metrics.hpp"
#include "ncdpo/pipeline.hpp"

namespace fs = std::filesystem;
using namespace ncdpo;

namespace {

struct Args {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string algo;
  std::string checkpoint;
  std::string k_list;
  std::string column = "mean_return";
  std::string title = "learning curves";
  std::vector<std::string> csvs;
};

RunConfig effective_config(const Args& a) {
  RunConfig c;
  if (!a.config.empty()) {
    c = load_config(a.config);
  } else if (!a.checkpoint.empty()) {
    c = checkpoint_config(a.checkpoint);
  }
  if (a.seed) c.seed = *a.seed;
  if (!a.algo.empty()) {
    try {
      c.algo = parse_algo(a.algo);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
  }
  c.validate();
  return c;
}

void print_eval(const char* what, const EvalResult& e) {
  std::printf("%s: episodes=%zu mean_return=%.6f success_rate=%.4f\n", what, e.returns.size(),
              e.mean_return, e.success_rate);
}

int cmd_make_demos(const Args& a) {
  const RunConfig c = effective_config(a);
  if (a.out.empty()) throw ConfigError("make-demos needs --out FILE");
  RunConfig gen = c;
  gen.demos_path.clear();
  const DemoSet d = obtain_demos(gen);
  if (fs::path(a.out).has_parent_path()) fs::create_directories(fs::path(a.out).parent_path());
  save_demos(d, a.out);
  double ret = 0.0, succ = 0.0;
  for (std::size_t i = 0; i < d.episode_returns.size(); ++i) {
    ret += d.episode_returns[i];
    succ += d.episode_success[i] ? 1.0 : 0.0;
  }
  const double n = static_cast<double>(std::max<std::size_t>(1, d.episode_returns.size()));
  std::printf("wrote %zu pairs from %zu episodes (%s): mean_return=%.4f success_rate=%.4f\n",
              d.size(), d.episode_returns.size(), demo_quality_name(c.demo_quality).c_str(),
              ret / n, succ / n);
  return 0;
}

int cmd_pretrain(const Args& a) {
  const RunConfig c = effective_config(a);
  if (a.out.empty()) throw ConfigError("pretrain needs --out DIR");
  const DemoSet demos = obtain_demos(c);
  const PretrainResult r = run_pretrain(c, demos, a.out);
  std::printf("pretrained %zu epochs, final bc_loss=%.6f\n", r.loss_trace.size(),
              r.loss_trace.empty() ? 0.0 : r.loss_trace.back());
  print_eval("eval", r.eval);
  return 0;
}

int cmd_train(const Args& a) {
  const RunConfig c = effective_config(a);
  if (a.out.empty()) throw ConfigError("train needs --out DIR");
  TrainState state = build_state(c);
  if (!a.checkpoint.empty()) load_checkpoint_into(a.checkpoint, state);
  const TrainResult r = run_train(c, std::move(state), a.out);
  if (!r.metrics.empty()) {
    const auto& m = r.metrics.back();
    std::printf("iterations=%zu env_steps=%zu last mean_return=%.6f\n", m.iteration, m.env_steps,
                m.mean_return);
  }
  print_eval("eval", r.eval);
  if (r.halted) {
    std::fprintf(stderr, "halted: %s (last good checkpoint saved)\n", r.halt_reason.c_str());
    return 2;
  }
  return 0;
}

int cmd_evaluate(const Args& a) {
  if (a.checkpoint.empty()) throw ConfigError("evaluate needs --checkpoint DIR");
  const RunConfig c = effective_config(a);
  TrainState state = build_state(c);
  load_checkpoint_into(a.checkpoint, state);
  const EvalResult e = evaluate_run(c, *state.actor);
  print_eval("eval", e);
  if (!a.out.empty()) {
    fs::create_directories(a.out);
    write_eval_csv(fs::path(a.out) / "eval.csv", e);
  }
  return 0;
}

int cmd_ablate_k(const Args& a) {
  RunConfig c = effective_config(a);
  if (!a.k_list.empty()) {
    const RunConfig tmp = parse_config("[ablate]\nk_list = " + a.k_list + "\n");
    c.k_list = tmp.k_list;
  }
  if (a.out.empty()) throw ConfigError("ablate-k needs --out DIR");
  fs::create_directories(a.out);
  save_config(c, fs::path(a.out) / "config.ini");
  std::ofstream combined(fs::path(a.out) / "combined.csv", std::ios::binary);
  combined << "K," << metrics_header() << "\n";
  int status = 0;
  for (std::size_t k : c.k_list) {
    RunConfig ck = c;
    ck.K = k;
    const fs::path dir = fs::path(a.out) / ("K_" + std::to_string(k));
    const TrainResult r = run_pretrain_and_train(ck, ck.ablate_pretrain, dir);
    for (const auto& m : r.metrics) combined << k << "," << metrics_row(m) << "\n";
    std::printf("K=%zu: ", k);
    print_eval("eval", r.eval);
    if (r.halted) status = 2;
  }
  return status;
}

int cmd_plot(const Args& a) {
  if (a.out.empty()) throw ConfigError("plot needs --out FILE.svg");
  if (a.csvs.empty()) throw ConfigError("plot needs at least one CSV");
  // label=path groups runs; a bare path is grouped by its run directory's parent name.
  std::map<std::string, PlotSeries> groups;
  std::vector<std::string> order;
  for (const std::string& arg : a.csvs) {
    std::string label, path = arg;
    if (const auto eq = arg.find('='); eq != std::string::npos) {
      label = arg.substr(0, eq);
      path = arg.substr(eq + 1);
    } else {
      const fs::path p(path);
      label = p.parent_path().has_parent_path() ? p.parent_path().parent_path().filename().string()
                                                : p.stem().string();
      if (label.empty()) label = p.stem().string();
    }
    if (!groups.count(label)) {
      order.push_back(label);
      groups[label].label = label;
    }
    groups[label].runs.push_back(read_csv(path));
  }
  std::vector<PlotSeries> series;
  for (const auto& l : order) series.push_back(groups[l]);
  const std::string svg = render_svg(series, a.column, a.title);
  std::ofstream out(a.out, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + a.out);
  out << svg;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Noise-conditioned diffusion policy optimization"};
  app.require_subcommand(1);
  Args a;

  auto common = [&](CLI::App* s) {
    s->add_option("--config", a.config, "INI config file");
    s->add_option("--seed", a.seed, "master seed (overrides the config)");
    s->add_option("--out", a.out, "output directory or file");
  };
  auto* demos = app.add_subcommand("make-demos", "generate a demonstration file");
  common(demos);
  auto* pre = app.add_subcommand("pretrain", "behavior-clone an actor on demonstrations");
  common(pre);
  pre->add_option("--algo", a.algo, "actor family: ncdpo/dppo (diffusion) or mlp_ppo");
  auto* train = app.add_subcommand("train", "PPO fine-tuning or training from scratch");
  common(train);
  train->add_option("--algo", a.algo, "ncdpo, mlp_ppo or dppo");
  train->add_option("--checkpoint", a.checkpoint, "start from (or resume) this checkpoint");
  auto* eval = app.add_subcommand("evaluate", "evaluate a checkpoint (mean/argmax actions unless run.eval_stochastic)");
  common(eval);
  eval->add_option("--checkpoint", a.checkpoint, "checkpoint directory")->required();
  eval->add_option("--algo", a.algo, "override the checkpoint's algo");
  auto* ablate = app.add_subcommand("ablate-k", "repeat pretrain+train for several K");
  common(ablate);
  ablate->add_option("--algo", a.algo, "ncdpo, mlp_ppo or dppo");
  ablate->add_option("--k-list", a.k_list, "comma-separated K values, e.g. 5,10,20");
  auto* plot = app.add_subcommand("plot", "SVG learning curves from metrics CSVs");
  plot->add_option("--out", a.out, "output SVG")->required();
  plot->add_option("--column", a.column, "y column");
  plot->add_option("--title", a.title, "plot title");
  plot->add_option("csvs", a.csvs, "metrics CSVs, optionally label=path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (*demos) return cmd_make_demos(a);
    if (*pre) return cmd_pretrain(a);
    if (*train) return cmd_train(a);
    if (*eval) return cmd_evaluate(a);
    if (*ablate) return cmd_ablate_k(a);
    if (*plot) return cmd_plot(a);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 1;
  } catch (const CsvError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const NonFiniteError& e) {
    std::fprintf(stderr, "halted: %s\n", e.what());
    return 2;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "runtime failure: %s\n", e.what());
    return 2;
  }
  return 1;
}
