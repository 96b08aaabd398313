#pragma once

// Run-level orchestration shared by the CLI and the acceptance suite. Every
// function takes an optional output directory; an empty path keeps
// everything in memory.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "ncdpo/config.hpp"
#include "ncdpo/envs.hpp"
#include "ncdpo/rl.hpp"

namespace ncdpo {

std::string build_id();

// Writes config.ini, seed.txt and build_id.txt.
void write_run_metadata(const std::filesystem::path& dir, const RunConfig& config);

// Demonstrations for config.env: loaded from config.demos_path when set
// (spec hash and chunk must match), generated from [demos] otherwise.
DemoSet obtain_demos(const RunConfig& config);

struct PretrainResult {
  TrainState state;
  std::vector<double> loss_trace;
  EvalResult eval;
};

// bc pretraining of a fresh actor. Writes bc_loss.csv, eval.csv and
// checkpoint/ under out when given.
PretrainResult run_pretrain(const RunConfig& config, const DemoSet& demos,
                            const std::filesystem::path& out = {});

struct TrainResult {
  TrainState state;
  std::vector<IterationMetrics> metrics;
  EvalResult eval;
  bool halted = false;  // non-finite values; state is the last good one
  std::string halt_reason;
};

// Fine-tunes `state` (fresh, pretrained or resumed). Writes metrics.csv,
// checkpoints/ (periodic, final, last_good on halt) and eval.csv.
TrainResult run_train(const RunConfig& config, TrainState state,
                      const std::filesystem::path& out = {});

// Pretrain (when config has demos to learn from and `pretrain_first`) then train.
TrainResult run_pretrain_and_train(const RunConfig& config, bool pretrain_first,
                                   const std::filesystem::path& out = {});

// Deterministic evaluation with the run's evaluation seed stream.
EvalResult evaluate_run(const RunConfig& config, const Actor& actor);

void write_eval_csv(const std::filesystem::path& path, const EvalResult& eval);

}  // namespace ncdpo
