#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "ncdpo/config.hpp"
#include "ncdpo/rl.hpp"

namespace ncdpo {

inline constexpr int kCheckpointFormatVersion = 1;

// A checkpoint is a directory:
//   manifest.txt  key=value lines (format_version, specs, seed, K, counters)
//   config.ini    the run config that built the networks
//   params.bin    LE float64: actor params (body, then log sigma) then critic params
//   optim.bin     LE float64: actor, critic and clone optimizer states back to back
void save_checkpoint(const std::filesystem::path& dir, const RunConfig& config,
                     const TrainState& state);

std::map<std::string, std::string> read_manifest(const std::filesystem::path& dir);
RunConfig checkpoint_config(const std::filesystem::path& dir);

// Networks and optimizers built from the checkpoint's own config.
TrainState load_checkpoint(const std::filesystem::path& dir);

// Loads parameters, optimizer states and counters into a state built from
// another config; the network shapes must agree. Throws ConfigError otherwise.
void load_checkpoint_into(const std::filesystem::path& dir, TrainState& state);

// Fresh state for a config: networks from the seed, optimizers from ppo settings.
TrainState build_state(const RunConfig& config);

// Little-endian float64 arrays.
void write_f64(const std::filesystem::path& path, const std::vector<double>& values);
std::vector<double> read_f64(const std::filesystem::path& path);

}  // namespace ncdpo
