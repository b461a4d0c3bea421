#pragma once

// Command-line front end: generate pairs, train solvers, evaluate, scatter.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "w2bench/benchmark.hpp"
#include "w2bench/metrics.hpp"
#include "w2bench/solvers.hpp"

namespace w2bench {

enum ExitCode : int { kExitOk = 0, kExitDiverged = 2, kExitConfig = 3, kExitIo = 4 };

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  std::string command;
  std::vector<Index> dims;
  std::vector<std::string> solvers;
  std::vector<std::uint64_t> seeds{0};
  std::vector<std::filesystem::path> pairs;
  std::vector<std::filesystem::path> artifacts;
  std::filesystem::path out = ".";
  double iters_scale = 0.1;
  bool paper_iters = false;
  int threads = 1;

  // Overrides of solver defaults; unset means the per-kind default.
  std::optional<Index> iterations;
  std::optional<Index> batch;
  std::optional<double> lr;
  std::optional<Index> pretrain_iters;
  std::optional<Index> log_every;
  /// W2 iterations per part during generation.
  std::optional<Index> fit_iterations;

  std::uint64_t eval_seed = 0;
  Index eval_samples = kEvalSamples;
  Index scatter_points = 512;

  double effective_scale() const { return paper_iters ? 1.0 : iters_scale; }
  /// Throws ConfigError on an unknown kind.
  SolverConfig solver_config(const std::string& solver, std::uint64_t seed) const;
};

// --- solver artifacts (.w2run) ------------------------------------------------

inline constexpr char kRunMagic[9] = "W2SOLV01";

struct TrainedRun {
  SolverOutput output;
  SolverConfig config;
  /// CRC-32 of the pair file the run was trained on (0 when unknown).
  std::uint32_t pair_crc = 0;
};

std::vector<std::uint8_t> serialize_run(const TrainedRun& run);
TrainedRun deserialize_run(const std::vector<std::uint8_t>& bytes);
SolverConfig config_from_json(const std::string& text);

// --- projection for scatter plots -------------------------------------------------

struct Projection {
  Vector center;
  /// D x 2, orthonormal columns, ordered by decreasing variance.
  Matrix axes;
  Vector variances;
  bool fallback = false;
};

/// Top two principal axes of `samples`. With fewer than two nonzero
/// variance directions (for instance D = 1) the coordinate axes are used.
Projection principal_axes(const Matrix& samples);
/// n x 2 coordinates; a missing second axis (D = 1) projects to 0.
Matrix project(const Projection& p, const Matrix& x);

/// One "x y" line per row.
void write_points(const std::filesystem::path& path, const Matrix& points);

/// Solvers x dims text table with an L2-UVP block and a cos block; cells
/// with UVP > 10% or cos < 0.95 are marked with '*'. Rows with several
/// seeds show the mean.
std::string render_matrix(const std::vector<EvalReport>& rows);

// --- commands (exceptions propagate; run_command maps them to exit codes) ---------

int cmd_generate(const RunConfig& cfg, std::ostream& log);
int cmd_train(const RunConfig& cfg, std::ostream& log);
int cmd_eval(const RunConfig& cfg, std::ostream& log);
int cmd_scatter(const RunConfig& cfg, std::ostream& log);

int run_command(const RunConfig& cfg, std::ostream& log, std::ostream& err);

/// Parses argv (flags and an optional --config key=value file; flags win)
/// and runs the command.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

/// Runs jobs 0..count-1 on `threads` workers. Job exceptions are rethrown
/// after all workers finish (the lowest job index wins).
void run_jobs(std::size_t count, int threads, const std::function<void(std::size_t)>& job);

}  // namespace w2bench
