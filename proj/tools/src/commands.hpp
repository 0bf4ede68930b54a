#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>

#include "config.hpp"

namespace sdlab::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitCheckFailed = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitNumerical = 3;

struct CliOptions {
  std::string config_path;  // empty = built-in defaults
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<unsigned> threads;
  bool timing = false;
  std::optional<std::size_t> count;
  std::optional<std::string> condition;
  std::string which;
  bool corrupt_render_grad = false;
};

/// --threads, else SDLAB_THREADS, else hardware concurrency.
unsigned resolve_threads(const std::optional<unsigned>& flag);

/// Loads, applies --seed / --out, validates. Throws ConfigError.
ExperimentConfig resolve_config(const CliOptions& opts);

int cmd_distill(const CliOptions& opts, std::ostream& out, std::ostream& err);
int cmd_sample(const CliOptions& opts, std::ostream& out, std::ostream& err);
int cmd_analyze(const CliOptions& opts, std::ostream& out, std::ostream& err);
int cmd_gradcheck(const CliOptions& opts, std::ostream& out, std::ostream& err);

/// Full command line, including CLI11 parsing. Returns the exit code.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

struct CheckResult {
  std::string name;
  std::size_t probes = 0;
  double max_error = 0.0;
  double tolerance = 0.0;
  bool passed = false;
};

CheckResult check_score(const ExperimentConfig& cfg, std::size_t probes, std::uint64_t seed);
CheckResult check_cfg(const ExperimentConfig& cfg, std::size_t probes, std::uint64_t seed);
CheckResult check_renderer(std::size_t probes, std::uint64_t seed, bool corrupt = false);
CheckResult check_operator(std::size_t probes, std::uint64_t seed);

}  // namespace sdlab::cli
