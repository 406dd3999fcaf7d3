#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "cdg/runner/config.hpp"

namespace cdg::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitError = 1;
inline constexpr int kExitCollapse = 2;

// Entry point shared by tools/cdg_lab and the tests. `self` is the executable
// used to launch sweep and ablation points as child processes.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

// "kappa=1e-7,1e-5;lambda=1e-5" -> axis -> values. Values must be positive
// reals; at least one value overall. Throws ConfigError.
std::map<std::string, std::vector<double>> parse_grid(const std::string& spec);

struct Point {
  std::string name;
  runner::RunConfig config;
};

// Cartesian product over kappa, lambda, eta (in that order); axes missing from
// the grid keep the base config's value. Method is forced to ccd.
std::vector<Point> sweep_points(const runner::RunConfig& base, const std::map<std::string, std::vector<double>>& grid);

// The five rows base, +IKC, +IKC+UKC, +IKC+LKC, +IKC+UKC+LKC. The base row is
// method er; the others are ccd with the base config's weights switched on or off.
std::vector<Point> ablation_points(const runner::RunConfig& base);

// Parallel worker cap from CDG_LAB_THREADS (default 1).
int worker_limit();

}  // namespace cdg::cli
