#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "cdg/ccd/losses.hpp"
#include "cdg/data/datasets.hpp"
#include "cdg/diffusion/schedule.hpp"
#include "cdg/metrics/fidelity.hpp"
#include "json.hpp"

namespace cdg::runner {

inline constexpr int kSchemaVersion = 1;

enum class Method { naive, er, l2, ewc, agem, ccd };

std::string to_string(Method method);
Method parse_method(const std::string& name);
// er, agem and ccd draw from the replay buffer.
bool uses_buffer(Method method);

struct ModelSpec {
  std::size_t hidden = 64;
  std::size_t depth = 3;
  std::size_t time_embed = 32;
};

struct ScheduleSpec {
  diffusion::ScheduleKind kind = diffusion::ScheduleKind::linear;
  int steps = 200;
  double beta_min = 5e-4;
  double beta_max = 0.1;

  diffusion::NoiseSchedule build() const;
};

struct TrainSpec {
  // Used when epochs == 0; otherwise steps = epochs * ceil(n_train / batch_size).
  long steps_per_task = 2000;
  long epochs = 0;
  std::size_t batch_size = 64;
  double lr = 1e-3;
  double label_dropout = 0.1;
};

struct CcdSpec {
  ccd::CcdWeights weights;
  ccd::PreconditionerConfig preconditioner;
  double ukc_w_max = 100.0;
  double lkc_w_max = 50.0;
  bool ikc_student_on_replay = false;
  bool ukc_student_on_replay = false;
};

struct BaselineSpec {
  double l2_strength = 1e-2;
  double ewc_strength = 1.0;
  long ewc_fisher_batches = 16;
};

struct EvalSpec {
  std::size_t n_eval = 2048;
  metrics::EmbeddingMode embedding = metrics::EmbeddingMode::random;
  std::size_t features = 16;
  std::uint64_t embed_seed = 0;
  // d_{k,k} above this multiple of d_{1,1} flags a collapse; 0 disables.
  double collapse_factor = 10.0;
};

struct OutputSpec {
  bool checkpoints = true;
  bool buffers = true;
};

// Forces a NaN into one loss term at a given (1-based task, 0-based step).
struct NanInjection {
  int task = 1;
  long step = 0;
  std::string term = "base";
};

struct RunConfig {
  Method method = Method::ccd;
  std::uint64_t seed = 0;
  data::StreamConfig data;
  ModelSpec model;
  ScheduleSpec schedule;
  TrainSpec train;
  std::size_t buffer_capacity = 512;
  CcdSpec ccd;
  BaselineSpec baselines;
  EvalSpec eval;
  OutputSpec outputs;
  std::optional<NanInjection> inject_nan;

  RunConfig();

  // Throws ConfigError naming the offending field.
  void validate() const;
  // Every field, defaults included.
  nlohmann::json to_json() const;
  // Missing fields keep their defaults; unknown keys and a wrong schema_version
  // are ConfigErrors. The result is validated.
  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const std::filesystem::path& path);

  long steps_for(std::size_t n_train) const;
};

}  // namespace cdg::runner
