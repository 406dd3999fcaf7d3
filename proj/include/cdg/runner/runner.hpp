#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "cdg/data/datasets.hpp"
#include "cdg/metrics/fidelity.hpp"
#include "cdg/model/denoiser.hpp"
#include "cdg/runner/config.hpp"
#include "json.hpp"

namespace cdg::runner {

// One optimizer step. Absent terms (inactive method or zero weight) are empty.
struct LossRow {
  int task = 0;  // 1-based
  long step = 0;
  double total = 0.0;
  double base = 0.0;
  std::optional<double> ikc, ukc, lkc, reg;
  double head = 0.0;
};

struct CollapseInfo {
  std::string kind;  // "non_finite" or "fidelity_blowup"
  int task = 0;      // 1-based
  long step = -1;    // -1 when detected at evaluation
  std::string term;
  std::string message;
};

struct RunRecord {
  RunConfig config;
  metrics::FidelityMatrix fidelity{1};
  std::vector<LossRow> losses;
  std::vector<long> steps_per_task;
  std::vector<double> task_seconds;
  std::vector<std::uint64_t> model_hashes;  // after each task
  std::vector<std::uint64_t> teacher_hashes;  // teacher used for each task k >= 2
  std::optional<CollapseInfo> collapse;
  std::optional<model::Denoiser> final_model;

  bool collapsed() const { return collapse.has_value(); }
  std::optional<double> mf() const;
  std::optional<double> imf() const;
  // Contents of run.json: resolved config, status, matrix, MF/IMF. Deterministic.
  nlohmann::json summary() const;
};

struct RunOptions {
  // When set, checkpoints and buffer dumps are written here during the run and
  // run.json, fidelity_matrix.csv, loss_log.csv and timing.json at the end.
  std::optional<std::filesystem::path> out_dir;
  std::function<void(const std::string&)> log;
};

// The K-task protocol: snapshot teacher, train, update buffer, evaluate d_{k,i}.
// A non-finite loss stops the run and is reported through RunRecord::collapse;
// it is not thrown.
RunRecord run_continual(const RunConfig& config, const RunOptions& options = {});

void write_run_outputs(const RunRecord& record, const std::filesystem::path& dir);

// Model shape for a stream.
model::DenoiserConfig model_config(const RunConfig& config, const data::TaskStream& stream);

// n labels cycling through `classes`, so counts differ by at most one.
std::vector<int> balanced_labels(std::span<const int> classes, std::size_t n);

// Fidelity evaluation shared by every task of a run: frozen embedding, cached
// real statistics from each task's test split, seeded class-balanced sampling.
class Evaluator {
 public:
  Evaluator(const RunConfig& config, const data::TaskStream& stream, const diffusion::NoiseSchedule& schedule);

  // d_{k,i}: model after task k (0-based) against task i's test split.
  double distance(const model::Denoiser& model, int k, int i) const;
  const metrics::GaussianStats& reference(int i) const { return reference_[static_cast<std::size_t>(i)]; }

 private:
  const RunConfig* config_;
  const data::TaskStream* stream_;
  const diffusion::NoiseSchedule* schedule_;
  metrics::Embedding embedding_;
  std::vector<metrics::GaussianStats> reference_;
};

// A-GEM: if <g, g_ref> < 0, remove the component of g along g_ref.
std::vector<ad::Tensor> agem_project(const std::vector<ad::Tensor>& g, const std::vector<ad::Tensor>& g_ref);
double dot(const std::vector<ad::Tensor>& a, const std::vector<ad::Tensor>& b);

// Quadratic pull c * sum_j F_j (theta_j - anchor_j)^2. An empty `fisher` means F = 1 (L2).
struct QuadraticAnchor {
  std::vector<ad::Tensor> theta;
  std::vector<ad::Tensor> fisher;
};
// Returns the penalty value and adds its gradient into `grads`.
double quadratic_penalty(const std::vector<ad::Tensor>& params, const QuadraticAnchor& anchor, double c,
                         std::vector<ad::Tensor>& grads);

// Diagonal empirical Fisher: mean over `batches` minibatches of the squared
// gradient of the noise-prediction loss.
std::vector<ad::Tensor> empirical_fisher(const model::Denoiser& model, const data::LabeledData& data,
                                         const diffusion::NoiseSchedule& schedule, std::size_t batch_size,
                                         long batches, Rng& rng);

}  // namespace cdg::runner
