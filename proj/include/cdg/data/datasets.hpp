#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "cdg/autodiff/tensor.hpp"
#include "cdg/rng.hpp"

namespace cdg::data {

// Rows of x with one label (global class index) and task id per row.
struct LabeledData {
  ad::Tensor x;
  std::vector<int> labels;
  std::vector<int> tasks;

  std::size_t size() const { return labels.size(); }
  std::size_t dim() const { return x.cols(); }
  LabeledData select(std::span<const std::size_t> rows) const;
  // Row-wise concatenation; dims must agree.
  static LabeledData concat(std::span<const LabeledData> parts);
};

enum class StreamKind { mixture2d, rings, glyphs8 };
enum class Split { train, test };

std::string to_string(StreamKind kind);
StreamKind parse_stream_kind(const std::string& name);
std::string to_string(Split split);

struct TaskSpec {
  int task_id = 0;
  std::vector<int> labels;
  std::size_t n_train = 0;
  std::size_t n_test = 0;
};

struct StreamConfig {
  StreamKind kind = StreamKind::mixture2d;
  int tasks = 5;
  int classes_per_task = 2;
  std::uint64_t seed = 0;
  std::size_t train_per_task = 8000;
  std::size_t test_per_task = 2000;
};

// K tasks with disjoint label sets {k*c, ..., k*c + c - 1}. All data is a
// deterministic function of the config; splits use disjoint generator streams.
class TaskStream {
 public:
  explicit TaskStream(const StreamConfig& config);

  const StreamConfig& config() const { return config_; }
  int task_count() const { return config_.tasks; }
  int num_labels() const { return config_.tasks * config_.classes_per_task; }
  std::size_t dim() const;
  const std::vector<TaskSpec>& tasks() const { return tasks_; }
  const TaskSpec& task(int k) const;

  // i.i.d. draws for task k, labels uniform over the task's classes.
  LabeledData sample_task(int k, std::size_t n, Rng& rng) const;
  // n samples of a single class.
  ad::Tensor sample_class(int label, std::size_t n, Rng& rng) const;
  // Materialized split of task k (0-based), generated from its own stream.
  LabeledData split(int k, Split which) const;

  // Means of the mixture2d class components, in normalized units.
  std::vector<double> class_mean(int label) const;
  // FNV-1a over both splits of every task.
  std::uint64_t hash() const;

  // CSV with header x0..x{d-1},label,task for one split across all tasks;
  // task numbers are 1-based in the file.
  void export_csv(const std::filesystem::path& path, Split which) const;

 private:
  void sample_into(int label, Rng& rng, std::span<double> out) const;

  StreamConfig config_;
  std::vector<TaskSpec> tasks_;
  double scale_ = 1.0;
  double offset_ = 0.0;
  std::vector<std::vector<double>> glyphs_;  // glyphs8 prototypes in {-1, +1}
};

TaskStream make_stream(const StreamConfig& config);

// Geometry of the mixture2d and rings layouts (unnormalized units).
inline constexpr double kRingRadius = 1.0;
inline constexpr double kRadialStd = 0.05;
inline constexpr double kTangentialStd = 0.15;
inline constexpr double kArcFraction = 0.6;
inline constexpr double kGlyphFlip = 0.1;

}  // namespace cdg::data
