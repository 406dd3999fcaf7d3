#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "cdg/autodiff/tensor.hpp"
#include "json.hpp"

namespace cdg::metrics {

enum class EmbeddingMode { random, identity };
std::string to_string(EmbeddingMode mode);
EmbeddingMode parse_embedding_mode(const std::string& name);

struct EmbeddingConfig {
  EmbeddingMode mode = EmbeddingMode::random;
  std::size_t features = 16;
  std::uint64_t seed = 0;
};

// Frozen feature map shared by every evaluation of a run: tanh(W x + b) with
// W ~ N(0, 1/d) and b ~ N(0, 0.25), or the raw coordinates.
class Embedding {
 public:
  Embedding(const EmbeddingConfig& config, std::size_t input_dim);

  std::size_t input_dim() const { return input_dim_; }
  std::size_t output_dim() const;
  const EmbeddingConfig& config() const { return config_; }
  const Eigen::MatrixXd& weight() const { return w_; }

  // Rows of x in, rows of features out.
  Eigen::MatrixXd apply(const ad::Tensor& x) const;

 private:
  EmbeddingConfig config_;
  std::size_t input_dim_;
  Eigen::MatrixXd w_;  // [features, input_dim]
  Eigen::VectorXd b_;
};

struct GaussianStats {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
  std::size_t count = 0;
  std::size_t dim() const { return static_cast<std::size_t>(mean.size()); }
};

// Sample mean and 1/n covariance of the rows of f.
GaussianStats fit_gaussian(const Eigen::MatrixXd& f);

// |mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2}); the trace of the root
// is taken from the symmetric form S_a^{1/2} S_b S_a^{1/2}.
double frechet_distance(const GaussianStats& a, const GaussianStats& b);

// Lower-triangular d_{k,i}, i <= k, 0-based indices.
class FidelityMatrix {
 public:
  explicit FidelityMatrix(int tasks);

  int tasks() const { return tasks_; }
  void set(int k, int i, double fd);
  bool has(int k, int i) const;
  double at(int k, int i) const;
  bool row_complete(int k) const;

  void write_csv(const std::filesystem::path& path) const;
  nlohmann::json to_json() const;

 private:
  void check_index(int k, int i) const;

  int tasks_;
  std::vector<std::optional<double>> cells_;
};

// Mean of the final row.
double mf(const FidelityMatrix& m);
// Mean over rows of the row means.
double imf(const FidelityMatrix& m);

}  // namespace cdg::metrics
