#include "cdg/metrics/fidelity.hpp"

#include <cmath>
#include <fstream>

#include "cdg/csv.hpp"
#include "cdg/error.hpp"
#include "cdg/rng.hpp"

namespace cdg::metrics {

std::string to_string(EmbeddingMode mode) { return mode == EmbeddingMode::random ? "random" : "identity"; }

EmbeddingMode parse_embedding_mode(const std::string& name) {
  if (name == "random") return EmbeddingMode::random;
  if (name == "identity") return EmbeddingMode::identity;
  throw ConfigError("unknown embedding mode '" + name + "' (expected random or identity)");
}

Embedding::Embedding(const EmbeddingConfig& config, std::size_t input_dim) : config_(config), input_dim_(input_dim) {
  if (input_dim == 0) throw DomainError("embedding: input dimension must be >= 1");
  if (config.mode == EmbeddingMode::identity) return;
  if (config.features == 0) throw DomainError("embedding: feature count must be >= 1");
  Rng rng = Rng(config.seed).derive("embedding");
  const auto f = static_cast<Eigen::Index>(config.features);
  const auto d = static_cast<Eigen::Index>(input_dim);
  w_.resize(f, d);
  b_.resize(f);
  const double scale = 1.0 / std::sqrt(static_cast<double>(input_dim));
  for (Eigen::Index r = 0; r < f; ++r) {
    for (Eigen::Index c = 0; c < d; ++c) w_(r, c) = scale * rng.normal();
  }
  for (Eigen::Index r = 0; r < f; ++r) b_(r) = 0.5 * rng.normal();
}

std::size_t Embedding::output_dim() const {
  return config_.mode == EmbeddingMode::identity ? input_dim_ : config_.features;
}

Eigen::MatrixXd Embedding::apply(const ad::Tensor& x) const {
  if (x.rank() != 2 || x.cols() != input_dim_) {
    throw ShapeError("embedding: expected [n, " + std::to_string(input_dim_) + "], got " + ad::to_string(x.shape()));
  }
  const auto n = static_cast<Eigen::Index>(x.rows());
  const auto d = static_cast<Eigen::Index>(input_dim_);
  const Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> xm(x.data().data(),
                                                                                                   n, d);
  if (config_.mode == EmbeddingMode::identity) return xm;
  Eigen::MatrixXd pre = xm * w_.transpose();
  pre.rowwise() += b_.transpose();
  return pre.array().tanh().matrix();
}

GaussianStats fit_gaussian(const Eigen::MatrixXd& f) {
  if (f.rows() < 2) throw DomainError("fit_gaussian: need at least 2 samples, got " + std::to_string(f.rows()));
  GaussianStats s;
  s.count = static_cast<std::size_t>(f.rows());
  s.mean = f.colwise().mean().transpose();
  const Eigen::MatrixXd centered = f.rowwise() - s.mean.transpose();
  s.cov = (centered.transpose() * centered) / static_cast<double>(f.rows());
  s.cov = 0.5 * (s.cov + s.cov.transpose()).eval();
  return s;
}

namespace {

Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(0.5 * (m + m.transpose()));
  const Eigen::VectorXd root = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return eig.eigenvectors() * root.asDiagonal() * eig.eigenvectors().transpose();
}

}  // namespace

double frechet_distance(const GaussianStats& a, const GaussianStats& b) {
  if (a.dim() != b.dim() || a.cov.rows() != b.cov.rows()) {
    throw ShapeError("frechet_distance: dimension " + std::to_string(a.dim()) + " vs " + std::to_string(b.dim()));
  }
  const Eigen::MatrixXd ra = psd_sqrt(a.cov);
  const Eigen::MatrixXd inner = ra * b.cov * ra;
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(0.5 * (inner + inner.transpose()), Eigen::EigenvaluesOnly);
  const double tr_root = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double fd = (a.mean - b.mean).squaredNorm() + a.cov.trace() + b.cov.trace() - 2.0 * tr_root;
  // Rounding can push identical inputs a hair below zero.
  return std::max(fd, 0.0);
}

FidelityMatrix::FidelityMatrix(int tasks) : tasks_(tasks) {
  if (tasks < 1) throw DomainError("fidelity matrix: need at least one task");
  cells_.resize(static_cast<std::size_t>(tasks * tasks));
}

void FidelityMatrix::check_index(int k, int i) const {
  if (k < 0 || k >= tasks_ || i < 0 || i > k) {
    throw DomainError("fidelity matrix: invalid cell (" + std::to_string(k) + ", " + std::to_string(i) + ")");
  }
}

void FidelityMatrix::set(int k, int i, double fd) {
  check_index(k, i);
  if (!(fd >= 0.0)) throw DomainError("fidelity matrix: entries must be finite and >= 0");
  cells_[static_cast<std::size_t>(k * tasks_ + i)] = fd;
}

bool FidelityMatrix::has(int k, int i) const {
  check_index(k, i);
  return cells_[static_cast<std::size_t>(k * tasks_ + i)].has_value();
}

double FidelityMatrix::at(int k, int i) const {
  if (!has(k, i)) {
    throw StateError("fidelity matrix: cell (" + std::to_string(k) + ", " + std::to_string(i) + ") not set");
  }
  return *cells_[static_cast<std::size_t>(k * tasks_ + i)];
}

bool FidelityMatrix::row_complete(int k) const {
  for (int i = 0; i <= k; ++i) {
    if (!has(k, i)) return false;
  }
  return true;
}

void FidelityMatrix::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  csv::write_row(out, {"k", "i", "fd"});
  for (int k = 0; k < tasks_; ++k) {
    for (int i = 0; i <= k; ++i) {
      if (has(k, i)) csv::write_row(out, {std::to_string(k + 1), std::to_string(i + 1), csv::number(at(k, i))});
    }
  }
}

nlohmann::json FidelityMatrix::to_json() const {
  nlohmann::json rows = nlohmann::json::array();
  for (int k = 0; k < tasks_; ++k) {
    nlohmann::json row = nlohmann::json::array();
    for (int i = 0; i <= k; ++i) row.push_back(has(k, i) ? nlohmann::json(at(k, i)) : nlohmann::json());
    rows.push_back(row);
  }
  return rows;
}

double mf(const FidelityMatrix& m) {
  const int last = m.tasks() - 1;
  if (!m.row_complete(last)) throw StateError("mf: final row of the fidelity matrix is incomplete");
  double sum = 0.0;
  for (int i = 0; i <= last; ++i) sum += m.at(last, i);
  return sum / static_cast<double>(m.tasks());
}

double imf(const FidelityMatrix& m) {
  double outer = 0.0;
  for (int k = 0; k < m.tasks(); ++k) {
    if (!m.row_complete(k)) throw StateError("imf: row " + std::to_string(k + 1) + " is incomplete");
    double row = 0.0;
    for (int i = 0; i <= k; ++i) row += m.at(k, i);
    outer += row / static_cast<double>(k + 1);
  }
  return outer / static_cast<double>(m.tasks());
}

}  // namespace cdg::metrics
