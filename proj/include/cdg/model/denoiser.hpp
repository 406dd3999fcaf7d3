#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "cdg/autodiff/ops.hpp"
#include "cdg/diffusion/diffusion.hpp"
#include "json.hpp"

namespace cdg::model {

struct DenoiserConfig {
  std::size_t dim = 2;
  std::size_t hidden = 64;
  std::size_t depth = 3;
  // Number of real classes L; the vocabulary has one extra null token at index L.
  std::size_t num_labels = 10;
  std::size_t time_embed = 32;

  int null_label() const { return static_cast<int>(num_labels); }
  nlohmann::json to_json() const;
  static DenoiserConfig from_json(const nlohmann::json& j);
  friend bool operator==(const DenoiserConfig&, const DenoiserConfig&) = default;
};

// Residual MLP noise predictor eps_theta(x, t, y) with a label-regressor head
// on the penultimate features. Parameters are plain tensors; see BoundDenoiser
// for evaluation on a tape.
class Denoiser {
 public:
  static Denoiser init(const DenoiserConfig& config, std::uint64_t seed);
  // Rebuilds a model from a flat parameter vector in names() order.
  static Denoiser from_flat(const DenoiserConfig& config, std::span<const double> values);

  const DenoiserConfig& config() const { return config_; }
  const std::vector<std::string>& names() const { return names_; }
  std::vector<ad::Tensor>& params() { return params_; }
  const std::vector<ad::Tensor>& params() const { return params_; }
  std::size_t parameter_count() const;

  std::vector<double> flat() const;
  void set_flat(std::span<const double> values);
  // FNV-1a over every parameter's bit pattern.
  std::uint64_t hash() const;

  // Index range [begin, end) of the head parameters within params().
  std::size_t head_begin() const { return params_.size() - 2; }
  // Fresh head weights drawn from `seed`; trunk untouched.
  void reinit_head(std::uint64_t seed);

  // Tape-free conveniences.
  ad::Tensor predict(const ad::Tensor& x_t, std::span<const int> t, std::span<const int> labels) const;
  ad::Tensor label_probabilities(const ad::Tensor& x0) const;

 private:
  Denoiser(DenoiserConfig config, std::vector<std::string> names, std::vector<ad::Tensor> params)
      : config_(config), names_(std::move(names)), params_(std::move(params)) {}

  DenoiserConfig config_;
  std::vector<std::string> names_;
  std::vector<ad::Tensor> params_;
};

// A Denoiser's parameters placed on a tape, as trainable leaves or constants.
class BoundDenoiser {
 public:
  BoundDenoiser(ad::Tape& tape, const Denoiser& model, bool trainable);
  // Uses caller-supplied vars (one per model parameter, same shapes).
  BoundDenoiser(ad::Tape& tape, const Denoiser& model, std::vector<ad::Var> params);

  // Noise prediction; rows of x_t pair with t[i] and labels[i]. Labels in [0, L].
  ad::Var eps(ad::Var x_t, std::span<const int> t, std::span<const int> labels);
  // silu of the last residual stream (the penultimate layer).
  ad::Var features(ad::Var x_t, std::span<const int> t, std::span<const int> labels);
  // Softmax head over L classes, reading features at t = 1 with the null label.
  // Features enter through stop_gradient, so the head never trains the trunk.
  ad::Var label_probabilities(ad::Var x0);

  const std::vector<ad::Var>& params() const { return params_; }
  diffusion::NoisePredictor predictor();
  const Denoiser& model() const { return *model_; }

 private:
  ad::Var trunk(ad::Var x_t, std::span<const int> t, std::span<const int> labels);

  ad::Tape* tape_;
  const Denoiser* model_;
  std::vector<ad::Var> params_;
};

// Predictor that binds `model` as constants on whatever tape it is handed.
diffusion::NoisePredictor frozen_predictor(const Denoiser& model);

// Mean over rows of -log probs[i, labels[i]], probabilities floored at 1e-12.
ad::Var label_cross_entropy(ad::Var probs, std::span<const int> labels);

// Read-only copy of a model taken at a task boundary.
class TeacherSnapshot {
 public:
  explicit TeacherSnapshot(const Denoiser& model)
      : model_(std::make_shared<const Denoiser>(model)), hash_(model_->hash()) {}

  const Denoiser& model() const { return *model_; }
  std::uint64_t hash() const { return hash_; }
  // True while the stored parameters still hash to the value captured at freeze time.
  bool intact() const { return model_->hash() == hash_; }

 private:
  std::shared_ptr<const Denoiser> model_;
  std::uint64_t hash_;
};

inline TeacherSnapshot freeze_snapshot(const Denoiser& model) { return TeacherSnapshot(model); }

// Checkpoint: magic, JSON header (arch plus caller metadata), little-endian
// float64 parameter blob, trailing FNV-1a checksum.
void save(const Denoiser& model, const std::filesystem::path& path, const nlohmann::json& meta = {});
// Throws ParseError on any malformed or truncated file. `meta` receives the header.
Denoiser load(const std::filesystem::path& path, nlohmann::json* meta = nullptr);

std::string checkpoint_name(int task);

}  // namespace cdg::model
