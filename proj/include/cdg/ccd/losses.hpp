#pragma once

#include <limits>
#include <span>
#include <string>

#include "cdg/autodiff/ops.hpp"
#include "cdg/diffusion/schedule.hpp"
#include "cdg/model/denoiser.hpp"
#include "json.hpp"

namespace cdg::ccd {

struct CcdWeights {
  double kappa = 1e-5;
  double lambda = 1e-5;
  double eta = 1e-5;

  // Throws ConfigError on negative or non-finite weights.
  void validate() const;
};

enum class PreconditionerMode { identity, diagonal, full };

std::string to_string(PreconditionerMode mode);
PreconditionerMode parse_preconditioner_mode(const std::string& name);

struct PreconditionerConfig {
  PreconditionerMode mode = PreconditionerMode::diagonal;
  double damping = 1e-3;
};

// Largest dimension for which the dense d x d preconditioner is allowed.
inline constexpr std::size_t kMaxFullDim = 64;

// phi = mean_i g_i g_i^T + damping I, stored densely for `full` and as its
// diagonal otherwise. Identity mode is exactly I (no damping).
class Preconditioner {
 public:
  static Preconditioner identity(std::size_t dim);
  // Rows of `g` are per-sample gradients.
  static Preconditioner from_gradients(const ad::Tensor& g, const PreconditionerConfig& config);

  PreconditionerMode mode() const { return mode_; }
  std::size_t dim() const { return dim_; }
  // [d] for identity/diagonal, [d, d] for full.
  const ad::Tensor& values() const { return values_; }
  ad::Tensor dense() const;
  Preconditioner scaled(double c) const;

 private:
  Preconditioner(PreconditionerMode mode, std::size_t dim, ad::Tensor values)
      : mode_(mode), dim_(dim), values_(std::move(values)) {}

  PreconditionerMode mode_;
  std::size_t dim_;
  ad::Tensor values_;
};

// Preconditioner from the teacher's input gradients of s = 1/2 ||eps_teacher(x, y, t)||^2,
// one gradient per replay row. Evaluated on its own tape; nothing flows back.
Preconditioner fisher_preconditioner(const model::Denoiser& teacher, const ad::Tensor& x_hat_t,
                                     std::span<const int> y_hat, std::span<const int> t,
                                     const PreconditionerConfig& config);

// Mean over rows of 1/2 (u - v)^T phi (u - v).
ad::Var bregman_div(ad::Var u, ad::Var v, const Preconditioner& phi);

struct PairedBatch {
  ad::Tensor x_t;          // current, noised
  std::span<const int> y;  // current labels
  ad::Tensor xr_t;         // replay, noised with the same t and eps
  std::span<const int> yr;
  std::span<const int> t;
};

// The consistency terms take the teacher bound on the same tape as the student.
// Teacher outputs pass through stop_gradient, so even a teacher bound with
// trainable leaves receives no gradient.

// D_phi(teacher(x_hat_t, y_hat, t) || student(x_t, y, t)), averaged over pairs.
// With student_on_replay the distillation term D_phi(teacher(x_hat_t) || student(x_hat_t))
// is added.
ad::Var ikc_loss(model::BoundDenoiser& student, model::BoundDenoiser& teacher, const PairedBatch& batch,
                 const Preconditioner& phi, bool student_on_replay = false);

// alpha_bar^2 / (1 - alpha_bar^2), clamped at w_max. Infinite w_max means no clamp,
// in which case alpha_bar = 1 is a DomainError.
double ukc_weight(double alpha_bar, double w_max = std::numeric_limits<double>::infinity());
// alpha_bar / beta_bar, clamped at w_max; beta_bar = 0 needs a finite clamp.
double lkc_weight(double alpha_bar, double beta_bar, double w_max = std::numeric_limits<double>::infinity());

// Mean over pairs of w(t_i) ||mu_student(x_t) - mu_teacher(x_hat_t)||^2, both means
// computed with the null label. With student_on_replay the same-input term
// w(t_i) ||mu_student(x_hat_t) - mu_teacher(x_hat_t)||^2 is added.
ad::Var ukc_loss(model::BoundDenoiser& student, model::BoundDenoiser& teacher, const PairedBatch& batch,
                 const diffusion::NoiseSchedule& schedule, double w_max, bool student_on_replay = false);

// Row-wise KL(p || q) with both distributions floored at 1e-12; p is a constant.
ad::Var kl_rows(const ad::Tensor& p, ad::Var q);

// Mean over pairs of w(t_i) KL(h_teacher(y | x_hat_0) || h_student(y | x_0)).
ad::Var lkc_loss(model::BoundDenoiser& student, model::BoundDenoiser& teacher, const ad::Tensor& x0,
                 const ad::Tensor& xr0, std::span<const int> t, const diffusion::NoiseSchedule& schedule,
                 double w_max);

struct LossTerms {
  ad::Var base;
  ad::Var ikc;
  ad::Var ukc;
  ad::Var lkc;
};

// base + kappa ikc + lambda ukc + eta lkc. Terms with zero weight (or absent)
// are left out of the graph. Any non-finite term throws NonFiniteError naming it.
ad::Var total_loss(const LossTerms& terms, const CcdWeights& weights);
double total_loss(double base, double ikc, double ukc, double lkc, const CcdWeights& weights);

}  // namespace cdg::ccd
