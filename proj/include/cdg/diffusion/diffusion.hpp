#pragma once

#include <functional>
#include <span>
#include <vector>

#include "cdg/autodiff/ops.hpp"
#include "cdg/diffusion/schedule.hpp"
#include "cdg/rng.hpp"

namespace cdg::diffusion {

// eps_theta(x_t, t, label) evaluated row-wise; t and labels hold one entry per row.
using NoisePredictor =
    std::function<ad::Var(ad::Tape&, ad::Var x_t, std::span<const int> t, std::span<const int> labels)>;

// Per-row timesteps and standard-normal noise for one batch.
struct NoiseDraw {
  std::vector<int> t;
  ad::Tensor eps;
};

// t ~ Uniform{1..T} independently per row; eps ~ N(0, I).
NoiseDraw draw_noise(std::size_t rows, std::size_t dim, const NoiseSchedule& schedule, Rng& rng);

// alpha_bar(t) x0 + beta_bar(t) eps, with a timestep per row of x0.
ad::Tensor forward_diffuse(const ad::Tensor& x0, std::span<const int> t, const ad::Tensor& eps,
                           const NoiseSchedule& schedule);
ad::Tensor forward_diffuse(const ad::Tensor& x0, int t, const ad::Tensor& eps, const NoiseSchedule& schedule);

// Mean over rows of ||eps_theta(x_t, t, y) - eps||^2 for the supplied draws.
ad::Var ddpm_cond_loss(ad::Tape& tape, const NoisePredictor& model, const ad::Tensor& x0,
                       std::span<const int> labels, const NoiseDraw& draw, const NoiseSchedule& schedule);
ad::Var ddpm_cond_loss(ad::Tape& tape, const NoisePredictor& model, const ad::Tensor& x0,
                       std::span<const int> labels, const NoiseSchedule& schedule, Rng& rng);

// mu = x_scale * x_t - eps_scale * eps_hat with
//   x_scale   = 1 / sqrt(alpha_t)
//   eps_scale = (1 - alpha_t) / sqrt(alpha_t (1 - cumulative_t))
// where cumulative_t = prod_{s<=t} alpha_s = alpha_bar(t)^2.
struct ReverseCoefficients {
  double x_scale;
  double eps_scale;
};
ReverseCoefficients reverse_coefficients(double alpha, double cumulative);
ReverseCoefficients reverse_coefficients(const NoiseSchedule& schedule, int t);

ad::Var mean_from_eps(ad::Var x_t, ad::Var eps_hat, std::span<const int> t, const NoiseSchedule& schedule);
ad::Var reverse_mean(ad::Tape& tape, const NoisePredictor& model, ad::Var x_t, std::span<const int> t,
                     std::span<const int> labels, const NoiseSchedule& schedule);

// Ancestral DDPM chain from x_T ~ N(0, I): x_{t-1} = mu + sigma_t z with the
// posterior variance sigma_t^2 and z = 0 on the final step. One row per label.
ad::Tensor ancestral_sample(const NoisePredictor& model, std::span<const int> labels, std::size_t dim,
                            const NoiseSchedule& schedule, Rng& rng);
ad::Tensor ancestral_sample(const NoisePredictor& model, int label, std::size_t n, std::size_t dim,
                            const NoiseSchedule& schedule, Rng& rng);

// Score estimate -eps_hat / beta_bar(t).
ad::Tensor score_from_eps(const ad::Tensor& eps_hat, int t, const NoiseSchedule& schedule);

}  // namespace cdg::diffusion
