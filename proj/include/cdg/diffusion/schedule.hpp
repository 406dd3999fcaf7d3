#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace cdg::diffusion {

enum class ScheduleKind { linear, cosine };

std::string to_string(ScheduleKind kind);
ScheduleKind parse_schedule_kind(std::string_view name);

// Discrete DDPM schedule indexed by t = 1..T.
//
//   alpha(t)     = 1 - beta(t)
//   cumulative(t) = prod_{s<=t} alpha(s)
//   alpha_bar(t) = sqrt(cumulative(t))        signal scale of x_t
//   beta_bar(t)  = sqrt(1 - cumulative(t))    noise scale of x_t
//
// so that x_t = alpha_bar(t) x_0 + beta_bar(t) eps and
// alpha_bar(t)^2 + beta_bar(t)^2 = 1.
class NoiseSchedule {
 public:
  // betas[t-1] for t = 1..T, each in [0, 1). Zero betas are accepted here to
  // allow degenerate diagnostic schedules; build_schedule never produces them.
  static NoiseSchedule from_betas(std::vector<double> betas);

  int steps() const { return static_cast<int>(beta_.size()); }

  double beta(int t) const { return beta_[index(t)]; }
  double alpha(int t) const { return alpha_[index(t)]; }
  double cumulative(int t) const { return cumulative_[index(t)]; }
  double alpha_bar(int t) const { return alpha_bar_[index(t)]; }
  double beta_bar(int t) const { return beta_bar_[index(t)]; }
  // Variance of q(x_{t-1} | x_t, x_0); zero at t = 1.
  double posterior_variance(int t) const;

  // Throws DomainError unless 1 <= t <= T.
  void check_step(int t, const char* op) const;

  nlohmann::json to_json() const;
  static NoiseSchedule from_json(const nlohmann::json& j);

 private:
  std::size_t index(int t) const;

  std::vector<double> beta_, alpha_, cumulative_, alpha_bar_, beta_bar_;
};

// Linear: beta interpolates beta_min..beta_max. Cosine: the squared-cosine
// cumulative profile with offset 0.008, betas clipped into [beta_min, beta_max].
NoiseSchedule build_schedule(int steps, double beta_min, double beta_max, ScheduleKind kind = ScheduleKind::linear);

}  // namespace cdg::diffusion
