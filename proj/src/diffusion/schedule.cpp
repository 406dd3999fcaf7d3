#include "cdg/diffusion/schedule.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "cdg/error.hpp"

namespace cdg::diffusion {

std::string to_string(ScheduleKind kind) { return kind == ScheduleKind::linear ? "linear" : "cosine"; }

ScheduleKind parse_schedule_kind(std::string_view name) {
  if (name == "linear") return ScheduleKind::linear;
  if (name == "cosine") return ScheduleKind::cosine;
  throw ConfigError("unknown schedule kind '" + std::string(name) + "' (expected linear|cosine)");
}

NoiseSchedule NoiseSchedule::from_betas(std::vector<double> betas) {
  if (betas.empty()) throw DomainError("NoiseSchedule: no steps");
  NoiseSchedule s;
  double prod = 1.0;
  for (double b : betas) {
    if (!(b >= 0.0 && b < 1.0)) throw DomainError("NoiseSchedule: beta " + std::to_string(b) + " outside [0,1)");
    const double a = 1.0 - b;
    prod *= a;
    s.alpha_.push_back(a);
    s.cumulative_.push_back(prod);
    s.alpha_bar_.push_back(std::sqrt(prod));
    s.beta_bar_.push_back(std::sqrt(1.0 - prod));
  }
  s.beta_ = std::move(betas);
  return s;
}

std::size_t NoiseSchedule::index(int t) const {
  check_step(t, "NoiseSchedule");
  return static_cast<std::size_t>(t - 1);
}

void NoiseSchedule::check_step(int t, const char* op) const {
  if (t < 1 || t > steps()) {
    throw DomainError(std::string(op) + ": timestep " + std::to_string(t) + " outside [1," + std::to_string(steps()) +
                      "]");
  }
}

double NoiseSchedule::posterior_variance(int t) const {
  if (t == 1) {
    check_step(t, "posterior_variance");
    return 0.0;
  }
  const double denom = 1.0 - cumulative(t);
  if (denom <= 0.0) return 0.0;
  return beta(t) * (1.0 - cumulative(t - 1)) / denom;
}

nlohmann::json NoiseSchedule::to_json() const {
  return nlohmann::json{{"steps", steps()}, {"beta", beta_}, {"alpha_bar", alpha_bar_}, {"beta_bar", beta_bar_}};
}

NoiseSchedule NoiseSchedule::from_json(const nlohmann::json& j) {
  try {
    return from_betas(j.at("beta").get<std::vector<double>>());
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("NoiseSchedule: ") + e.what());
  }
}

NoiseSchedule build_schedule(int steps, double beta_min, double beta_max, ScheduleKind kind) {
  if (steps < 2) throw DomainError("build_schedule: need at least 2 steps, got " + std::to_string(steps));
  if (!(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0)) {
    throw DomainError("build_schedule: need 0 < beta_min <= beta_max < 1, got " + std::to_string(beta_min) + ", " +
                      std::to_string(beta_max));
  }
  std::vector<double> betas(static_cast<std::size_t>(steps));
  if (kind == ScheduleKind::linear) {
    for (int t = 1; t <= steps; ++t) {
      betas[static_cast<std::size_t>(t - 1)] =
          beta_min + (beta_max - beta_min) * static_cast<double>(t - 1) / static_cast<double>(steps - 1);
    }
  } else {
    constexpr double offset = 0.008;
    auto f = [&](int t) {
      const double c = std::cos((static_cast<double>(t) / steps + offset) / (1.0 + offset) * std::numbers::pi / 2.0);
      return c * c;
    };
    for (int t = 1; t <= steps; ++t) {
      const double b = 1.0 - f(t) / f(t - 1);
      betas[static_cast<std::size_t>(t - 1)] = std::clamp(b, beta_min, beta_max);
    }
  }
  return NoiseSchedule::from_betas(std::move(betas));
}

}  // namespace cdg::diffusion
