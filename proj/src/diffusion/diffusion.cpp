#include "cdg/diffusion/diffusion.hpp"

#include <cmath>

#include "cdg/error.hpp"

namespace cdg::diffusion {

using ad::Tensor;
using ad::Var;

namespace {

void check_rows(const Tensor& x, std::span<const int> t, const char* op) {
  if (x.rank() != 2) throw ShapeError(std::string(op) + ": expected a [rows, dim] batch, got " + ad::to_string(x.shape()));
  if (t.size() != x.rows()) {
    throw ShapeError(std::string(op) + ": " + std::to_string(t.size()) + " timesteps for " + std::to_string(x.rows()) +
                     " rows");
  }
}

// Column of per-row coefficients as a [rows, 1] tensor.
template <class F>
Tensor per_row(std::span<const int> t, F f) {
  Tensor out(ad::Shape{t.size(), 1});
  for (std::size_t i = 0; i < t.size(); ++i) out[i] = f(t[i]);
  return out;
}

}  // namespace

NoiseDraw draw_noise(std::size_t rows, std::size_t dim, const NoiseSchedule& schedule, Rng& rng) {
  NoiseDraw d;
  d.t.resize(rows);
  for (auto& t : d.t) t = 1 + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(schedule.steps())));
  d.eps = Tensor(ad::Shape{rows, dim});
  for (auto& v : d.eps.data()) v = rng.normal();
  return d;
}

Tensor forward_diffuse(const Tensor& x0, std::span<const int> t, const Tensor& eps, const NoiseSchedule& schedule) {
  check_rows(x0, t, "forward_diffuse");
  if (eps.shape() != x0.shape()) {
    throw ShapeError("forward_diffuse: eps " + ad::to_string(eps.shape()) + " vs x0 " + ad::to_string(x0.shape()));
  }
  Tensor out(x0.shape());
  const std::size_t d = x0.cols();
  for (std::size_t i = 0; i < x0.rows(); ++i) {
    const double a = schedule.alpha_bar(t[i]);
    const double b = schedule.beta_bar(t[i]);
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = a * x0[i * d + j] + b * eps[i * d + j];
  }
  return out;
}

Tensor forward_diffuse(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& schedule) {
  schedule.check_step(t, "forward_diffuse");
  if (eps.shape() != x0.shape()) {
    throw ShapeError("forward_diffuse: eps " + ad::to_string(eps.shape()) + " vs x0 " + ad::to_string(x0.shape()));
  }
  Tensor out(x0.shape());
  const double a = schedule.alpha_bar(t), b = schedule.beta_bar(t);
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = a * x0[k] + b * eps[k];
  return out;
}

Var ddpm_cond_loss(ad::Tape& tape, const NoisePredictor& model, const Tensor& x0, std::span<const int> labels,
                   const NoiseDraw& draw, const NoiseSchedule& schedule) {
  if (x0.rows() == 0) throw ShapeError("ddpm_cond_loss: empty batch");
  if (labels.size() != x0.rows()) throw ShapeError("ddpm_cond_loss: label count does not match batch");
  Var x_t = tape.constant(forward_diffuse(x0, draw.t, draw.eps, schedule));
  Var eps_hat = model(tape, x_t, draw.t, labels);
  if (eps_hat.shape() != x0.shape()) {
    throw ShapeError("ddpm_cond_loss: model output " + ad::to_string(eps_hat.shape()) + " vs x0 " +
                     ad::to_string(x0.shape()));
  }
  return ad::mean(ad::row_squared_norm(ad::sub(eps_hat, tape.constant(draw.eps))));
}

Var ddpm_cond_loss(ad::Tape& tape, const NoisePredictor& model, const Tensor& x0, std::span<const int> labels,
                   const NoiseSchedule& schedule, Rng& rng) {
  const NoiseDraw draw = draw_noise(x0.rows(), x0.cols(), schedule, rng);
  return ddpm_cond_loss(tape, model, x0, labels, draw, schedule);
}

ReverseCoefficients reverse_coefficients(double alpha, double cumulative) {
  if (!(alpha > 0.0 && alpha <= 1.0)) throw DomainError("reverse_coefficients: alpha outside (0,1]");
  const double x_scale = 1.0 / std::sqrt(alpha);
  if (alpha == 1.0) return {x_scale, 0.0};
  const double denom = std::sqrt(alpha * (1.0 - cumulative));
  if (!(denom > 0.0)) throw DomainError("reverse_coefficients: cumulative product equals 1 with alpha < 1");
  return {x_scale, (1.0 - alpha) / denom};
}

ReverseCoefficients reverse_coefficients(const NoiseSchedule& schedule, int t) {
  schedule.check_step(t, "reverse_mean");
  return reverse_coefficients(schedule.alpha(t), schedule.cumulative(t));
}

Var mean_from_eps(Var x_t, Var eps_hat, std::span<const int> t, const NoiseSchedule& schedule) {
  check_rows(x_t.value(), t, "reverse_mean");
  ad::Tape& tape = *x_t.tape();
  Var xs = tape.constant(per_row(t, [&](int s) { return reverse_coefficients(schedule, s).x_scale; }));
  Var es = tape.constant(per_row(t, [&](int s) { return reverse_coefficients(schedule, s).eps_scale; }));
  return ad::sub(ad::mul(x_t, xs), ad::mul(eps_hat, es));
}

Var reverse_mean(ad::Tape& tape, const NoisePredictor& model, Var x_t, std::span<const int> t,
                 std::span<const int> labels, const NoiseSchedule& schedule) {
  check_rows(x_t.value(), t, "reverse_mean");
  for (int s : t) schedule.check_step(s, "reverse_mean");
  return mean_from_eps(x_t, model(tape, x_t, t, labels), t, schedule);
}

Tensor ancestral_sample(const NoisePredictor& model, std::span<const int> labels, std::size_t dim,
                        const NoiseSchedule& schedule, Rng& rng) {
  const std::size_t n = labels.size();
  if (n == 0) throw DomainError("ancestral_sample: need at least one sample");
  Tensor x(ad::Shape{n, dim});
  for (auto& v : x.data()) v = rng.normal();
  std::vector<int> steps(n);
  for (int t = schedule.steps(); t >= 1; --t) {
    std::fill(steps.begin(), steps.end(), t);
    ad::Tape tape;
    Var mu = reverse_mean(tape, model, tape.constant(x), steps, labels, schedule);
    x = mu.value();
    if (t > 1) {
      const double sigma = std::sqrt(schedule.posterior_variance(t));
      for (auto& v : x.data()) v += sigma * rng.normal();
    }
  }
  return x;
}

Tensor ancestral_sample(const NoisePredictor& model, int label, std::size_t n, std::size_t dim,
                        const NoiseSchedule& schedule, Rng& rng) {
  const std::vector<int> labels(n, label);
  return ancestral_sample(model, labels, dim, schedule, rng);
}

Tensor score_from_eps(const Tensor& eps_hat, int t, const NoiseSchedule& schedule) {
  const double bb = schedule.beta_bar(t);
  if (!(bb > 0.0)) throw DomainError("score_from_eps: beta_bar is zero at t=" + std::to_string(t));
  Tensor out(eps_hat.shape());
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = -eps_hat[k] / bb;
  return out;
}

}  // namespace cdg::diffusion
