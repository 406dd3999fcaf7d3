#include "cdg/ccd/losses.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "cdg/diffusion/diffusion.hpp"
#include "cdg/error.hpp"

namespace cdg::ccd {

using ad::Shape;
using ad::Tape;
using ad::Tensor;
using ad::Var;

void CcdWeights::validate() const {
  const auto check = [](double w, const char* name) {
    if (!std::isfinite(w) || w < 0.0) {
      throw ConfigError(std::string("ccd weight ") + name + " must be finite and >= 0, got " + std::to_string(w));
    }
  };
  check(kappa, "kappa");
  check(lambda, "lambda");
  check(eta, "eta");
}

std::string to_string(PreconditionerMode mode) {
  switch (mode) {
    case PreconditionerMode::identity: return "identity";
    case PreconditionerMode::diagonal: return "diagonal";
    case PreconditionerMode::full: return "full";
  }
  return "?";
}

PreconditionerMode parse_preconditioner_mode(const std::string& name) {
  if (name == "identity") return PreconditionerMode::identity;
  if (name == "diagonal") return PreconditionerMode::diagonal;
  if (name == "full") return PreconditionerMode::full;
  throw ConfigError("unknown preconditioner mode '" + name + "' (expected identity, diagonal or full)");
}

Preconditioner Preconditioner::identity(std::size_t dim) {
  return Preconditioner(PreconditionerMode::identity, dim, Tensor(Shape{dim}, 1.0));
}

Preconditioner Preconditioner::from_gradients(const Tensor& g, const PreconditionerConfig& config) {
  if (g.rank() != 2) throw ShapeError("preconditioner: gradients must be [n, d], got " + ad::to_string(g.shape()));
  const std::size_t n = g.rows(), d = g.cols();
  if (n == 0) throw DomainError("preconditioner: empty batch");
  if (!(config.damping > 0.0) || !std::isfinite(config.damping)) {
    throw DomainError("preconditioner: damping must be > 0");
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  switch (config.mode) {
    case PreconditionerMode::identity:
      return identity(d);
    case PreconditionerMode::diagonal: {
      Tensor diag(Shape{d});
      for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t j = 0; j < d; ++j) diag[j] += g.at(r, j) * g.at(r, j);
      }
      for (auto& v : diag.data()) v = v * inv_n + config.damping;
      return Preconditioner(PreconditionerMode::diagonal, d, std::move(diag));
    }
    case PreconditionerMode::full: {
      if (d > kMaxFullDim) {
        throw DomainError("preconditioner: full mode supports d <= " + std::to_string(kMaxFullDim) + ", got " +
                          std::to_string(d));
      }
      Tensor m(Shape{d, d});
      for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t i = 0; i < d; ++i) {
          for (std::size_t j = 0; j <= i; ++j) m.at(i, j) += g.at(r, i) * g.at(r, j);
        }
      }
      for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t j = 0; j <= i; ++j) {
          m.at(i, j) *= inv_n;
          m.at(j, i) = m.at(i, j);
        }
        m.at(i, i) += config.damping;
      }
      return Preconditioner(PreconditionerMode::full, d, std::move(m));
    }
  }
  throw DomainError("preconditioner: bad mode");
}

Tensor Preconditioner::dense() const {
  if (mode_ == PreconditionerMode::full) return values_;
  Tensor m(Shape{dim_, dim_});
  for (std::size_t i = 0; i < dim_; ++i) m.at(i, i) = values_[i];
  return m;
}

Preconditioner Preconditioner::scaled(double c) const {
  Tensor v = values_;
  for (auto& x : v.data()) x *= c;
  return Preconditioner(mode_ == PreconditionerMode::identity ? PreconditionerMode::diagonal : mode_, dim_,
                        std::move(v));
}

Preconditioner fisher_preconditioner(const model::Denoiser& teacher, const Tensor& x_hat_t,
                                     std::span<const int> y_hat, std::span<const int> t,
                                     const PreconditionerConfig& config) {
  if (x_hat_t.rank() != 2 || x_hat_t.rows() == 0) throw DomainError("fisher_preconditioner: empty batch");
  if (config.mode == PreconditionerMode::identity) return Preconditioner::identity(x_hat_t.cols());
  Tape tape;
  Var x = tape.leaf(x_hat_t, true);
  model::BoundDenoiser bound(tape, teacher, false);
  // Rows are independent, so the gradient of the summed surrogate is the
  // per-row gradient stacked.
  Var s = ad::scale(ad::squared_norm(bound.eps(x, t, y_hat)), 0.5);
  tape.backward(s);
  return Preconditioner::from_gradients(tape.grad(x), config);
}

Var bregman_div(Var u, Var v, const Preconditioner& phi) {
  if (u.shape() != v.shape()) {
    throw ShapeError("bregman_div: operands have shapes " + ad::to_string(u.shape()) + " and " +
                     ad::to_string(v.shape()));
  }
  const std::size_t d = u.value().cols(), n = u.value().rows();
  if (d != phi.dim()) {
    throw ShapeError("bregman_div: operand dim " + std::to_string(d) + " does not match preconditioner dim " +
                     std::to_string(phi.dim()));
  }
  const double c = 0.5 / static_cast<double>(n);
  Var diff = u - v;
  Tape& tape = *u.tape();
  switch (phi.mode()) {
    case PreconditionerMode::identity:
      return ad::scale(ad::squared_norm(diff), c);
    case PreconditionerMode::diagonal:
      return ad::scale(ad::sum(ad::square(diff) * tape.constant(Tensor(Shape{1, d}, phi.values().values()))), c);
    case PreconditionerMode::full:
      return ad::scale(ad::sum(ad::matmul(diff, tape.constant(phi.values())) * diff), c);
  }
  throw DomainError("bregman_div: bad mode");
}

namespace {

void check_pairs(const PairedBatch& b, const char* op) {
  const std::size_t n = b.x_t.rows();
  if (b.xr_t.shape() != b.x_t.shape() || b.y.size() != n || b.yr.size() != n || b.t.size() != n) {
    throw ShapeError(std::string(op) + ": current and replay batches must pair up (current " +
                     ad::to_string(b.x_t.shape()) + ", replay " + ad::to_string(b.xr_t.shape()) + ")");
  }
}

Tensor weights_column(std::span<const int> t, const std::function<double(int)>& w) {
  Tensor out(Shape{t.size(), 1});
  for (std::size_t i = 0; i < t.size(); ++i) out[i] = w(t[i]);
  return out;
}

}  // namespace

Var ikc_loss(model::BoundDenoiser& student, model::BoundDenoiser& teacher, const PairedBatch& batch,
             const Preconditioner& phi, bool student_on_replay) {
  check_pairs(batch, "ikc_loss");
  Tape& tape = *student.params().front().tape();
  Var xr = tape.constant(batch.xr_t);
  Var target = ad::stop_gradient(teacher.eps(xr, batch.t, batch.yr));
  Var loss = bregman_div(target, student.eps(tape.constant(batch.x_t), batch.t, batch.y), phi);
  if (student_on_replay) loss = loss + bregman_div(target, student.eps(xr, batch.t, batch.yr), phi);
  return loss;
}

double ukc_weight(double alpha_bar, double w_max) {
  const double a2 = alpha_bar * alpha_bar;
  if (a2 >= 1.0) {
    if (!std::isfinite(w_max)) throw DomainError("ukc_weight: alpha_bar = 1 makes the weight singular");
    return w_max;
  }
  return std::min(a2 / (1.0 - a2), w_max);
}

double lkc_weight(double alpha_bar, double beta_bar, double w_max) {
  if (beta_bar <= 0.0) {
    if (!std::isfinite(w_max)) throw DomainError("lkc_weight: beta_bar = 0 makes the weight singular");
    return w_max;
  }
  return std::min(alpha_bar / beta_bar, w_max);
}

Var ukc_loss(model::BoundDenoiser& student, model::BoundDenoiser& teacher, const PairedBatch& batch,
             const diffusion::NoiseSchedule& schedule, double w_max, bool student_on_replay) {
  check_pairs(batch, "ukc_loss");
  Tape& tape = *student.params().front().tape();
  const std::vector<int> null(batch.t.size(), teacher.model().config().null_label());
  Var xr = tape.constant(batch.xr_t);
  Var mu_teacher = ad::stop_gradient(diffusion::mean_from_eps(xr, teacher.eps(xr, batch.t, null), batch.t, schedule));
  Var x = tape.constant(batch.x_t);
  Var mu_student = diffusion::mean_from_eps(x, student.eps(x, batch.t, null), batch.t, schedule);
  Var w = tape.constant(weights_column(batch.t, [&](int t) { return ukc_weight(schedule.alpha_bar(t), w_max); }));
  Var loss = ad::mean(ad::row_squared_norm(mu_student - mu_teacher) * w);
  if (student_on_replay) {
    Var mu_replay = diffusion::mean_from_eps(xr, student.eps(xr, batch.t, null), batch.t, schedule);
    loss = loss + ad::mean(ad::row_squared_norm(mu_replay - mu_teacher) * w);
  }
  return loss;
}

Var kl_rows(const Tensor& p, Var q) {
  if (p.shape() != q.shape()) {
    throw ShapeError("kl_rows: distributions have shapes " + ad::to_string(p.shape()) + " and " +
                     ad::to_string(q.shape()));
  }
  Tape& tape = *q.tape();
  Tensor log_p = p;
  for (auto& v : log_p.data()) v = std::log(std::max(v, 1e-12));
  Var pc = tape.constant(p);
  return ad::row_sum(pc * (tape.constant(std::move(log_p)) - ad::log(q, 1e-12)));
}

Var lkc_loss(model::BoundDenoiser& student, model::BoundDenoiser& teacher, const Tensor& x0, const Tensor& xr0,
             std::span<const int> t, const diffusion::NoiseSchedule& schedule, double w_max) {
  if (x0.shape() != xr0.shape() || t.size() != x0.rows()) {
    throw ShapeError("lkc_loss: current " + ad::to_string(x0.shape()) + " and replay " + ad::to_string(xr0.shape()) +
                     " samples must pair up with " + std::to_string(t.size()) + " timesteps");
  }
  Tape& tape = *student.params().front().tape();
  const Tensor p = ad::stop_gradient(teacher.label_probabilities(tape.constant(xr0))).value();
  Var q = student.label_probabilities(tape.constant(x0));
  Tensor w = weights_column(t, [&](int s) { return lkc_weight(schedule.alpha_bar(s), schedule.beta_bar(s), w_max); });
  return ad::mean(kl_rows(p, q) * tape.constant(std::move(w)));
}

namespace {

void require_finite(double v, const char* term) {
  if (!std::isfinite(v)) throw NonFiniteError(term, std::string("loss term '") + term + "' is not finite");
}

}  // namespace

Var total_loss(const LossTerms& terms, const CcdWeights& weights) {
  weights.validate();
  if (!terms.base.valid()) throw StateError("total_loss: base term missing");
  require_finite(terms.base.value().item(), "base");
  Var total = terms.base;
  const auto add = [&](Var term, double w, const char* name) {
    if (!term.valid()) return;
    require_finite(term.value().item(), name);
    if (w != 0.0) total = total + ad::scale(term, w);
  };
  add(terms.ikc, weights.kappa, "ikc");
  add(terms.ukc, weights.lambda, "ukc");
  add(terms.lkc, weights.eta, "lkc");
  return total;
}

double total_loss(double base, double ikc, double ukc, double lkc, const CcdWeights& weights) {
  weights.validate();
  require_finite(base, "base");
  require_finite(ikc, "ikc");
  require_finite(ukc, "ukc");
  require_finite(lkc, "lkc");
  double total = base;
  if (weights.kappa != 0.0) total += weights.kappa * ikc;
  if (weights.lambda != 0.0) total += weights.lambda * ukc;
  if (weights.eta != 0.0) total += weights.eta * lkc;
  return total;
}

}  // namespace cdg::ccd
