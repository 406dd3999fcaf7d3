#include "cdg/runner/runner.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "cdg/ccd/losses.hpp"
#include "cdg/csv.hpp"
#include "cdg/error.hpp"
#include "cdg/replay/buffer.hpp"
#include "cdg/runner/adam.hpp"

namespace cdg::runner {

using nlohmann::json;

std::optional<double> RunRecord::mf() const {
  if (!fidelity.row_complete(fidelity.tasks() - 1)) return std::nullopt;
  return metrics::mf(fidelity);
}

std::optional<double> RunRecord::imf() const {
  for (int k = 0; k < fidelity.tasks(); ++k) {
    if (!fidelity.row_complete(k)) return std::nullopt;
  }
  return metrics::imf(fidelity);
}

namespace {

json optional_number(const std::optional<double>& v) { return v ? json(*v) : json(); }

std::string hex(std::uint64_t h) {
  std::ostringstream s;
  s << std::hex;
  s.width(16);
  s.fill('0');
  s << h;
  return s.str();
}

}  // namespace

json RunRecord::summary() const {
  json j;
  j["schema_version"] = kSchemaVersion;
  j["config"] = config.to_json();
  j["status"] = collapsed() ? "collapsed" : "ok";
  if (collapse) {
    j["collapse"] = {{"kind", collapse->kind},
                     {"task", collapse->task},
                     {"step", collapse->step},
                     {"term", collapse->term},
                     {"message", collapse->message}};
  } else {
    j["collapse"] = nullptr;
  }
  j["fidelity_matrix"] = fidelity.to_json();
  j["mf"] = optional_number(mf());
  j["imf"] = optional_number(imf());
  j["steps_per_task"] = steps_per_task;
  json hashes = json::array();
  for (auto h : model_hashes) hashes.push_back(hex(h));
  j["model_hashes"] = hashes;
  json teachers = json::array();
  for (auto h : teacher_hashes) teachers.push_back(hex(h));
  j["teacher_hashes"] = teachers;
  return j;
}

model::DenoiserConfig model_config(const RunConfig& config, const data::TaskStream& stream) {
  model::DenoiserConfig m;
  m.dim = stream.dim();
  m.hidden = config.model.hidden;
  m.depth = config.model.depth;
  m.num_labels = static_cast<std::size_t>(stream.num_labels());
  m.time_embed = config.model.time_embed;
  return m;
}

std::vector<int> balanced_labels(std::span<const int> classes, std::size_t n) {
  if (classes.empty()) throw DomainError("balanced_labels: no classes");
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = classes[i % classes.size()];
  return out;
}

Evaluator::Evaluator(const RunConfig& config, const data::TaskStream& stream,
                     const diffusion::NoiseSchedule& schedule)
    : config_(&config),
      stream_(&stream),
      schedule_(&schedule),
      embedding_({config.eval.embedding, config.eval.features, config.eval.embed_seed}, stream.dim()) {
  for (int i = 0; i < stream.task_count(); ++i) {
    reference_.push_back(metrics::fit_gaussian(embedding_.apply(stream.split(i, data::Split::test).x)));
  }
}

double Evaluator::distance(const model::Denoiser& model, int k, int i) const {
  const auto labels = balanced_labels(stream_->task(i).labels, config_->eval.n_eval);
  Rng rng = Rng(config_->seed).derive("eval").derive(static_cast<std::uint64_t>(k)).derive(static_cast<std::uint64_t>(i));
  const ad::Tensor samples =
      diffusion::ancestral_sample(model::frozen_predictor(model), labels, stream_->dim(), *schedule_, rng);
  if (!samples.all_finite()) {
    throw NonFiniteError("samples", "evaluation produced non-finite samples for task " + std::to_string(i + 1));
  }
  const double fd = metrics::frechet_distance(metrics::fit_gaussian(embedding_.apply(samples)), reference(i));
  if (!std::isfinite(fd)) throw NonFiniteError("fd", "non-finite Frechet distance for task " + std::to_string(i + 1));
  return fd;
}

double dot(const std::vector<ad::Tensor>& a, const std::vector<ad::Tensor>& b) {
  if (a.size() != b.size()) throw ShapeError("dot: tensor lists differ in length");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].shape() != b[i].shape()) throw ShapeError("dot: tensor shapes differ");
    for (std::size_t j = 0; j < a[i].size(); ++j) s += a[i][j] * b[i][j];
  }
  return s;
}

std::vector<ad::Tensor> agem_project(const std::vector<ad::Tensor>& g, const std::vector<ad::Tensor>& g_ref) {
  const double d = dot(g, g_ref);
  const double rr = dot(g_ref, g_ref);
  if (d >= 0.0 || rr == 0.0) return g;
  const double c = d / rr;
  std::vector<ad::Tensor> out = g;
  for (std::size_t i = 0; i < out.size(); ++i) {
    for (std::size_t j = 0; j < out[i].size(); ++j) out[i][j] -= c * g_ref[i][j];
  }
  return out;
}

double quadratic_penalty(const std::vector<ad::Tensor>& params, const QuadraticAnchor& anchor, double c,
                         std::vector<ad::Tensor>& grads) {
  if (anchor.theta.size() != params.size() || grads.size() != params.size() ||
      (!anchor.fisher.empty() && anchor.fisher.size() != params.size())) {
    throw ShapeError("quadratic_penalty: parameter lists differ in length");
  }
  double value = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = params[i];
    const auto& a = anchor.theta[i];
    if (a.shape() != p.shape() || grads[i].shape() != p.shape()) throw ShapeError("quadratic_penalty: shape mismatch");
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double f = anchor.fisher.empty() ? 1.0 : anchor.fisher[i][j];
      const double diff = p[j] - a[j];
      value += f * diff * diff;
      grads[i][j] += 2.0 * c * f * diff;
    }
  }
  return c * value;
}

std::vector<ad::Tensor> empirical_fisher(const model::Denoiser& model, const data::LabeledData& data,
                                         const diffusion::NoiseSchedule& schedule, std::size_t batch_size,
                                         long batches, Rng& rng) {
  if (batches < 1 || data.size() == 0) throw DomainError("empirical_fisher: need data and at least one batch");
  std::vector<ad::Tensor> fisher;
  for (const auto& p : model.params()) fisher.emplace_back(p.shape());
  for (long b = 0; b < batches; ++b) {
    std::vector<std::size_t> rows(std::min(batch_size, data.size()));
    for (auto& r : rows) r = rng.uniform_int(data.size());
    const auto batch = data.select(rows);
    ad::Tape tape;
    model::BoundDenoiser bound(tape, model, true);
    const auto loss = diffusion::ddpm_cond_loss(tape, bound.predictor(), batch.x, batch.labels, schedule, rng);
    tape.backward(loss);
    const auto grads = collect_grads(tape, bound.params());
    for (std::size_t i = 0; i < fisher.size(); ++i) {
      for (std::size_t j = 0; j < fisher[i].size(); ++j) fisher[i][j] += grads[i][j] * grads[i][j];
    }
  }
  for (auto& f : fisher) {
    for (auto& v : f.data()) v /= static_cast<double>(batches);
  }
  return fisher;
}

namespace {

// Walks seeded permutations of [0, n); the last batch of each pass may be short.
class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::size_t batch, Rng rng) : n_(n), batch_(batch), rng_(rng), order_(n) {
    reshuffle();
  }

  std::vector<std::size_t> next() {
    if (pos_ >= n_) reshuffle();
    const std::size_t end = std::min(pos_ + batch_, n_);
    std::vector<std::size_t> rows(order_.begin() + static_cast<std::ptrdiff_t>(pos_),
                                  order_.begin() + static_cast<std::ptrdiff_t>(end));
    pos_ = end;
    return rows;
  }

 private:
  void reshuffle() {
    for (std::size_t i = 0; i < n_; ++i) order_[i] = i;
    for (std::size_t i = n_; i > 1; --i) std::swap(order_[i - 1], order_[rng_.uniform_int(i)]);
    pos_ = 0;
  }

  std::size_t n_, batch_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

std::vector<int> drop_labels(std::span<const int> labels, double p, int null_label, Rng& rng) {
  std::vector<int> out(labels.begin(), labels.end());
  for (auto& y : out) {
    if (rng.uniform() < p) y = null_label;
  }
  return out;
}

ad::Var poison(ad::Var v) { return ad::add_scalar(v, std::numeric_limits<double>::quiet_NaN()); }

struct TaskContext {
  const RunConfig& config;
  const diffusion::NoiseSchedule& schedule;
  const data::LabeledData& train;
  const replay::ReplayBuffer& buffer;
  const model::TeacherSnapshot* teacher;
  const QuadraticAnchor* anchor;
  int task;  // 0-based
};

LossRow train_step(const TaskContext& ctx, model::Denoiser& model, Adam& adam, BatchSampler& sampler, Rng& rng,
                   long step) {
  const auto& cfg = ctx.config;
  const int null_label = model.config().null_label();
  const auto current = ctx.train.select(sampler.next());
  const std::size_t n = current.size();
  std::optional<data::LabeledData> replay;
  if (uses_buffer(cfg.method) && !ctx.buffer.empty()) replay = ctx.buffer.sample(n, rng);
  // One timestep and one noise draw per (current, replay) pair.
  const auto draw = diffusion::draw_noise(n, model.config().dim, ctx.schedule, rng);
  const auto y_in = drop_labels(current.labels, cfg.train.label_dropout, null_label, rng);
  std::vector<int> yr_in;
  if (replay) yr_in = drop_labels(replay->labels, cfg.train.label_dropout, null_label, rng);

  ad::Tape tape;
  model::BoundDenoiser student(tape, model, true);
  const auto predict = student.predictor();
  ccd::LossTerms terms;
  terms.base = diffusion::ddpm_cond_loss(tape, predict, current.x, y_in, draw, ctx.schedule);
  const bool replay_in_base = replay && (cfg.method == Method::er || cfg.method == Method::ccd);
  if (replay_in_base) {
    terms.base = terms.base + diffusion::ddpm_cond_loss(tape, predict, replay->x, yr_in, draw, ctx.schedule);
  }

  ccd::CcdWeights weights{0.0, 0.0, 0.0};
  if (cfg.method == Method::ccd && ctx.teacher != nullptr && replay) {
    weights = cfg.ccd.weights;
    model::BoundDenoiser teacher(tape, ctx.teacher->model(), false);
    const ad::Tensor x_t = diffusion::forward_diffuse(current.x, draw.t, draw.eps, ctx.schedule);
    const ad::Tensor xr_t = diffusion::forward_diffuse(replay->x, draw.t, draw.eps, ctx.schedule);
    const ccd::PairedBatch pair{x_t, current.labels, xr_t, replay->labels, draw.t};
    if (weights.kappa > 0.0) {
      const auto phi = cfg.ccd.preconditioner.mode == ccd::PreconditionerMode::identity
                           ? ccd::Preconditioner::identity(model.config().dim)
                           : ccd::fisher_preconditioner(ctx.teacher->model(), xr_t, replay->labels, draw.t,
                                                        cfg.ccd.preconditioner);
      terms.ikc = ccd::ikc_loss(student, teacher, pair, phi, cfg.ccd.ikc_student_on_replay);
    }
    if (weights.lambda > 0.0) {
      terms.ukc =
          ccd::ukc_loss(student, teacher, pair, ctx.schedule, cfg.ccd.ukc_w_max, cfg.ccd.ukc_student_on_replay);
    }
    if (weights.eta > 0.0) {
      terms.lkc = ccd::lkc_loss(student, teacher, current.x, replay->x, draw.t, ctx.schedule, cfg.ccd.lkc_w_max);
    }
  }

  if (cfg.inject_nan && cfg.inject_nan->task == ctx.task + 1 && cfg.inject_nan->step == step) {
    const auto& term = cfg.inject_nan->term;
    ad::Var* target = term == "ikc" ? &terms.ikc : term == "ukc" ? &terms.ukc : term == "lkc" ? &terms.lkc : &terms.base;
    if (!target->valid()) throw StateError("inject_nan: term '" + term + "' is not active at this step");
    *target = poison(*target);
  }

  const ad::Var total = ccd::total_loss(terms, weights);

  // Label regressor on clean inputs; its features are detached from the trunk.
  ad::Var head;
  if (replay) {
    const std::array<data::LabeledData, 2> parts{current, *replay};
    const auto both = data::LabeledData::concat(parts);
    head = model::label_cross_entropy(student.label_probabilities(tape.constant(both.x)), both.labels);
  } else {
    head = model::label_cross_entropy(student.label_probabilities(tape.constant(current.x)), current.labels);
  }
  if (!std::isfinite(head.value().item())) throw NonFiniteError("head", "label regressor loss is not finite");

  tape.backward(total + head);
  auto grads = collect_grads(tape, student.params());

  LossRow row;
  row.task = ctx.task + 1;
  row.step = step;
  row.base = terms.base.value().item();
  if (terms.ikc.valid()) row.ikc = terms.ikc.value().item();
  if (terms.ukc.valid()) row.ukc = terms.ukc.value().item();
  if (terms.lkc.valid()) row.lkc = terms.lkc.value().item();
  row.total = total.value().item();
  row.head = head.value().item();

  if (ctx.anchor != nullptr) {
    const double c = cfg.method == Method::l2 ? cfg.baselines.l2_strength : cfg.baselines.ewc_strength;
    if (c > 0.0) {
      const double reg = quadratic_penalty(model.params(), *ctx.anchor, c, grads);
      if (!std::isfinite(reg)) throw NonFiniteError("reg", "regularizer is not finite");
      row.reg = reg;
      row.total += reg;
    }
  }

  if (cfg.method == Method::agem && replay) {
    ad::Tape ref_tape;
    model::BoundDenoiser ref(ref_tape, model, true);
    const auto ref_loss = diffusion::ddpm_cond_loss(ref_tape, ref.predictor(), replay->x, yr_in, draw, ctx.schedule);
    if (!std::isfinite(ref_loss.value().item())) throw NonFiniteError("base", "A-GEM reference loss is not finite");
    ref_tape.backward(ref_loss);
    grads = agem_project(grads, collect_grads(ref_tape, ref.params()));
  }

  adam.step(model.params(), grads);
  return row;
}

void log_line(const RunOptions& options, const std::string& line) {
  if (options.log) options.log(line);
}

}  // namespace

RunRecord run_continual(const RunConfig& config, const RunOptions& options) {
  config.validate();
  RunRecord record;
  record.config = config;
  record.fidelity = metrics::FidelityMatrix(config.data.tasks);

  const auto stream = data::make_stream(config.data);
  const auto schedule = config.schedule.build();
  const Evaluator evaluator(config, stream, schedule);
  const Rng root(config.seed);
  model::Denoiser model = model::Denoiser::init(model_config(config, stream), root.derive("model").seed());
  replay::ReplayBuffer buffer(std::max<std::size_t>(config.buffer_capacity, 1), root.derive("buffer").seed());
  std::optional<model::TeacherSnapshot> teacher;
  std::optional<QuadraticAnchor> anchor;
  if (options.out_dir) std::filesystem::create_directories(*options.out_dir);

  for (int k = 0; k < config.data.tasks; ++k) {
    const auto started = std::chrono::steady_clock::now();
    if (k > 0) {
      teacher.emplace(model);
      if (teacher->hash() != record.model_hashes.back()) {
        throw StateError("teacher snapshot does not match the model at the end of task " + std::to_string(k));
      }
      record.teacher_hashes.push_back(teacher->hash());
    }
    const auto train = stream.split(k, data::Split::train);
    const long steps = config.steps_for(train.size());
    record.steps_per_task.push_back(steps);
    log_line(options, "task " + std::to_string(k + 1) + "/" + std::to_string(config.data.tasks) + ": " +
                          std::to_string(steps) + " steps, method " + to_string(config.method));

    const TaskContext ctx{config, schedule, train, buffer, teacher ? &*teacher : nullptr,
                          anchor ? &*anchor : nullptr, k};
    const Rng task_rng = root.derive("train").derive(static_cast<std::uint64_t>(k));
    BatchSampler sampler(train.size(), config.train.batch_size, task_rng.derive("batches"));
    Rng rng = task_rng.derive("steps");
    Adam adam(AdamConfig{config.train.lr});
    for (long step = 0; step < steps; ++step) {
      try {
        record.losses.push_back(train_step(ctx, model, adam, sampler, rng, step));
      } catch (const NonFiniteError& e) {
        record.collapse = CollapseInfo{"non_finite", k + 1, step, e.term(), e.what()};
        break;
      }
    }
    if (teacher && !teacher->intact()) throw StateError("teacher parameters changed during task " + std::to_string(k + 1));
    record.model_hashes.push_back(model.hash());
    if (record.collapsed()) {
      log_line(options, "collapse at task " + std::to_string(k + 1) + " step " + std::to_string(record.collapse->step) +
                            ": " + record.collapse->message);
      record.task_seconds.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count());
      break;
    }

    if (options.out_dir && config.outputs.checkpoints) {
      model::save(model, *options.out_dir / model::checkpoint_name(k + 1),
                  {{"task", k + 1}, {"method", to_string(config.method)}, {"seed", config.seed}});
    }
    if (config.method == Method::ewc && config.baselines.ewc_strength > 0.0) {
      Rng fisher_rng = task_rng.derive("fisher");
      auto fisher = empirical_fisher(model, train, schedule, config.train.batch_size,
                                     config.baselines.ewc_fisher_batches, fisher_rng);
      // Fisher information accumulates over completed tasks; the anchor moves to the latest weights.
      if (anchor) {
        for (std::size_t i = 0; i < fisher.size(); ++i) {
          for (std::size_t j = 0; j < fisher[i].size(); ++j) fisher[i][j] += anchor->fisher[i][j];
        }
      }
      anchor = QuadraticAnchor{model.params(), std::move(fisher)};
    } else if (config.method == Method::l2) {
      anchor = QuadraticAnchor{model.params(), {}};
    }
    if (uses_buffer(config.method)) {
      buffer.update_after_task(train, k);
      if (options.out_dir && config.outputs.buffers) buffer.dump(*options.out_dir / replay::buffer_dump_name(k + 1));
    }

    try {
      for (int i = 0; i <= k; ++i) record.fidelity.set(k, i, evaluator.distance(model, k, i));
    } catch (const NonFiniteError& e) {
      record.collapse = CollapseInfo{"non_finite", k + 1, -1, e.term(), e.what()};
    }
    record.task_seconds.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count());
    if (record.collapsed()) break;
    std::ostringstream row;
    for (int i = 0; i <= k; ++i) row << (i ? ", " : "") << csv::number(record.fidelity.at(k, i));
    log_line(options, "  d_" + std::to_string(k + 1) + ",* = [" + row.str() + "]");
    if (k > 0 && config.eval.collapse_factor > 0.0 && !record.collapse) {
      const double base = record.fidelity.at(0, 0);
      const double current = record.fidelity.at(k, k);
      if (current > config.eval.collapse_factor * base) {
        record.collapse = CollapseInfo{"fidelity_blowup", k + 1, -1, "fd",
                                       "d_" + std::to_string(k + 1) + "," + std::to_string(k + 1) + " = " +
                                           csv::number(current) + " exceeds " + csv::number(config.eval.collapse_factor) +
                                           " x d_1,1 = " + csv::number(base)};
        log_line(options, "collapse flagged: " + record.collapse->message);
      }
    }
  }
  record.final_model = model;
  if (options.out_dir) write_run_outputs(record, *options.out_dir);
  return record;
}

void write_run_outputs(const RunRecord& record, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const auto open = [&](const char* name) {
    std::ofstream out(dir / name, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open " + (dir / name).string() + " for writing");
    return out;
  };
  {
    auto out = open("run.json");
    out << record.summary().dump(2) << '\n';
  }
  record.fidelity.write_csv(dir / "fidelity_matrix.csv");
  {
    auto out = open("loss_log.csv");
    csv::write_row(out, {"task", "step", "total", "base", "ikc", "ukc", "lkc", "reg", "head"});
    const auto opt = [](const std::optional<double>& v) { return v ? csv::number(*v) : std::string(); };
    for (const auto& r : record.losses) {
      csv::write_row(out, {std::to_string(r.task), std::to_string(r.step), csv::number(r.total), csv::number(r.base),
                           opt(r.ikc), opt(r.ukc), opt(r.lkc), opt(r.reg), csv::number(r.head)});
    }
  }
  {
    // Wall-clock lives apart from run.json so that file stays reproducible.
    auto out = open("timing.json");
    out << json{{"task_seconds", record.task_seconds}}.dump(2) << '\n';
  }
}

}  // namespace cdg::runner
