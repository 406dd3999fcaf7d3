#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "cdg/error.hpp"
#include "cdg/runner/runner.hpp"
#include "doctest.h"
#include "model_support.hpp"
#include "runner_support.hpp"
#include "test_support.hpp"

using namespace cdg;
using namespace cdg::runner;
using nlohmann::json;

namespace {

void check_same_trajectory(const RunRecord& a, const RunRecord& b) {
  REQUIRE(a.losses.size() == b.losses.size());
  for (std::size_t i = 0; i < a.losses.size(); ++i) {
    CHECK(a.losses[i].total == b.losses[i].total);
    CHECK(a.losses[i].base == b.losses[i].base);
    CHECK(a.losses[i].head == b.losses[i].head);
  }
  CHECK(a.model_hashes == b.model_hashes);
  CHECK(a.fidelity.to_json() == b.fidelity.to_json());
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

}  // namespace

TEST_CASE("run config defaults round-trip through JSON") {
  const RunConfig c;
  CHECK(c.method == Method::ccd);
  CHECK(c.train.steps_per_task == 2000);
  CHECK(c.train.batch_size == 64);
  CHECK(c.train.lr == 1e-3);
  CHECK(c.eval.n_eval == 2048);
  CHECK(c.ccd.weights.kappa == 1e-5);
  CHECK(c.baselines.ewc_strength == 1.0);
  CHECK(c.baselines.l2_strength == 1e-2);
  const json j = c.to_json();
  CHECK(j.at("schema_version") == kSchemaVersion);
  CHECK(RunConfig::from_json(j).to_json() == j);

  auto t = test::tiny_run(Method::agem);
  t.inject_nan = NanInjection{2, 5, "base"};
  CHECK(RunConfig::from_json(t.to_json()).to_json() == t.to_json());
}

TEST_CASE("run config is fail-closed") {
  const json good = RunConfig().to_json();
  auto with = [&](const json::json_pointer& ptr, json v) {
    json j = good;
    j[ptr] = std::move(v);
    return j;
  };
  CHECK_THROWS_AS(RunConfig::from_json(with(json::json_pointer("/surprise"), 1)), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json(with(json::json_pointer("/train/momentum"), 0.9)), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json(with(json::json_pointer("/schema_version"), 2)), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json(with(json::json_pointer("/method"), "kd")), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json(with(json::json_pointer("/train/lr"), "fast")), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json(with(json::json_pointer("/ccd/kappa"), -1.0)), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json(with(json::json_pointer("/data"), 5)), ConfigError);
  json missing = good;
  missing.erase("schema_version");
  CHECK_THROWS_AS(RunConfig::from_json(missing), ConfigError);
  // Partial configs fill in defaults.
  const auto partial = RunConfig::from_json(json{{"schema_version", 1}, {"method", "er"}, {"train", {{"batch_size", 8}}}});
  CHECK(partial.method == Method::er);
  CHECK(partial.train.batch_size == 8);
  CHECK(partial.train.steps_per_task == 2000);
}

TEST_CASE("method-specific validation") {
  auto c = test::tiny_run(Method::er);
  c.buffer_capacity = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.method = Method::naive;
  CHECK_NOTHROW(c.validate());
  c.method = Method::ccd;
  c.buffer_capacity = 8;
  c.inject_nan = NanInjection{1, 0, "ikc"};
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.inject_nan = NanInjection{2, 0, "ikc"};
  CHECK_NOTHROW(c.validate());
  c.ccd.weights.kappa = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.inject_nan = NanInjection{3, 0, "base"};
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK_THROWS_AS(parse_method("si"), ConfigError);
  CHECK(uses_buffer(Method::agem));
  CHECK_FALSE(uses_buffer(Method::ewc));
}

TEST_CASE("step count is epochs times batches per epoch") {
  RunConfig c;
  c.train.batch_size = 64;
  CHECK(c.steps_for(1000) == 2000);
  c.train.epochs = 3;
  CHECK(c.steps_for(1000) == 3 * 16);
  CHECK(c.steps_for(1024) == 3 * 16);
  CHECK(c.steps_for(1025) == 3 * 17);

  auto t = test::tiny_run(Method::naive);
  t.train.epochs = 2;
  t.train.batch_size = 30;
  t.data.tasks = 1;
  const auto r = run_continual(t);
  CHECK(r.losses.size() == 2 * 14);  // ceil(400 / 30) = 14
  CHECK(r.steps_per_task == std::vector<long>{28});
}

TEST_CASE("balanced evaluation labels") {
  const std::vector<int> classes{4, 5};
  const auto l = balanced_labels(classes, 5);
  CHECK(l == std::vector<int>{4, 5, 4, 5, 4});
  CHECK_THROWS_AS(balanced_labels(std::vector<int>{}, 3), DomainError);
}

TEST_CASE("A-GEM projection never opposes the reference gradient") {
  Rng rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<ad::Tensor> g{test::random_tensor({3, 4}, rng), test::random_tensor({5}, rng)};
    std::vector<ad::Tensor> r{test::random_tensor({3, 4}, rng), test::random_tensor({5}, rng)};
    const auto p = agem_project(g, r);
    const double scale = std::sqrt(dot(g, g) * dot(r, r));
    CAPTURE(trial);
    CHECK(dot(p, r) >= -1e-12 * scale);
    if (dot(g, r) >= 0.0) CHECK(dot(p, p) == dot(g, g));
  }
  // Hand case: g = (1, -1), r = (0, 1) -> (1, 0).
  const auto p = agem_project({ad::Tensor::vector({1.0, -1.0})}, {ad::Tensor::vector({0.0, 1.0})});
  CHECK(p[0][0] == 1.0);
  CHECK(p[0][1] == 0.0);
}

TEST_CASE("quadratic penalty value and gradient") {
  Rng rng(2);
  const std::vector<ad::Tensor> theta{test::random_tensor({2, 3}, rng)};
  const QuadraticAnchor l2{{test::random_tensor({2, 3}, rng)}, {}};
  const QuadraticAnchor ewc{l2.theta, {test::positive_tensor({2, 3}, rng)}};
  for (const auto* anchor : {&l2, &ewc}) {
    std::vector<ad::Tensor> grads{ad::Tensor({2, 3})};
    const double c = 0.7;
    const double value = quadratic_penalty(theta, *anchor, c, grads);
    double expect = 0.0;
    for (std::size_t j = 0; j < 6; ++j) {
      const double f = anchor->fisher.empty() ? 1.0 : anchor->fisher[0][j];
      const double d = theta[0][j] - anchor->theta[0][j];
      expect += c * f * d * d;
      // Central difference of the quadratic is exact up to rounding.
      auto up = theta, down = theta;
      up[0][j] += 1e-6;
      down[0][j] -= 1e-6;
      std::vector<ad::Tensor> scratch{ad::Tensor({2, 3})};
      const double fd = (quadratic_penalty(up, *anchor, c, scratch) - quadratic_penalty(down, *anchor, c, scratch)) / 2e-6;
      CHECK(grads[0][j] == doctest::Approx(fd).epsilon(1e-6));
    }
    CHECK(value == doctest::Approx(expect).epsilon(1e-14));
  }
}

TEST_CASE("empirical Fisher entries are non-negative") {
  const auto cfg = test::tiny_run(Method::ewc);
  const auto stream = data::make_stream(cfg.data);
  const auto m = model::Denoiser::init(model_config(cfg, stream), 1);
  Rng rng(4);
  const auto fisher = empirical_fisher(m, stream.split(0, data::Split::train), cfg.schedule.build(), 16, 4, rng);
  REQUIRE(fisher.size() == m.params().size());
  double total = 0.0;
  for (const auto& f : fisher) {
    for (double v : f.data()) {
      CHECK(v >= 0.0);
      total += v;
    }
  }
  CHECK(total > 0.0);
}

TEST_CASE("single-task run has MF equal to IMF") {
  auto c = test::tiny_run(Method::naive);
  c.data.tasks = 1;
  const auto r = run_continual(c);
  REQUIRE_FALSE(r.collapsed());
  CHECK(*r.mf() == *r.imf());
  CHECK(*r.mf() == r.fidelity.at(0, 0));
}

TEST_CASE("runs are deterministic for every method") {
  for (Method m : {Method::naive, Method::er, Method::l2, Method::ewc, Method::agem, Method::ccd}) {
    CAPTURE(to_string(m));
    const auto c = test::tiny_run(m);
    const auto a = run_continual(c);
    const auto b = run_continual(c);
    REQUIRE_FALSE(a.collapsed());
    check_same_trajectory(a, b);
    CHECK(a.summary() == b.summary());
    for (int k = 0; k < 2; ++k) {
      for (int i = 0; i <= k; ++i) CHECK(a.fidelity.at(k, i) >= 0.0);
    }
  }
}

TEST_CASE("ccd with zero weights reproduces er bitwise") {
  auto ccd = test::tiny_run(Method::ccd);
  ccd.ccd.weights = {0.0, 0.0, 0.0};
  const auto er = test::tiny_run(Method::er);
  check_same_trajectory(run_continual(ccd), run_continual(er));
}

TEST_CASE("l2 with zero strength reproduces naive bitwise") {
  auto l2 = test::tiny_run(Method::l2);
  l2.baselines.l2_strength = 0.0;
  check_same_trajectory(run_continual(l2), run_continual(test::tiny_run(Method::naive)));
}

TEST_CASE("consistency terms appear only once a teacher exists") {
  const auto r = run_continual(test::tiny_run(Method::ccd));
  for (const auto& row : r.losses) {
    CAPTURE(row.task);
    CHECK(row.ikc.has_value() == (row.task == 2));
    CHECK(row.ukc.has_value() == (row.task == 2));
    CHECK(row.lkc.has_value() == (row.task == 2));
    if (row.ikc) {
      CHECK(*row.ikc >= 0.0);
      CHECK(*row.ukc >= 0.0);
      CHECK(*row.lkc >= 0.0);
    }
  }
  // The teacher for task 2 is exactly the model left by task 1.
  REQUIRE(r.teacher_hashes.size() == 1);
  CHECK(r.teacher_hashes[0] == r.model_hashes[0]);
}

TEST_CASE("regularized baselines log their penalty from task 2") {
  for (Method m : {Method::l2, Method::ewc}) {
    const auto r = run_continual(test::tiny_run(m));
    for (const auto& row : r.losses) CHECK(row.reg.has_value() == (row.task == 2));
  }
}

TEST_CASE("training loss decreases over the first epoch") {
  std::vector<double> ratios;
  for (std::uint64_t seed : {1, 2, 3}) {
    auto c = test::tiny_run(Method::naive, seed);
    c.data.tasks = 1;
    c.train.epochs = 1;
    c.train.batch_size = 8;  // 50 steps
    c.train.lr = 3e-3;
    const auto r = run_continual(c);
    double head = 0.0, tail = 0.0;
    for (std::size_t i = 0; i < 10; ++i) {
      head += r.losses[i].base;
      tail += r.losses[r.losses.size() - 1 - i].base;
    }
    ratios.push_back(tail / head);
  }
  std::sort(ratios.begin(), ratios.end());
  CHECK(ratios[1] < 1.0);
}

TEST_CASE("an injected NaN stops the run with task and step context") {
  auto c = test::tiny_run(Method::ccd);
  c.inject_nan = NanInjection{2, 7, "ukc"};
  const auto r = run_continual(c);
  REQUIRE(r.collapsed());
  CHECK(r.collapse->kind == "non_finite");
  CHECK(r.collapse->task == 2);
  CHECK(r.collapse->step == 7);
  CHECK(r.collapse->term == "ukc");
  CHECK(r.losses.size() == 30 + 7);
  CHECK_FALSE(r.mf().has_value());
  CHECK(r.fidelity.row_complete(0));
  CHECK_FALSE(r.fidelity.has(1, 0));
  CHECK(r.summary().at("status") == "collapsed");
}

TEST_CASE("a fidelity blow-up on a new task is flagged") {
  auto c = test::tiny_run(Method::naive);
  c.eval.collapse_factor = 1e-9;
  const auto r = run_continual(c);
  REQUIRE(r.collapsed());
  CHECK(r.collapse->kind == "fidelity_blowup");
  CHECK(r.collapse->task == 2);
  // Detection does not cut the run short.
  CHECK(*r.mf() >= 0.0);
}

TEST_CASE("run outputs are written and reproducible") {
  auto c = test::tiny_run(Method::ccd);
  c.outputs.checkpoints = true;
  c.outputs.buffers = true;
  const auto a = test::scratch_dir("runner_out_a");
  const auto b = test::scratch_dir("runner_out_b");
  run_continual(c, {a, {}});
  run_continual(c, {b, {}});
  for (const char* name : {"run.json", "fidelity_matrix.csv", "loss_log.csv", "ckpt_task1.bin", "ckpt_task2.bin",
                           "buffer_task1.json", "buffer_task2.json"}) {
    CAPTURE(name);
    REQUIRE(std::filesystem::exists(a / name));
    CHECK(slurp(a / name) == slurp(b / name));
  }
  CHECK(std::filesystem::exists(a / "timing.json"));
  const auto summary = json::parse(slurp(a / "run.json"));
  CHECK(summary.at("mf").is_number());
  CHECK(summary.at("imf").is_number());
  CHECK(summary.at("config") == c.to_json());
  const auto header = slurp(a / "loss_log.csv").substr(0, 60);
  CHECK(header.rfind("task,step,total,base,ikc,ukc,lkc,reg,head\n", 0) == 0);

  // The final checkpoint reproduces the last fidelity row through the evaluator.
  json meta;
  const auto m = model::load(a / "ckpt_task2.bin", &meta);
  CHECK(meta.at("task") == 2);
  const auto stream = data::make_stream(c.data);
  const auto schedule = c.schedule.build();
  const Evaluator ev(c, stream, schedule);
  CHECK(ev.distance(m, 1, 0) == summary.at("fidelity_matrix")[1][0].get<double>());
}
