#include "cdg/cli/cli.hpp"

#include <spawn.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "cdg/csv.hpp"
#include "cdg/error.hpp"
#include "cdg/model/denoiser.hpp"
#include "cdg/runner/runner.hpp"

extern char** environ;

namespace cdg::cli {

namespace fs = std::filesystem;
using nlohmann::json;

std::map<std::string, std::vector<double>> parse_grid(const std::string& spec) {
  std::map<std::string, std::vector<double>> grid;
  std::stringstream axes(spec);
  std::size_t count = 0;
  for (std::string axis; std::getline(axes, axis, ';');) {
    if (axis.find_first_not_of(" \t") == std::string::npos) continue;
    const auto eq = axis.find('=');
    if (eq == std::string::npos) throw ConfigError("grid axis '" + axis + "' needs the form name=v1,v2");
    std::string name = axis.substr(0, eq);
    name.erase(std::remove_if(name.begin(), name.end(), ::isspace), name.end());
    if (name != "kappa" && name != "lambda" && name != "eta") {
      throw ConfigError("unknown grid axis '" + name + "' (expected kappa, lambda or eta)");
    }
    if (grid.count(name) != 0) throw ConfigError("grid axis '" + name + "' given twice");
    auto& values = grid[name];
    std::stringstream list(axis.substr(eq + 1));
    for (std::string item; std::getline(list, item, ',');) {
      std::size_t used = 0;
      double v = 0.0;
      try {
        v = std::stod(item, &used);
      } catch (const std::exception&) {
        throw ConfigError("grid value '" + item + "' for " + name + " is not a number");
      }
      if (item.find_first_not_of(" \t", used) != std::string::npos) {
        throw ConfigError("grid value '" + item + "' for " + name + " is not a number");
      }
      if (!(std::isfinite(v) && v > 0.0)) throw ConfigError("grid values must be positive reals, got " + item);
      values.push_back(v);
    }
    if (values.empty()) throw ConfigError("grid axis '" + name + "' has no values");
    count += values.size();
  }
  if (count == 0) throw ConfigError("empty grid");
  return grid;
}

std::vector<Point> sweep_points(const runner::RunConfig& base, const std::map<std::string, std::vector<double>>& grid) {
  const auto axis = [&](const char* name, double fallback) {
    const auto it = grid.find(name);
    return it == grid.end() ? std::vector<double>{fallback} : it->second;
  };
  std::vector<Point> points;
  for (double k : axis("kappa", base.ccd.weights.kappa)) {
    for (double l : axis("lambda", base.ccd.weights.lambda)) {
      for (double e : axis("eta", base.ccd.weights.eta)) {
        Point p{"point_" + std::to_string(points.size() + 1), base};
        p.config.method = runner::Method::ccd;
        p.config.ccd.weights = {k, l, e};
        points.push_back(std::move(p));
      }
    }
  }
  return points;
}

std::vector<Point> ablation_points(const runner::RunConfig& base) {
  const auto& w = base.ccd.weights;
  const auto ccd_row = [&](const char* name, bool ukc, bool lkc) {
    Point p{name, base};
    p.config.method = runner::Method::ccd;
    p.config.ccd.weights = {w.kappa, ukc ? w.lambda : 0.0, lkc ? w.eta : 0.0};
    return p;
  };
  Point er{"base", base};
  er.config.method = runner::Method::er;
  return {er, ccd_row("+IKC", false, false), ccd_row("+IKC+UKC", true, false), ccd_row("+IKC+LKC", false, true),
          ccd_row("+IKC+UKC+LKC", true, true)};
}

int worker_limit() {
  const char* env = std::getenv("CDG_LAB_THREADS");
  if (env == nullptr || *env == '\0') return 1;
  char* end = nullptr;
  const long v = std::strtol(env, &end, 10);
  if (*end != '\0' || v < 1) return 1;
  return static_cast<int>(std::min<long>(v, 256));
}

namespace {

struct UsageError : Error {
  using Error::Error;
};

fs::path self_executable(const char* argv0) {
  std::error_code ec;
  const auto p = fs::read_symlink("/proc/self/exe", ec);
  return ec ? fs::absolute(argv0) : p;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out << text;
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read " + path.string());
  return json::parse(in);
}

std::string maybe_number(const json& v) { return v.is_number() ? csv::number(v.get<double>()) : std::string(); }

int finish_run(const runner::RunRecord& record, std::ostream& out, std::ostream& err) {
  if (record.collapsed()) {
    const auto& c = *record.collapse;
    err << "generative collapse (" << c.kind << ") at task " << c.task;
    if (c.step >= 0) err << ", step " << c.step;
    if (!c.term.empty()) err << ", term " << c.term;
    err << ": " << c.message << '\n';
    return kExitCollapse;
  }
  out << "MF " << csv::number(*record.mf()) << "  IMF " << csv::number(*record.imf()) << '\n';
  return kExitOk;
}

// Runs each point as `self train` in its own directory, at most `workers` at a time.
// Returns the child exit codes in point order.
std::vector<int> run_children(const fs::path& self, const fs::path& out_dir, const std::vector<Point>& points,
                              int workers, std::ostream& err) {
  std::vector<int> codes(points.size(), kExitError);
  std::map<pid_t, std::size_t> running;
  std::size_t next = 0;
  const auto reap = [&] {
    int status = 0;
    const pid_t pid = ::waitpid(-1, &status, 0);
    if (pid < 0) throw Error(std::string("waitpid failed: ") + std::strerror(errno));
    const auto it = running.find(pid);
    if (it == running.end()) return;
    codes[it->second] = WIFEXITED(status) ? WEXITSTATUS(status) : kExitError;
    err << "  " << points[it->second].name << " exited with " << codes[it->second] << '\n';
    running.erase(it);
  };
  while (next < points.size() || !running.empty()) {
    if (next < points.size() && static_cast<int>(running.size()) < workers) {
      const auto& p = points[next];
      const fs::path dir = out_dir / p.name;
      fs::create_directories(dir);
      const fs::path cfg = dir / "config.json";
      write_text(cfg, p.config.to_json().dump(2) + "\n");
      std::vector<std::string> args{self.string(), "train", "--config", cfg.string(), "--out", dir.string(), "--quiet"};
      std::vector<char*> argv;
      for (auto& a : args) argv.push_back(a.data());
      argv.push_back(nullptr);
      pid_t pid = 0;
      const int rc = ::posix_spawn(&pid, self.c_str(), nullptr, nullptr, argv.data(), environ);
      if (rc != 0) throw Error("cannot launch " + self.string() + ": " + std::strerror(rc));
      running[pid] = next++;
    } else {
      reap();
    }
  }
  return codes;
}

struct RunSummary {
  std::string mf, imf, status;
};

RunSummary read_summary(const fs::path& dir) {
  const auto path = dir / "run.json";
  if (!fs::exists(path)) return {"", "", "failed"};
  const auto j = read_json(path);
  return {maybe_number(j.value("mf", json())), maybe_number(j.value("imf", json())), j.value("status", "failed")};
}

runner::RunConfig load_config(const std::string& path) { return runner::RunConfig::load(path); }

int cmd_train(const std::string& config_path, const std::string& out_dir, std::optional<std::uint64_t> seed,
              const std::string& method, bool quiet, std::ostream& out, std::ostream& err) {
  auto config = load_config(config_path);
  if (seed) config.seed = *seed;
  if (!method.empty()) config.method = runner::parse_method(method);
  config.validate();
  runner::RunOptions options;
  options.out_dir = fs::path(out_dir);
  if (!quiet) options.log = [&err](const std::string& line) { err << line << '\n'; };
  const auto record = runner::run_continual(config, options);
  return finish_run(record, out, err);
}

int cmd_eval(const std::string& config_path, const std::string& checkpoint, const std::string& out_dir,
             std::ostream& out) {
  const auto config = load_config(config_path);
  json meta;
  const auto model = model::load(checkpoint, &meta);
  const auto stream = data::make_stream(config.data);
  if (!(model.config() == runner::model_config(config, stream))) {
    throw ConfigError("checkpoint architecture does not match the config");
  }
  const int task = meta.value("task", config.data.tasks);
  if (task < 1 || task > config.data.tasks) throw ConfigError("checkpoint task " + std::to_string(task) + " out of range");
  fs::create_directories(out_dir);
  const auto schedule = config.schedule.build();
  const runner::Evaluator evaluator(config, stream, schedule);
  std::ofstream csv_out(fs::path(out_dir) / "eval.csv", std::ios::binary | std::ios::trunc);
  csv::write_row(csv_out, {"k", "i", "fd"});
  json rows = json::array();
  for (int i = 0; i < task; ++i) {
    const double fd = evaluator.distance(model, task - 1, i);
    csv::write_row(csv_out, {std::to_string(task), std::to_string(i + 1), csv::number(fd)});
    rows.push_back(fd);
    out << "d_" << task << "," << i + 1 << " = " << csv::number(fd) << '\n';
  }
  write_text(fs::path(out_dir) / "eval.json",
             json{{"checkpoint", fs::path(checkpoint).filename().string()}, {"task", task}, {"fd", rows}}.dump(2) +
                 "\n");
  return kExitOk;
}

int run_points(const fs::path& self, const fs::path& out_dir, const std::vector<Point>& points, std::ostream& err) {
  err << "running " << points.size() << " points with " << worker_limit() << " worker(s)\n";
  const auto codes = run_children(self, out_dir, points, worker_limit(), err);
  bool collapse = false;
  for (int c : codes) {
    if (c == kExitCollapse) collapse = true;
    if (c != kExitOk && c != kExitCollapse) throw Error("a point failed; see its directory under " + out_dir.string());
  }
  return collapse ? kExitCollapse : kExitOk;
}

int cmd_sweep(const fs::path& self, const std::string& config_path, const std::string& grid_spec,
              const std::string& out_dir, std::ostream& out, std::ostream& err) {
  const auto base = load_config(config_path);
  const auto points = sweep_points(base, parse_grid(grid_spec));
  for (const auto& p : points) p.config.validate();
  fs::create_directories(out_dir);
  const int code = run_points(self, out_dir, points, err);
  std::ostringstream table;
  csv::write_row(table, {"kappa", "lambda", "eta", "MF", "IMF"});
  for (const auto& p : points) {
    const auto s = read_summary(fs::path(out_dir) / p.name);
    const auto& w = p.config.ccd.weights;
    csv::write_row(table, {csv::number(w.kappa), csv::number(w.lambda), csv::number(w.eta), s.mf, s.imf});
  }
  write_text(fs::path(out_dir) / "sweep_summary.csv", table.str());
  out << table.str();
  return code;
}

int cmd_ablate(const fs::path& self, const std::string& config_path, const std::string& out_dir, std::ostream& out,
               std::ostream& err) {
  const auto base = load_config(config_path);
  auto points = ablation_points(base);
  for (auto& p : points) {
    p.config.validate();
  }
  // Directory names avoid '+'.
  std::vector<Point> staged = points;
  for (std::size_t i = 0; i < staged.size(); ++i) staged[i].name = "row_" + std::to_string(i + 1);
  fs::create_directories(out_dir);
  const int code = run_points(self, out_dir, staged, err);
  std::ostringstream table;
  csv::write_row(table, {"method", "MF", "IMF"});
  for (std::size_t i = 0; i < points.size(); ++i) {
    const auto s = read_summary(fs::path(out_dir) / staged[i].name);
    csv::write_row(table, {points[i].name, s.mf, s.imf});
  }
  write_text(fs::path(out_dir) / "ablation.csv", table.str());
  out << table.str();
  return code;
}

int cmd_report(const std::string& runs_dir, const std::string& out_dir, std::ostream& out, std::ostream& err) {
  if (!fs::is_directory(runs_dir)) throw UsageError("runs directory " + runs_dir + " does not exist");
  std::vector<fs::path> found;
  for (const auto& entry : fs::recursive_directory_iterator(runs_dir)) {
    if (entry.is_regular_file() && entry.path().filename() == "run.json") found.push_back(entry.path());
  }
  std::sort(found.begin(), found.end());
  if (found.empty()) throw UsageError("no run.json found under " + runs_dir);

  struct Row {
    std::string name, method, seed, status, mf, imf;
    std::vector<std::string> curve;
  };
  std::vector<Row> rows;
  for (const auto& path : found) {
    const auto dir = path.parent_path();
    const std::string name = fs::relative(dir, runs_dir).generic_string();
    json j;
    try {
      j = read_json(path);
    } catch (const std::exception& e) {
      err << "warning: skipping " << name << ": unreadable run.json\n";
      continue;
    }
    if (!fs::exists(dir / "fidelity_matrix.csv") || !j.contains("fidelity_matrix")) {
      err << "warning: skipping " << name << ": no fidelity matrix\n";
      continue;
    }
    Row r;
    r.name = name == "." ? "run" : name;
    const auto& cfg = j.value("config", json::object());
    r.method = cfg.value("method", "");
    r.seed = cfg.contains("seed") ? cfg.at("seed").dump() : "";
    r.status = j.value("status", "");
    r.mf = maybe_number(j.value("mf", json()));
    r.imf = maybe_number(j.value("imf", json()));
    // Forgetting curve: fidelity of task 1 after each task.
    for (const auto& row : j.at("fidelity_matrix")) {
      if (!row.empty() && row[0].is_number()) r.curve.push_back(csv::number(row[0].get<double>()));
    }
    rows.push_back(std::move(r));
  }
  fs::create_directories(out_dir);
  std::ostringstream table, curve, md;
  csv::write_row(table, {"run", "method", "seed", "status", "MF", "IMF"});
  csv::write_row(curve, {"run", "after_task", "fd_task1"});
  md << "# Run comparison\n\n| run | method | seed | status | MF | IMF |\n|---|---|---|---|---|---|\n";
  for (const auto& r : rows) {
    csv::write_row(table, {r.name, r.method, r.seed, r.status, r.mf, r.imf});
    for (std::size_t k = 0; k < r.curve.size(); ++k) csv::write_row(curve, {r.name, std::to_string(k + 1), r.curve[k]});
    md << "| " << r.name << " | " << r.method << " | " << r.seed << " | " << r.status << " | " << r.mf << " | "
       << r.imf << " |\n";
  }
  md << "\nForgetting curves (FD of task 1 after each task) are in `forgetting_curve.csv`.\n";
  write_text(fs::path(out_dir) / "report.csv", table.str());
  write_text(fs::path(out_dir) / "forgetting_curve.csv", curve.str());
  write_text(fs::path(out_dir) / "report.md", md.str());
  out << md.str();
  return kExitOk;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Continual diffusion generation lab"};
  app.require_subcommand(1);

  std::string config, out_dir, method, checkpoint, grid, runs;
  std::optional<std::uint64_t> seed;
  bool quiet = false;

  auto* train = app.add_subcommand("train", "Run the continual protocol for one config");
  train->add_option("--config", config, "Run config (JSON)")->required();
  train->add_option("--out", out_dir, "Output directory")->required();
  train->add_option("--seed", seed, "Override the config seed");
  train->add_option("--method", method, "Override the config method");
  train->add_flag("--quiet", quiet, "No progress output");

  auto* eval = app.add_subcommand("eval", "Fidelity of a checkpoint against every task seen so far");
  eval->add_option("--config", config, "Run config the checkpoint came from")->required();
  eval->add_option("--checkpoint", checkpoint, "ckpt_task{k}.bin")->required();
  eval->add_option("--out", out_dir, "Output directory")->required();

  auto* sweep = app.add_subcommand("sweep", "Grid over the CCD weights");
  sweep->add_option("--config", config, "Base run config")->required();
  sweep->add_option("--grid", grid, "e.g. \"kappa=1e-7,1e-5,1e-3;lambda=1e-5;eta=1e-5\"")->required();
  sweep->add_option("--out", out_dir, "Output directory")->required();

  auto* ablate = app.add_subcommand("ablate", "Loss-component ablation rows");
  ablate->add_option("--config", config, "Base run config")->required();
  ablate->add_option("--out", out_dir, "Output directory")->required();

  auto* report = app.add_subcommand("report", "Aggregate finished runs");
  report->add_option("--runs", runs, "Directory searched for run.json")->required();
  report->add_option("--out", out_dir, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kExitError;
  }

  try {
    const fs::path self = self_executable(argv[0]);
    if (*train) return cmd_train(config, out_dir, seed, method, quiet, out, err);
    if (*eval) return cmd_eval(config, checkpoint, out_dir, out);
    if (*sweep) return cmd_sweep(self, config, grid, out_dir, out, err);
    if (*ablate) return cmd_ablate(self, config, out_dir, out, err);
    if (*report) return cmd_report(runs, out_dir, out, err);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitError;
  }
  return kExitError;
}

}  // namespace cdg::cli
