#include "cdg/runner/config.hpp"

#include <cmath>
#include <fstream>
#include <set>

#include "cdg/error.hpp"

namespace cdg::runner {

using nlohmann::json;

std::string to_string(Method method) {
  switch (method) {
    case Method::naive: return "naive";
    case Method::er: return "er";
    case Method::l2: return "l2";
    case Method::ewc: return "ewc";
    case Method::agem: return "agem";
    case Method::ccd: return "ccd";
  }
  return "?";
}

Method parse_method(const std::string& name) {
  for (Method m : {Method::naive, Method::er, Method::l2, Method::ewc, Method::agem, Method::ccd}) {
    if (to_string(m) == name) return m;
  }
  throw ConfigError("unknown method '" + name + "' (expected naive, er, l2, ewc, agem or ccd)");
}

bool uses_buffer(Method method) { return method == Method::er || method == Method::agem || method == Method::ccd; }

diffusion::NoiseSchedule ScheduleSpec::build() const {
  return diffusion::build_schedule(steps, beta_min, beta_max, kind);
}

RunConfig::RunConfig() {
  data.kind = data::StreamKind::mixture2d;
  data.tasks = 5;
  data.classes_per_task = 2;
  data.train_per_task = 8000;
  data.test_per_task = 2000;
}

namespace {

// Field reader that remembers which keys were consumed so leftovers can be rejected.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j.is_object()) throw ConfigError(where() + " must be a JSON object");
  }

  template <typename T>
  void read(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError(field(key) + " has the wrong type");
    }
  }

  template <typename T, typename Parse>
  void read_enum(const char* key, T& out, Parse parse) {
    std::string name;
    read(key, name);
    if (!name.empty()) out = parse(name);
  }

  std::optional<Section> child(const char* key) {
    seen_.insert(key);
    if (!j_.contains(key)) return std::nullopt;
    return Section(j_.at(key), field(key));
  }

  bool has(const char* key) const { return j_.contains(key); }
  void skip(const char* key) { seen_.insert(key); }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (seen_.count(key) == 0) throw ConfigError("unknown config key " + field(key.c_str()));
    }
  }

  std::string field(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

 private:
  std::string where() const { return path_.empty() ? "config" : path_; }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

void require(bool ok, const std::string& message) {
  if (!ok) throw ConfigError(message);
}

bool finite_positive(double v) { return std::isfinite(v) && v > 0.0; }

}  // namespace

void RunConfig::validate() const {
  require(data.tasks >= 1, "data.tasks must be >= 1");
  require(data.classes_per_task >= 1, "data.classes_per_task must be >= 1");
  require(data.train_per_task >= 2, "data.train_per_task must be >= 2");
  require(data.test_per_task >= 2, "data.test_per_task must be >= 2");
  require(model.hidden >= 1 && model.depth >= 1, "model.hidden and model.depth must be >= 1");
  require(model.time_embed >= 2 && model.time_embed % 2 == 0, "model.time_embed must be even and >= 2");
  require(schedule.steps >= 2, "schedule.steps must be >= 2");
  require(schedule.beta_min > 0.0 && schedule.beta_min <= schedule.beta_max && schedule.beta_max < 1.0,
          "schedule needs 0 < beta_min <= beta_max < 1");
  require(train.epochs >= 0, "train.epochs must be >= 0");
  require(train.epochs > 0 || train.steps_per_task >= 1, "train.steps_per_task must be >= 1");
  require(train.batch_size >= 1, "train.batch_size must be >= 1");
  require(finite_positive(train.lr), "train.lr must be positive");
  require(train.label_dropout >= 0.0 && train.label_dropout < 1.0, "train.label_dropout must lie in [0, 1)");
  if (uses_buffer(method)) require(buffer_capacity >= 1, "buffer.capacity must be >= 1 for method " + to_string(method));
  try {
    ccd.weights.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("ccd: ") + e.what());
  }
  require(finite_positive(ccd.preconditioner.damping), "ccd.damping must be positive");
  require(finite_positive(ccd.ukc_w_max) && finite_positive(ccd.lkc_w_max), "ccd weight clamps must be positive");
  require(std::isfinite(baselines.l2_strength) && baselines.l2_strength >= 0.0, "baselines.l2_strength must be >= 0");
  require(std::isfinite(baselines.ewc_strength) && baselines.ewc_strength >= 0.0,
          "baselines.ewc_strength must be >= 0");
  require(baselines.ewc_fisher_batches >= 1, "baselines.ewc_fisher_batches must be >= 1");
  require(eval.n_eval >= 2, "eval.n_eval must be >= 2");
  require(eval.features >= 1, "eval.features must be >= 1");
  require(std::isfinite(eval.collapse_factor) && eval.collapse_factor >= 0.0, "eval.collapse_factor must be >= 0");
  if (inject_nan) {
    require(inject_nan->task >= 1 && inject_nan->task <= data.tasks, "debug.inject_nan.task out of range");
    require(inject_nan->step >= 0, "debug.inject_nan.step must be >= 0");
    const auto& term = inject_nan->term;
    require(term == "base" || term == "ikc" || term == "ukc" || term == "lkc",
            "debug.inject_nan.term must be base, ikc, ukc or lkc");
    if (term != "base") {
      const double w = term == "ikc" ? ccd.weights.kappa : term == "ukc" ? ccd.weights.lambda : ccd.weights.eta;
      require(method == Method::ccd && inject_nan->task >= 2 && w > 0.0,
              "debug.inject_nan: term " + term + " only exists for method ccd from task 2 with a positive weight");
    }
  }
}

json RunConfig::to_json() const {
  json j;
  j["schema_version"] = kSchemaVersion;
  j["method"] = to_string(method);
  j["seed"] = seed;
  j["data"] = {{"kind", data::to_string(data.kind)},
               {"tasks", data.tasks},
               {"classes_per_task", data.classes_per_task},
               {"train_per_task", data.train_per_task},
               {"test_per_task", data.test_per_task}};
  j["model"] = {{"hidden", model.hidden}, {"depth", model.depth}, {"time_embed", model.time_embed}};
  j["schedule"] = {{"kind", diffusion::to_string(schedule.kind)},
                   {"steps", schedule.steps},
                   {"beta_min", schedule.beta_min},
                   {"beta_max", schedule.beta_max}};
  j["train"] = {{"steps_per_task", train.steps_per_task},
                {"epochs", train.epochs},
                {"batch_size", train.batch_size},
                {"lr", train.lr},
                {"label_dropout", train.label_dropout}};
  j["buffer"] = {{"capacity", buffer_capacity}};
  j["ccd"] = {{"kappa", ccd.weights.kappa},
              {"lambda", ccd.weights.lambda},
              {"eta", ccd.weights.eta},
              {"preconditioner", ccd::to_string(ccd.preconditioner.mode)},
              {"damping", ccd.preconditioner.damping},
              {"ukc_w_max", ccd.ukc_w_max},
              {"lkc_w_max", ccd.lkc_w_max},
              {"ikc_student_on_replay", ccd.ikc_student_on_replay},
              {"ukc_student_on_replay", ccd.ukc_student_on_replay}};
  j["baselines"] = {{"l2_strength", baselines.l2_strength},
                    {"ewc_strength", baselines.ewc_strength},
                    {"ewc_fisher_batches", baselines.ewc_fisher_batches}};
  j["eval"] = {{"n_eval", eval.n_eval},
               {"embedding", metrics::to_string(eval.embedding)},
               {"features", eval.features},
               {"embed_seed", eval.embed_seed},
               {"collapse_factor", eval.collapse_factor}};
  j["outputs"] = {{"checkpoints", outputs.checkpoints}, {"buffers", outputs.buffers}};
  json debug = {{"inject_nan", nullptr}};
  if (inject_nan) {
    debug["inject_nan"] = {{"task", inject_nan->task}, {"step", inject_nan->step}, {"term", inject_nan->term}};
  }
  j["debug"] = debug;
  return j;
}

RunConfig RunConfig::from_json(const json& j) {
  RunConfig c;
  Section root(j, "");
  require(j.contains("schema_version"), "config is missing schema_version");
  int version = 0;
  root.read("schema_version", version);
  require(version == kSchemaVersion, "unsupported schema_version " + std::to_string(version) + " (expected " +
                                         std::to_string(kSchemaVersion) + ")");
  root.read_enum("method", c.method, parse_method);
  root.read("seed", c.seed);
  if (auto s = root.child("data")) {
    s->read_enum("kind", c.data.kind, data::parse_stream_kind);
    s->read("tasks", c.data.tasks);
    s->read("classes_per_task", c.data.classes_per_task);
    s->read("train_per_task", c.data.train_per_task);
    s->read("test_per_task", c.data.test_per_task);
    s->finish();
  }
  if (auto s = root.child("model")) {
    s->read("hidden", c.model.hidden);
    s->read("depth", c.model.depth);
    s->read("time_embed", c.model.time_embed);
    s->finish();
  }
  if (auto s = root.child("schedule")) {
    s->read_enum("kind", c.schedule.kind, [](const std::string& n) { return diffusion::parse_schedule_kind(n); });
    s->read("steps", c.schedule.steps);
    s->read("beta_min", c.schedule.beta_min);
    s->read("beta_max", c.schedule.beta_max);
    s->finish();
  }
  if (auto s = root.child("train")) {
    s->read("steps_per_task", c.train.steps_per_task);
    s->read("epochs", c.train.epochs);
    s->read("batch_size", c.train.batch_size);
    s->read("lr", c.train.lr);
    s->read("label_dropout", c.train.label_dropout);
    s->finish();
  }
  if (auto s = root.child("buffer")) {
    s->read("capacity", c.buffer_capacity);
    s->finish();
  }
  if (auto s = root.child("ccd")) {
    s->read("kappa", c.ccd.weights.kappa);
    s->read("lambda", c.ccd.weights.lambda);
    s->read("eta", c.ccd.weights.eta);
    s->read_enum("preconditioner", c.ccd.preconditioner.mode, ccd::parse_preconditioner_mode);
    s->read("damping", c.ccd.preconditioner.damping);
    s->read("ukc_w_max", c.ccd.ukc_w_max);
    s->read("lkc_w_max", c.ccd.lkc_w_max);
    s->read("ikc_student_on_replay", c.ccd.ikc_student_on_replay);
    s->read("ukc_student_on_replay", c.ccd.ukc_student_on_replay);
    s->finish();
  }
  if (auto s = root.child("baselines")) {
    s->read("l2_strength", c.baselines.l2_strength);
    s->read("ewc_strength", c.baselines.ewc_strength);
    s->read("ewc_fisher_batches", c.baselines.ewc_fisher_batches);
    s->finish();
  }
  if (auto s = root.child("eval")) {
    s->read("n_eval", c.eval.n_eval);
    s->read_enum("embedding", c.eval.embedding, metrics::parse_embedding_mode);
    s->read("features", c.eval.features);
    s->read("embed_seed", c.eval.embed_seed);
    s->read("collapse_factor", c.eval.collapse_factor);
    s->finish();
  }
  if (auto s = root.child("outputs")) {
    s->read("checkpoints", c.outputs.checkpoints);
    s->read("buffers", c.outputs.buffers);
    s->finish();
  }
  if (auto s = root.child("debug")) {
    if (s->has("inject_nan") && !j.at("debug").at("inject_nan").is_null()) {
      auto inj = s->child("inject_nan");
      NanInjection n;
      inj->read("task", n.task);
      inj->read("step", n.step);
      inj->read("term", n.term);
      inj->finish();
      c.inject_nan = n;
    } else {
      s->skip("inject_nan");
    }
    s->finish();
  }
  root.finish();
  c.validate();
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return from_json(j);
}

long RunConfig::steps_for(std::size_t n_train) const {
  if (train.epochs == 0) return train.steps_per_task;
  const auto per_epoch = static_cast<long>((n_train + train.batch_size - 1) / train.batch_size);
  return train.epochs * per_epoch;
}

}  // namespace cdg::runner
