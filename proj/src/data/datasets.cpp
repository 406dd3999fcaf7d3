#include "cdg/data/datasets.hpp"

#include <cmath>
#include <fstream>
#include <numbers>

#include "cdg/csv.hpp"
#include "cdg/error.hpp"
#include "cdg/hash.hpp"

namespace cdg::data {

using ad::Shape;
using ad::Tensor;

LabeledData LabeledData::select(std::span<const std::size_t> rows) const {
  const std::size_t d = dim();
  LabeledData out;
  out.x = Tensor(Shape{rows.size(), d});
  out.labels.reserve(rows.size());
  out.tasks.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= size()) throw DomainError("LabeledData::select: row " + std::to_string(rows[i]) + " out of range");
    const auto src = x.row(rows[i]);
    std::copy(src.begin(), src.end(), out.x.data().begin() + static_cast<std::ptrdiff_t>(i * d));
    out.labels.push_back(labels[rows[i]]);
    out.tasks.push_back(tasks[rows[i]]);
  }
  return out;
}

LabeledData LabeledData::concat(std::span<const LabeledData> parts) {
  LabeledData out;
  std::vector<Tensor> xs;
  for (const auto& p : parts) {
    if (p.size() == 0) continue;
    xs.push_back(p.x);
    out.labels.insert(out.labels.end(), p.labels.begin(), p.labels.end());
    out.tasks.insert(out.tasks.end(), p.tasks.begin(), p.tasks.end());
  }
  if (!xs.empty()) out.x = Tensor::concat_rows(xs);
  return out;
}

std::string to_string(StreamKind kind) {
  switch (kind) {
    case StreamKind::mixture2d: return "mixture2d";
    case StreamKind::rings: return "rings";
    case StreamKind::glyphs8: return "glyphs8";
  }
  return "?";
}

StreamKind parse_stream_kind(const std::string& name) {
  if (name == "mixture2d") return StreamKind::mixture2d;
  if (name == "rings") return StreamKind::rings;
  if (name == "glyphs8") return StreamKind::glyphs8;
  throw ConfigError("unknown dataset kind '" + name + "' (expected mixture2d, rings or glyphs8)");
}

std::string to_string(Split split) { return split == Split::train ? "train" : "test"; }

namespace {

constexpr int kGlyphSide = 8;

// Three straight strokes of +1 pixels on a -1 background.
std::vector<double> make_glyph(Rng& rng) {
  std::vector<double> g(kGlyphSide * kGlyphSide, -1.0);
  static constexpr int kDirs[8][2] = {{1, 0}, {-1, 0}, {0, 1}, {0, -1}, {1, 1}, {1, -1}, {-1, 1}, {-1, -1}};
  for (int stroke = 0; stroke < 3; ++stroke) {
    int r = static_cast<int>(rng.uniform_int(kGlyphSide));
    int c = static_cast<int>(rng.uniform_int(kGlyphSide));
    const auto& d = kDirs[rng.uniform_int(8)];
    const int len = 3 + static_cast<int>(rng.uniform_int(4));
    for (int s = 0; s < len && r >= 0 && r < kGlyphSide && c >= 0 && c < kGlyphSide; ++s) {
      g[static_cast<std::size_t>(r * kGlyphSide + c)] = 1.0;
      r += d[0];
      c += d[1];
    }
  }
  return g;
}

}  // namespace

TaskStream::TaskStream(const StreamConfig& config) : config_(config) {
  if (config.tasks < 1) throw ConfigError("stream: need at least one task");
  if (config.classes_per_task < 1) throw ConfigError("stream: need at least one class per task");
  if (config.train_per_task < 1 || config.test_per_task < 1) throw ConfigError("stream: split sizes must be >= 1");
  for (int k = 0; k < config.tasks; ++k) {
    TaskSpec spec;
    spec.task_id = k;
    for (int c = 0; c < config.classes_per_task; ++c) spec.labels.push_back(k * config.classes_per_task + c);
    spec.n_train = config.train_per_task;
    spec.n_test = config.test_per_task;
    tasks_.push_back(std::move(spec));
  }
  const double r2 = kRingRadius * kRingRadius;
  switch (config.kind) {
    case StreamKind::mixture2d:
      // E||x||^2 / 2 per coordinate; the ring layout has zero mean for L >= 2.
      scale_ = 1.0 / std::sqrt((r2 + kRadialStd * kRadialStd + kTangentialStd * kTangentialStd) / 2.0);
      break;
    case StreamKind::rings:
      scale_ = 1.0 / std::sqrt((r2 + kRadialStd * kRadialStd) / 2.0);
      break;
    case StreamKind::glyphs8: {
      Rng proto = Rng(config.seed).derive("glyph-prototypes");
      double mean = 0.0;
      for (int c = 0; c < num_labels(); ++c) {
        glyphs_.push_back(make_glyph(proto));
        for (double v : glyphs_.back()) mean += v;
      }
      // Pooled mean and variance of flipped +-1 pixels.
      mean *= (1.0 - 2.0 * kGlyphFlip) / static_cast<double>(num_labels() * kGlyphSide * kGlyphSide);
      offset_ = mean;
      scale_ = 1.0 / std::sqrt(1.0 - mean * mean);
      break;
    }
  }
}

std::size_t TaskStream::dim() const {
  return config_.kind == StreamKind::glyphs8 ? static_cast<std::size_t>(kGlyphSide * kGlyphSide) : 2;
}

const TaskSpec& TaskStream::task(int k) const {
  if (k < 0 || k >= config_.tasks) throw DomainError("stream: task " + std::to_string(k) + " out of range");
  return tasks_[static_cast<std::size_t>(k)];
}

void TaskStream::sample_into(int label, Rng& rng, std::span<double> out) const {
  const double L = static_cast<double>(num_labels());
  const double theta = 2.0 * std::numbers::pi * static_cast<double>(label) / L;
  switch (config_.kind) {
    case StreamKind::mixture2d: {
      const double zr = rng.normal(), zt = rng.normal();
      const double r = kRingRadius + kRadialStd * zr;
      const double cs = std::cos(theta), sn = std::sin(theta);
      out[0] = scale_ * (r * cs - kTangentialStd * zt * sn);
      out[1] = scale_ * (r * sn + kTangentialStd * zt * cs);
      return;
    }
    case StreamKind::rings: {
      const double half = std::numbers::pi * kArcFraction / L;
      const double phi = theta + (2.0 * rng.uniform() - 1.0) * half;
      const double r = kRingRadius + kRadialStd * rng.normal();
      out[0] = scale_ * r * std::cos(phi);
      out[1] = scale_ * r * std::sin(phi);
      return;
    }
    case StreamKind::glyphs8: {
      const auto& g = glyphs_[static_cast<std::size_t>(label)];
      for (std::size_t j = 0; j < g.size(); ++j) {
        const double v = rng.bernoulli(kGlyphFlip) ? -g[j] : g[j];
        out[j] = scale_ * (v - offset_);
      }
      return;
    }
  }
}

LabeledData TaskStream::sample_task(int k, std::size_t n, Rng& rng) const {
  const TaskSpec& spec = task(k);
  if (n == 0) throw DomainError("stream: sample count must be >= 1");
  const std::size_t d = dim();
  LabeledData out;
  out.x = Tensor(Shape{n, d});
  out.labels.resize(n);
  out.tasks.assign(n, k);
  for (std::size_t i = 0; i < n; ++i) {
    const int label = spec.labels[rng.uniform_int(spec.labels.size())];
    out.labels[i] = label;
    sample_into(label, rng, out.x.data().subspan(i * d, d));
  }
  return out;
}

Tensor TaskStream::sample_class(int label, std::size_t n, Rng& rng) const {
  if (label < 0 || label >= num_labels()) throw DomainError("stream: label " + std::to_string(label) + " out of range");
  const std::size_t d = dim();
  Tensor out(Shape{n, d});
  for (std::size_t i = 0; i < n; ++i) sample_into(label, rng, out.data().subspan(i * d, d));
  return out;
}

LabeledData TaskStream::split(int k, Split which) const {
  const TaskSpec& spec = task(k);
  Rng rng = Rng(config_.seed).derive(to_string(which)).derive(static_cast<std::uint64_t>(k));
  return sample_task(k, which == Split::train ? spec.n_train : spec.n_test, rng);
}

std::vector<double> TaskStream::class_mean(int label) const {
  if (config_.kind != StreamKind::mixture2d) throw DomainError("class_mean: only defined for mixture2d");
  if (label < 0 || label >= num_labels()) throw DomainError("class_mean: label out of range");
  const double theta = 2.0 * std::numbers::pi * static_cast<double>(label) / static_cast<double>(num_labels());
  return {scale_ * kRingRadius * std::cos(theta), scale_ * kRingRadius * std::sin(theta)};
}

std::uint64_t TaskStream::hash() const {
  std::uint64_t h = kFnvOffset;
  for (int k = 0; k < config_.tasks; ++k) {
    for (Split s : {Split::train, Split::test}) {
      const LabeledData d = split(k, s);
      h = fnv1a(d.x.data(), h);
      h = fnv1a(std::as_bytes(std::span<const int>(d.labels)), h);
    }
  }
  return h;
}

void TaskStream::export_csv(const std::filesystem::path& path, Split which) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  std::vector<std::string> row;
  for (std::size_t j = 0; j < dim(); ++j) row.push_back("x" + std::to_string(j));
  row.push_back("label");
  row.push_back("task");
  csv::write_row(out, row);
  for (int k = 0; k < config_.tasks; ++k) {
    const LabeledData d = split(k, which);
    for (std::size_t i = 0; i < d.size(); ++i) {
      row.clear();
      for (double v : d.x.row(i)) row.push_back(csv::number(v));
      row.push_back(std::to_string(d.labels[i]));
      row.push_back(std::to_string(d.tasks[i] + 1));
      csv::write_row(out, row);
    }
  }
  if (!out) throw Error("write failed for " + path.string());
}

TaskStream make_stream(const StreamConfig& config) { return TaskStream(config); }

}  // namespace cdg::data
