#include "cdg/model/denoiser.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include "cdg/error.hpp"
#include "cdg/hash.hpp"
#include "cdg/rng.hpp"

namespace cdg::model {

using ad::Shape;
using ad::Tape;
using ad::Tensor;
using ad::Var;

static_assert(std::endian::native == std::endian::little, "checkpoint blob assumes a little-endian host");

nlohmann::json DenoiserConfig::to_json() const {
  return {{"dim", dim}, {"hidden", hidden}, {"depth", depth}, {"num_labels", num_labels}, {"time_embed", time_embed}};
}

DenoiserConfig DenoiserConfig::from_json(const nlohmann::json& j) {
  DenoiserConfig c;
  c.dim = j.at("dim").get<std::size_t>();
  c.hidden = j.at("hidden").get<std::size_t>();
  c.depth = j.at("depth").get<std::size_t>();
  c.num_labels = j.at("num_labels").get<std::size_t>();
  c.time_embed = j.at("time_embed").get<std::size_t>();
  return c;
}

namespace {

struct Layout {
  std::vector<std::string> names;
  std::vector<Shape> shapes;
  std::vector<std::size_t> fan_in;  // 0 for biases (zero init)

  void add(std::string name, Shape shape, std::size_t fan) {
    names.push_back(std::move(name));
    shapes.push_back(std::move(shape));
    fan_in.push_back(fan);
  }
};

void validate(const DenoiserConfig& c) {
  if (c.dim == 0) throw DomainError("denoiser: input dim must be >= 1");
  if (c.hidden == 0) throw DomainError("denoiser: hidden width must be >= 1");
  if (c.num_labels == 0) throw DomainError("denoiser: need at least one label");
  if (c.time_embed < 2 || c.time_embed % 2 != 0) throw DomainError("denoiser: time_embed must be even and >= 2");
}

Layout layout(const DenoiserConfig& c) {
  validate(c);
  const std::size_t h = c.hidden;
  Layout l;
  l.add("time_w", {c.time_embed, h}, c.time_embed);
  l.add("time_b", {h}, 0);
  l.add("in_w", {c.dim, h}, c.dim);
  l.add("in_b", {h}, 0);
  l.add("label_emb", {c.num_labels + 1, h}, h);
  for (std::size_t b = 0; b < c.depth; ++b) {
    const std::string p = "block" + std::to_string(b) + ".";
    l.add(p + "w1", {h, h}, h);
    l.add(p + "b1", {h}, 0);
    l.add(p + "w2", {h, h}, h);
    l.add(p + "b2", {h}, 0);
  }
  l.add("out_w", {h, c.dim}, h);
  l.add("out_b", {c.dim}, 0);
  l.add("head_w", {h, c.num_labels}, h);
  l.add("head_b", {c.num_labels}, 0);
  return l;
}

void fill_uniform(Tensor& t, std::size_t fan_in, Rng& rng) {
  if (fan_in == 0) return;
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (auto& v : t.data()) v = (2.0 * rng.uniform() - 1.0) * bound;
}

Tensor time_features(std::span<const int> t, std::size_t width) {
  const std::size_t half = width / 2;
  Tensor out(Shape{t.size(), width});
  for (std::size_t r = 0; r < t.size(); ++r) {
    for (std::size_t k = 0; k < half; ++k) {
      const double freq = std::exp(-std::log(10000.0) * static_cast<double>(k) / static_cast<double>(half));
      const double arg = static_cast<double>(t[r]) * freq;
      out.at(r, k) = std::sin(arg);
      out.at(r, half + k) = std::cos(arg);
    }
  }
  return out;
}

}  // namespace

Denoiser Denoiser::init(const DenoiserConfig& config, std::uint64_t seed) {
  const Layout l = layout(config);
  Rng rng(seed);
  std::vector<Tensor> params;
  params.reserve(l.shapes.size());
  for (std::size_t i = 0; i < l.shapes.size(); ++i) {
    Tensor p(l.shapes[i]);
    fill_uniform(p, l.fan_in[i], rng);
    params.push_back(std::move(p));
  }
  return Denoiser(config, l.names, std::move(params));
}

Denoiser Denoiser::from_flat(const DenoiserConfig& config, std::span<const double> values) {
  Denoiser m = init(config, 0);
  m.set_flat(values);
  return m;
}

std::size_t Denoiser::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.size();
  return n;
}

std::vector<double> Denoiser::flat() const {
  std::vector<double> out;
  out.reserve(parameter_count());
  for (const auto& p : params_) out.insert(out.end(), p.data().begin(), p.data().end());
  return out;
}

void Denoiser::set_flat(std::span<const double> values) {
  if (values.size() != parameter_count()) {
    throw ShapeError("denoiser: flat parameter vector has " + std::to_string(values.size()) + " entries, expected " +
                     std::to_string(parameter_count()));
  }
  std::size_t off = 0;
  for (auto& p : params_) {
    std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(off), p.size(), p.data().begin());
    off += p.size();
  }
}

std::uint64_t Denoiser::hash() const {
  std::uint64_t h = kFnvOffset;
  for (const auto& p : params_) h = fnv1a(p.data(), h);
  return h;
}

void Denoiser::reinit_head(std::uint64_t seed) {
  Rng rng(seed);
  params_[head_begin()] = Tensor(params_[head_begin()].shape());
  fill_uniform(params_[head_begin()], config_.hidden, rng);
  params_[head_begin() + 1] = Tensor(params_[head_begin() + 1].shape());
}

Tensor Denoiser::predict(const Tensor& x_t, std::span<const int> t, std::span<const int> labels) const {
  Tape tape;
  BoundDenoiser bound(tape, *this, false);
  return bound.eps(tape.constant(x_t), t, labels).value();
}

Tensor Denoiser::label_probabilities(const Tensor& x0) const {
  Tape tape;
  BoundDenoiser bound(tape, *this, false);
  return bound.label_probabilities(tape.constant(x0)).value();
}

BoundDenoiser::BoundDenoiser(Tape& tape, const Denoiser& model, bool trainable) : tape_(&tape), model_(&model) {
  params_.reserve(model.params().size());
  for (const auto& p : model.params()) params_.push_back(tape.leaf(p, trainable));
}

BoundDenoiser::BoundDenoiser(Tape& tape, const Denoiser& model, std::vector<Var> params)
    : tape_(&tape), model_(&model), params_(std::move(params)) {
  if (params_.size() != model.params().size()) throw ShapeError("denoiser: wrong number of bound parameters");
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (params_[i].shape() != model.params()[i].shape()) {
      throw ShapeError("denoiser: bound parameter " + model.names()[i] + " has shape " +
                       ad::to_string(params_[i].shape()) + ", expected " + ad::to_string(model.params()[i].shape()));
    }
  }
}

Var BoundDenoiser::trunk(Var x_t, std::span<const int> t, std::span<const int> labels) {
  const auto& c = model_->config();
  if (x_t.value().rank() != 2 || x_t.value().cols() != c.dim) {
    throw ShapeError("denoiser: input has shape " + ad::to_string(x_t.shape()) + ", expected [n," +
                     std::to_string(c.dim) + "]");
  }
  const std::size_t n = x_t.value().rows();
  if (t.size() != n || labels.size() != n) {
    throw ShapeError("denoiser: " + std::to_string(n) + " rows but " + std::to_string(t.size()) + " timesteps and " +
                     std::to_string(labels.size()) + " labels");
  }
  for (int y : labels) {
    if (y < 0 || y > c.null_label()) {
      throw DomainError("denoiser: label " + std::to_string(y) + " outside [0, " + std::to_string(c.null_label()) +
                        "]");
    }
  }
  const auto& p = params_;
  Var temb = ad::silu(ad::affine(tape_->constant(time_features(t, c.time_embed)), p[0], p[1]));
  Var h = ad::affine(x_t, p[2], p[3]) + temb + ad::gather_rows(p[4], labels);
  for (std::size_t b = 0; b < c.depth; ++b) {
    const std::size_t k = 5 + 4 * b;
    Var u = ad::silu(ad::affine(h, p[k], p[k + 1]) + temb);
    h = h + ad::affine(u, p[k + 2], p[k + 3]);
  }
  return ad::silu(h);
}

Var BoundDenoiser::features(Var x_t, std::span<const int> t, std::span<const int> labels) {
  return trunk(x_t, t, labels);
}

Var BoundDenoiser::eps(Var x_t, std::span<const int> t, std::span<const int> labels) {
  const std::size_t k = 5 + 4 * model_->config().depth;
  return ad::affine(trunk(x_t, t, labels), params_[k], params_[k + 1]);
}

Var BoundDenoiser::label_probabilities(Var x0) {
  const std::size_t n = x0.value().rows();
  const std::vector<int> t(n, 1);
  const std::vector<int> labels(n, model_->config().null_label());
  Var f = ad::stop_gradient(trunk(x0, t, labels));
  const std::size_t k = model_->head_begin();
  return ad::softmax(ad::affine(f, params_[k], params_[k + 1]));
}

diffusion::NoisePredictor BoundDenoiser::predictor() {
  return [this](Tape& tape, Var x_t, std::span<const int> t, std::span<const int> labels) {
    if (&tape != tape_) throw StateError("denoiser: bound predictor used with a different tape");
    return eps(x_t, t, labels);
  };
}

diffusion::NoisePredictor frozen_predictor(const Denoiser& model) {
  return [&model](Tape& tape, Var x_t, std::span<const int> t, std::span<const int> labels) {
    BoundDenoiser bound(tape, model, false);
    return bound.eps(x_t, t, labels);
  };
}

Var label_cross_entropy(Var probs, std::span<const int> labels) {
  const std::size_t n = probs.value().rows(), classes = probs.value().cols();
  if (labels.size() != n) throw ShapeError("label_cross_entropy: label count does not match rows");
  Tensor onehot(Shape{n, classes});
  for (std::size_t r = 0; r < n; ++r) {
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= classes) {
      throw DomainError("label_cross_entropy: label " + std::to_string(labels[r]) + " out of range");
    }
    onehot.at(r, static_cast<std::size_t>(labels[r])) = 1.0;
  }
  Var picked = ad::sum(ad::log(probs, 1e-12) * probs.tape()->constant(std::move(onehot)));
  return ad::scale(picked, -1.0 / static_cast<double>(n));
}

namespace {

constexpr char kMagic[8] = {'C', 'D', 'G', 'C', 'K', 'P', 'T', '1'};

void put_u64(std::string& out, std::uint64_t v) {
  char buf[8];
  std::memcpy(buf, &v, 8);
  out.append(buf, 8);
}

class Reader {
 public:
  Reader(const std::string& bytes, std::string path) : bytes_(bytes), path_(std::move(path)) {}

  const char* take(std::size_t n, const char* what) {
    if (n > bytes_.size() - pos_) throw ParseError("checkpoint " + path_ + ": truncated while reading " + what);
    const char* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::uint64_t u64(const char* what) {
    std::uint64_t v;
    std::memcpy(&v, take(8, what), 8);
    return v;
  }
  std::size_t pos() const { return pos_; }

 private:
  const std::string& bytes_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace

void save(const Denoiser& model, const std::filesystem::path& path, const nlohmann::json& meta) {
  nlohmann::json header = meta.is_object() ? meta : nlohmann::json::object();
  header["arch"] = model.config().to_json();
  const std::string head = header.dump();
  const std::vector<double> values = model.flat();

  std::string out(kMagic, sizeof(kMagic));
  put_u64(out, head.size());
  out += head;
  put_u64(out, values.size());
  out.append(reinterpret_cast<const char*>(values.data()), values.size() * sizeof(double));
  put_u64(out, fnv1a(std::string_view(out)));

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("checkpoint: cannot open " + path.string() + " for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw Error("checkpoint: write failed for " + path.string());
}

Denoiser load(const std::filesystem::path& path, nlohmann::json* meta) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ParseError("checkpoint: cannot open " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  Reader r(bytes, path.string());

  if (std::memcmp(r.take(sizeof(kMagic), "magic"), kMagic, sizeof(kMagic)) != 0) {
    throw ParseError("checkpoint " + path.string() + ": bad magic");
  }
  const std::uint64_t head_len = r.u64("header length");
  const char* head = r.take(head_len, "header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(head, head + head_len);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("checkpoint " + path.string() + ": header is not JSON: " + e.what());
  }
  const std::uint64_t count = r.u64("parameter count");
  if (count > (bytes.size() - r.pos()) / sizeof(double)) {
    throw ParseError("checkpoint " + path.string() + ": truncated parameter blob");
  }
  std::vector<double> values(count);
  std::memcpy(values.data(), r.take(count * sizeof(double), "parameters"), count * sizeof(double));
  const std::size_t body_end = r.pos();
  const std::uint64_t checksum = r.u64("checksum");
  if (r.pos() != bytes.size()) throw ParseError("checkpoint " + path.string() + ": trailing bytes");
  if (checksum != fnv1a(std::string_view(bytes.data(), body_end))) {
    throw ParseError("checkpoint " + path.string() + ": checksum mismatch");
  }

  DenoiserConfig config;
  try {
    config = DenoiserConfig::from_json(header.at("arch"));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("checkpoint " + path.string() + ": bad arch header: " + e.what());
  }
  try {
    Denoiser m = Denoiser::from_flat(config, values);
    if (meta) *meta = std::move(header);
    return m;
  } catch (const Error& e) {
    throw ParseError("checkpoint " + path.string() + ": " + e.what());
  }
}

std::string checkpoint_name(int task) { return "ckpt_task" + std::to_string(task) + ".bin"; }

}  // namespace cdg::model
