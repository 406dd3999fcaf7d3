#include "cdg/autodiff/ops.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/Core>

#include "cdg/error.hpp"

namespace cdg::ad {

namespace {

// Eigen's coefficient-based path for small products peels unaligned leading
// entries, so results would depend on heap addresses. The build defines
// EIGEN_GEMM_TO_COEFFBASED_THRESHOLD=0, which routes every product through the
// packed GEMM kernel and makes results independent of buffer alignment.
static_assert(EIGEN_GEMM_TO_COEFFBASED_THRESHOLD == 0, "matmul determinism needs the packed GEMM path");

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

ConstMap view(const double* p, std::size_t r, std::size_t c) {
  return ConstMap(p, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
MutMap view(double* p, std::size_t r, std::size_t c) {
  return MutMap(p, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

struct View {
  std::size_t r;
  std::size_t c;
};

View view_of(const Shape& s) {
  if (s.empty()) return {1, 1};
  if (s.size() == 1) return {1, s[0]};
  return {s[0], s[1]};
}

Tape& owner(Var v, const char* op) {
  if (!v.valid()) throw StateError(std::string(op) + ": unbound variable");
  return *v.tape();
}

Tape& same_tape(Var a, Var b, const char* op) {
  Tape& t = owner(a, op);
  if (b.tape() != &t) throw StateError(std::string(op) + ": operands live on different tapes");
  return t;
}

Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  if (a == b) return a;
  const View va = view_of(a), vb = view_of(b);
  auto dim = [&](std::size_t x, std::size_t y) {
    if (x == y) return x;
    if (x == 1) return y;
    if (y == 1) return x;
    throw ShapeError(std::string(op) + ": cannot broadcast " + to_string(a) + " with " + to_string(b));
  };
  const std::size_t r = dim(va.r, vb.r), c = dim(va.c, vb.c);
  const std::size_t rank = std::max(a.size(), b.size());
  if (rank == 2 || r != 1) return {r, c};
  if (rank == 1) return {c};
  return {};
}

inline std::size_t bidx(const View& v, std::size_t i, std::size_t j) {
  return (v.r == 1 ? 0 : i) * v.c + (v.c == 1 ? 0 : j);
}

// Sums g over the dimensions along which `target` was broadcast.
Tensor reduce_to(const Tensor& g, const Shape& target) {
  if (g.shape() == target) return g;
  const View vt = view_of(target), vg = view_of(g.shape());
  Tensor out(target, 0.0);
  for (std::size_t i = 0; i < vg.r; ++i) {
    for (std::size_t j = 0; j < vg.c; ++j) out[bidx(vt, i, j)] += g[i * vg.c + j];
  }
  return out;
}

template <class F, class DA, class DB>
Var binary(Var a, Var b, const char* op, F f, DA da, DB db) {
  Tape& t = same_tape(a, b, op);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const Shape os = broadcast_shape(av.shape(), bv.shape(), op);
  Tensor out(os);
  const View vo = view_of(os), va = view_of(av.shape()), vb = view_of(bv.shape());
  if (av.shape() == bv.shape()) {
    for (std::size_t k = 0; k < out.size(); ++k) out[k] = f(av[k], bv[k]);
  } else {
    for (std::size_t i = 0; i < vo.r; ++i) {
      for (std::size_t j = 0; j < vo.c; ++j) out[i * vo.c + j] = f(av[bidx(va, i, j)], bv[bidx(vb, i, j)]);
    }
  }
  const bool rg = t.requires_grad(a.id()) || t.requires_grad(b.id());
  return t.record(std::move(out), rg,
                  [ia = a.id(), ib = b.id(), da, db](Tape& tape, const Tensor& g, const Tensor&) {
                    const Tensor& x = tape.value(ia);
                    const Tensor& y = tape.value(ib);
                    const View vo = view_of(g.shape()), vx = view_of(x.shape()), vy = view_of(y.shape());
                    auto partial = [&](auto d) {
                      Tensor out(g.shape());
                      for (std::size_t i = 0; i < vo.r; ++i) {
                        for (std::size_t j = 0; j < vo.c; ++j) {
                          const std::size_t k = i * vo.c + j;
                          out[k] = d(g[k], x[bidx(vx, i, j)], y[bidx(vy, i, j)]);
                        }
                      }
                      return out;
                    };
                    if (tape.requires_grad(ia)) tape.accumulate(ia, reduce_to(partial(da), x.shape()));
                    if (tape.requires_grad(ib)) tape.accumulate(ib, reduce_to(partial(db), y.shape()));
                  });
}

// d(g, x, y) gives the input gradient from upstream g, input x and output y.
template <class F, class D>
Var unary(Var x, const char* op, F f, D d) {
  Tape& t = owner(x, op);
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = f(xv[k]);
  return t.record(std::move(out), t.requires_grad(x.id()),
                  [ix = x.id(), d](Tape& tape, const Tensor& g, const Tensor& y) {
                    const Tensor& xv = tape.value(ix);
                    Tensor gx(xv.shape());
                    for (std::size_t k = 0; k < gx.size(); ++k) gx[k] = d(g[k], xv[k], y[k]);
                    tape.accumulate(ix, std::move(gx));
                  });
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

Var add(Var a, Var b) {
  return binary(
      a, b, "add", [](double x, double y) { return x + y; }, [](double g, double, double) { return g; },
      [](double g, double, double) { return g; });
}

Var sub(Var a, Var b) {
  return binary(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double g, double, double) { return g; },
      [](double g, double, double) { return -g; });
}

Var mul(Var a, Var b) {
  return binary(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double g, double, double y) { return g * y; },
      [](double g, double x, double) { return g * x; });
}

Var div(Var a, Var b) {
  return binary(
      a, b, "div", [](double x, double y) { return x / y; }, [](double g, double, double y) { return g / y; },
      [](double g, double x, double y) { return -g * x / (y * y); });
}

Var neg(Var x) {
  return unary(
      x, "neg", [](double v) { return -v; }, [](double g, double, double) { return -g; });
}

Var scale(Var x, double c) {
  return unary(
      x, "scale", [c](double v) { return c * v; }, [c](double g, double, double) { return c * g; });
}

Var add_scalar(Var x, double c) {
  return unary(
      x, "add_scalar", [c](double v) { return v + c; }, [](double g, double, double) { return g; });
}

Var square(Var x) {
  return unary(
      x, "square", [](double v) { return v * v; }, [](double g, double v, double) { return 2.0 * v * g; });
}

Var tanh(Var x) {
  return unary(
      x, "tanh", [](double v) { return std::tanh(v); }, [](double g, double, double y) { return g * (1.0 - y * y); });
}

Var silu(Var x) {
  return unary(
      x, "silu", [](double v) { return v * sigmoid(v); },
      [](double g, double v, double) {
        const double s = sigmoid(v);
        return g * s * (1.0 + v * (1.0 - s));
      });
}

Var exp(Var x) {
  return unary(
      x, "exp", [](double v) { return std::exp(v); }, [](double g, double, double y) { return g * y; });
}

Var log(Var x, double floor) {
  if (floor <= 0.0) {
    for (double v : x.value().data()) {
      if (!(v > 0.0)) throw DomainError("log: non-positive input " + std::to_string(v) + " without a floor");
    }
  }
  return unary(
      x, "log", [floor](double v) { return std::log(std::max(v, floor)); },
      [floor](double g, double v, double) { return v > floor ? g / v : 0.0; });
}

Var matmul(Var a, Var b) {
  Tape& t = same_tape(a, b, "matmul");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() == 0 || bv.rank() == 0) throw ShapeError("matmul: scalar operand " + to_string(av.shape()));
  const std::size_t m = av.rank() == 2 ? av.shape()[0] : 1;
  const std::size_t k = av.shape().back();
  const std::size_t kb = bv.shape()[0];
  const std::size_t n = bv.rank() == 2 ? bv.shape()[1] : 1;
  if (k != kb) {
    throw ShapeError("matmul: inner extents differ, " + to_string(av.shape()) + " x " + to_string(bv.shape()));
  }
  Shape os;
  if (av.rank() == 2) os.push_back(m);
  if (bv.rank() == 2) os.push_back(n);
  Tensor out(os);
  view(out.data().data(), m, n).noalias() = view(av.data().data(), m, k) * view(bv.data().data(), k, n);
  const bool rg = t.requires_grad(a.id()) || t.requires_grad(b.id());
  return t.record(std::move(out), rg, [ia = a.id(), ib = b.id(), m, k, n](Tape& tape, const Tensor& g, const Tensor&) {
    const ConstMap gm = view(g.data().data(), m, n);
    if (tape.requires_grad(ia)) {
      Tensor ga(tape.value(ia).shape());
      view(ga.data().data(), m, k).noalias() = gm * view(tape.value(ib).data().data(), k, n).transpose();
      tape.accumulate(ia, std::move(ga));
    }
    if (tape.requires_grad(ib)) {
      Tensor gb(tape.value(ib).shape());
      view(gb.data().data(), k, n).noalias() = view(tape.value(ia).data().data(), m, k).transpose() * gm;
      tape.accumulate(ib, std::move(gb));
    }
  });
}

Var affine(Var x, Var w, Var b) { return add(matmul(x, w), b); }

Var softmax(Var x) {
  Tape& t = owner(x, "softmax");
  const Tensor& xv = x.value();
  const View v = view_of(xv.shape());
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < v.r; ++i) {
    double mx = -INFINITY;
    for (std::size_t j = 0; j < v.c; ++j) mx = std::max(mx, xv[i * v.c + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < v.c; ++j) {
      out[i * v.c + j] = std::exp(xv[i * v.c + j] - mx);
      z += out[i * v.c + j];
    }
    for (std::size_t j = 0; j < v.c; ++j) out[i * v.c + j] /= z;
  }
  return t.record(std::move(out), t.requires_grad(x.id()), [ix = x.id()](Tape& tape, const Tensor& g, const Tensor& y) {
    const View v = view_of(y.shape());
    Tensor gx(y.shape());
    for (std::size_t i = 0; i < v.r; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < v.c; ++j) dot += g[i * v.c + j] * y[i * v.c + j];
      for (std::size_t j = 0; j < v.c; ++j) gx[i * v.c + j] = y[i * v.c + j] * (g[i * v.c + j] - dot);
    }
    tape.accumulate(ix, std::move(gx));
  });
}

Var sum(Var x) {
  Tape& t = owner(x, "sum");
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  return t.record(Tensor::scalar(s), t.requires_grad(x.id()), [ix = x.id()](Tape& tape, const Tensor& g, const Tensor&) {
    tape.accumulate(ix, Tensor(tape.value(ix).shape(), g[0]));
  });
}

Var mean(Var x) {
  const std::size_t n = x.value().size();
  if (n == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(n));
}

Var squared_norm(Var x) {
  Tape& t = owner(x, "squared_norm");
  double s = 0.0;
  for (double v : x.value().data()) s += v * v;
  return t.record(Tensor::scalar(s), t.requires_grad(x.id()), [ix = x.id()](Tape& tape, const Tensor& g, const Tensor&) {
    const Tensor& xv = tape.value(ix);
    Tensor gx(xv.shape());
    for (std::size_t k = 0; k < gx.size(); ++k) gx[k] = 2.0 * g[0] * xv[k];
    tape.accumulate(ix, std::move(gx));
  });
}

Var row_sum(Var x) {
  Tape& t = owner(x, "row_sum");
  const Tensor& xv = x.value();
  const View v = view_of(xv.shape());
  Tensor out(Shape{v.r, 1});
  for (std::size_t i = 0; i < v.r; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < v.c; ++j) s += xv[i * v.c + j];
    out[i] = s;
  }
  return t.record(std::move(out), t.requires_grad(x.id()), [ix = x.id()](Tape& tape, const Tensor& g, const Tensor&) {
    const Tensor& xv = tape.value(ix);
    const View v = view_of(xv.shape());
    Tensor gx(xv.shape());
    for (std::size_t i = 0; i < v.r; ++i) {
      for (std::size_t j = 0; j < v.c; ++j) gx[i * v.c + j] = g[i];
    }
    tape.accumulate(ix, std::move(gx));
  });
}

Var row_squared_norm(Var x) {
  Tape& t = owner(x, "row_squared_norm");
  const Tensor& xv = x.value();
  const View v = view_of(xv.shape());
  Tensor out(Shape{v.r, 1});
  for (std::size_t i = 0; i < v.r; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < v.c; ++j) s += xv[i * v.c + j] * xv[i * v.c + j];
    out[i] = s;
  }
  return t.record(std::move(out), t.requires_grad(x.id()), [ix = x.id()](Tape& tape, const Tensor& g, const Tensor&) {
    const Tensor& xv = tape.value(ix);
    const View v = view_of(xv.shape());
    Tensor gx(xv.shape());
    for (std::size_t i = 0; i < v.r; ++i) {
      for (std::size_t j = 0; j < v.c; ++j) gx[i * v.c + j] = 2.0 * g[i] * xv[i * v.c + j];
    }
    tape.accumulate(ix, std::move(gx));
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no parts");
  Tape& t = owner(parts[0], "concat_cols");
  const std::size_t r = parts[0].value().rows();
  std::size_t c = 0;
  bool rg = false;
  std::vector<std::size_t> ids, widths;
  for (Var p : parts) {
    if (p.tape() != &t) throw StateError("concat_cols: operands live on different tapes");
    const Tensor& v = p.value();
    if (v.rank() != 2 || v.rows() != r) {
      throw ShapeError("concat_cols: part " + to_string(v.shape()) + " does not have " + std::to_string(r) + " rows");
    }
    ids.push_back(p.id());
    widths.push_back(v.cols());
    c += v.cols();
    rg = rg || t.requires_grad(p.id());
  }
  Tensor out(Shape{r, c});
  std::size_t off = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const Tensor& v = parts[p].value();
    for (std::size_t i = 0; i < r; ++i) {
      std::copy_n(v.data().begin() + static_cast<std::ptrdiff_t>(i * widths[p]), widths[p],
                  out.data().begin() + static_cast<std::ptrdiff_t>(i * c + off));
    }
    off += widths[p];
  }
  return t.record(std::move(out), rg, [ids, widths, r, c](Tape& tape, const Tensor& g, const Tensor&) {
    std::size_t off = 0;
    for (std::size_t p = 0; p < ids.size(); ++p) {
      if (tape.requires_grad(ids[p])) {
        Tensor gp(Shape{r, widths[p]});
        for (std::size_t i = 0; i < r; ++i) {
          for (std::size_t j = 0; j < widths[p]; ++j) gp[i * widths[p] + j] = g[i * c + off + j];
        }
        tape.accumulate(ids[p], std::move(gp));
      }
      off += widths[p];
    }
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no parts");
  Tape& t = owner(parts[0], "concat_rows");
  std::vector<Tensor> values;
  std::vector<std::size_t> ids, heights;
  bool rg = false;
  for (Var p : parts) {
    if (p.tape() != &t) throw StateError("concat_rows: operands live on different tapes");
    values.push_back(p.value());
    ids.push_back(p.id());
    heights.push_back(p.value().rows());
    rg = rg || t.requires_grad(p.id());
  }
  Tensor out = Tensor::concat_rows(values);
  return t.record(std::move(out), rg, [ids, heights](Tape& tape, const Tensor& g, const Tensor&) {
    std::size_t off = 0;
    for (std::size_t p = 0; p < ids.size(); ++p) {
      if (tape.requires_grad(ids[p])) tape.accumulate(ids[p], g.slice_rows(off, off + heights[p]));
      off += heights[p];
    }
  });
}

Var slice_rows(Var x, std::size_t begin, std::size_t end) {
  Tape& t = owner(x, "slice_rows");
  Tensor out = x.value().slice_rows(begin, end);
  return t.record(std::move(out), t.requires_grad(x.id()),
                  [ix = x.id(), begin](Tape& tape, const Tensor& g, const Tensor&) {
                    Tensor gx(tape.value(ix).shape(), 0.0);
                    std::copy(g.data().begin(), g.data().end(),
                              gx.data().begin() + static_cast<std::ptrdiff_t>(begin * gx.cols()));
                    tape.accumulate(ix, std::move(gx));
                  });
}

Var gather_rows(Var table, std::span<const int> indices) {
  Tape& t = owner(table, "gather_rows");
  const Tensor& tv = table.value();
  if (tv.rank() != 2) throw ShapeError("gather_rows: table must be rank 2, got " + to_string(tv.shape()));
  const std::size_t rows = tv.shape()[0], c = tv.shape()[1];
  Tensor out(Shape{indices.size(), c});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const int idx = indices[i];
    if (idx < 0 || static_cast<std::size_t>(idx) >= rows) {
      throw DomainError("gather_rows: index " + std::to_string(idx) + " outside [0," + std::to_string(rows) + ")");
    }
    std::copy_n(tv.data().begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(idx) * c), c,
                out.data().begin() + static_cast<std::ptrdiff_t>(i * c));
  }
  std::vector<int> idx(indices.begin(), indices.end());
  return t.record(std::move(out), t.requires_grad(table.id()),
                  [it = table.id(), idx = std::move(idx), c](Tape& tape, const Tensor& g, const Tensor&) {
                    Tensor gt(tape.value(it).shape(), 0.0);
                    for (std::size_t i = 0; i < idx.size(); ++i) {
                      const std::size_t base = static_cast<std::size_t>(idx[i]) * c;
                      for (std::size_t j = 0; j < c; ++j) gt[base + j] += g[i * c + j];
                    }
                    tape.accumulate(it, std::move(gt));
                  });
}

Var broadcast_to(Var x, const Shape& shape) {
  Tape& t = owner(x, "broadcast_to");
  const Tensor& xv = x.value();
  if (broadcast_shape(xv.shape(), shape, "broadcast_to") != shape) {
    throw ShapeError("broadcast_to: " + to_string(xv.shape()) + " does not broadcast to " + to_string(shape));
  }
  Tensor out(shape);
  const View vo = view_of(shape), vx = view_of(xv.shape());
  for (std::size_t i = 0; i < vo.r; ++i) {
    for (std::size_t j = 0; j < vo.c; ++j) out[i * vo.c + j] = xv[bidx(vx, i, j)];
  }
  return t.record(std::move(out), t.requires_grad(x.id()), [ix = x.id()](Tape& tape, const Tensor& g, const Tensor&) {
    tape.accumulate(ix, reduce_to(g, tape.value(ix).shape()));
  });
}

Var stop_gradient(Var x) { return owner(x, "stop_gradient").constant(x.value()); }

}  // namespace cdg::ad
