#pragma once

#include <span>
#include <vector>

#include "cdg/autodiff/tape.hpp"

namespace cdg::ad {

// Elementwise binary ops broadcast over the 2-D matrix view: each dimension
// must match or be 1.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);

Var neg(Var x);
Var scale(Var x, double c);
Var add_scalar(Var x, double c);
Var square(Var x);
Var tanh(Var x);
Var silu(Var x);
Var exp(Var x);
// Natural log of max(x, floor). With floor == 0 every entry must be positive.
// Floored entries receive zero gradient.
Var log(Var x, double floor = 0.0);

// [m,k]x[k,n] -> [m,n]; rank-1 operands act as a row (lhs) or column (rhs).
Var matmul(Var a, Var b);
// x W + b with b broadcast over rows.
Var affine(Var x, Var w, Var b);

// Row-wise softmax over the last axis.
Var softmax(Var x);

Var sum(Var x);
Var mean(Var x);
Var squared_norm(Var x);
// Per-row reductions over the last axis; result is [rows, 1].
Var row_sum(Var x);
Var row_squared_norm(Var x);

Var concat_cols(std::span<const Var> parts);
Var concat_rows(std::span<const Var> parts);
Var slice_rows(Var x, std::size_t begin, std::size_t end);
// Rows of `table` selected by `indices`; gradient scatter-adds into the table.
Var gather_rows(Var table, std::span<const int> indices);
Var broadcast_to(Var x, const Shape& shape);

// Same value, no gradient path back to x.
Var stop_gradient(Var x);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator*(double c, Var x) { return scale(x, c); }
inline Var operator-(Var x) { return neg(x); }

}  // namespace cdg::ad
