#include "cdg/autodiff/tensor.hpp"

#include <cmath>
#include <sstream>

#include "cdg/error.hpp"

namespace cdg::ad {

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t element_count(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

namespace {
void check_rank(const Shape& shape) {
  if (shape.size() > 2) throw ShapeError("Tensor: rank " + std::to_string(shape.size()) + " unsupported");
}
}  // namespace

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  check_rank(shape_);
  data_.assign(element_count(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  check_rank(shape_);
  if (element_count(shape_) != data_.size()) {
    throw ShapeError("Tensor: shape " + to_string(shape_) + " holds " + std::to_string(element_count(shape_)) +
                     " values, got " + std::to_string(data_.size()));
  }
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, std::vector<double>{value}); }

Tensor Tensor::vector(std::vector<double> values) {
  const std::size_t n = values.size();
  return Tensor(Shape{n}, std::move(values));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
  return Tensor(Shape{rows, cols}, std::move(values));
}

std::size_t Tensor::rows() const { return shape_.size() == 2 ? shape_[0] : 1; }

std::size_t Tensor::cols() const {
  if (shape_.empty()) return 1;
  return shape_.back();
}

double Tensor::item() const {
  if (data_.size() != 1) throw ShapeError("Tensor::item: shape " + to_string(shape_) + " is not a single value");
  return data_[0];
}

bool Tensor::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

std::span<const double> Tensor::row(std::size_t r) const {
  return std::span<const double>(data_).subspan(r * cols(), cols());
}

Tensor Tensor::slice_rows(std::size_t begin, std::size_t end) const {
  if (rank() != 2 || begin > end || end > shape_[0]) {
    throw ShapeError("Tensor::slice_rows: [" + std::to_string(begin) + "," + std::to_string(end) + ") of " +
                     to_string(shape_));
  }
  const std::size_t c = shape_[1];
  return Tensor(Shape{end - begin, c},
                std::vector<double>(data_.begin() + static_cast<std::ptrdiff_t>(begin * c),
                                    data_.begin() + static_cast<std::ptrdiff_t>(end * c)));
}

Tensor Tensor::concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("Tensor::concat_rows: no parts");
  const std::size_t c = parts[0].cols();
  std::size_t r = 0;
  std::vector<double> data;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.cols() != c) {
      throw ShapeError("Tensor::concat_rows: part " + to_string(p.shape()) + " does not have " + std::to_string(c) +
                       " columns");
    }
    r += p.rows();
    data.insert(data.end(), p.data_.begin(), p.data_.end());
  }
  return Tensor(Shape{r, c}, std::move(data));
}

}  // namespace cdg::ad
