#include "segkit/tensor.hpp"

#include <algorithm>
#include <sstream>

#include "segkit/error.hpp"

namespace segkit {

namespace {

void check_shape(const Shape& shape) {
  if (shape.empty() || shape.size() > kMaxRank) {
    fail(Errc::kShapeMismatch, "rank must be in [1, 5], got " + std::to_string(shape.size()));
  }
  for (std::size_t d : shape) {
    if (d == 0) fail(Errc::kShapeMismatch, "zero-sized axis in " + shape_str(shape));
  }
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::vector<std::size_t> row_major_strides(const Shape& shape) {
  std::vector<std::size_t> strides(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) strides[i - 1] = strides[i] * shape[i];
  return strides;
}

Tensor Tensor::from_vector(Shape shape, std::vector<double> data) {
  check_shape(shape);
  if (shape_numel(shape) != data.size()) {
    fail(Errc::kShapeMismatch, "shape " + shape_str(shape) + " needs " +
                                   std::to_string(shape_numel(shape)) + " values, got " +
                                   std::to_string(data.size()));
  }
  Tensor t;
  t.shape_ = std::move(shape);
  t.data_ = std::make_shared<std::vector<double>>(std::move(data));
  return t;
}

Tensor Tensor::create(Shape shape, std::span<const double> data) {
  return from_vector(std::move(shape), std::vector<double>(data.begin(), data.end()));
}

Tensor Tensor::create(Shape shape, std::initializer_list<double> data) {
  return from_vector(std::move(shape), std::vector<double>(data));
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
  check_shape(shape);
  const std::size_t n = shape_numel(shape);
  return from_vector(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return from_vector({1}, {value}); }

std::span<const double> Tensor::data() const {
  if (!data_) return {};
  return {data_->data(), data_->size()};
}

std::span<double> Tensor::mutable_data() {
  if (!data_) return {};
  return {data_->data(), data_->size()};
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  if (index.size() != shape_.size()) {
    fail(Errc::kShapeMismatch, "index rank differs from tensor rank");
  }
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (std::size_t i : index) {
    if (i >= shape_[axis]) fail(Errc::kShapeMismatch, "index out of range");
    flat = flat * shape_[axis] + i;
    ++axis;
  }
  return (*data_)[flat];
}

double Tensor::item() const {
  if (numel() != 1) fail(Errc::kNotScalar, "tensor has " + std::to_string(numel()) + " elements");
  return (*data_)[0];
}

Tensor& Tensor::set_requires_grad(bool on) {
  requires_grad_ = on;
  if (!on) link_.reset();
  return *this;
}

Tensor Tensor::clone() const {
  Tensor t;
  t.shape_ = shape_;
  if (data_) t.data_ = std::make_shared<std::vector<double>>(*data_);
  t.requires_grad_ = requires_grad_ && !link_;
  return t;
}

Tensor Tensor::detach() const {
  Tensor t;
  t.shape_ = shape_;
  t.data_ = data_;
  return t;
}

Tensor attach_link(Tensor t, TapeLink link) {
  t.requires_grad_ = true;
  t.link_ = link;
  return t;
}

}  // namespace segkit
