#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace segkit {

using Shape = std::vector<std::size_t>;

inline constexpr std::size_t kMaxRank = 5;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Position of a tensor on a particular tape. The tape id makes links from a
// previous forward pass detectable as stale.
struct TapeLink {
  std::uint64_t tape_id = 0;
  std::size_t node = 0;
};

// Dense row-major array of doubles.
//
// Copies share storage; use clone() for an independent buffer. Storage
// identity is what the autograd tape uses to recognise a leaf (a parameter)
// across several uses inside one forward pass.
class Tensor {
 public:
  Tensor() = default;

  // Throws kShapeMismatch when product(shape) != data.size(), a shape entry is
  // zero, or rank exceeds kMaxRank.
  static Tensor create(Shape shape, std::span<const double> data);
  static Tensor create(Shape shape, std::initializer_list<double> data);
  static Tensor from_vector(Shape shape, std::vector<double> data);
  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);

  bool defined() const { return data_ != nullptr; }
  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t numel() const { return data_ ? data_->size() : 0; }

  std::span<const double> data() const;
  // Writes are visible through every tensor sharing this storage.
  std::span<double> mutable_data();

  double operator[](std::size_t flat) const { return (*data_)[flat]; }
  double at(std::initializer_list<std::size_t> index) const;
  // Value of a one-element tensor; throws kNotScalar otherwise.
  double item() const;

  bool requires_grad() const { return requires_grad_; }
  Tensor& set_requires_grad(bool on);

  const std::optional<TapeLink>& link() const { return link_; }
  const void* storage_id() const { return data_.get(); }

  Tensor clone() const;
  // Same storage, no autograd participation.
  Tensor detach() const;

 private:
  friend Tensor attach_link(Tensor t, TapeLink link);

  Shape shape_;
  std::shared_ptr<std::vector<double>> data_;
  bool requires_grad_ = false;
  std::optional<TapeLink> link_;
};

// Internal: marks t as the output of a recorded tape node.
Tensor attach_link(Tensor t, TapeLink link);

std::vector<std::size_t> row_major_strides(const Shape& shape);

}  // namespace segkit
