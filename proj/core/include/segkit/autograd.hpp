#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <optional>
#include <span>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "segkit/tensor.hpp"

namespace segkit {

// grad_in[i] is null when input i does not participate in differentiation.
using BackwardFn = std::function<void(std::span<const double> grad_out,
                                      std::span<std::vector<double>*> grad_in)>;

inline constexpr std::size_t kNoParent = static_cast<std::size_t>(-1);

struct TapeNode {
  std::string_view op;
  std::vector<std::size_t> parents;  // kNoParent for non-participating inputs
  Shape shape;
  BackwardFn backward;
  const void* leaf_storage = nullptr;  // set for leaves only
};

class Gradients {
 public:
  Gradients() = default;
  Gradients(std::uint64_t tape_id,
            std::unordered_map<std::size_t, Tensor> by_node,
            std::unordered_map<const void*, std::size_t> leaves);

  // Gradient with respect to t: t may be a leaf used during the recorded pass
  // (looked up by storage) or an intermediate produced on the same tape.
  std::optional<Tensor> wrt(const Tensor& t) const;
  std::size_t size() const { return by_node_.size(); }

 private:
  std::uint64_t tape_id_ = 0;
  std::unordered_map<std::size_t, Tensor> by_node_;
  std::unordered_map<const void*, std::size_t> leaves_;
};

// Define-by-run reverse-mode tape. Constructing a Tape makes it the active
// tape of the calling thread until it is destroyed; ops evaluated meanwhile on
// tensors that require gradients are recorded in evaluation order, so parent
// ids always precede their children.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();

  std::uint64_t id() const { return id_; }
  std::size_t size() const { return nodes_.size(); }
  const TapeNode& node(std::size_t i) const { return nodes_.at(i); }

  // Throws kNotScalar unless loss has exactly one element and was produced
  // on this tape.
  Gradients backward(const Tensor& loss) const;

  // Used by op implementations through record().
  std::size_t node_for(const Tensor& input);
  std::size_t push(std::string_view op, std::vector<std::size_t> parents,
                   Shape shape, BackwardFn fn);

 private:
  std::uint64_t id_;
  Tape* previous_;
  std::vector<TapeNode> nodes_;
  std::unordered_map<const void*, std::size_t> leaves_;
};

// Suspends recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  Tape* saved_;
};

namespace autograd {

// True when a tape is active and t requires gradients.
bool participates(const Tensor& t);

// Records `out` as produced by `op` from `inputs`. Returns `out` unchanged when
// no input participates.
Tensor record(std::string_view op, Tensor out,
              std::initializer_list<const Tensor*> inputs, BackwardFn fn);
Tensor record(std::string_view op, Tensor out,
              std::span<const Tensor* const> inputs, BackwardFn fn);

}  // namespace autograd

// Central-difference gradient check. Compares the tape gradient of f with
// (f(x + h) - f(x - h)) / 2h for every element of every input; the relative
// error of one element is |analytic - numeric| / max(1, |analytic|).
// f must return a one-element tensor.
using ScalarFn = std::function<Tensor(std::span<const Tensor>)>;
double finite_difference_check(const ScalarFn& f, std::span<const Tensor> inputs,
                               double step = 1e-5);

}  // namespace segkit
