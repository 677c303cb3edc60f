#include "segkit/autograd.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>

#include "segkit/error.hpp"

namespace segkit {

namespace {

thread_local Tape* g_active = nullptr;
std::atomic<std::uint64_t> g_next_tape_id{1};

}  // namespace

Gradients::Gradients(std::uint64_t tape_id, std::unordered_map<std::size_t, Tensor> by_node,
                     std::unordered_map<const void*, std::size_t> leaves)
    : tape_id_(tape_id), by_node_(std::move(by_node)), leaves_(std::move(leaves)) {}

std::optional<Tensor> Gradients::wrt(const Tensor& t) const {
  std::optional<std::size_t> node;
  if (t.link() && t.link()->tape_id == tape_id_) {
    node = t.link()->node;
  } else if (auto it = leaves_.find(t.storage_id()); it != leaves_.end()) {
    node = it->second;
  }
  if (!node) return std::nullopt;
  auto it = by_node_.find(*node);
  if (it == by_node_.end()) return std::nullopt;
  return it->second;
}

Tape::Tape() : id_(g_next_tape_id.fetch_add(1)), previous_(g_active) { g_active = this; }

Tape::~Tape() { g_active = previous_; }

Tape* Tape::active() { return g_active; }

std::size_t Tape::node_for(const Tensor& input) {
  if (input.link() && input.link()->tape_id == id_) return input.link()->node;
  if (auto it = leaves_.find(input.storage_id()); it != leaves_.end()) return it->second;
  TapeNode leaf;
  leaf.op = "leaf";
  leaf.shape = input.shape();
  leaf.leaf_storage = input.storage_id();
  nodes_.push_back(std::move(leaf));
  leaves_.emplace(input.storage_id(), nodes_.size() - 1);
  return nodes_.size() - 1;
}

std::size_t Tape::push(std::string_view op, std::vector<std::size_t> parents, Shape shape,
                       BackwardFn fn) {
  TapeNode node;
  node.op = op;
  node.parents = std::move(parents);
  node.shape = std::move(shape);
  node.backward = std::move(fn);
  nodes_.push_back(std::move(node));
  return nodes_.size() - 1;
}

Gradients Tape::backward(const Tensor& loss) const {
  if (loss.numel() != 1) {
    fail(Errc::kNotScalar, "loss has " + std::to_string(loss.numel()) + " elements");
  }
  if (!loss.link() || loss.link()->tape_id != id_) {
    fail(Errc::kNotScalar, "loss was not recorded on this tape");
  }
  const std::size_t root = loss.link()->node;
  std::vector<std::optional<std::vector<double>>> grads(nodes_.size());
  grads[root] = std::vector<double>{1.0};

  std::vector<std::vector<double>*> slots;
  for (std::size_t i = root + 1; i-- > 0;) {
    if (!grads[i]) continue;
    const TapeNode& node = nodes_[i];
    if (!node.backward) continue;
    slots.assign(node.parents.size(), nullptr);
    for (std::size_t k = 0; k < node.parents.size(); ++k) {
      const std::size_t p = node.parents[k];
      if (p == kNoParent) continue;
      if (!grads[p]) grads[p] = std::vector<double>(shape_numel(nodes_[p].shape), 0.0);
      slots[k] = &*grads[p];
    }
    node.backward(*grads[i], slots);
  }

  std::unordered_map<std::size_t, Tensor> by_node;
  for (std::size_t i = 0; i <= root; ++i) {
    if (grads[i]) by_node.emplace(i, Tensor::from_vector(nodes_[i].shape, std::move(*grads[i])));
  }
  return Gradients(id_, std::move(by_node), leaves_);
}

NoGradGuard::NoGradGuard() : saved_(g_active) { g_active = nullptr; }

NoGradGuard::~NoGradGuard() { g_active = saved_; }

namespace autograd {

bool participates(const Tensor& t) { return g_active != nullptr && t.requires_grad(); }

Tensor record(std::string_view op, Tensor out, std::span<const Tensor* const> inputs,
              BackwardFn fn) {
  Tape* tape = g_active;
  if (tape == nullptr) return out;
  const bool any = std::any_of(inputs.begin(), inputs.end(),
                               [](const Tensor* t) { return t && t->requires_grad(); });
  if (!any) return out;
  std::vector<std::size_t> parents;
  parents.reserve(inputs.size());
  for (const Tensor* t : inputs) {
    parents.push_back(t && t->requires_grad() ? tape->node_for(*t) : kNoParent);
  }
  const std::size_t id = tape->push(op, std::move(parents), out.shape(), std::move(fn));
  return attach_link(std::move(out), TapeLink{tape->id(), id});
}

Tensor record(std::string_view op, Tensor out, std::initializer_list<const Tensor*> inputs,
              BackwardFn fn) {
  return record(op, std::move(out), std::span<const Tensor* const>(inputs.begin(), inputs.size()),
                std::move(fn));
}

}  // namespace autograd

double finite_difference_check(const ScalarFn& f, std::span<const Tensor> inputs, double step) {
  std::vector<Tensor> leaves;
  leaves.reserve(inputs.size());
  for (const Tensor& t : inputs) {
    Tensor leaf = t.clone();
    leaf.set_requires_grad(true);
    leaves.push_back(std::move(leaf));
  }

  std::vector<std::optional<Tensor>> analytic(leaves.size());
  {
    Tape tape;
    Tensor out = f(leaves);
    const Gradients grads = tape.backward(out);
    for (std::size_t k = 0; k < leaves.size(); ++k) analytic[k] = grads.wrt(leaves[k]);
  }

  NoGradGuard no_grad;
  double worst = 0.0;
  for (std::size_t k = 0; k < leaves.size(); ++k) {
    std::span<double> values = leaves[k].mutable_data();
    for (std::size_t j = 0; j < values.size(); ++j) {
      const double saved = values[j];
      values[j] = saved + step;
      const double plus = f(leaves).item();
      values[j] = saved - step;
      const double minus = f(leaves).item();
      values[j] = saved;
      const double numeric = (plus - minus) / (2.0 * step);
      const double exact = analytic[k] ? (*analytic[k])[j] : 0.0;
      const double err = std::abs(exact - numeric) / std::max(1.0, std::abs(exact));
      if (std::isnan(err)) return err;
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace segkit
