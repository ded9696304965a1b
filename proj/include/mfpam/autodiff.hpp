#pragma once

#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mfpam/tensor.hpp"

namespace mfpam {

/// One value in the computation graph. Leaves (parameters, inputs) are
/// created outside any tape; everything produced by an op is an
/// intermediate owned by the tape that recorded it.
template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  bool is_leaf = true;

  Tensor<T>& ensure_grad() {
    if (grad.shape() != value.shape()) grad = Tensor<T>(value.shape());
    return grad;
  }
};

template <typename T>
using Var = std::shared_ptr<Node<T>>;

template <typename T>
Var<T> make_var(Tensor<T> value, bool requires_grad = false) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  return n;
}

template <typename T>
Var<T> constant(Tensor<T> value) {
  return make_var(std::move(value), false);
}

/// A named learnable tensor. The value/grad pair lives in a shared node so
/// that layers and the optimizer see the same storage.
template <typename T>
struct Parameter {
  std::string name;
  Var<T> var;

  Tensor<T>& value() { return var->value; }
  const Tensor<T>& value() const { return var->value; }
  Tensor<T>& grad() { return var->ensure_grad(); }
  std::size_t numel() const { return var->value.size(); }
};

template <typename T>
Parameter<T> make_parameter(std::string name, Tensor<T> value) {
  return Parameter<T>{std::move(name), make_var(std::move(value), true)};
}

/// Ordered record of executed differentiable ops.
///
/// Replaying runs the recorded closures in exact reverse order. Leaf
/// gradients are collected into fresh buffers during a replay and added to
/// the persistent grads once at the end, so repeated replays accumulate
/// exactly.
template <typename T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Registers an op output and its backward closure. Inputs that are
  /// leaves requiring grad must be passed so their accumulation can be
  /// staged.
  void record(const Var<T>& output, std::function<void()> backward,
              std::initializer_list<Var<T>> inputs) {
    if (!recording_) return;
    output->is_leaf = false;
    outputs_.push_back(output);
    ops_.push_back(std::move(backward));
    for (const auto& in : inputs) touch(in);
  }

  void record(const Var<T>& output, std::function<void()> backward,
              const std::vector<Var<T>>& inputs) {
    if (!recording_) return;
    output->is_leaf = false;
    outputs_.push_back(output);
    ops_.push_back(std::move(backward));
    for (const auto& in : inputs) touch(in);
  }

  std::size_t size() const noexcept { return ops_.size(); }

  /// A non-recording tape runs forward passes only (inference).
  void set_recording(bool on) noexcept { recording_ = on; }
  bool recording() const noexcept { return recording_; }

  void clear() {
    ops_.clear();
    outputs_.clear();
    leaves_.clear();
    seen_.clear();
  }

  /// Backpropagates from a scalar loss produced on this tape.
  void backward(const Var<T>& loss) {
    if (loss->value.size() != 1)
      throw UsageError("backward: loss must be a scalar, got shape " +
                       shape_str(loss->value.shape()));
    for (auto& out : outputs_) {
      if (out->requires_grad) out->ensure_grad().fill(T(0));
    }
    std::vector<Tensor<T>> saved;
    saved.reserve(leaves_.size());
    for (auto& leaf : leaves_) {
      saved.push_back(std::move(leaf->ensure_grad()));
      leaf->grad = Tensor<T>(leaf->value.shape());
    }
    if (loss->is_leaf) {
      // loss is itself a leaf (e.g. a parameter viewed as loss)
      if (loss->requires_grad) loss->ensure_grad()[0] += T(1);
    } else {
      loss->ensure_grad()[0] = T(1);
    }
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
    for (std::size_t i = 0; i < leaves_.size(); ++i) {
      auto& g = leaves_[i]->grad;
      const auto& prev = saved[i];
      for (std::size_t k = 0; k < g.size(); ++k) g[k] = prev[k] + g[k];
    }
  }

 private:
  void touch(const Var<T>& in) {
    if (in && in->is_leaf && in->requires_grad &&
        seen_.insert(in.get()).second)
      leaves_.push_back(in);
  }

  std::vector<std::function<void()>> ops_;
  std::vector<Var<T>> outputs_;
  std::vector<Var<T>> leaves_;
  std::unordered_set<const Node<T>*> seen_;
  bool recording_ = true;
};

template <typename T>
void backward(Tape<T>& tape, const Var<T>& loss) {
  tape.backward(loss);
}

template <typename T>
void zero_grad(std::vector<Parameter<T>>& params) {
  for (auto& p : params) p.grad().fill(T(0));
}

}  // namespace mfpam
