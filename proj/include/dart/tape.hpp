#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "dart/tensor.hpp"

namespace dart {

// Handle into a Tape. Only meaningful for the tape that produced it.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

// Named learnable array with its accumulated gradient.
template <typename T>
struct Param {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  double lr_scale = 1.0;  // per-param multiplier on the optimizer step size

  Param() = default;
  Param(std::string n, Tensor<T> v) : name(std::move(n)), value(std::move(v)), grad(Tensor<T>::zeros(value.shape)) {}

  void zero_grad() { std::fill(grad.data.begin(), grad.data.end(), T{0}); }
};

// Flat registry of parameters, in registration order. Checkpointing and the
// optimizer iterate this order, which must therefore be deterministic.
template <typename T>
class ParamSet {
 public:
  void add(Param<T>& p) { params_.push_back(&p); }
  std::size_t size() const { return params_.size(); }
  Param<T>& operator[](std::size_t i) { return *params_[i]; }
  const Param<T>& operator[](std::size_t i) const { return *params_[i]; }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  void zero_grad() {
    for (auto* p : params_) p->zero_grad();
  }

 private:
  std::vector<Param<T>*> params_;
};

// Records one forward pass as a topologically ordered list of operations.
// backward() replays the list in exact reverse order, accumulating
// gradients additively. One tape per forward pass; never shared.
template <typename T>
class Tape {
 public:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;  // allocated during backward for tracked nodes
    bool track = false;
    const char* op = "";
    std::function<void(Tape&)> backprop;
  };

  explicit Tape(bool check_finite = true, bool no_grad = false)
      : check_finite_(check_finite), no_grad_(no_grad) {}

  Var push(Tensor<T> value, bool track, const char* op) {
    if (check_finite_ && !value.all_finite())
      throw NumericError(std::string("non-finite output of ") + op);
    Node n;
    n.value = std::move(value);
    n.track = track;
    n.op = op;
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  void set_backprop(Var v, std::function<void(Tape&)> fn) {
    nodes_[static_cast<std::size_t>(v.id)].backprop = std::move(fn);
  }

  Var constant(Tensor<T> value) { return push(std::move(value), false, "constant"); }

  // Enters a parameter as a tracked leaf; after backward, the leaf's
  // gradient is added into the parameter's grad buffer. On a no-grad tape
  // parameters enter as constants, so inference never tracks anything.
  Var leaf(Param<T>& p) {
    if (no_grad_) return push(p.value, false, "leaf");
    Var v = push(p.value, true, "leaf");
    Param<T>* pp = &p;
    int id = v.id;
    set_backprop(v, [pp, id](Tape& tp) {
      Tensor<T>& g = tp.grad_ref(id);
      require_same_shape("leaf", pp->grad, g);
      for (std::int64_t i = 0; i < g.size(); ++i) pp->grad[i] += g[i];
    });
    return v;
  }

  const Tensor<T>& val(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].value; }
  bool tracked(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].track; }
  bool tracked(int id) const { return nodes_[static_cast<std::size_t>(id)].track; }
  const char* op_name(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].op; }

  Tensor<T>& grad_ref(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.size() == 0) n.grad = Tensor<T>::zeros(n.value.shape);
    return n.grad;
  }
  const Tensor<T>& value_of(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }

  // Accumulate into node id's gradient if that node is tracked.
  void accumulate(int id, const Tensor<T>& g) {
    if (!tracked(id)) return;
    Tensor<T>& dst = grad_ref(id);
    require_same_shape("accumulate", dst, g);
    for (std::int64_t i = 0; i < g.size(); ++i) dst[i] += g[i];
  }

  void backward(Var loss) {
    if (!loss.valid() || loss.id >= static_cast<int>(nodes_.size()))
      throw ContractError("backward: loss is not on this tape");
    Node& ln = nodes_[static_cast<std::size_t>(loss.id)];
    if (ln.value.size() != 1) throw ContractError("backward: loss must be scalar, got shape " + shape_str(ln.value.shape));
    if (!ln.track) throw ContractError("backward: loss is detached (no tracked inputs)");

    // Fresh node gradients for this traversal; Param grads are left alone so
    // repeated backwards accumulate additively.
    for (int i = 0; i <= loss.id; ++i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (n.track) {
        n.grad = Tensor<T>::zeros(n.value.shape);
      }
    }
    grad_ref(loss.id)[0] = T{1};
    for (int i = loss.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (n.track && n.backprop) n.backprop(*this);
    }
  }

  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }
  bool check_finite() const { return check_finite_; }
  bool no_grad() const { return no_grad_; }

 private:
  std::vector<Node> nodes_;
  bool check_finite_ = true;
  bool no_grad_ = false;
};

}  // namespace dart
