#pragma once

#include <functional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ssdn/tensor.hpp"

namespace ssdn {

// Handle to a node on one tape. Only meaningful together with the tape
// that issued it.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

template <typename T>
class Gradients {
 public:
  bool contains(Var v) const { return map_.count(v.id) != 0; }

  const Tensor<T>* find(Var v) const {
    auto it = map_.find(v.id);
    return it == map_.end() ? nullptr : &it->second;
  }

  const Tensor<T>& at(Var v) const {
    auto it = map_.find(v.id);
    if (it == map_.end()) {
      throw ContractViolation("Gradients: no gradient recorded for node " + std::to_string(v.id));
    }
    return it->second;
  }

  size_t size() const { return map_.size(); }
  void insert(int id, Tensor<T> g) { map_.emplace(id, std::move(g)); }

 private:
  std::unordered_map<int, Tensor<T>> map_;
};

// Append-only record of a computation. Node ids are issued in topological
// order; a backward rule scatters the incoming gradient to its parents via
// accumulate(). Confined to one thread.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor<T>&)>;

  Var leaf(Tensor<T> value, bool requires_grad = false) {
    nodes_.push_back(Node{std::move(value), {}, nullptr, requires_grad});
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  Var constant(Tensor<T> value) { return leaf(std::move(value), false); }

  // Generic op node; requires_grad propagates from parents.
  Var make_node(Tensor<T> value, std::vector<int> parents, BackwardFn backward) {
    bool rg = false;
    for (int p : parents) {
      check_id(p);
      rg = rg || nodes_[static_cast<size_t>(p)].requires_grad;
    }
    nodes_.push_back(Node{std::move(value), std::move(parents), std::move(backward), rg});
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  const Tensor<T>& value(Var v) const {
    check_id(v.id);
    return nodes_[static_cast<size_t>(v.id)].value;
  }

  bool requires_grad(Var v) const {
    check_id(v.id);
    return nodes_[static_cast<size_t>(v.id)].requires_grad;
  }

  int num_nodes() const { return static_cast<int>(nodes_.size()); }

  // Id of the first node holding a non-finite value, -1 if none.
  int first_non_finite_node() const {
    for (size_t i = 0; i < nodes_.size(); ++i) {
      if (!nodes_[i].value.all_finite()) return static_cast<int>(i);
    }
    return -1;
  }

  // Called by backward rules. Gradients for nodes that do not require one
  // are never materialized.
  void accumulate(int node_id, const Tensor<T>& g) {
    check_id(node_id);
    Node& n = nodes_[static_cast<size_t>(node_id)];
    if (!n.requires_grad) return;
    if (g.shape() != n.value.shape()) {
      throw ContractViolation("Tape::accumulate: gradient shape " + shape_str(g.shape()) +
                              " does not match value shape " + shape_str(n.value.shape()) +
                              " at node " + std::to_string(node_id));
    }
    if (!has_grad_[static_cast<size_t>(node_id)]) {
      grad_[static_cast<size_t>(node_id)] = g;
      has_grad_[static_cast<size_t>(node_id)] = 1;
    } else {
      Tensor<T>& acc = grad_[static_cast<size_t>(node_id)];
      for (int64_t i = 0; i < acc.size(); ++i) acc[i] += g[i];
    }
  }

  // Reverse accumulation from a scalar node. Each contributing node's rule
  // runs exactly once, after all of its consumers.
  Gradients<T> backward(Var loss) {
    check_id(loss.id);
    if (value(loss).size() != 1) {
      throw ContractViolation("Tape::backward: loss must be scalar, got shape " +
                              shape_str(value(loss).shape()));
    }
    grad_.assign(nodes_.size(), Tensor<T>());
    has_grad_.assign(nodes_.size(), 0);
    if (nodes_[static_cast<size_t>(loss.id)].requires_grad) {
      accumulate(loss.id, Tensor<T>::full(value(loss).shape(), T(1)));
      for (int i = loss.id; i >= 0; --i) {
        Node& n = nodes_[static_cast<size_t>(i)];
        if (!has_grad_[static_cast<size_t>(i)] || !n.backward) continue;
        n.backward(*this, grad_[static_cast<size_t>(i)]);
      }
    }
    Gradients<T> out;
    for (size_t i = 0; i < nodes_.size(); ++i) {
      if (has_grad_[i]) out.insert(static_cast<int>(i), std::move(grad_[i]));
    }
    grad_.clear();
    has_grad_.clear();
    return out;
  }

 private:
  struct Node {
    Tensor<T> value;
    std::vector<int> parents;
    BackwardFn backward;
    bool requires_grad = false;
  };

  void check_id(int id) const {
    if (id < 0 || id >= static_cast<int>(nodes_.size())) {
      throw ContractViolation("Tape: invalid node id " + std::to_string(id));
    }
  }

  std::vector<Node> nodes_;
  std::vector<Tensor<T>> grad_;
  std::vector<char> has_grad_;
};

}  // namespace ssdn
