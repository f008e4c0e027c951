#pragma once

// Reverse-mode evaluation tape for the registration network.
//
// Activations live as nodes in a Graph; parameters live outside it and collect
// gradients directly. A Graph built with tracking disabled stores no backward
// closures, which is what inference uses.

#include <deque>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "fusionreg/volgrid.hpp"

namespace fusionreg::nn {

using Tensor = BasicFeatureGrid<float>;

struct Parameter {
  std::string name;
  std::vector<int> shape;
  std::vector<float> value;
  std::vector<float> grad;

  std::size_t size() const { return value.size(); }
};

/// Owns parameters with stable addresses, in creation order.
class ParameterStore {
 public:
  Parameter& create(std::string name, std::vector<int> shape);
  Parameter* find(const std::string& name);

  std::deque<Parameter>& all() { return params_; }
  const std::deque<Parameter>& all() const { return params_; }
  std::size_t scalar_count() const;
  void zero_grad();

 private:
  std::deque<Parameter> params_;
};

struct Var {
  int id = -1;
};

class Graph {
 public:
  using Backward = std::function<void(Graph&, Var self)>;

  explicit Graph(bool track_gradients = true) : track_(track_gradients) {}

  bool tracking() const { return track_; }

  /// A leaf that never receives gradient (images, fixed inputs).
  Var constant(Tensor value);
  /// A leaf whose gradient is collected (used by tests and by callers seeding gradients).
  Var leaf(Tensor value);
  Var push(Tensor value, bool needs_grad, Backward backward);

  const Tensor& value(Var v) const { return nodes_[v.id].value; }
  bool needs_grad(Var v) const { return nodes_[v.id].needs_grad; }
  bool has_grad(Var v) const { return !nodes_[v.id].grad.empty(); }
  /// Zero-initialized on first access.
  std::span<float> grad(Var v);

  /// Runs every recorded backward closure in reverse creation order. Nodes
  /// whose gradient was never touched are skipped.
  void backward();

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    std::vector<float> grad;
    bool needs_grad = false;
    Backward backward;
  };

  bool track_;
  std::vector<Node> nodes_;
};

}  // namespace fusionreg::nn
