#include "fusionreg/nn/graph.hpp"

#include <algorithm>

#include "fusionreg/error.hpp"

namespace fusionreg::nn {

Parameter& ParameterStore::create(std::string name, std::vector<int> shape) {
  require(find(name) == nullptr, "duplicate parameter name " + name);
  std::size_t n = 1;
  for (int s : shape) n *= static_cast<std::size_t>(s);
  Parameter& p = params_.emplace_back();
  p.name = std::move(name);
  p.shape = std::move(shape);
  p.value.assign(n, 0.0f);
  p.grad.assign(n, 0.0f);
  return p;
}

Parameter* ParameterStore::find(const std::string& name) {
  for (Parameter& p : params_)
    if (p.name == name) return &p;
  return nullptr;
}

std::size_t ParameterStore::scalar_count() const {
  std::size_t n = 0;
  for (const Parameter& p : params_) n += p.size();
  return n;
}

void ParameterStore::zero_grad() {
  for (Parameter& p : params_) std::fill(p.grad.begin(), p.grad.end(), 0.0f);
}

Var Graph::constant(Tensor value) { return push(std::move(value), false, nullptr); }

Var Graph::leaf(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, track_, nullptr});
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Graph::push(Tensor value, bool needs_grad, Backward backward) {
  const bool keep = track_ && needs_grad;
  nodes_.push_back(Node{std::move(value), {}, keep, keep ? std::move(backward) : Backward{}});
  return Var{static_cast<int>(nodes_.size()) - 1};
}

std::span<float> Graph::grad(Var v) {
  Node& n = nodes_[v.id];
  if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0f);
  return n.grad;
}

void Graph::backward() {
  require(track_, "backward() on a graph built without gradient tracking");
  for (int id = static_cast<int>(nodes_.size()) - 1; id >= 0; --id) {
    Node& n = nodes_[id];
    if (!n.needs_grad || !n.backward || n.grad.empty()) continue;
    n.backward(*this, Var{id});
  }
}

}  // namespace fusionreg::nn
