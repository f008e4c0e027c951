#pragma once

#include <vector>

#include "fusionreg/nn/graph.hpp"

namespace fusionreg::nn {

struct AdamOptions {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Adaptive-moment gradient descent over every parameter of a store.
class Adam {
 public:
  Adam(ParameterStore& store, AdamOptions options);

  /// Applies one update from the accumulated gradients, then zeroes them.
  void step();
  long long steps() const { return t_; }

 private:
  ParameterStore& store_;
  AdamOptions opt_;
  std::vector<std::vector<float>> m_;
  std::vector<std::vector<float>> v_;
  long long t_ = 0;
};

}  // namespace fusionreg::nn
