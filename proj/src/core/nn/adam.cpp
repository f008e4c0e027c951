#include "fusionreg/nn/adam.hpp"

#include <cmath>

namespace fusionreg::nn {

Adam::Adam(ParameterStore& store, AdamOptions options) : store_(store), opt_(options) {
  for (const Parameter& p : store_.all()) {
    m_.emplace_back(p.size(), 0.0f);
    v_.emplace_back(p.size(), 0.0f);
  }
}

void Adam::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
  const float b1 = static_cast<float>(opt_.beta1), b2 = static_cast<float>(opt_.beta2);
  const float step = static_cast<float>(opt_.learning_rate / bc1);
  const float inv_sqrt_bc2 = static_cast<float>(1.0 / std::sqrt(bc2));
  const float eps = static_cast<float>(opt_.epsilon);
  std::size_t k = 0;
  for (Parameter& p : store_.all()) {
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      const float g = p.grad[i];
      m[i] = b1 * m[i] + (1.0f - b1) * g;
      v[i] = b2 * v[i] + (1.0f - b2) * g * g;
      p.value[i] -= step * m[i] / (std::sqrt(v[i]) * inv_sqrt_bc2 + eps);
      p.grad[i] = 0.0f;
    }
    ++k;
  }
}

}  // namespace fusionreg::nn
