#pragma once

// Training objective:
//   total = -(alpha * lncc(F, M o phi) + beta * lncc(F, M o phi_hat)) + lambda * reg(phi)
// phi_hat lives at half resolution and is lifted with resample_field before warping.

#include <span>
#include <string>

#include "fusionreg/volgrid.hpp"

namespace fusionreg {

struct LossWeights {
  double alpha = 0.7;
  double beta = 0.3;
  double lambda = 1.0;
  int ncc_window = 9;
  double epsilon = 1e-5;
  /// cov^2 / (var_a var_b + eps) instead of the signed correlation.
  bool squared_ncc = false;

  void validate() const;
};

struct LossBreakdown {
  double ncc_full = 0.0;
  double ncc_half = 0.0;
  double reg = 0.0;
  double total = 0.0;
};

/// The one place the total is assembled, so a breakdown can be replayed.
double assemble_total(const LossWeights& w, double ncc_full, double ncc_half, double reg);

/// One JSON-lines training-log record.
std::string to_json_line(long long iteration, const LossBreakdown& b);

/// Mean over voxels of the windowed correlation of a and b. Windows are
/// clipped at the grid border (statistics over in-bounds voxels only).
template <typename T>
T lncc(const BasicVolume<T>& a, const BasicVolume<T>& b, int window, double epsilon, bool squared = false);

/// Same value; accumulates d(lncc)/d(b) * scale into grad_b.
template <typename T>
T lncc_with_grad(std::span<const T> a, std::span<const T> b, Dims dims, int window, double epsilon, bool squared,
                 T scale, std::span<T> grad_b);

/// Mean over voxels of sum_i |grad u_i|^2 (forward differences, voxel units).
template <typename T>
T diffusion_reg(const BasicDisplacementField<T>& field);

/// Same value; accumulates d(reg)/d(u) * scale into grad.
template <typename T>
T diffusion_reg_with_grad(const BasicDisplacementField<T>& field, T scale, std::span<T> grad);

template <typename T>
struct LossGradients {
  LossBreakdown breakdown;
  BasicDisplacementField<T> grad_phi;
  BasicDisplacementField<T> grad_phi_hat;
};

/// `ncc_margin` > 0 evaluates both similarity terms on the interior only
/// (images are warped at full size, then cropped by that many voxels per side).
template <typename T>
LossBreakdown total_loss(const BasicVolume<T>& fixed, const BasicVolume<T>& moving,
                         const BasicDisplacementField<T>& phi, const BasicDisplacementField<T>& phi_hat,
                         const LossWeights& w, int ncc_margin = 0);

/// Loss plus analytic gradients with respect to every component of phi and phi_hat.
template <typename T>
LossGradients<T> total_loss_with_grad(const BasicVolume<T>& fixed, const BasicVolume<T>& moving,
                                      const BasicDisplacementField<T>& phi,
                                      const BasicDisplacementField<T>& phi_hat, const LossWeights& w);

}  // namespace fusionreg
