#include "fusionreg/losses.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <vector>

#include "fusionreg/error.hpp"
#include "json.hpp"

namespace fusionreg {

void LossWeights::validate() const {
  if (!(alpha >= 0 && beta >= 0 && lambda >= 0)) throw ConfigError("loss weights must be non-negative");
  if (ncc_window < 3 || ncc_window % 2 == 0) throw ConfigError("ncc_window must be odd and >= 3");
  if (!(epsilon > 0)) throw ConfigError("ncc epsilon must be positive");
}

double assemble_total(const LossWeights& w, double ncc_full, double ncc_half, double reg) {
  return -(w.alpha * ncc_full + w.beta * ncc_half) + w.lambda * reg;
}

std::string to_json_line(long long iteration, const LossBreakdown& b) {
  nlohmann::json j = {{"iteration", iteration},
                      {"ncc_full", b.ncc_full},
                      {"ncc_half", b.ncc_half},
                      {"reg", b.reg},
                      {"total", b.total}};
  return j.dump();
}

namespace {

// Sum over the clipped window [i - r, i + r] along one axis, in place.
template <typename T>
void box_axis(std::span<T> data, Dims d, int axis, int r) {
  const int n = d[axis];
  const std::size_t stride = axis == 0 ? 1 : (axis == 1 ? static_cast<std::size_t>(d.x) : std::size_t(d.x) * d.y);
  const int lines_a = axis == 0 ? d.y : d.x;
  const int lines_b = axis == 2 ? d.y : d.z;
  std::vector<double> prefix(n + 1);
  for (int lb = 0; lb < lines_b; ++lb)
    for (int la = 0; la < lines_a; ++la) {
      std::size_t base;
      if (axis == 0)
        base = d.index(0, la, lb);
      else if (axis == 1)
        base = d.index(la, 0, lb);
      else
        base = d.index(la, lb, 0);
      prefix[0] = 0.0;
      for (int i = 0; i < n; ++i) prefix[i + 1] = prefix[i] + static_cast<double>(data[base + i * stride]);
      for (int i = 0; i < n; ++i) {
        const int lo = std::max(0, i - r), hi = std::min(n, i + r + 1);
        data[base + i * stride] = static_cast<T>(prefix[hi] - prefix[lo]);
      }
    }
}

template <typename T>
std::vector<T> box_sum(std::span<const T> in, Dims d, int r) {
  std::vector<T> out(in.begin(), in.end());
  for (int axis = 0; axis < 3; ++axis) box_axis<T>(out, d, axis, r);
  return out;
}

inline int window_len(int i, int n, int r) { return std::min(n, i + r + 1) - std::max(0, i - r); }

template <typename T>
T lncc_impl(std::span<const T> a, std::span<const T> b, Dims d, int window, double epsilon, bool squared, T scale,
            std::span<T> grad_b) {
  require(a.size() == d.count() && b.size() == d.count(), "lncc: image shapes differ");
  require(window >= 1 && window % 2 == 1, "lncc: window must be odd");
  require(window <= d.x && window <= d.y && window <= d.z,
          "lncc: window " + std::to_string(window) + " does not fit in " + to_string(d));
  const int r = window / 2;
  const std::size_t n = d.count();
  std::vector<T> aa(n), bb(n), ab(n);
  for (std::size_t i = 0; i < n; ++i) {
    aa[i] = a[i] * a[i];
    bb[i] = b[i] * b[i];
    ab[i] = a[i] * b[i];
  }
  const auto sa = box_sum<T>(a, d, r);
  const auto sb = box_sum<T>(b, d, r);
  const auto saa = box_sum<T>(aa, d, r);
  const auto sbb = box_sum<T>(bb, d, r);
  const auto sab = box_sum<T>(ab, d, r);

  const bool want_grad = !grad_b.empty();
  std::vector<T> c_b, c_bb, c_ab;
  if (want_grad) {
    c_b.resize(n);
    c_bb.resize(n);
    c_ab.resize(n);
  }
  const T eps = static_cast<T>(epsilon);
  T total = T(0);
  for (int k = 0; k < d.z; ++k)
    for (int j = 0; j < d.y; ++j)
      for (int i = 0; i < d.x; ++i) {
        const std::size_t v = d.index(i, j, k);
        const T count = static_cast<T>(window_len(i, d.x, r) * window_len(j, d.y, r) * window_len(k, d.z, r));
        const T cross = sab[v] - sa[v] * sb[v] / count;
        const T var_a = saa[v] - sa[v] * sa[v] / count;
        const T var_b = sbb[v] - sb[v] * sb[v] / count;
        const T denom = var_a * var_b + eps;
        T d_cross, d_var_b;
        if (squared) {
          total += cross * cross / denom;
          d_cross = T(2) * cross / denom;
          d_var_b = -cross * cross * var_a / (denom * denom);
        } else {
          const T s = std::sqrt(denom);
          total += cross / s;
          d_cross = T(1) / s;
          d_var_b = -cross * var_a / (T(2) * s * denom);
        }
        if (want_grad) {
          c_ab[v] = d_cross;
          c_bb[v] = d_var_b;
          c_b[v] = -d_cross * sa[v] / count - T(2) * d_var_b * sb[v] / count;
        }
      }
  const T inv_n = T(1) / static_cast<T>(n);
  if (want_grad) {
    require(grad_b.size() == n, "lncc: gradient buffer size mismatch");
    const auto bc_b = box_sum<T>(c_b, d, r);
    const auto bc_bb = box_sum<T>(c_bb, d, r);
    const auto bc_ab = box_sum<T>(c_ab, d, r);
    const T f = scale * inv_n;
    for (std::size_t v = 0; v < n; ++v) grad_b[v] += f * (bc_b[v] + T(2) * b[v] * bc_bb[v] + a[v] * bc_ab[v]);
  }
  return total * inv_n;
}

template <typename T>
inline T forward_diff(std::span<const T> g, Dims d, int i, int j, int k, int axis, std::size_t& lo,
                      std::size_t& hi) {
  int c[3] = {i, j, k};
  if (c[axis] >= d[axis] - 1) {
    hi = d.index(i, j, k);
    c[axis] -= 1;
    lo = d.index(c[0], c[1], c[2]);
  } else {
    lo = d.index(i, j, k);
    c[axis] += 1;
    hi = d.index(c[0], c[1], c[2]);
  }
  return g[hi] - g[lo];
}

template <typename T>
T reg_impl(const BasicDisplacementField<T>& field, T scale, std::span<T> grad) {
  const Dims d = field.dims();
  require(d.x >= 2 && d.y >= 2 && d.z >= 2, "diffusion_reg: every axis needs at least 2 voxels");
  const std::size_t n = d.count();
  const bool want_grad = !grad.empty();
  require(!want_grad || grad.size() == 3 * n, "diffusion_reg: gradient buffer size mismatch");
  const T inv_n = T(1) / static_cast<T>(n);
  T total = T(0);
  for (int comp = 0; comp < 3; ++comp) {
    const auto u = field.component(comp);
    T* gc = want_grad ? grad.data() + comp * n : nullptr;
    for (int k = 0; k < d.z; ++k)
      for (int j = 0; j < d.y; ++j)
        for (int i = 0; i < d.x; ++i)
          for (int axis = 0; axis < 3; ++axis) {
            std::size_t lo, hi;
            const T diff = forward_diff<T>(u, d, i, j, k, axis, lo, hi);
            total += diff * diff;
            if (want_grad) {
              const T gdiff = scale * T(2) * diff * inv_n;
              gc[hi] += gdiff;
              gc[lo] -= gdiff;
            }
          }
  }
  return total * inv_n;
}

template <typename T>
BasicVolume<T> crop(const BasicVolume<T>& v, int m) {
  const Dims d = v.dims();
  require(d.x > 2 * m && d.y > 2 * m && d.z > 2 * m, "ncc margin leaves an empty interior");
  BasicVolume<T> out(Dims{d.x - 2 * m, d.y - 2 * m, d.z - 2 * m}, v.spacing());
  const Dims o = out.dims();
  for (int k = 0; k < o.z; ++k)
    for (int j = 0; j < o.y; ++j)
      for (int i = 0; i < o.x; ++i) out.at(i, j, k) = v.at(i + m, j + m, k + m);
  return out;
}

template <typename T>
void check_loss_inputs(const BasicVolume<T>& fixed, const BasicVolume<T>& moving,
                       const BasicDisplacementField<T>& phi, const BasicDisplacementField<T>& phi_hat) {
  require(fixed.dims() == moving.dims(), "total_loss: fixed and moving shapes differ");
  require(phi.dims() == fixed.dims(), "total_loss: phi must be at full resolution");
  const Dims d = fixed.dims();
  require(d.x % 2 == 0 && d.y % 2 == 0 && d.z % 2 == 0, "total_loss: full-resolution shape must be even");
  require(phi_hat.dims() == divide_dims(d, 2), "total_loss: phi_hat must be at half resolution");
}

}  // namespace

template <typename T>
T lncc(const BasicVolume<T>& a, const BasicVolume<T>& b, int window, double epsilon, bool squared) {
  require(a.dims() == b.dims(), "lncc: shape mismatch " + to_string(a.dims()) + " vs " + to_string(b.dims()));
  return lncc_impl<T>(a.values(), b.values(), a.dims(), window, epsilon, squared, T(0), {});
}

template <typename T>
T lncc_with_grad(std::span<const T> a, std::span<const T> b, Dims dims, int window, double epsilon, bool squared,
                 T scale, std::span<T> grad_b) {
  return lncc_impl<T>(a, b, dims, window, epsilon, squared, scale, grad_b);
}

template <typename T>
T diffusion_reg(const BasicDisplacementField<T>& field) {
  return reg_impl<T>(field, T(0), {});
}

template <typename T>
T diffusion_reg_with_grad(const BasicDisplacementField<T>& field, T scale, std::span<T> grad) {
  return reg_impl<T>(field, scale, grad);
}

template <typename T>
LossBreakdown total_loss(const BasicVolume<T>& fixed, const BasicVolume<T>& moving,
                         const BasicDisplacementField<T>& phi, const BasicDisplacementField<T>& phi_hat,
                         const LossWeights& w, int ncc_margin) {
  w.validate();
  check_loss_inputs(fixed, moving, phi, phi_hat);
  require(ncc_margin >= 0, "ncc margin must be non-negative");
  const BasicVolume<T> warped_full = warp(moving, phi);
  const BasicVolume<T> warped_half = warp(moving, resample_field(phi_hat, fixed.dims()));
  LossBreakdown b;
  if (ncc_margin == 0) {
    b.ncc_full = lncc(fixed, warped_full, w.ncc_window, w.epsilon, w.squared_ncc);
    b.ncc_half = lncc(fixed, warped_half, w.ncc_window, w.epsilon, w.squared_ncc);
  } else {
    const auto f = crop(fixed, ncc_margin);
    b.ncc_full = lncc(f, crop(warped_full, ncc_margin), w.ncc_window, w.epsilon, w.squared_ncc);
    b.ncc_half = lncc(f, crop(warped_half, ncc_margin), w.ncc_window, w.epsilon, w.squared_ncc);
  }
  b.reg = diffusion_reg(phi);
  b.total = assemble_total(w, b.ncc_full, b.ncc_half, b.reg);
  return b;
}

template <typename T>
LossGradients<T> total_loss_with_grad(const BasicVolume<T>& fixed, const BasicVolume<T>& moving,
                                      const BasicDisplacementField<T>& phi,
                                      const BasicDisplacementField<T>& phi_hat, const LossWeights& w) {
  w.validate();
  check_loss_inputs(fixed, moving, phi, phi_hat);
  const Dims full = fixed.dims();
  const Dims half = phi_hat.dims();
  const std::size_t n = full.count();

  LossGradients<T> out{LossBreakdown{}, BasicDisplacementField<T>(full, phi.spacing()),
                       BasicDisplacementField<T>(half, phi_hat.spacing())};

  // Full-resolution similarity.
  {
    const BasicVolume<T> warped = warp(moving, phi);
    std::vector<T> d_warped(n, T(0));
    out.breakdown.ncc_full = lncc_with_grad<T>(fixed.values(), warped.values(), full, w.ncc_window, w.epsilon,
                                               w.squared_ncc, static_cast<T>(-w.alpha), d_warped);
    kernels::warp_vjp<T>(moving.values(), 1, full, phi.values(), d_warped, {}, out.grad_phi.values());
  }
  // Half-resolution similarity through the lifted phi_hat.
  {
    const BasicDisplacementField<T> lifted = resample_field(phi_hat, full);
    const BasicVolume<T> warped = warp(moving, lifted);
    std::vector<T> d_warped(n, T(0));
    out.breakdown.ncc_half = lncc_with_grad<T>(fixed.values(), warped.values(), full, w.ncc_window, w.epsilon,
                                               w.squared_ncc, static_cast<T>(-w.beta), d_warped);
    std::vector<T> d_lifted(3 * n, T(0));
    kernels::warp_vjp<T>(moving.values(), 1, full, lifted.values(), d_warped, {}, d_lifted);
    for (int a = 0; a < 3; ++a) {
      const T s = static_cast<T>(full[a]) / static_cast<T>(half[a]);
      for (std::size_t i = 0; i < n; ++i) d_lifted[a * n + i] *= s;
    }
    kernels::resample_adjoint<T>(d_lifted, 3, half, full, out.grad_phi_hat.values());
  }
  out.breakdown.reg = diffusion_reg_with_grad(phi, static_cast<T>(w.lambda), out.grad_phi.values());
  out.breakdown.total = assemble_total(w, out.breakdown.ncc_full, out.breakdown.ncc_half, out.breakdown.reg);
  return out;
}

#define FUSIONREG_INSTANTIATE(T)                                                                                \
  template T lncc(const BasicVolume<T>&, const BasicVolume<T>&, int, double, bool);                             \
  template T lncc_with_grad(std::span<const T>, std::span<const T>, Dims, int, double, bool, T, std::span<T>);  \
  template T diffusion_reg(const BasicDisplacementField<T>&);                                                   \
  template T diffusion_reg_with_grad(const BasicDisplacementField<T>&, T, std::span<T>);                        \
  template LossBreakdown total_loss(const BasicVolume<T>&, const BasicVolume<T>&,                               \
                                    const BasicDisplacementField<T>&, const BasicDisplacementField<T>&,         \
                                    const LossWeights&, int);                                                   \
  template LossGradients<T> total_loss_with_grad(const BasicVolume<T>&, const BasicVolume<T>&,                  \
                                                 const BasicDisplacementField<T>&,                              \
                                                 const BasicDisplacementField<T>&, const LossWeights&);

FUSIONREG_INSTANTIATE(float)
FUSIONREG_INSTANTIATE(double)
#undef FUSIONREG_INSTANTIATE

}  // namespace fusionreg
