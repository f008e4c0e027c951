#include "fusionreg/volgrid.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "fusionreg/error.hpp"

namespace fusionreg {

std::string to_string(const Dims& dims) {
  std::ostringstream os;
  os << "(" << dims.x << "," << dims.y << "," << dims.z << ")";
  return os.str();
}

Dims divide_dims(const Dims& dims, int factor) {
  require(factor >= 1, "divide_dims: factor must be >= 1");
  require(dims.x % factor == 0 && dims.y % factor == 0 && dims.z % factor == 0,
          "shape " + to_string(dims) + " is not divisible by " + std::to_string(factor));
  return {dims.x / factor, dims.y / factor, dims.z / factor};
}

namespace {

void check_dims(const Dims& dims) {
  require(dims.x >= 1 && dims.y >= 1 && dims.z >= 1, "grid shape components must be >= 1, got " + to_string(dims));
}

void check_spacing(const Spacing& s) {
  require(s.x > 0 && s.y > 0 && s.z > 0 && std::isfinite(s.x) && std::isfinite(s.y) && std::isfinite(s.z),
          "voxel spacing must be positive");
}

template <typename T>
bool finite_span(std::span<const T> values) {
  return std::all_of(values.begin(), values.end(), [](T v) { return std::isfinite(v); });
}

}  // namespace

// ---------------------------------------------------------------------------
// BasicVolume

template <typename T>
BasicVolume<T>::BasicVolume(Dims dims, Spacing spacing, T fill) : dims_(dims), spacing_(spacing) {
  check_dims(dims);
  check_spacing(spacing);
  values_.assign(dims.count(), fill);
}

template <typename T>
BasicVolume<T>::BasicVolume(Dims dims, Spacing spacing, std::vector<T> values)
    : dims_(dims), spacing_(spacing), values_(std::move(values)) {
  check_dims(dims);
  check_spacing(spacing);
  require(values_.size() == dims.count(), "volume value count does not match shape " + to_string(dims));
}

template <typename T>
void BasicVolume<T>::set_spacing(Spacing spacing) {
  check_spacing(spacing);
  spacing_ = spacing;
}

template <typename T>
bool BasicVolume<T>::all_finite() const {
  return finite_span<T>(values_);
}

// ---------------------------------------------------------------------------
// BasicFeatureGrid

template <typename T>
BasicFeatureGrid<T>::BasicFeatureGrid(int channels, Dims dims, T fill) : channels_(channels), dims_(dims) {
  require(channels >= 1, "feature grid needs at least one channel");
  check_dims(dims);
  values_.assign(static_cast<std::size_t>(channels) * dims.count(), fill);
}

template <typename T>
BasicFeatureGrid<T>::BasicFeatureGrid(int channels, Dims dims, std::vector<T> values)
    : channels_(channels), dims_(dims), values_(std::move(values)) {
  require(channels >= 1, "feature grid needs at least one channel");
  check_dims(dims);
  require(values_.size() == static_cast<std::size_t>(channels) * dims.count(),
          "feature grid value count does not match shape");
}

template <typename T>
bool BasicFeatureGrid<T>::all_finite() const {
  return finite_span<T>(values_);
}

// ---------------------------------------------------------------------------
// BasicDisplacementField

template <typename T>
BasicDisplacementField<T>::BasicDisplacementField(Dims dims, Spacing spacing) : dims_(dims), spacing_(spacing) {
  check_dims(dims);
  check_spacing(spacing);
  values_.assign(3 * dims.count(), T(0));
}

template <typename T>
BasicDisplacementField<T>::BasicDisplacementField(Dims dims, Spacing spacing, std::vector<T> values)
    : dims_(dims), spacing_(spacing), values_(std::move(values)) {
  check_dims(dims);
  check_spacing(spacing);
  require(values_.size() == 3 * dims.count(), "displacement field value count does not match shape");
}

template <typename T>
BasicDisplacementField<T> BasicDisplacementField<T>::uniform(Dims dims, std::array<T, 3> vector, Spacing spacing) {
  BasicDisplacementField f(dims, spacing);
  for (int a = 0; a < 3; ++a) std::fill(f.component(a).begin(), f.component(a).end(), vector[a]);
  return f;
}

template <typename T>
void BasicDisplacementField<T>::set_spacing(Spacing spacing) {
  check_spacing(spacing);
  spacing_ = spacing;
}

template <typename T>
std::array<T, 3> BasicDisplacementField<T>::at(int i, int j, int k) const {
  const std::size_t n = dims_.count();
  const std::size_t idx = dims_.index(i, j, k);
  return {values_[idx], values_[n + idx], values_[2 * n + idx]};
}

template <typename T>
void BasicDisplacementField<T>::set(int i, int j, int k, std::array<T, 3> vector) {
  const std::size_t n = dims_.count();
  const std::size_t idx = dims_.index(i, j, k);
  values_[idx] = vector[0];
  values_[n + idx] = vector[1];
  values_[2 * n + idx] = vector[2];
}

template <typename T>
bool BasicDisplacementField<T>::is_identity() const {
  return std::all_of(values_.begin(), values_.end(), [](T v) { return v == T(0); });
}

template <typename T>
bool BasicDisplacementField<T>::all_finite() const {
  return finite_span<T>(values_);
}

// ---------------------------------------------------------------------------
// LabelMap

LabelMap::LabelMap(Dims dims, Spacing spacing, std::int32_t fill) : dims_(dims), spacing_(spacing) {
  check_dims(dims);
  check_spacing(spacing);
  values_.assign(dims.count(), fill);
}

LabelMap::LabelMap(Dims dims, Spacing spacing, std::vector<std::int32_t> values)
    : dims_(dims), spacing_(spacing), values_(std::move(values)) {
  check_dims(dims);
  check_spacing(spacing);
  require(values_.size() == dims.count(), "label map value count does not match shape");
  require(std::all_of(values_.begin(), values_.end(), [](std::int32_t v) { return v >= 0; }),
          "label ids must be non-negative");
}

std::vector<std::int32_t> LabelMap::classes() const {
  std::set<std::int32_t> ids(values_.begin(), values_.end());
  ids.erase(0);
  return {ids.begin(), ids.end()};
}

// ---------------------------------------------------------------------------
// Kernels

namespace kernels {
namespace {

// Interpolation cell along one axis. i0 == i1 with f == 0 on the upper border
// so that integer positions reproduce grid values bit for bit.
template <typename T>
struct AxisCell {
  int i0;
  int i1;
  T f;
  bool clamped;
};

template <typename T>
inline AxisCell<T> locate(T p, int n) {
  if (p < T(0)) return {0, 0, T(0), true};
  if (p > T(n - 1)) return {n - 1, n - 1, T(0), true};
  const int i0 = static_cast<int>(std::floor(p));
  if (i0 >= n - 1) return {n - 1, n - 1, T(0), false};
  return {i0, i0 + 1, p - static_cast<T>(i0), false};
}

template <typename T>
struct Cell {
  std::size_t idx[8];  // corner order: bit0 = x, bit1 = y, bit2 = z
  T fx, fy, fz;
  bool clamped[3];
};

template <typename T>
inline Cell<T> make_cell(Dims d, T px, T py, T pz) {
  const AxisCell<T> cx = locate(px, d.x);
  const AxisCell<T> cy = locate(py, d.y);
  const AxisCell<T> cz = locate(pz, d.z);
  Cell<T> c;
  const int xs[2] = {cx.i0, cx.i1};
  const int ys[2] = {cy.i0, cy.i1};
  const int zs[2] = {cz.i0, cz.i1};
  for (int b = 0; b < 8; ++b) c.idx[b] = d.index(xs[b & 1], ys[(b >> 1) & 1], zs[(b >> 2) & 1]);
  c.fx = cx.f;
  c.fy = cy.f;
  c.fz = cz.f;
  c.clamped[0] = cx.clamped;
  c.clamped[1] = cy.clamped;
  c.clamped[2] = cz.clamped;
  return c;
}

template <typename T>
inline T interpolate(const T* g, const Cell<T>& c) {
  const T c00 = g[c.idx[0]] + c.fx * (g[c.idx[1]] - g[c.idx[0]]);
  const T c10 = g[c.idx[2]] + c.fx * (g[c.idx[3]] - g[c.idx[2]]);
  const T c01 = g[c.idx[4]] + c.fx * (g[c.idx[5]] - g[c.idx[4]]);
  const T c11 = g[c.idx[6]] + c.fx * (g[c.idx[7]] - g[c.idx[6]]);
  const T c0 = c00 + c.fy * (c10 - c00);
  const T c1 = c01 + c.fy * (c11 - c01);
  return c0 + c.fz * (c1 - c0);
}

// d(value)/d(position) for the three axes; zero on clamped axes.
template <typename T>
inline void interpolate_gradient(const T* g, const Cell<T>& c, T out[3]) {
  const T v000 = g[c.idx[0]], v100 = g[c.idx[1]], v010 = g[c.idx[2]], v110 = g[c.idx[3]];
  const T v001 = g[c.idx[4]], v101 = g[c.idx[5]], v011 = g[c.idx[6]], v111 = g[c.idx[7]];
  const T gx = c.fx, gy = c.fy, gz = c.fz;
  const T dx = (T(1) - gz) * ((T(1) - gy) * (v100 - v000) + gy * (v110 - v010)) +
               gz * ((T(1) - gy) * (v101 - v001) + gy * (v111 - v011));
  const T c00 = v000 + gx * (v100 - v000);
  const T c10 = v010 + gx * (v110 - v010);
  const T c01 = v001 + gx * (v101 - v001);
  const T c11 = v011 + gx * (v111 - v011);
  const T dy = (T(1) - gz) * (c10 - c00) + gz * (c11 - c01);
  const T c0 = c00 + gy * (c10 - c00);
  const T c1 = c01 + gy * (c11 - c01);
  const T dz = c1 - c0;
  out[0] = c.clamped[0] ? T(0) : dx;
  out[1] = c.clamped[1] ? T(0) : dy;
  out[2] = c.clamped[2] ? T(0) : dz;
}

template <typename T>
inline void corner_weights(const Cell<T>& c, T w[8]) {
  const T wx[2] = {T(1) - c.fx, c.fx};
  const T wy[2] = {T(1) - c.fy, c.fy};
  const T wz[2] = {T(1) - c.fz, c.fz};
  for (int b = 0; b < 8; ++b) w[b] = wx[b & 1] * wy[(b >> 1) & 1] * wz[(b >> 2) & 1];
}

template <typename T>
inline T source_position(int i, int src, int dst) {
  return static_cast<T>(static_cast<long long>(i) * src) / static_cast<T>(dst);
}

}  // namespace

template <typename T>
T sample(std::span<const T> grid, Dims dims, T px, T py, T pz) {
  const Cell<T> c = make_cell(dims, px, py, pz);
  return interpolate(grid.data(), c);
}

template <typename T>
void warp(std::span<const T> in, int channels, Dims d, std::span<const T> disp, std::span<T> out) {
  const std::size_t n = d.count();
  require(in.size() == channels * n && out.size() == channels * n && disp.size() == 3 * n,
          "warp: buffer sizes do not match shape " + to_string(d));
  const T* ux = disp.data();
  const T* uy = ux + n;
  const T* uz = uy + n;
  for (int k = 0; k < d.z; ++k)
    for (int j = 0; j < d.y; ++j)
      for (int i = 0; i < d.x; ++i) {
        const std::size_t v = d.index(i, j, k);
        const Cell<T> c = make_cell(d, T(i) + ux[v], T(j) + uy[v], T(k) + uz[v]);
        for (int ch = 0; ch < channels; ++ch) out[ch * n + v] = interpolate(in.data() + ch * n, c);
      }
}

template <typename T>
void warp_vjp(std::span<const T> in, int channels, Dims d, std::span<const T> disp, std::span<const T> grad_out,
              std::span<T> grad_in, std::span<T> grad_disp) {
  const std::size_t n = d.count();
  require(in.size() == channels * n && grad_out.size() == channels * n && disp.size() == 3 * n,
          "warp_vjp: buffer sizes do not match shape " + to_string(d));
  const bool want_in = !grad_in.empty();
  const bool want_disp = !grad_disp.empty();
  require(!want_in || grad_in.size() == channels * n, "warp_vjp: grad_in size mismatch");
  require(!want_disp || grad_disp.size() == 3 * n, "warp_vjp: grad_disp size mismatch");
  const T* ux = disp.data();
  const T* uy = ux + n;
  const T* uz = uy + n;
  for (int k = 0; k < d.z; ++k)
    for (int j = 0; j < d.y; ++j)
      for (int i = 0; i < d.x; ++i) {
        const std::size_t v = d.index(i, j, k);
        const Cell<T> c = make_cell(d, T(i) + ux[v], T(j) + uy[v], T(k) + uz[v]);
        T w[8];
        if (want_in) corner_weights(c, w);
        T acc[3] = {T(0), T(0), T(0)};
        for (int ch = 0; ch < channels; ++ch) {
          const T g = grad_out[ch * n + v];
          if (g == T(0)) continue;
          if (want_in) {
            T* gi = grad_in.data() + ch * n;
            for (int b = 0; b < 8; ++b) gi[c.idx[b]] += g * w[b];
          }
          if (want_disp) {
            T dp[3];
            interpolate_gradient(in.data() + ch * n, c, dp);
            acc[0] += g * dp[0];
            acc[1] += g * dp[1];
            acc[2] += g * dp[2];
          }
        }
        if (want_disp) {
          grad_disp[v] += acc[0];
          grad_disp[n + v] += acc[1];
          grad_disp[2 * n + v] += acc[2];
        }
      }
}

template <typename T>
void resample(std::span<const T> in, int channels, Dims src, Dims dst, std::span<T> out) {
  const std::size_t ns = src.count(), nd = dst.count();
  require(in.size() == channels * ns && out.size() == channels * nd, "resample: buffer size mismatch");
  for (int k = 0; k < dst.z; ++k)
    for (int j = 0; j < dst.y; ++j)
      for (int i = 0; i < dst.x; ++i) {
        const Cell<T> c = make_cell(src, source_position<T>(i, src.x, dst.x), source_position<T>(j, src.y, dst.y),
                                    source_position<T>(k, src.z, dst.z));
        const std::size_t v = dst.index(i, j, k);
        for (int ch = 0; ch < channels; ++ch) out[ch * nd + v] = interpolate(in.data() + ch * ns, c);
      }
}

template <typename T>
void resample_adjoint(std::span<const T> grad_out, int channels, Dims src, Dims dst, std::span<T> grad_in) {
  const std::size_t ns = src.count(), nd = dst.count();
  require(grad_in.size() == channels * ns && grad_out.size() == channels * nd, "resample_adjoint: size mismatch");
  for (int k = 0; k < dst.z; ++k)
    for (int j = 0; j < dst.y; ++j)
      for (int i = 0; i < dst.x; ++i) {
        const Cell<T> c = make_cell(src, source_position<T>(i, src.x, dst.x), source_position<T>(j, src.y, dst.y),
                                    source_position<T>(k, src.z, dst.z));
        T w[8];
        corner_weights(c, w);
        const std::size_t v = dst.index(i, j, k);
        for (int ch = 0; ch < channels; ++ch) {
          const T g = grad_out[ch * nd + v];
          T* gi = grad_in.data() + ch * ns;
          for (int b = 0; b < 8; ++b) gi[c.idx[b]] += g * w[b];
        }
      }
}

}  // namespace kernels

// ---------------------------------------------------------------------------
// Grid operations

template <typename T>
BasicVolume<T> warp(const BasicVolume<T>& input, const BasicDisplacementField<T>& field) {
  require(input.dims() == field.dims(),
          "warp: field shape " + to_string(field.dims()) + " differs from input " + to_string(input.dims()));
  BasicVolume<T> out(input.dims(), input.spacing());
  kernels::warp<T>(input.values(), 1, input.dims(), field.values(), out.values());
  return out;
}

template <typename T>
BasicFeatureGrid<T> warp(const BasicFeatureGrid<T>& input, const BasicDisplacementField<T>& field) {
  require(input.dims() == field.dims(),
          "warp: field shape " + to_string(field.dims()) + " differs from input " + to_string(input.dims()));
  BasicFeatureGrid<T> out(input.channels(), input.dims());
  kernels::warp<T>(input.values(), input.channels(), input.dims(), field.values(), out.values());
  return out;
}

LabelMap warp_nearest(const LabelMap& labels, const DisplacementField& field) {
  require(labels.dims() == field.dims(), "warp_nearest: shape mismatch");
  const Dims d = labels.dims();
  LabelMap out(d, labels.spacing());
  for (int k = 0; k < d.z; ++k)
    for (int j = 0; j < d.y; ++j)
      for (int i = 0; i < d.x; ++i) {
        const auto u = field.at(i, j, k);
        const int si = std::clamp(static_cast<int>(std::lround(i + u[0])), 0, d.x - 1);
        const int sj = std::clamp(static_cast<int>(std::lround(j + u[1])), 0, d.y - 1);
        const int sk = std::clamp(static_cast<int>(std::lround(k + u[2])), 0, d.z - 1);
        out.at(i, j, k) = labels.at(si, sj, sk);
      }
  return out;
}

template <typename T>
BasicDisplacementField<T> upsample_field(const BasicDisplacementField<T>& field, int factor) {
  require(factor >= 2, "upsample_field: factor must be >= 2");
  const Dims src = field.dims();
  return resample_field(field, Dims{src.x * factor, src.y * factor, src.z * factor});
}

template <typename T>
BasicDisplacementField<T> resample_field(const BasicDisplacementField<T>& field, Dims target) {
  check_dims(target);
  const Dims src = field.dims();
  const Spacing s = field.spacing();
  const Spacing out_spacing{s.x * src.x / target.x, s.y * src.y / target.y, s.z * src.z / target.z};
  BasicDisplacementField<T> out(target, out_spacing);
  kernels::resample<T>(field.values(), 3, src, target, out.values());
  for (int a = 0; a < 3; ++a) {
    if (src[a] == target[a]) continue;
    const T scale = static_cast<T>(target[a]) / static_cast<T>(src[a]);
    for (T& v : out.component(a)) v *= scale;
  }
  return out;
}

template <typename T>
BasicDisplacementField<T> compose_fields(const BasicDisplacementField<T>& prev_up,
                                         const BasicDisplacementField<T>& delta, CompositionMode mode) {
  require(prev_up.dims() == delta.dims(), "compose_fields: shape mismatch " + to_string(prev_up.dims()) + " vs " +
                                              to_string(delta.dims()));
  BasicDisplacementField<T> out(delta.dims(), delta.spacing());
  auto o = out.values();
  if (mode == CompositionMode::Compose) {
    kernels::warp<T>(prev_up.values(), 3, delta.dims(), delta.values(), o);
  } else {
    std::copy(prev_up.values().begin(), prev_up.values().end(), o.begin());
  }
  const auto dv = delta.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = dv[i] + o[i];
  return out;
}

namespace {

// One-sided difference of g along `axis` at voxel (i,j,k).
template <typename T>
inline T one_sided(std::span<const T> g, Dims d, int i, int j, int k, int axis, bool backward) {
  int c[3] = {i, j, k};
  const int n = d[axis];
  const std::size_t here = d.index(i, j, k);
  bool use_backward = backward ? c[axis] > 0 : c[axis] >= n - 1;
  if (use_backward) {
    c[axis] -= 1;
    return g[here] - g[d.index(c[0], c[1], c[2])];
  }
  c[axis] += 1;
  return g[d.index(c[0], c[1], c[2])] - g[here];
}

template <typename T>
void check_difference_dims(Dims d, const char* what) {
  require(d.x >= 2 && d.y >= 2 && d.z >= 2, std::string(what) + ": every axis needs at least 2 voxels");
}

}  // namespace

template <typename T>
BasicFeatureGrid<T> spatial_gradient(const BasicDisplacementField<T>& field) {
  const Dims d = field.dims();
  check_difference_dims<T>(d, "spatial_gradient");
  BasicFeatureGrid<T> out(9, d);
  for (int comp = 0; comp < 3; ++comp) {
    const auto g = field.component(comp);
    for (int axis = 0; axis < 3; ++axis) {
      auto dst = out.channel(3 * comp + axis);
      for (int k = 0; k < d.z; ++k)
        for (int j = 0; j < d.y; ++j)
          for (int i = 0; i < d.x; ++i) dst[d.index(i, j, k)] = one_sided<T>(g, d, i, j, k, axis, false);
    }
  }
  return out;
}

template <typename T>
BasicVolume<T> jacobian_determinants(const BasicDisplacementField<T>& field, Stencil stencil) {
  require(stencil.id >= 0 && stencil.id < 8, "jacobian_determinants: stencil id must be in [0, 8)");
  const Dims d = field.dims();
  check_difference_dims<T>(d, "jacobian_determinants");
  BasicVolume<T> out(d, field.spacing());
  const auto ux = field.component(0), uy = field.component(1), uz = field.component(2);
  const bool bx = stencil.backward(0), by = stencil.backward(1), bz = stencil.backward(2);
  for (int k = 0; k < d.z; ++k)
    for (int j = 0; j < d.y; ++j)
      for (int i = 0; i < d.x; ++i) {
        const T a = T(1) + one_sided<T>(ux, d, i, j, k, 0, bx);
        const T b = one_sided<T>(ux, d, i, j, k, 1, by);
        const T c = one_sided<T>(ux, d, i, j, k, 2, bz);
        const T e = one_sided<T>(uy, d, i, j, k, 0, bx);
        const T f = T(1) + one_sided<T>(uy, d, i, j, k, 1, by);
        const T g = one_sided<T>(uy, d, i, j, k, 2, bz);
        const T h = one_sided<T>(uz, d, i, j, k, 0, bx);
        const T m = one_sided<T>(uz, d, i, j, k, 1, by);
        const T q = T(1) + one_sided<T>(uz, d, i, j, k, 2, bz);
        out.at(i, j, k) = a * (f * q - g * m) - b * (e * q - g * h) + c * (e * m - f * h);
      }
  return out;
}

template <typename To, typename From>
BasicVolume<To> cast(const BasicVolume<From>& v) {
  std::vector<To> values(v.values().begin(), v.values().end());
  return BasicVolume<To>(v.dims(), v.spacing(), std::move(values));
}

template <typename To, typename From>
BasicDisplacementField<To> cast(const BasicDisplacementField<From>& f) {
  std::vector<To> values(f.values().begin(), f.values().end());
  return BasicDisplacementField<To>(f.dims(), f.spacing(), std::move(values));
}

// ---------------------------------------------------------------------------
// Explicit instantiations

#define FUSIONREG_INSTANTIATE(T)                                                                                 \
  template class BasicVolume<T>;                                                                                 \
  template class BasicFeatureGrid<T>;                                                                            \
  template class BasicDisplacementField<T>;                                                                      \
  template BasicVolume<T> warp(const BasicVolume<T>&, const BasicDisplacementField<T>&);                         \
  template BasicFeatureGrid<T> warp(const BasicFeatureGrid<T>&, const BasicDisplacementField<T>&);               \
  template BasicDisplacementField<T> upsample_field(const BasicDisplacementField<T>&, int);                      \
  template BasicDisplacementField<T> resample_field(const BasicDisplacementField<T>&, Dims);                     \
  template BasicDisplacementField<T> compose_fields(const BasicDisplacementField<T>&,                            \
                                                    const BasicDisplacementField<T>&, CompositionMode);          \
  template BasicFeatureGrid<T> spatial_gradient(const BasicDisplacementField<T>&);                               \
  template BasicVolume<T> jacobian_determinants(const BasicDisplacementField<T>&, Stencil);                      \
  template T kernels::sample(std::span<const T>, Dims, T, T, T);                                                 \
  template void kernels::warp(std::span<const T>, int, Dims, std::span<const T>, std::span<T>);                  \
  template void kernels::warp_vjp(std::span<const T>, int, Dims, std::span<const T>, std::span<const T>,         \
                                  std::span<T>, std::span<T>);                                                   \
  template void kernels::resample(std::span<const T>, int, Dims, Dims, std::span<T>);                            \
  template void kernels::resample_adjoint(std::span<const T>, int, Dims, Dims, std::span<T>);

FUSIONREG_INSTANTIATE(float)
FUSIONREG_INSTANTIATE(double)
#undef FUSIONREG_INSTANTIATE

template BasicVolume<double> cast(const BasicVolume<float>&);
template BasicVolume<float> cast(const BasicVolume<double>&);
template BasicDisplacementField<double> cast(const BasicDisplacementField<float>&);
template BasicDisplacementField<float> cast(const BasicDisplacementField<double>&);

}  // namespace fusionreg
