#pragma once

// Grid numerics shared by every other module: volumes, displacement fields,
// trilinear warping, field resampling and composition, finite differences.
//
// Storage convention: x is the fastest axis, linear index = x + nx*(y + ny*z).
// Multi-channel grids are planar (channel-major). Displacement vectors are in
// voxel units of the grid they live on, components ordered (x, y, z).
// Sample coordinates outside the grid are clamped to the border.

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace fusionreg {

struct Dims {
  int x = 1;
  int y = 1;
  int z = 1;

  constexpr std::size_t count() const {
    return static_cast<std::size_t>(x) * static_cast<std::size_t>(y) * static_cast<std::size_t>(z);
  }
  constexpr std::size_t index(int i, int j, int k) const {
    return static_cast<std::size_t>(i) +
           static_cast<std::size_t>(x) * (static_cast<std::size_t>(j) + static_cast<std::size_t>(y) * k);
  }
  constexpr int operator[](int axis) const { return axis == 0 ? x : (axis == 1 ? y : z); }
  bool operator==(const Dims&) const = default;
};

std::string to_string(const Dims& dims);

/// dims / factor per axis; throws ContractError unless every axis divides evenly.
Dims divide_dims(const Dims& dims, int factor);

/// Physical voxel size in mm.
struct Spacing {
  double x = 1.0;
  double y = 1.0;
  double z = 1.0;

  constexpr double operator[](int axis) const { return axis == 0 ? x : (axis == 1 ? y : z); }
  bool operator==(const Spacing&) const = default;
};

template <typename T>
class BasicVolume {
 public:
  BasicVolume() = default;
  explicit BasicVolume(Dims dims, Spacing spacing = {}, T fill = T(0));
  BasicVolume(Dims dims, Spacing spacing, std::vector<T> values);

  const Dims& dims() const { return dims_; }
  const Spacing& spacing() const { return spacing_; }
  void set_spacing(Spacing spacing);

  std::span<T> values() { return values_; }
  std::span<const T> values() const { return values_; }

  T& at(int i, int j, int k) { return values_[dims_.index(i, j, k)]; }
  T at(int i, int j, int k) const { return values_[dims_.index(i, j, k)]; }

  bool all_finite() const;

 private:
  Dims dims_;
  Spacing spacing_;
  std::vector<T> values_;
};

/// C-channel grid at one pyramid scale, planar layout.
template <typename T>
class BasicFeatureGrid {
 public:
  BasicFeatureGrid() = default;
  BasicFeatureGrid(int channels, Dims dims, T fill = T(0));
  BasicFeatureGrid(int channels, Dims dims, std::vector<T> values);

  int channels() const { return channels_; }
  const Dims& dims() const { return dims_; }
  std::size_t size() const { return values_.size(); }

  std::span<T> values() { return values_; }
  std::span<const T> values() const { return values_; }
  std::span<T> channel(int c) { return std::span<T>(values_).subspan(c * dims_.count(), dims_.count()); }
  std::span<const T> channel(int c) const {
    return std::span<const T>(values_).subspan(c * dims_.count(), dims_.count());
  }

  bool all_finite() const;

 private:
  int channels_ = 0;
  Dims dims_;
  std::vector<T> values_;
};

/// Dense displacement field u(x), three planar components in voxel units.
template <typename T>
class BasicDisplacementField {
 public:
  BasicDisplacementField() = default;
  explicit BasicDisplacementField(Dims dims, Spacing spacing = {});
  BasicDisplacementField(Dims dims, Spacing spacing, std::vector<T> values);

  /// Field with the same vector at every voxel.
  static BasicDisplacementField uniform(Dims dims, std::array<T, 3> vector, Spacing spacing = {});

  const Dims& dims() const { return dims_; }
  const Spacing& spacing() const { return spacing_; }
  void set_spacing(Spacing spacing);

  std::span<T> values() { return values_; }
  std::span<const T> values() const { return values_; }
  std::span<T> component(int axis) {
    return std::span<T>(values_).subspan(axis * dims_.count(), dims_.count());
  }
  std::span<const T> component(int axis) const {
    return std::span<const T>(values_).subspan(axis * dims_.count(), dims_.count());
  }

  std::array<T, 3> at(int i, int j, int k) const;
  void set(int i, int j, int k, std::array<T, 3> vector);

  bool is_identity() const;
  bool all_finite() const;

 private:
  Dims dims_;
  Spacing spacing_;
  std::vector<T> values_;
};

using Volume = BasicVolume<float>;
using FeatureGrid = BasicFeatureGrid<float>;
using DisplacementField = BasicDisplacementField<float>;

/// Integer class map; 0 is background.
class LabelMap {
 public:
  LabelMap() = default;
  explicit LabelMap(Dims dims, Spacing spacing = {}, std::int32_t fill = 0);
  LabelMap(Dims dims, Spacing spacing, std::vector<std::int32_t> values);

  const Dims& dims() const { return dims_; }
  const Spacing& spacing() const { return spacing_; }
  std::span<std::int32_t> values() { return values_; }
  std::span<const std::int32_t> values() const { return values_; }
  std::int32_t& at(int i, int j, int k) { return values_[dims_.index(i, j, k)]; }
  std::int32_t at(int i, int j, int k) const { return values_[dims_.index(i, j, k)]; }

  /// Sorted distinct non-zero class ids.
  std::vector<std::int32_t> classes() const;

 private:
  Dims dims_;
  Spacing spacing_;
  std::vector<std::int32_t> values_;
};

/// Points in mm; voxel coordinate = mm / spacing.
struct LandmarkSet {
  std::vector<std::array<double, 3>> points;
};

enum class CompositionMode { Compose, Add };

/// One of the eight {forward, backward}^3 one-sided difference combinations.
/// Bit a of the id selects a backward difference along axis a.
struct Stencil {
  int id = 0;
  bool backward(int axis) const { return (id >> axis) & 1; }
};

// ---------------------------------------------------------------------------
// Grid operations

/// output(x) = input(x + u(x)), trilinear, border-clamped.
template <typename T>
BasicVolume<T> warp(const BasicVolume<T>& input, const BasicDisplacementField<T>& field);

/// Every channel warped with the same field.
template <typename T>
BasicFeatureGrid<T> warp(const BasicFeatureGrid<T>& input, const BasicDisplacementField<T>& field);

/// Nearest-neighbour warp for label maps.
LabelMap warp_nearest(const LabelMap& labels, const DisplacementField& field);

/// Trilinear upsampling by an integer factor; vectors are multiplied by the factor.
template <typename T>
BasicDisplacementField<T> upsample_field(const BasicDisplacementField<T>& field, int factor);

/// Trilinear resampling to target dims; component a is scaled by target[a] / source[a].
template <typename T>
BasicDisplacementField<T> resample_field(const BasicDisplacementField<T>& field, Dims target);

/// phi(x) = delta(x) + prev_up(x + delta(x)), or plain addition in Add mode.
template <typename T>
BasicDisplacementField<T> compose_fields(const BasicDisplacementField<T>& prev_up,
                                         const BasicDisplacementField<T>& delta,
                                         CompositionMode mode = CompositionMode::Compose);

/// Nine channels, channel 3*i + j holds du_i/dx_j. Forward differences with a
/// backward difference on the last slice of each axis. Voxel units.
template <typename T>
BasicFeatureGrid<T> spatial_gradient(const BasicDisplacementField<T>& field);

/// det(I + grad u) per voxel using the given one-sided stencil. Where the
/// requested side leaves the grid the opposite side is used.
template <typename T>
BasicVolume<T> jacobian_determinants(const BasicDisplacementField<T>& field, Stencil stencil);

template <typename To, typename From>
BasicVolume<To> cast(const BasicVolume<From>& v);
template <typename To, typename From>
BasicDisplacementField<To> cast(const BasicDisplacementField<From>& f);

// ---------------------------------------------------------------------------
// Span-level kernels. Used by the grid operations above and by the network and
// loss code for their vector-Jacobian products.
namespace kernels {

/// Interpolates `channels` planar grids at x + disp(x) for every voxel.
template <typename T>
void warp(std::span<const T> in, int channels, Dims dims, std::span<const T> disp, std::span<T> out);

/// Accumulates grad_out pulled back through warp into grad_in and/or grad_disp.
/// Either output may be empty to skip it.
template <typename T>
void warp_vjp(std::span<const T> in, int channels, Dims dims, std::span<const T> disp,
              std::span<const T> grad_out, std::span<T> grad_in, std::span<T> grad_disp);

/// Origin-aligned trilinear resampling: destination voxel i samples source
/// position i * src / dst along each axis. No vector rescaling.
template <typename T>
void resample(std::span<const T> in, int channels, Dims src, Dims dst, std::span<T> out);

/// Adjoint of `resample`; accumulates into grad_in.
template <typename T>
void resample_adjoint(std::span<const T> grad_out, int channels, Dims src, Dims dst, std::span<T> grad_in);

/// Trilinear sample of one scalar grid at (px, py, pz) with border clamping.
template <typename T>
T sample(std::span<const T> grid, Dims dims, T px, T py, T pz);

}  // namespace kernels

}  // namespace fusionreg
