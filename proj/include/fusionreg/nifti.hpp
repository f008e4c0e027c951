#pragma once

// Minimal NIfTI-1 single-file reader/writer (.nii and .nii.gz).
//
// Axis i of the file is the fastest-varying axis and maps to Dims::x, which
// matches the in-memory layout of every grid type, so no transposition is done.
// The affine written is diag(spacing) with a zero origin.

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "fusionreg/volgrid.hpp"

namespace fusionreg::nifti {

enum class DataType : std::int16_t {
  UInt8 = 2,
  Int16 = 4,
  Int32 = 8,
  Float32 = 16,
  Float64 = 64,
  Int8 = 256,
  UInt16 = 512,
  UInt32 = 768,
};

inline constexpr std::int16_t kIntentVector = 1007;

struct Image {
  int ndim = 3;
  std::array<std::int64_t, 7> dim{1, 1, 1, 1, 1, 1, 1};
  std::array<float, 7> pixdim{1, 1, 1, 1, 1, 1, 1};
  std::int16_t intent_code = 0;
  DataType datatype = DataType::Float32;
  /// Values after applying scl_slope / scl_inter, file order.
  std::vector<double> data;

  std::size_t voxel_count() const;
};

Image read(const std::filesystem::path& path);
void write(const std::filesystem::path& path, const Image& image);

/// Raw intensities (no normalization); spacing from pixdim.
Volume read_volume(const std::filesystem::path& path);
void write_volume(const std::filesystem::path& path, const Volume& volume);

LabelMap read_labels(const std::filesystem::path& path);
void write_labels(const std::filesystem::path& path, const LabelMap& labels);

/// 4-D grid (nx, ny, nz, 3): the component is the last (slowest) dimension,
/// ordered (x, y, z), voxel units. A JSON sidecar next to the file records the
/// units and axis convention.
DisplacementField read_field(const std::filesystem::path& path);
void write_field(const std::filesystem::path& path, const DisplacementField& field);

/// "case.nii.gz" -> "case.json".
std::filesystem::path sidecar_path(const std::filesystem::path& path);

}  // namespace fusionreg::nifti
