#pragma once

// Evaluation metrics: Dice overlap, landmark TRE, 95th-percentile surface
// distance and the non-diffeomorphic volume percentage. All arithmetic in double.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fusionreg/volgrid.hpp"

namespace fusionreg {

struct DiceResult {
  std::map<std::int32_t, double> per_class;
  /// Mean over classes present in at least one map; nullopt if there are none.
  std::optional<double> mean;
};

/// Classes default to the union of non-zero labels in a and b.
DiceResult dice(const LabelMap& a, const LabelMap& b, const std::vector<std::int32_t>& classes = {});

/// Mean landmark distance in mm after mapping fixed points through phi:
/// || p_m - (p_f + u(p_f)) ||, u trilinear at p_f. Points are in mm,
/// voxel coordinate = mm / spacing. Throws ContractError for an out-of-grid point.
double tre(const LandmarkSet& fixed_points, const LandmarkSet& moving_points, const DisplacementField& phi,
           Spacing spacing);

/// Foreground voxels with at least one 6-neighbour in the background
/// (outside the grid counts as background).
std::vector<std::uint8_t> boundary_mask(const std::vector<std::uint8_t>& mask, Dims dims);

/// Exact squared Euclidean distance (mm^2) from every voxel to the nearest set voxel.
std::vector<double> squared_distance_transform(const std::vector<std::uint8_t>& mask, Dims dims, Spacing spacing);

/// Linear interpolation between order statistics (numpy "linear").
double percentile(std::vector<double> values, double q);

/// Throws ContractError if either mask is empty.
double hd95(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b, Dims dims, Spacing spacing);
/// Binary masks are `label != 0`.
double hd95(const LabelMap& a, const LabelMap& b, Spacing spacing);

/// 100 / |grid| * sum_x 1/8 sum_s max(0, -det J_s(x)) over the eight one-sided stencils.
double ndv(const DisplacementField& phi);

/// Mean endpoint error (voxels) over voxels at least `margin` from every border.
double endpoint_error(const DisplacementField& predicted, const DisplacementField& truth, int margin = 0);

struct MetricsReport {
  std::string pair_id;
  std::optional<double> dice_mean;
  std::map<std::int32_t, double> dice_per_class;
  std::optional<double> tre_mm;
  std::optional<double> hd95_mm;
  std::optional<double> ndv_percent;
  /// Only when a ground-truth field is available.
  std::optional<double> epe_voxels;
  std::optional<double> tre_identity_mm;

  std::string to_json() const;
};

MetricsReport metrics_report_from_json(const std::string& text);

struct AggregateEntry {
  double mean = 0.0;
  double std = 0.0;  // population standard deviation
  std::size_t count = 0;
};

/// Per metric over the reports where it is present.
std::map<std::string, AggregateEntry> aggregate(const std::vector<MetricsReport>& reports);

/// "0.7727 ± 0.0276"
std::string format_mean_std(const AggregateEntry& e, int decimals = 4);

/// Per-pair reports plus the aggregate table.
std::string aggregate_json(const std::vector<MetricsReport>& reports);

}  // namespace fusionreg
