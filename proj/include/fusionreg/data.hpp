#pragma once

// Volume ingestion, preprocessing, dataset manifests, training-pair sampling
// and the synthetic ground-truth generator.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "fusionreg/volgrid.hpp"

namespace fusionreg {

/// Reads a NIfTI volume and min-max normalizes it to [0, 1]. A constant
/// volume becomes all zeros.
Volume load_volume(const std::filesystem::path& path);

/// In-place min-max normalization with the same degenerate rule.
void normalize_min_max(Volume& v);

/// Trilinear resample to 1 mm spacing, then center crop / zero pad to target.
/// Crop starts at (n - t) / 2, padding before is (t - n) / 2.
Volume preprocess(const Volume& v, Dims target);

/// One "x,y,z" row per point, mm.
LandmarkSet read_landmarks(const std::filesystem::path& path);
void write_landmarks(const std::filesystem::path& path, const LandmarkSet& points);

struct DatasetEntry {
  std::string id;
  std::filesystem::path volume;
  std::optional<std::filesystem::path> labels;
  std::optional<std::filesystem::path> landmarks;
  std::string split = "train";
};

/// Explicit moving/fixed pairing, optionally with a ground-truth field.
struct PairEntry {
  std::string id;
  std::size_t moving = 0;
  std::size_t fixed = 0;
  std::optional<std::filesystem::path> true_field;
  std::string split = "train";
};

struct DatasetIndex {
  std::vector<DatasetEntry> entries;
  std::vector<PairEntry> pairs;

  /// Relative paths resolve against the manifest's directory. Throws
  /// IoError for missing files and ConfigError for duplicates or bad indices.
  static DatasetIndex load(const std::filesystem::path& manifest);
  /// Paths under the manifest's directory are stored relative to it.
  void save(const std::filesystem::path& manifest) const;
  void validate() const;

  std::vector<std::size_t> entries_in(const std::string& split) const;
  std::vector<std::size_t> pairs_in(const std::string& split) const;
};

/// Shuffles [0, n) and pairs consecutive items; an odd item is left out.
std::vector<std::pair<std::size_t, std::size_t>> partition_pairs(std::size_t n, std::mt19937_64& rng);

/// Endless stream of (moving, fixed) entry indices. With explicit pairs for the
/// split, their order is reshuffled every epoch; otherwise every epoch draws a
/// fresh random disjoint pairing of the split's entries.
class PairSampler {
 public:
  PairSampler(const DatasetIndex& index, std::uint64_t seed, std::string split = "train");

  struct Draw {
    std::size_t moving;
    std::size_t fixed;
    /// Index into DatasetIndex::pairs, if the draw came from one.
    std::optional<std::size_t> pair;
  };
  Draw next();
  std::size_t epoch() const { return epoch_; }

 private:
  void refill();

  const DatasetIndex& index_;
  std::string split_;
  std::mt19937_64 rng_;
  std::vector<Draw> queue_;
  std::size_t cursor_ = 0;
  std::size_t epoch_ = 0;
};

/// First draw of a PairSampler with this seed.
std::pair<std::size_t, std::size_t> sample_pair(const DatasetIndex& index, std::uint64_t seed,
                                                const std::string& split = "train");

struct SyntheticOptions {
  Dims shape{32, 48, 32};
  double max_disp = 3.0;
  /// Gaussian sigma (voxels) used to smooth the random displacement field.
  double smoothness = 6.0;
  std::uint64_t seed = 0;
  int num_classes = 4;
  int max_landmarks = 20;
};

struct SyntheticCase {
  Volume moving;
  Volume fixed;
  /// fixed(x) = moving(x + true_field(x)).
  DisplacementField true_field;
  LandmarkSet moving_landmarks;
  LandmarkSet fixed_landmarks;
  LabelMap moving_labels;
  LabelMap fixed_labels;
};

/// Blob-textured moving image, smooth random field rescaled so the largest
/// absolute component equals max_disp, fixed = warp(moving, field).
/// Landmarks: moving points are blob centres, fixed points solve
/// p_f + u(p_f) = p_m. Labels come from the dominant blob at each voxel.
SyntheticCase make_synthetic(const SyntheticOptions& options);

/// Random field only (same construction as make_synthetic).
DisplacementField make_smooth_field(Dims shape, double max_disp, double smoothness, std::mt19937_64& rng);

}  // namespace fusionreg
