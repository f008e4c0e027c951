#pragma once

// Shared generators and independent reference implementations for the tests.

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "fusionreg/volgrid.hpp"

namespace testutil {

using fusionreg::Dims;

inline std::vector<double> random_values(std::size_t n, std::mt19937_64& rng, double lo = 0.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (double& x : v) x = u(rng);
  return v;
}

template <typename T>
fusionreg::BasicVolume<T> random_volume(Dims d, std::mt19937_64& rng, double lo = 0.0, double hi = 1.0) {
  const auto v = random_values(d.count(), rng, lo, hi);
  return fusionreg::BasicVolume<T>(d, {}, std::vector<T>(v.begin(), v.end()));
}

/// Smooth-ish image: sum of a few random Gaussians.
template <typename T>
fusionreg::BasicVolume<T> blob_volume(Dims d, std::mt19937_64& rng, int blobs = 6) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<std::array<double, 5>> b(blobs);
  for (auto& x : b) x = {u(rng) * (d.x - 1), u(rng) * (d.y - 1), u(rng) * (d.z - 1), 1.0 + 2.0 * u(rng), u(rng)};
  fusionreg::BasicVolume<T> v(d);
  for (int k = 0; k < d.z; ++k)
    for (int j = 0; j < d.y; ++j)
      for (int i = 0; i < d.x; ++i) {
        double s = 0.05 * u(rng);
        for (const auto& x : b) {
          const double r2 = (i - x[0]) * (i - x[0]) + (j - x[1]) * (j - x[1]) + (k - x[2]) * (k - x[2]);
          s += x[4] * std::exp(-r2 / (2 * x[3] * x[3]));
        }
        v.at(i, j, k) = static_cast<T>(s);
      }
  return v;
}

/// Every vector component is offset + spread * U(-1, 1), so sample positions
/// stay strictly between grid nodes (no trilinear kinks) for offsets of 0.5.
template <typename T>
fusionreg::BasicDisplacementField<T> kink_free_field(Dims d, std::mt19937_64& rng, double offset = 0.5,
                                                     double spread = 0.3) {
  const auto v = random_values(3 * d.count(), rng, -spread, spread);
  std::vector<T> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<T>(offset + v[i]);
  return fusionreg::BasicDisplacementField<T>(d, {}, out);
}

template <typename T>
fusionreg::BasicDisplacementField<T> random_field(Dims d, std::mt19937_64& rng, double amp) {
  const auto v = random_values(3 * d.count(), rng, -amp, amp);
  return fusionreg::BasicDisplacementField<T>(d, {}, std::vector<T>(v.begin(), v.end()));
}

/// Reference trilinear interpolation with border clamping, written from scratch.
template <typename Get>
double trilinear(Get get, Dims d, double px, double py, double pz) {
  const double p[3] = {px, py, pz};
  int lo[3], hi[3];
  double f[3];
  for (int a = 0; a < 3; ++a) {
    const double c = std::clamp(p[a], 0.0, static_cast<double>(d[a] - 1));
    lo[a] = static_cast<int>(std::floor(c));
    hi[a] = std::min(lo[a] + 1, d[a] - 1);
    f[a] = c - lo[a];
  }
  double s = 0.0;
  for (int dz = 0; dz < 2; ++dz)
    for (int dy = 0; dy < 2; ++dy)
      for (int dx = 0; dx < 2; ++dx) {
        const double w = (dx ? f[0] : 1 - f[0]) * (dy ? f[1] : 1 - f[1]) * (dz ? f[2] : 1 - f[2]);
        s += w * get(dx ? hi[0] : lo[0], dy ? hi[1] : lo[1], dz ? hi[2] : lo[2]);
      }
  return s;
}

/// Unique scratch directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("fusionreg_" + tag + "_" + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

 private:
  std::filesystem::path path_;
};

}  // namespace testutil
