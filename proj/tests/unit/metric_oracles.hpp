#pragma once

// Brute-force 64-bit reference implementations of the evaluation metrics,
// written independently of the library code they check.

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <random>
#include <utility>
#include <vector>

#include "fusionreg/volgrid.hpp"

namespace oracle {

using fusionreg::Dims;
using fusionreg::Spacing;

struct DiceOut {
  std::map<std::int32_t, double> per_class;
  std::optional<double> mean;
};

inline DiceOut dice(const fusionreg::LabelMap& a, const fusionreg::LabelMap& b) {
  std::map<std::int32_t, std::pair<long, long>> sizes;
  std::map<std::int32_t, long> inter;
  for (std::size_t i = 0; i < a.values().size(); ++i) {
    const auto x = a.values()[i], y = b.values()[i];
    if (x != 0) sizes[x].first++;
    if (y != 0) sizes[y].second++;
    if (x != 0 && x == y) inter[x]++;
  }
  DiceOut r;
  double s = 0;
  for (const auto& [c, n] : sizes) {
    r.per_class[c] = 2.0 * static_cast<double>(inter[c]) / static_cast<double>(n.first + n.second);
    s += r.per_class[c];
  }
  if (!sizes.empty()) r.mean = s / static_cast<double>(sizes.size());
  return r;
}

inline std::vector<std::array<int, 3>> surface(const std::vector<std::uint8_t>& m, Dims d) {
  std::vector<std::array<int, 3>> out;
  const auto fg = [&](int i, int j, int k) {
    return i >= 0 && j >= 0 && k >= 0 && i < d.x && j < d.y && k < d.z && m[d.index(i, j, k)];
  };
  for (int k = 0; k < d.z; ++k)
    for (int j = 0; j < d.y; ++j)
      for (int i = 0; i < d.x; ++i)
        if (fg(i, j, k) && (!fg(i - 1, j, k) || !fg(i + 1, j, k) || !fg(i, j - 1, k) || !fg(i, j + 1, k) ||
                            !fg(i, j, k - 1) || !fg(i, j, k + 1)))
          out.push_back({i, j, k});
  return out;
}

inline std::vector<double> pooled_distances(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b,
                                            Dims d, Spacing s) {
  const auto sa = surface(a, d), sb = surface(b, d);
  const auto nearest = [&](const std::array<int, 3>& p, const std::vector<std::array<int, 3>>& set) {
    double best = 1e300;
    for (const auto& q : set) {
      const double dx = (p[0] - q[0]) * s.x, dy = (p[1] - q[1]) * s.y, dz = (p[2] - q[2]) * s.z;
      best = std::min(best, std::sqrt(dx * dx + dy * dy + dz * dz));
    }
    return best;
  };
  std::vector<double> all;
  for (const auto& p : sa) all.push_back(nearest(p, sb));
  for (const auto& p : sb) all.push_back(nearest(p, sa));
  return all;
}

inline double hd95(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b, Dims d, Spacing s) {
  auto v = pooled_distances(a, b, d, s);
  std::sort(v.begin(), v.end());
  const double pos = 0.95 * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(pos);
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

inline double hausdorff(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b, Dims d, Spacing s) {
  const auto v = pooled_distances(a, b, d, s);
  return *std::max_element(v.begin(), v.end());
}

inline double ndv(const fusionreg::DisplacementField& f) {
  const Dims d = f.dims();
  const auto u = [&](int c, int i, int j, int k) {
    return static_cast<double>(f.component(c)[d.index(i, j, k)]);
  };
  double total = 0.0;
  for (int k = 0; k < d.z; ++k)
    for (int j = 0; j < d.y; ++j)
      for (int i = 0; i < d.x; ++i) {
        double acc = 0.0;
        for (int s = 0; s < 8; ++s) {
          double J[3][3];
          const int p[3] = {i, j, k};
          for (int axis = 0; axis < 3; ++axis) {
            bool back = (s >> axis) & 1;
            if (back && p[axis] == 0) back = false;
            if (!back && p[axis] == d[axis] - 1) back = true;
            int q0[3] = {i, j, k}, q1[3] = {i, j, k};
            if (back)
              q0[axis] -= 1;
            else
              q1[axis] += 1;
            for (int c = 0; c < 3; ++c)
              J[c][axis] = (c == axis ? 1.0 : 0.0) + u(c, q1[0], q1[1], q1[2]) - u(c, q0[0], q0[1], q0[2]);
          }
          const double det = J[0][0] * (J[1][1] * J[2][2] - J[1][2] * J[2][1]) -
                             J[0][1] * (J[1][0] * J[2][2] - J[1][2] * J[2][0]) +
                             J[0][2] * (J[1][0] * J[2][1] - J[1][1] * J[2][0]);
          acc += std::max(0.0, -det);
        }
        total += acc / 8.0;
      }
  return 100.0 * total / static_cast<double>(d.count());
}

inline double interp(const fusionreg::DisplacementField& f, int c, double x, double y, double z) {
  const Dims d = f.dims();
  const double p[3] = {x, y, z};
  int i0[3], i1[3];
  double t[3];
  for (int a = 0; a < 3; ++a) {
    const double q = std::clamp(p[a], 0.0, double(d[a] - 1));
    i0[a] = static_cast<int>(std::floor(q));
    i1[a] = std::min(i0[a] + 1, d[a] - 1);
    t[a] = q - i0[a];
  }
  double s = 0;
  for (int n = 0; n < 8; ++n) {
    const int ii = n & 1 ? i1[0] : i0[0], jj = n & 2 ? i1[1] : i0[1], kk = n & 4 ? i1[2] : i0[2];
    const double w = (n & 1 ? t[0] : 1 - t[0]) * (n & 2 ? t[1] : 1 - t[1]) * (n & 4 ? t[2] : 1 - t[2]);
    s += w * f.component(c)[d.index(ii, jj, kk)];
  }
  return s;
}

inline double tre(const fusionreg::LandmarkSet& fixed, const fusionreg::LandmarkSet& moving,
                  const fusionreg::DisplacementField& phi, Spacing s) {
  double total = 0;
  for (std::size_t n = 0; n < fixed.points.size(); ++n) {
    const auto& pf = fixed.points[n];
    const double v[3] = {pf[0] / s.x, pf[1] / s.y, pf[2] / s.z};
    double sq = 0;
    for (int a = 0; a < 3; ++a) {
      const double mapped = pf[a] + interp(phi, a, v[0], v[1], v[2]) * s[a];
      sq += (moving.points[n][a] - mapped) * (moving.points[n][a] - mapped);
    }
    total += std::sqrt(sq);
  }
  return total / static_cast<double>(fixed.points.size());
}

inline fusionreg::LabelMap random_labels(Dims d, std::mt19937_64& rng, int classes) {
  fusionreg::LabelMap l(d);
  std::uniform_int_distribution<int> c(0, classes);
  for (auto& x : l.values()) x = c(rng);
  return l;
}

/// Non-empty union of a few random balls.
inline std::vector<std::uint8_t> blob_mask(Dims d, std::mt19937_64& rng) {
  std::vector<std::uint8_t> m(d.count(), 0);
  std::uniform_real_distribution<double> u(0, 1);
  const int n = 1 + static_cast<int>(u(rng) * 3);
  for (int b = 0; b < n; ++b) {
    const double c[3] = {u(rng) * (d.x - 1), u(rng) * (d.y - 1), u(rng) * (d.z - 1)};
    const double r = 0.8 + u(rng) * 3.0;
    for (int k = 0; k < d.z; ++k)
      for (int j = 0; j < d.y; ++j)
        for (int i = 0; i < d.x; ++i)
          if ((i - c[0]) * (i - c[0]) + (j - c[1]) * (j - c[1]) + (k - c[2]) * (k - c[2]) <= r * r)
            m[d.index(i, j, k)] = 1;
    m[d.index(static_cast<int>(c[0]), static_cast<int>(c[1]), static_cast<int>(c[2]))] = 1;
  }
  return m;
}

inline std::pair<fusionreg::LandmarkSet, fusionreg::LandmarkSet> random_landmarks(Dims d, Spacing s,
                                                                                  std::mt19937_64& rng, int n) {
  std::uniform_real_distribution<double> u(0, 1);
  fusionreg::LandmarkSet f, m;
  for (int i = 0; i < n; ++i) {
    f.points.push_back({u(rng) * (d.x - 1) * s.x, u(rng) * (d.y - 1) * s.y, u(rng) * (d.z - 1) * s.z});
    m.points.push_back({u(rng) * (d.x - 1) * s.x, u(rng) * (d.y - 1) * s.y, u(rng) * (d.z - 1) * s.z});
  }
  return {f, m};
}

}  // namespace oracle
