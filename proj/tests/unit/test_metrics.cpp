#include <cmath>
#include <limits>

#include "doctest.h"
#include "fusionreg/error.hpp"
#include "fusionreg/metrics.hpp"
#include "metric_oracles.hpp"
#include "test_util.hpp"

using namespace fusionreg;

TEST_CASE("dice examples") {
  const Dims d{4, 4, 4};
  LabelMap a(d), b(d);
  for (int i = 0; i < 8; ++i) a.values()[i] = 1;
  for (int i = 4; i < 12; ++i) b.values()[i] = 1;
  CHECK(dice(a, b).per_class.at(1) == 0.5);
  CHECK(*dice(a, a).mean == 1.0);
  LabelMap c(d);
  for (int i = 20; i < 28; ++i) c.values()[i] = 1;
  CHECK(*dice(a, c).mean == 0.0);
  CHECK_FALSE(dice(LabelMap(d), LabelMap(d)).mean.has_value());
  CHECK_THROWS_AS(dice(a, LabelMap({4, 4, 5})), ContractError);
}

TEST_CASE("dice excludes classes absent from both maps") {
  const Dims d{3, 3, 3};
  LabelMap a(d), b(d);
  a.values()[0] = 1;
  b.values()[0] = 1;
  const auto r = dice(a, b, {1, 2, 3});
  CHECK(r.per_class.size() == 1);
  CHECK(*r.mean == 1.0);
}

TEST_CASE("tre examples") {
  const Dims d{8, 8, 8};
  LandmarkSet f, m;
  f.points = {{2, 3, 4}, {5, 5, 1}};
  m.points = {{4, 3, 4}, {7, 5, 1}};
  const DisplacementField zero(d);
  CHECK(tre(f, f, zero, {}) == 0.0);
  CHECK(tre(f, m, zero, {}) == 2.0);
  CHECK(tre(f, m, DisplacementField::uniform(d, {2.0f, 0.0f, 0.0f}), {}) == doctest::Approx(0.0).epsilon(1e-6));
  // 2 mm at 0.5 mm spacing is 4 voxels.
  LandmarkSet fa, ma;
  fa.points = {{1, 1, 1}, {2, 2, 2}};
  ma.points = {{3, 1, 1}, {4, 2, 2}};
  CHECK(tre(fa, ma, DisplacementField::uniform(d, {4.0f, 0.0f, 0.0f}), {0.5, 1.0, 1.0}) ==
        doctest::Approx(0.0).epsilon(1e-6));
  LandmarkSet out;
  out.points = {{8.5, 0, 0}, {0, 0, 0}};
  CHECK_THROWS_AS(tre(out, m, zero, {}), ContractError);
}

TEST_CASE("hd95 examples") {
  const Dims d{8, 8, 8};
  std::vector<std::uint8_t> a(d.count(), 0), b(d.count(), 0);
  a[d.index(1, 2, 2)] = 1;
  b[d.index(4, 2, 2)] = 1;
  CHECK(hd95(a, a, d, {}) == 0.0);
  CHECK(hd95(a, b, d, {}) == 3.0);
  std::vector<std::uint8_t> cube(d.count(), 0), dilated(d.count(), 0);
  for (int k = 0; k < d.z; ++k)
    for (int j = 0; j < d.y; ++j)
      for (int i = 0; i < d.x; ++i) {
        const auto in = [&](int lo, int hi) {
          return i >= lo && i <= hi && j >= lo && j <= hi && k >= lo && k <= hi;
        };
        cube[d.index(i, j, k)] = in(3, 4);
        dilated[d.index(i, j, k)] = in(2, 5);
      }
  CHECK(hd95(cube, dilated, d, {}) == doctest::Approx(oracle::hd95(cube, dilated, d, {})).epsilon(1e-12));
  // Pooled surface distances: 32 at 1, 24 at sqrt(2), 8 at sqrt(3) (the outer corners).
  CHECK(hd95(cube, dilated, d, {}) == doctest::Approx(std::sqrt(3.0)).epsilon(1e-12));
  CHECK_THROWS_AS(hd95(a, std::vector<std::uint8_t>(d.count(), 0), d, {}), ContractError);
}

TEST_CASE("percentile interpolates between order statistics") {
  CHECK(percentile({1, 2, 3, 4}, 50) == 2.5);
  CHECK(percentile({5}, 95) == 5);
  CHECK(percentile({0, 10}, 95) == doctest::Approx(9.5));
}

TEST_CASE("distance transform equals brute force on anisotropic grids") {
  std::mt19937_64 rng(21);
  const Dims d{7, 6, 5};
  const Spacing s{0.8, 1.3, 2.0};
  std::vector<std::uint8_t> m(d.count(), 0);
  std::bernoulli_distribution bern(0.05);
  for (auto& x : m) x = bern(rng);
  m[3] = 1;
  const auto dt = squared_distance_transform(m, d, s);
  for (int k = 0; k < d.z; ++k)
    for (int j = 0; j < d.y; ++j)
      for (int i = 0; i < d.x; ++i) {
        double best = std::numeric_limits<double>::infinity();
        for (int z = 0; z < d.z; ++z)
          for (int y = 0; y < d.y; ++y)
            for (int x = 0; x < d.x; ++x)
              if (m[d.index(x, y, z)]) {
                const double dx = (x - i) * s.x, dy = (y - j) * s.y, dz = (z - k) * s.z;
                best = std::min(best, dx * dx + dy * dy + dz * dz);
              }
        CHECK(dt[d.index(i, j, k)] == doctest::Approx(best).epsilon(1e-12));
      }
}

TEST_CASE("ndv examples") {
  const Dims d{12, 12, 12};
  CHECK(ndv(DisplacementField(d)) == 0.0);
  // u_x = -2x inside a block: det = -1 wherever the stencil stays inside it.
  DisplacementField f(d);
  for (int k = 3; k <= 8; ++k)
    for (int j = 3; j <= 8; ++j)
      for (int i = 3; i <= 8; ++i) f.set(i, j, k, {-2.0f * i, 0.0f, 0.0f});
  const double v = ndv(f);
  CHECK(v == doctest::Approx(oracle::ndv(f)).epsilon(1e-12));
  // Along x inside a 6x6 column of the block: i = 4..7 have det = -1 on both
  // sides (1 each); i = 3 has -1 forward and -5 backward (3); i = 2 has -5
  // forward (2.5); i = 8 has -1 backward (0.5). Total 10 per column.
  CHECK(v == doctest::Approx(100.0 * 10.0 * 36.0 / d.count()).epsilon(1e-12));
}

TEST_CASE("ndv is zero for smooth fields with small derivatives") {
  const Dims d{10, 10, 10};
  DisplacementField f(d);
  for (int k = 0; k < d.z; ++k)
    for (int j = 0; j < d.y; ++j)
      for (int i = 0; i < d.x; ++i)
        f.set(i, j, k, {0.25f * std::sin(0.9f * j), 0.25f * std::cos(0.8f * k), 0.25f * std::sin(1.1f * i)});
  // |du_i/dx_j| <= 0.25 * 1.1 < 0.3 with only off-diagonal terms: det stays positive.
  CHECK(ndv(f) == 0.0);
  CHECK(oracle::ndv(f) == 0.0);
}

TEST_CASE("metrics agree with brute-force oracles on random instances") {
  std::mt19937_64 rng(23);
  std::uniform_int_distribution<int> side(4, 12);
  for (int t = 0; t < 20; ++t) {
    const Dims d{side(rng), side(rng), side(rng)};
    CAPTURE(to_string(d));
    const Spacing s{0.5 + (t % 3) * 0.5, 1.0, 1.25};
    const auto la = oracle::random_labels(d, rng, 3);
    const auto lb = oracle::random_labels(d, rng, 3);
    const auto da = dice(la, lb);
    const auto ra = oracle::dice(la, lb);
    CHECK(da.per_class == ra.per_class);
    CHECK(da.mean == ra.mean);
    const auto ma = oracle::blob_mask(d, rng), mb = oracle::blob_mask(d, rng);
    CHECK(std::abs(hd95(ma, mb, d, s) - oracle::hd95(ma, mb, d, s)) <= 1e-9);
    CHECK(hd95(ma, mb, d, s) <= oracle::hausdorff(ma, mb, d, s) + 1e-12);
    CHECK(std::abs(hd95(ma, mb, d, s) - hd95(mb, ma, d, s)) <= 1e-12);
    const auto phi = testutil::random_field<float>(d, rng, 1.2);
    CHECK(std::abs(ndv(phi) - oracle::ndv(phi)) <= 1e-12);
    const auto [fp, mp] = oracle::random_landmarks(d, s, rng, 6);
    CHECK(std::abs(tre(fp, mp, phi, s) - oracle::tre(fp, mp, phi, s)) <= 1e-9);
  }
}

TEST_CASE("dice is symmetric and bounded") {
  std::mt19937_64 rng(24);
  for (int t = 0; t < 10; ++t) {
    const Dims d{6, 7, 5};
    const auto a = oracle::random_labels(d, rng, 4), b = oracle::random_labels(d, rng, 4);
    const auto ab = dice(a, b), ba = dice(b, a);
    CHECK(ab.per_class == ba.per_class);
    for (const auto& [c, v] : ab.per_class) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }
}

TEST_CASE("tre with the zero field is the raw landmark distance") {
  std::mt19937_64 rng(25);
  const Dims d{9, 9, 9};
  const Spacing s{1.0, 0.7, 1.5};
  const auto [fp, mp] = oracle::random_landmarks(d, s, rng, 10);
  double raw = 0.0;
  for (std::size_t i = 0; i < fp.points.size(); ++i) {
    double q = 0;
    for (int a = 0; a < 3; ++a) q += (fp.points[i][a] - mp.points[i][a]) * (fp.points[i][a] - mp.points[i][a]);
    raw += std::sqrt(q);
  }
  raw /= static_cast<double>(fp.points.size());
  CHECK(tre(fp, mp, DisplacementField(d), s) == raw);
}

TEST_CASE("ndv ignores a uniform translation") {
  std::mt19937_64 rng(26);
  const Dims d{8, 9, 7};
  const auto phi = testutil::random_field<float>(d, rng, 1.0);
  auto shifted = phi;
  for (int a = 0; a < 3; ++a)
    for (float& x : shifted.component(a)) x += 3.0f * (a + 1);
  CHECK(ndv(shifted) == doctest::Approx(ndv(phi)).epsilon(1e-6));
}

TEST_CASE("report serialization and aggregates") {
  MetricsReport r;
  r.pair_id = "p1";
  r.dice_mean = 0.75;
  r.dice_per_class = {{1, 0.5}, {2, 1.0}};
  r.ndv_percent = 0.0;
  const auto back = metrics_report_from_json(r.to_json());
  CHECK(back.pair_id == "p1");
  CHECK(back.dice_mean == 0.75);
  CHECK(back.dice_per_class == r.dice_per_class);
  CHECK_FALSE(back.tre_mm.has_value());
  CHECK(r.to_json().find("\"tre_mm\": null") != std::string::npos);

  MetricsReport q = r;
  q.dice_mean = 0.8;
  const auto agg = aggregate({r, q});
  CHECK(agg.at("dice").mean == doctest::Approx(0.775));
  CHECK(agg.at("dice").std == doctest::Approx(0.025));
  CHECK(agg.count("tre_mm") == 0);
  CHECK(format_mean_std(AggregateEntry{0.77271, 0.02764, 2}) == "0.7727 \xC2\xB1 0.0276");
}
