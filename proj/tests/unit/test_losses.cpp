#include <cmath>

#include "doctest.h"
#include "fusionreg/error.hpp"
#include "fusionreg/losses.hpp"
#include "test_util.hpp"

using namespace fusionreg;

namespace {

// Windowed correlation by direct summation over each clipped window.
double lncc_oracle(const BasicVolume<double>& a, const BasicVolume<double>& b, int window, double eps) {
  const Dims d = a.dims();
  const int r = window / 2;
  double total = 0.0;
  for (int k = 0; k < d.z; ++k)
    for (int j = 0; j < d.y; ++j)
      for (int i = 0; i < d.x; ++i) {
        double n = 0, sa = 0, sb = 0;
        for (int z = std::max(0, k - r); z <= std::min(d.z - 1, k + r); ++z)
          for (int y = std::max(0, j - r); y <= std::min(d.y - 1, j + r); ++y)
            for (int x = std::max(0, i - r); x <= std::min(d.x - 1, i + r); ++x) {
              n += 1;
              sa += a.at(x, y, z);
              sb += b.at(x, y, z);
            }
        const double ma = sa / n, mb = sb / n;
        double cab = 0, caa = 0, cbb = 0;
        for (int z = std::max(0, k - r); z <= std::min(d.z - 1, k + r); ++z)
          for (int y = std::max(0, j - r); y <= std::min(d.y - 1, j + r); ++y)
            for (int x = std::max(0, i - r); x <= std::min(d.x - 1, i + r); ++x) {
              const double da = a.at(x, y, z) - ma, db = b.at(x, y, z) - mb;
              cab += da * db;
              caa += da * da;
              cbb += db * db;
            }
        total += cab / std::sqrt(caa * cbb + eps);
      }
  return total / static_cast<double>(d.count());
}

double max_abs(const std::vector<double>& v) {
  double m = 0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

struct GradCheck {
  double worst = 0.0;
  void add(double analytic, double numeric, double scale) {
    worst = std::max(worst, std::abs(analytic - numeric) / std::max(std::abs(numeric), 1e-2 * scale));
  }
};

}  // namespace

TEST_CASE("lncc matches direct window summation") {
  std::mt19937_64 rng(11);
  const Dims d{9, 8, 10};
  const auto a = testutil::random_volume<double>(d, rng);
  const auto b = testutil::random_volume<double>(d, rng);
  CHECK(lncc(a, b, 5, 1e-5) == doctest::Approx(lncc_oracle(a, b, 5, 1e-5)).epsilon(1e-10));
  CHECK(lncc(a, b, 3, 1e-5) == doctest::Approx(lncc_oracle(a, b, 3, 1e-5)).epsilon(1e-10));
}

TEST_CASE("lncc identity and affine invariance") {
  std::mt19937_64 rng(12);
  const Dims d{16, 16, 16};
  const auto i = testutil::blob_volume<float>(d, rng);
  auto affine = i, negated = i;
  for (float& x : affine.values()) x = 2.0f * x + 5.0f;
  for (float& x : negated.values()) x = -x;
  CHECK(lncc(i, i, 9, 1e-5) == doctest::Approx(1.0).epsilon(1e-4));
  CHECK(lncc(i, affine, 9, 1e-5) == doctest::Approx(1.0).epsilon(1e-4));
  CHECK(lncc(i, negated, 9, 1e-5) == doctest::Approx(-1.0).epsilon(1e-4));
  CHECK(lncc(i, negated, 9, 1e-5, true) == doctest::Approx(1.0).epsilon(1e-4));
}

TEST_CASE("lncc is symmetric and bounded on random inputs") {
  std::mt19937_64 rng(13);
  for (int t = 0; t < 10; ++t) {
    const Dims d{10, 11, 9};
    const auto a = testutil::random_volume<float>(d, rng, -2, 3);
    const auto b = testutil::random_volume<float>(d, rng, 0, 1);
    const double ab = lncc(a, b, 9, 1e-5), ba = lncc(b, a, 9, 1e-5);
    CHECK(std::abs(ab - ba) <= 1e-6);
    CHECK(ab >= -1.0 - 1e-3);
    CHECK(ab <= 1.0 + 1e-3);
  }
}

TEST_CASE("lncc rejects windows larger than the grid") {
  const Volume a({4, 4, 4});
  CHECK_THROWS_AS(lncc(a, a, 9, 1e-5), ContractError);
  CHECK_THROWS_AS(lncc(a, Volume({4, 4, 5}), 3, 1e-5), ContractError);
}

TEST_CASE("diffusion regularizer values") {
  const Dims d{6, 5, 7};
  CHECK(diffusion_reg(DisplacementField(d)) == 0.0f);
  CHECK(diffusion_reg(DisplacementField::uniform(d, {1.5f, -2.0f, 0.25f})) == 0.0f);
  BasicDisplacementField<double> lin(d);
  const double a = 0.37;
  for (int k = 0; k < d.z; ++k)
    for (int j = 0; j < d.y; ++j)
      for (int i = 0; i < d.x; ++i) lin.set(i, j, k, {a * i, 0.0, 0.0});
  CHECK(diffusion_reg(lin) == doctest::Approx(a * a).epsilon(1e-12));
}

TEST_CASE("diffusion regularizer scales quadratically") {
  std::mt19937_64 rng(14);
  const auto f = testutil::random_field<double>({6, 6, 6}, rng, 1.0);
  const double base = diffusion_reg(f);
  for (double c : {2.0, 4.0}) {
    auto g = f;
    for (double& x : g.values()) x *= c;
    CHECK(diffusion_reg(g) == c * c * base);  // powers of two scale exactly
  }
  auto g = f;
  for (double& x : g.values()) x *= 1.7;
  CHECK(diffusion_reg(g) == doctest::Approx(1.7 * 1.7 * base).epsilon(1e-13));
}

TEST_CASE("total loss on a perfectly aligned pair") {
  std::mt19937_64 rng(15);
  const Dims d{16, 16, 16};
  const auto img = testutil::blob_volume<float>(d, rng);
  const LossWeights w;
  CHECK(w.alpha == 0.7);
  CHECK(w.beta == 0.3);
  CHECK(w.lambda == 1.0);
  const auto b = total_loss(img, img, DisplacementField(d), DisplacementField(divide_dims(d, 2)), w);
  CHECK(b.total == doctest::Approx(-1.0).epsilon(1e-4));
  CHECK(b.reg == 0.0);
}

TEST_CASE("total loss with zero similarity weights is the weighted regularizer") {
  std::mt19937_64 rng(16);
  const Dims d{10, 10, 10};
  const auto f = testutil::random_volume<float>(d, rng);
  const auto m = testutil::random_volume<float>(d, rng);
  const auto phi = testutil::random_field<float>(d, rng, 1.0);
  LossWeights w;
  w.alpha = 0.0;
  w.beta = 0.0;
  w.lambda = 2.5;
  const auto b = total_loss(f, m, phi, DisplacementField(divide_dims(d, 2)), w);
  CHECK(b.total == w.lambda * b.reg);
}

TEST_CASE("total loss recovers an analytic translation") {
  // fixed(x) = g(x), moving(x) = g(x - t); warping moving by t restores fixed.
  const Dims d{24, 24, 24};
  const int t[3] = {2, -2, 2};
  const auto g = [](double x, double y, double z) {
    return std::sin(0.4 * x) * std::cos(0.3 * y) + 0.5 * std::sin(0.25 * z + 0.2 * x) + 0.01 * x * y;
  };
  Volume fixed(d), moving(d);
  for (int k = 0; k < d.z; ++k)
    for (int j = 0; j < d.y; ++j)
      for (int i = 0; i < d.x; ++i) {
        fixed.at(i, j, k) = static_cast<float>(g(i, j, k));
        moving.at(i, j, k) = static_cast<float>(g(i - t[0], j - t[1], k - t[2]));
      }
  const auto phi = DisplacementField::uniform(d, {2.0f, -2.0f, 2.0f});
  const auto phi_hat = DisplacementField::uniform(divide_dims(d, 2), {1.0f, -1.0f, 1.0f});
  LossWeights w;
  w.lambda = 0.0;
  const auto b = total_loss(fixed, moving, phi, phi_hat, w, 2);
  CHECK(b.total == doctest::Approx(-(w.alpha + w.beta)).epsilon(1e-3));
  const auto unaligned = total_loss(fixed, moving, DisplacementField(d), DisplacementField(divide_dims(d, 2)), w, 2);
  CHECK(unaligned.total > b.total + 0.05);
}

TEST_CASE("total is replayed exactly from its parts") {
  std::mt19937_64 rng(17);
  const Dims d{10, 12, 10};
  const auto f = testutil::random_volume<float>(d, rng);
  const auto m = testutil::random_volume<float>(d, rng);
  const LossWeights w;
  const auto b = total_loss(f, m, testutil::random_field<float>(d, rng, 1.0),
                            testutil::random_field<float>(divide_dims(d, 2), rng, 0.5), w);
  CHECK(assemble_total(w, b.ncc_full, b.ncc_half, b.reg) == b.total);
  CHECK(b.total == -(w.alpha * b.ncc_full + w.beta * b.ncc_half) + w.lambda * b.reg);
}

TEST_CASE("analytic loss gradients match central differences in double precision") {
  std::mt19937_64 rng(18);
  const Dims d{8, 8, 8};
  const Dims h = divide_dims(d, 2);
  for (bool squared : {false, true}) {
    CAPTURE(squared);
    const auto fixed = testutil::blob_volume<double>(d, rng, 4);
    const auto moving = testutil::blob_volume<double>(d, rng, 4);
    const auto phi = testutil::kink_free_field<double>(d, rng);
    // Half-resolution 0.25 +- 0.15 lifts to 0.5 +- 0.3 at full resolution.
    const auto phi_hat = testutil::kink_free_field<double>(h, rng, 0.25, 0.15);
    LossWeights w;
    w.ncc_window = 5;
    w.squared_ncc = squared;
    const auto lg = total_loss_with_grad(fixed, moving, phi, phi_hat, w);
    CHECK(lg.breakdown.total == total_loss(fixed, moving, phi, phi_hat, w).total);
    const double step = 1e-3;
    std::vector<double> num_phi(phi.values().size()), num_hat(phi_hat.values().size());
    for (std::size_t i = 0; i < num_phi.size(); ++i) {
      auto p = phi, m = phi;
      p.values()[i] += step;
      m.values()[i] -= step;
      num_phi[i] = (total_loss(fixed, moving, p, phi_hat, w).total - total_loss(fixed, moving, m, phi_hat, w).total) /
                   (2 * step);
    }
    for (std::size_t i = 0; i < num_hat.size(); ++i) {
      auto p = phi_hat, m = phi_hat;
      p.values()[i] += step;
      m.values()[i] -= step;
      num_hat[i] = (total_loss(fixed, moving, phi, p, w).total - total_loss(fixed, moving, phi, m, w).total) /
                   (2 * step);
    }
    GradCheck a, b;
    const double sa = max_abs(num_phi), sb = max_abs(num_hat);
    for (std::size_t i = 0; i < num_phi.size(); ++i) a.add(lg.grad_phi.values()[i], num_phi[i], sa);
    for (std::size_t i = 0; i < num_hat.size(); ++i) b.add(lg.grad_phi_hat.values()[i], num_hat[i], sb);
    CHECK(a.worst < 1e-5);
    CHECK(b.worst < 1e-5);
  }
}

TEST_CASE("float gradients agree with double-precision differences") {
  std::mt19937_64 rng(19);
  const Dims d{8, 8, 8};
  const Dims h = divide_dims(d, 2);
  const auto fixed = testutil::blob_volume<double>(d, rng, 4);
  const auto moving = testutil::blob_volume<double>(d, rng, 4);
  const auto phi = testutil::kink_free_field<double>(d, rng);
  const auto phi_hat = testutil::kink_free_field<double>(h, rng, 0.25, 0.15);
  LossWeights w;
  w.ncc_window = 5;
  const auto lg = total_loss_with_grad(cast<float>(fixed), cast<float>(moving), cast<float>(phi),
                                       cast<float>(phi_hat), w);
  const double step = 1e-3;
  std::vector<double> num(phi.values().size());
  for (std::size_t i = 0; i < num.size(); ++i) {
    auto p = phi, m = phi;
    p.values()[i] += step;
    m.values()[i] -= step;
    num[i] =
        (total_loss(fixed, moving, p, phi_hat, w).total - total_loss(fixed, moving, m, phi_hat, w).total) / (2 * step);
  }
  GradCheck c;
  const double s = max_abs(num);
  for (std::size_t i = 0; i < num.size(); ++i) c.add(lg.grad_phi.values()[i], num[i], s);
  CHECK(c.worst < 1e-2);
}

TEST_CASE("loss weights validation and log records") {
  LossWeights w;
  w.ncc_window = 4;
  CHECK_THROWS_AS(w.validate(), ConfigError);
  w.ncc_window = 9;
  w.alpha = -1;
  CHECK_THROWS_AS(w.validate(), ConfigError);
  LossBreakdown b{0.5, 0.25, 0.125, -0.4};
  CHECK(to_json_line(7, b) == R"({"iteration":7,"ncc_full":0.5,"ncc_half":0.25,"reg":0.125,"total":-0.4})");
}

TEST_CASE("phi_hat must be at half resolution") {
  const Dims d{8, 8, 8};
  const Volume v(d);
  CHECK_THROWS_AS(total_loss(v, v, DisplacementField(d), DisplacementField(d), LossWeights{}), ContractError);
}
