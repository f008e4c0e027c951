#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "doctest.h"
#include "fusionreg/error.hpp"
#include "fusionreg/losses.hpp"
#include "fusionreg/network.hpp"
#include "fusionreg/pipeline.hpp"
#include "test_util.hpp"

using namespace fusionreg;

namespace {

ModelConfig tiny_config(std::uint64_t seed = 1) {
  ModelConfig c;
  c.encoder_channels = {2, 4, 4, 8, 8};
  c.aux_decoder_channels = {4, 4, 4, 4, 8};
  c.init_seed = seed;
  return c;
}

// Gives the zero-initialized heads small random weights so every path carries signal.
void perturb_heads(RegistrationNetwork& net, std::uint64_t seed, float amp = 0.05f) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(-amp, amp);
  for (auto& p : net.parameters().all())
    if (p.name.rfind("head.", 0) == 0)
      for (float& x : p.value) x = u(rng);
}

}  // namespace

TEST_CASE("model config validation") {
  ModelConfig c;
  CHECK_NOTHROW(c.validate());
  CHECK(c.aux_decoder_channels == std::vector<int>{16, 16, 16, 32, 64});
  CHECK(c.fusion_channels(3) == 64);
  c.num_scales = 4;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = ModelConfig{};
  c.encoder_channels.pop_back();
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = ModelConfig{};
  c.msfb_bottleneck_ratio = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  const ModelConfig t = tiny_config(9);
  CHECK(model_config_from_json(to_json(t)) == t);
}

TEST_CASE("pyramid and output shapes on toy inputs") {
  RegistrationNetwork net(tiny_config());
  std::mt19937_64 rng(41);
  const Dims d{32, 48, 32};
  const auto m = testutil::blob_volume<float>(d, rng), f = testutil::blob_volume<float>(d, rng);
  const FeaturePyramid enc = net.encode(m);
  REQUIRE(enc.levels.size() == 5);
  for (int l = 0; l < 5; ++l) {
    CHECK(enc.levels[l].dims() == divide_dims(d, 1 << l));
    CHECK(enc.levels[l].channels() == net.config().encoder_channels[l]);
  }
  const FeaturePyramid aux = net.aux_decode(enc);
  for (int l = 0; l < 5; ++l) {
    CHECK(aux.levels[l].dims() == divide_dims(d, 1 << l));
    CHECK(aux.levels[l].channels() == net.config().aux_decoder_channels[l]);
  }
  const auto out = net.register_pair(m, f);
  CHECK(out.phi.dims() == d);
  CHECK(out.phi_hat.dims() == Dims{16, 24, 16});
  REQUIRE(out.per_scale_deltas.size() == 5);
  for (int i = 0; i < 5; ++i) CHECK(out.per_scale_deltas[i].dims() == divide_dims(d, 1 << (4 - i)));
}

TEST_CASE("fusion block output shape") {
  RegistrationNetwork net(tiny_config());
  std::mt19937_64 rng(42);
  const Dims d{8, 8, 8};
  const int level = 2;
  const int ce = net.config().encoder_channels[level - 1], ca = net.config().aux_decoder_channels[level - 1];
  const auto feat = [&](int c) {
    const auto v = testutil::random_values(c * d.count(), rng);
    return FeatureGrid(c, d, std::vector<float>(v.begin(), v.end()));
  };
  const auto y = net.msfb(level, feat(ce), feat(ce), feat(ca), feat(ca), DisplacementField(d));
  CHECK(y.channels() == net.config().fusion_channels(level));
  CHECK(y.dims() == d);
}

TEST_CASE("inputs must be divisible by 16") {
  RegistrationNetwork net(tiny_config());
  const Volume v({24, 32, 32});
  CHECK_THROWS_AS(net.register_pair(v, v), ContractError);
  CHECK_THROWS_AS(net.register_pair(Volume({32, 32, 32}), Volume({32, 32, 16})), ContractError);
}

TEST_CASE("zero-initialized heads give the identity transform") {
  RegistrationNetwork net(tiny_config());
  std::mt19937_64 rng(43);
  const Dims d{32, 32, 32};
  const auto m = testutil::blob_volume<float>(d, rng), f = testutil::blob_volume<float>(d, rng);
  const auto out = net.register_pair(m, f);
  CHECK(out.phi.is_identity());
  CHECK(out.phi_hat.is_identity());
  for (const auto& delta : out.per_scale_deltas) CHECK(delta.is_identity());
  const auto warped = warp(m, out.phi);
  CHECK(std::memcmp(warped.values().data(), m.values().data(), m.values().size_bytes()) == 0);
  const auto b = total_loss(f, m, out.phi, out.phi_hat, LossWeights{});
  CHECK(b.total == doctest::Approx(-lncc(f, m, 9, 1e-5)).epsilon(1e-4));
}

TEST_CASE("recomposing per-scale residuals reproduces phi") {
  RegistrationNetwork net(tiny_config());
  perturb_heads(net, 5, 0.2f);
  std::mt19937_64 rng(44);
  const Dims d{32, 32, 32};
  const auto out =
      net.register_pair(testutil::blob_volume<float>(d, rng), testutil::blob_volume<float>(d, rng));
  CHECK_FALSE(out.phi.is_identity());
  const auto phi = recompose(out.per_scale_deltas);
  double worst = 0.0;
  for (std::size_t i = 0; i < phi.values().size(); ++i)
    worst = std::max(worst, double(std::abs(phi.values()[i] - out.phi.values()[i])));
  CHECK(worst <= 1e-5);
  std::vector<DisplacementField> first4(out.per_scale_deltas.begin(), out.per_scale_deltas.end() - 1);
  const auto hat = recompose(first4);
  for (std::size_t i = 0; i < hat.values().size(); ++i)
    CHECK(std::abs(hat.values()[i] - out.phi_hat.values()[i]) <= 1e-5);
}

TEST_CASE("initialization is seeded") {
  RegistrationNetwork a(tiny_config(3)), b(tiny_config(3)), c(tiny_config(4));
  CHECK(a.parameters().all().front().value == b.parameters().all().front().value);
  CHECK(a.parameters().all().front().value != c.parameters().all().front().value);
}

TEST_CASE("checkpoint round trip") {
  testutil::TempDir tmp("ckpt");
  RegistrationNetwork net(tiny_config(7));
  perturb_heads(net, 8);
  save_checkpoint(tmp / "m.frgc", net, R"({"iteration": 12})");
  const auto back = load_checkpoint(tmp / "m.frgc");
  CHECK(back->config() == net.config());
  REQUIRE(back->parameters().all().size() == net.parameters().all().size());
  for (std::size_t i = 0; i < net.parameters().all().size(); ++i) {
    CHECK(back->parameters().all()[i].name == net.parameters().all()[i].name);
    CHECK(back->parameters().all()[i].value == net.parameters().all()[i].value);
  }
  std::mt19937_64 rng(45);
  const Dims d{16, 16, 16};
  const auto m = testutil::blob_volume<float>(d, rng), f = testutil::blob_volume<float>(d, rng);
  CHECK(back->register_pair(m, f).phi.values()[100] == net.register_pair(m, f).phi.values()[100]);

  {
    std::ofstream bad(tmp / "bad.frgc", std::ios::binary);
    bad << "not a checkpoint";
  }
  CHECK_THROWS_AS(load_checkpoint(tmp / "bad.frgc"), IoError);
  CHECK_THROWS_AS(load_checkpoint(tmp / "missing.frgc"), IoError);
  // Truncated file.
  {
    std::ifstream in(tmp / "m.frgc", std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    std::ofstream out(tmp / "short.frgc", std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
  }
  CHECK_THROWS_AS(load_checkpoint(tmp / "short.frgc"), IoError);
}

TEST_CASE("network gradients match directional finite differences") {
  RegistrationNetwork net(tiny_config(11));
  perturb_heads(net, 12, 0.02f);
  std::mt19937_64 rng(46);
  const Dims d{32, 32, 32};
  const auto m = testutil::blob_volume<float>(d, rng), f = testutil::blob_volume<float>(d, rng);
  LossWeights w;
  w.ncc_window = 5;
  accumulate_pair_gradient(net, m, f, w);
  const auto loss = [&] {
    const auto out = net.register_pair(m, f);
    return total_loss(cast<double>(f), cast<double>(m), cast<double>(out.phi), cast<double>(out.phi_hat), w).total;
  };
  // Directional derivatives along random directions within each parameter group.
  std::mt19937_64 dir_rng(47);
  std::normal_distribution<float> normal;
  for (const std::string prefix : {"encoder.", "aux.", "fusion.coarse_merge", "fusion.l", "head.", ""}) {
    for (int trial = 0; trial < 2; ++trial) {
      CAPTURE(prefix);
      CAPTURE(trial);
      std::vector<std::pair<nn::Parameter*, std::vector<float>>> dirs;
      double ana = 0.0;
      for (auto& p : net.parameters().all()) {
        if (p.name.rfind(prefix, 0) != 0) continue;
        std::vector<float> v(p.size());
        for (std::size_t i = 0; i < v.size(); ++i) {
          v[i] = normal(dir_rng);
          ana += double(v[i]) * p.grad[i];
        }
        dirs.emplace_back(&p, std::move(v));
      }
      const auto shifted = [&](float h) {
        std::vector<std::vector<float>> keep;
        for (auto& [p, v] : dirs) {
          keep.push_back(p->value);
          for (std::size_t i = 0; i < v.size(); ++i) p->value[i] += h * v[i];
        }
        const double l = loss();
        for (std::size_t k = 0; k < dirs.size(); ++k) dirs[k].first->value = keep[k];
        return l;
      };
      // Each direction moves every weight in the group, so the step is kept small.
      const float h = 1e-4f;
      const double num = (shifted(h) - shifted(-h)) / (2 * h);
      CHECK(std::abs(ana - num) <= 0.05 * std::abs(num) + 1e-3);
    }
  }
}
