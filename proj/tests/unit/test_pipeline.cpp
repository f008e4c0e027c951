#include <cstring>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "fusionreg/error.hpp"
#include "fusionreg/nifti.hpp"
#include "fusionreg/pipeline.hpp"
#include "json.hpp"
#include "test_util.hpp"

using namespace fusionreg;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

RunConfig small_run(const fs::path& manifest, const fs::path& out) {
  RunConfig c;
  c.model.encoder_channels = {2, 4, 4, 8, 8};
  c.model.aux_decoder_channels = {4, 4, 4, 4, 8};
  c.optimizer.iterations = 10;
  c.optimizer.learning_rate = 1e-3;
  c.optimizer.checkpoint_every = 5;
  c.data.manifest = manifest;
  c.data.target_shape = {32, 32, 32};
  c.data.seed = 3;
  c.output.directory = out;
  c.deterministic = true;
  return c;
}

fs::path make_dataset(const testutil::TempDir& tmp, int count = 4) {
  SynthOptions o;
  o.shape = {32, 32, 32};
  o.count = count;
  o.val_count = 1;
  o.seed = 71;
  return synth(o, tmp / "syn");
}

}  // namespace

TEST_CASE("synth writes a complete dataset") {
  testutil::TempDir tmp("pipe");
  SynthOptions o;
  o.shape = {32, 32, 32};
  o.count = 5;
  o.val_count = 2;
  o.seed = 72;
  const auto manifest = synth(o, tmp / "a");
  const auto idx = DatasetIndex::load(manifest);
  CHECK(idx.entries.size() == 10);
  CHECK(idx.pairs.size() == 5);
  CHECK(idx.pairs_in("val").size() == 2);
  CHECK(idx.pairs_in("train").size() == 3);
  for (const char* f : {"moving.nii.gz", "fixed.nii.gz", "true_field.nii.gz", "moving_labels.nii.gz",
                        "fixed_labels.nii.gz", "moving_landmarks.csv", "fixed_landmarks.csv"})
    CHECK(fs::exists(tmp / "a" / "case_000" / f));

  const auto field = nifti::read_field(*idx.pairs[0].true_field);
  const auto vol = nifti::read_volume(idx.entries[idx.pairs[0].moving].volume);
  // Regenerating gives bit-identical files.
  synth(o, tmp / "b");
  for (const char* f : {"moving.nii.gz", "true_field.nii.gz", "fixed_landmarks.csv"})
    CHECK(slurp(tmp / "a" / "case_003" / f) == slurp(tmp / "b" / "case_003" / f));
  const auto fixed = nifti::read_volume(idx.entries[idx.pairs[0].fixed].volume);
  const auto warped = warp(vol, field);
  CHECK(std::equal(warped.values().begin(), warped.values().end(), fixed.values().begin()));
}

TEST_CASE("training writes logs and checkpoints and is reproducible") {
  testutil::TempDir tmp("pipe");
  const auto manifest = make_dataset(tmp);
  const auto r1 = train(small_run(manifest, tmp / "run1"));
  const auto r2 = train(small_run(manifest, tmp / "run2"));
  CHECK(r1.iterations == 10);
  std::ifstream log(r1.log);
  int lines = 0;
  for (std::string line; std::getline(log, line);) {
    const auto j = nlohmann::json::parse(line);
    CHECK(j.at("iteration") == ++lines);
    CHECK(j.contains("ncc_full"));
    CHECK(j.contains("ncc_half"));
    CHECK(j.contains("reg"));
    CHECK(j.contains("total"));
  }
  CHECK(lines == 10);
  CHECK(fs::exists(r1.checkpoint));
  CHECK(fs::exists(tmp / "run1" / "checkpoints" / "iter_000005.frgc"));
  CHECK(slurp(r1.plot).rfind("<svg", 0) == 0);
  CHECK(slurp(r1.log) == slurp(r2.log));
  CHECK(slurp(r1.checkpoint) == slurp(r2.checkpoint));
  const auto snap = load_run_config(r1.config_snapshot);
  CHECK(snap.data.manifest.is_absolute());
  CHECK(snap.optimizer.iterations == 10);

  // A different data seed draws a different pair stream.
  auto other = small_run(manifest, tmp / "run3");
  other.data.seed = 4;
  CHECK(slurp(train(other).log) != slurp(r1.log));

  // Swapping draws its own coin per pair, so the stream changes but stays reproducible.
  auto swapped = small_run(manifest, tmp / "run4");
  swapped.data.augment_swap = true;
  const auto s1 = train(swapped);
  swapped.output.directory = tmp / "run5";
  const auto s2 = train(swapped);
  CHECK(slurp(s1.log) != slurp(r1.log));
  CHECK(slurp(s1.checkpoint) == slurp(s2.checkpoint));
}

TEST_CASE("training rejects bad setups") {
  testutil::TempDir tmp("pipe");
  const auto manifest = make_dataset(tmp);
  auto c = small_run(manifest, tmp / "run");
  c.data.target_shape = {24, 32, 32};
  CHECK_THROWS_AS(train(c), ConfigError);
  c = small_run(tmp / "missing.json", tmp / "run");
  CHECK_THROWS_AS(train(c), ConfigError);
}

TEST_CASE("register with zero heads leaves the moving image unchanged") {
  testutil::TempDir tmp("pipe");
  ModelConfig mc;
  mc.encoder_channels = {2, 4, 4, 8, 8};
  mc.aux_decoder_channels = {4, 4, 4, 4, 8};
  RegistrationNetwork net(mc);
  save_checkpoint(tmp / "zero.frgc", net);
  std::mt19937_64 rng(73);
  const auto m = testutil::random_volume<float>({16, 32, 16}, rng, 10.0, 500.0);
  nifti::write_volume(tmp / "m.nii.gz", m);
  nifti::write_volume(tmp / "f.nii.gz", testutil::random_volume<float>({16, 32, 16}, rng));
  const auto r = register_files(tmp / "zero.frgc", tmp / "m.nii.gz", tmp / "f.nii.gz", tmp / "out");
  const auto w = nifti::read_volume(r.warped);
  CHECK(std::equal(w.values().begin(), w.values().end(), m.values().begin()));
  CHECK(nifti::read_field(r.field).is_identity());
  CHECK(fs::exists(tmp / "out" / "field.json"));

  nifti::write_volume(tmp / "odd.nii.gz", Volume({16, 16, 16}));
  CHECK_THROWS_AS(register_files(tmp / "zero.frgc", tmp / "m.nii.gz", tmp / "odd.nii.gz", tmp / "out2"),
                  ContractError);
}

TEST_CASE("evaluation from stored and live fields") {
  testutil::TempDir tmp("pipe");
  const auto manifest = make_dataset(tmp);
  const auto idx = DatasetIndex::load(manifest);

  // Ground-truth fields: perfect overlap and zero endpoint error.
  fs::create_directories(tmp / "truth");
  fs::create_directories(tmp / "zero");
  for (const auto& p : idx.pairs) {
    const auto f = nifti::read_field(*p.true_field);
    nifti::write_field(tmp / "truth" / (p.id + ".nii.gz"), f);
    nifti::write_field(tmp / "zero" / (p.id + ".nii.gz"), DisplacementField(f.dims()));
  }
  EvaluateOptions opts;
  opts.deterministic = true;
  const auto truth = evaluate(idx, tmp / "truth", opts);
  REQUIRE(truth.size() == 4);
  for (const auto& r : truth) {
    CHECK(*r.dice_mean == 1.0);
    CHECK(*r.hd95_mm == 0.0);
    CHECK(*r.ndv_percent == 0.0);
    CHECK(*r.epe_voxels == 0.0);
    CHECK(*r.tre_mm < 0.1);
    CHECK(*r.tre_identity_mm > *r.tre_mm);
  }
  const auto zero = evaluate(idx, tmp / "zero", opts);
  for (const auto& r : zero) {
    CHECK(*r.ndv_percent == 0.0);
    CHECK(*r.epe_voxels > 0.1);
    CHECK(*r.tre_mm == *r.tre_identity_mm);
  }

  // Live inference agrees with evaluating the fields it saved.
  ModelConfig mc;
  mc.encoder_channels = {2, 4, 4, 8, 8};
  mc.aux_decoder_channels = {4, 4, 4, 4, 8};
  RegistrationNetwork net(mc);
  std::mt19937_64 rng(74);
  for (auto& p : net.parameters().all())
    if (p.name.rfind("head.", 0) == 0)
      for (float& x : p.value) x = std::uniform_real_distribution<float>(-0.05f, 0.05f)(rng);
  save_checkpoint(tmp / "net.frgc", net);
  EvaluateOptions live = opts;
  live.save_fields = tmp / "saved";
  live.split = "val";
  const auto a = evaluate(idx, tmp / "net.frgc", live);
  REQUIRE(a.size() == 1);
  EvaluateOptions stored = opts;
  stored.split = "val";
  const auto b = evaluate(idx, tmp / "saved", stored);
  CHECK(a[0].to_json() == b[0].to_json());

  // Threaded evaluation returns the same reports in the same order.
  EvaluateOptions threaded;
  threaded.threads = 3;
  const auto t = evaluate(idx, tmp / "truth", threaded);
  for (std::size_t i = 0; i < t.size(); ++i) CHECK(t[i].to_json() == truth[i].to_json());

  const auto reports = evaluate_to_file(manifest, tmp / "truth", tmp / "metrics.json", opts);
  std::ifstream in(tmp / "metrics.json");
  const auto j = nlohmann::json::parse(in);
  CHECK(j.at("pairs").size() == 4);
  CHECK(j.at("aggregate").at("dice").at("mean") == 1.0);
  CHECK(j.at("aggregate").at("dice").at("formatted") == "1.0000 \xC2\xB1 0.0000");

  EvaluateOptions none = opts;
  none.split = "test";
  CHECK_THROWS_AS(evaluate(idx, tmp / "truth", none), ConfigError);
  CHECK_THROWS_AS(evaluate(idx, tmp / "nowhere", opts), IoError);
}

TEST_CASE("flip mirrors the chosen axes") {
  Volume v({2, 3, 2});
  for (std::size_t i = 0; i < v.values().size(); ++i) v.values()[i] = static_cast<float>(i);
  const auto f = flip(v, 1 | 4);
  CHECK(f.at(0, 0, 0) == v.at(1, 0, 1));
  CHECK(f.at(1, 2, 1) == v.at(0, 2, 0));
  const auto back = flip(f, 5);
  CHECK(std::equal(back.values().begin(), back.values().end(), v.values().begin()));
}
