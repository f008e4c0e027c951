// fusionreg command line: train, register, evaluate, synth.
// Exit codes: 0 success, 1 usage error, 2 runtime failure.

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fusionreg/fusionreg.h"

namespace {

constexpr int kUsage = 1;
constexpr int kRuntime = 2;

int report(frg_status s) {
  if (s == FRG_OK) return 0;
  std::cerr << "fusionreg: " << frg_status_name(s) << ": " << frg_last_error() << "\n";
  return s == FRG_ERR_ARGUMENT ? kUsage : kRuntime;
}

bool parse_shape(const std::string& text, int out[3]) {
  char tail = 0;
  return std::sscanf(text.c_str(), "%dx%dx%d%c", &out[0], &out[1], &out[2], &tail) == 3 && out[0] > 0 &&
         out[1] > 0 && out[2] > 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Pyramid deformable registration with multi-scale feature fusion"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(frg_version()));

  // train
  auto* train = app.add_subcommand("train", "Train a registration network");
  std::string config_path, train_out;
  std::optional<unsigned long long> train_seed;
  std::vector<std::string> overrides;
  bool deterministic = false, quiet = false;
  train->add_option("--config", config_path, "Run configuration file")->required()->check(CLI::ExistingFile);
  train->add_option("--out", train_out, "Run directory (overrides output.directory)");
  train->add_option("--seed", train_seed, "Seed for initialization and pair sampling");
  train->add_option("--set", overrides, "Extra key=value config overrides");
  train->add_flag("--deterministic", deterministic, "Disable every source of run-to-run variation");
  train->add_flag("--quiet", quiet, "No progress output");

  // register
  auto* reg = app.add_subcommand("register", "Register a moving image to a fixed image");
  std::string checkpoint, moving, fixed, reg_out;
  reg->add_option("--checkpoint", checkpoint, "Trained checkpoint")->required()->check(CLI::ExistingFile);
  reg->add_option("--moving", moving, "Moving image (NIfTI)")->required()->check(CLI::ExistingFile);
  reg->add_option("--fixed", fixed, "Fixed image (NIfTI)")->required()->check(CLI::ExistingFile);
  reg->add_option("--out", reg_out, "Output directory")->required();
  std::optional<unsigned long long> reg_seed;
  reg->add_option("--seed", reg_seed, "Accepted for uniformity; inference is deterministic");
  reg->add_flag("--deterministic", deterministic, "Accepted for uniformity; inference is deterministic");

  // evaluate
  auto* eval = app.add_subcommand("evaluate", "Compute Dice, TRE, HdDist95 and NDV over a manifest");
  std::string manifest, fields_dir, eval_ckpt, eval_out, split, save_fields;
  int threads = 0;
  eval->add_option("--manifest", manifest, "Dataset manifest (JSON)")->required()->check(CLI::ExistingFile);
  auto* fields_opt = eval->add_option("--fields", fields_dir, "Directory of <pair id>.nii.gz fields")
                         ->check(CLI::ExistingDirectory);
  auto* ckpt_opt = eval->add_option("--checkpoint", eval_ckpt, "Checkpoint for live inference")
                       ->check(CLI::ExistingFile);
  fields_opt->excludes(ckpt_opt);
  eval->add_option("--out", eval_out, "Report path (JSON)")->required();
  eval->add_option("--split", split, "Only pairs with this split tag");
  eval->add_option("--threads", threads, "Worker threads (0 = all cores)")->check(CLI::NonNegativeNumber);
  eval->add_option("--save-fields", save_fields, "With --checkpoint: also store predicted fields here");
  std::optional<unsigned long long> eval_seed;
  eval->add_option("--seed", eval_seed, "Accepted for uniformity; evaluation is deterministic");
  eval->add_flag("--deterministic", deterministic, "Single-threaded evaluation");

  // synth
  auto* syn = app.add_subcommand("synth", "Generate a synthetic benchmark with ground-truth fields");
  frg_synth_options so;
  frg_synth_options_init(&so);
  std::string shape_text = std::to_string(so.shape[0]) + "x" + std::to_string(so.shape[1]) + "x" +
                           std::to_string(so.shape[2]);
  std::string syn_out;
  unsigned long long syn_seed = so.seed;
  syn->add_option("--out", syn_out, "Output directory")->required();
  syn->add_option("--shape", shape_text, "Volume shape, e.g. 32x48x32")->capture_default_str();
  syn->add_option("--count", so.count, "Number of cases")->capture_default_str()->check(CLI::PositiveNumber);
  syn->add_option("--val-count", so.val_count, "Cases tagged for validation")->capture_default_str();
  syn->add_option("--max-disp", so.max_disp, "Largest displacement component (voxels)")->capture_default_str();
  syn->add_option("--smoothness", so.smoothness, "Field smoothing sigma (voxels)")->capture_default_str();
  syn->add_option("--seed", syn_seed, "Generator seed")->capture_default_str();
  syn->add_flag("--deterministic", deterministic, "Accepted for uniformity; generation is deterministic");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUsage;
  }

  if (*train) {
    std::vector<std::string> kv = overrides;
    if (!train_out.empty()) kv.push_back("output.directory=" + train_out);
    if (train_seed) {
      kv.push_back("data.seed=" + std::to_string(*train_seed));
      kv.push_back("model.init_seed=" + std::to_string(*train_seed));
    }
    if (deterministic) kv.push_back("run.deterministic=true");
    std::vector<const char*> ptrs;
    for (const auto& s : kv) ptrs.push_back(s.c_str());
    ptrs.push_back(nullptr);
    frg_train_options o{config_path.c_str(), ptrs.data(), deterministic ? 1 : 0, quiet ? 0 : 1};
    return report(frg_train(&o));
  }
  if (*reg) {
    const int rc = report(frg_register(checkpoint.c_str(), moving.c_str(), fixed.c_str(), reg_out.c_str()));
    if (rc == 0) std::cout << reg_out << "/warped.nii.gz\n" << reg_out << "/field.nii.gz\n";
    return rc;
  }
  if (*eval) {
    if (fields_dir.empty() == eval_ckpt.empty()) {
      std::cerr << "evaluate: exactly one of --fields or --checkpoint is required\n";
      return kUsage;
    }
    if (!save_fields.empty() && eval_ckpt.empty()) {
      std::cerr << "evaluate: --save-fields needs --checkpoint\n";
      return kUsage;
    }
    frg_evaluate_options o{manifest.c_str(),
                           fields_dir.empty() ? eval_ckpt.c_str() : fields_dir.c_str(),
                           eval_out.c_str(),
                           split.c_str(),
                           save_fields.empty() ? nullptr : save_fields.c_str(),
                           threads,
                           deterministic ? 1 : 0};
    return report(frg_evaluate(&o));
  }
  if (*syn) {
    if (!parse_shape(shape_text, so.shape)) {
      std::cerr << "synth: --shape must look like 32x48x32\n";
      return kUsage;
    }
    so.seed = syn_seed;
    so.out_dir = syn_out.c_str();
    const int rc = report(frg_synth(&so));
    if (rc == 0) std::cout << syn_out << "/manifest.json\n";
    return rc;
  }
  return kUsage;
}
