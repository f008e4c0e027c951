#pragma once

// Run-level workflows behind the command-line verbs.

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "fusionreg/config.hpp"
#include "fusionreg/data.hpp"
#include "fusionreg/losses.hpp"
#include "fusionreg/metrics.hpp"
#include "fusionreg/network.hpp"

namespace fusionreg {

// ---------------------------------------------------------------------------
// train

struct TrainOptions {
  /// Progress lines go here when set.
  std::ostream* progress = nullptr;
  long long progress_every = 50;
  /// Start from these weights instead of a fresh initialization.
  std::optional<std::filesystem::path> init_checkpoint;
};

struct TrainResult {
  std::filesystem::path run_directory;
  std::filesystem::path checkpoint;  // final weights
  std::filesystem::path log;         // JSON lines
  std::filesystem::path plot;        // SVG loss curve
  std::filesystem::path config_snapshot;
  long long iterations = 0;
  LossBreakdown last;
};

/// Writes into config.output.directory: config.cfg, train_log.jsonl,
/// loss_curve.svg, checkpoints/iter_NNNNNN.frgc and checkpoint.frgc.
/// Throws NumericError if a loss becomes non-finite.
TrainResult train(const RunConfig& config, const TrainOptions& options = {});

/// One optimization step on a single pair (exposed for tests). Returns the
/// breakdown computed before the update. Gradients are scaled by grad_scale.
LossBreakdown accumulate_pair_gradient(RegistrationNetwork& net, const Volume& moving, const Volume& fixed,
                                       const LossWeights& weights, float grad_scale = 1.0f);

/// Mirrors the volume along every axis whose bit is set in `axes`.
Volume flip(const Volume& v, int axes);

// ---------------------------------------------------------------------------
// register

struct RegisterResult {
  std::filesystem::path warped;
  std::filesystem::path field;
};

/// Writes warped.nii.gz (the moving image in its original intensities,
/// resampled by phi) and field.nii.gz with its JSON sidecar.
RegisterResult register_files(const std::filesystem::path& checkpoint, const std::filesystem::path& moving,
                              const std::filesystem::path& fixed, const std::filesystem::path& out_dir);

// ---------------------------------------------------------------------------
// evaluate

struct EvaluateOptions {
  /// Pairs with this split tag; empty selects every pair.
  std::string split;
  int threads = 0;
  bool deterministic = false;
  /// Live inference only: also store each predicted field as <pair id>.nii.gz.
  std::optional<std::filesystem::path> save_fields;
  int epe_margin = 4;
};

/// `fields_or_checkpoint` is either a directory of <pair id>.nii.gz fields or
/// a checkpoint file used for live inference. Missing annotations leave the
/// corresponding metric absent.
std::vector<MetricsReport> evaluate(const DatasetIndex& index, const std::filesystem::path& fields_or_checkpoint,
                                    const EvaluateOptions& options = {});

/// evaluate() plus writing the aggregate JSON to out_path.
std::vector<MetricsReport> evaluate_to_file(const std::filesystem::path& manifest,
                                            const std::filesystem::path& fields_or_checkpoint,
                                            const std::filesystem::path& out_path,
                                            const EvaluateOptions& options = {});

/// Metrics for one pair given its field.
MetricsReport evaluate_pair(const DatasetIndex& index, std::size_t pair, const DisplacementField& phi,
                            int epe_margin = 4);

// ---------------------------------------------------------------------------
// synth

struct SynthOptions {
  Dims shape{32, 48, 32};
  int count = 20;
  double max_disp = 3.0;
  double smoothness = 6.0;
  std::uint64_t seed = 0;
  /// The last val_count cases are tagged "val", the rest "train".
  int val_count = 4;
};

/// Writes case_NNN/ directories and manifest.json; returns the manifest path.
std::filesystem::path synth(const SynthOptions& options, const std::filesystem::path& out_dir);

}  // namespace fusionreg
