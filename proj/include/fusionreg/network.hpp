#pragma once

// Pyramid registration network: a shared encoder and a shared auxiliary
// decoder applied to each image separately, and a five-scale fusion decoder
// that predicts a displacement residual per scale and composes them coarse to
// fine. Every scale except the coarsest fuses its inputs through a
// multi-scale fusion block (MSFB) with global (channel) and local (spatial)
// attention.
//
// Levels are numbered from 1 (full resolution) to num_scales (coarsest);
// vectors indexed by level store level 1 first.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "fusionreg/nn/graph.hpp"
#include "fusionreg/nn/ops.hpp"
#include "fusionreg/volgrid.hpp"

namespace fusionreg {

struct ModelConfig {
  int num_scales = 5;
  /// Per level, finest first.
  std::vector<int> encoder_channels{8, 16, 32, 64, 128};
  /// Per level, finest first ([64, 32, 16, 16, 16] read coarse to fine).
  std::vector<int> aux_decoder_channels{16, 16, 16, 32, 64};
  int msfb_bottleneck_ratio = 4;
  float negative_slope = 0.2f;
  bool head_init_zero = true;
  CompositionMode composition = CompositionMode::Compose;
  std::uint64_t init_seed = 0;

  /// Throws ConfigError on any violated invariant.
  void validate() const;
  /// Output channels of the fusion block at a level (2 x encoder channels).
  int fusion_channels(int level) const;
  bool operator==(const ModelConfig&) const = default;
};

std::string to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const std::string& text);

struct FeaturePyramid {
  std::vector<FeatureGrid> levels;  // level 1 first
};

struct RegistrationOutput {
  DisplacementField phi;      // full resolution
  DisplacementField phi_hat;  // half resolution
  std::vector<DisplacementField> per_scale_deltas;  // coarsest first
};

/// Rebuilds the final field from per-scale residuals (coarsest first) by
/// repeated upsample_field(., 2) and compose_fields.
DisplacementField recompose(const std::vector<DisplacementField>& deltas_coarsest_first,
                            CompositionMode mode = CompositionMode::Compose);

class RegistrationNetwork {
 public:
  explicit RegistrationNetwork(ModelConfig config);

  RegistrationNetwork(const RegistrationNetwork&) = delete;
  RegistrationNetwork& operator=(const RegistrationNetwork&) = delete;

  const ModelConfig& config() const { return config_; }
  nn::ParameterStore& parameters() { return store_; }
  const nn::ParameterStore& parameters() const { return store_; }

  /// Throws ContractError unless every axis is divisible by 2^(num_scales-1).
  void check_input_dims(const Dims& dims) const;

  // Graph-level building blocks (training and inference share these).
  std::vector<nn::Var> encode(nn::Graph& g, nn::Var image) const;
  std::vector<nn::Var> aux_decode(nn::Graph& g, const std::vector<nn::Var>& encoder_levels) const;
  nn::Var msfb(nn::Graph& g, int level, nn::Var warped_moving_enc, nn::Var fixed_enc, nn::Var warped_moving_aux,
               nn::Var fixed_aux, nn::Var up_field) const;

  struct GraphOutput {
    nn::Var phi;
    nn::Var phi_hat;
    std::vector<nn::Var> deltas;  // coarsest first
  };
  GraphOutput forward(nn::Graph& g, nn::Var moving, nn::Var fixed) const;

  // Value-level convenience wrappers (no gradient tracking).
  FeaturePyramid encode(const Volume& image) const;
  FeaturePyramid aux_decode(const FeaturePyramid& encoded) const;
  FeatureGrid msfb(int level, const FeatureGrid& warped_moving_enc, const FeatureGrid& fixed_enc,
                   const FeatureGrid& warped_moving_aux, const FeatureGrid& fixed_aux,
                   const DisplacementField& up_field) const;
  RegistrationOutput register_pair(const Volume& moving, const Volume& fixed) const;

 private:
  struct EncoderLevel {
    nn::Conv3d down;  // stride 2 below level 1, stride 1 at level 1
    nn::Conv3d conv;
  };
  struct FusionBlock {
    nn::Conv3d squeeze;
    nn::Conv3d excite;
    nn::Conv3d spatial;
    nn::Conv3d fuse;
  };

  ModelConfig config_;
  nn::ParameterStore store_;
  std::vector<EncoderLevel> encoder_;
  std::vector<nn::Conv3d> aux_;           // per level
  nn::Conv3d coarse_merge_;
  std::vector<FusionBlock> fusion_;       // per level, coarsest entry unused
  std::vector<nn::Conv3d> heads_;         // per level
};

inline constexpr std::uint32_t kCheckpointFormatVersion = 1;

/// Binary checkpoint: magic, format version, JSON header (config plus free-form
/// metadata), then every parameter by name.
void save_checkpoint(const std::filesystem::path& path, const RegistrationNetwork& net,
                     const std::string& metadata_json = "{}");
/// Rebuilds the network from the stored config and loads the weights. Throws
/// IoError on a malformed file and ConfigError on an incompatible one.
std::unique_ptr<RegistrationNetwork> load_checkpoint(const std::filesystem::path& path);

}  // namespace fusionreg
