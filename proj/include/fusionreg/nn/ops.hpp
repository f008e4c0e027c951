#pragma once

#include <initializer_list>
#include <random>
#include <string>
#include <vector>

#include "fusionreg/nn/graph.hpp"

namespace fusionreg::nn {

struct ConvSpec {
  int in_channels = 1;
  int out_channels = 1;
  int kernel = 3;  // odd, zero padding of kernel / 2
  int stride = 1;  // 1 or 2
};

/// Weight layout [kernel^3][out][in], offsets ordered z-major then y then x.
struct Conv3d {
  ConvSpec spec;
  Parameter* weight = nullptr;
  Parameter* bias = nullptr;
};

enum class ConvInit { HeUniform, Zero };

Conv3d make_conv(ParameterStore& store, const std::string& name, ConvSpec spec);
void initialize_conv(Conv3d& conv, ConvInit init, float negative_slope, std::mt19937_64& rng);

Dims conv_output_dims(const Dims& in, const ConvSpec& spec);

Var conv3d(Graph& g, Var x, const Conv3d& conv);
Var leaky_relu(Graph& g, Var x, float negative_slope);
Var sigmoid(Graph& g, Var x);
Var concat(Graph& g, const std::vector<Var>& parts);

/// Origin-aligned trilinear upsampling of every channel, values unchanged.
Var upsample_features(Graph& g, Var x, int factor);
/// Same resampling for a 3-channel displacement field, vectors multiplied by factor.
Var upsample_field(Graph& g, Var field, int factor);
/// Trilinear warp of every channel of x by a 3-channel displacement field.
Var warp(Graph& g, Var x, Var field);
Var compose(Graph& g, Var prev_up, Var delta, CompositionMode mode);

/// (C, dims) -> (C, 1x1x1) spatial mean.
Var global_average(Graph& g, Var x);
/// (C, dims) -> (2, dims): channel mean and channel max.
Var channel_statistics(Graph& g, Var x);
/// y[c, i] = x[c, i] * gates[c]; gates has shape (C, 1x1x1).
Var scale_channels(Graph& g, Var x, Var gates);
/// y[c, i] = x[c, i] * map[i]; map has shape (1, dims).
Var scale_spatial(Graph& g, Var x, Var map);

}  // namespace fusionreg::nn
