#include "fusionreg/network.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <random>

#include "fusionreg/error.hpp"
#include "json.hpp"

namespace fusionreg {

using nn::Graph;
using nn::Var;

// ---------------------------------------------------------------------------
// ModelConfig

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("model config: " + m); };
  if (num_scales != 5) fail("num_scales must be 5");
  if (static_cast<int>(encoder_channels.size()) != num_scales) fail("encoder_channels needs one entry per scale");
  if (static_cast<int>(aux_decoder_channels.size()) != num_scales)
    fail("aux_decoder_channels needs one entry per scale");
  for (int c : encoder_channels)
    if (c < 1) fail("encoder channel counts must be >= 1");
  for (int c : aux_decoder_channels)
    if (c < 1) fail("aux decoder channel counts must be >= 1");
  if (msfb_bottleneck_ratio < 1) fail("msfb_bottleneck_ratio must be >= 1");
  if (!(negative_slope >= 0.0f && negative_slope < 1.0f)) fail("negative_slope must be in [0, 1)");
}

int ModelConfig::fusion_channels(int level) const { return 2 * encoder_channels[level - 1]; }

std::string to_json(const ModelConfig& c) {
  nlohmann::json j = {
      {"num_scales", c.num_scales},
      {"encoder_channels", c.encoder_channels},
      {"aux_decoder_channels", c.aux_decoder_channels},
      {"msfb_bottleneck_ratio", c.msfb_bottleneck_ratio},
      {"negative_slope", c.negative_slope},
      {"head_init_zero", c.head_init_zero},
      {"composition", c.composition == CompositionMode::Compose ? "compose" : "add"},
      {"init_seed", c.init_seed},
  };
  return j.dump();
}

ModelConfig model_config_from_json(const std::string& text) {
  ModelConfig c;
  try {
    const auto j = nlohmann::json::parse(text);
    c.num_scales = j.at("num_scales").get<int>();
    c.encoder_channels = j.at("encoder_channels").get<std::vector<int>>();
    c.aux_decoder_channels = j.at("aux_decoder_channels").get<std::vector<int>>();
    c.msfb_bottleneck_ratio = j.at("msfb_bottleneck_ratio").get<int>();
    c.negative_slope = j.at("negative_slope").get<float>();
    c.head_init_zero = j.at("head_init_zero").get<bool>();
    const auto mode = j.at("composition").get<std::string>();
    if (mode != "compose" && mode != "add") throw ConfigError("unknown composition mode " + mode);
    c.composition = mode == "compose" ? CompositionMode::Compose : CompositionMode::Add;
    c.init_seed = j.at("init_seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed model config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Construction

namespace {
constexpr int kLocalAttentionKernel = 7;
}

RegistrationNetwork::RegistrationNetwork(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  const int levels = config_.num_scales;
  const auto& enc = config_.encoder_channels;
  const auto& aux = config_.aux_decoder_channels;
  const std::string L = "l";

  for (int k = 1; k <= levels; ++k) {
    const int in = k == 1 ? 1 : enc[k - 2];
    const std::string p = "encoder." + L + std::to_string(k);
    EncoderLevel e;
    e.down = nn::make_conv(store_, p + ".down", {in, enc[k - 1], 3, k == 1 ? 1 : 2});
    e.conv = nn::make_conv(store_, p + ".conv", {enc[k - 1], enc[k - 1], 3, 1});
    encoder_.push_back(e);
  }
  for (int k = 1; k <= levels; ++k) {
    const int in = k == levels ? enc[k - 1] : aux[k] + enc[k - 1];
    aux_.push_back(nn::make_conv(store_, "aux." + L + std::to_string(k), {in, aux[k - 1], 3, 1}));
  }
  coarse_merge_ = nn::make_conv(store_, "fusion.coarse_merge", {2 * enc[levels - 1], enc[levels - 1], 3, 1});
  for (int k = 1; k <= levels; ++k) {
    FusionBlock b;
    if (k < levels) {
      const std::string p = "fusion." + L + std::to_string(k);
      const int cin = 2 * enc[k - 1] + 2 * aux[k - 1] + 3;
      const int hidden = std::max(1, cin / config_.msfb_bottleneck_ratio);
      b.squeeze = nn::make_conv(store_, p + ".global_squeeze", {cin, hidden, 1, 1});
      b.excite = nn::make_conv(store_, p + ".global_excite", {hidden, cin, 1, 1});
      b.spatial = nn::make_conv(store_, p + ".local", {2, 1, kLocalAttentionKernel, 1});
      b.fuse = nn::make_conv(store_, p + ".fuse", {cin, config_.fusion_channels(k), 3, 1});
    }
    fusion_.push_back(b);
  }
  for (int k = 1; k <= levels; ++k) {
    const int in = k == levels ? enc[levels - 1] : config_.fusion_channels(k);
    heads_.push_back(nn::make_conv(store_, "head." + L + std::to_string(k), {in, 3, 3, 1}));
  }

  std::mt19937_64 rng(config_.init_seed);
  const float slope = config_.negative_slope;
  for (auto& e : encoder_) {
    nn::initialize_conv(e.down, nn::ConvInit::HeUniform, slope, rng);
    nn::initialize_conv(e.conv, nn::ConvInit::HeUniform, slope, rng);
  }
  for (auto& a : aux_) nn::initialize_conv(a, nn::ConvInit::HeUniform, slope, rng);
  nn::initialize_conv(coarse_merge_, nn::ConvInit::HeUniform, slope, rng);
  for (int k = 1; k < levels; ++k) {
    FusionBlock& b = fusion_[k - 1];
    nn::initialize_conv(b.squeeze, nn::ConvInit::HeUniform, slope, rng);
    nn::initialize_conv(b.excite, nn::ConvInit::HeUniform, 1.0f, rng);
    nn::initialize_conv(b.spatial, nn::ConvInit::HeUniform, 1.0f, rng);
    nn::initialize_conv(b.fuse, nn::ConvInit::HeUniform, slope, rng);
  }
  const auto head_init = config_.head_init_zero ? nn::ConvInit::Zero : nn::ConvInit::HeUniform;
  for (auto& h : heads_) nn::initialize_conv(h, head_init, 1.0f, rng);
}

void RegistrationNetwork::check_input_dims(const Dims& dims) const {
  const int factor = 1 << (config_.num_scales - 1);
  require(dims.x % factor == 0 && dims.y % factor == 0 && dims.z % factor == 0,
          "input shape " + to_string(dims) + " must be divisible by " + std::to_string(factor));
}

// ---------------------------------------------------------------------------
// Graph-level forward

std::vector<Var> RegistrationNetwork::encode(Graph& g, Var image) const {
  check_input_dims(g.value(image).dims());
  require(g.value(image).channels() == 1, "encode: expected a single-channel image");
  const float slope = config_.negative_slope;
  std::vector<Var> levels;
  Var x = image;
  for (const EncoderLevel& e : encoder_) {
    x = nn::leaky_relu(g, nn::conv3d(g, x, e.down), slope);
    x = nn::leaky_relu(g, nn::conv3d(g, x, e.conv), slope);
    levels.push_back(x);
  }
  return levels;
}

std::vector<Var> RegistrationNetwork::aux_decode(Graph& g, const std::vector<Var>& enc) const {
  const int levels = config_.num_scales;
  require(static_cast<int>(enc.size()) == levels, "aux_decode: pyramid must have num_scales levels");
  const float slope = config_.negative_slope;
  std::vector<Var> out(levels);
  out[levels - 1] = nn::leaky_relu(g, nn::conv3d(g, enc[levels - 1], aux_[levels - 1]), slope);
  for (int k = levels - 1; k >= 1; --k) {
    const Var up = nn::upsample_features(g, out[k], 2);
    const Var x = nn::concat(g, {up, enc[k - 1]});
    out[k - 1] = nn::leaky_relu(g, nn::conv3d(g, x, aux_[k - 1]), slope);
  }
  return out;
}

Var RegistrationNetwork::msfb(Graph& g, int level, Var wm_enc, Var f_enc, Var wm_aux, Var f_aux, Var up) const {
  require(level >= 1 && level < config_.num_scales, "msfb: level out of range");
  const FusionBlock& b = fusion_[level - 1];
  const float slope = config_.negative_slope;
  const Var x = nn::concat(g, {wm_enc, f_enc, wm_aux, f_aux, up});
  require(g.value(x).channels() == b.fuse.spec.in_channels, "msfb: unexpected input channel count");

  // Global branch: pooled statistics -> bottleneck -> channel gates.
  const Var pooled = nn::global_average(g, x);
  const Var hidden = nn::leaky_relu(g, nn::conv3d(g, pooled, b.squeeze), slope);
  const Var gates = nn::sigmoid(g, nn::conv3d(g, hidden, b.excite));
  const Var channel_gated = nn::scale_channels(g, x, gates);

  // Local branch: channel-pooled statistics -> 7^3 conv -> spatial map.
  const Var stats = nn::channel_statistics(g, channel_gated);
  const Var map = nn::sigmoid(g, nn::conv3d(g, stats, b.spatial));
  const Var gated = nn::scale_spatial(g, channel_gated, map);

  return nn::leaky_relu(g, nn::conv3d(g, gated, b.fuse), slope);
}

RegistrationNetwork::GraphOutput RegistrationNetwork::forward(Graph& g, Var moving, Var fixed) const {
  require(g.value(moving).dims() == g.value(fixed).dims(), "register: moving and fixed shapes differ");
  const int levels = config_.num_scales;
  const float slope = config_.negative_slope;

  const auto enc_m = encode(g, moving);
  const auto enc_f = encode(g, fixed);
  const auto aux_m = aux_decode(g, enc_m);
  const auto aux_f = aux_decode(g, enc_f);

  GraphOutput out;
  const Var merged = nn::concat(g, {enc_m[levels - 1], enc_f[levels - 1]});
  const Var h = nn::leaky_relu(g, nn::conv3d(g, merged, coarse_merge_), slope);
  Var field = nn::conv3d(g, h, heads_[levels - 1]);
  out.deltas.push_back(field);

  for (int k = levels - 1; k >= 1; --k) {
    const Var up = nn::upsample_field(g, field, 2);
    const Var wm_enc = nn::warp(g, enc_m[k - 1], up);
    const Var wm_aux = nn::warp(g, aux_m[k - 1], up);
    const Var fused = msfb(g, k, wm_enc, enc_f[k - 1], wm_aux, aux_f[k - 1], up);
    const Var delta = nn::conv3d(g, fused, heads_[k - 1]);
    out.deltas.push_back(delta);
    field = nn::compose(g, up, delta, config_.composition);
    if (k == 2) out.phi_hat = field;
  }
  out.phi = field;
  return out;
}

// ---------------------------------------------------------------------------
// Value-level wrappers

namespace {

nn::Tensor as_tensor(const Volume& v) {
  return nn::Tensor(1, v.dims(), std::vector<float>(v.values().begin(), v.values().end()));
}

DisplacementField as_field(const nn::Tensor& t, Spacing spacing) {
  require(t.channels() == 3, "expected a 3-channel tensor");
  return DisplacementField(t.dims(), spacing, std::vector<float>(t.values().begin(), t.values().end()));
}

nn::Tensor field_tensor(const DisplacementField& f) {
  return nn::Tensor(3, f.dims(), std::vector<float>(f.values().begin(), f.values().end()));
}

Spacing scaled(Spacing s, int factor) { return {s.x * factor, s.y * factor, s.z * factor}; }

}  // namespace

FeaturePyramid RegistrationNetwork::encode(const Volume& image) const {
  Graph g(false);
  const auto levels = encode(g, g.constant(as_tensor(image)));
  FeaturePyramid p;
  for (Var v : levels) p.levels.push_back(g.value(v));
  return p;
}

FeaturePyramid RegistrationNetwork::aux_decode(const FeaturePyramid& encoded) const {
  Graph g(false);
  std::vector<Var> in;
  for (const auto& level : encoded.levels) in.push_back(g.constant(level));
  const auto levels = aux_decode(g, in);
  FeaturePyramid p;
  for (Var v : levels) p.levels.push_back(g.value(v));
  return p;
}

FeatureGrid RegistrationNetwork::msfb(int level, const FeatureGrid& wm_enc, const FeatureGrid& f_enc,
                                      const FeatureGrid& wm_aux, const FeatureGrid& f_aux,
                                      const DisplacementField& up) const {
  Graph g(false);
  const Var out = msfb(g, level, g.constant(wm_enc), g.constant(f_enc), g.constant(wm_aux), g.constant(f_aux),
                       g.constant(field_tensor(up)));
  return g.value(out);
}

RegistrationOutput RegistrationNetwork::register_pair(const Volume& moving, const Volume& fixed) const {
  require(moving.dims() == fixed.dims(), "register: moving " + to_string(moving.dims()) + " and fixed " +
                                             to_string(fixed.dims()) + " shapes differ");
  check_input_dims(moving.dims());
  Graph g(false);
  const GraphOutput out = forward(g, g.constant(as_tensor(moving)), g.constant(as_tensor(fixed)));
  const Spacing s = fixed.spacing();
  RegistrationOutput r;
  r.phi = as_field(g.value(out.phi), s);
  r.phi_hat = as_field(g.value(out.phi_hat), scaled(s, 2));
  const int levels = config_.num_scales;
  for (std::size_t i = 0; i < out.deltas.size(); ++i) {
    const int level = levels - static_cast<int>(i);
    r.per_scale_deltas.push_back(as_field(g.value(out.deltas[i]), scaled(s, 1 << (level - 1))));
  }
  return r;
}

DisplacementField recompose(const std::vector<DisplacementField>& deltas, CompositionMode mode) {
  require(!deltas.empty(), "recompose: no deltas");
  DisplacementField field = deltas.front();
  for (std::size_t i = 1; i < deltas.size(); ++i) field = compose_fields(upsample_field(field, 2), deltas[i], mode);
  return field;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[8] = {'F', 'R', 'G', 'C', 'K', 'P', 'T', '\0'};

template <typename V>
void put(std::ostream& out, V v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V get(std::istream& in, const std::filesystem::path& path) {
  V v;
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(V))) throw IoError("truncated checkpoint: " + path.string());
  return v;
}

std::string get_string(std::istream& in, std::size_t n, const std::filesystem::path& path) {
  if (n > (1u << 26)) throw IoError("corrupt checkpoint (string length): " + path.string());
  std::string s(n, '\0');
  if (n && !in.read(s.data(), static_cast<std::streamsize>(n))) throw IoError("truncated checkpoint: " + path.string());
  return s;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const RegistrationNetwork& net,
                     const std::string& metadata_json) {
  nlohmann::json header;
  header["format_version"] = kCheckpointFormatVersion;
  header["model"] = nlohmann::json::parse(to_json(net.config()));
  header["metadata"] = nlohmann::json::parse(metadata_json);
  const std::string text = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint: " + path.string());
  out.write(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, kCheckpointFormatVersion);
  put<std::uint64_t>(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  const auto& params = net.parameters().all();
  put<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
  for (const nn::Parameter& p : params) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(p.name.size()));
    out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(p.shape.size()));
    for (int s : p.shape) put<std::int32_t>(out, s);
    put<std::uint64_t>(out, p.value.size());
    out.write(reinterpret_cast<const char*>(p.value.data()), static_cast<std::streamsize>(p.value.size() * 4));
  }
  if (!out) throw IoError("write failed: " + path.string());
}

std::unique_ptr<RegistrationNetwork> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path.string());
  char magic[8];
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw IoError("not a fusionreg checkpoint: " + path.string());
  const auto version = get<std::uint32_t>(in, path);
  if (version != kCheckpointFormatVersion)
    throw ConfigError("unsupported checkpoint format version " + std::to_string(version));
  const auto header_size = get<std::uint64_t>(in, path);
  const std::string text = get_string(in, header_size, path);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("corrupt checkpoint header: " + std::string(e.what()));
  }
  if (!header.contains("model")) throw IoError("checkpoint header has no model config");
  auto net = std::make_unique<RegistrationNetwork>(model_config_from_json(header["model"].dump()));

  const auto count = get<std::uint32_t>(in, path);
  auto& params = net->parameters();
  if (count != params.all().size())
    throw ConfigError("checkpoint holds " + std::to_string(count) + " parameters, model expects " +
                      std::to_string(params.all().size()));
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = get_string(in, get<std::uint32_t>(in, path), path);
    const auto ndim = get<std::uint32_t>(in, path);
    if (ndim > 8) throw IoError("corrupt checkpoint (rank): " + path.string());
    std::vector<int> shape(ndim);
    for (auto& s : shape) s = get<std::int32_t>(in, path);
    const auto n = get<std::uint64_t>(in, path);
    nn::Parameter* p = params.find(name);
    if (!p) throw ConfigError("checkpoint parameter " + name + " is not part of the model");
    if (p->shape != shape || p->value.size() != n) throw ConfigError("checkpoint parameter " + name + " has wrong shape");
    if (!in.read(reinterpret_cast<char*>(p->value.data()), static_cast<std::streamsize>(n * 4)))
      throw IoError("truncated checkpoint: " + path.string());
  }
  return net;
}

}  // namespace fusionreg
