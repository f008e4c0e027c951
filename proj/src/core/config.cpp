#include "fusionreg/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include "fusionreg/error.hpp"

namespace fusionreg {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

// Shortest text that reads back to the same value of the stored type.
template <typename T>
std::string fmt(T v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

double to_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError(key + ": expected a number, got '" + v + "'");
  return out;
}

long long to_int(const std::string& key, const std::string& v) {
  long long out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError(key + ": expected an integer, got '" + v + "'");
  return out;
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size())
    throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

std::vector<int> to_int_list(const std::string& key, const std::string& v) {
  std::vector<int> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(static_cast<int>(to_int(key, trim(item))));
  if (out.empty()) throw ConfigError(key + ": empty list");
  return out;
}

std::string from_int_list(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

struct Field {
  const char* key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      {"model.num_scales", [](RunConfig& c, const std::string& v) { c.model.num_scales = int(to_int("model.num_scales", v)); },
       [](const RunConfig& c) { return std::to_string(c.model.num_scales); }},
      {"model.encoder_channels",
       [](RunConfig& c, const std::string& v) { c.model.encoder_channels = to_int_list("model.encoder_channels", v); },
       [](const RunConfig& c) { return from_int_list(c.model.encoder_channels); }},
      {"model.aux_decoder_channels",
       [](RunConfig& c, const std::string& v) {
         c.model.aux_decoder_channels = to_int_list("model.aux_decoder_channels", v);
       },
       [](const RunConfig& c) { return from_int_list(c.model.aux_decoder_channels); }},
      {"model.msfb_bottleneck_ratio",
       [](RunConfig& c, const std::string& v) {
         c.model.msfb_bottleneck_ratio = int(to_int("model.msfb_bottleneck_ratio", v));
       },
       [](const RunConfig& c) { return std::to_string(c.model.msfb_bottleneck_ratio); }},
      {"model.negative_slope",
       [](RunConfig& c, const std::string& v) { c.model.negative_slope = float(to_double("model.negative_slope", v)); },
       [](const RunConfig& c) { return fmt(c.model.negative_slope); }},
      {"model.head_init_zero",
       [](RunConfig& c, const std::string& v) { c.model.head_init_zero = to_bool("model.head_init_zero", v); },
       [](const RunConfig& c) { return std::string(c.model.head_init_zero ? "true" : "false"); }},
      {"model.composition",
       [](RunConfig& c, const std::string& v) {
         if (v == "compose")
           c.model.composition = CompositionMode::Compose;
         else if (v == "add")
           c.model.composition = CompositionMode::Add;
         else
           throw ConfigError("model.composition: expected compose or add, got '" + v + "'");
       },
       [](const RunConfig& c) {
         return std::string(c.model.composition == CompositionMode::Compose ? "compose" : "add");
       }},
      {"model.init_seed", [](RunConfig& c, const std::string& v) { c.model.init_seed = to_u64("model.init_seed", v); },
       [](const RunConfig& c) { return std::to_string(c.model.init_seed); }},

      {"loss.alpha", [](RunConfig& c, const std::string& v) { c.loss.alpha = to_double("loss.alpha", v); },
       [](const RunConfig& c) { return fmt(c.loss.alpha); }},
      {"loss.beta", [](RunConfig& c, const std::string& v) { c.loss.beta = to_double("loss.beta", v); },
       [](const RunConfig& c) { return fmt(c.loss.beta); }},
      {"loss.lambda", [](RunConfig& c, const std::string& v) { c.loss.lambda = to_double("loss.lambda", v); },
       [](const RunConfig& c) { return fmt(c.loss.lambda); }},
      {"loss.ncc_window", [](RunConfig& c, const std::string& v) { c.loss.ncc_window = int(to_int("loss.ncc_window", v)); },
       [](const RunConfig& c) { return std::to_string(c.loss.ncc_window); }},
      {"loss.epsilon", [](RunConfig& c, const std::string& v) { c.loss.epsilon = to_double("loss.epsilon", v); },
       [](const RunConfig& c) { return fmt(c.loss.epsilon); }},
      {"loss.squared_ncc", [](RunConfig& c, const std::string& v) { c.loss.squared_ncc = to_bool("loss.squared_ncc", v); },
       [](const RunConfig& c) { return std::string(c.loss.squared_ncc ? "true" : "false"); }},

      {"optimizer.name", [](RunConfig& c, const std::string& v) { c.optimizer.name = v; },
       [](const RunConfig& c) { return c.optimizer.name; }},
      {"optimizer.learning_rate",
       [](RunConfig& c, const std::string& v) { c.optimizer.learning_rate = to_double("optimizer.learning_rate", v); },
       [](const RunConfig& c) { return fmt(c.optimizer.learning_rate); }},
      {"optimizer.iterations",
       [](RunConfig& c, const std::string& v) { c.optimizer.iterations = to_int("optimizer.iterations", v); },
       [](const RunConfig& c) { return std::to_string(c.optimizer.iterations); }},
      {"optimizer.batch_size",
       [](RunConfig& c, const std::string& v) { c.optimizer.batch_size = int(to_int("optimizer.batch_size", v)); },
       [](const RunConfig& c) { return std::to_string(c.optimizer.batch_size); }},
      {"optimizer.beta1", [](RunConfig& c, const std::string& v) { c.optimizer.beta1 = to_double("optimizer.beta1", v); },
       [](const RunConfig& c) { return fmt(c.optimizer.beta1); }},
      {"optimizer.beta2", [](RunConfig& c, const std::string& v) { c.optimizer.beta2 = to_double("optimizer.beta2", v); },
       [](const RunConfig& c) { return fmt(c.optimizer.beta2); }},
      {"optimizer.epsilon",
       [](RunConfig& c, const std::string& v) { c.optimizer.epsilon = to_double("optimizer.epsilon", v); },
       [](const RunConfig& c) { return fmt(c.optimizer.epsilon); }},
      {"optimizer.checkpoint_every",
       [](RunConfig& c, const std::string& v) {
         c.optimizer.checkpoint_every = to_int("optimizer.checkpoint_every", v);
       },
       [](const RunConfig& c) { return std::to_string(c.optimizer.checkpoint_every); }},

      {"data.manifest", [](RunConfig& c, const std::string& v) { c.data.manifest = v; },
       [](const RunConfig& c) { return c.data.manifest.string(); }},
      {"data.target_shape", [](RunConfig& c, const std::string& v) { c.data.target_shape = parse_shape(v); },
       [](const RunConfig& c) { return format_shape(c.data.target_shape); }},
      {"data.seed", [](RunConfig& c, const std::string& v) { c.data.seed = to_u64("data.seed", v); },
       [](const RunConfig& c) { return std::to_string(c.data.seed); }},
      {"data.normalization", [](RunConfig& c, const std::string& v) { c.data.normalization = v; },
       [](const RunConfig& c) { return c.data.normalization; }},
      {"data.split", [](RunConfig& c, const std::string& v) { c.data.split = v; },
       [](const RunConfig& c) { return c.data.split; }},
      {"data.augment_flips",
       [](RunConfig& c, const std::string& v) { c.data.augment_flips = to_bool("data.augment_flips", v); },
       [](const RunConfig& c) { return std::string(c.data.augment_flips ? "true" : "false"); }},
      {"data.augment_swap",
       [](RunConfig& c, const std::string& v) { c.data.augment_swap = to_bool("data.augment_swap", v); },
       [](const RunConfig& c) { return std::string(c.data.augment_swap ? "true" : "false"); }},

      {"output.directory", [](RunConfig& c, const std::string& v) { c.output.directory = v; },
       [](const RunConfig& c) { return c.output.directory.string(); }},

      {"run.deterministic", [](RunConfig& c, const std::string& v) { c.deterministic = to_bool("run.deterministic", v); },
       [](const RunConfig& c) { return std::string(c.deterministic ? "true" : "false"); }},
      {"run.threads", [](RunConfig& c, const std::string& v) { c.threads = int(to_int("run.threads", v)); },
       [](const RunConfig& c) { return std::to_string(c.threads); }},
  };
  return table;
}

}  // namespace

Dims parse_shape(const std::string& text) {
  std::string s = text;
  for (char& ch : s)
    if (ch == 'x' || ch == 'X' || ch == ',') ch = ' ';
  std::istringstream ss(s);
  Dims d;
  std::string rest;
  if (!(ss >> d.x >> d.y >> d.z) || (ss >> rest)) throw ConfigError("expected a shape like 32x48x32, got '" + text + "'");
  if (d.x <= 0 || d.y <= 0 || d.z <= 0) throw ConfigError("shape axes must be positive: '" + text + "'");
  return d;
}

std::string format_shape(const Dims& d) {
  return std::to_string(d.x) + "x" + std::to_string(d.y) + "x" + std::to_string(d.z);
}

void set_config_value(RunConfig& config, const std::string& key, const std::string& value) {
  for (const auto& f : fields())
    if (key == f.key) {
      f.set(config, value);
      return;
    }
  throw ConfigError("unknown config key '" + key + "'");
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& f : fields()) keys.emplace_back(f.key);
  return keys;
}

RunConfig parse_run_config(const std::string& text) {
  RunConfig c;
  std::istringstream in(text);
  std::string line;
  std::set<std::string> seen;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (!seen.insert(key).second) throw ConfigError("line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
    try {
      set_config_value(c, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  c.validate(false);
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_run_config(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

std::string to_text(const RunConfig& config) {
  std::string out;
  for (const auto& f : fields()) out += std::string(f.key) + " = " + f.get(config) + "\n";
  return out;
}

void RunConfig::validate(bool check_paths) const {
  model.validate();
  loss.validate();
  if (optimizer.name != "adam") throw ConfigError("optimizer.name: only 'adam' is supported");
  if (!(optimizer.learning_rate > 0)) throw ConfigError("optimizer.learning_rate must be positive");
  if (optimizer.iterations < 1) throw ConfigError("optimizer.iterations must be >= 1");
  if (optimizer.batch_size < 1) throw ConfigError("optimizer.batch_size must be >= 1");
  if (!(optimizer.beta1 >= 0 && optimizer.beta1 < 1 && optimizer.beta2 >= 0 && optimizer.beta2 < 1))
    throw ConfigError("optimizer betas must lie in [0, 1)");
  if (!(optimizer.epsilon > 0)) throw ConfigError("optimizer.epsilon must be positive");
  if (optimizer.checkpoint_every < 0) throw ConfigError("optimizer.checkpoint_every must be >= 0");
  if (data.normalization != "minmax") throw ConfigError("data.normalization: only 'minmax' is supported");
  const int m = 1 << (model.num_scales - 1);
  const Dims t = data.target_shape;
  if (t.x % m || t.y % m || t.z % m)
    throw ConfigError("data.target_shape " + format_shape(t) + " must be divisible by " + std::to_string(m));
  if (threads < 0) throw ConfigError("run.threads must be >= 0");
  if (check_paths) {
    if (data.manifest.empty()) throw ConfigError("data.manifest is required");
    if (!std::filesystem::exists(data.manifest)) throw ConfigError("data.manifest not found: " + data.manifest.string());
  }
}

}  // namespace fusionreg
