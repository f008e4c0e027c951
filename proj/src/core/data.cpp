#include "fusionreg/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <set>
#include <sstream>

#include "fusionreg/error.hpp"
#include "fusionreg/nifti.hpp"
#include "json.hpp"

namespace fusionreg {

namespace fs = std::filesystem;

void normalize_min_max(Volume& v) {
  auto x = v.values();
  if (x.empty()) return;
  const auto [lo, hi] = std::minmax_element(x.begin(), x.end());
  const double mn = *lo, mx = *hi;
  if (!(mx > mn)) {
    std::fill(x.begin(), x.end(), 0.0f);
    return;
  }
  const double inv = 1.0 / (mx - mn);
  for (float& f : x) f = static_cast<float>((f - mn) * inv);
}

Volume load_volume(const fs::path& path) {
  Volume v = nifti::read_volume(path);
  if (!v.all_finite()) throw IoError(path.string() + ": volume contains non-finite values");
  normalize_min_max(v);
  return v;
}

Volume preprocess(const Volume& v, Dims target) {
  require(target.x > 0 && target.y > 0 && target.z > 0, "preprocess: empty target shape");
  const Dims src = v.dims();
  const Spacing sp = v.spacing();
  Volume iso = v;
  if (!(sp == Spacing{1.0, 1.0, 1.0})) {
    Dims d;
    d.x = std::max(1, static_cast<int>(std::lround(src.x * sp.x)));
    d.y = std::max(1, static_cast<int>(std::lround(src.y * sp.y)));
    d.z = std::max(1, static_cast<int>(std::lround(src.z * sp.z)));
    iso = Volume(d, Spacing{1.0, 1.0, 1.0});
    const auto in = v.values();
    for (int k = 0; k < d.z; ++k)
      for (int j = 0; j < d.y; ++j)
        for (int i = 0; i < d.x; ++i)
          iso.at(i, j, k) = kernels::sample<float>(in, src, static_cast<float>(i / sp.x),
                                                   static_cast<float>(j / sp.y), static_cast<float>(k / sp.z));
  }
  if (iso.dims() == target) return iso;
  const Dims d = iso.dims();
  // Source index = destination index + offset; offset > 0 crops, < 0 pads.
  const int off[3] = {(d.x - target.x) >= 0 ? (d.x - target.x) / 2 : -((target.x - d.x) / 2),
                      (d.y - target.y) >= 0 ? (d.y - target.y) / 2 : -((target.y - d.y) / 2),
                      (d.z - target.z) >= 0 ? (d.z - target.z) / 2 : -((target.z - d.z) / 2)};
  Volume out(target, Spacing{1.0, 1.0, 1.0});
  for (int k = 0; k < target.z; ++k) {
    const int sk = k + off[2];
    if (sk < 0 || sk >= d.z) continue;
    for (int j = 0; j < target.y; ++j) {
      const int sj = j + off[1];
      if (sj < 0 || sj >= d.y) continue;
      for (int i = 0; i < target.x; ++i) {
        const int si = i + off[0];
        if (si < 0 || si >= d.x) continue;
        out.at(i, j, k) = iso.at(si, sj, sk);
      }
    }
  }
  return out;
}

LandmarkSet read_landmarks(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open landmarks " + path.string());
  LandmarkSet s;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream ss(line);
    // A single header row such as "x,y,z" is tolerated.
    const auto first = line.find_first_not_of(" \t");
    if (lineno == 1 && first != std::string::npos && std::isalpha(static_cast<unsigned char>(line[first]))) continue;
    std::array<double, 3> p{};
    std::string extra;
    if (!(ss >> p[0] >> p[1] >> p[2]) || (ss >> extra))
      throw IoError(path.string() + ":" + std::to_string(lineno) + ": expected x,y,z");
    s.points.push_back(p);
  }
  return s;
}

void write_landmarks(const fs::path& path, const LandmarkSet& points) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write landmarks " + path.string());
  out << std::setprecision(17);
  for (const auto& p : points.points) out << p[0] << ',' << p[1] << ',' << p[2] << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

// ---------------------------------------------------------------------------
// Manifest

namespace {

fs::path resolve(const fs::path& base, const std::string& p) {
  fs::path q(p);
  return q.is_absolute() ? q : base / q;
}

std::string relative_to(const fs::path& base, const fs::path& path) {
  const fs::path p = fs::absolute(path).lexically_normal();
  const fs::path rel = p.lexically_relative(fs::absolute(base).lexically_normal());
  if (!rel.empty() && *rel.begin() != "..") return rel.generic_string();
  return p.generic_string();
}

void require_file(const fs::path& p) {
  if (!fs::exists(p)) throw IoError("missing file: " + p.string());
}

}  // namespace

void DatasetIndex::validate() const {
  std::set<std::string> ids, vols;
  for (const auto& e : entries) {
    if (!ids.insert(e.id).second) throw ConfigError("duplicate entry id: " + e.id);
    if (!vols.insert(e.volume.lexically_normal().string()).second)
      throw ConfigError("duplicate volume: " + e.volume.string());
  }
  std::set<std::string> pids;
  for (const auto& p : pairs) {
    if (p.moving >= entries.size() || p.fixed >= entries.size())
      throw ConfigError("pair " + p.id + " references a missing entry");
    if (p.moving == p.fixed) throw ConfigError("pair " + p.id + " uses the same entry twice");
    if (!pids.insert(p.id).second) throw ConfigError("duplicate pair id: " + p.id);
  }
}

DatasetIndex DatasetIndex::load(const fs::path& manifest) {
  std::ifstream in(manifest);
  if (!in) throw IoError("cannot open manifest " + manifest.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw ConfigError("malformed manifest " + manifest.string() + ": " + e.what());
  }
  const fs::path base = manifest.parent_path();
  DatasetIndex idx;
  try {
    if (!j.contains("entries") || !j["entries"].is_array()) throw ConfigError("manifest needs an 'entries' array");
    std::size_t n = 0;
    for (const auto& e : j["entries"]) {
      DatasetEntry d;
      d.id = e.contains("id") ? e["id"].get<std::string>() : std::to_string(n);
      d.volume = resolve(base, e.at("volume").get<std::string>());
      if (e.contains("labels") && !e["labels"].is_null()) d.labels = resolve(base, e["labels"].get<std::string>());
      if (e.contains("landmarks") && !e["landmarks"].is_null())
        d.landmarks = resolve(base, e["landmarks"].get<std::string>());
      if (e.contains("split")) d.split = e["split"].get<std::string>();
      idx.entries.push_back(std::move(d));
      ++n;
    }
    if (j.contains("pairs")) {
      std::size_t k = 0;
      for (const auto& p : j["pairs"]) {
        PairEntry q;
        q.id = p.contains("id") ? p["id"].get<std::string>() : "pair" + std::to_string(k);
        q.moving = p.at("moving").get<std::size_t>();
        q.fixed = p.at("fixed").get<std::size_t>();
        if (p.contains("true_field") && !p["true_field"].is_null())
          q.true_field = resolve(base, p["true_field"].get<std::string>());
        if (p.contains("split")) q.split = p["split"].get<std::string>();
        idx.pairs.push_back(std::move(q));
        ++k;
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed manifest " + manifest.string() + ": " + e.what());
  }
  idx.validate();
  for (const auto& e : idx.entries) {
    require_file(e.volume);
    if (e.labels) require_file(*e.labels);
    if (e.landmarks) require_file(*e.landmarks);
  }
  for (const auto& p : idx.pairs)
    if (p.true_field) require_file(*p.true_field);
  return idx;
}

void DatasetIndex::save(const fs::path& manifest) const {
  validate();
  const fs::path base = manifest.parent_path().empty() ? fs::path(".") : manifest.parent_path();
  nlohmann::json j;
  j["entries"] = nlohmann::json::array();
  for (const auto& e : entries) {
    nlohmann::json o = {{"id", e.id}, {"volume", relative_to(base, e.volume)}, {"split", e.split}};
    o["labels"] = e.labels ? nlohmann::json(relative_to(base, *e.labels)) : nlohmann::json(nullptr);
    o["landmarks"] = e.landmarks ? nlohmann::json(relative_to(base, *e.landmarks)) : nlohmann::json(nullptr);
    j["entries"].push_back(o);
  }
  j["pairs"] = nlohmann::json::array();
  for (const auto& p : pairs) {
    nlohmann::json o = {{"id", p.id}, {"moving", p.moving}, {"fixed", p.fixed}, {"split", p.split}};
    o["true_field"] = p.true_field ? nlohmann::json(relative_to(base, *p.true_field)) : nlohmann::json(nullptr);
    j["pairs"].push_back(o);
  }
  std::ofstream out(manifest);
  if (!out) throw IoError("cannot write manifest " + manifest.string());
  out << j.dump(2) << '\n';
}

std::vector<std::size_t> DatasetIndex::entries_in(const std::string& split) const {
  std::vector<std::size_t> r;
  for (std::size_t i = 0; i < entries.size(); ++i)
    if (entries[i].split == split) r.push_back(i);
  return r;
}

std::vector<std::size_t> DatasetIndex::pairs_in(const std::string& split) const {
  std::vector<std::size_t> r;
  for (std::size_t i = 0; i < pairs.size(); ++i)
    if (pairs[i].split == split) r.push_back(i);
  return r;
}

// ---------------------------------------------------------------------------
// Pair sampling

namespace {

// Fisher-Yates with an explicit bounded draw so the stream does not depend on
// the standard library's shuffle.
std::size_t bounded(std::mt19937_64& rng, std::size_t n) {
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
  std::uint64_t x;
  do x = rng();
  while (x >= limit);
  return static_cast<std::size_t>(x % n);
}

template <typename V>
void shuffle(V& v, std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[bounded(rng, i)]);
}

}  // namespace

std::vector<std::pair<std::size_t, std::size_t>> partition_pairs(std::size_t n, std::mt19937_64& rng) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  shuffle(order, rng);
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t i = 0; i + 1 < n; i += 2) out.emplace_back(order[i], order[i + 1]);
  return out;
}

PairSampler::PairSampler(const DatasetIndex& index, std::uint64_t seed, std::string split)
    : index_(index), split_(std::move(split)), rng_(seed) {
  if (index_.pairs_in(split_).empty() && index_.entries_in(split_).size() < 2)
    throw ContractError("pair sampling needs at least 2 entries in split '" + split_ + "'");
}

void PairSampler::refill() {
  queue_.clear();
  cursor_ = 0;
  const auto pairs = index_.pairs_in(split_);
  if (!pairs.empty()) {
    for (auto p : pairs) queue_.push_back(Draw{index_.pairs[p].moving, index_.pairs[p].fixed, p});
    shuffle(queue_, rng_);
  } else {
    const auto ids = index_.entries_in(split_);
    for (const auto& [a, b] : partition_pairs(ids.size(), rng_)) queue_.push_back(Draw{ids[a], ids[b], std::nullopt});
  }
  ++epoch_;
}

PairSampler::Draw PairSampler::next() {
  if (cursor_ >= queue_.size()) refill();
  return queue_[cursor_++];
}

std::pair<std::size_t, std::size_t> sample_pair(const DatasetIndex& index, std::uint64_t seed,
                                                const std::string& split) {
  PairSampler s(index, seed, split);
  const auto d = s.next();
  return {d.moving, d.fixed};
}

// ---------------------------------------------------------------------------
// Synthetic cases

namespace {

void gaussian_blur_axis(std::span<double> data, Dims d, int axis, const std::vector<double>& kernel) {
  const int r = static_cast<int>(kernel.size() / 2);
  const int n = d[axis];
  const std::size_t stride = axis == 0 ? 1 : (axis == 1 ? std::size_t(d.x) : std::size_t(d.x) * d.y);
  const int la = axis == 0 ? d.y : d.x;
  const int lb = axis == 2 ? d.y : d.z;
  std::vector<double> line(n);
  for (int b = 0; b < lb; ++b)
    for (int a = 0; a < la; ++a) {
      const std::size_t base = axis == 0 ? d.index(0, a, b) : (axis == 1 ? d.index(a, 0, b) : d.index(a, b, 0));
      for (int i = 0; i < n; ++i) line[i] = data[base + i * stride];
      for (int i = 0; i < n; ++i) {
        double s = 0.0;
        for (int t = -r; t <= r; ++t) s += kernel[t + r] * line[std::clamp(i + t, 0, n - 1)];
        data[base + i * stride] = s;
      }
    }
}

std::vector<double> gaussian_kernel(double sigma) {
  const int r = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(2 * r + 1);
  double s = 0.0;
  for (int t = -r; t <= r; ++t) s += k[t + r] = std::exp(-0.5 * t * t / (sigma * sigma));
  for (double& v : k) v /= s;
  return k;
}

double uniform(std::mt19937_64& rng, double lo, double hi) {
  // 53-bit mantissa draw; independent of the standard library's distributions.
  const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
  return lo + (hi - lo) * u;
}

double normal(std::mt19937_64& rng) {
  // Box-Muller.
  const double u1 = 1.0 - uniform(rng, 0.0, 1.0);
  const double u2 = uniform(rng, 0.0, 1.0);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

}  // namespace

DisplacementField make_smooth_field(Dims shape, double max_disp, double smoothness, std::mt19937_64& rng) {
  require(max_disp >= 0.0, "max_disp must be non-negative");
  require(smoothness > 0.0, "smoothness must be positive");
  // Noise is drawn on a grid padded by the kernel radius so every output voxel
  // averages fresh samples; clamping at a close border would leave the corners
  // dominated by a single sample.
  const auto kernel = gaussian_kernel(smoothness);
  const int r = static_cast<int>(kernel.size() / 2);
  const Dims padded{shape.x + 2 * r, shape.y + 2 * r, shape.z + 2 * r};
  const std::size_t n = shape.count();
  std::vector<double> noise(padded.count()), u(3 * n);
  for (int c = 0; c < 3; ++c) {
    for (double& x : noise) x = normal(rng);
    for (int axis = 0; axis < 3; ++axis) gaussian_blur_axis(noise, padded, axis, kernel);
    for (int k = 0; k < shape.z; ++k)
      for (int j = 0; j < shape.y; ++j)
        for (int i = 0; i < shape.x; ++i) u[c * n + shape.index(i, j, k)] = noise[padded.index(i + r, j + r, k + r)];
  }
  double maxabs = 0.0;
  for (double x : u) maxabs = std::max(maxabs, std::abs(x));
  const double scale = maxabs > 0.0 ? max_disp / maxabs : 0.0;
  std::vector<float> values(3 * n);
  for (std::size_t i = 0; i < values.size(); ++i) values[i] = static_cast<float>(u[i] * scale);
  return DisplacementField(shape, Spacing{}, std::move(values));
}

SyntheticCase make_synthetic(const SyntheticOptions& o) {
  const Dims d = o.shape;
  require(d.x % 16 == 0 && d.y % 16 == 0 && d.z % 16 == 0,
          "synthetic shape must be divisible by 16, got " + to_string(d));
  require(o.max_disp >= 0.0, "max_disp must be non-negative");
  require(o.num_classes >= 1, "num_classes must be >= 1");
  std::mt19937_64 rng(o.seed);

  struct Blob {
    double c[3];
    double sigma;
    double amp;
    int cls;
  };
  const int num_blobs = std::max(16, static_cast<int>(d.count() / 300));
  std::vector<Blob> blobs(num_blobs);
  for (int b = 0; b < num_blobs; ++b) {
    for (int a = 0; a < 3; ++a) blobs[b].c[a] = uniform(rng, 0.0, d[a] - 1.0);
    blobs[b].sigma = uniform(rng, 1.5, 3.5);
    blobs[b].amp = uniform(rng, 0.3, 1.0);
    blobs[b].cls = 1 + b % o.num_classes;
  }

  const std::size_t n = d.count();
  std::vector<double> img(n, 0.0), best(n, 0.0);
  std::vector<std::int32_t> owner(n, 0);
  for (const Blob& b : blobs) {
    const int r = static_cast<int>(std::ceil(3.0 * b.sigma));
    int lo[3], hi[3];
    for (int a = 0; a < 3; ++a) {
      lo[a] = std::max(0, static_cast<int>(std::floor(b.c[a])) - r);
      hi[a] = std::min(d[a] - 1, static_cast<int>(std::ceil(b.c[a])) + r);
    }
    const double inv = 1.0 / (2.0 * b.sigma * b.sigma);
    for (int k = lo[2]; k <= hi[2]; ++k)
      for (int j = lo[1]; j <= hi[1]; ++j)
        for (int i = lo[0]; i <= hi[0]; ++i) {
          const double dx = i - b.c[0], dy = j - b.c[1], dz = k - b.c[2];
          const double v = b.amp * std::exp(-(dx * dx + dy * dy + dz * dz) * inv);
          const std::size_t idx = d.index(i, j, k);
          img[idx] += v;
          if (v > best[idx]) {
            best[idx] = v;
            owner[idx] = b.cls;
          }
        }
  }

  SyntheticCase c;
  std::vector<float> mv(n);
  for (std::size_t i = 0; i < n; ++i) mv[i] = static_cast<float>(img[i]);
  c.moving = Volume(d, Spacing{}, std::move(mv));
  normalize_min_max(c.moving);

  std::vector<std::int32_t> lab(n, 0);
  for (std::size_t i = 0; i < n; ++i) lab[i] = best[i] > 0.25 ? owner[i] : 0;
  c.moving_labels = LabelMap(d, Spacing{}, std::move(lab));

  c.true_field = make_smooth_field(d, o.max_disp, o.smoothness, rng);
  c.fixed = warp(c.moving, c.true_field);
  c.fixed_labels = warp_nearest(c.moving_labels, c.true_field);

  const auto f64 = cast<double>(c.true_field);
  const double margin = std::ceil(o.max_disp) + 2.0;
  for (const Blob& b : blobs) {
    if (static_cast<int>(c.moving_landmarks.points.size()) >= o.max_landmarks) break;
    bool inside = true;
    for (int a = 0; a < 3; ++a) inside = inside && b.c[a] >= margin && b.c[a] <= d[a] - 1 - margin;
    if (!inside) continue;
    std::array<double, 3> p{b.c[0], b.c[1], b.c[2]};
    for (int it = 0; it < 100; ++it) {
      std::array<double, 3> q;
      for (int a = 0; a < 3; ++a) q[a] = b.c[a] - kernels::sample<double>(f64.component(a), d, p[0], p[1], p[2]);
      const double step = std::abs(q[0] - p[0]) + std::abs(q[1] - p[1]) + std::abs(q[2] - p[2]);
      p = q;
      if (step < 1e-12) break;
    }
    c.moving_landmarks.points.push_back({b.c[0], b.c[1], b.c[2]});
    c.fixed_landmarks.points.push_back(p);
  }
  return c;
}

}  // namespace fusionreg
