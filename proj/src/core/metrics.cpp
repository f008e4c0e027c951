#include "fusionreg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <set>

#include "fusionreg/error.hpp"
#include "json.hpp"

namespace fusionreg {

DiceResult dice(const LabelMap& a, const LabelMap& b, const std::vector<std::int32_t>& classes) {
  require(a.dims() == b.dims(), "dice: shape mismatch " + to_string(a.dims()) + " vs " + to_string(b.dims()));
  std::vector<std::int32_t> cls = classes;
  if (cls.empty()) {
    std::set<std::int32_t> u;
    for (auto c : a.classes()) u.insert(c);
    for (auto c : b.classes()) u.insert(c);
    cls.assign(u.begin(), u.end());
  }
  std::map<std::int32_t, std::size_t> na, nb, both;
  const auto va = a.values();
  const auto vb = b.values();
  for (std::size_t i = 0; i < va.size(); ++i) {
    ++na[va[i]];
    ++nb[vb[i]];
    if (va[i] == vb[i]) ++both[va[i]];
  }
  DiceResult r;
  double sum = 0.0;
  std::size_t present = 0;
  for (auto c : cls) {
    const std::size_t sa = na.count(c) ? na[c] : 0;
    const std::size_t sb = nb.count(c) ? nb[c] : 0;
    if (sa + sb == 0) continue;
    const std::size_t inter = both.count(c) ? both[c] : 0;
    const double d = 2.0 * static_cast<double>(inter) / static_cast<double>(sa + sb);
    r.per_class[c] = d;
    sum += d;
    ++present;
  }
  if (present > 0) r.mean = sum / static_cast<double>(present);
  return r;
}

double tre(const LandmarkSet& fixed_points, const LandmarkSet& moving_points, const DisplacementField& phi,
           Spacing spacing) {
  require(fixed_points.points.size() == moving_points.points.size(), "tre: landmark counts differ");
  require(!fixed_points.points.empty(), "tre: no landmarks");
  const Dims d = phi.dims();
  const auto f64 = cast<double>(phi);
  double total = 0.0;
  for (std::size_t k = 0; k < fixed_points.points.size(); ++k) {
    const auto& pf = fixed_points.points[k];
    const auto& pm = moving_points.points[k];
    double vox[3];
    for (int a = 0; a < 3; ++a) {
      vox[a] = pf[a] / spacing[a];
      if (!(vox[a] >= 0.0 && vox[a] <= static_cast<double>(d[a] - 1)))
        throw ContractError("tre: landmark " + std::to_string(k) + " lies outside the grid");
    }
    double sq = 0.0;
    for (int a = 0; a < 3; ++a) {
      const double u = kernels::sample<double>(f64.component(a), d, vox[0], vox[1], vox[2]);
      const double mapped = pf[a] + u * spacing[a];
      sq += (pm[a] - mapped) * (pm[a] - mapped);
    }
    total += std::sqrt(sq);
  }
  return total / static_cast<double>(fixed_points.points.size());
}

std::vector<std::uint8_t> boundary_mask(const std::vector<std::uint8_t>& mask, Dims d) {
  require(mask.size() == d.count(), "boundary_mask: size mismatch");
  std::vector<std::uint8_t> out(mask.size(), 0);
  for (int k = 0; k < d.z; ++k)
    for (int j = 0; j < d.y; ++j)
      for (int i = 0; i < d.x; ++i) {
        if (!mask[d.index(i, j, k)]) continue;
        const int c[3] = {i, j, k};
        bool edge = false;
        for (int a = 0; a < 3 && !edge; ++a)
          for (int s : {-1, 1}) {
            int n[3] = {c[0], c[1], c[2]};
            n[a] += s;
            if (n[a] < 0 || n[a] >= d[a] || !mask[d.index(n[0], n[1], n[2])]) {
              edge = true;
              break;
            }
          }
        out[d.index(i, j, k)] = edge ? 1 : 0;
      }
  return out;
}

namespace {

// Lower envelope of parabolas w*(p-q)^2 + f(q) over finite samples.
void edt_line(const double* f, double* out, int n, double w, std::vector<int>& v, std::vector<double>& z) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  v.resize(n);
  z.resize(n + 1);
  int k = -1;
  for (int q = 0; q < n; ++q) {
    if (!std::isfinite(f[q])) continue;
    if (k < 0) {
      k = 0;
      v[0] = q;
      z[0] = -inf;
      z[1] = inf;
      continue;
    }
    const auto cross = [&](int p) { return ((f[q] + w * q * q) - (f[p] + w * p * p)) / (2.0 * w * (q - p)); };
    double s = cross(v[k]);
    while (s <= z[k]) {
      --k;
      s = cross(v[k]);
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = inf;
  }
  if (k < 0) {
    for (int p = 0; p < n; ++p) out[p] = inf;
    return;
  }
  int j = 0;
  for (int p = 0; p < n; ++p) {
    while (z[j + 1] < p) ++j;
    const double dq = p - v[j];
    out[p] = w * dq * dq + f[v[j]];
  }
}

}  // namespace

std::vector<double> squared_distance_transform(const std::vector<std::uint8_t>& mask, Dims d, Spacing spacing) {
  require(mask.size() == d.count(), "distance transform: size mismatch");
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> g(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) g[i] = mask[i] ? 0.0 : inf;
  std::vector<int> v;
  std::vector<double> z;
  for (int axis = 0; axis < 3; ++axis) {
    const int n = d[axis];
    const double w = spacing[axis] * spacing[axis];
    const std::size_t stride = axis == 0 ? 1 : (axis == 1 ? std::size_t(d.x) : std::size_t(d.x) * d.y);
    std::vector<double> in(n), out(n);
    const int la = axis == 0 ? d.y : d.x;
    const int lb = axis == 2 ? d.y : d.z;
    for (int b = 0; b < lb; ++b)
      for (int a = 0; a < la; ++a) {
        const std::size_t base = axis == 0 ? d.index(0, a, b) : (axis == 1 ? d.index(a, 0, b) : d.index(a, b, 0));
        for (int i = 0; i < n; ++i) in[i] = g[base + i * stride];
        edt_line(in.data(), out.data(), n, w, v, z);
        for (int i = 0; i < n; ++i) g[base + i * stride] = out[i];
      }
  }
  return g;
}

double percentile(std::vector<double> values, double q) {
  require(!values.empty(), "percentile of an empty set");
  require(q >= 0.0 && q <= 100.0, "percentile: q outside [0, 100]");
  std::sort(values.begin(), values.end());
  const double pos = q / 100.0 * static_cast<double>(values.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

double hd95(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b, Dims d, Spacing spacing) {
  require(a.size() == d.count() && b.size() == d.count(), "hd95: mask size mismatch");
  const auto nonempty = [](const std::vector<std::uint8_t>& m) {
    return std::any_of(m.begin(), m.end(), [](std::uint8_t x) { return x != 0; });
  };
  if (!nonempty(a) || !nonempty(b)) throw ContractError("hd95: empty mask");
  const auto ba = boundary_mask(a, d);
  const auto bb = boundary_mask(b, d);
  const auto da = squared_distance_transform(ba, d, spacing);
  const auto db = squared_distance_transform(bb, d, spacing);
  std::vector<double> pooled;
  for (std::size_t i = 0; i < ba.size(); ++i) {
    if (ba[i]) pooled.push_back(std::sqrt(db[i]));
    if (bb[i]) pooled.push_back(std::sqrt(da[i]));
  }
  return percentile(std::move(pooled), 95.0);
}

double hd95(const LabelMap& a, const LabelMap& b, Spacing spacing) {
  require(a.dims() == b.dims(), "hd95: shape mismatch");
  std::vector<std::uint8_t> ma(a.values().size()), mb(b.values().size());
  for (std::size_t i = 0; i < ma.size(); ++i) {
    ma[i] = a.values()[i] != 0;
    mb[i] = b.values()[i] != 0;
  }
  return hd95(ma, mb, a.dims(), spacing);
}

double ndv(const DisplacementField& phi) {
  const Dims d = phi.dims();
  require(d.x >= 2 && d.y >= 2 && d.z >= 2, "ndv: every axis needs at least 2 voxels");
  const auto f64 = cast<double>(phi);
  std::vector<double> acc(d.count(), 0.0);
  for (int s = 0; s < 8; ++s) {
    const auto det = jacobian_determinants(f64, Stencil{s});
    const auto v = det.values();
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += std::max(0.0, -v[i]);
  }
  double total = 0.0;
  for (double x : acc) total += x / 8.0;
  return 100.0 * total / static_cast<double>(d.count());
}

double endpoint_error(const DisplacementField& predicted, const DisplacementField& truth, int margin) {
  require(predicted.dims() == truth.dims(), "endpoint_error: shape mismatch");
  const Dims d = truth.dims();
  require(margin >= 0 && 2 * margin < d.x && 2 * margin < d.y && 2 * margin < d.z,
          "endpoint_error: margin leaves no voxels");
  double total = 0.0;
  std::size_t count = 0;
  for (int k = margin; k < d.z - margin; ++k)
    for (int j = margin; j < d.y - margin; ++j)
      for (int i = margin; i < d.x - margin; ++i) {
        const std::size_t v = d.index(i, j, k);
        double sq = 0.0;
        for (int a = 0; a < 3; ++a) {
          const double e = static_cast<double>(predicted.component(a)[v]) - truth.component(a)[v];
          sq += e * e;
        }
        total += std::sqrt(sq);
        ++count;
      }
  return total / static_cast<double>(count);
}

namespace {

template <typename T>
void put(nlohmann::json& j, const char* key, const std::optional<T>& v) {
  j[key] = v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

std::optional<double> get(const nlohmann::json& j, const char* key) {
  if (!j.contains(key) || j[key].is_null()) return std::nullopt;
  return j[key].get<double>();
}

nlohmann::json report_json(const MetricsReport& r) {
  nlohmann::json j;
  j["pair_id"] = r.pair_id;
  put(j, "dice_mean", r.dice_mean);
  nlohmann::json per = nlohmann::json::object();
  for (const auto& [c, v] : r.dice_per_class) per[std::to_string(c)] = v;
  j["dice_per_class"] = per;
  put(j, "tre_mm", r.tre_mm);
  put(j, "hd95_mm", r.hd95_mm);
  put(j, "ndv_percent", r.ndv_percent);
  if (r.epe_voxels) j["epe_voxels"] = *r.epe_voxels;
  if (r.tre_identity_mm) j["tre_identity_mm"] = *r.tre_identity_mm;
  return j;
}

}  // namespace

std::string MetricsReport::to_json() const { return report_json(*this).dump(2); }

MetricsReport metrics_report_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const std::exception& e) {
    throw IoError(std::string("metrics report: ") + e.what());
  }
  MetricsReport r;
  r.pair_id = j.value("pair_id", "");
  r.dice_mean = get(j, "dice_mean");
  if (j.contains("dice_per_class"))
    for (const auto& [k, v] : j["dice_per_class"].items()) r.dice_per_class[std::stoi(k)] = v.get<double>();
  r.tre_mm = get(j, "tre_mm");
  r.hd95_mm = get(j, "hd95_mm");
  r.ndv_percent = get(j, "ndv_percent");
  r.epe_voxels = get(j, "epe_voxels");
  r.tre_identity_mm = get(j, "tre_identity_mm");
  return r;
}

std::map<std::string, AggregateEntry> aggregate(const std::vector<MetricsReport>& reports) {
  std::map<std::string, std::vector<double>> columns;
  for (const auto& r : reports) {
    if (r.dice_mean) columns["dice"].push_back(*r.dice_mean);
    if (r.tre_mm) columns["tre_mm"].push_back(*r.tre_mm);
    if (r.hd95_mm) columns["hd95_mm"].push_back(*r.hd95_mm);
    if (r.ndv_percent) columns["ndv_percent"].push_back(*r.ndv_percent);
    if (r.epe_voxels) columns["epe_voxels"].push_back(*r.epe_voxels);
    if (r.tre_identity_mm) columns["tre_identity_mm"].push_back(*r.tre_identity_mm);
  }
  std::map<std::string, AggregateEntry> out;
  for (const auto& [name, xs] : columns) {
    AggregateEntry e;
    e.count = xs.size();
    for (double x : xs) e.mean += x;
    e.mean /= static_cast<double>(xs.size());
    for (double x : xs) e.std += (x - e.mean) * (x - e.mean);
    e.std = std::sqrt(e.std / static_cast<double>(xs.size()));
    out[name] = e;
  }
  return out;
}

std::string format_mean_std(const AggregateEntry& e, int decimals) {
  char buf[96];
  std::snprintf(buf, sizeof buf, "%.*f \xC2\xB1 %.*f", decimals, e.mean, decimals, e.std);
  return buf;
}

std::string aggregate_json(const std::vector<MetricsReport>& reports) {
  nlohmann::json j;
  j["pairs"] = nlohmann::json::array();
  for (const auto& r : reports) j["pairs"].push_back(report_json(r));
  nlohmann::json agg = nlohmann::json::object();
  for (const auto& [name, e] : aggregate(reports))
    agg[name] = {{"mean", e.mean}, {"std", e.std}, {"count", e.count}, {"formatted", format_mean_std(e)}};
  j["aggregate"] = agg;
  return j.dump(2);
}

}  // namespace fusionreg
