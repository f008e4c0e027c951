#include "fusionreg/nifti.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <memory>

#include "fusionreg/error.hpp"
#include "json.hpp"

namespace fusionreg::nifti {
namespace {

constexpr int kHeaderSize = 348;
constexpr int kVoxOffset = 352;

// Byte offsets into the NIfTI-1 header.
constexpr int kOffDim = 40;
constexpr int kOffIntentCode = 68;
constexpr int kOffDatatype = 70;
constexpr int kOffBitpix = 72;
constexpr int kOffPixdim = 76;
constexpr int kOffVoxOffset = 108;
constexpr int kOffSclSlope = 112;
constexpr int kOffSclInter = 116;
constexpr int kOffXyztUnits = 123;
constexpr int kOffDescrip = 148;
constexpr int kOffQformCode = 252;
constexpr int kOffSformCode = 254;
constexpr int kOffSrowX = 280;
constexpr int kOffMagic = 344;

struct GzCloser {
  void operator()(gzFile f) const {
    if (f) gzclose(f);
  }
};
using GzHandle = std::unique_ptr<gzFile_s, GzCloser>;

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

template <typename V>
V load(const unsigned char* p, bool swap) {
  V v;
  std::memcpy(&v, p, sizeof(V));
  if (swap && sizeof(V) > 1) {
    unsigned char b[sizeof(V)];
    std::memcpy(b, &v, sizeof(V));
    std::reverse(b, b + sizeof(V));
    std::memcpy(&v, b, sizeof(V));
  }
  return v;
}

template <typename V>
void store(unsigned char* p, V v) {
  std::memcpy(p, &v, sizeof(V));
}

int bytes_per_voxel(DataType t) {
  switch (t) {
    case DataType::UInt8:
    case DataType::Int8:
      return 1;
    case DataType::Int16:
    case DataType::UInt16:
      return 2;
    case DataType::Int32:
    case DataType::UInt32:
    case DataType::Float32:
      return 4;
    case DataType::Float64:
      return 8;
  }
  throw IoError("unsupported NIfTI datatype " + std::to_string(static_cast<int>(t)));
}

template <typename V>
void decode(const unsigned char* raw, std::size_t count, bool swap, std::vector<double>& out) {
  for (std::size_t i = 0; i < count; ++i) out[i] = static_cast<double>(load<V>(raw + i * sizeof(V), swap));
}

template <typename V>
void encode(const std::vector<double>& in, unsigned char* raw) {
  for (std::size_t i = 0; i < in.size(); ++i) {
    V v;
    if constexpr (std::is_integral_v<V>) {
      const double r = std::round(in[i]);
      v = static_cast<V>(std::clamp(r, static_cast<double>(std::numeric_limits<V>::lowest()),
                                    static_cast<double>(std::numeric_limits<V>::max())));
    } else {
      v = static_cast<V>(in[i]);
    }
    store(raw + i * sizeof(V), v);
  }
}

void read_exact(gzFile f, void* buffer, std::size_t bytes, const std::filesystem::path& path) {
  auto* dst = static_cast<unsigned char*>(buffer);
  while (bytes > 0) {
    const unsigned chunk = static_cast<unsigned>(std::min<std::size_t>(bytes, 1u << 30));
    const int got = gzread(f, dst, chunk);
    if (got <= 0) throw IoError("truncated or corrupt NIfTI file: " + path.string());
    dst += got;
    bytes -= static_cast<std::size_t>(got);
  }
}

}  // namespace

std::size_t Image::voxel_count() const {
  std::size_t n = 1;
  for (int i = 0; i < ndim; ++i) n *= static_cast<std::size_t>(dim[i]);
  return n;
}

Image read(const std::filesystem::path& path) {
  GzHandle f(gzopen(path.string().c_str(), "rb"));
  if (!f) throw IoError("cannot open NIfTI file: " + path.string());
  unsigned char hdr[kHeaderSize];
  read_exact(f.get(), hdr, kHeaderSize, path);

  bool swap = false;
  std::int32_t sizeof_hdr = load<std::int32_t>(hdr, false);
  if (sizeof_hdr != kHeaderSize) {
    swap = true;
    sizeof_hdr = load<std::int32_t>(hdr, true);
    if (sizeof_hdr != kHeaderSize) throw IoError("not a NIfTI-1 file (bad header size): " + path.string());
  }
  if (std::memcmp(hdr + kOffMagic, "n+1", 4) != 0)
    throw IoError("only single-file NIfTI-1 (n+1) is supported: " + path.string());

  Image img;
  const std::int16_t ndim = load<std::int16_t>(hdr + kOffDim, swap);
  if (ndim < 1 || ndim > 7) throw IoError("invalid NIfTI dimension count in " + path.string());
  img.ndim = ndim;
  for (int i = 0; i < 7; ++i) {
    const std::int16_t d = load<std::int16_t>(hdr + kOffDim + 2 * (i + 1), swap);
    img.dim[i] = i < ndim ? d : 1;
    if (i < ndim && d < 1) throw IoError("invalid NIfTI dimension size in " + path.string());
    const float pd = load<float>(hdr + kOffPixdim + 4 * (i + 1), swap);
    img.pixdim[i] = (std::isfinite(pd) && pd != 0.0f) ? std::fabs(pd) : 1.0f;
  }
  img.intent_code = load<std::int16_t>(hdr + kOffIntentCode, swap);
  img.datatype = static_cast<DataType>(load<std::int16_t>(hdr + kOffDatatype, swap));
  const int bpv = bytes_per_voxel(img.datatype);

  const float vox_offset = load<float>(hdr + kOffVoxOffset, swap);
  if (!(vox_offset >= kHeaderSize)) throw IoError("invalid vox_offset in " + path.string());
  std::vector<unsigned char> skip(static_cast<std::size_t>(vox_offset) - kHeaderSize);
  if (!skip.empty()) read_exact(f.get(), skip.data(), skip.size(), path);

  const std::size_t count = img.voxel_count();
  std::vector<unsigned char> raw(count * bpv);
  read_exact(f.get(), raw.data(), raw.size(), path);
  img.data.resize(count);
  switch (img.datatype) {
    case DataType::UInt8: decode<std::uint8_t>(raw.data(), count, swap, img.data); break;
    case DataType::Int8: decode<std::int8_t>(raw.data(), count, swap, img.data); break;
    case DataType::Int16: decode<std::int16_t>(raw.data(), count, swap, img.data); break;
    case DataType::UInt16: decode<std::uint16_t>(raw.data(), count, swap, img.data); break;
    case DataType::Int32: decode<std::int32_t>(raw.data(), count, swap, img.data); break;
    case DataType::UInt32: decode<std::uint32_t>(raw.data(), count, swap, img.data); break;
    case DataType::Float32: decode<float>(raw.data(), count, swap, img.data); break;
    case DataType::Float64: decode<double>(raw.data(), count, swap, img.data); break;
  }

  const float slope = load<float>(hdr + kOffSclSlope, swap);
  const float inter = load<float>(hdr + kOffSclInter, swap);
  if (std::isfinite(slope) && slope != 0.0f && !(slope == 1.0f && inter == 0.0f)) {
    const double inter_d = std::isfinite(inter) ? inter : 0.0;
    for (double& v : img.data) v = v * slope + inter_d;
  }
  return img;
}

void write(const std::filesystem::path& path, const Image& image) {
  require(image.ndim >= 1 && image.ndim <= 7, "NIfTI write: invalid ndim");
  require(image.data.size() == image.voxel_count(), "NIfTI write: data size does not match dims");
  for (int i = 0; i < image.ndim; ++i)
    require(image.dim[i] >= 1 && image.dim[i] <= std::numeric_limits<std::int16_t>::max(),
            "NIfTI write: dimension out of range");

  unsigned char hdr[kVoxOffset] = {};
  store<std::int32_t>(hdr, kHeaderSize);
  store<std::int16_t>(hdr + kOffDim, static_cast<std::int16_t>(image.ndim));
  for (int i = 0; i < 7; ++i) {
    store<std::int16_t>(hdr + kOffDim + 2 * (i + 1), static_cast<std::int16_t>(i < image.ndim ? image.dim[i] : 1));
    store<float>(hdr + kOffPixdim + 4 * (i + 1), image.pixdim[i]);
  }
  store<float>(hdr + kOffPixdim, 1.0f);  // qfac
  store<std::int16_t>(hdr + kOffIntentCode, image.intent_code);
  store<std::int16_t>(hdr + kOffDatatype, static_cast<std::int16_t>(image.datatype));
  const int bpv = bytes_per_voxel(image.datatype);
  store<std::int16_t>(hdr + kOffBitpix, static_cast<std::int16_t>(8 * bpv));
  store<float>(hdr + kOffVoxOffset, static_cast<float>(kVoxOffset));
  store<float>(hdr + kOffSclSlope, 1.0f);
  store<float>(hdr + kOffSclInter, 0.0f);
  hdr[kOffXyztUnits] = 2;  // mm
  std::strncpy(reinterpret_cast<char*>(hdr + kOffDescrip), "fusionreg", 79);
  store<std::int16_t>(hdr + kOffQformCode, 0);
  store<std::int16_t>(hdr + kOffSformCode, 1);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 4; ++c)
      store<float>(hdr + kOffSrowX + 16 * r + 4 * c, (r == c) ? image.pixdim[r] : 0.0f);
  std::memcpy(hdr + kOffMagic, "n+1", 4);

  std::vector<unsigned char> raw(image.data.size() * bpv);
  switch (image.datatype) {
    case DataType::UInt8: encode<std::uint8_t>(image.data, raw.data()); break;
    case DataType::Int8: encode<std::int8_t>(image.data, raw.data()); break;
    case DataType::Int16: encode<std::int16_t>(image.data, raw.data()); break;
    case DataType::UInt16: encode<std::uint16_t>(image.data, raw.data()); break;
    case DataType::Int32: encode<std::int32_t>(image.data, raw.data()); break;
    case DataType::UInt32: encode<std::uint32_t>(image.data, raw.data()); break;
    case DataType::Float32: encode<float>(image.data, raw.data()); break;
    case DataType::Float64: encode<double>(image.data, raw.data()); break;
  }

  const bool compress = ends_with(path.string(), ".gz");
  GzHandle f(gzopen(path.string().c_str(), compress ? "wb6" : "wbT"));
  if (!f) throw IoError("cannot open for writing: " + path.string());
  auto put = [&](const unsigned char* p, std::size_t n) {
    while (n > 0) {
      const unsigned chunk = static_cast<unsigned>(std::min<std::size_t>(n, 1u << 30));
      if (gzwrite(f.get(), p, chunk) != static_cast<int>(chunk)) throw IoError("write failed: " + path.string());
      p += chunk;
      n -= chunk;
    }
  };
  put(hdr, kVoxOffset);
  put(raw.data(), raw.size());
  if (gzclose(f.release()) != Z_OK) throw IoError("write failed: " + path.string());
}

namespace {

Dims spatial_dims(const Image& img) {
  return {static_cast<int>(img.dim[0]), static_cast<int>(img.dim[1]), static_cast<int>(img.dim[2])};
}

Spacing spatial_spacing(const Image& img) { return {img.pixdim[0], img.pixdim[1], img.pixdim[2]}; }

Image image_for(Dims d, Spacing s, DataType type) {
  Image img;
  img.ndim = 3;
  img.dim = {d.x, d.y, d.z, 1, 1, 1, 1};
  img.pixdim = {static_cast<float>(s.x), static_cast<float>(s.y), static_cast<float>(s.z), 1, 1, 1, 1};
  img.datatype = type;
  return img;
}

bool is_3d(const Image& img) {
  for (int i = 3; i < img.ndim; ++i)
    if (img.dim[i] != 1) return false;
  return true;
}

}  // namespace

Volume read_volume(const std::filesystem::path& path) {
  Image img = read(path);
  if (!is_3d(img)) throw IoError("expected a 3-D volume: " + path.string());
  std::vector<float> values(img.data.begin(), img.data.end());
  return Volume(spatial_dims(img), spatial_spacing(img), std::move(values));
}

void write_volume(const std::filesystem::path& path, const Volume& volume) {
  Image img = image_for(volume.dims(), volume.spacing(), DataType::Float32);
  img.data.assign(volume.values().begin(), volume.values().end());
  write(path, img);
}

LabelMap read_labels(const std::filesystem::path& path) {
  Image img = read(path);
  if (!is_3d(img)) throw IoError("expected a 3-D label map: " + path.string());
  std::vector<std::int32_t> values(img.data.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double v = img.data[i];
    if (!(v >= 0) || v != std::floor(v)) throw IoError("label map holds non-integer or negative ids: " + path.string());
    values[i] = static_cast<std::int32_t>(v);
  }
  return LabelMap(spatial_dims(img), spatial_spacing(img), std::move(values));
}

void write_labels(const std::filesystem::path& path, const LabelMap& labels) {
  Image img = image_for(labels.dims(), labels.spacing(), DataType::Int32);
  img.data.assign(labels.values().begin(), labels.values().end());
  write(path, img);
}

std::filesystem::path sidecar_path(const std::filesystem::path& path) {
  std::string s = path.string();
  for (const char* ext : {".nii.gz", ".nii"}) {
    if (ends_with(s, ext)) {
      s.resize(s.size() - std::strlen(ext));
      break;
    }
  }
  return s + ".json";
}

DisplacementField read_field(const std::filesystem::path& path) {
  Image img = read(path);
  const bool ok = img.ndim == 4 && img.dim[3] == 3;
  if (!ok) throw IoError("expected a (nx, ny, nz, 3) displacement field: " + path.string());
  const auto side = sidecar_path(path);
  if (std::filesystem::exists(side)) {
    std::ifstream in(side);
    nlohmann::json meta;
    try {
      in >> meta;
    } catch (const nlohmann::json::exception& e) {
      throw IoError("malformed field sidecar " + side.string() + ": " + e.what());
    }
    if (meta.value("units", std::string("voxel")) != "voxel")
      throw IoError("unsupported displacement units in " + side.string());
  }
  std::vector<float> values(img.data.begin(), img.data.end());
  return DisplacementField(spatial_dims(img), spatial_spacing(img), std::move(values));
}

void write_field(const std::filesystem::path& path, const DisplacementField& field) {
  Image img = image_for(field.dims(), field.spacing(), DataType::Float32);
  img.ndim = 4;
  img.dim[3] = 3;
  img.intent_code = kIntentVector;
  img.data.assign(field.values().begin(), field.values().end());
  write(path, img);

  const Dims d = field.dims();
  nlohmann::json meta = {
      {"units", "voxel"},
      {"components", {"x", "y", "z"}},
      {"component_axis", 3},
      {"shape", {d.x, d.y, d.z, 3}},
      {"spacing_mm", {field.spacing().x, field.spacing().y, field.spacing().z}},
      {"convention", "warped(x) = moving(x + u(x)); x is the fastest-varying axis"},
  };
  std::ofstream out(sidecar_path(path));
  if (!out) throw IoError("cannot write sidecar for " + path.string());
  out << meta.dump(2) << "\n";
}

}  // namespace fusionreg::nifti
