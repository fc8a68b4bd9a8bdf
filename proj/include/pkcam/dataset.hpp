#pragma once

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "pkcam/tensor.hpp"

// Dataset ingestion. Three sources:
//
//   synthetic:CLASSESxPER_CLASSxHxW:SEED
//       class-dependent Gaussian blobs; each class has its own per-channel
//       gain profile so channel attention is genuinely useful
//   raw bundle (a file)
//       magic "PKDS" | u32 version | u32 N | u16 C | u16 H | u16 W
//       | u16 classes | N labels (u16 LE) | N*C*H*W pixels (u8)
//   directory of images
//       one subdirectory per class (sorted name order = class id) holding
//       binary PGM (P5) or PPM (P6) files
//
// Pixels normalize to [0,1] floats with the per-channel mean (computed from
// the ingested split, stored with the bundle) subtracted.

namespace pkcam {

struct DatasetBundle {
  std::int64_t count = 0, channels = 0, height = 0, width = 0;
  std::int64_t classes = 0;
  std::vector<std::uint8_t> pixels;   // count * channels * height * width
  std::vector<std::uint16_t> labels;  // count
  std::string split = "train";
  std::vector<double> channel_mean;   // of pixels/255, one per channel

  void compute_channel_mean() {
    channel_mean.assign(static_cast<std::size_t>(channels), 0.0);
    const std::int64_t plane = height * width;
    for (std::int64_t n = 0; n < count; ++n)
      for (std::int64_t c = 0; c < channels; ++c) {
        double acc = 0.0;
        const std::uint8_t* p = pixels.data() + (n * channels + c) * plane;
        for (std::int64_t m = 0; m < plane; ++m) acc += p[m];
        channel_mean[static_cast<std::size_t>(c)] += acc / 255.0;
      }
    for (auto& m : channel_mean) m /= static_cast<double>(count * plane);
  }

  // FNV-1a over the raw content; used for determinism checks.
  std::uint64_t digest() const {
    std::uint64_t h = 1469598103934665603ull;
    auto mix = [&](const void* data, std::size_t n) {
      const auto* p = static_cast<const std::uint8_t*>(data);
      for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
      }
    };
    const std::uint64_t head[5] = {static_cast<std::uint64_t>(count),
                                   static_cast<std::uint64_t>(channels),
                                   static_cast<std::uint64_t>(height),
                                   static_cast<std::uint64_t>(width),
                                   static_cast<std::uint64_t>(classes)};
    mix(head, sizeof(head));
    mix(labels.data(), labels.size() * sizeof(std::uint16_t));
    mix(pixels.data(), pixels.size());
    return h;
  }

  // Normalized float batch for the given sample indices.
  Tensor batch_images(const std::vector<std::int64_t>& idx,
                      const std::vector<double>& mean) const {
    const std::int64_t plane = height * width;
    Tensor x(Shape{static_cast<std::int64_t>(idx.size()), channels, height, width});
    for (std::size_t b = 0; b < idx.size(); ++b)
      for (std::int64_t c = 0; c < channels; ++c) {
        const std::uint8_t* src = pixels.data() + (idx[b] * channels + c) * plane;
        double* dst = x.data() + (static_cast<std::int64_t>(b) * channels + c) * plane;
        const double m = mean[static_cast<std::size_t>(c)];
        for (std::int64_t p = 0; p < plane; ++p) dst[p] = src[p] / 255.0 - m;
      }
    return x;
  }

  std::vector<int> batch_labels(const std::vector<std::int64_t>& idx) const {
    std::vector<int> out(idx.size());
    for (std::size_t b = 0; b < idx.size(); ++b)
      out[b] = labels[static_cast<std::size_t>(idx[b])];
    return out;
  }

  void validate() const {
    if (count < 1 || channels < 1 || height < 1 || width < 1 || classes < 2)
      throw ContractError("dataset: degenerate bundle dimensions");
    for (auto l : labels)
      if (l >= classes)
        throw ContractError("dataset: label " + std::to_string(l) + " out of range for " +
                            std::to_string(classes) + " classes");
  }
};

// ---------------------------------------------------------------------------
// Synthetic blobs
// ---------------------------------------------------------------------------

inline DatasetBundle make_synthetic(int classes, int per_class, int height, int width,
                                    std::uint64_t seed) {
  if (classes < 2 || per_class < 1 || height < 4 || width < 4)
    throw ContractError("synthetic: need >= 2 classes, >= 1 sample, >= 4x4 images");
  DatasetBundle b;
  b.count = static_cast<std::int64_t>(classes) * per_class;
  b.channels = 3;
  b.height = height;
  b.width = width;
  b.classes = classes;
  b.pixels.resize(static_cast<std::size_t>(b.count * 3 * height * width));
  b.labels.resize(static_cast<std::size_t>(b.count));

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, 10.0);
  std::uniform_real_distribution<double> jitter(-0.12, 0.12);
  const double pi = 3.14159265358979323846;

  std::int64_t s = 0;
  for (int y = 0; y < classes; ++y) {
    // per-class channel gains and blob geometry
    const double theta = 2.0 * pi * y / classes;
    const double gain[3] = {0.55 + 0.40 * std::sin(theta),
                            0.55 + 0.40 * std::sin(theta + 2.0 * pi / 3.0),
                            0.55 + 0.40 * std::sin(theta + 4.0 * pi / 3.0)};
    const double base_cy = 0.30 + 0.40 * ((y * 2654435761u % 97) / 96.0);
    const double base_cx = 0.30 + 0.40 * ((y * 40503u % 89) / 88.0);
    const double base_sigma = (0.12 + 0.10 * (y % 3)) * height;
    for (int i = 0; i < per_class; ++i, ++s) {
      const double cy = (base_cy + jitter(rng)) * height;
      const double cx = (base_cx + jitter(rng)) * width;
      const double sigma = base_sigma * (1.0 + 0.3 * jitter(rng));
      b.labels[static_cast<std::size_t>(s)] = static_cast<std::uint16_t>(y);
      for (int c = 0; c < 3; ++c)
        for (int h = 0; h < height; ++h)
          for (int w = 0; w < width; ++w) {
            const double d2 = (h - cy) * (h - cy) + (w - cx) * (w - cx);
            const double v =
                255.0 * gain[c] * std::exp(-d2 / (2.0 * sigma * sigma)) + noise(rng);
            const double clamped = v < 0.0 ? 0.0 : (v > 255.0 ? 255.0 : v);
            b.pixels[static_cast<std::size_t>(((s * 3 + c) * height + h) * width + w)] =
                static_cast<std::uint8_t>(clamped + 0.5);
          }
    }
  }
  b.compute_channel_mean();
  b.validate();
  return b;
}

// ---------------------------------------------------------------------------
// Raw bundle ("PKDS") file format
// ---------------------------------------------------------------------------

namespace pkds {

inline constexpr char kMagic[4] = {'P', 'K', 'D', 'S'};
inline constexpr std::uint32_t kVersion = 1;

}  // namespace pkds

inline void save_raw_bundle(const std::string& path, const DatasetBundle& b) {
  std::string out;
  out.append(pkds::kMagic, 4);
  auto put_u32 = [&](std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  };
  auto put_u16 = [&](std::uint16_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
  };
  put_u32(pkds::kVersion);
  put_u32(static_cast<std::uint32_t>(b.count));
  put_u16(static_cast<std::uint16_t>(b.channels));
  put_u16(static_cast<std::uint16_t>(b.height));
  put_u16(static_cast<std::uint16_t>(b.width));
  put_u16(static_cast<std::uint16_t>(b.classes));
  for (auto l : b.labels) put_u16(l);
  out.append(reinterpret_cast<const char*>(b.pixels.data()), b.pixels.size());
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw Error("dataset: cannot open " + path + " for writing");
  const std::size_t n = std::fwrite(out.data(), 1, out.size(), f);
  std::fclose(f);
  if (n != out.size()) throw Error("dataset: short write to " + path);
}

inline DatasetBundle load_raw_bundle(const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw Error("dataset: cannot open " + path);
  std::string bytes;
  char buf[1 << 16];
  std::size_t n;
  while ((n = std::fread(buf, 1, sizeof(buf), f)) > 0) bytes.append(buf, n);
  std::fclose(f);

  std::uint64_t off = 0;
  auto need = [&](std::uint64_t want, const char* what) {
    if (off + want > bytes.size())
      throw FormatError(std::string("raw bundle: truncated while reading ") + what, off);
  };
  need(4, "magic");
  if (std::memcmp(bytes.data(), pkds::kMagic, 4) != 0)
    throw FormatError("raw bundle: bad magic", 0);
  off = 4;
  auto u32 = [&](const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[off + static_cast<std::size_t>(i)]))
           << (8 * i);
    off += 4;
    return v;
  };
  auto u16 = [&](const char* what) {
    need(2, what);
    const std::uint16_t v = static_cast<std::uint16_t>(
        static_cast<unsigned char>(bytes[off]) |
        (static_cast<unsigned char>(bytes[off + 1]) << 8));
    off += 2;
    return v;
  };
  const std::uint32_t version = u32("version");
  if (version != pkds::kVersion)
    throw FormatError("raw bundle: unsupported version " + std::to_string(version), off - 4);
  DatasetBundle b;
  b.count = u32("sample count");
  b.channels = u16("channels");
  b.height = u16("height");
  b.width = u16("width");
  b.classes = u16("class count");
  b.labels.resize(static_cast<std::size_t>(b.count));
  for (std::int64_t i = 0; i < b.count; ++i)
    b.labels[static_cast<std::size_t>(i)] = u16("label");
  const std::uint64_t px = static_cast<std::uint64_t>(b.count) * b.channels * b.height * b.width;
  need(px, "pixels");
  b.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(off),
                  bytes.begin() + static_cast<std::ptrdiff_t>(off + px));
  off += px;
  if (off != bytes.size())
    throw FormatError("raw bundle: " + std::to_string(bytes.size() - off) +
                      " trailing bytes", off);
  b.compute_channel_mean();
  b.validate();
  return b;
}

// ---------------------------------------------------------------------------
// Directory of PGM/PPM images, one subdirectory per class
// ---------------------------------------------------------------------------

namespace pnm {

// Minimal binary PGM (P5) / PPM (P6) reader, 8-bit only.
inline void load(const std::string& path, std::vector<std::uint8_t>& planar, int& channels,
                 int& height, int& width) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw Error("dataset: cannot open image " + path);
  std::string bytes;
  char buf[1 << 16];
  std::size_t n;
  while ((n = std::fread(buf, 1, sizeof(buf), f)) > 0) bytes.append(buf, n);
  std::fclose(f);

  std::size_t pos = 0;
  auto token = [&]() {
    while (pos < bytes.size() &&
           (std::isspace(static_cast<unsigned char>(bytes[pos])) || bytes[pos] == '#')) {
      if (bytes[pos] == '#')
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      else
        ++pos;
    }
    const std::size_t start = pos;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    if (start == pos) throw FormatError("pnm: truncated header in " + path, start);
    return bytes.substr(start, pos - start);
  };
  const std::string magic = token();
  if (magic != "P5" && magic != "P6")
    throw FormatError("pnm: " + path + " is not binary PGM/PPM", 0);
  channels = magic == "P6" ? 3 : 1;
  width = std::stoi(token());
  height = std::stoi(token());
  const int maxval = std::stoi(token());
  if (maxval != 255) throw FormatError("pnm: only 8-bit images supported in " + path, pos);
  ++pos;  // single whitespace after maxval
  const std::size_t want = static_cast<std::size_t>(channels) * height * width;
  if (pos + want > bytes.size())
    throw FormatError("pnm: truncated pixel data in " + path, pos);
  // interleaved -> planar
  planar.resize(want);
  for (int c = 0; c < channels; ++c)
    for (int i = 0; i < height * width; ++i)
      planar[static_cast<std::size_t>(c * height * width + i)] =
          static_cast<std::uint8_t>(bytes[pos + static_cast<std::size_t>(i * channels + c)]);
}

}  // namespace pnm

inline DatasetBundle load_image_dir(const std::string& path) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(path)) throw Error("dataset: " + path + " is not a directory");
  std::vector<std::string> class_dirs;
  for (const auto& e : fs::directory_iterator(path))
    if (e.is_directory()) class_dirs.push_back(e.path().filename().string());
  std::sort(class_dirs.begin(), class_dirs.end());
  if (class_dirs.size() < 2)
    throw Error("dataset: " + path + " needs at least two class subdirectories");

  DatasetBundle b;
  b.classes = static_cast<std::int64_t>(class_dirs.size());
  for (std::size_t y = 0; y < class_dirs.size(); ++y) {
    std::vector<std::string> files;
    for (const auto& e : fs::directory_iterator(fs::path(path) / class_dirs[y]))
      if (e.is_regular_file()) files.push_back(e.path().string());
    std::sort(files.begin(), files.end());
    for (const auto& file : files) {
      std::vector<std::uint8_t> planar;
      int c, h, w;
      pnm::load(file, planar, c, h, w);
      // grayscale replicates to the three input channels
      if (b.count == 0) {
        b.channels = 3;
        b.height = h;
        b.width = w;
      } else if (h != b.height || w != b.width) {
        throw Error("dataset: image " + file + " has mismatched size");
      }
      for (int ch = 0; ch < 3; ++ch) {
        const int src = c == 3 ? ch : 0;
        b.pixels.insert(b.pixels.end(),
                        planar.begin() + static_cast<std::ptrdiff_t>(src * h * w),
                        planar.begin() + static_cast<std::ptrdiff_t>((src + 1) * h * w));
      }
      b.labels.push_back(static_cast<std::uint16_t>(y));
      ++b.count;
    }
  }
  if (b.count == 0) throw Error("dataset: no images found under " + path);
  b.compute_channel_mean();
  b.validate();
  return b;
}

// Dispatch on the data spec: "synthetic:CxPxHxW:SEED", a directory, or a
// raw-bundle file.
inline DatasetBundle ingest(const std::string& spec) {
  if (spec.rfind("synthetic:", 0) == 0) {
    const std::string rest = spec.substr(10);
    const auto colon = rest.find(':');
    const std::string dims = colon == std::string::npos ? rest : rest.substr(0, colon);
    const std::uint64_t seed =
        colon == std::string::npos ? 7 : std::stoull(rest.substr(colon + 1));
    int vals[4], vi = 0;
    std::istringstream is(dims);
    std::string tok;
    while (std::getline(is, tok, 'x') && vi < 4) vals[vi++] = std::stoi(tok);
    if (vi != 4)
      throw ConfigError("synthetic spec must be synthetic:CLASSESxPER_CLASSxHxW[:SEED], got " +
                        spec);
    return make_synthetic(vals[0], vals[1], vals[2], vals[3], seed);
  }
  if (std::filesystem::is_directory(spec)) return load_image_dir(spec);
  return load_raw_bundle(spec);
}

}  // namespace pkcam
