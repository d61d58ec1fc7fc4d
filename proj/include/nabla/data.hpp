#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "nabla/image.hpp"
#include "nabla/metrics.hpp"
#include "nabla/tensor.hpp"

namespace nabla {

namespace fs = std::filesystem;

/// Image plus binary mask; mask is one channel holding exactly 0 or 1.
struct SegRecord {
  std::string id;
  Image image;
  Image mask;
};

struct ClsRecord {
  std::string id;
  Image image;
  int label = 0;
};

/// Lesion classes in label-index order.
inline constexpr std::array<const char*, 7> kLesionClasses{
    "melanoma",         "nevus",          "basal_cell_carcinoma", "actinic_keratosis_bowens",
    "benign_keratosis", "dermatofibroma", "vascular"};
inline constexpr std::array<const char*, 7> kLesionAbbrev{"MEL", "NV", "BCC", "AKIEC", "BKL", "DF", "VASC"};

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline std::string lower(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n\"");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n\"");
  return s.substr(b, e - b + 1);
}

inline bool is_image_file(const fs::path& p) {
  const std::string ext = lower(p.extension().string());
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

inline std::map<std::string, fs::path> images_by_stem(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw DataError("dataset directory not found: " + dir.string());
  std::map<std::string, fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_regular_file() || !is_image_file(e.path())) continue;
    const std::string stem = e.path().stem().string();
    if (!out.emplace(stem, e.path()).second) throw DataError("duplicate image id '" + stem + "' in " + dir.string());
  }
  return out;
}

}  // namespace detail

/// Integer index in [0, 7), full class name or standard abbreviation (MEL, NV, ...) (case-insensitive).
inline std::optional<int> parse_class_label(const std::string& text) {
  const std::string s = detail::trim(text);
  int v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec == std::errc() && ptr == s.data() + s.size() && !s.empty()) return v;
  const std::string l = detail::lower(s);
  for (std::size_t k = 0; k < kLesionClasses.size(); ++k) {
    if (l == kLesionClasses[k] || l == detail::lower(kLesionAbbrev[k])) return static_cast<int>(k);
  }
  return std::nullopt;
}

/// Gray view of a raster (channel mean), thresholded at 128 into {0, 1}.
inline Image binarize_mask(const Image& raw) {
  Image m(raw.width, raw.height, 1);
  for (std::size_t i = 0; i < raw.width * raw.height; ++i) {
    unsigned sum = 0;
    for (std::size_t c = 0; c < raw.channels; ++c) sum += raw.pixels[i * raw.channels + c];
    m.pixels[i] = sum >= 128u * raw.channels ? 1 : 0;
  }
  return m;
}

/// Pairs images/<id>.{png,jpg} with masks/<id>.png or masks/<id>_segmentation.png;
/// records come back sorted by id.
inline std::vector<SegRecord> load_segmentation_dataset(const fs::path& image_dir, const fs::path& mask_dir) {
  const auto images = detail::images_by_stem(image_dir);
  const auto masks = detail::images_by_stem(mask_dir);
  std::vector<SegRecord> out;
  for (const auto& [id, path] : images) {
    auto m = masks.find(id);
    if (m == masks.end()) m = masks.find(id + "_segmentation");
    if (m == masks.end()) throw DataError("no mask for image id '" + id + "' in " + mask_dir.string());
    SegRecord r{id, read_image(path), binarize_mask(read_image(m->second))};
    if (r.image.width != r.mask.width || r.image.height != r.mask.height) {
      throw DataError("image and mask extents differ for id '" + id + "'");
    }
    out.push_back(std::move(r));
  }
  return out;
}

/// CSV of (filename, class) rows; a header row is skipped when its class
/// field does not parse. Filenames may omit the extension.
inline std::vector<ClsRecord> load_classification_dataset(const fs::path& image_dir, const fs::path& labels_csv) {
  const auto images = detail::images_by_stem(image_dir);
  std::ifstream in(labels_csv);
  if (!in) throw DataError("cannot open label file " + labels_csv.string());
  std::vector<ClsRecord> out;
  std::set<std::string> seen;
  std::string line;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    if (detail::trim(line).empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw DataError(labels_csv.string() + ":" + std::to_string(lineno) + ": expected filename,class");
    const std::string name = detail::trim(line.substr(0, comma));
    const auto label = parse_class_label(line.substr(comma + 1));
    if (!label) {
      if (lineno == 1) continue;
      throw DataError(labels_csv.string() + ":" + std::to_string(lineno) + ": unknown class '" +
                      detail::trim(line.substr(comma + 1)) + "'");
    }
    const std::string id = fs::path(name).stem().string();
    const auto it = images.find(id);
    if (it == images.end()) throw DataError("no image for labelled id '" + id + "' in " + image_dir.string());
    if (!seen.insert(id).second) throw DataError("duplicate label for id '" + id + "'");
    out.push_back({id, read_image(it->second), *label});
  }
  std::sort(out.begin(), out.end(), [](const ClsRecord& a, const ClsRecord& b) { return a.id < b.id; });
  return out;
}

enum class Interp { Bilinear, Nearest };

/// Pixel-centre aligned resampling; output extents are exactly (h, w).
inline Image resize(const Image& src, std::size_t h, std::size_t w, Interp interp) {
  if (h == 0 || w == 0) throw std::invalid_argument("resize: target extents must be positive");
  if (src.pixels.empty()) throw std::invalid_argument("resize: empty source image");
  Image out(w, h, src.channels);
  const double sy = double(src.height) / double(h), sx = double(src.width) / double(w);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      if (interp == Interp::Nearest) {
        const std::size_t iy = std::min(src.height - 1, std::size_t((y + 0.5) * sy));
        const std::size_t ix = std::min(src.width - 1, std::size_t((x + 0.5) * sx));
        for (std::size_t c = 0; c < src.channels; ++c) out.at(y, x, c) = src.at(iy, ix, c);
        continue;
      }
      const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, double(src.height - 1));
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, double(src.width - 1));
      const std::size_t y0 = std::size_t(fy), x0 = std::size_t(fx);
      const std::size_t y1 = std::min(y0 + 1, src.height - 1), x1 = std::min(x0 + 1, src.width - 1);
      const double ay = fy - double(y0), ax = fx - double(x0);
      for (std::size_t c = 0; c < src.channels; ++c) {
        const double top = src.at(y0, x0, c) * (1 - ax) + src.at(y0, x1, c) * ax;
        const double bot = src.at(y1, x0, c) * (1 - ax) + src.at(y1, x1, c) * ax;
        out.at(y, x, c) = static_cast<std::uint8_t>(std::lround(top * (1 - ay) + bot * ay));
      }
    }
  }
  return out;
}

inline SegRecord resize(const SegRecord& r, std::size_t size) {
  return {r.id, resize(r.image, size, size, Interp::Bilinear), resize(r.mask, size, size, Interp::Nearest)};
}

inline ClsRecord resize(const ClsRecord& r, std::size_t size) {
  return {r.id, resize(r.image, size, size, Interp::Bilinear), r.label};
}

inline Image hflip(const Image& src) {
  Image out(src.width, src.height, src.channels);
  for (std::size_t y = 0; y < src.height; ++y)
    for (std::size_t x = 0; x < src.width; ++x)
      for (std::size_t c = 0; c < src.channels; ++c) out.at(y, src.width - 1 - x, c) = src.at(y, x, c);
  return out;
}

inline Image vflip(const Image& src) {
  Image out(src.width, src.height, src.channels);
  const std::size_t row = src.width * src.channels;
  for (std::size_t y = 0; y < src.height; ++y) {
    std::copy_n(src.pixels.begin() + y * row, row, out.pixels.begin() + (src.height - 1 - y) * row);
  }
  return out;
}

namespace detail {

inline SegRecord flipped(const SegRecord& r, bool horizontal) {
  auto f = horizontal ? hflip : vflip;
  return {r.id + (horizontal ? "_hflip" : "_vflip"), f(r.image), f(r.mask)};
}

inline ClsRecord flipped(const ClsRecord& r, bool horizontal) {
  return {r.id + (horizontal ? "_hflip" : "_vflip"), horizontal ? hflip(r.image) : vflip(r.image), r.label};
}

}  // namespace detail

/// Each record followed by its horizontal and vertical mirror: 3x the input.
template <typename Record>
std::vector<Record> augment_flips(const std::vector<Record>& records) {
  std::vector<Record> out;
  out.reserve(records.size() * 3);
  for (const auto& r : records) {
    out.push_back(r);
    out.push_back(detail::flipped(r, true));
    out.push_back(detail::flipped(r, false));
  }
  return out;
}

struct SplitPlan {
  std::uint64_t seed = 0;
  double train_fraction = 0;
  std::vector<std::string> train_ids, test_ids;
};

struct SplitCounts {
  std::optional<std::size_t> train, test;
};

/// Seeded shuffle then prefix split. Without overrides the train count is
/// round(fraction * total); an explicit train and/or test count wins, and
/// the two must still partition the set.
inline SplitPlan split(std::vector<std::string> ids, double train_fraction, std::uint64_t seed,
                       SplitCounts counts = {}) {
  if (!(train_fraction > 0 && train_fraction < 1)) throw std::invalid_argument("split: fraction must lie in (0, 1)");
  const std::size_t total = ids.size();
  std::size_t n_train = static_cast<std::size_t>(std::llround(train_fraction * double(total)));
  if (counts.train) n_train = *counts.train;
  if (counts.test) {
    if (*counts.test > total) throw std::invalid_argument("split: test count exceeds dataset size");
    if (counts.train && *counts.train + *counts.test != total) {
      throw std::invalid_argument("split: train " + std::to_string(*counts.train) + " + test " +
                                  std::to_string(*counts.test) + " != " + std::to_string(total) + " records");
    }
    n_train = total - *counts.test;
  }
  if (n_train > total) throw std::invalid_argument("split: train count exceeds dataset size");
  std::sort(ids.begin(), ids.end());
  std::mt19937_64 rng(seed);
  std::shuffle(ids.begin(), ids.end(), rng);
  SplitPlan plan{seed, train_fraction, {}, {}};
  plan.train_ids.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_train));
  plan.test_ids.assign(ids.begin() + static_cast<std::ptrdiff_t>(n_train), ids.end());
  return plan;
}

template <typename Record>
SplitPlan split(const std::vector<Record>& records, double train_fraction, std::uint64_t seed, SplitCounts counts = {}) {
  std::vector<std::string> ids;
  for (const auto& r : records) ids.push_back(r.id);
  return split(std::move(ids), train_fraction, seed, counts);
}

/// Records selected by id, in the order of `ids`.
template <typename Record>
std::vector<Record> select(const std::vector<Record>& records, const std::vector<std::string>& ids) {
  std::map<std::string, const Record*> by_id;
  for (const auto& r : records) by_id.emplace(r.id, &r);
  std::vector<Record> out;
  for (const auto& id : ids) {
    const auto it = by_id.find(id);
    if (it == by_id.end()) throw DataError("split references unknown id '" + id + "'");
    out.push_back(*it->second);
  }
  return out;
}

/// Raster -> 1 x channels x H x W, scaled by 1/255 when `normalize` is set.
/// Gray rasters are replicated when more channels are requested.
template <typename T>
void write_image(Tensor<T>& dst, std::size_t n, const Image& img, bool normalize = true) {
  const Shape& s = dst.shape();
  if (img.height != s.h || img.width != s.w) {
    throw ShapeError("image " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                     " does not match batch plane " + std::to_string(s.h) + "x" + std::to_string(s.w));
  }
  if (img.channels != s.c && img.channels != 1) {
    throw ShapeError("image has " + std::to_string(img.channels) + " channels, model expects " + std::to_string(s.c));
  }
  const T scale = normalize ? T(1) / T(255) : T(1);
  for (std::size_t c = 0; c < s.c; ++c) {
    const std::size_t src_c = img.channels == 1 ? 0 : c;
    for (std::size_t y = 0; y < s.h; ++y)
      for (std::size_t x = 0; x < s.w; ++x) dst.at(n, c, y, x) = T(img.at(y, x, src_c)) * scale;
  }
}

template <typename T>
Tensor<T> image_tensor(const Image& img, std::size_t channels, bool normalize = true) {
  Tensor<T> t({1, channels, img.height, img.width});
  write_image(t, 0, img, normalize);
  return t;
}

/// Batch of images with either masks (segmentation) or labels (classification).
template <typename T>
struct Batch {
  Tensor<T> images;
  Tensor<T> masks;
  std::vector<int> labels;
  std::vector<std::string> ids;
};

/// Index order for one epoch: shuffled by (seed, epoch), chunked into
/// batch_size groups with a short final group.
inline std::vector<std::vector<std::size_t>> epoch_batches(std::size_t count, std::size_t batch_size,
                                                           std::uint64_t seed, std::uint64_t epoch,
                                                           bool shuffle = true) {
  if (count == 0) throw DataError("cannot batch an empty dataset");
  if (batch_size == 0) throw std::invalid_argument("batch size must be >= 1");
  std::vector<std::size_t> order(count);
  for (std::size_t i = 0; i < count; ++i) order[i] = i;
  if (shuffle) {
    std::seed_seq sseq{std::uint32_t(seed), std::uint32_t(seed >> 32), std::uint32_t(epoch), std::uint32_t(epoch >> 32)};
    std::mt19937_64 rng(sseq);
    std::shuffle(order.begin(), order.end(), rng);
  }
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t b = 0; b < count; b += batch_size) {
    out.emplace_back(order.begin() + std::ptrdiff_t(b), order.begin() + std::ptrdiff_t(std::min(count, b + batch_size)));
  }
  return out;
}

template <typename T>
Batch<T> make_batch(const std::vector<SegRecord>& records, const std::vector<std::size_t>& idx, std::size_t channels,
                    bool normalize = true) {
  const Image& first = records.at(idx.at(0)).image;
  Batch<T> b{Tensor<T>({idx.size(), channels, first.height, first.width}),
             Tensor<T>({idx.size(), 1, first.height, first.width}),
             {},
             {}};
  for (std::size_t n = 0; n < idx.size(); ++n) {
    const SegRecord& r = records.at(idx[n]);
    write_image(b.images, n, r.image, normalize);
    write_image(b.masks, n, r.mask, false);
    b.ids.push_back(r.id);
  }
  return b;
}

template <typename T>
Batch<T> make_batch(const std::vector<ClsRecord>& records, const std::vector<std::size_t>& idx, std::size_t channels,
                    bool normalize = true) {
  const Image& first = records.at(idx.at(0)).image;
  Batch<T> b{Tensor<T>({idx.size(), channels, first.height, first.width}), {}, {}, {}};
  for (std::size_t n = 0; n < idx.size(); ++n) {
    const ClsRecord& r = records.at(idx[n]);
    write_image(b.images, n, r.image, normalize);
    b.labels.push_back(r.label);
    b.ids.push_back(r.id);
  }
  return b;
}

/// All batches of one epoch, materialized.
template <typename T, typename Record>
std::vector<Batch<T>> make_batches(const std::vector<Record>& records, std::size_t batch_size, std::uint64_t seed,
                                   std::uint64_t epoch = 0, std::size_t channels = 3, bool normalize = true) {
  std::vector<Batch<T>> out;
  for (const auto& idx : epoch_batches(records.size(), batch_size, seed, epoch)) {
    out.push_back(make_batch<T>(records, idx, channels, normalize));
  }
  return out;
}

// ---------------------------------------------------------------- synthetic

struct Ellipse {
  double cy = 0, cx = 0, ry = 1, rx = 1, angle = 0;

  /// Membership of the pixel centre (y + 0.5, x + 0.5).
  bool contains(std::size_t y, std::size_t x) const {
    const double dy = double(y) + 0.5 - cy, dx = double(x) + 0.5 - cx;
    const double u = dx * std::cos(angle) + dy * std::sin(angle);
    const double v = -dx * std::sin(angle) + dy * std::cos(angle);
    return (u * u) / (rx * rx) + (v * v) / (ry * ry) <= 1.0;
  }
};

struct SynthSegmentation {
  std::vector<SegRecord> records;
  std::vector<Ellipse> ellipses;
};

namespace detail {

inline std::mt19937_64 record_rng(std::uint64_t seed, std::size_t index, std::uint32_t stream) {
  std::seed_seq s{std::uint32_t(seed), std::uint32_t(seed >> 32), std::uint32_t(index), stream};
  return std::mt19937_64(s);
}

inline std::uint8_t clamp_byte(double v) { return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L)); }

inline std::string synth_id(const char* prefix, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s_%05zu", prefix, i);
  return buf;
}

}  // namespace detail

/// Dark rotated ellipses on noisy skin-toned backgrounds; masks are the exact
/// pixel-centre rasterization of each ellipse.
inline SynthSegmentation synth_lesions(std::size_t n, std::size_t h, std::size_t w, std::uint64_t seed) {
  if (h < 8 || w < 8) throw std::invalid_argument("synth_lesions: extents must be >= 8");
  SynthSegmentation out;
  for (std::size_t i = 0; i < n; ++i) {
    auto rng = detail::record_rng(seed, i, 1);
    std::uniform_real_distribution<double> u(0, 1);
    std::normal_distribution<double> noise(0, 12);
    const double m = double(std::min(h, w));
    Ellipse e;
    e.ry = m * (0.15 + 0.2 * u(rng));
    e.rx = m * (0.15 + 0.2 * u(rng));
    e.cy = double(h) * (0.3 + 0.4 * u(rng));
    e.cx = double(w) * (0.3 + 0.4 * u(rng));
    e.angle = std::numbers::pi * u(rng);
    const double skin[3] = {205 + 25 * (u(rng) - 0.5), 160 + 25 * (u(rng) - 0.5), 135 + 25 * (u(rng) - 0.5)};
    const double lesion[3] = {95 + 40 * (u(rng) - 0.5), 60 + 30 * (u(rng) - 0.5), 45 + 30 * (u(rng) - 0.5)};
    SegRecord r{detail::synth_id("lesion", i), Image(w, h, 3), Image(w, h, 1)};
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        const bool in = e.contains(y, x);
        r.mask.at(y, x) = in ? 1 : 0;
        const double mottle = noise(rng);
        for (std::size_t c = 0; c < 3; ++c) r.image.at(y, x, c) = detail::clamp_byte((in ? lesion : skin)[c] + mottle);
      }
    }
    out.records.push_back(std::move(r));
    out.ellipses.push_back(e);
  }
  return out;
}

/// `classes` shape/texture families (disk, ring, square, stripes, ...), one
/// per label; record i carries label i % classes.
inline std::vector<ClsRecord> synth_lesion_classes(std::size_t n, std::size_t h, std::size_t w, std::size_t classes,
                                                   std::uint64_t seed) {
  if (classes < 2 || classes > 7) throw std::invalid_argument("synth_lesion_classes: classes must lie in [2, 7]");
  if (h < 8 || w < 8) throw std::invalid_argument("synth_lesion_classes: extents must be >= 8");
  static constexpr double kTint[7][3] = {{70, 40, 35},  {120, 80, 50}, {150, 60, 90}, {90, 90, 40},
                                         {60, 60, 110}, {140, 110, 70}, {170, 40, 40}};
  std::vector<ClsRecord> out;
  for (std::size_t i = 0; i < n; ++i) {
    auto rng = detail::record_rng(seed, i, 2);
    std::uniform_real_distribution<double> u(0, 1);
    std::normal_distribution<double> noise(0, 8);
    const int label = static_cast<int>(i % classes);
    const double m = double(std::min(h, w));
    const double cy = double(h) * (0.4 + 0.2 * u(rng)), cx = double(w) * (0.4 + 0.2 * u(rng));
    const double r = m * (0.25 + 0.1 * u(rng));
    const double period = std::max(2.0, m / 8.0);
    ClsRecord rec{detail::synth_id("class", i), Image(w, h, 3), label};
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        const double dy = double(y) + 0.5 - cy, dx = double(x) + 0.5 - cx;
        const double d = std::hypot(dy, dx);
        bool in = false;
        switch (label) {
          case 0: in = d <= r; break;                                                   // disk
          case 1: in = d <= r && d >= 0.6 * r; break;                                   // ring
          case 2: in = std::abs(dy) <= 0.8 * r && std::abs(dx) <= 0.8 * r; break;       // square
          case 3: in = d <= r && std::fmod(double(y), period) < period / 2; break;      // horizontal stripes
          case 4: in = d <= r && std::fmod(double(x), period) < period / 2; break;      // vertical stripes
          case 5: in = d <= r && (int(y / (period / 2)) + int(x / (period / 2))) % 2; break;  // checker
          default: in = (std::abs(dy) <= 0.25 * r || std::abs(dx) <= 0.25 * r) && d <= r; break;  // cross
        }
        const double n0 = noise(rng);
        for (std::size_t c = 0; c < 3; ++c) {
          const double base = in ? kTint[label][c] : (c == 0 ? 210 : c == 1 ? 170 : 145);
          rec.image.at(y, x, c) = detail::clamp_byte(base + n0);
        }
      }
    }
    out.push_back(std::move(rec));
  }
  return out;
}

/// Directory layout shared by the generator, the loaders and the CLI:
/// <dir>/images/<id>.png plus <dir>/masks/<id>.png ({0,255}) for segmentation
/// or <dir>/labels.csv (id,label) for classification.
inline void save_segmentation_dataset(const fs::path& dir, const std::vector<SegRecord>& records) {
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "masks");
  for (const auto& r : records) {
    write_png(dir / "images" / (r.id + ".png"), r.image);
    Image m = r.mask;
    for (auto& v : m.pixels) v = v ? 255 : 0;
    write_png(dir / "masks" / (r.id + ".png"), m);
  }
}

inline void save_classification_dataset(const fs::path& dir, const std::vector<ClsRecord>& records) {
  fs::create_directories(dir / "images");
  std::ofstream labels(dir / "labels.csv");
  if (!labels) throw DataError("cannot write " + (dir / "labels.csv").string());
  labels << "id,label\n";
  for (const auto& r : records) {
    write_png(dir / "images" / (r.id + ".png"), r.image);
    labels << r.id << ',' << r.label << '\n';
  }
}

enum class DatasetKind { Segmentation, Classification };

inline DatasetKind detect_dataset(const fs::path& dir) {
  if (fs::is_directory(dir / "masks")) return DatasetKind::Segmentation;
  if (fs::is_regular_file(dir / "labels.csv")) return DatasetKind::Classification;
  throw DataError("dataset directory " + dir.string() + " has neither masks/ nor labels.csv");
}

/// Flattens a {0,1} mask raster into the metric mask type.
inline Mask to_mask(const Image& m) { return Mask(m.pixels.begin(), m.pixels.end()); }

}  // namespace nabla
