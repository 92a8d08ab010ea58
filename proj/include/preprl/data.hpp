#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "preprl/checkpoint.hpp"
#include "preprl/tensor.hpp"
#include "preprl/transforms.hpp"

namespace preprl {

// Labelled H x W x C images with pixel values in [0, 1].
template <typename T>
struct Dataset {
  std::vector<Tensor<T>> images;
  std::vector<std::size_t> labels;
  std::size_t k = 0;

  std::size_t size() const { return images.size(); }
  const Shape& image_shape() const { return images.at(0).shape(); }

  void validate() const {
    if (images.size() != labels.size()) {
      throw std::invalid_argument("dataset: " + std::to_string(images.size()) +
                                  " images but " + std::to_string(labels.size()) +
                                  " labels");
    }
    for (std::size_t i = 0; i < images.size(); ++i) {
      if (labels[i] >= k) {
        throw std::invalid_argument("dataset: label " + std::to_string(labels[i]) +
                                    " at item " + std::to_string(i) + " >= k = " +
                                    std::to_string(k));
      }
      if (images[i].shape() != images[0].shape())
        throw std::invalid_argument("dataset: mixed image shapes");
    }
  }

  Dataset subset(std::size_t begin, std::size_t end) const {
    Dataset out;
    out.k = k;
    out.images.assign(images.begin() + static_cast<std::ptrdiff_t>(begin),
                      images.begin() + static_cast<std::ptrdiff_t>(end));
    out.labels.assign(labels.begin() + static_cast<std::ptrdiff_t>(begin),
                      labels.begin() + static_cast<std::ptrdiff_t>(end));
    return out;
  }
};

template <typename T>
struct Splits {
  Dataset<T> train, val, test;
};

// ---------------------------------------------------------------------------
// IDX container (unsigned byte payloads only).

struct IdxArray {
  std::vector<std::uint32_t> dims;
  std::vector<std::uint8_t> data;

  std::uint32_t magic() const { return 0x0800u | static_cast<std::uint32_t>(dims.size()); }
};

inline IdxArray decode_idx(const std::string& bytes, const std::string& what,
                           std::uint32_t expected_magic) {
  detail::ByteReader r(bytes, what);
  auto be32 = [&]() {
    const auto le = r.u32();
    return ((le & 0xffu) << 24) | ((le & 0xff00u) << 8) | ((le >> 8) & 0xff00u) |
           (le >> 24);
  };
  const std::uint32_t magic = be32();
  if (magic != expected_magic) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "0x%08x (expected 0x%08x)", magic, expected_magic);
    throw FormatError(what + ": bad magic " + buf + " at byte offset 0");
  }
  IdxArray out;
  const std::uint32_t ndims = magic & 0xffu;
  std::size_t n = 1;
  for (std::uint32_t d = 0; d < ndims; ++d) {
    const std::size_t at = r.offset();
    out.dims.push_back(be32());
    if (out.dims.back() == 0)
      throw FormatError(what + ": zero dimension at byte offset " + std::to_string(at));
    n *= out.dims.back();
  }
  const std::size_t payload = r.offset();
  if (bytes.size() - payload < n) {
    throw FormatError(what + ": truncated payload, header at offset " +
                      std::to_string(payload) + " promises " + std::to_string(n) +
                      " bytes but only " + std::to_string(bytes.size() - payload) +
                      " present");
  }
  if (bytes.size() - payload > n) {
    throw FormatError(what + ": " + std::to_string(bytes.size() - payload - n) +
                      " trailing bytes after offset " + std::to_string(payload + n));
  }
  out.data.assign(bytes.begin() + static_cast<std::ptrdiff_t>(payload), bytes.end());
  return out;
}

inline std::string encode_idx(const IdxArray& a) {
  std::string out;
  auto put_be32 = [&](std::uint32_t v) {
    for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<char>((v >> s) & 0xffu));
  };
  put_be32(a.magic());
  for (auto d : a.dims) put_be32(d);
  out.append(a.data.begin(), a.data.end());
  return out;
}

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

template <typename T>
Dataset<T> dataset_from_idx(const IdxArray& images, const IdxArray& labels,
                            std::size_t k = 0) {
  if (images.dims.size() != 3) throw FormatError("idx images: expected 3 dimensions");
  if (labels.dims.size() != 1) throw FormatError("idx labels: expected 1 dimension");
  if (images.dims[0] != labels.dims[0]) {
    throw FormatError("idx: count mismatch, images header says " +
                      std::to_string(images.dims[0]) + " items, labels header says " +
                      std::to_string(labels.dims[0]));
  }
  const std::size_t n = images.dims[0], h = images.dims[1], w = images.dims[2];
  Dataset<T> ds;
  std::size_t max_label = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<T> px(h * w);
    for (std::size_t j = 0; j < h * w; ++j)
      px[j] = static_cast<T>(images.data[i * h * w + j]) / T(255);
    ds.images.emplace_back(Shape{h, w, 1}, std::move(px));
    ds.labels.push_back(labels.data[i]);
    max_label = std::max<std::size_t>(max_label, labels.data[i]);
  }
  ds.k = k ? k : std::max<std::size_t>(2, max_label + 1);
  ds.validate();
  return ds;
}

template <typename T>
std::pair<IdxArray, IdxArray> dataset_to_idx(const Dataset<T>& ds) {
  if (ds.size() == 0) throw std::invalid_argument("idx: empty dataset");
  const Shape& s = ds.image_shape();
  if (s.size() != 3 || s[2] != 1)
    throw std::invalid_argument("idx: only single-channel images can be exported");
  IdxArray images{{static_cast<std::uint32_t>(ds.size()), static_cast<std::uint32_t>(s[0]),
                   static_cast<std::uint32_t>(s[1])},
                  {}};
  IdxArray labels{{static_cast<std::uint32_t>(ds.size())}, {}};
  for (std::size_t i = 0; i < ds.size(); ++i) {
    for (T v : ds.images[i].data()) {
      const double b = std::round(std::clamp(static_cast<double>(v), 0.0, 1.0) * 255.0);
      images.data.push_back(static_cast<std::uint8_t>(b));
    }
    if (ds.labels[i] > 255) throw std::invalid_argument("idx: label exceeds 255");
    labels.data.push_back(static_cast<std::uint8_t>(ds.labels[i]));
  }
  return {std::move(images), std::move(labels)};
}

template <typename T>
Dataset<T> load_idx(const std::string& images_path, const std::string& labels_path,
                    std::size_t k = 0) {
  const IdxArray images =
      decode_idx(detail::read_file(images_path), images_path, kIdxImagesMagic);
  const IdxArray labels =
      decode_idx(detail::read_file(labels_path), labels_path, kIdxLabelsMagic);
  return dataset_from_idx<T>(images, labels, k);
}

template <typename T>
void save_idx(const Dataset<T>& ds, const std::string& images_path,
              const std::string& labels_path) {
  auto [images, labels] = dataset_to_idx(ds);
  detail::write_file(images_path, encode_idx(images));
  detail::write_file(labels_path, encode_idx(labels));
}

// ---------------------------------------------------------------------------
// Synthetic glyphs: orientation-sensitive stroke shapes rendered with a soft
// edge. Coordinates are in [-1, 1] with y pointing down.

enum class Glyph {
  l_shape, t_shape, h_bar, arc, v_bar, diagonal, plus, box, f_shape, seven, anti_diagonal
};

inline constexpr std::size_t kGlyphCount = 11;

inline constexpr std::array<const char*, kGlyphCount> kGlyphNames = {
    "l_shape", "t_shape", "h_bar", "arc", "v_bar", "diagonal",
    "plus", "box", "f_shape", "seven", "anti_diagonal"};

inline const char* to_string(Glyph g) { return kGlyphNames[static_cast<std::size_t>(g)]; }

inline Glyph parse_glyph(const std::string& s) {
  for (std::size_t i = 0; i < kGlyphCount; ++i)
    if (s == kGlyphNames[i]) return static_cast<Glyph>(i);
  throw std::invalid_argument("unknown glyph '" + s + "'");
}

// A glyph in one of its eight flip/quarter-turn poses.
struct GlyphClass {
  Glyph shape = Glyph::l_shape;
  unsigned turns = 0;   // quarter turns, applied after the mirror
  bool mirror = false;  // left-right mirror

  std::string str() const {
    std::string s = to_string(shape);
    if (turns == 0 && !mirror) return s;
    return s + "@" + (mirror ? "m" : "") + std::to_string(90 * turns);
  }

  static GlyphClass parse(const std::string& s) {
    const auto at = s.find('@');
    GlyphClass g{parse_glyph(s.substr(0, at))};
    if (at == std::string::npos) return g;
    std::string pose = s.substr(at + 1);
    if (!pose.empty() && pose[0] == 'm') {
      g.mirror = true;
      pose.erase(0, 1);
    }
    if (pose != "0" && pose != "90" && pose != "180" && pose != "270")
      throw std::invalid_argument("bad glyph pose in '" + s + "'");
    g.turns = static_cast<unsigned>(std::stoi(pose) / 90);
    return g;
  }

  friend bool operator==(const GlyphClass&, const GlyphClass&) = default;
};

inline std::vector<GlyphClass> dihedral_orbit(Glyph g) {
  std::vector<GlyphClass> out;
  for (bool m : {false, true})
    for (unsigned t = 0; t < 4; ++t) out.push_back({g, t, m});
  return out;
}

struct GlyphJitter {
  double dx = 0, dy = 0;   // offset in pixels
  double thickness = 1.5;  // stroke width in pixels
  double scale = 1.0;
};

namespace detail {

struct Segment {
  double x0, y0, x1, y1;
};

inline std::vector<Segment> glyph_segments(Glyph g) {
  switch (g) {
    case Glyph::l_shape: return {{-0.45, -0.7, -0.45, 0.7}, {-0.45, 0.7, 0.55, 0.7}};
    case Glyph::t_shape: return {{-0.65, -0.65, 0.65, -0.65}, {0, -0.65, 0, 0.7}};
    case Glyph::h_bar: return {{-0.7, 0, 0.7, 0}};
    case Glyph::arc: {
      std::vector<Segment> segs;
      const int steps = 12;
      for (int i = 0; i < steps; ++i) {
        const double a0 = 3.14159265358979 * (0.5 + static_cast<double>(i) / steps);
        const double a1 = 3.14159265358979 * (0.5 + static_cast<double>(i + 1) / steps);
        segs.push_back({0.25 + 0.65 * std::cos(a0), 0.65 * std::sin(a0),
                        0.25 + 0.65 * std::cos(a1), 0.65 * std::sin(a1)});
      }
      return segs;
    }
    case Glyph::v_bar: return {{0, -0.7, 0, 0.7}};
    case Glyph::diagonal: return {{-0.6, 0.6, 0.6, -0.6}};
    case Glyph::plus: return {{-0.55, 0, 0.55, 0}, {0, -0.55, 0, 0.55}};
    case Glyph::box:
      return {{-0.5, -0.5, 0.5, -0.5}, {0.5, -0.5, 0.5, 0.5},
              {0.5, 0.5, -0.5, 0.5}, {-0.5, 0.5, -0.5, -0.5}};
    case Glyph::f_shape:
      return {{-0.4, -0.7, -0.4, 0.7}, {-0.4, -0.7, 0.5, -0.7}, {-0.4, 0, 0.3, 0}};
    case Glyph::seven: return {{-0.55, -0.65, 0.55, -0.65}, {0.55, -0.65, -0.15, 0.7}};
    case Glyph::anti_diagonal: return {{-0.6, -0.6, 0.6, 0.6}};
  }
  return {};
}

inline double segment_distance(double px, double py, const Segment& s) {
  const double vx = s.x1 - s.x0, vy = s.y1 - s.y0;
  const double len2 = vx * vx + vy * vy;
  double t = len2 > 0 ? ((px - s.x0) * vx + (py - s.y0) * vy) / len2 : 0;
  t = std::clamp(t, 0.0, 1.0);
  const double dx = px - (s.x0 + t * vx), dy = py - (s.y0 + t * vy);
  return std::sqrt(dx * dx + dy * dy);
}

}  // namespace detail

template <typename T>
Tensor<T> render_glyph(const GlyphClass& g, std::size_t size, const GlyphJitter& j) {
  Tensor<T> img({size, size, 1});
  const double half = (static_cast<double>(size) - 1) / 2;
  const double extent = static_cast<double>(size) / 2 * 0.8 * j.scale;
  auto pose = [&](double& x, double& y) {
    if (g.mirror) x = -x;
    for (unsigned t = 0; t < g.turns % 4; ++t) {
      const double nx = -y;
      y = x;
      x = nx;
    }
  };
  auto segs = detail::glyph_segments(g.shape);
  for (auto& s : segs) {
    pose(s.x0, s.y0);
    pose(s.x1, s.y1);
    s = {half + j.dx + s.x0 * extent, half + j.dy + s.y0 * extent,
         half + j.dx + s.x1 * extent, half + j.dy + s.y1 * extent};
  }
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      double d = 1e9;
      for (const auto& s : segs)
        d = std::min(d, detail::segment_distance(static_cast<double>(x),
                                                 static_cast<double>(y), s));
      const double v = std::clamp(j.thickness / 2 + 0.5 - d, 0.0, 1.0);
      img.at(y, x, 0) = static_cast<T>(v);
    }
  }
  return img;
}

template <typename T>
Tensor<T> render_glyph(Glyph g, std::size_t size, const GlyphJitter& j) {
  return render_glyph<T>(GlyphClass{g}, size, j);
}

// Uneven corner bracket in the top-left corner. It has no symmetry under
// flips or quarter turns, so it pins down the orientation of the image.
template <typename T>
void draw_corner_marker(Tensor<T>& img) {
  const std::size_t size = img.dim(0);
  const double s = static_cast<double>(size);
  const detail::Segment segs[] = {{0.5, 0.5, 0.375 * s, 0.5}, {0.5, 0.5, 0.5, 0.1875 * s}};
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < img.dim(1); ++x) {
      double d = 1e9;
      for (const auto& seg : segs)
        d = std::min(d, detail::segment_distance(static_cast<double>(x),
                                                 static_cast<double>(y), seg));
      const double v = std::clamp(1.1 - d, 0.0, 1.0);
      T& px = img.at(y, x, 0);
      px = std::max(px, static_cast<T>(v));
    }
  }
}

struct GlyphConfig {
  std::size_t n_per_class = 100;
  std::size_t k = 2;
  std::size_t size = 16;
  std::uint64_t seed = 0;
  double noise = 0.0;       // std-dev of additive Gaussian pixel noise
  double max_shift = 1.0;   // pixels, uniform in [-max_shift, max_shift]
  std::vector<GlyphClass> classes;  // overrides k; empty = the first k glyphs
  bool marker = false;         // draw the corner marker on every image

  std::size_t class_count() const { return classes.empty() ? k : classes.size(); }
  GlyphClass glyph_of(std::size_t c) const {
    return classes.empty() ? GlyphClass{static_cast<Glyph>(c)} : classes[c];
  }
};

// Balanced, shuffled, fully determined by the config.
template <typename T>
Dataset<T> gen_glyphs(const GlyphConfig& cfg) {
  const std::size_t k = cfg.class_count();
  if (k < 2 || k > kGlyphCount) {
    throw std::invalid_argument("gen_glyphs: k must be in [2, " +
                                std::to_string(kGlyphCount) + "]");
  }
  if (cfg.size < 8) throw std::invalid_argument("gen_glyphs: size must be >= 8");
  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> shift(-cfg.max_shift, cfg.max_shift);
  std::uniform_real_distribution<double> thick(1.0, 2.0);
  std::uniform_real_distribution<double> scale(0.85, 1.05);
  std::normal_distribution<double> noise(0.0, cfg.noise > 0 ? cfg.noise : 1.0);
  Dataset<T> ds;
  ds.k = k;
  for (std::size_t i = 0; i < cfg.n_per_class; ++i) {
    for (std::size_t c = 0; c < k; ++c) {
      GlyphJitter j{shift(rng), shift(rng), thick(rng), scale(rng)};
      Tensor<T> img = render_glyph<T>(cfg.glyph_of(c), cfg.size, j);
      if (cfg.marker) draw_corner_marker(img);
      if (cfg.noise > 0) {
        for (auto& v : img.data())
          v = static_cast<T>(std::clamp(static_cast<double>(v) + noise(rng), 0.0, 1.0));
      }
      ds.images.push_back(std::move(img));
      ds.labels.push_back(c);
    }
  }
  std::vector<std::size_t> order(ds.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);
  Dataset<T> out;
  out.k = ds.k;
  for (auto i : order) {
    out.images.push_back(std::move(ds.images[i]));
    out.labels.push_back(ds.labels[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Distortion harness.

struct DistortionConfig {
  double probability = 0.5;
  TransformMode mode = TransformMode::standard;
  LengthRange lengths{0, 0};  // {0, 0}: [1, 2] in coarse mode, [1, 5] otherwise
  std::uint64_t seed = 0;
  std::size_t max_len = 10;

  LengthRange range() const {
    if (lengths.lo == 0 && lengths.hi == 0)
      return mode == TransformMode::coarse ? LengthRange{1, 2} : LengthRange{1, 5};
    return lengths;
  }

  void validate() const {
    if (!(probability >= 0 && probability <= 1))
      throw std::invalid_argument("distort: probability outside [0, 1]");
    const LengthRange r = range();
    if (r.lo < 1 || r.lo > r.hi || r.hi > max_len)
      throw std::invalid_argument("distort: chain lengths must satisfy 1 <= min <= max <= " +
                                  std::to_string(max_len));
  }
};

template <typename T>
struct Distorted {
  Dataset<T> data;
  std::vector<TransformChain> chains;  // empty chain = left untouched
};

template <typename T>
Distorted<T> distort(const Dataset<T>& ds, const DistortionConfig& cfg) {
  cfg.validate();
  const TransformSet set = TransformSet::of(cfg.mode);
  std::mt19937_64 rng(cfg.seed);
  std::bernoulli_distribution coin(cfg.probability);
  Distorted<T> out;
  out.data.k = ds.k;
  out.data.labels = ds.labels;
  out.chains.resize(ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (coin(rng)) {
      out.chains[i] = random_chain(rng, cfg.range(), set, cfg.max_len);
      out.data.images.push_back(apply_chain(ds.images[i], out.chains[i], cfg.max_len));
    } else {
      out.data.images.push_back(ds.images[i]);
    }
  }
  return out;
}

}  // namespace preprl
