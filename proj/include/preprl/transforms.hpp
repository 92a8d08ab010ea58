#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "preprl/tensor.hpp"

namespace preprl {

enum class TransformKind { flip_h, flip_v, flip_hv, rotate };

// One discrete preprocessing transformation. Rotation angles are whole
// degrees, positive = counter-clockwise.
struct TransformId {
  TransformKind kind = TransformKind::flip_h;
  int angle = 0;

  static TransformId flip_h() { return {TransformKind::flip_h, 0}; }
  static TransformId flip_v() { return {TransformKind::flip_v, 0}; }
  static TransformId flip_hv() { return {TransformKind::flip_hv, 0}; }
  static TransformId rotate(int degrees) { return {TransformKind::rotate, degrees}; }

  bool is_flip() const { return kind != TransformKind::rotate; }

  std::string str() const {
    switch (kind) {
      case TransformKind::flip_h: return "flip_h";
      case TransformKind::flip_v: return "flip_v";
      case TransformKind::flip_hv: return "flip_hv";
      case TransformKind::rotate:
        return "rot(" + std::string(angle >= 0 ? "+" : "-") +
               std::to_string(std::abs(angle)) + ")";
    }
    return "?";
  }

  static TransformId parse(const std::string& s) {
    if (s == "flip_h") return flip_h();
    if (s == "flip_v") return flip_v();
    if (s == "flip_hv") return flip_hv();
    if (s.size() > 5 && s.rfind("rot(", 0) == 0 && s.back() == ')') {
      const std::string body = s.substr(4, s.size() - 5);
      std::size_t used = 0;
      int deg = 0;
      try {
        deg = std::stoi(body, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used == body.size() && used > 0) return rotate(deg);
    }
    throw FormatError("unknown transform '" + s + "'");
  }

  friend bool operator==(const TransformId&, const TransformId&) = default;
};

using TransformChain = std::vector<TransformId>;

inline TransformId inverse(const TransformId& t) {
  return t.is_flip() ? t : TransformId::rotate(-t.angle);
}

// Element-wise inverses in reverse order.
inline TransformChain inverse(const TransformChain& chain) {
  TransformChain out;
  for (auto it = chain.rbegin(); it != chain.rend(); ++it) out.push_back(inverse(*it));
  return out;
}

enum class TransformMode { standard, coarse, extended };

inline const char* to_string(TransformMode m) {
  switch (m) {
    case TransformMode::standard: return "standard";
    case TransformMode::coarse: return "coarse";
    case TransformMode::extended: return "extended";
  }
  return "?";
}

inline TransformMode parse_transform_mode(const std::string& s) {
  if (s == "standard") return TransformMode::standard;
  if (s == "coarse") return TransformMode::coarse;
  if (s == "extended") return TransformMode::extended;
  throw std::invalid_argument("unknown transform mode '" + s + "'");
}

// An indexed, inverse-closed set of transformations.
//   standard: 3 flips + rotations of -1,-2,-4,-8,+8,+4,+2,+1 degrees (n = 11)
//   coarse:   3 flips + rotations of +90/-90 (distortion sampling)
//   extended: standard + rotations of +90/-90 (n = 13)
class TransformSet {
 public:
  explicit TransformSet(std::vector<TransformId> ids) : ids_(std::move(ids)) {
    for (const auto& t : ids_) {
      if (!index_of(inverse(t))) {
        throw std::invalid_argument("transform set not closed under inverse: " +
                                    t.str());
      }
    }
  }

  static TransformSet standard() {
    using T = TransformId;
    return TransformSet({T::flip_h(), T::flip_v(), T::flip_hv(), T::rotate(-1),
                         T::rotate(-2), T::rotate(-4), T::rotate(-8), T::rotate(8),
                         T::rotate(4), T::rotate(2), T::rotate(1)});
  }
  static TransformSet coarse() {
    using T = TransformId;
    return TransformSet({T::flip_h(), T::flip_v(), T::flip_hv(), T::rotate(90),
                         T::rotate(-90)});
  }
  static TransformSet extended() {
    auto ids = standard().ids_;
    ids.push_back(TransformId::rotate(90));
    ids.push_back(TransformId::rotate(-90));
    return TransformSet(std::move(ids));
  }
  static TransformSet of(TransformMode mode) {
    switch (mode) {
      case TransformMode::standard: return standard();
      case TransformMode::coarse: return coarse();
      case TransformMode::extended: return extended();
    }
    return standard();
  }

  std::size_t size() const { return ids_.size(); }
  const TransformId& operator[](std::size_t j) const { return ids_.at(j); }
  const std::vector<TransformId>& ids() const { return ids_; }

  std::optional<std::size_t> index_of(const TransformId& t) const {
    for (std::size_t j = 0; j < ids_.size(); ++j)
      if (ids_[j] == t) return j;
    return std::nullopt;
  }

  std::size_t inverse_of(std::size_t j) const { return *index_of(inverse(ids_.at(j))); }

 private:
  std::vector<TransformId> ids_;
};

// A chain reduced to "rotate by `angle` about the centre, then apply the flip
// group element `flips`" (bit 0 mirrors columns, bit 1 mirrors rows).
// Composition follows the geometry: a mirror reverses the sense of any later
// rotation, and a 180 degree rotation is folded into the flip group.
struct CanonicalTransform {
  int angle = 0;
  unsigned flips = 0;

  CanonicalTransform then(const TransformId& t) const {
    CanonicalTransform c = *this;
    switch (t.kind) {
      case TransformKind::flip_h: c.flips ^= 1u; break;
      case TransformKind::flip_v: c.flips ^= 2u; break;
      case TransformKind::flip_hv: c.flips ^= 3u; break;
      case TransformKind::rotate:
        c.angle += (c.flips == 1u || c.flips == 2u) ? -t.angle : t.angle;
        break;
    }
    c.normalize();
    return c;
  }

  static CanonicalTransform of(const TransformChain& chain) {
    CanonicalTransform c;
    for (const auto& t : chain) c = c.then(t);
    return c;
  }

  bool is_identity() const { return angle == 0 && flips == 0; }

  friend bool operator==(const CanonicalTransform&, const CanonicalTransform&) = default;

 private:
  void normalize() {
    angle %= 360;
    if (angle > 180) angle -= 360;
    if (angle <= -180) angle += 360;
    if (angle == 180) {
      angle = 0;
      flips ^= 3u;
    }
  }
};

namespace detail {

// Exact trig for whole multiples of 90 degrees.
inline void unit_rotation(int degrees, double& c, double& s) {
  const int d = ((degrees % 360) + 360) % 360;
  switch (d) {
    case 0: c = 1; s = 0; return;
    case 90: c = 0; s = 1; return;
    case 180: c = -1; s = 0; return;
    case 270: c = 0; s = -1; return;
    default: {
      const double r = degrees * 3.14159265358979323846 / 180.0;
      c = std::cos(r);
      s = std::sin(r);
    }
  }
}

}  // namespace detail

// Rotates an H x W x C image about its centre with bilinear sampling; pixels
// sampled from outside the frame are 0. Integer-aligned source positions are
// copied exactly, so multiples of 90 degrees on square images are pure
// pixel permutations.
template <typename T>
Tensor<T> rotate_image(const Tensor<T>& img, int degrees) {
  if (img.rank() != 3) throw ShapeError("rotate: expected H x W x C image");
  const std::size_t h = img.dim(0), w = img.dim(1), ch = img.dim(2);
  double c = 1, s = 0;
  detail::unit_rotation(degrees, c, s);
  const double cy = (static_cast<double>(h) - 1) / 2;
  const double cx = (static_cast<double>(w) - 1) / 2;
  Tensor<T> out(img.shape());
  auto pixel = [&](std::ptrdiff_t y, std::ptrdiff_t x, std::size_t k) -> T {
    if (y < 0 || x < 0 || y >= static_cast<std::ptrdiff_t>(h) ||
        x >= static_cast<std::ptrdiff_t>(w))
      return T(0);
    return img.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x), k);
  };
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      // Output offset in math orientation (v points up), mapped back through
      // the inverse rotation.
      const double u = static_cast<double>(x) - cx;
      const double v = cy - static_cast<double>(y);
      const double su = u * c + v * s;
      const double sv = -u * s + v * c;
      const double xs = cx + su;
      const double ys = cy - sv;
      const double x0 = std::floor(xs), y0 = std::floor(ys);
      const double fx = xs - x0, fy = ys - y0;
      const auto ix = static_cast<std::ptrdiff_t>(x0);
      const auto iy = static_cast<std::ptrdiff_t>(y0);
      for (std::size_t k = 0; k < ch; ++k) {
        T val;
        if (fx == 0 && fy == 0) {
          val = pixel(iy, ix, k);
        } else {
          const double p00 = pixel(iy, ix, k), p01 = pixel(iy, ix + 1, k);
          const double p10 = pixel(iy + 1, ix, k), p11 = pixel(iy + 1, ix + 1, k);
          val = static_cast<T>((1 - fy) * ((1 - fx) * p00 + fx * p01) +
                               fy * ((1 - fx) * p10 + fx * p11));
        }
        out.at(y, x, k) = val;
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> flip_image(const Tensor<T>& img, unsigned flips) {
  if (img.rank() != 3) throw ShapeError("flip: expected H x W x C image");
  if (flips == 0) return img;
  const std::size_t h = img.dim(0), w = img.dim(1), ch = img.dim(2);
  Tensor<T> out(img.shape());
  for (std::size_t y = 0; y < h; ++y) {
    const std::size_t sy = (flips & 2u) ? h - 1 - y : y;
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t sx = (flips & 1u) ? w - 1 - x : x;
      for (std::size_t k = 0; k < ch; ++k) out.at(y, x, k) = img.at(sy, sx, k);
    }
  }
  return out;
}

template <typename T>
Tensor<T> apply_canonical(const Tensor<T>& original, const CanonicalTransform& c) {
  Tensor<T> rotated = c.angle == 0 ? original : rotate_image(original, c.angle);
  return flip_image(rotated, c.flips);
}

// Replays `chain` against the original image in a single resampling pass.
template <typename T>
Tensor<T> apply_chain(const Tensor<T>& original, const TransformChain& chain,
                      std::size_t max_len = 10) {
  if (chain.size() > max_len) {
    throw std::invalid_argument("apply_chain: chain length " +
                                std::to_string(chain.size()) + " exceeds max_len " +
                                std::to_string(max_len));
  }
  return apply_canonical(original, CanonicalTransform::of(chain));
}

struct LengthRange {
  std::size_t lo = 1;
  std::size_t hi = 5;
};

// Uniform length in [lo, hi], uniform ids from `set`.
template <typename Rng>
TransformChain random_chain(Rng& rng, LengthRange range, const TransformSet& set,
                            std::size_t max_len = 10) {
  if (range.lo == 0 || range.hi < range.lo || range.hi > max_len) {
    throw std::invalid_argument("random_chain: invalid length range [" +
                                std::to_string(range.lo) + ", " +
                                std::to_string(range.hi) + "]");
  }
  std::uniform_int_distribution<std::size_t> len(range.lo, range.hi);
  std::uniform_int_distribution<std::size_t> pick(0, set.size() - 1);
  TransformChain chain(len(rng));
  for (auto& t : chain) t = set[pick(rng)];
  return chain;
}

inline std::string chain_str(const TransformChain& chain) {
  std::string s;
  for (std::size_t i = 0; i < chain.size(); ++i) {
    if (i) s += ' ';
    s += chain[i].str();
  }
  return s;
}

}  // namespace preprl
