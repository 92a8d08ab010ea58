#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <random>

#include "preprl/transforms.hpp"

using namespace preprl;

namespace {

Tensor<float> random_image(std::size_t h, std::size_t w, std::size_t c, std::mt19937_64& rng) {
  Tensor<float> t({h, w, c});
  std::uniform_real_distribution<float> u(0, 1);
  for (auto& v : t.data()) v = u(rng);
  return t;
}

// Counter-clockwise quarter turn of a square image by index permutation.
Tensor<float> quarter_turn(const Tensor<float>& img) {
  const std::size_t n = img.dim(0), c = img.dim(2);
  Tensor<float> out(img.shape());
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x)
      for (std::size_t k = 0; k < c; ++k) out.at(y, x, k) = img.at(x, n - 1 - y, k);
  return out;
}

Tensor<float> mirror(const Tensor<float>& img, bool columns) {
  const std::size_t h = img.dim(0), w = img.dim(1), c = img.dim(2);
  Tensor<float> out(img.shape());
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t k = 0; k < c; ++k)
        out.at(y, x, k) = columns ? img.at(y, w - 1 - x, k) : img.at(h - 1 - y, x, k);
  return out;
}

// Step-by-step application for flips and quarter turns only.
Tensor<float> sequential(Tensor<float> img, const TransformChain& chain) {
  for (const auto& t : chain) {
    switch (t.kind) {
      case TransformKind::flip_h: img = mirror(img, true); break;
      case TransformKind::flip_v: img = mirror(img, false); break;
      case TransformKind::flip_hv: img = mirror(mirror(img, true), false); break;
      case TransformKind::rotate: {
        const int turns = ((t.angle / 90) % 4 + 4) % 4;
        for (int i = 0; i < turns; ++i) img = quarter_turn(img);
        break;
      }
    }
  }
  return img;
}

}  // namespace

TEST(TransformId, TextRoundTrip) {
  const auto set = TransformSet::extended();
  for (const auto& t : set.ids()) EXPECT_EQ(TransformId::parse(t.str()), t);
  EXPECT_EQ(TransformId::rotate(-8).str(), "rot(-8)");
  EXPECT_EQ(TransformId::rotate(90).str(), "rot(+90)");
  EXPECT_THROW(TransformId::parse("rot(x)"), FormatError);
  EXPECT_THROW(TransformId::parse("spin"), FormatError);
}

TEST(TransformId, Inverses) {
  EXPECT_EQ(inverse(TransformId::flip_v()), TransformId::flip_v());
  EXPECT_EQ(inverse(TransformId::rotate(4)), TransformId::rotate(-4));
  EXPECT_EQ(inverse(TransformId::rotate(90)), TransformId::rotate(-90));
  const TransformChain chain{TransformId::flip_h(), TransformId::rotate(2)};
  EXPECT_EQ(inverse(chain), (TransformChain{TransformId::rotate(-2), TransformId::flip_h()}));
}

TEST(TransformSet, StandardHasElevenInverseClosedIds) {
  const auto s = TransformSet::standard();
  ASSERT_EQ(s.size(), 11u);
  for (std::size_t j = 0; j < s.size(); ++j) EXPECT_EQ(s[s.inverse_of(j)], inverse(s[j]));
  EXPECT_EQ(TransformSet::extended().size(), 13u);
  EXPECT_THROW(TransformSet({TransformId::rotate(3)}), std::invalid_argument);
}

TEST(ApplyChain, EmptyAndInvolutionsAreExact) {
  std::mt19937_64 rng(1);
  const auto img = random_image(9, 9, 2, rng);
  EXPECT_EQ(apply_chain(img, {}), img);
  EXPECT_EQ(apply_chain(img, {TransformId::flip_h(), TransformId::flip_h()}), img);
  EXPECT_EQ(apply_chain(img, {TransformId::rotate(8), TransformId::rotate(-8)}), img);
}

TEST(ApplyChain, FlipHReversesColumns) {
  const Tensor<float> img({2, 2, 1}, {1, 2, 3, 4});
  EXPECT_EQ(apply_chain(img, {TransformId::flip_h()}).vec(), (std::vector<float>{2, 1, 4, 3}));
  EXPECT_EQ(apply_chain(img, {TransformId::flip_v()}).vec(), (std::vector<float>{3, 4, 1, 2}));
}

TEST(ApplyChain, QuarterTurnMovesBarExactly) {
  Tensor<float> bar({7, 7, 1});
  for (std::size_t x = 0; x < 7; ++x) bar.at(3, x, 0) = 1;
  const auto out = apply_chain(bar, {TransformId::rotate(90)});
  Tensor<float> vertical({7, 7, 1});
  for (std::size_t y = 0; y < 7; ++y) vertical.at(y, 3, 0) = 1;
  EXPECT_EQ(out, vertical);

  // an off-centre pixel travels counter-clockwise: right edge to top edge
  Tensor<float> dot({5, 5, 1});
  dot.at(2, 4, 0) = 1;
  EXPECT_EQ(apply_chain(dot, {TransformId::rotate(90)}).at(0, 2, 0), 1);
}

TEST(ApplyChain, CoarseChainsMatchSequentialPermutations) {
  std::mt19937_64 rng(2);
  const auto coarse = TransformSet::coarse();
  for (int i = 0; i < 300; ++i) {
    const auto img = random_image(6, 6, 3, rng);
    const auto chain = random_chain(rng, {1, 10}, coarse, 10);
    EXPECT_EQ(apply_chain(img, chain), sequential(img, chain)) << chain_str(chain);
  }
}

TEST(ApplyChain, SmallRotationMatchesBilinearOracle) {
  std::mt19937_64 rng(3);
  const auto img = random_image(8, 8, 1, rng);
  const int deg = 4;
  const double r = deg * std::acos(-1.0) / 180;
  const double cx = 3.5, cy = 3.5;
  auto px = [&](long y, long x) -> double {
    return (y < 0 || x < 0 || y > 7 || x > 7) ? 0.0 : img.at(y, x, 0);
  };
  const auto out = apply_chain(img, {TransformId::rotate(deg)});
  for (std::size_t y = 0; y < 8; ++y) {
    for (std::size_t x = 0; x < 8; ++x) {
      // source of a counter-clockwise rotation in image coordinates (y down)
      const double dx = x - cx, dy = y - cy;
      const double sx = cx + dx * std::cos(r) - dy * std::sin(r);
      const double sy = cy + dx * std::sin(r) + dy * std::cos(r);
      const long x0 = static_cast<long>(std::floor(sx)), y0 = static_cast<long>(std::floor(sy));
      const double fx = sx - x0, fy = sy - y0;
      const double want = (1 - fy) * ((1 - fx) * px(y0, x0) + fx * px(y0, x0 + 1)) +
                          fy * ((1 - fx) * px(y0 + 1, x0) + fx * px(y0 + 1, x0 + 1));
      EXPECT_NEAR(out.at(y, x, 0), want, 1e-5) << y << "," << x;
    }
  }
}

TEST(ApplyChain, RejectsChainsBeyondMaxLen) {
  const Tensor<float> img({3, 3, 1});
  EXPECT_THROW(apply_chain(img, TransformChain(11, TransformId::flip_h()), 10),
               std::invalid_argument);
  EXPECT_NO_THROW(apply_chain(img, TransformChain(10, TransformId::flip_h()), 10));
}

TEST(ApplyChain, ChainThenInverseIsIdentityOnNonSquareImages) {
  std::mt19937_64 rng(4);
  const auto set = TransformSet::standard();
  for (int i = 0; i < 200; ++i) {
    const auto img = random_image(5, 9, 3, rng);
    auto chain = random_chain(rng, {1, 5}, set, 10);
    const auto inv = inverse(chain);
    chain.insert(chain.end(), inv.begin(), inv.end());
    EXPECT_EQ(apply_chain(img, chain, 10), img);
  }
}

TEST(Canonical, GroupStructure) {
  EXPECT_TRUE(CanonicalTransform::of({TransformId::rotate(90), TransformId::rotate(90),
                                      TransformId::flip_hv()})
                  .is_identity());
  // mirroring reverses the sense of a later rotation
  EXPECT_TRUE(CanonicalTransform::of({TransformId::rotate(1), TransformId::flip_h(),
                                      TransformId::rotate(1), TransformId::flip_h()})
                  .is_identity());
}

TEST(RandomChain, LengthAndErrors) {
  std::mt19937_64 rng(5);
  const auto set = TransformSet::standard();
  for (int i = 0; i < 50; ++i) EXPECT_EQ(random_chain(rng, {1, 1}, set).size(), 1u);
  EXPECT_THROW(random_chain(rng, {3, 2}, set), std::invalid_argument);
  EXPECT_THROW(random_chain(rng, {0, 2}, set), std::invalid_argument);
  for (const auto& t : random_chain(rng, {10, 10}, TransformSet::coarse()))
    EXPECT_TRUE(TransformSet::coarse().index_of(t).has_value());
}

TEST(RandomChain, IdsAreUniform) {
  std::mt19937_64 rng(6);
  const auto set = TransformSet::standard();
  std::map<std::string, int> count;
  int total = 0;
  while (total < 10000) {
    for (const auto& t : random_chain(rng, {1, 1}, set)) {
      ++count[t.str()];
      ++total;
    }
  }
  const double p = 1.0 / 11, sigma = std::sqrt(total * p * (1 - p));
  ASSERT_EQ(count.size(), 11u);
  for (const auto& [id, c] : count) EXPECT_LE(std::abs(c - total * p), 3 * sigma) << id;
}
