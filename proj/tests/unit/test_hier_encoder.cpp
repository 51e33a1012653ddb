#include <algorithm>
#include <cmath>
#include <vector>

#include "doctest.h"
#include "medmm/hier_encoder.hpp"
#include "medmm/rng.hpp"
#include "support.hpp"

using namespace medmm;

namespace {

ImageF32 random_image(uint32_t side, uint64_t seed) {
  SplitMix64 rng(seed);
  ImageF32 img(side, side);
  for (auto& v : img.pixels) v = static_cast<float>(rng.uniform01());
  return img;
}

std::vector<double> reference_projection(uint32_t patch, uint32_t dim, uint64_t seed) {
  SplitMix64 rng(seed);
  std::vector<double> m(static_cast<size_t>(3) * patch * patch * dim);
  for (auto& v : m) v = static_cast<float>(rng.uniform(-1.0, 1.0));
  return m;
}

// Encodes the whole image patch by patch, with no tiling.
FeatureGrid brute_force(const ImageF32& img, const EncoderSpec& spec) {
  const uint32_t p = spec.patch;
  const uint32_t g = img.height / p;
  const auto proj = reference_projection(p, spec.dim, spec.seed);
  FeatureGrid out{g, g, spec.dim, std::vector<float>(static_cast<size_t>(g) * g * spec.dim)};
  for (uint32_t gy = 0; gy < g; ++gy)
    for (uint32_t gx = 0; gx < g; ++gx)
      for (uint32_t d = 0; d < spec.dim; ++d) {
        double acc = 0.0;
        size_t row = 0;
        for (uint32_t y = 0; y < p; ++y)
          for (uint32_t x = 0; x < p; ++x)
            for (uint32_t c = 0; c < 3; ++c, ++row) {
              const double v = img.at(gy * p + y, gx * p + x, c);
              if (spec.kind == EncoderKind::PatchMean) {
                if (c == d) acc += v;
              } else {
                acc += v * proj[row * spec.dim + d];
              }
            }
        if (spec.kind == EncoderKind::PatchMean) acc /= static_cast<double>(p) * p;
        out.values[(static_cast<size_t>(gy) * g + gx) * spec.dim + d] = static_cast<float>(acc);
      }
  return out;
}

double max_abs_diff(const FeatureGrid& a, const FeatureGrid& b) {
  REQUIRE(a.values.size() == b.values.size());
  double m = 0.0;
  for (size_t i = 0; i < a.values.size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a.values[i]) - b.values[i]));
  return m;
}

}  // namespace

TEST_SUITE("hier_encoder") {

TEST_CASE("spec validation") {
  CHECK_NOTHROW((EncoderSpec{14, 3, EncoderKind::PatchMean, 0}.validate(378)));
  CHECK_THROWS_AS((EncoderSpec{16, 3, EncoderKind::PatchMean, 0}.validate(378)), Error);
  CHECK_THROWS_AS((EncoderSpec{14, 8, EncoderKind::PatchMean, 0}.validate(378)), Error);
  CHECK_THROWS_AS((EncoderSpec{14, 0, EncoderKind::SeededLinear, 0}.validate(378)), Error);
  CHECK(parse_encoder_kind("SeededLinear") == EncoderKind::SeededLinear);
  CHECK(to_string(EncoderKind::PatchMean) == "PatchMean");
}

TEST_CASE("tile encoding geometry and constants") {
  const FeatureGrid g = encode_tile(ImageF32(378, 378, 0.5f), 378, {});
  CHECK(g.h == 27);
  CHECK(g.w == 27);
  CHECK(g.dim == 3);
  CHECK(std::all_of(g.values.begin(), g.values.end(), [](float v) { return v == 0.5f; }));
  CHECK_MEDMM_ERROR(encode_tile(ImageF32(756, 756), 378, {}), ErrorCode::SpecMismatch);
  CHECK_MEDMM_ERROR(encode_tile(ImageF32(378, 378), 378, {14, 3, EncoderKind::Precomputed, 0}),
                    ErrorCode::SpecMismatch);
}

TEST_CASE("seeded projection matches the documented draw order") {
  const auto m = seeded_projection(2, 4, 99);
  const auto ref = reference_projection(2, 4, 99);
  REQUIRE(m.size() == ref.size());
  for (size_t i = 0; i < m.size(); ++i) {
    CHECK(static_cast<double>(m[i]) == ref[i]);
    CHECK(m[i] >= -1.0f);
    CHECK(m[i] < 1.0f);
  }
}

TEST_CASE("SeededLinear is deterministic") {
  const ImageF32 img = random_image(378, 5);
  const EncoderSpec spec{14, 8, EncoderKind::SeededLinear, 42};
  const FeatureGrid a = encode_tile(img, 378, spec);
  const FeatureGrid b = encode_tile(img, 378, spec);
  CHECK(a == b);
  const FeatureGrid c = encode_tile(img, 378, {14, 8, EncoderKind::SeededLinear, 43});
  CHECK_FALSE(a == c);
}

TEST_CASE("single-tile scale equals the tile encoder") {
  const ImageF32 img = random_image(378, 6);
  const EncoderSpec spec{14, 5, EncoderKind::SeededLinear, 1};
  CHECK(encode_scale(img, 378, spec) == encode_tile(img, 378, spec));
}

TEST_CASE("tiled encoding matches the whole-image oracle") {
  for (EncoderKind kind : {EncoderKind::PatchMean, EncoderKind::SeededLinear}) {
    const EncoderSpec spec{14, kind == EncoderKind::PatchMean ? 3u : 6u, kind, 7};
    for (uint32_t side : {756u, 1134u}) {
      const ImageF32 img = random_image(side, side + static_cast<uint32_t>(kind));
      const FeatureGrid tiled = encode_scale(img, 378, spec);
      CHECK(tiled.h == side / 14);
      CHECK(max_abs_diff(tiled, brute_force(img, spec)) <= 1e-5);
    }
  }
}

TEST_CASE("thread count does not change the result") {
  const ImageF32 img = random_image(1134, 8);
  const EncoderSpec spec{14, 4, EncoderKind::SeededLinear, 3};
  const FeatureGrid one = encode_scale(img, 378, spec, 1);
  CHECK(encode_scale(img, 378, spec, 4) == one);
  CHECK(encode_scale(img, 378, spec, 16) == one);
}

TEST_CASE("average pooling") {
  SUBCASE("2x2 to 1x1") {
    const FeatureGrid big{2, 2, 1, {1, 2, 3, 4}};
    const FeatureGrid small = pool_to_base(big, 1);
    CHECK(small.values == std::vector<float>{2.5f});
  }
  SUBCASE("k == 1 is the identity") {
    const FeatureGrid big{3, 3, 2, std::vector<float>(18, 1.5f)};
    CHECK(pool_to_base(big, 3) == big);
  }
  SUBCASE("grid mean is preserved") {
    SplitMix64 rng(1);
    FeatureGrid big{6, 6, 2, std::vector<float>(72)};
    for (auto& v : big.values) v = static_cast<float>(rng.uniform(-1, 1));
    const FeatureGrid small = pool_to_base(big, 2);
    for (uint32_t c = 0; c < 2; ++c) {
      double a = 0, b = 0;
      for (size_t i = c; i < big.values.size(); i += 2) a += big.values[i];
      for (size_t i = c; i < small.values.size(); i += 2) b += small.values[i];
      CHECK(a / 36.0 == doctest::Approx(b / 4.0).epsilon(1e-6));
    }
  }
  SUBCASE("non-divisible grid") {
    CHECK_MEDMM_ERROR(pool_to_base(FeatureGrid{5, 5, 1, std::vector<float>(25)}, 2),
                      ErrorCode::NonDivisibleGrid);
  }
}

TEST_CASE("multi-scale shape law") {
  const ImageF32 img = random_image(378, 10);
  for (uint32_t dim : {3u, 8u}) {
    const EncoderKind kind = dim == 3 ? EncoderKind::PatchMean : EncoderKind::SeededLinear;
    const MultiScaleFeatures f = encode_multiscale(img, ScaleSet::default_set(), {14, dim, kind, 0});
    CHECK(f.g == 27);
    CHECK(f.dim_total == 3 * dim);
    CHECK(f.values.size() == 27u * 27u * 3u * dim);
    CHECK(f.tiles_encoded == 14);
    const TensorF32 t = to_tensor(f);
    CHECK(t.dims() == std::vector<uint32_t>{27, 27, 3 * dim});
  }
}

TEST_CASE("constant image survives every stage") {
  const MultiScaleFeatures f = encode_multiscale(ImageF32(378, 378, 0.25f), ScaleSet::default_set(), {});
  CHECK(f.dim_total == 9);
  CHECK(std::all_of(f.values.begin(), f.values.end(), [](float v) { return v == 0.25f; }));
}

TEST_CASE("channel blocks follow ascending scale order") {
  const ImageF32 img = random_image(378, 11);
  const ScaleSet s = ScaleSet::default_set();
  const EncoderSpec spec{14, 4, EncoderKind::SeededLinear, 5};
  const MultiScaleFeatures f = encode_multiscale(img, s, spec);
  const auto levels = build_pyramid(img, s);
  for (size_t k = 0; k < 3; ++k) {
    const FeatureGrid expected = pool_to_base(encode_scale(levels[k], 378, spec), 27);
    CHECK(channel_block(f, k) == expected);
  }
}

TEST_CASE("degenerate single-scale hierarchy equals the tile encoder") {
  const ImageF32 img = random_image(378, 12);
  const EncoderSpec spec{14, 3, EncoderKind::PatchMean, 0};
  const MultiScaleFeatures f = encode_multiscale(img, {378, {378}}, spec);
  CHECK(f.values == encode_tile(img, 378, spec).values);
  CHECK(f.tiles_encoded == 1);
}

TEST_CASE("multi-scale output is thread-invariant") {
  const ImageF32 img = random_image(378, 13);
  const EncoderSpec spec{14, 4, EncoderKind::SeededLinear, 9};
  const auto a = encode_multiscale(img, ScaleSet::default_set(), spec, 1);
  const auto b = encode_multiscale(img, ScaleSet::default_set(), spec, 3);
  CHECK(to_tensor(a).bit_equal(to_tensor(b)));
}

TEST_CASE("precomputed features load with shape checks") {
  testing::TempDir dir;
  SplitMix64 rng(3);
  FeatureGrid grid{27, 27, 8, std::vector<float>(27 * 27 * 8)};
  for (auto& v : grid.values) v = static_cast<float>(rng.uniform(-2, 2));
  save_mstf(dir / "f.mstf", to_tensor(grid));
  CHECK(load_precomputed_features(dir / "f.mstf", {27, 27, 8}) == grid);
  CHECK_MEDMM_ERROR(load_precomputed_features(dir / "f.mstf", {27, 27, 16}), ErrorCode::ShapeMismatch);
  CHECK(grid_from_tensor(to_tensor(grid)) == grid);
}

}  // TEST_SUITE
