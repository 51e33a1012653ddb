#include "medmm/hier_encoder.hpp"

#include <algorithm>
#include <atomic>
#include <string>
#include <thread>

#include "medmm/error.hpp"
#include "medmm/rng.hpp"

namespace medmm {

void EncoderSpec::validate(uint32_t base) const {
  if (patch == 0 || base % patch != 0) {
    throw Error(ErrorCode::InvalidArgument,
                "encoder.patch " + std::to_string(patch) + " must divide base " +
                    std::to_string(base));
  }
  if (dim == 0) throw Error(ErrorCode::InvalidArgument, "encoder.dim must be >= 1");
  if (kind == EncoderKind::PatchMean && dim != 3) {
    throw Error(ErrorCode::InvalidArgument,
                "encoder.dim must be 3 for PatchMean, got " + std::to_string(dim));
  }
}

EncoderKind parse_encoder_kind(const std::string& name) {
  if (name == "PatchMean") return EncoderKind::PatchMean;
  if (name == "SeededLinear") return EncoderKind::SeededLinear;
  if (name == "Precomputed") return EncoderKind::Precomputed;
  throw Error(ErrorCode::InvalidArgument, "encoder.kind: unknown value '" + name + "'");
}

std::string to_string(EncoderKind kind) {
  switch (kind) {
    case EncoderKind::PatchMean: return "PatchMean";
    case EncoderKind::SeededLinear: return "SeededLinear";
    case EncoderKind::Precomputed: return "Precomputed";
  }
  return "?";
}

std::vector<float> seeded_projection(uint32_t patch, uint32_t dim, uint64_t seed) {
  SplitMix64 rng(seed);
  std::vector<float> m(static_cast<size_t>(3) * patch * patch * dim);
  for (float& v : m) v = static_cast<float>(rng.uniform(-1.0, 1.0));
  return m;
}

TileEncoder::TileEncoder(const EncoderSpec& spec, uint32_t base)
    : spec_(spec), base_(base) {
  spec_.validate(base_);
  if (spec_.kind == EncoderKind::Precomputed) {
    throw Error(ErrorCode::SpecMismatch,
                "Precomputed encoders have no tile path; use load_precomputed_features");
  }
  if (spec_.kind == EncoderKind::SeededLinear) {
    projection_ = seeded_projection(spec_.patch, spec_.dim, spec_.seed);
  }
}

FeatureGrid TileEncoder::encode(const ImageF32& tile) const {
  if (tile.height != base_ || tile.width != base_) {
    throw Error(ErrorCode::SpecMismatch,
                "tile is " + std::to_string(tile.height) + "x" +
                    std::to_string(tile.width) + ", encoder base is " +
                    std::to_string(base_));
  }
  const uint32_t p = spec_.patch;
  const uint32_t g = base_ / p;
  FeatureGrid out{g, g, spec_.dim, {}};
  out.values.resize(static_cast<size_t>(g) * g * spec_.dim);
  std::vector<double> acc(spec_.dim);

  for (uint32_t gy = 0; gy < g; ++gy) {
    for (uint32_t gx = 0; gx < g; ++gx) {
      std::fill(acc.begin(), acc.end(), 0.0);
      if (spec_.kind == EncoderKind::PatchMean) {
        for (uint32_t y = 0; y < p; ++y)
          for (uint32_t x = 0; x < p; ++x)
            for (uint32_t c = 0; c < 3; ++c) acc[c] += tile.at(gy * p + y, gx * p + x, c);
        for (double& a : acc) a /= static_cast<double>(p) * p;
      } else {
        size_t row = 0;  // row of the projection matrix = flattened patch index
        for (uint32_t y = 0; y < p; ++y) {
          for (uint32_t x = 0; x < p; ++x) {
            for (uint32_t c = 0; c < 3; ++c, ++row) {
              const double v = tile.at(gy * p + y, gx * p + x, c);
              const float* m = &projection_[row * spec_.dim];
              for (uint32_t d = 0; d < spec_.dim; ++d) acc[d] += v * m[d];
            }
          }
        }
      }
      float* dst = &out.values[(static_cast<size_t>(gy) * g + gx) * spec_.dim];
      for (uint32_t d = 0; d < spec_.dim; ++d) dst[d] = static_cast<float>(acc[d]);
    }
  }
  return out;
}

FeatureGrid encode_tile(const ImageF32& tile, uint32_t base, const EncoderSpec& spec) {
  return TileEncoder(spec, base).encode(tile);
}

FeatureGrid encode_scale(const ImageF32& scaled, uint32_t base, const EncoderSpec& spec,
                         unsigned threads) {
  const TileEncoder encoder(spec, base);
  const TileGrid tiles = split_tiles(scaled, base);
  std::vector<FeatureGrid> encoded(tiles.tiles.size());

  const unsigned workers =
      std::clamp<unsigned>(threads, 1, static_cast<unsigned>(tiles.tiles.size()));
  if (workers == 1) {
    for (size_t k = 0; k < tiles.tiles.size(); ++k) encoded[k] = encoder.encode(tiles.tiles[k]);
  } else {
    std::atomic<size_t> next{0};
    std::vector<std::jthread> pool;
    std::vector<std::exception_ptr> errors(workers);
    for (unsigned w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        try {
          for (size_t k = next++; k < tiles.tiles.size(); k = next++) {
            encoded[k] = encoder.encode(tiles.tiles[k]);
          }
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    pool.clear();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }

  const uint32_t g = encoder.grid_side();
  const uint32_t dim = spec.dim;
  FeatureGrid out{tiles.rows * g, tiles.cols * g, dim, {}};
  out.values.resize(static_cast<size_t>(out.h) * out.w * dim);
  const size_t run = static_cast<size_t>(g) * dim;
  for (uint32_t i = 0; i < tiles.rows; ++i) {
    for (uint32_t j = 0; j < tiles.cols; ++j) {
      const FeatureGrid& src = encoded[static_cast<size_t>(i) * tiles.cols + j];
      for (uint32_t y = 0; y < g; ++y) {
        std::copy_n(&src.values[static_cast<size_t>(y) * run], run,
                    &out.values[((static_cast<size_t>(i) * g + y) * out.w + j * g) * dim]);
      }
    }
  }
  return out;
}

FeatureGrid pool_to_base(const FeatureGrid& big, uint32_t g) {
  if (g == 0 || big.h != big.w || big.h % g != 0) {
    throw Error(ErrorCode::NonDivisibleGrid,
                "grid " + std::to_string(big.h) + "x" + std::to_string(big.w) +
                    " cannot pool to " + std::to_string(g) + "x" + std::to_string(g));
  }
  const uint32_t k = big.h / g;
  if (k == 1) return big;
  FeatureGrid out{g, g, big.dim, {}};
  out.values.resize(static_cast<size_t>(g) * g * big.dim);
  std::vector<double> acc(big.dim);
  const double inv = 1.0 / (static_cast<double>(k) * k);
  for (uint32_t oy = 0; oy < g; ++oy) {
    for (uint32_t ox = 0; ox < g; ++ox) {
      std::fill(acc.begin(), acc.end(), 0.0);
      for (uint32_t y = 0; y < k; ++y)
        for (uint32_t x = 0; x < k; ++x)
          for (uint32_t c = 0; c < big.dim; ++c) acc[c] += big.at(oy * k + y, ox * k + x, c);
      float* dst = &out.values[(static_cast<size_t>(oy) * g + ox) * big.dim];
      for (uint32_t c = 0; c < big.dim; ++c) dst[c] = static_cast<float>(acc[c] * inv);
    }
  }
  return out;
}

MultiScaleFeatures encode_multiscale(const ImageF32& img, const ScaleSet& s,
                                     const EncoderSpec& spec, unsigned threads) {
  s.validate();
  spec.validate(s.base);
  const uint32_t g = s.base / spec.patch;
  const auto levels = build_pyramid(img, s);

  MultiScaleFeatures out;
  out.g = g;
  out.dim_total = spec.dim * static_cast<uint32_t>(s.scales.size());
  out.scale_order = s;
  out.values.resize(static_cast<size_t>(g) * g * out.dim_total);
  for (size_t k = 0; k < levels.size(); ++k) {
    const FeatureGrid pooled = pool_to_base(encode_scale(levels[k], s.base, spec, threads), g);
    const uint32_t per_side = s.scales[k] / s.base;
    out.tiles_encoded += per_side * per_side;
    for (size_t cell = 0; cell < static_cast<size_t>(g) * g; ++cell) {
      std::copy_n(&pooled.values[cell * spec.dim], spec.dim,
                  &out.values[cell * out.dim_total + k * spec.dim]);
    }
  }
  return out;
}

FeatureGrid channel_block(const MultiScaleFeatures& f, size_t k) {
  const size_t n_scales = f.scale_order.scales.size();
  if (n_scales == 0 || k >= n_scales) {
    throw Error(ErrorCode::InvalidArgument, "channel block " + std::to_string(k) + " out of range");
  }
  const uint32_t dim = f.dim_total / static_cast<uint32_t>(n_scales);
  FeatureGrid out{f.g, f.g, dim, {}};
  out.values.resize(static_cast<size_t>(f.g) * f.g * dim);
  for (size_t cell = 0; cell < static_cast<size_t>(f.g) * f.g; ++cell) {
    std::copy_n(&f.values[cell * f.dim_total + k * dim], dim, &out.values[cell * dim]);
  }
  return out;
}

TensorF32 to_tensor(const FeatureGrid& grid) {
  return TensorF32({grid.h, grid.w, grid.dim}, grid.values);
}

TensorF32 to_tensor(const MultiScaleFeatures& f) {
  return TensorF32({f.g, f.g, f.dim_total}, f.values);
}

FeatureGrid grid_from_tensor(const TensorF32& t) {
  if (t.ndim() != 3) {
    throw Error(ErrorCode::ShapeMismatch,
                "feature tensor must have 3 dims, got " + std::to_string(t.ndim()));
  }
  const auto& d = t.dims();
  return FeatureGrid{d[0], d[1], d[2], std::vector<float>(t.data().begin(), t.data().end())};
}

FeatureGrid load_precomputed_features(const std::filesystem::path& path, GridShape expected) {
  const TensorF32 t = load_mstf(path);
  const auto& d = t.dims();
  if (d.size() != 3 || d[0] != expected.h || d[1] != expected.w || d[2] != expected.dim) {
    std::string got;
    for (size_t i = 0; i < d.size(); ++i) got += (i ? "," : "") + std::to_string(d[i]);
    throw Error(ErrorCode::ShapeMismatch,
                path.string() + ": dims [" + got + "], expected [" + std::to_string(expected.h) +
                    "," + std::to_string(expected.w) + "," + std::to_string(expected.dim) + "]");
  }
  return grid_from_tensor(t);
}

}  // namespace medmm
