#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "medmm/image_pyramid.hpp"
#include "medmm/tensor_io.hpp"

namespace medmm {

enum class EncoderKind { PatchMean, SeededLinear, Precomputed };

struct EncoderSpec {
  uint32_t patch = 14;
  uint32_t dim = 3;
  EncoderKind kind = EncoderKind::PatchMean;
  uint64_t seed = 0;

  // Throws InvalidArgument: base % patch != 0, dim == 0, or PatchMean with
  // dim != 3.
  void validate(uint32_t base) const;
};

EncoderKind parse_encoder_kind(const std::string& name);
std::string to_string(EncoderKind kind);

struct FeatureGrid {
  uint32_t h = 0;
  uint32_t w = 0;
  uint32_t dim = 0;
  std::vector<float> values;  // h*w*dim, row-major, channel fastest

  float at(uint32_t y, uint32_t x, uint32_t c) const {
    return values[(static_cast<size_t>(y) * w + x) * dim + c];
  }
  bool operator==(const FeatureGrid&) const = default;
};

struct MultiScaleFeatures {
  uint32_t g = 0;
  uint32_t dim_total = 0;
  std::vector<float> values;  // g*g*dim_total; channel block k is scale k
  ScaleSet scale_order;
  uint32_t tiles_encoded = 0;
};

// Projection matrix of the SeededLinear encoder: (3*patch*patch) x dim,
// row-major, entries uniform in [-1, 1) drawn in order from SplitMix64(seed).
std::vector<float> seeded_projection(uint32_t patch, uint32_t dim,
                                     uint64_t seed);

// Reference encoder for one base-resolution tile. Both kinds are local to a
// patch, which makes tiled and whole-image encodings agree.
class TileEncoder {
 public:
  TileEncoder(const EncoderSpec& spec, uint32_t base);

  FeatureGrid encode(const ImageF32& tile) const;

  uint32_t grid_side() const { return base_ / spec_.patch; }
  const EncoderSpec& spec() const { return spec_; }

 private:
  EncoderSpec spec_;
  uint32_t base_;
  std::vector<float> projection_;
};

FeatureGrid encode_tile(const ImageF32& tile, uint32_t base,
                        const EncoderSpec& spec);

// split_tiles -> encode each tile -> place tile (i, j)'s grid at block (i, j).
// Tiles are encoded on up to `threads` workers; placement is by index, so
// the result does not depend on the thread count.
FeatureGrid encode_scale(const ImageF32& scaled, uint32_t base,
                         const EncoderSpec& spec, unsigned threads = 1);

// k x k average pooling with stride k, where k = big.h / g.
FeatureGrid pool_to_base(const FeatureGrid& big, uint32_t g);

MultiScaleFeatures encode_multiscale(const ImageF32& img, const ScaleSet& s,
                                     const EncoderSpec& spec,
                                     unsigned threads = 1);

// Channel block `k` of a multi-scale embedding as a standalone grid.
FeatureGrid channel_block(const MultiScaleFeatures& f, size_t k);

TensorF32 to_tensor(const FeatureGrid& grid);  // [h, w, dim]
TensorF32 to_tensor(const MultiScaleFeatures& f);  // [g, g, dim_total]
FeatureGrid grid_from_tensor(const TensorF32& t);

struct GridShape {
  uint32_t h;
  uint32_t w;
  uint32_t dim;
};

// Reads externally computed encoder features (e.g. real CLIP outputs).
FeatureGrid load_precomputed_features(const std::filesystem::path& path,
                                      GridShape expected);

}  // namespace medmm
