#pragma once

#include <cstdint>
#include <vector>

#include "medmm/tensor_io.hpp"

namespace medmm {

// Square resolutions of the pyramid, smallest first. Every scale is an
// integer multiple of `base`, and scales[0] == base.
struct ScaleSet {
  uint32_t base = 378;
  std::vector<uint32_t> scales = {378, 756, 1134};

  static ScaleSet default_set() { return {}; }
  // Throws InvalidArgument naming the violated rule.
  void validate() const;
};

// H x W x 3 floats, interleaved, row-major. Nominally in [0, 1].
struct ImageF32 {
  uint32_t height = 0;
  uint32_t width = 0;
  std::vector<float> pixels;

  ImageF32() = default;
  ImageF32(uint32_t h, uint32_t w, float fill = 0.0f)
      : height(h), width(w), pixels(static_cast<size_t>(h) * w * 3, fill) {}

  float& at(uint32_t y, uint32_t x, uint32_t c) {
    return pixels[(static_cast<size_t>(y) * width + x) * 3 + c];
  }
  const float& at(uint32_t y, uint32_t x, uint32_t c) const {
    return pixels[(static_cast<size_t>(y) * width + x) * 3 + c];
  }
  bool operator==(const ImageF32&) const = default;
};

struct TileGrid {
  uint32_t rows = 0;
  uint32_t cols = 0;
  uint32_t tile_side = 0;
  std::vector<ImageF32> tiles;  // row-major
};

ImageF32 to_float(const ImageU8& img);  // divides by 255
TensorF32 to_tensor(const ImageF32& img);  // dims [H, W, 3]
ImageF32 image_from_tensor(const TensorF32& t);

// Bilinear interpolation with half-pixel centers and edge clamping.
ImageF32 resize_bilinear(const ImageF32& img, uint32_t out_h, uint32_t out_w);

ImageF32 prepare_square(const ImageF32& img, uint32_t base);

TileGrid split_tiles(const ImageF32& img, uint32_t base);
ImageF32 stitch_tiles(const TileGrid& grid);

// One level per scale, each resampled directly from `img`.
std::vector<ImageF32> build_pyramid(const ImageF32& img, const ScaleSet& s);

}  // namespace medmm
