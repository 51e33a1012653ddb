#include "medmm/image_pyramid.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "medmm/error.hpp"

namespace medmm {
namespace {

struct AxisTap {
  uint32_t i0;
  uint32_t i1;
  double w1;  // weight of i1; i0 gets 1 - w1
};

std::vector<AxisTap> axis_taps(uint32_t src, uint32_t dst) {
  std::vector<AxisTap> taps(dst);
  const double ratio = static_cast<double>(src) / static_cast<double>(dst);
  const double hi = static_cast<double>(src - 1);
  for (uint32_t d = 0; d < dst; ++d) {
    double s = (static_cast<double>(d) + 0.5) * ratio - 0.5;
    s = std::clamp(s, 0.0, hi);
    const auto i0 = static_cast<uint32_t>(std::floor(s));
    const uint32_t i1 = std::min(i0 + 1, src - 1);
    taps[d] = {i0, i1, s - static_cast<double>(i0)};
  }
  return taps;
}

std::string side_str(uint32_t h, uint32_t w) {
  return std::to_string(h) + "x" + std::to_string(w);
}

}  // namespace

void ScaleSet::validate() const {
  if (base == 0) throw Error(ErrorCode::InvalidArgument, "scale_set.base must be >= 1");
  if (scales.empty() || scales.front() != base) {
    throw Error(ErrorCode::InvalidArgument,
                "scale_set.scales must start with base " + std::to_string(base));
  }
  for (size_t i = 0; i < scales.size(); ++i) {
    if (scales[i] % base != 0) {
      throw Error(ErrorCode::InvalidArgument,
                  "scale_set.scales[" + std::to_string(i) + "] = " +
                      std::to_string(scales[i]) + " is not a multiple of " +
                      std::to_string(base));
    }
    if (i > 0 && scales[i] <= scales[i - 1]) {
      throw Error(ErrorCode::InvalidArgument,
                  "scale_set.scales must be strictly increasing");
    }
  }
}

ImageF32 to_float(const ImageU8& img) {
  ImageF32 out(img.height, img.width);
  for (size_t i = 0; i < img.pixels.size(); ++i) {
    out.pixels[i] = static_cast<float>(img.pixels[i]) / 255.0f;
  }
  return out;
}

TensorF32 to_tensor(const ImageF32& img) {
  return TensorF32({img.height, img.width, 3}, img.pixels);
}

ImageF32 image_from_tensor(const TensorF32& t) {
  const auto& d = t.dims();
  if (d.size() != 3 || d[2] != 3) {
    throw Error(ErrorCode::ShapeMismatch, "image tensor must have dims [H, W, 3]");
  }
  ImageF32 out;
  out.height = d[0];
  out.width = d[1];
  out.pixels.assign(t.data().begin(), t.data().end());
  return out;
}

ImageF32 resize_bilinear(const ImageF32& img, uint32_t out_h, uint32_t out_w) {
  if (out_h == 0 || out_w == 0) {
    throw Error(ErrorCode::InvalidArgument,
                "resize target " + side_str(out_h, out_w) + " must be >= 1x1");
  }
  if (img.height == 0 || img.width == 0) {
    throw Error(ErrorCode::InvalidArgument, "resize source is empty");
  }
  const auto rows = axis_taps(img.height, out_h);
  const auto cols = axis_taps(img.width, out_w);
  ImageF32 out(out_h, out_w);
  for (uint32_t y = 0; y < out_h; ++y) {
    const AxisTap& ry = rows[y];
    for (uint32_t x = 0; x < out_w; ++x) {
      const AxisTap& rx = cols[x];
      for (uint32_t c = 0; c < 3; ++c) {
        const double top = (1.0 - rx.w1) * img.at(ry.i0, rx.i0, c) +
                           rx.w1 * img.at(ry.i0, rx.i1, c);
        const double bottom = (1.0 - rx.w1) * img.at(ry.i1, rx.i0, c) +
                              rx.w1 * img.at(ry.i1, rx.i1, c);
        out.at(y, x, c) =
            static_cast<float>((1.0 - ry.w1) * top + ry.w1 * bottom);
      }
    }
  }
  return out;
}

ImageF32 prepare_square(const ImageF32& img, uint32_t base) {
  if (img.height == 0 || img.width == 0 || base == 0) {
    throw Error(ErrorCode::InvalidArgument, "prepare_square needs a non-empty image and base >= 1");
  }
  const uint32_t side = std::max(img.height, img.width);
  ImageF32 square(side, side, 0.0f);
  // Shorter axis is centered; an odd remainder goes to the bottom/right.
  const uint32_t off_y = (side - img.height) / 2;
  const uint32_t off_x = (side - img.width) / 2;
  for (uint32_t y = 0; y < img.height; ++y) {
    std::copy_n(&img.pixels[static_cast<size_t>(y) * img.width * 3],
                static_cast<size_t>(img.width) * 3, &square.at(y + off_y, off_x, 0));
  }
  return resize_bilinear(square, base, base);
}

TileGrid split_tiles(const ImageF32& img, uint32_t base) {
  if (img.height != img.width) {
    throw Error(ErrorCode::NonSquare, "image is " + side_str(img.height, img.width));
  }
  if (base == 0 || img.height % base != 0) {
    throw Error(ErrorCode::NonDivisibleSide,
                "side " + std::to_string(img.height) + " is not a multiple of base " +
                    std::to_string(base));
  }
  TileGrid grid;
  grid.rows = grid.cols = img.height / base;
  grid.tile_side = base;
  grid.tiles.reserve(static_cast<size_t>(grid.rows) * grid.cols);
  const size_t row_len = static_cast<size_t>(base) * 3;
  for (uint32_t i = 0; i < grid.rows; ++i) {
    for (uint32_t j = 0; j < grid.cols; ++j) {
      ImageF32 tile;
      tile.height = tile.width = base;
      tile.pixels.reserve(row_len * base);
      for (uint32_t y = 0; y < base; ++y) {
        const float* src = &img.at(i * base + y, j * base, 0);
        tile.pixels.insert(tile.pixels.end(), src, src + row_len);
      }
      grid.tiles.push_back(std::move(tile));
    }
  }
  return grid;
}

ImageF32 stitch_tiles(const TileGrid& grid) {
  if (grid.tiles.size() != static_cast<size_t>(grid.rows) * grid.cols ||
      grid.tiles.empty()) {
    throw Error(ErrorCode::InconsistentGrid,
                "expected " + std::to_string(grid.rows * grid.cols) + " tiles, got " +
                    std::to_string(grid.tiles.size()));
  }
  const uint32_t base = grid.tile_side;
  for (size_t k = 0; k < grid.tiles.size(); ++k) {
    const auto& t = grid.tiles[k];
    if (t.height != base || t.width != base || t.pixels.size() != static_cast<size_t>(base) * base * 3) {
      throw Error(ErrorCode::InconsistentGrid,
                  "tile " + std::to_string(k) + " is " + side_str(t.height, t.width) +
                      ", expected side " + std::to_string(base));
    }
  }
  ImageF32 out;
  out.height = grid.rows * base;
  out.width = grid.cols * base;
  out.pixels.reserve(static_cast<size_t>(out.height) * out.width * 3);
  const size_t row_len = static_cast<size_t>(base) * 3;
  // Output rows are appended in order, so no zero-fill pass is needed.
  for (uint32_t i = 0; i < grid.rows; ++i) {
    for (uint32_t y = 0; y < base; ++y) {
      for (uint32_t j = 0; j < grid.cols; ++j) {
        const float* src = &grid.tiles[static_cast<size_t>(i) * grid.cols + j].at(y, 0, 0);
        out.pixels.insert(out.pixels.end(), src, src + row_len);
      }
    }
  }
  return out;
}

std::vector<ImageF32> build_pyramid(const ImageF32& img, const ScaleSet& s) {
  s.validate();
  if (img.height != img.width) {
    throw Error(ErrorCode::NonSquare,
                "pyramid input is " + side_str(img.height, img.width) +
                    "; run prepare_square first");
  }
  std::vector<ImageF32> levels;
  levels.reserve(s.scales.size());
  for (uint32_t side : s.scales) levels.push_back(resize_bilinear(img, side, side));
  return levels;
}

}  // namespace medmm
