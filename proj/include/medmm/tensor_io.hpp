#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace medmm {

// Dense row-major float tensor of rank 1..4, last dimension fastest.
class TensorF32 {
 public:
  TensorF32() = default;
  // Zero-filled tensor. Throws InvalidArgument on bad dims.
  explicit TensorF32(std::vector<uint32_t> dims);
  // Throws LengthMismatch if data.size() != product(dims).
  TensorF32(std::vector<uint32_t> dims, std::vector<float> data);

  const std::vector<uint32_t>& dims() const { return dims_; }
  std::span<const float> data() const { return data_; }
  std::span<float> data() { return data_; }
  size_t size() const { return data_.size(); }
  size_t ndim() const { return dims_.size(); }

  // Bitwise comparison, so NaN payloads and signed zeros count.
  bool bit_equal(const TensorF32& other) const;

  std::vector<float> release() && { return std::move(data_); }

 private:
  std::vector<uint32_t> dims_;
  std::vector<float> data_;
};

struct ImageU8 {
  uint32_t height = 0;
  uint32_t width = 0;
  std::vector<uint8_t> pixels;  // H*W*3, interleaved RGB
};

// MSTF v1: "MSTF" | 0x01 version | 0x01 dtype f32le | ndim | 0x00,
// then ndim u32le dims, then product(dims) f32le values.
inline constexpr size_t kMstfHeaderSize = 8;
inline constexpr uint8_t kMstfVersion = 0x01;
inline constexpr uint8_t kMstfDtypeF32 = 0x01;

std::vector<uint8_t> encode_mstf(const TensorF32& t);
TensorF32 decode_mstf(std::span<const uint8_t> bytes);

void save_mstf(const std::filesystem::path& path, const TensorF32& t);
TensorF32 load_mstf(const std::filesystem::path& path);

// PNG or JPEG, detected by signature. Grayscale expands to three equal
// channels; alpha is dropped.
ImageU8 load_image_rgb8(const std::filesystem::path& path);

std::vector<uint8_t> read_file_bytes(const std::filesystem::path& path);

// Writes to "<path>.tmp" in the same directory and renames over path, so a
// failed run never leaves a partial file behind.
void write_file_atomic(const std::filesystem::path& path,
                       std::span<const uint8_t> bytes);
void write_file_atomic(const std::filesystem::path& path,
                       const std::string& text);

}  // namespace medmm
