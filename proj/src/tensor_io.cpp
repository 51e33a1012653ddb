#include "medmm/tensor_io.hpp"

#include <bit>
#include <csetjmp>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <numeric>
#include <string>
#include <utility>

#include <jpeglib.h>
#include <png.h>

#include "medmm/error.hpp"

namespace medmm {
namespace {

static_assert(sizeof(float) == 4 && std::numeric_limits<float>::is_iec559);

size_t checked_product(const std::vector<uint32_t>& dims) {
  if (dims.empty() || dims.size() > 4) {
    throw Error(ErrorCode::InvalidArgument,
                "ndim must be in 1..4, got " + std::to_string(dims.size()));
  }
  size_t n = 1;
  for (size_t i = 0; i < dims.size(); ++i) {
    if (dims[i] == 0) {
      throw Error(ErrorCode::InvalidArgument,
                  "dims[" + std::to_string(i) + "] must be >= 1");
    }
    n *= dims[i];
  }
  return n;
}

void put_u32le(uint8_t* p, uint32_t v) {
  p[0] = static_cast<uint8_t>(v);
  p[1] = static_cast<uint8_t>(v >> 8);
  p[2] = static_cast<uint8_t>(v >> 16);
  p[3] = static_cast<uint8_t>(v >> 24);
}

uint32_t get_u32le(const uint8_t* p) {
  return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
         (static_cast<uint32_t>(p[2]) << 16) |
         (static_cast<uint32_t>(p[3]) << 24);
}

ImageU8 decode_png(const std::vector<uint8_t>& bytes,
                   const std::filesystem::path& path) {
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size())) {
    throw Error(ErrorCode::DecodeError,
                path.string() + ": " + std::string(image.message));
  }
  // Read as RGBA so that alpha is dropped rather than composited.
  image.format = PNG_FORMAT_RGBA;
  std::vector<uint8_t> rgba(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, rgba.data(), 0, nullptr)) {
    std::string msg = image.message;
    png_image_free(&image);
    throw Error(ErrorCode::DecodeError, path.string() + ": " + msg);
  }
  ImageU8 out;
  out.height = image.height;
  out.width = image.width;
  const size_t n = static_cast<size_t>(out.height) * out.width;
  out.pixels.resize(n * 3);
  for (size_t i = 0; i < n; ++i) {
    out.pixels[3 * i + 0] = rgba[4 * i + 0];
    out.pixels[3 * i + 1] = rgba[4 * i + 1];
    out.pixels[3 * i + 2] = rgba[4 * i + 2];
  }
  return out;
}

struct JpegErrorManager {
  jpeg_error_mgr pub;
  std::jmp_buf jump;
  char message[JMSG_LENGTH_MAX];
};

void jpeg_error_exit(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegErrorManager*>(cinfo->err);
  (*cinfo->err->format_message)(cinfo, err->message);
  std::longjmp(err->jump, 1);
}

// Returns false and fills `message` on failure. No objects with destructors
// live across the setjmp boundary.
bool decode_jpeg_raw(const std::vector<uint8_t>& bytes, ImageU8* out,
                     char* message) {
  jpeg_decompress_struct cinfo;
  JpegErrorManager jerr;
  cinfo.err = jpeg_std_error(&jerr.pub);
  jerr.pub.error_exit = jpeg_error_exit;
  if (setjmp(jerr.jump)) {
    std::memcpy(message, jerr.message, JMSG_LENGTH_MAX);
    jpeg_destroy_decompress(&cinfo);
    return false;
  }
  jpeg_create_decompress(&cinfo);
  jpeg_mem_src(&cinfo, bytes.data(), static_cast<unsigned long>(bytes.size()));
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  out->height = cinfo.output_height;
  out->width = cinfo.output_width;
  out->pixels.resize(static_cast<size_t>(out->height) * out->width * 3);
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = out->pixels.data() +
                   static_cast<size_t>(cinfo.output_scanline) * out->width * 3;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return true;
}

}  // namespace

TensorF32::TensorF32(std::vector<uint32_t> dims)
    : dims_(std::move(dims)), data_(checked_product(dims_), 0.0f) {}

TensorF32::TensorF32(std::vector<uint32_t> dims, std::vector<float> data)
    : dims_(std::move(dims)), data_(std::move(data)) {
  const size_t expected = checked_product(dims_);
  if (data_.size() != expected) {
    throw Error(ErrorCode::LengthMismatch,
                "data has " + std::to_string(data_.size()) +
                    " values, dims require " + std::to_string(expected));
  }
}

bool TensorF32::bit_equal(const TensorF32& other) const {
  return dims_ == other.dims_ && data_.size() == other.data_.size() &&
         std::memcmp(data_.data(), other.data_.data(),
                     data_.size() * sizeof(float)) == 0;
}

std::vector<uint8_t> encode_mstf(const TensorF32& t) {
  std::vector<uint8_t> out(kMstfHeaderSize + 4 * t.ndim() + 4 * t.size());
  const uint8_t header[kMstfHeaderSize] = {'M', 'S', 'T', 'F', kMstfVersion, kMstfDtypeF32,
                                           static_cast<uint8_t>(t.ndim()), 0x00};
  std::memcpy(out.data(), header, kMstfHeaderSize);
  uint8_t* p = out.data() + kMstfHeaderSize;
  for (uint32_t d : t.dims()) put_u32le(std::exchange(p, p + 4), d);
  for (float v : t.data()) put_u32le(std::exchange(p, p + 4), std::bit_cast<uint32_t>(v));
  return out;
}

TensorF32 decode_mstf(std::span<const uint8_t> bytes) {
  if (bytes.size() < kMstfHeaderSize) {
    throw Error(ErrorCode::MalformedHeader,
                "header: need 8 bytes, got " + std::to_string(bytes.size()));
  }
  if (std::memcmp(bytes.data(), "MSTF", 4) != 0) {
    throw Error(ErrorCode::MalformedHeader, "magic: expected \"MSTF\"");
  }
  if (bytes[4] != kMstfVersion) {
    throw Error(ErrorCode::UnsupportedVersion,
                "version: " + std::to_string(bytes[4]));
  }
  if (bytes[5] != kMstfDtypeF32) {
    throw Error(ErrorCode::MalformedHeader,
                "dtype: unsupported code " + std::to_string(bytes[5]));
  }
  const size_t ndim = bytes[6];
  if (ndim < 1 || ndim > 4) {
    throw Error(ErrorCode::MalformedHeader,
                "ndim: must be 1..4, got " + std::to_string(ndim));
  }
  if (bytes[7] != 0) {
    throw Error(ErrorCode::MalformedHeader, "reserved: must be 0x00");
  }
  if (bytes.size() < kMstfHeaderSize + 4 * ndim) {
    throw Error(ErrorCode::LengthMismatch, "dims: truncated");
  }
  std::vector<uint32_t> dims(ndim);
  size_t count = 1;
  for (size_t i = 0; i < ndim; ++i) {
    dims[i] = get_u32le(bytes.data() + kMstfHeaderSize + 4 * i);
    if (dims[i] == 0) {
      throw Error(ErrorCode::MalformedHeader,
                  "dims[" + std::to_string(i) + "]: must be >= 1");
    }
    count *= dims[i];
    if (count > bytes.size()) {
      throw Error(ErrorCode::LengthMismatch,
                  "payload: dims describe more values than the input holds");
    }
  }
  const size_t payload_offset = kMstfHeaderSize + 4 * ndim;
  const size_t payload = bytes.size() - payload_offset;
  if (payload != 4 * count) {
    throw Error(ErrorCode::LengthMismatch,
                "payload: expected " + std::to_string(4 * count) +
                    " bytes, got " + std::to_string(payload));
  }
  std::vector<float> data(count);
  const uint8_t* p = bytes.data() + payload_offset;
  for (size_t i = 0; i < count; ++i) {
    data[i] = std::bit_cast<float>(get_u32le(p + 4 * i));
  }
  return TensorF32(std::move(dims), std::move(data));
}

std::vector<uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  return std::vector<uint8_t>(std::istreambuf_iterator<char>(in),
                              std::istreambuf_iterator<char>());
}

void write_file_atomic(const std::filesystem::path& path,
                       std::span<const uint8_t> bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::IoError, "cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) {
      out.close();
      std::filesystem::remove(tmp);
      throw Error(ErrorCode::IoError, "short write to " + tmp.string());
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp);
    throw Error(ErrorCode::IoError,
                "rename to " + path.string() + ": " + ec.message());
  }
}

void write_file_atomic(const std::filesystem::path& path,
                       const std::string& text) {
  write_file_atomic(path, std::span<const uint8_t>(
                              reinterpret_cast<const uint8_t*>(text.data()),
                              text.size()));
}

void save_mstf(const std::filesystem::path& path, const TensorF32& t) {
  write_file_atomic(path, encode_mstf(t));
}

TensorF32 load_mstf(const std::filesystem::path& path) {
  return decode_mstf(read_file_bytes(path));
}

ImageU8 load_image_rgb8(const std::filesystem::path& path) {
  std::vector<uint8_t> bytes;
  try {
    bytes = read_file_bytes(path);
  } catch (const Error& e) {
    throw Error(ErrorCode::DecodeError, e.what());
  }
  static constexpr uint8_t kPngSig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1A,
                                         '\n'};
  if (bytes.size() >= 8 && std::memcmp(bytes.data(), kPngSig, 8) == 0) {
    return decode_png(bytes, path);
  }
  if (bytes.size() >= 3 && bytes[0] == 0xFF && bytes[1] == 0xD8 &&
      bytes[2] == 0xFF) {
    ImageU8 out;
    char message[JMSG_LENGTH_MAX] = {0};
    if (!decode_jpeg_raw(bytes, &out, message)) {
      throw Error(ErrorCode::DecodeError,
                  path.string() + ": " + std::string(message));
    }
    return out;
  }
  throw Error(ErrorCode::DecodeError,
              path.string() + ": not a PNG or JPEG file");
}

}  // namespace medmm
