#pragma once

#include <atomic>
#include <filesystem>
#include <string>

#include <unistd.h>

#include "medmm/error.hpp"
#include "medmm/tensor_io.hpp"

namespace testing {

inline std::filesystem::path fixture(const std::string& name) {
  return std::filesystem::path(MEDMM_FIXTURES_DIR) / name;
}

inline std::string fixture_text(const std::string& name) {
  const auto bytes = medmm::read_file_bytes(fixture(name));
  return {bytes.begin(), bytes.end()};
}

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("medmm_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

}  // namespace testing

// Runs `expr` and checks it throws medmm::Error with the given code.
#define CHECK_MEDMM_ERROR(expr, expected_code)                        \
  do {                                                                \
    bool thrown_ = false;                                             \
    try {                                                             \
      (void)(expr);                                                   \
    } catch (const medmm::Error& e_) {                                \
      thrown_ = true;                                                 \
      CHECK_MESSAGE(e_.code() == (expected_code), e_.what());         \
    }                                                                 \
    CHECK_MESSAGE(thrown_, "expected medmm::Error from " #expr);      \
  } while (0)
