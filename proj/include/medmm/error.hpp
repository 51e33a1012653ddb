#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace medmm {

enum class ErrorCode {
  // tensorio
  MalformedHeader,
  UnsupportedVersion,
  LengthMismatch,
  DecodeError,
  IoError,
  // image_pyramid
  NonDivisibleSide,
  NonSquare,
  InconsistentGrid,
  InvalidArgument,
  // hier_encoder
  SpecMismatch,
  NonDivisibleGrid,
  ShapeMismatch,
  // connector
  ZeroVector,
  EmptyDataset,
  InvalidConfig,
  // synth
  EmptyCaption,
  DuplicateIds,
  MissingCredential,
  HttpError,
  MalformedResponse,
  NoTurnsFound,
  RoleOrderViolation,
  DanglingAssistant,
  MalformedRecord,
  // eval
  MissingPrediction,
  EmptyClosedSet,
  EmptyGroundTruth,
};

std::string_view to_string(ErrorCode code);

// Single exception type for the library. The code identifies the failure
// class; the message names the offending field, file or id.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what),
        code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace medmm
