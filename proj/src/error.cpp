#include "medmm/error.hpp"

namespace medmm {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::MalformedHeader: return "MalformedHeader";
    case ErrorCode::UnsupportedVersion: return "UnsupportedVersion";
    case ErrorCode::LengthMismatch: return "LengthMismatch";
    case ErrorCode::DecodeError: return "DecodeError";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::NonDivisibleSide: return "NonDivisibleSide";
    case ErrorCode::NonSquare: return "NonSquare";
    case ErrorCode::InconsistentGrid: return "InconsistentGrid";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::SpecMismatch: return "SpecMismatch";
    case ErrorCode::NonDivisibleGrid: return "NonDivisibleGrid";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::ZeroVector: return "ZeroVector";
    case ErrorCode::EmptyDataset: return "EmptyDataset";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::EmptyCaption: return "EmptyCaption";
    case ErrorCode::DuplicateIds: return "DuplicateIds";
    case ErrorCode::MissingCredential: return "MissingCredential";
    case ErrorCode::HttpError: return "HttpError";
    case ErrorCode::MalformedResponse: return "MalformedResponse";
    case ErrorCode::NoTurnsFound: return "NoTurnsFound";
    case ErrorCode::RoleOrderViolation: return "RoleOrderViolation";
    case ErrorCode::DanglingAssistant: return "DanglingAssistant";
    case ErrorCode::MalformedRecord: return "MalformedRecord";
    case ErrorCode::MissingPrediction: return "MissingPrediction";
    case ErrorCode::EmptyClosedSet: return "EmptyClosedSet";
    case ErrorCode::EmptyGroundTruth: return "EmptyGroundTruth";
  }
  return "Unknown";
}

}  // namespace medmm
