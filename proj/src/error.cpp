#include "learn/error.hpp"

namespace learn {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::OutOfRange: return "OutOfRange";
    case ErrorCode::NonFinite: return "NonFinite";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::EmptyInput: return "EmptyInput";
    case ErrorCode::BackendUnavailable: return "BackendUnavailable";
    case ErrorCode::BadShape: return "BadShape";
    case ErrorCode::EmptyCrop: return "EmptyCrop";
    case ErrorCode::EmptyDataset: return "EmptyDataset";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::MismatchedLengths: return "MismatchedLengths";
    case ErrorCode::ZeroVector: return "ZeroVector";
    case ErrorCode::AllMasked: return "AllMasked";
    case ErrorCode::InvalidSteps: return "InvalidSteps";
    case ErrorCode::EmptyCandidates: return "EmptyCandidates";
    case ErrorCode::ParseError: return "ParseError";
    case ErrorCode::UnknownNodeInEdge: return "UnknownNodeInEdge";
    case ErrorCode::CycleDetected: return "CycleDetected";
    case ErrorCode::UnknownConcept: return "UnknownConcept";
    case ErrorCode::EmptyReferences: return "EmptyReferences";
    case ErrorCode::TooFewSamples: return "TooFewSamples";
    case ErrorCode::InsufficientSamples: return "InsufficientSamples";
    case ErrorCode::DuplicateId: return "DuplicateId";
    case ErrorCode::MissingImage: return "MissingImage";
    case ErrorCode::InvalidBox: return "InvalidBox";
    case ErrorCode::SpecInvalid: return "SpecInvalid";
    case ErrorCode::AnnotatorUnavailable: return "AnnotatorUnavailable";
    case ErrorCode::BadFractions: return "BadFractions";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::IoError: return "IoError";
  }
  return "Unknown";
}

}  // namespace learn
