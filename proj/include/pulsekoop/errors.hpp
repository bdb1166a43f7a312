#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace pulsekoop {

enum class ErrorKind {
  NonFinite,
  Divergence,
  StepUnderflow,
  InvalidArgument,
  UnknownParameter,
  NoConvergence,
  NotStable,
  Defective,
  DominanceTie,
  HorizonExceeded,
  BadOrder,
  NonNegativeLambda,
  NoBracket,
  PreconditionViolated,
  Unreachable,
  RankDeficient,
  DefectiveT,
  NoDominantRealMode,
  NoValidCandidate,
};

constexpr std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::NonFinite: return "NonFinite";
    case ErrorKind::Divergence: return "Divergence";
    case ErrorKind::StepUnderflow: return "StepUnderflow";
    case ErrorKind::InvalidArgument: return "InvalidArgument";
    case ErrorKind::UnknownParameter: return "UnknownParameter";
    case ErrorKind::NoConvergence: return "NoConvergence";
    case ErrorKind::NotStable: return "NotStable";
    case ErrorKind::Defective: return "Defective";
    case ErrorKind::DominanceTie: return "DominanceTie";
    case ErrorKind::HorizonExceeded: return "HorizonExceeded";
    case ErrorKind::BadOrder: return "BadOrder";
    case ErrorKind::NonNegativeLambda: return "NonNegativeLambda";
    case ErrorKind::NoBracket: return "NoBracket";
    case ErrorKind::PreconditionViolated: return "PreconditionViolated";
    case ErrorKind::Unreachable: return "Unreachable";
    case ErrorKind::RankDeficient: return "RankDeficient";
    case ErrorKind::DefectiveT: return "DefectiveT";
    case ErrorKind::NoDominantRealMode: return "NoDominantRealMode";
    case ErrorKind::NoValidCandidate: return "NoValidCandidate";
  }
  return "Unknown";
}

/// Every failure raised by the library. The kind is stable and meant to be
/// switched on; the message is for humans.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool condition, ErrorKind kind, const std::string& what) {
  if (!condition) fail(kind, what);
}

}  // namespace pulsekoop
