#pragma once

#include <stdexcept>
#include <string>

namespace hesskit {

enum class Errc {
  ShapeMismatch,
  UnknownPrimitive,
  DetachedLoss,
  NonScalarLoss,
  NonFiniteGradient,
  UnsupportedSecondOrder,
  InvalidSpec,
  DivergedLoss,
  CorruptCheckpoint,
  ChannelSetMismatch,
  InfeasibleTarget,
  StructuralViolation,
  TooLarge,
  SingularBlock,
  NonFiniteHvp,
  CorruptQuantFile,
  CorruptDataset,
  UnsupportedFormat,
  MissingArtifact,
  ConfigInvalid,
  UnknownCommand,
};

inline const char* errc_name(Errc c) {
  switch (c) {
    case Errc::ShapeMismatch: return "ShapeMismatch";
    case Errc::UnknownPrimitive: return "UnknownPrimitive";
    case Errc::DetachedLoss: return "DetachedLoss";
    case Errc::NonScalarLoss: return "NonScalarLoss";
    case Errc::NonFiniteGradient: return "NonFiniteGradient";
    case Errc::UnsupportedSecondOrder: return "UnsupportedSecondOrder";
    case Errc::InvalidSpec: return "InvalidSpec";
    case Errc::DivergedLoss: return "DivergedLoss";
    case Errc::CorruptCheckpoint: return "CorruptCheckpoint";
    case Errc::ChannelSetMismatch: return "ChannelSetMismatch";
    case Errc::InfeasibleTarget: return "InfeasibleTarget";
    case Errc::StructuralViolation: return "StructuralViolation";
    case Errc::TooLarge: return "TooLarge";
    case Errc::SingularBlock: return "SingularBlock";
    case Errc::NonFiniteHvp: return "NonFiniteHvp";
    case Errc::CorruptQuantFile: return "CorruptQuantFile";
    case Errc::CorruptDataset: return "CorruptDataset";
    case Errc::UnsupportedFormat: return "UnsupportedFormat";
    case Errc::MissingArtifact: return "MissingArtifact";
    case Errc::ConfigInvalid: return "ConfigInvalid";
    case Errc::UnknownCommand: return "UnknownCommand";
  }
  return "Error";
}

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}
  Errc code() const { return code_; }

 private:
  Errc code_;
};

[[noreturn]] inline void raise(Errc c, const std::string& msg) { throw Error(c, msg); }

}  // namespace hesskit
