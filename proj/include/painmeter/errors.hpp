#pragma once

#include <stdexcept>
#include <string>

namespace painmeter {

/// Base class for all painmeter errors.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// A file does not match the expected on-disk layout (bad header, wrong
/// delimiter count, unparseable number).
struct FormatError : Error {
  using Error::Error;
};

/// The file parsed but its payload violates a data invariant
/// (non-finite value, ragged rows).
struct DataError : Error {
  using Error::Error;
};

/// Dataset-level metadata problem (missing key, label outside the
/// category space, unknown recording reference).
struct ManifestError : Error {
  using Error::Error;
};

/// Underlying I/O failed (unreadable/unwritable path).
struct IoError : Error {
  using Error::Error;
};

/// Tensor dimensions do not compose.
struct ShapeError : Error {
  using Error::Error;
};

/// A sequence is too short for the requested operation.
struct LengthError : Error {
  using Error::Error;
};

/// An API precondition was violated by the caller.
struct UsageError : Error {
  using Error::Error;
};

/// The optimization loop failed (diverged, non-finite loss).
struct TrainError : Error {
  using Error::Error;
};

}  // namespace painmeter
