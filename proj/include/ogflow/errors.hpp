#pragma once

#include <stdexcept>
#include <string>

namespace ogflow {

/// Base class for every error thrown by this library.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Tensor/layer shape mismatch. Message names both offending shapes.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// Gather/neighbor index outside the valid range. Message carries the value.
class IndexError : public Error {
public:
    using Error::Error;
};

/// Invalid or inconsistent configuration (model, training, CLI).
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Filesystem-level failure (open/read/write).
class IoError : public Error {
public:
    using Error::Error;
};

/// On-disk payload problems. Subclasses distinguish the failure kind.
class FormatError : public IoError {
public:
    using IoError::IoError;
};

class BadMagicError : public FormatError {
public:
    using FormatError::FormatError;
};

class TruncatedFileError : public FormatError {
public:
    using FormatError::FormatError;
};

class InconsistentFileError : public FormatError {
public:
    using FormatError::FormatError;
};

/// Occlusion mask sums below the guard threshold in the Chamfer loss.
class DegenerateMaskError : public Error {
public:
    using Error::Error;
};

/// NaN/Inf found in gradients during an optimizer step.
class PoisonedGradientError : public Error {
public:
    using Error::Error;
};

/// NaN/Inf found in parameters after an optimizer step.
class NumericError : public Error {
public:
    using Error::Error;
};

/// Metric requested over an empty population (e.g. EPE with no
/// non-occluded points).
class UndefinedMetricError : public Error {
public:
    using Error::Error;
};

} // namespace ogflow
