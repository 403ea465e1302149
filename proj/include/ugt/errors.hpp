#pragma once

#include <stdexcept>
#include <string>

namespace ugt {

/// Operand shapes are incompatible with the requested operation.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// A caller violated a documented precondition.
class ContractError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

/// Malformed on-disk data (dataset files, checkpoints, configs).
class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Id that points outside of the tables it refers to.
class IntegrityError : public FormatError {
public:
    using FormatError::FormatError;
};

/// Inconsistent hyper-parameters or model dimensions.
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Training produced a non-finite loss.
class DivergenceError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Evaluation could not produce a report (e.g. no eligible users).
class ReportError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace ugt
