#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace neuronlens {

// Root of every error the library raises. The CLI maps the three families
// below onto distinct exit codes.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Bad arguments or inconsistent configuration (exit code 2).
class ValidationError : public Error {
public:
    ValidationError(std::string field, const std::string& what)
        : Error(field + ": " + what), field_(std::move(field)) {}
    const std::string& field() const noexcept { return field_; }

private:
    std::string field_;
};

// Missing files, malformed or corrupt serialized data (exit code 3).
class DataError : public Error {
public:
    using Error::Error;
};

class FormatError : public DataError {
public:
    using DataError::DataError;
};

class ChecksumError : public DataError {
public:
    using DataError::DataError;
};

class VersionError : public DataError {
public:
    using DataError::DataError;
};

class TruncatedError : public DataError {
public:
    using DataError::DataError;
};

// Non-finite values, zero variance where a scale is required (exit code 4).
class NumericalError : public Error {
public:
    using Error::Error;
};

class TrainingDivergence : public NumericalError {
public:
    TrainingDivergence(std::size_t step, const std::string& what)
        : NumericalError("training diverged at step " + std::to_string(step) + ": " + what),
          step_(step) {}
    std::size_t step() const noexcept { return step_; }

private:
    std::size_t step_;
};

class CorruptActivation : public NumericalError {
public:
    explicit CorruptActivation(std::uint64_t sample_id)
        : NumericalError("non-finite activation in sample " + std::to_string(sample_id)),
          sample_id_(sample_id) {}
    std::uint64_t sample_id() const noexcept { return sample_id_; }

private:
    std::uint64_t sample_id_;
};

} // namespace neuronlens
