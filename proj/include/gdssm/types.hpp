#pragma once

#include <Eigen/Dense>
#include <stdexcept>
#include <string>

namespace gdssm {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Base class for all library errors.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Dimension or layout violation (precondition failures).
struct ShapeError : Error {
    explicit ShapeError(const std::string& msg) : Error(msg) {}
};

/// Malformed files, schema violations, bad datasets.
struct DataError : Error {
    explicit DataError(const std::string& msg) : Error(msg) {}
};

/// Numerical failure: PSD repair exhausted, singular covariance, non-finite gradient.
struct NumericError : Error {
    explicit NumericError(const std::string& msg) : Error(msg) {}
};

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw ShapeError(msg);
}

} // namespace gdssm
