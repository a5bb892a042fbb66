#pragma once

#include <stdexcept>
#include <string>

namespace curemark {

// Malformed or inconsistent input data (bad CSV schema, broken referential
// integrity, empty risk sets, invalid configuration).
class DataError : public std::runtime_error {
  public:
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// Numerical failure (singular design, non-convergence treated as fatal).
class NumericError : public std::runtime_error {
  public:
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

} // namespace curemark
