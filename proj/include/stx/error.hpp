#pragma once

#include <stdexcept>
#include <string>

namespace stx {

// Error taxonomy shared across the library. The CLI maps these onto exit
// codes, so pick the most specific type when throwing.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ShapeError : Error { using Error::Error; };     // tensor dimension mismatch
struct ConfigError : Error { using Error::Error; };    // invalid configuration value
struct ContractError : Error { using Error::Error; };  // API precondition violated
struct NumericError : Error { using Error::Error; };   // NaN/Inf or undefined result
struct DataError : Error { using Error::Error; };      // bad input data or file contents
struct IoError : Error { using Error::Error; };        // filesystem failure

}  // namespace stx
