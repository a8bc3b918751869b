#pragma once

#include <stdexcept>
#include <string>

namespace cwflow {

// Error taxonomy maps onto CLI exit codes: usage 2, data/format 3, numerical 4.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace cwflow
