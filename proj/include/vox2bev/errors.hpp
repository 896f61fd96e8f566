#pragma once

#include <stdexcept>
#include <string>

namespace vox2bev {

// Non-finite values in a place the pipeline cannot recover from (exit 4).
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

// Bad command line (exit 2). Everything else maps to a data error (exit 3).
struct UsageError : std::runtime_error {
  explicit UsageError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace vox2bev
