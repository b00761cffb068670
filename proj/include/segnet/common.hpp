#pragma once

#include <stdexcept>
#include <string>

namespace segnet {

inline constexpr const char* kVersion = "segnet 1.0.0";

// Error taxonomy maps onto CLI exit codes: config 1, data 2, numeric 3.
struct config_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct data_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct numeric_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape/contract violations inside the tensor stack.
struct shape_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace segnet
