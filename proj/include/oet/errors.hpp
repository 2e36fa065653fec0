#pragma once

#include <stdexcept>
#include <string>

namespace oet {

// Bad run-config, schema violation, missing credentials: caller mistakes
// that should stop a run before any work happens.
struct config_error : std::runtime_error {
  explicit config_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed input data (raw dataset records, artifact files).
struct data_error : std::runtime_error {
  explicit data_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Operation requested on a target that cannot support it
// (e.g. gradients from a black-box endpoint).
struct capability_error : std::runtime_error {
  explicit capability_error(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace oet
