#pragma once

#include <stdexcept>
#include <string>

namespace llip {

// Shape/dimension violations (inner dims disagree, bad rank, ...).
struct shape_error : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Out-of-range or inconsistent argument values (tau <= 0, N too small, ...).
struct value_error : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// A primitive produced (or was fed) a non-finite value.
struct numeric_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Invalid configuration document or cross-field inconsistency.
struct config_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Filesystem failures.
struct io_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Malformed on-disk payload (bad magic, truncated file, CRC mismatch, ...).
struct format_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Well-formed file that does not match the running configuration.
struct compat_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace llip
