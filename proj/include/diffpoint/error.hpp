// SPDX-License-Identifier: Apache-2.0
// Error types shared across the library.

#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace diffpoint {

// Mismatched tensor shapes or out-of-range slicing.
struct ShapeError : std::invalid_argument {
  explicit ShapeError(const std::string& what) : std::invalid_argument(what) {}
};

// A caller broke a documented API precondition (bad axis, empty cloud, t out of range, ...).
struct ContractError : std::invalid_argument {
  explicit ContractError(const std::string& what) : std::invalid_argument(what) {}
};

// Malformed serialized data (dataset container, checkpoint, config text).
struct FormatError : std::runtime_error {
  FormatError(const std::string& what, std::uint64_t byte_offset, std::int64_t record_index = -1)
      : std::runtime_error(what + " (byte offset " + std::to_string(byte_offset) +
                           (record_index >= 0 ? ", record " + std::to_string(record_index) : "") +
                           ")"),
        offset(byte_offset),
        record(record_index) {}
  std::uint64_t offset = 0;
  std::int64_t record = -1;  // -1 when not tied to a record
};

// Filesystem failures (open/read/write).
struct IoError : std::runtime_error {
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace diffpoint
