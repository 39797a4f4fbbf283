#pragma once
// SPDX-License-Identifier: Apache-2.0

#include <stdexcept>
#include <string>

namespace asyncrl {

/// Precondition violation: bad arguments, shape mismatch, out-of-range values.
struct DomainError : std::invalid_argument {
  explicit DomainError(const std::string& what) : std::invalid_argument(what) {}
};

/// Request exceeds a configured budget (enumeration cap, payload limits).
struct ResourceError : std::runtime_error {
  explicit ResourceError(const std::string& what) : std::runtime_error(what) {}
};

/// Wire/protocol violation: malformed frames, version conflicts, ordering bugs.
struct ProtocolError : std::runtime_error {
  explicit ProtocolError(const std::string& what) : std::runtime_error(what) {}
};

/// Payload failed its checksum.
struct IntegrityError : std::runtime_error {
  explicit IntegrityError(const std::string& what) : std::runtime_error(what) {}
};

/// Training produced a non-finite quantity or an inconsistent batch.
struct TrainingError : std::runtime_error {
  explicit TrainingError(const std::string& what) : std::runtime_error(what) {}
};

/// Configuration file rejected: unknown key, missing field, bad type.
struct SchemaError : std::runtime_error {
  explicit SchemaError(const std::string& what) : std::runtime_error(what) {}
};

/// Statistic undefined for the given input (e.g. constant series).
struct DegenerateInputError : std::runtime_error {
  explicit DegenerateInputError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace asyncrl
