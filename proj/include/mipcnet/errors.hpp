// Copyright (c) The mipcnet authors.
//
// This source code is licensed under the Apache License, Version 2.0
// found in the LICENSE file in the root directory of this source tree.

#pragma once

#include <stdexcept>
#include <string>

namespace mipcnet {

// Bad user input: malformed configuration, incompatible shapes, invalid files.
// The CLI maps this to exit code 1.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Failure while running an otherwise valid request (diverged training,
// unreadable checkpoint contents, I/O failure). The CLI maps this to exit 2.
// A NaN or infinity reached a checked input.
class NonFiniteValue : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class RuntimeFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace mipcnet
