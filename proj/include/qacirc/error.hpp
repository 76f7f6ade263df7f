// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace qacirc {

enum class ErrorCode {
  InvalidShape,
  NonFiniteInput,
  InvalidDistribution,
  SequenceTooLong,
  FixtureInfeasible,
  FormatError,
  CorruptWeights,
  NotCaptured,
  AlignmentError,
  InsufficientEntropy,
  PartitionError,
  Unsupported,
  Incomparable,
  InvalidWindow,
  InvalidSpec,
  InvalidDataset,
  UndefinedRelScore,
  InvalidArgument,
  IoError,
};

std::string_view to_string(ErrorCode code);

// Single exception type for the library; callers branch on code().
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code), message_(what) {}

  ErrorCode code() const noexcept { return code_; }
  // what() without the code prefix.
  const std::string& message() const noexcept { return message_; }

 private:
  ErrorCode code_;
  std::string message_;
};

}  // namespace qacirc
