/*
Copyright 2026 The uwkd Authors. All rights reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
*/

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace uwkd {

enum class ErrorCode {
  InvalidArgument,
  ZeroVector,
  LengthMismatch,
  TokenOutOfRange,
  NonPositiveDeterminant,
  NonPositiveLoss,
  NonPositiveBeta,
  WrongMode,
  DimensionMismatch,
  ShapeMismatch,
  QuadratureNotConverged,
  Diverged,
  NonFiniteLoss,
  ConfigError,
  IoError,
};

std::string_view to_string(ErrorCode code);

/// Single exception type for the library; `code()` distinguishes the failure.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::ZeroVector: return "ZeroVector";
    case ErrorCode::LengthMismatch: return "LengthMismatch";
    case ErrorCode::TokenOutOfRange: return "TokenOutOfRange";
    case ErrorCode::NonPositiveDeterminant: return "NonPositiveDeterminant";
    case ErrorCode::NonPositiveLoss: return "NonPositiveLoss";
    case ErrorCode::NonPositiveBeta: return "NonPositiveBeta";
    case ErrorCode::WrongMode: return "WrongMode";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::QuadratureNotConverged: return "QuadratureNotConverged";
    case ErrorCode::Diverged: return "Diverged";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::ConfigError: return "ConfigError";
    case ErrorCode::IoError: return "IoError";
  }
  return "Unknown";
}

}  // namespace uwkd
