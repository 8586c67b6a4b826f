/* Copyright 2026 The detfuse Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/
#pragma once

#include <stdexcept>
#include <string>

namespace detfuse {

/// Failure category. Maps onto the CLI exit-code taxonomy.
enum class ErrorKind {
  kParse,        // malformed file syntax
  kValidation,   // well-formed input violating an invariant
  kConfig,       // bad parameters or configuration
  kDegenerate,   // input admits no answer (e.g. single-mode histogram)
  kEvaluation,   // nothing to evaluate
  kIo,           // filesystem failures
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

inline Error ParseError(const std::string& what) {
  return Error(ErrorKind::kParse, "parse error: " + what);
}
inline Error ValidationError(const std::string& what) {
  return Error(ErrorKind::kValidation, "validation error: " + what);
}
inline Error ConfigError(const std::string& what) {
  return Error(ErrorKind::kConfig, "configuration error: " + what);
}
inline Error DegenerateError(const std::string& what) {
  return Error(ErrorKind::kDegenerate, "degenerate input: " + what);
}
inline Error EvaluationError(const std::string& what) {
  return Error(ErrorKind::kEvaluation, "evaluation error: " + what);
}
inline Error IoError(const std::string& what) {
  return Error(ErrorKind::kIo, "i/o error: " + what);
}

}  // namespace detfuse
