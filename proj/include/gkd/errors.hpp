// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace gkd {

/// Base class for all errors raised by this library.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Invalid argument: bad shape, out-of-range value, contract violation.
struct ParamError : Error {
  using Error::Error;
};

/// Numerical failure: non-finite loss, strongly indefinite matrix.
struct NumericError : Error {
  using Error::Error;
};

/// Invalid configuration or unsatisfied phase prerequisite.
struct ConfigError : Error {
  using Error::Error;
};

/// File or stream problem: missing file, malformed header, shape mismatch on load.
struct IoError : Error {
  using Error::Error;
};

inline void check_param(bool cond, const std::string& msg) {
  if (!cond) throw ParamError(msg);
}

}  // namespace gkd
