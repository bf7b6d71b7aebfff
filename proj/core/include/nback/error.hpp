#pragma once

#include <stdexcept>
#include <string>

namespace nback {

// Base of every error raised by the library. The CLI maps subclasses to exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid argument or configuration value.
class ParameterError : public Error {
 public:
  using Error::Error;
};

// Operation called out of order (e.g. autoregressive context without prior responses).
class SequencingError : public Error {
 public:
  using Error::Error;
};

// A statistic is undefined for the given data (no evaluable turns, zero variance, p_e = 1...).
class UndefinedValueError : public Error {
 public:
  using Error::Error;
};

// The subject does not expose a required capability (hidden states, readout, intervention).
class CapabilityError : public Error {
 public:
  using Error::Error;
};

// Malformed wire message, version mismatch, or id mismatch.
class ProtocolError : public Error {
 public:
  using Error::Error;
};

// A subject failed mid-trial (crashed process, timeout, server-reported error).
class SubjectFailure : public Error {
 public:
  using Error::Error;
};

// NaN loss, diverging fit, and similar numerical breakdowns.
class NumericalError : public Error {
 public:
  using Error::Error;
};

// Logistic fit with perfectly separated outcomes; coefficients would be unbounded.
class SeparationError : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

}  // namespace nback
