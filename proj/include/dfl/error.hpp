#pragma once

#include <stdexcept>
#include <string>

namespace dfl {

// Caller passed something the operation cannot accept (bad shape, bad flag).
class ArgumentError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A value or index outside its documented domain.
class RangeError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

// Base for errors caused by input data rather than by the caller.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public DataError {
 public:
  using DataError::DataError;
};

class DecodeError : public DataError {
 public:
  using DataError::DataError;
};

class SchemaError : public DataError {
 public:
  using DataError::DataError;
};

// A statistic that has no value on the given input (e.g. too few classes).
class MetricUndefined : public DataError {
 public:
  using DataError::DataError;
};

class UnsupportedDefect : public ArgumentError {
 public:
  using ArgumentError::ArgumentError;
};

// Training diverged; message carries iteration, defect and batch ids.
class TrainError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace dfl
