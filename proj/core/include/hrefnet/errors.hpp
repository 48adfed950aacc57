#pragma once

#include <stdexcept>
#include <string>

namespace hrefnet {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

class InvalidConfig : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

// A metric has no defined value for this input (e.g. AUC on single-class
// ground truth). Callers aggregating reports skip the entry and count it.
class UndefinedMetric : public Error {
 public:
  using Error::Error;
};

class LoadError : public Error {
 public:
  using Error::Error;
};

}  // namespace hrefnet
