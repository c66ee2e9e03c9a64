#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace priorfuse {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

class DimensionMismatch : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class NonFiniteValue : public Error {
 public:
  NonFiniteValue(const std::string& what, std::size_t index) : Error(what), index_(index) {}
  std::size_t index() const noexcept { return index_; }

 private:
  std::size_t index_;
};

}  // namespace priorfuse
