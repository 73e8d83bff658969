#pragma once

#include <stdexcept>
#include <string>

namespace updetr {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error { using Error::Error; };
class IndexError : public Error { using Error::Error; };
class ContractError : public Error { using Error::Error; };
class DegenerateRowError : public Error { using Error::Error; };
class CapacityError : public Error { using Error::Error; };
class ConfigError : public Error { using Error::Error; };
class InputError : public Error { using Error::Error; };
class IoError : public Error { using Error::Error; };
class LoadError : public Error { using Error::Error; };

}  // namespace updetr
