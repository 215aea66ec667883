#pragma once

#include <stdexcept>
#include <string>

namespace dwt {

// Every failure raised by the library derives from Error. The CLI maps the
// category onto a process exit code (see tools/dwt.cpp).
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ConfigError : public Error { using Error::Error; };
class DimensionError : public Error { using Error::Error; };
class IndexError : public Error { using Error::Error; };
class ParameterError : public Error { using Error::Error; };
class ValidationError : public Error { using Error::Error; };
class ContractError : public Error { using Error::Error; };
class DataError : public Error { using Error::Error; };
class FormatError : public Error { using Error::Error; };
class IncompatibilityError : public Error { using Error::Error; };
class NumericError : public Error { using Error::Error; };

}  // namespace dwt
