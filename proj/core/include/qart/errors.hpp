#pragma once

#include <stdexcept>
#include <string>

namespace qart {

/// Root of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define QART_DEFINE_ERROR(Name)          \
  class Name : public Error {            \
   public:                               \
    using Error::Error;                  \
  }

QART_DEFINE_ERROR(DimensionError);
QART_DEFINE_ERROR(NumericError);
QART_DEFINE_ERROR(ParameterError);
QART_DEFINE_ERROR(CalibrationError);
QART_DEFINE_ERROR(DataError);
QART_DEFINE_ERROR(FormatError);
QART_DEFINE_ERROR(RegistryError);
QART_DEFINE_ERROR(ConfigError);
QART_DEFINE_ERROR(TrainingError);
QART_DEFINE_ERROR(AccountingError);
QART_DEFINE_ERROR(IoError);

#undef QART_DEFINE_ERROR

}  // namespace qart
