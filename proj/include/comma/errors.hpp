#pragma once

#include <stdexcept>
#include <string>

namespace comma {

// Every failure raised by the library derives from Error so callers (the CLI
// in particular) can map it to an exit status in one place.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define COMMA_DEFINE_ERROR(Name)          \
  class Name : public Error {             \
   public:                                \
    using Error::Error;                   \
  };

COMMA_DEFINE_ERROR(DimensionError)
COMMA_DEFINE_ERROR(DegenerateInputError)
COMMA_DEFINE_ERROR(IndexError)
COMMA_DEFINE_ERROR(ContractError)
COMMA_DEFINE_ERROR(NumericError)
COMMA_DEFINE_ERROR(ConfigError)
COMMA_DEFINE_ERROR(DataError)
COMMA_DEFINE_ERROR(ParseError)
COMMA_DEFINE_ERROR(ProvenanceError)
COMMA_DEFINE_ERROR(StatisticsError)
COMMA_DEFINE_ERROR(UsageError)

#undef COMMA_DEFINE_ERROR

}  // namespace comma
