#pragma once

#include <stdexcept>
#include <string>

namespace keds {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define KEDS_DEFINE_ERROR(Name)            \
  class Name : public Error {              \
   public:                                 \
    using Error::Error;                    \
  };

KEDS_DEFINE_ERROR(DimensionError)
KEDS_DEFINE_ERROR(DegenerateVectorError)
KEDS_DEFINE_ERROR(RankError)
KEDS_DEFINE_ERROR(GraphError)
KEDS_DEFINE_ERROR(ConfigError)
KEDS_DEFINE_ERROR(FormatError)
KEDS_DEFINE_ERROR(LookupError)
KEDS_DEFINE_ERROR(InjectionError)
KEDS_DEFINE_ERROR(LengthError)
KEDS_DEFINE_ERROR(MiningError)
KEDS_DEFINE_ERROR(BatchError)
KEDS_DEFINE_ERROR(ScheduleError)
KEDS_DEFINE_ERROR(PathError)
KEDS_DEFINE_ERROR(EmptyContextError)

#undef KEDS_DEFINE_ERROR

}  // namespace keds
