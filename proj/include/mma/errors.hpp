#pragma once

#include <stdexcept>
#include <string>

namespace mma {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define MMA_DEFINE_ERROR(Name)                    \
  class Name : public Error {                     \
   public:                                        \
    explicit Name(const std::string& what)        \
        : Error(std::string(#Name ": ") + what) {} \
  };

MMA_DEFINE_ERROR(ShapeMismatch)
MMA_DEFINE_ERROR(DomainError)
MMA_DEFINE_ERROR(NotScalar)
MMA_DEFINE_ERROR(NumericOverflow)
MMA_DEFINE_ERROR(TokenOutOfRange)
MMA_DEFINE_ERROR(ModalityMismatch)
MMA_DEFINE_ERROR(EmptyMask)
MMA_DEFINE_ERROR(PoolExhausted)
MMA_DEFINE_ERROR(CorruptCheckpoint)
MMA_DEFINE_ERROR(IoError)
MMA_DEFINE_ERROR(UnknownSymbol)
MMA_DEFINE_ERROR(ConfigError)

#undef MMA_DEFINE_ERROR

}  // namespace mma
