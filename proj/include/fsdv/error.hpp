#pragma once

#include <stdexcept>
#include <string>

namespace fsdv {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define FSDV_DEFINE_ERROR(Name)      \
  class Name : public Error {        \
   public:                           \
    using Error::Error;              \
  };

FSDV_DEFINE_ERROR(ShapeError)
FSDV_DEFINE_ERROR(InvalidCodeError)
FSDV_DEFINE_ERROR(DegenerateBoxError)
FSDV_DEFINE_ERROR(CapacityError)
FSDV_DEFINE_ERROR(PlacementError)
FSDV_DEFINE_ERROR(InvalidMeshError)
FSDV_DEFINE_ERROR(IndexError)
FSDV_DEFINE_ERROR(EpisodeError)
FSDV_DEFINE_ERROR(EmptyClassError)
FSDV_DEFINE_ERROR(ConfigError)
FSDV_DEFINE_ERROR(DivergenceError)
FSDV_DEFINE_ERROR(IoError)

#undef FSDV_DEFINE_ERROR

}  // namespace fsdv
