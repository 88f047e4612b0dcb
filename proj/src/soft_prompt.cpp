#include "pflow/soft_prompt.hpp"

namespace pflow {

SoftPrompt::SoftPrompt(tensor::Tensor vectors) : vectors_(std::move(vectors)) {
  if (vectors_.rank() != 2 || vectors_.rows() == 0 || vectors_.cols() == 0)
    throw tensor::ShapeError("SoftPrompt: expected a non-empty l×d matrix, got " +
                             tensor::shape_string(vectors_.shape()));
}

}  // namespace pflow
