#pragma once

#include "pflow/tensor.hpp"

#include <cstddef>

namespace pflow {

// The l×d learnable prompt matrix. Row i is prompt vector v_{i+1}.
class SoftPrompt {
 public:
  SoftPrompt() = default;
  explicit SoftPrompt(tensor::Tensor vectors);

  std::size_t length() const { return vectors_.rows(); }
  std::size_t dim() const { return vectors_.cols(); }
  const tensor::Tensor& vectors() const { return vectors_; }

  friend bool operator==(const SoftPrompt&, const SoftPrompt&) = default;

 private:
  tensor::Tensor vectors_;
};

}  // namespace pflow
