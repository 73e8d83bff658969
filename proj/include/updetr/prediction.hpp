#pragma once

#include "updetr/tensor.hpp"

namespace updetr {

/// One (class logits, box, reconstructed feature) triple per object query.
struct PredictionSet {
  Tensor class_logits;  // [N×K']
  Tensor boxes;         // [N×4], sigmoid outputs in (0,1)
  Tensor rec_features;  // [N×C_backbone]; undefined when the head is absent

  std::size_t queries() const { return class_logits.extent(0); }
};

/// Index of the "match the query patch" class in pretext logits.
inline constexpr std::size_t kMatchClass = 1;
inline constexpr std::size_t kNoMatchClass = 0;

}  // namespace updetr
