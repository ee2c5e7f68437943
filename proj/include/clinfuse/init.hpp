#pragma once

#include "clinfuse/rng.hpp"
#include "clinfuse/tensor.hpp"

namespace clinfuse {

/// I.i.d. N(0, 2/fan_in) weights, marked trainable.
Tensor he_init(Shape shape, Index fan_in, Rng& rng);

/// Zero bias, marked trainable.
inline Tensor bias_init(Shape shape) { return Tensor::zeros(std::move(shape), true); }

}  // namespace clinfuse
