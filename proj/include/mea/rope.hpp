#pragma once

#include "mea/tensor.hpp"

namespace mea {

/// Rotary position embedding on an N x h x d tensor (axis 0 = position).
/// Dims (2j, 2j+1) at position p are rotated by p * base^(-2j/d); `inverse`
/// rotates by the negated angle. Throws DimensionError for odd d.
Tensor rope(const Tensor& x, double base = 10000.0, bool inverse = false);

}  // namespace mea
