#include "mea/rope.hpp"

#include <cmath>

#include "mea/error.hpp"

namespace mea {

Tensor rope(const Tensor& x, double base, bool inverse) {
  require_rank(x, 3, "rope");
  const std::size_t n = x.dim(0), h = x.dim(1), d = x.dim(2);
  if (d % 2 != 0) throw DimensionError("rope: head dimension must be even, got " + std::to_string(d));
  Tensor out(x.shape());
  const double sign = inverse ? -1.0 : 1.0;
  for (std::size_t j = 0; j < d / 2; ++j) {
    const double freq = std::pow(base, -2.0 * static_cast<double>(j) / static_cast<double>(d));
    for (std::size_t p = 0; p < n; ++p) {
      const double angle = sign * static_cast<double>(p) * freq;
      const double c = std::cos(angle), s = std::sin(angle);
      for (std::size_t head = 0; head < h; ++head) {
        const double x0 = x.at(p, head, 2 * j), x1 = x.at(p, head, 2 * j + 1);
        out.at(p, head, 2 * j) = x0 * c - x1 * s;
        out.at(p, head, 2 * j + 1) = x0 * s + x1 * c;
      }
    }
  }
  return out;
}

}  // namespace mea
