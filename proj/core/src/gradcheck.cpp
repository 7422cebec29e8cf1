#include "advdet/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "advdet/errors.hpp"

namespace advdet {

Tensor finite_difference_grad(const ScalarFunction& f, const Tensor& p, double h) {
  if (!(h > 0.0)) throw ContractError("finite difference step must be positive");
  Tensor grad(p.shape());
  Tensor probe = p;
  for (std::size_t i = 0; i < p.size(); ++i) {
    probe[i] = p[i] + h;
    const double up = f(probe);
    probe[i] = p[i] - h;
    const double down = f(probe);
    probe[i] = p[i];
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw NumericError("finite difference: f is non-finite near coordinate " +
                         std::to_string(i));
    }
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

double max_relative_error(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("max_relative_error: " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    worst = std::max(worst, std::abs(a[i] - b[i]) / (1.0 + std::abs(b[i])));
  }
  return worst;
}

}  // namespace advdet
