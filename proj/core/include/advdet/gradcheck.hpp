#pragma once

#include <functional>

#include "advdet/tensor.hpp"

namespace advdet {

using ScalarFunction = std::function<double(const Tensor&)>;

// Central-difference gradient (f(p + h e_i) - f(p - h e_i)) / 2h for every
// coordinate of p. Independent of the autodiff engine; used as its oracle.
// Throws ContractError for h <= 0 and NumericError if f is non-finite at any
// probe point.
Tensor finite_difference_grad(const ScalarFunction& f, const Tensor& p, double h);

// Largest |a - b| / (1 + |b|) over all coordinates.
double max_relative_error(const Tensor& a, const Tensor& b);

}  // namespace advdet
