#pragma once

#include "phydi/tensor.hpp"

#include <functional>

namespace phydi {

using ScalarFn = std::function<Tensor(const Tensor&)>;

/// Compares the analytic gradient of f at x with central differences of
/// step h. Returns the largest per-coordinate
/// |analytic - numeric| / (|analytic| + |numeric| + 1e-12).
///
/// x must be a leaf that requires grad; it is perturbed in place and
/// restored, so f may equally read x through a captured handle. Any
/// gradient x held before the call is discarded.
double finite_diff_check(const ScalarFn& f, Tensor x, double h = 1e-5);

}  // namespace phydi
