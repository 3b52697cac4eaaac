#include "phydi/grad_check.hpp"

#include "phydi/errors.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace phydi {

namespace {

double evaluate(const ScalarFn& f, const Tensor& x) {
    NoGradGuard guard;
    const Tensor y = f(x);
    if (y.numel() != 1) {
        throw ShapeError("finite_diff_check: function returned shape " + shape_str(y.shape()));
    }
    return y.item();
}

}  // namespace

double finite_diff_check(const ScalarFn& f, Tensor x, double h) {
    if (!(h > 0.0 && h <= 1e-2)) throw ContractError("finite_diff_check: step must lie in (0, 1e-2]");
    if (!x.is_leaf() || !x.requires_grad()) {
        throw ContractError("finite_diff_check: x must be a leaf that requires grad");
    }

    x.zero_grad();
    const Tensor y = f(x);
    if (y.numel() != 1) {
        throw ShapeError("finite_diff_check: function returned shape " + shape_str(y.shape()));
    }
    std::vector<double> analytic(x.numel(), 0.0);
    if (y.requires_grad()) {
        y.backward();
        if (x.has_grad()) std::copy(x.grad().begin(), x.grad().end(), analytic.begin());
    }
    x.zero_grad();

    auto values = x.mutable_data();
    double worst = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) {
        const double saved = values[i];
        values[i] = saved + h;
        const double up = evaluate(f, x);
        values[i] = saved - h;
        const double down = evaluate(f, x);
        values[i] = saved;
        const double numeric = (up - down) / (2.0 * h);
        const double err =
            std::abs(analytic[i] - numeric) / (std::abs(analytic[i]) + std::abs(numeric) + 1e-12);
        worst = std::max(worst, err);
    }
    return worst;
}

}  // namespace phydi
