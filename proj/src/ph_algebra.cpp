#include "phydi/ph_algebra.hpp"

#include "phydi/errors.hpp"
#include "phydi/ops.hpp"
#include "phydi/random.hpp"

#include <cmath>
#include <numeric>
#include <string>

namespace phydi {

namespace {

void require_divisible(const char* what, std::size_t value, std::size_t n) {
    if (n == 0) throw ShapeError("PH layer: n must be at least 1");
    if (value == 0 || value % n != 0) {
        throw ShapeError(std::string("PH layer: ") + what + " = " + std::to_string(value) +
                         " is not a positive multiple of n = " + std::to_string(n));
    }
}

PHWeightSpec make_random(PHKind kind, std::size_t n, std::size_t d_out, std::size_t d_in,
                         std::size_t k, std::uint64_t seed, const PHInit& init) {
    std::vector<Tensor> a, f;
    Rng rng(seed);
    const double a_bound = init.a_scale / std::sqrt(static_cast<double>(n));
    const double fan = static_cast<double>((d_in + d_out) * k * k);
    const double f_bound =
        init.f_scale * std::sqrt(6.0 / fan) * std::sqrt(static_cast<double>(n));
    for (std::size_t i = 0; i < n; ++i) {
        auto t = Tensor::zeros({n, n}, true);
        fill_uniform(t.mutable_data(), -a_bound, a_bound, rng);
        a.push_back(std::move(t));
    }
    for (std::size_t i = 0; i < n; ++i) {
        Shape shape = kind == PHKind::dense ? Shape{d_out / n, d_in / n}
                                            : Shape{d_out / n, d_in / n, k, k};
        auto t = Tensor::zeros(std::move(shape), true);
        fill_uniform(t.mutable_data(), -f_bound, f_bound, rng);
        f.push_back(std::move(t));
    }
    return PHWeightSpec::from_factors(kind, std::move(a), std::move(f));
}

Tensor weighted(const Tensor& term, std::span<const Tensor> weights, std::size_t i) {
    return weights.empty() ? term : scale(term, weights[i]);
}

}  // namespace

PHWeightSpec PHWeightSpec::dense(std::size_t n, std::size_t d_out, std::size_t d_in,
                                 std::uint64_t seed, const PHInit& init) {
    require_divisible("d_out", d_out, n);
    require_divisible("d_in", d_in, n);
    return make_random(PHKind::dense, n, d_out, d_in, 1, seed, init);
}

PHWeightSpec PHWeightSpec::conv(std::size_t n, std::size_t c_out, std::size_t c_in,
                                std::size_t kernel, std::uint64_t seed, const PHInit& init) {
    require_divisible("c_out", c_out, n);
    require_divisible("c_in", c_in, n);
    if (kernel == 0) throw ShapeError("PH conv layer: kernel size must be positive");
    return make_random(PHKind::conv, n, c_out, c_in, kernel, seed, init);
}

PHWeightSpec PHWeightSpec::from_factors(PHKind kind, std::vector<Tensor> a, std::vector<Tensor> f) {
    PHWeightSpec spec;
    spec.kind_ = kind;
    spec.n_ = a.size();
    if (spec.n_ == 0) throw ShapeError("PH layer: at least one algebra matrix is required");
    if (f.size() != spec.n_) {
        throw ShapeError("PH layer: " + std::to_string(a.size()) + " algebra matrices but " +
                         std::to_string(f.size()) + " parameter blocks");
    }
    const Shape& f0 = f.front().shape();
    if (kind == PHKind::dense && f0.size() != 2) {
        throw ShapeError("PH dense layer: parameter blocks must be matrices, got " + shape_str(f0));
    }
    if (kind == PHKind::conv && (f0.size() != 4 || f0[2] != f0[3])) {
        throw ShapeError("PH conv layer: filter blocks must be o x c x k x k, got " +
                         shape_str(f0));
    }
    spec.d_out_ = f0[0] * spec.n_;
    spec.d_in_ = f0[1] * spec.n_;
    spec.kernel_ = kind == PHKind::conv ? f0[2] : 1;
    spec.a_ = std::move(a);
    spec.f_ = std::move(f);
    spec.validate();
    return spec;
}

void PHWeightSpec::validate() const {
    for (const auto& t : a_) {
        if (t.shape() != Shape{n_, n_}) {
            throw ShapeError("PH layer: algebra matrix has shape " + shape_str(t.shape()) +
                             ", expected " + shape_str({n_, n_}));
        }
        if (!t.requires_grad()) throw ContractError("PH layer: algebra matrices must be learnable");
    }
    for (const auto& t : f_) {
        if (t.shape() != f_.front().shape()) {
            throw ShapeError("PH layer: parameter blocks differ in shape");
        }
        if (!t.requires_grad()) throw ContractError("PH layer: parameter blocks must be learnable");
    }
}

void PHWeightSpec::share_algebra(const std::vector<Tensor>& a) {
    auto saved = std::move(a_);
    a_ = a;
    try {
        if (a_.size() != n_) throw ShapeError("PH layer: shared algebra has the wrong size");
        validate();
    } catch (...) {
        a_ = std::move(saved);
        throw;
    }
}

std::pair<std::uint64_t, std::uint64_t> ParamCount::ratio() const {
    const auto g = std::gcd(ph_params, dense_equivalent);
    if (g == 0) return {0, 1};
    return {ph_params / g, dense_equivalent / g};
}

double ParamCount::ratio_value() const {
    return dense_equivalent == 0 ? 0.0
                                 : static_cast<double>(ph_params) /
                                       static_cast<double>(dense_equivalent);
}

ParamCount& ParamCount::operator+=(const ParamCount& other) {
    ph_params += other.ph_params;
    dense_equivalent += other.dense_equivalent;
    return *this;
}

Tensor build_dense_H(const PHWeightSpec& spec, std::span<const Tensor> summand_weights) {
    if (spec.kind() != PHKind::dense) throw ContractError("build_dense_H: spec is convolutional");
    if (!summand_weights.empty() && summand_weights.size() != spec.n()) {
        throw ShapeError("build_dense_H: need one weight per Kronecker summand");
    }
    Tensor h = weighted(kron(spec.a()[0], spec.f()[0]), summand_weights, 0);
    for (std::size_t i = 1; i < spec.n(); ++i) {
        h = add(h, weighted(kron(spec.a()[i], spec.f()[i]), summand_weights, i));
    }
    return h;
}

Tensor build_conv_kernel(const PHWeightSpec& spec, std::span<const Tensor> summand_weights) {
    if (spec.kind() != PHKind::conv) throw ContractError("build_conv_kernel: spec is dense");
    if (!summand_weights.empty() && summand_weights.size() != spec.n()) {
        throw ShapeError("build_conv_kernel: need one weight per Kronecker summand");
    }
    const std::size_t n = spec.n(), k = spec.kernel();
    const std::size_t co = spec.d_out() / n, ci = spec.d_in() / n;
    // Flattening (c_in/n, k, k) into one column axis makes the row-major
    // layout of kron(A, F) coincide with the c_out x c_in x k x k kernel.
    auto term = [&](std::size_t i) {
        return weighted(kron(spec.a()[i], reshape(spec.f()[i], {co, ci * k * k})),
                        summand_weights, i);
    };
    Tensor h = term(0);
    for (std::size_t i = 1; i < n; ++i) h = add(h, term(i));
    return reshape(h, {spec.d_out(), spec.d_in(), k, k});
}

ParamCount count_params(const PHWeightSpec& spec) {
    const std::uint64_t n = spec.n();
    const std::uint64_t k2 = spec.kernel() * spec.kernel();
    const std::uint64_t d_out = spec.d_out(), d_in = spec.d_in();
    return ParamCount{n * (d_out / n) * (d_in / n) * k2 + n * n * n, d_out * d_in * k2};
}

}  // namespace phydi
