#pragma once

#include "phydi/tensor.hpp"

#include <cstddef>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

namespace phydi {

enum class PHKind { dense, conv };

/// Scales applied to the default uniform bounds of the algebra matrices
/// and the parameter blocks.
struct PHInit {
    double a_scale = 1.0;
    double f_scale = 1.0;

    friend bool operator==(const PHInit&, const PHInit&) = default;
};

/// Learnable factors of a parameterized hypercomplex weight
/// H = sum_i A_i (x) F_i, with A_i of size n x n.
///
/// Dense layers use F_i of size (d_out/n) x (d_in/n). Convolutional layers
/// use filter blocks of size (c_out/n) x (c_in/n) x k x k, and the Kronecker
/// expansion acts on the channel axes only.
class PHWeightSpec {
public:
    static PHWeightSpec dense(std::size_t n, std::size_t d_out, std::size_t d_in,
                              std::uint64_t seed, const PHInit& init = {});
    static PHWeightSpec conv(std::size_t n, std::size_t c_out, std::size_t c_in,
                             std::size_t kernel, std::uint64_t seed, const PHInit& init = {});
    /// Adopts existing factors after validating their shapes. Every tensor
    /// must require grad.
    static PHWeightSpec from_factors(PHKind kind, std::vector<Tensor> a, std::vector<Tensor> f);

    PHKind kind() const { return kind_; }
    std::size_t n() const { return n_; }
    std::size_t d_out() const { return d_out_; }
    std::size_t d_in() const { return d_in_; }
    std::size_t kernel() const { return kernel_; }

    const std::vector<Tensor>& a() const { return a_; }
    const std::vector<Tensor>& f() const { return f_; }

    /// Replaces the algebra matrices with a set shared with other layers.
    void share_algebra(const std::vector<Tensor>& a);

private:
    PHWeightSpec() = default;
    void validate() const;

    PHKind kind_ = PHKind::dense;
    std::size_t n_ = 1;
    std::size_t d_out_ = 0;
    std::size_t d_in_ = 0;
    std::size_t kernel_ = 1;
    std::vector<Tensor> a_;
    std::vector<Tensor> f_;
};

/// Learnable-parameter tally of PH layers against dense layers of the same
/// shape. The ratio is kept as the exact fraction ph_params / dense_equivalent.
struct ParamCount {
    std::uint64_t ph_params = 0;
    std::uint64_t dense_equivalent = 0;

    /// Reduced numerator and denominator of the ratio.
    std::pair<std::uint64_t, std::uint64_t> ratio() const;
    double ratio_value() const;

    ParamCount& operator+=(const ParamCount& other);
    friend ParamCount operator+(ParamCount a, const ParamCount& b) { return a += b; }
    friend bool operator==(const ParamCount&, const ParamCount&) = default;
};

/// Sum of Kronecker products. `summand_weights`, when given, holds one
/// scalar per summand (the WKP baseline).
Tensor build_dense_H(const PHWeightSpec& spec, std::span<const Tensor> summand_weights = {});

/// c_out x c_in x k x k filter bank; per spatial offset the channel matrix
/// is sum_i A_i (x) F_i[:, :, u, v].
Tensor build_conv_kernel(const PHWeightSpec& spec, std::span<const Tensor> summand_weights = {});

ParamCount count_params(const PHWeightSpec& spec);

}  // namespace phydi
