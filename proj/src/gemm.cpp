#include "gemm.hpp"

#include <Eigen/Core>

namespace phydi::detail {

namespace {
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;
}  // namespace

void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          const double* a, const double* b, double* c, bool accumulate) {
    if (m == 0 || n == 0) return;
    const auto M = static_cast<Eigen::Index>(m);
    const auto N = static_cast<Eigen::Index>(n);
    const auto K = static_cast<Eigen::Index>(k);
    Map out(c, M, N);
    if (!accumulate) out.setZero();
    if (k == 0) return;
    const ConstMap A(a, trans_a ? K : M, trans_a ? M : K);
    const ConstMap B(b, trans_b ? N : K, trans_b ? K : N);
    if (!trans_a && !trans_b) {
        out.noalias() += A * B;
    } else if (trans_a && !trans_b) {
        out.noalias() += A.transpose() * B;
    } else if (!trans_a && trans_b) {
        out.noalias() += A * B.transpose();
    } else {
        out.noalias() += A.transpose() * B.transpose();
    }
}

}  // namespace phydi::detail
