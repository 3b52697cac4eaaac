#pragma once

#include <cstddef>

namespace phydi::detail {

// C (m x n) = [C +] op(A) * op(B), all row-major and contiguous.
// op(A) is m x k, op(B) is k x n.
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          const double* a, const double* b, double* c, bool accumulate);

}  // namespace phydi::detail
