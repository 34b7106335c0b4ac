// SPDX-License-Identifier: Apache-2.0
#include "splatfill/tensor.hpp"

#include <cblas.h>

namespace splatfill {

void gemm(bool trans_a, bool trans_b, int m, int n, int k, double alpha, const double* a,
          int lda, const double* b, int ldb, double beta, double* c, int ldc) {
    cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
                trans_b ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b, ldb, beta, c,
                ldc);
}

void matmul(const double* a, const double* b, double* c, int m, int n, int k) {
    gemm(false, false, m, n, k, 1.0, a, k, b, n, 0.0, c, n);
}

void set_blas_threads(int n) { openblas_set_num_threads(n); }

} // namespace splatfill
