// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace splatfill {

/// Dense row-major double tensor with a small shape vector.
struct Tensor {
    std::vector<int> shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
        size_t n = 1;
        for (int d : shape) n *= size_t(d);
        data.assign(n, 0.0);
    }

    size_t size() const { return data.size(); }
    int dim(int i) const { return shape[size_t(i)]; }
    double* ptr() { return data.data(); }
    const double* ptr() const { return data.data(); }
    void zero() { std::fill(data.begin(), data.end(), 0.0); }
    bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

// Row-major C = alpha * op(A) * op(B) + beta * C via BLAS dgemm.
// A is m x k after trans_a, B is k x n after trans_b, C is m x n.
void gemm(bool trans_a, bool trans_b, int m, int n, int k, double alpha, const double* a,
          int lda, const double* b, int ldb, double beta, double* c, int ldc);

// Convenience: C(m x n) = A(m x k) * B(k x n), no transposes, overwrite.
void matmul(const double* a, const double* b, double* c, int m, int n, int k);

void set_blas_threads(int n);

} // namespace splatfill
