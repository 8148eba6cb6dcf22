#pragma once

#include <vector>

#include "qdm/core.hpp"

namespace qdm {

// Dense complex matrix in row-major order.
struct DenseMatrix {
    size_t rows = 0, cols = 0;
    std::vector<cplx> a;

    DenseMatrix() = default;
    DenseMatrix(size_t r, size_t c) : rows(r), cols(c), a(r * c, cplx{0.0}) {}

    cplx& operator()(size_t i, size_t j) { return a[i * cols + j]; }
    cplx operator()(size_t i, size_t j) const { return a[i * cols + j]; }

    double max_abs() const {
        double m = 0.0;
        for (const cplx& v : a) m = std::max(m, std::abs(v));
        return m;
    }
};

// Solve A x = b by LU with partial pivoting; A square.
inline std::vector<cplx> solve_dense(DenseMatrix A, std::vector<cplx> b) {
    const size_t n = A.rows;
    if (A.cols != n || b.size() != n) throw invalid_input("solve_dense: shape mismatch");
    for (size_t k = 0; k < n; ++k) {
        size_t piv = k;
        for (size_t i = k + 1; i < n; ++i)
            if (std::abs(A(i, k)) > std::abs(A(piv, k))) piv = i;
        if (std::abs(A(piv, k)) < 1e-300) throw numeric_error("solve_dense: singular system");
        if (piv != k) {
            for (size_t j = 0; j < n; ++j) std::swap(A(k, j), A(piv, j));
            std::swap(b[k], b[piv]);
        }
        for (size_t i = k + 1; i < n; ++i) {
            const cplx f = A(i, k) / A(k, k);
            A(i, k) = 0.0;
            for (size_t j = k + 1; j < n; ++j) A(i, j) -= f * A(k, j);
            b[i] -= f * b[k];
        }
    }
    std::vector<cplx> x(n);
    for (size_t i = n; i-- > 0;) {
        cplx s = b[i];
        for (size_t j = i + 1; j < n; ++j) s -= A(i, j) * x[j];
        x[i] = s / A(i, i);
    }
    return x;
}

inline DenseMatrix invert_dense(const DenseMatrix& A) {
    const size_t n = A.rows;
    DenseMatrix inv(n, n);
    for (size_t j = 0; j < n; ++j) {
        std::vector<cplx> e(n, cplx{0.0});
        e[j] = 1.0;
        auto col = solve_dense(A, e);
        for (size_t i = 0; i < n; ++i) inv(i, j) = col[i];
    }
    return inv;
}

}  // namespace qdm
