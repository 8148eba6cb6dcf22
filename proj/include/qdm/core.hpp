#pragma once

#include <cmath>
#include <complex>
#include <limits>
#include <stdexcept>
#include <string>

namespace qdm {

using cplx = std::complex<double>;

inline constexpr double pi = 3.141592653589793238462643383279502884;
inline const cplx iu{0.0, 1.0};
inline const cplx two_pi_i{0.0, 2.0 * pi};

struct error : std::runtime_error {
    explicit error(const std::string& what) : std::runtime_error(what) {}
};

// Bad user input / malformed configuration: CLI exit code 2.
struct invalid_input : error {
    using error::error;
};

// Numerical failure (clearance violation, step underflow, non-finite state,
// degenerate root cluster, ...): CLI exit code 1.
struct numeric_error : error {
    using error::error;
};

struct clearance_error : numeric_error {
    using numeric_error::numeric_error;
};

struct step_underflow_error : numeric_error {
    using numeric_error::numeric_error;
};

// Shift by a multiple of 2*pi*i so the imaginary part lands within pi of the
// reference: aligns log branches for coordinates defined modulo 2*pi*i.
inline cplx align_branch(cplx value, cplx ref) {
    const double k = std::round((value.imag() - ref.imag()) / (2.0 * pi));
    return value - cplx{0.0, 2.0 * pi * k};
}

struct Tolerances {
    double abs_tol = 1e-10;
    double rel_tol = 1e-10;
    double min_step = 1e-13;
    // Absolute clearance radius around singular points; callers scale the
    // 1e-3-of-configuration-diameter default via scaled_clearance().
    double singularity_clearance = 1e-3;
};

inline Tolerances scaled_clearance(Tolerances tol, double configuration_diameter) {
    tol.singularity_clearance = 1e-3 * configuration_diameter;
    return tol;
}

inline bool finite(cplx z) { return std::isfinite(z.real()) && std::isfinite(z.imag()); }

struct Matrix2 {
    cplx a{0.0}, b{0.0}, c{0.0}, d{0.0};  // [[a, b], [c, d]]

    static Matrix2 identity() { return {1.0, 0.0, 0.0, 1.0}; }
    static Matrix2 zero() { return {}; }

    cplx trace() const { return a + d; }
    cplx det() const { return a * d - b * c; }

    Matrix2 operator*(const Matrix2& o) const {
        return {a * o.a + b * o.c, a * o.b + b * o.d, c * o.a + d * o.c, c * o.b + d * o.d};
    }
    Matrix2 operator+(const Matrix2& o) const { return {a + o.a, b + o.b, c + o.c, d + o.d}; }
    Matrix2 operator-(const Matrix2& o) const { return {a - o.a, b - o.b, c - o.c, d - o.d}; }
    Matrix2 operator*(cplx s) const { return {a * s, b * s, c * s, d * s}; }

    Matrix2 inverse() const {
        const cplx dt = det();
        if (std::abs(dt) < 1e-300) throw numeric_error("Matrix2: singular matrix");
        return {d / dt, -b / dt, -c / dt, a / dt};
    }

    double norm() const {  // Frobenius
        return std::sqrt(std::norm(a) + std::norm(b) + std::norm(c) + std::norm(d));
    }
    bool is_finite() const { return finite(a) && finite(b) && finite(c) && finite(d); }
};

inline Matrix2 operator*(cplx s, const Matrix2& m) { return m * s; }

inline double distance(const Matrix2& x, const Matrix2& y) { return (x - y).norm(); }

// sigma_- of the variational formulas.
inline Matrix2 sigma_minus() { return {0.0, 0.0, 1.0, 0.0}; }

}  // namespace qdm
