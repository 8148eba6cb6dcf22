#pragma once

#include <algorithm>
#include <vector>

#include "qdm/core.hpp"

namespace qdm {

// Dense polynomial, coefficients in ascending degree order.  The zero
// polynomial is the empty vector.
using Poly = std::vector<cplx>;

inline Poly poly_trim(Poly p, double eps = 0.0) {
    while (!p.empty() && std::abs(p.back()) <= eps) p.pop_back();
    return p;
}

inline int poly_degree(const Poly& p) { return static_cast<int>(p.size()) - 1; }

inline cplx poly_eval(const Poly& p, cplx x) {
    cplx r = 0.0;
    for (auto it = p.rbegin(); it != p.rend(); ++it) r = r * x + *it;
    return r;
}

inline Poly poly_add(const Poly& p, const Poly& q) {
    Poly r(std::max(p.size(), q.size()), cplx{0.0});
    for (size_t i = 0; i < p.size(); ++i) r[i] += p[i];
    for (size_t i = 0; i < q.size(); ++i) r[i] += q[i];
    return r;
}

inline Poly poly_scale(Poly p, cplx s) {
    for (auto& c : p) c *= s;
    return p;
}

inline Poly poly_sub(const Poly& p, const Poly& q) { return poly_add(p, poly_scale(q, -1.0)); }

inline Poly poly_mul(const Poly& p, const Poly& q) {
    if (p.empty() || q.empty()) return {};
    Poly r(p.size() + q.size() - 1, cplx{0.0});
    for (size_t i = 0; i < p.size(); ++i)
        for (size_t j = 0; j < q.size(); ++j) r[i + j] += p[i] * q[j];
    return r;
}

inline Poly poly_derivative(const Poly& p) {
    if (p.size() <= 1) return {};
    Poly r(p.size() - 1);
    for (size_t i = 1; i < p.size(); ++i) r[i - 1] = double(i) * p[i];
    return r;
}

inline Poly poly_from_roots(const std::vector<cplx>& roots, cplx leading = 1.0) {
    Poly r{leading};
    for (cplx z : roots) r = poly_mul(r, Poly{-z, 1.0});
    return r;
}

// Exact division by (x - root) where root is a root of p; remainder discarded
// (synthetic division).
inline Poly poly_deflate(const Poly& p, cplx root) {
    if (p.size() <= 1) return {};
    Poly q(p.size() - 1);
    cplx carry = p.back();
    for (size_t i = p.size() - 1; i-- > 0;) {
        q[i] = carry;
        carry = p[i] + carry * root;
    }
    return q;
}

// Ratio of dense polynomials.  No simplification; degrees stay small enough
// here that exactness beats gcd bookkeeping.
struct RationalFn {
    Poly num;
    Poly den{cplx{1.0}};

    cplx operator()(cplx x) const {
        const cplx d = poly_eval(den, x);
        if (std::abs(d) < 1e-300) throw numeric_error("RationalFn: evaluation at a pole");
        return poly_eval(num, x) / d;
    }

    RationalFn derivative() const {
        return {poly_sub(poly_mul(poly_derivative(num), den), poly_mul(num, poly_derivative(den))),
                poly_mul(den, den)};
    }
    RationalFn operator*(const RationalFn& o) const {
        return {poly_mul(num, o.num), poly_mul(den, o.den)};
    }
    RationalFn operator+(const RationalFn& o) const {
        return {poly_add(poly_mul(num, o.den), poly_mul(o.num, den)), poly_mul(den, o.den)};
    }
    RationalFn operator-(const RationalFn& o) const {
        return {poly_sub(poly_mul(num, o.den), poly_mul(o.num, den)), poly_mul(den, o.den)};
    }
    RationalFn scaled(cplx s) const { return {poly_scale(num, s), den}; }
};

namespace detail {

inline double poly_root_scale(const Poly& p) {
    // Fujiwara-style bound on root magnitudes.
    const size_t n = p.size() - 1;
    const double an = std::abs(p[n]);
    double bound = 0.0;
    for (size_t k = 0; k < n; ++k) {
        if (p[k] == cplx{0.0}) continue;
        bound = std::max(bound, std::pow(std::abs(p[k]) / an, 1.0 / double(n - k)));
    }
    return std::max(bound, 1e-30);
}

}  // namespace detail

// All roots of a dense polynomial, degree <= 64, via Aberth-Ehrlich iteration
// with a deterministic initial circle, finished by Newton polish.  Simple
// well-separated roots only: a residual cluster tighter than 1e-8 * scale is
// reported as an error rather than silently averaged.
inline std::vector<cplx> polynomial_roots(const Poly& coeffs) {
    Poly p = poly_trim(coeffs);
    if (p.empty()) throw invalid_input("polynomial_roots: zero polynomial");
    if (p.size() == 1) return {};
    const int deg = poly_degree(p);
    if (deg > 64) throw invalid_input("polynomial_roots: degree > 64");
    {
        double maxc = 0.0;
        for (const cplx& c : p) maxc = std::max(maxc, std::abs(c));
        if (std::abs(p.back()) < 1e-14 * maxc)
            throw numeric_error("polynomial_roots: degenerate leading coefficient");
    }

    const Poly dp = poly_derivative(p);
    const double scale = detail::poly_root_scale(p);

    std::vector<cplx> z(deg);
    for (int k = 0; k < deg; ++k) {
        const double ang = 2.0 * pi * (k + 0.354) / deg + 0.1;  // fixed offsets break symmetry
        z[k] = 1.2 * scale * std::polar(1.0, ang);
    }

    for (int iter = 0; iter < 400; ++iter) {
        double shift = 0.0;
        for (int k = 0; k < deg; ++k) {
            const cplx pv = poly_eval(p, z[k]);
            const cplx dv = poly_eval(dp, z[k]);
            cplx ratio;
            if (std::abs(dv) > 1e-290 * std::abs(pv))
                ratio = pv / dv;
            else
                ratio = 0.01 * scale;
            cplx rep = 0.0;
            for (int j = 0; j < deg; ++j)
                if (j != k) rep += 1.0 / (z[k] - z[j]);
            const cplx denom = 1.0 - ratio * rep;
            const cplx step = (std::abs(denom) > 1e-290) ? ratio / denom : ratio;
            z[k] -= step;
            shift = std::max(shift, std::abs(step));
        }
        if (shift < 1e-14 * scale) break;
        if (iter == 399) throw numeric_error("polynomial_roots: Aberth iteration stalled");
    }

    for (int k = 0; k < deg; ++k) {  // Newton polish
        for (int it = 0; it < 3; ++it) {
            const cplx pv = poly_eval(p, z[k]);
            const cplx dv = poly_eval(dp, z[k]);
            if (std::abs(dv) < 1e-290) break;
            z[k] -= pv / dv;
        }
        if (!finite(z[k])) throw numeric_error("polynomial_roots: non-finite root");
    }

    for (int i = 0; i < deg; ++i)
        for (int j = i + 1; j < deg; ++j)
            if (std::abs(z[i] - z[j]) < 1e-8 * scale)
                throw numeric_error("polynomial_roots: multiple or clustered root detected");

    std::sort(z.begin(), z.end(), [](cplx u, cplx v) {
        if (u.real() != v.real()) return u.real() < v.real();
        return u.imag() < v.imag();
    });
    return z;
}

}  // namespace qdm
