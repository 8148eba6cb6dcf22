#pragma once

#include <array>
#include <functional>
#include <random>
#include <vector>

#include "qdm/core.hpp"
#include "qdm/linalg.hpp"
#include "qdm/poly.hpp"

namespace qdm {

// Point on the Riemann sphere; infinity is a distinguished symbolic value.
struct SpherePoint {
    bool is_inf = false;
    cplx z{0.0};

    static SpherePoint infinity() { return {true, cplx{0.0}}; }
    static SpherePoint at(cplx z) { return {false, z}; }

    bool operator==(const SpherePoint& o) const {
        if (is_inf != o.is_inf) return false;
        return is_inf || z == o.z;
    }
};

struct PuncturedSphere {
    std::vector<SpherePoint> punctures;  // ordered; at most one infinite

    size_t n() const { return punctures.size(); }

    std::vector<cplx> finite_punctures() const {
        std::vector<cplx> out;
        for (const auto& p : punctures)
            if (!p.is_inf) out.push_back(p.z);
        return out;
    }

    bool has_infinity() const {
        for (const auto& p : punctures)
            if (p.is_inf) return true;
        return false;
    }

    cplx centroid() const {
        cplx c{0.0};
        const auto fin = finite_punctures();
        for (cplx z : fin) c += z;
        return c / double(fin.size());
    }

    double diameter() const {
        const auto fin = finite_punctures();
        double d = 0.0;
        for (size_t i = 0; i < fin.size(); ++i)
            for (size_t j = i + 1; j < fin.size(); ++j) d = std::max(d, std::abs(fin[i] - fin[j]));
        return d > 0.0 ? d : 1.0;
    }

    void validate() const {
        if (n() < 4) throw invalid_input("PuncturedSphere: need at least 4 punctures");
        int inf_count = 0;
        for (const auto& p : punctures) inf_count += p.is_inf ? 1 : 0;
        if (inf_count > 1) throw invalid_input("PuncturedSphere: more than one point at infinity");
        const double scale = diameter();
        for (size_t i = 0; i < n(); ++i)
            for (size_t j = i + 1; j < n(); ++j) {
                if (punctures[i].is_inf || punctures[j].is_inf) continue;
                if (std::abs(punctures[i].z - punctures[j].z) < 1e-9 * scale)
                    throw invalid_input("PuncturedSphere: punctures must be pairwise distinct");
            }
    }
};

// Meromorphic quadratic differential on the base sphere, stored as numerator
// coefficients over the implicit monic product of the finite punctures.
// Poles may only sit at punctures and are at most simple (in the chart where
// the puncture is finite; the infinity condition constrains the numerator
// degree).
struct QuadDiff {
    PuncturedSphere base;
    Poly numerator;

    Poly denominator() const {
        return poly_from_roots(base.finite_punctures());
    }

    cplx operator()(cplx x) const {
        cplx den{1.0};
        for (cplx y : base.finite_punctures()) den *= (x - y);
        return poly_eval(numerator, x) / den;
    }

    // Q'/Q as a closed form: N'/N - sum 1/(x - y_i).
    cplx log_deriv(cplx x) const {
        cplx s{0.0};
        const Poly dn = poly_derivative(numerator);
        s += poly_eval(dn, x) / poly_eval(numerator, x);
        for (cplx y : base.finite_punctures()) s -= 1.0 / (x - y);
        return s;
    }

    RationalFn as_rational() const { return {numerator, denominator()}; }

    // Simple zeros away from the punctures; n-4 of them for a full-pole
    // differential.
    std::vector<cplx> zeros() const {
        const Poly trimmed = poly_trim(numerator, 0.0);
        if (poly_degree(trimmed) < 1) return {};
        return polynomial_roots(trimmed);
    }

    void validate() const {
        base.validate();
        if (poly_trim(numerator).empty()) throw invalid_input("QuadDiff: zero differential");
        const int max_deg =
            static_cast<int>(base.finite_punctures().size()) - (base.has_infinity() ? 3 : 4);
        if (poly_degree(poly_trim(numerator)) > max_deg)
            throw invalid_input("QuadDiff: numerator degree violates the infinity condition");
    }

    // Strict membership check for the model space: simple pole at *every*
    // puncture and only simple zeros elsewhere.
    void validate_full_poles() const {
        validate();
        const double scale = base.diameter();
        for (cplx y : base.finite_punctures())
            if (std::abs(poly_eval(numerator, y)) < 1e-12 * std::max(1.0, poly_eval_scale(y)))
                throw invalid_input("QuadDiff: puncture with vanishing residue scale");
        if (base.has_infinity()) {
            const int want = static_cast<int>(base.finite_punctures().size()) - 3;
            if (poly_degree(poly_trim(numerator)) != want)
                throw invalid_input("QuadDiff: missing simple pole at infinity");
        }
        for (cplx z : zeros())
            for (cplx y : base.finite_punctures())
                if (std::abs(z - y) < 1e-9 * scale)
                    throw invalid_input("QuadDiff: zero collides with a puncture");
    }

  private:
    double poly_eval_scale(cplx x) const {
        double s = 0.0;
        cplx xk{1.0};
        for (const cplx& c : numerator) {
            s += std::abs(c) * std::abs(xk);
            xk *= x;
        }
        return s;
    }
};

struct HeunParameters {
    cplx t;
    cplx mu;
};

inline PuncturedSphere heun_base(cplx t) {
    PuncturedSphere s;
    s.punctures = {SpherePoint::at(0.0), SpherePoint::at(1.0), SpherePoint::at(t),
                   SpherePoint::infinity()};
    s.validate();
    return s;
}

// Q = mu / (x (x-1) (x-t)) on the four-punctured sphere {0, 1, t, inf}.
inline QuadDiff heun_Q(const HeunParameters& par) {
    if (std::abs(par.mu) == 0.0) throw invalid_input("heun_Q: mu must be nonzero");
    QuadDiff q;
    q.base = heun_base(par.t);
    q.numerator = {par.mu};
    q.validate_full_poles();
    return q;
}

// ---------------------------------------------------------------------------
// Chart bookkeeping: three punctures pinned by Moebius freedom, the rest are
// position coordinates (through logarithmic cross-ratios q_k).

struct ChartRoles {
    std::array<int, 3> pinned;  // indices of y1, y2, y3 in the puncture list
    std::vector<int> moving;    // indices of y_{k+3}, list order preserved

    static ChartRoles make(const PuncturedSphere& base, std::array<int, 3> pinned) {
        ChartRoles r;
        r.pinned = pinned;
        for (int i = 0; i < static_cast<int>(base.n()); ++i)
            if (i != pinned[0] && i != pinned[1] && i != pinned[2]) r.moving.push_back(i);
        for (int idx : r.moving)
            if (base.punctures[idx].is_inf)
                throw invalid_input("ChartRoles: the point at infinity must be a pinned puncture");
        return r;
    }
};

namespace detail {

// (u - v) for sphere points where at most one of the two is infinite; any
// infinite factor is dropped (the caller pairs them so the limits cancel).
inline cplx finite_diff_or_one(const SpherePoint& u, const SpherePoint& v, double& inf_balance,
                               double weight) {
    if (u.is_inf || v.is_inf) {
        inf_balance += weight;
        return u.is_inf ? cplx{1.0} : cplx{-1.0};
    }
    return u.z - v.z;
}

}  // namespace detail

// exp(q_k) = (y_{k+3}-y1)(y3-y2) / ((y3-y1)(y_{k+3}-y2)), with the limit taken
// when one of the entries is the point at infinity.
inline cplx coordinate_q(const PuncturedSphere& base, const ChartRoles& roles, size_t k) {
    const SpherePoint y1 = base.punctures[roles.pinned[0]];
    const SpherePoint y2 = base.punctures[roles.pinned[1]];
    const SpherePoint y3 = base.punctures[roles.pinned[2]];
    const SpherePoint yk = base.punctures[roles.moving[k]];
    double balance = 0.0;
    const cplx f1 = detail::finite_diff_or_one(yk, y1, balance, 1.0);
    const cplx f2 = detail::finite_diff_or_one(y3, y2, balance, 1.0);
    const cplx f3 = detail::finite_diff_or_one(y3, y1, balance, -1.0);
    const cplx f4 = detail::finite_diff_or_one(yk, y2, balance, -1.0);
    if (std::abs(balance) > 0.5)
        throw numeric_error("coordinate_q: unbalanced infinite factors");
    const cplx ratio = f1 * f2 / (f3 * f4);
    if (!finite(ratio) || std::abs(ratio) == 0.0)
        throw numeric_error("coordinate_q: degenerate cross-ratio");
    return std::log(ratio);
}

inline std::vector<cplx> coordinates_q(const PuncturedSphere& base, const ChartRoles& roles) {
    std::vector<cplx> q;
    for (size_t k = 0; k < roles.moving.size(); ++k) q.push_back(coordinate_q(base, roles, k));
    return q;
}

// Invert coordinate_q for the moving puncture: Moebius solve with the same
// infinity limits.
inline cplx puncture_from_q(const SpherePoint& y1, const SpherePoint& y2, const SpherePoint& y3,
                            cplx q) {
    const cplx eq = std::exp(q);
    if (y1.is_inf) return y2.z + (y3.z - y2.z) / eq;
    if (y2.is_inf) return y1.z + eq * (y3.z - y1.z);
    if (y3.is_inf) return (y1.z - eq * y2.z) / (1.0 - eq);
    const cplx r = eq * (y3.z - y1.z) / (y3.z - y2.z);
    return (y1.z - r * y2.z) / (1.0 - r);
}

inline PuncturedSphere base_from_q(const PuncturedSphere& reference, const ChartRoles& roles,
                                   const std::vector<cplx>& q) {
    if (q.size() != roles.moving.size()) throw invalid_input("base_from_q: wrong q size");
    PuncturedSphere out = reference;
    const SpherePoint y1 = reference.punctures[roles.pinned[0]];
    const SpherePoint y2 = reference.punctures[roles.pinned[1]];
    const SpherePoint y3 = reference.punctures[roles.pinned[2]];
    for (size_t k = 0; k < q.size(); ++k)
        out.punctures[roles.moving[k]] = SpherePoint::at(puncture_from_q(y1, y2, y3, q[k]));
    out.validate();
    return out;
}

// ---------------------------------------------------------------------------
// Basis differentials Q_k: simple poles exactly at {y1, y2, y3, y_{k+3}}.
// Closed form (1/4pi i) (y1-y2)(y3-y_{k+3}) / prod of the four pole factors,
// with infinite entries handled by the cancelling limits.

inline QuadDiff basis_Qk(const PuncturedSphere& base, const ChartRoles& roles, size_t k) {
    const SpherePoint y1 = base.punctures[roles.pinned[0]];
    const SpherePoint y2 = base.punctures[roles.pinned[1]];
    const SpherePoint y3 = base.punctures[roles.pinned[2]];
    const SpherePoint yk = base.punctures[roles.moving[k]];

    cplx constant = 1.0 / (4.0 * pi * iu);
    // (y1 - y2) against (x - y1)(x - y2); (y3 - y_{k+3}) against the others.
    if (y1.is_inf)
        constant *= -(y3.z - yk.z);
    else if (y2.is_inf)
        constant *= (y3.z - yk.z);
    else if (y3.is_inf)
        constant *= -(y1.z - y2.z);
    else if (yk.is_inf)
        throw invalid_input("basis_Qk: moving puncture at infinity");
    else
        constant *= (y1.z - y2.z) * (y3.z - yk.z);

    QuadDiff out;
    out.base = base;
    Poly num{constant};
    // Numerator carries a factor (x - y_j) for every finite non-pole puncture.
    for (size_t j = 0; j < base.n(); ++j) {
        const bool is_pole = (static_cast<int>(j) == roles.pinned[0]) ||
                             (static_cast<int>(j) == roles.pinned[1]) ||
                             (static_cast<int>(j) == roles.pinned[2]) ||
                             (static_cast<int>(j) == roles.moving[k]);
        if (!is_pole && !base.punctures[j].is_inf)
            num = poly_mul(num, Poly{-base.punctures[j].z, cplx{1.0}});
    }
    out.numerator = num;
    out.validate();
    return out;
}

// Decompose Q in the chart basis through probe-point sampling; solved system
// is re-verified at extra probes.
inline std::vector<cplx> decompose(const QuadDiff& Q, const std::vector<QuadDiff>& basis,
                                   uint64_t seed = 0x51a9e2u) {
    const size_t k = basis.size();
    if (k == 0) throw invalid_input("decompose: empty basis");
    const double diam = Q.base.diameter();
    const cplx center = Q.base.centroid();
    const auto fin = Q.base.finite_punctures();

    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> angle(0.0, 2.0 * pi), radius(1.4, 2.6);

    auto draw_probe = [&]() {
        for (int tries = 0; tries < 64; ++tries) {
            const cplx x = center + std::polar(radius(rng) * diam, angle(rng));
            bool ok = true;
            for (cplx y : fin)
                if (std::abs(x - y) < 0.1 * diam) ok = false;
            if (ok) return x;
        }
        throw numeric_error("decompose: could not place probe points");
    };

    for (int attempt = 0; attempt < 5; ++attempt) {
        DenseMatrix A(k, k);
        std::vector<cplx> b(k);
        for (size_t i = 0; i < k; ++i) {
            const cplx x = draw_probe();
            for (size_t j = 0; j < k; ++j) A(i, j) = basis[j](x);
            b[i] = Q(x);
        }
        std::vector<cplx> p;
        try {
            p = solve_dense(A, b);
        } catch (const numeric_error&) {
            continue;
        }
        bool verified = true;
        for (int i = 0; i < 20 && verified; ++i) {
            const cplx x = draw_probe();
            cplx sum{0.0};
            for (size_t j = 0; j < k; ++j) sum += p[j] * basis[j](x);
            if (std::abs(sum - Q(x)) > 1e-9 * (std::abs(Q(x)) + 1e-30)) verified = false;
        }
        if (verified) return p;
    }
    throw numeric_error("decompose: probe systems failed to verify");
}

struct CotangentChart {
    PuncturedSphere base;
    ChartRoles roles;
    std::vector<cplx> q, p;
    std::vector<QuadDiff> basis;
};

inline CotangentChart make_chart(const QuadDiff& Q, std::array<int, 3> pinned,
                                 uint64_t seed = 0x51a9e2u) {
    CotangentChart c;
    c.base = Q.base;
    c.roles = ChartRoles::make(Q.base, pinned);
    c.q = coordinates_q(Q.base, c.roles);
    for (size_t k = 0; k < c.roles.moving.size(); ++k)
        c.basis.push_back(basis_Qk(Q.base, c.roles, k));
    c.p = decompose(Q, c.basis, seed);
    return c;
}

// Configuration realized from chart coordinates: pinned punctures stay at the
// reference positions, moving punctures from q, differential from p.
inline QuadDiff qd_from_chart(const PuncturedSphere& reference, const ChartRoles& roles,
                              const std::vector<cplx>& q, const std::vector<cplx>& p) {
    const PuncturedSphere base = base_from_q(reference, roles, q);
    QuadDiff out;
    out.base = base;
    out.numerator = Poly{};
    for (size_t k = 0; k < p.size(); ++k) {
        const QuadDiff bk = basis_Qk(base, roles, k);
        out.numerator = poly_add(out.numerator, poly_scale(bk.numerator, p[k]));
    }
    out.validate();
    return out;
}

// ---------------------------------------------------------------------------
// Potential of the associated second-order equation in the x-chart, where the
// background projective connection vanishes identically: u + 1 = S_v / (2Q)
// with S_v the Schwarzian derivative built from v'/v = Q'/(2Q).  Exact
// rational calculus throughout.

struct Potential {
    RationalFn u_plus_1;
    RationalFn du_dx;

    cplx u(cplx x) const { return u_plus_1(x) - 1.0; }
    cplx ux(cplx x) const { return du_dx(x); }
};

inline Potential potential_u(const QuadDiff& Q) {
    const Poly N = poly_trim(Q.numerator);
    const Poly D = Q.denominator();
    const Poly Np = poly_derivative(N), Dp = poly_derivative(D);
    // L = Q'/(2Q) = (N'D - N D') / (2 N D)
    const RationalFn L{poly_sub(poly_mul(Np, D), poly_mul(N, Dp)), poly_scale(poly_mul(N, D), 2.0)};
    const RationalFn Sv = L.derivative() - (L * L).scaled(0.5);
    // u + 1 = Sv / (2Q) = Sv * D / (2N)
    const RationalFn upl1 = Sv * RationalFn{D, poly_scale(N, 2.0)};
    return Potential{upl1, upl1.derivative()};
}

// ---------------------------------------------------------------------------
// Kernels in the x-chart.

inline cplx bergman_B(cplx x, cplx y) {
    const cplx d = x - y;
    return 1.0 / (d * d);
}

// h(x, y) = B(x, y)^2 / (Q(x) Q(y)); transforms as a function on both legs.
inline cplx h_kernel(const QuadDiff& Q, cplx x, cplx y) {
    const cplx b = bergman_B(x, y);
    return b * b / (Q(x) * Q(y));
}

// Third-kind differential with residues +1 at a, -1 at b (an infinite
// endpoint drops its term).
inline std::function<cplx(cplx)> third_kind_W(const SpherePoint& a, const SpherePoint& b) {
    if (a.is_inf && b.is_inf) throw invalid_input("third_kind_W: both endpoints infinite");
    return [a, b](cplx x) {
        cplx v{0.0};
        if (!a.is_inf) v += 1.0 / (x - a.z);
        if (!b.is_inf) v -= 1.0 / (x - b.z);
        return v;
    };
}

}  // namespace qdm
