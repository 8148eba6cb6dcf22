#pragma once

#include <functional>
#include <span>
#include <vector>

#include "qdm/core.hpp"
#include "qdm/path.hpp"
#include "qdm/rk.hpp"

namespace qdm {

using CoeffFn = std::function<Matrix2(cplx)>;
using ScalarFn = std::function<cplx(cplx)>;

struct TransferNode {
    double global_s;  // in [0, 1] across the whole path
    cplx x;
    Matrix2 Y;
};

struct TransferOptions {
    Tolerances tol;
    // Points the path must clear by tol.singularity_clearance (hard error).
    std::vector<cplx> clearance_points;
    std::function<void(const TransferNode&)> on_node;
};

struct TransferResult {
    Matrix2 transfer = Matrix2::identity();
    std::vector<cplx> integrals;
    OdeStats stats;
};

namespace detail {

inline void check_clearance(const ContourPath& path, const TransferOptions& opt) {
    if (opt.clearance_points.empty()) return;
    const double d = path.min_distance(opt.clearance_points);
    if (d < opt.tol.singularity_clearance)
        throw clearance_error("path clears a singular point by " + std::to_string(d) +
                              " < clearance " + std::to_string(opt.tol.singularity_clearance));
}

}  // namespace detail

// Transfer matrix of dY/dx = C(x) Y along `path` (Y(start) = I), with any
// number of scalar contour integrals accumulated in the same sweep.
inline TransferResult integrate_transfer(const CoeffFn& coeff, std::span<const ScalarFn> integrands,
                                         const ContourPath& path, const TransferOptions& opt) {
    path.validate();
    detail::check_clearance(path, opt);

    const size_t k = integrands.size();
    OdeState y(4 + k, cplx{0.0});
    y[0] = 1.0;
    y[3] = 1.0;

    TransferResult res;
    const double nseg = double(path.segments.size());
    for (size_t is = 0; is < path.segments.size(); ++is) {
        const PathSegment& seg = path.segments[is];
        auto rhs = [&](double s, const OdeState& st, OdeState& d) {
            const cplx x = seg.at(s);
            const cplx v = seg.velocity(s);
            const Matrix2 C = coeff(x);
            const Matrix2 Y{st[0], st[1], st[2], st[3]};
            const Matrix2 P = C * Y;
            d[0] = v * P.a;
            d[1] = v * P.b;
            d[2] = v * P.c;
            d[3] = v * P.d;
            for (size_t j = 0; j < k; ++j) d[4 + j] = v * integrands[j](x);
        };
        auto node = [&](double s, const OdeState& st) {
            if (opt.on_node)
                opt.on_node({(double(is) + s) / nseg, seg.at(s), Matrix2{st[0], st[1], st[2], st[3]}});
        };
        const OdeStats st = rk54_integrate(rhs, y, 0.0, 1.0, opt.tol, node);
        res.stats.accepted += st.accepted;
        res.stats.rejected += st.rejected;
        res.stats.fevals += st.fevals;
    }

    res.transfer = Matrix2{y[0], y[1], y[2], y[3]};
    if (!res.transfer.is_finite()) throw numeric_error("integrate_transfer: non-finite transfer");
    res.integrals.assign(y.begin() + 4, y.end());
    return res;
}

inline Matrix2 integrate_transfer(const CoeffFn& coeff, const ContourPath& path,
                                  const TransferOptions& opt) {
    return integrate_transfer(coeff, std::span<const ScalarFn>{}, path, opt).transfer;
}

// Scalar-only contour integrals (no matrix state carried).
inline std::vector<cplx> contour_integrals(std::span<const ScalarFn> integrands,
                                           const ContourPath& path, const TransferOptions& opt) {
    path.validate();
    detail::check_clearance(path, opt);

    const size_t k = integrands.size();
    OdeState y(k, cplx{0.0});
    for (const PathSegment& seg : path.segments) {
        auto rhs = [&](double s, const OdeState&, OdeState& d) {
            const cplx x = seg.at(s);
            const cplx v = seg.velocity(s);
            for (size_t j = 0; j < k; ++j) d[j] = v * integrands[j](x);
        };
        rk54_integrate(rhs, y, 0.0, 1.0, opt.tol);
    }
    for (cplx c : y)
        if (!finite(c)) throw numeric_error("contour_integrals: non-finite integral");
    return y;
}

inline cplx contour_integral(const ScalarFn& f, const ContourPath& path,
                             const TransferOptions& opt) {
    const ScalarFn fns[] = {f};
    return contour_integrals(std::span<const ScalarFn>{fns, 1}, path, opt)[0];
}

// ---------------------------------------------------------------------------
// Square-root continuation.

struct SqrtSample {
    double global_s;
    cplx x;
    cplx w;  // continuous determination of sqrt(f(x))
};

struct SqrtContinuationResult {
    std::vector<SqrtSample> samples;
    int initial_sign = 1;
    int final_sign = 1;  // vs. the principal determination at the endpoint
    cplx w_end{0.0};
    OdeStats stats;
};

// Continuous branch of sqrt(f) along `path`, driven through the same RK
// kernel via d(log w) = (f'/2f) dx, Newton-polished (w <- (w+f/w)/2) at every
// recorded sample and at segment boundaries.  A step is rejected whenever the
// branch argument would drift by more than pi/4 between adjacent samples.
inline SqrtContinuationResult sqrt_continuation(const ScalarFn& f, const ScalarFn& logderiv_f,
                                                const ContourPath& path, int initial_sign,
                                                const TransferOptions& opt) {
    path.validate();
    detail::check_clearance(path, opt);
    if (initial_sign != 1 && initial_sign != -1)
        throw invalid_input("sqrt_continuation: initial_sign must be +-1");

    SqrtContinuationResult res;
    res.initial_sign = initial_sign;

    auto polish = [&](cplx x, cplx w) {
        for (int i = 0; i < 2; ++i) w = 0.5 * (w + f(x) / w);
        return w;
    };

    cplx w0 = std::sqrt(f(path.start_point()));  // principal
    w0 *= double(initial_sign);
    if (!finite(w0) || std::abs(w0) < 1e-300)
        throw numeric_error("sqrt_continuation: function vanishes at the start point");

    OdeState y{w0};
    const double nseg = double(path.segments.size());
    for (size_t is = 0; is < path.segments.size(); ++is) {
        const PathSegment& seg = path.segments[is];
        auto rhs = [&](double s, const OdeState& st, OdeState& d) {
            const cplx x = seg.at(s);
            d[0] = 0.5 * logderiv_f(x) * seg.velocity(s) * st[0];
        };
        auto node = [&](double s, const OdeState& st) {
            res.samples.push_back({(double(is) + s) / nseg, seg.at(s), polish(seg.at(s), st[0])});
        };
        auto validate = [&](const OdeState& before, const OdeState& after) {
            if (std::abs(after[0]) < 1e-300 || !finite(after[0])) return false;
            return std::abs(std::arg(after[0] / before[0])) < pi / 4.0;
        };
        if (is > 0) res.samples.pop_back();  // drop duplicate of the segment joint
        const OdeStats st = rk54_integrate(rhs, y, 0.0, 1.0, opt.tol, node, validate);
        res.stats.accepted += st.accepted;
        res.stats.rejected += st.rejected;
        res.stats.fevals += st.fevals;
        y[0] = polish(seg.end, y[0]);
    }

    res.w_end = y[0];
    const cplx principal_end = std::sqrt(f(path.end_point()));
    res.final_sign = (std::abs(res.w_end - principal_end) <= std::abs(res.w_end + principal_end))
                         ? 1
                         : -1;
    return res;
}

}  // namespace qdm
