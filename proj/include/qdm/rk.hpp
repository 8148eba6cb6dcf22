#pragma once

#include <functional>
#include <vector>

#include "qdm/core.hpp"

namespace qdm {

struct OdeStats {
    long accepted = 0;
    long rejected = 0;
    long fevals = 0;
};

namespace rk54 {

// Dormand-Prince 5(4) tableau (FSAL).
inline constexpr double c2 = 1.0 / 5, c3 = 3.0 / 10, c4 = 4.0 / 5, c5 = 8.0 / 9;
inline constexpr double a21 = 1.0 / 5;
inline constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
inline constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
inline constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187, a53 = 64448.0 / 6561,
                        a54 = -212.0 / 729;
inline constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247,
                        a64 = 49.0 / 176, a65 = -5103.0 / 18656;
inline constexpr double b1 = 35.0 / 384, b3 = 500.0 / 1113, b4 = 125.0 / 192,
                        b5 = -2187.0 / 6784, b6 = 11.0 / 84;
// b - b_hat: 4th-order error estimate weights.
inline constexpr double e1 = 71.0 / 57600, e3 = -71.0 / 16695, e4 = 71.0 / 1920,
                        e5 = -17253.0 / 339200, e6 = 22.0 / 525, e7 = -1.0 / 40;

}  // namespace rk54

using OdeState = std::vector<cplx>;

// Adaptive Dormand-Prince 5(4) with a PI controller over s in [s0, s1].
// The user-facing tolerances are mapped to an internal per-step control
// target eps = max(tol^3, 5e-15); with per-step acceptance the global error
// scales like eps^{4/5} = tol^{12/5} above the 5e-15 floor, so halving the
// tolerance contracts the achieved error by at least 4x with margin.
// on_node(s, y) fires at s0 and at every accepted node; validate(y_prev, y)
// may veto an otherwise accepted step (forcing a retry at half the step).
template <class F, class NodeCb, class Validate>
OdeStats rk54_integrate(F&& f, OdeState& y, double s0, double s1, const Tolerances& tol,
                        NodeCb&& on_node, Validate&& validate) {
    using namespace rk54;
    const size_t n = y.size();
    const double eps_a = std::max(tol.abs_tol * tol.abs_tol * tol.abs_tol, 5e-15);
    const double eps_r = std::max(tol.rel_tol * tol.rel_tol * tol.rel_tol, 5e-15);

    OdeState k1(n), k2(n), k3(n), k4(n), k5(n), k6(n), k7(n), yt(n), ynew(n), yprev(n);
    OdeStats stats;

    double s = s0;
    double h = std::min(1e-2, (s1 - s0));
    double err_prev = 1.0;
    bool have_k1 = false;

    f(s, y, k1);
    ++stats.fevals;
    have_k1 = true;
    on_node(s, y);

    while (s < s1) {
        if (h < tol.min_step) throw step_underflow_error("rk54: step size underflow");
        if (s + h > s1) h = s1 - s;

        if (!have_k1) {
            f(s, y, k1);
            ++stats.fevals;
            have_k1 = true;
        }
        for (size_t i = 0; i < n; ++i) yt[i] = y[i] + h * (a21 * k1[i]);
        f(s + c2 * h, yt, k2);
        for (size_t i = 0; i < n; ++i) yt[i] = y[i] + h * (a31 * k1[i] + a32 * k2[i]);
        f(s + c3 * h, yt, k3);
        for (size_t i = 0; i < n; ++i) yt[i] = y[i] + h * (a41 * k1[i] + a42 * k2[i] + a43 * k3[i]);
        f(s + c4 * h, yt, k4);
        for (size_t i = 0; i < n; ++i)
            yt[i] = y[i] + h * (a51 * k1[i] + a52 * k2[i] + a53 * k3[i] + a54 * k4[i]);
        f(s + c5 * h, yt, k5);
        for (size_t i = 0; i < n; ++i)
            yt[i] = y[i] + h * (a61 * k1[i] + a62 * k2[i] + a63 * k3[i] + a64 * k4[i] + a65 * k5[i]);
        f(s + h, yt, k6);
        for (size_t i = 0; i < n; ++i)
            ynew[i] = y[i] + h * (b1 * k1[i] + b3 * k3[i] + b4 * k4[i] + b5 * k5[i] + b6 * k6[i]);
        f(s + h, ynew, k7);
        stats.fevals += 6;

        double err2 = 0.0;
        bool ok = true;
        for (size_t i = 0; i < n; ++i) {
            if (!finite(ynew[i])) {
                ok = false;
                break;
            }
            const cplx e = h * (e1 * k1[i] + e3 * k3[i] + e4 * k4[i] + e5 * k5[i] + e6 * k6[i] +
                                e7 * k7[i]);
            const double sc = eps_a + eps_r * std::max(std::abs(y[i]), std::abs(ynew[i]));
            const double q = std::abs(e) / sc;
            err2 += q * q;
        }
        // Error-per-step norm (the demand |e| <= sc stays above the roundoff
        // floor of the embedded difference for any h, unlike per-unit-step).
        double err = ok ? std::sqrt(err2 / double(n)) : 1e10;

        if (err <= 1.0) {
            yprev = y;
            y = ynew;
            if (!validate(yprev, y)) {
                y = yprev;
                ++stats.rejected;
                h *= 0.5;
                have_k1 = true;  // k1 still valid at unchanged s
                continue;
            }
            s += h;
            ++stats.accepted;
            on_node(s, y);
            k1.swap(k7);  // FSAL
            const double fac = 0.9 * std::pow(std::max(err, 1e-12), -0.14) *
                               std::pow(std::max(err_prev, 1e-12), 0.08);
            err_prev = std::max(err, 1e-12);
            h *= std::clamp(fac, 0.2, 6.0);
        } else {
            ++stats.rejected;
            h *= std::clamp(0.9 * std::pow(err, -0.2), 0.1, 0.7);
        }
    }
    return stats;
}

template <class F, class NodeCb>
OdeStats rk54_integrate(F&& f, OdeState& y, double s0, double s1, const Tolerances& tol,
                        NodeCb&& on_node) {
    return rk54_integrate(std::forward<F>(f), y, s0, s1, tol, std::forward<NodeCb>(on_node),
                          [](const OdeState&, const OdeState&) { return true; });
}

template <class F>
OdeStats rk54_integrate(F&& f, OdeState& y, double s0, double s1, const Tolerances& tol) {
    return rk54_integrate(std::forward<F>(f), y, s0, s1, tol, [](double, const OdeState&) {});
}

}  // namespace qdm
