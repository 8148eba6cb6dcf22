#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "qdm/core.hpp"
#include "qdm/path.hpp"
#include "qdm/poly.hpp"
#include "qdm/rk.hpp"
#include "qdm/sphere.hpp"
#include "qdm/transfer.hpp"

namespace qdm {

// ---------------------------------------------------------------------------
// The double cover w^2 = Q(x), branched over the simple poles and simple
// zeros of Q.  When Q has a pole at infinity that point is a branch point
// too; it is represented by a far-away finite proxy on its cut.

struct Cut {
    cplx a{0.0}, b{0.0};
    bool unbounded = false;  // b is a proxy for a cut running to infinity
};

struct CanonicalCover {
    QuadDiff Q;
    std::vector<cplx> branch_finite;  // poles then zeros, sorted by (re, im)
    bool branch_at_inf = false;
    int genus = 0;
    std::vector<Cut> cuts;  // genus + 1 pairwise disjoint cuts
    double scale = 1.0;     // spread of the finite branch points
    double cut_gap = 0.0;   // minimal distance between distinct cuts
    cplx x_ref{0.0};        // anchor carrying the principal determination of w
};

namespace detail {

inline double cut_point_distance(const std::vector<Cut>& cuts, cplx p) {
    double d = std::numeric_limits<double>::infinity();
    for (const Cut& c : cuts) d = std::min(d, PathSegment::make_line(c.a, c.b).distance_to(p));
    return d;
}

inline double segment_pair_distance(cplx a0, cplx a1, cplx b0, cplx b1) {
    if (segment_intersect(a0, a1, b0, b1)) return 0.0;
    const PathSegment sa = PathSegment::make_line(a0, a1);
    const PathSegment sb = PathSegment::make_line(b0, b1);
    return std::min(std::min(sa.distance_to(b0), sa.distance_to(b1)),
                    std::min(sb.distance_to(a0), sb.distance_to(a1)));
}

// Waypoint route from `from` to `to` crossing none of the cuts: any leg that
// would cross a cut detours around the nearer cut endpoint instead.  All such
// routes are homotopic in the cut plane.
inline void route_cuts_rec(const std::vector<Cut>& cuts, cplx from, cplx to, double detour,
                           std::vector<cplx>& out, int depth) {
    if (depth > 32) throw numeric_error("route_around_cuts: recursion exceeded");
    for (const Cut& c : cuts) {
        const auto hit = segment_intersect(from, to, c.a, c.b);
        if (!hit) continue;
        const cplx X = from + hit->first * (to - from);
        const bool near_a = std::abs(X - c.a) <= std::abs(X - c.b);
        const cplx E = near_a ? c.a : c.b;
        const cplx O = near_a ? c.b : c.a;
        const cplx W = E + detour * (E - O) / std::abs(E - O);
        route_cuts_rec(cuts, from, W, detour, out, depth + 1);
        out.push_back(W);
        route_cuts_rec(cuts, W, to, detour, out, depth + 1);
        return;
    }
}

inline std::vector<cplx> route_around_cuts(const std::vector<Cut>& cuts, cplx from, cplx to,
                                           double detour) {
    std::vector<cplx> out{from};
    route_cuts_rec(cuts, from, to, detour, out, 0);
    out.push_back(to);
    return out;
}

}  // namespace detail

inline CanonicalCover build_cover(const QuadDiff& Q, const Tolerances& tol = {}) {
    Q.validate_full_poles();

    CanonicalCover c;
    c.Q = Q;
    c.branch_at_inf = Q.base.has_infinity();
    c.branch_finite = Q.base.finite_punctures();
    for (cplx z : Q.zeros()) c.branch_finite.push_back(z);

    const size_t n = Q.base.n();
    c.genus = static_cast<int>(n) - 3;
    if (c.branch_finite.size() + (c.branch_at_inf ? 1 : 0) != 2 * n - 4)
        throw numeric_error("build_cover: wrong number of branch points");

    const size_t m = c.branch_finite.size();
    c.scale = 0.0;
    for (size_t i = 0; i < m; ++i)
        for (size_t j = i + 1; j < m; ++j)
            c.scale = std::max(c.scale, std::abs(c.branch_finite[i] - c.branch_finite[j]));
    if (!(c.scale > 0.0)) throw numeric_error("build_cover: degenerate branch configuration");
    for (size_t i = 0; i < m; ++i)
        for (size_t j = i + 1; j < m; ++j)
            if (std::abs(c.branch_finite[i] - c.branch_finite[j]) < 1e-7 * c.scale)
                throw invalid_input("build_cover: branch points nearly collide");

    std::sort(c.branch_finite.begin(), c.branch_finite.end(), [](cplx p, cplx q) {
        if (p.real() != q.real()) return p.real() < q.real();
        return p.imag() < q.imag();
    });

    const auto& e = c.branch_finite;
    for (size_t i = 0; i + 1 < m; i += 2) c.cuts.push_back({e[i], e[i + 1], false});
    if (c.branch_at_inf) {
        cplx cen{0.0};
        for (size_t i = 0; i + 1 < m; ++i) cen += e[i];
        cen /= double(m - 1);
        cplx dir = e[m - 1] - cen;
        dir = (std::abs(dir) < 1e-12 * c.scale) ? cplx{1.0} : dir / std::abs(dir);
        c.cuts.push_back({e[m - 1], e[m - 1] + 8.0 * c.scale * dir, true});
    }
    if (c.cuts.size() != size_t(c.genus) + 1)
        throw numeric_error("build_cover: cut pairing failed");

    c.cut_gap = std::numeric_limits<double>::infinity();
    for (size_t i = 0; i < c.cuts.size(); ++i)
        for (size_t j = i + 1; j < c.cuts.size(); ++j)
            c.cut_gap = std::min(c.cut_gap,
                                 detail::segment_pair_distance(c.cuts[i].a, c.cuts[i].b,
                                                               c.cuts[j].a, c.cuts[j].b));
    if (c.cut_gap < 1e-6 * c.scale)
        throw numeric_error("build_cover: branch cuts collide; perturb the configuration");

    cplx centroid{0.0};
    for (cplx p : e) centroid += p;
    centroid /= double(m);
    double best = -1.0;
    for (int k = 0; k < 64; ++k) {
        const double th = 2.0 * pi * k / 64.0;
        const cplx cand = centroid + 2.2 * c.scale * cplx{std::cos(th), std::sin(th)};
        double score = detail::cut_point_distance(c.cuts, cand);
        for (cplx p : e) score = std::min(score, std::abs(cand - p));
        if (score > best) {
            best = score;
            c.x_ref = cand;
        }
    }
    return c;
}

// ---------------------------------------------------------------------------
// Sheet transport: continue the principal determination of w at x_ref to any
// target along a route that crosses no cut.  All such routes are homotopic in
// the cut plane, so the resulting determination is route-independent.

inline cplx transport_w(const CanonicalCover& c, cplx target, const Tolerances& tol = {}) {
    const Tolerances tl = scaled_clearance(tol, c.scale);
    if (std::abs(target - c.x_ref) < 1e-14 * c.scale) return std::sqrt(c.Q(c.x_ref));

    const double detour = std::min(0.25 * c.cut_gap, 0.2 * c.scale);
    if (detour < 1.5 * tl.singularity_clearance)
        throw clearance_error("transport_w: cuts leave no room to route around");

    auto route = detail::route_around_cuts(c.cuts, c.x_ref, target, detour);
    route.erase(std::unique(route.begin(), route.end(),
                            [&](cplx p, cplx q) { return std::abs(p - q) < 1e-13 * c.scale; }),
                route.end());
    const ContourPath path = ContourPath::polyline(route);

    TransferOptions opt;
    opt.tol = tl;
    opt.clearance_points = c.branch_finite;
    const auto& Q = c.Q;
    const auto res = sqrt_continuation([&Q](cplx x) { return Q(x); },
                                       [&Q](cplx x) { return Q.log_deriv(x); }, path, +1, opt);
    return res.w_end;
}

// ---------------------------------------------------------------------------
// Cycles on the cover: a closed base path together with the determination of
// w at its start point.  Lifting is done by the integrators on the fly.

struct CoverCycle {
    ContourPath path;
    cplx w_start{0.0};
    std::string label;
};

namespace detail {

// Continue a known determination w_from at x_from to the nearby point x_to.
inline cplx continue_w_to(const CanonicalCover& c, cplx x_from, cplx w_from, cplx x_to,
                          const Tolerances& tl) {
    auto polish = [&c](cplx x, cplx w) {
        for (int i = 0; i < 3; ++i) w = 0.5 * (w + c.Q(x) / w);
        return w;
    };
    if (std::abs(x_to - x_from) < 1e-14 * c.scale) return polish(x_to, w_from);

    double nearest = std::numeric_limits<double>::infinity();
    for (cplx p : c.branch_finite) nearest = std::min(nearest, std::abs(x_to - p));
    if (std::abs(x_to - x_from) <= 0.3 * nearest) return polish(x_to, w_from);

    TransferOptions opt;
    opt.tol = tl;
    opt.clearance_points = c.branch_finite;
    const auto& Q = c.Q;
    const cplx principal = std::sqrt(Q(x_from));
    const int sign = (std::abs(w_from - principal) <= std::abs(w_from + principal)) ? 1 : -1;
    const auto res =
        sqrt_continuation([&Q](cplx x) { return Q(x); }, [&Q](cplx x) { return Q.log_deriv(x); },
                          ContourPath::polyline({x_from, x_to}), sign, opt);
    return res.w_end;
}

}  // namespace detail

// Run the branch continuation once around a cycle; throws unless the lift
// closes up (an even number of branch points enclosed).
inline SqrtContinuationResult verify_cycle_closure(const CanonicalCover& c, const CoverCycle& cyc,
                                                   const Tolerances& tol = {}) {
    const Tolerances tl = scaled_clearance(tol, c.scale);
    TransferOptions opt;
    opt.tol = tl;
    opt.clearance_points = c.branch_finite;
    const auto& Q = c.Q;
    const cplx principal = std::sqrt(Q(cyc.path.start_point()));
    const int sign =
        (std::abs(cyc.w_start - principal) <= std::abs(cyc.w_start + principal)) ? 1 : -1;
    auto res =
        sqrt_continuation([&Q](cplx x) { return Q(x); }, [&Q](cplx x) { return Q.log_deriv(x); },
                          cyc.path, sign, opt);
    if (res.final_sign != res.initial_sign ||
        std::abs(res.w_end - double(sign) * principal) > 1e-6 * std::abs(principal))
        throw numeric_error("cycle lift does not close on the cover: " + cyc.label);
    return res;
}

// Signed intersection pairing of cycle lifts.  Base-path crossings contribute
// only when both lifts pass through the crossing on the same sheet.
inline std::vector<std::vector<int>> intersection_matrix(const CanonicalCover& c,
                                                         std::span<const CoverCycle> cycles,
                                                         const Tolerances& tol = {}) {
    const Tolerances tl = scaled_clearance(tol, c.scale);
    const size_t nc = cycles.size();

    std::vector<SqrtContinuationResult> lifts;
    lifts.reserve(nc);
    for (const CoverCycle& cyc : cycles) lifts.push_back(verify_cycle_closure(c, cyc, tol));

    auto sheet_w = [&](size_t ci, const ContourPath& p, size_t seg, double s, cplx xq) {
        const auto& samples = lifts[ci].samples;
        const double gs = (double(seg) + s) / double(p.segments.size());
        size_t lo = 0, hi = samples.size() - 1;
        while (hi - lo > 1) {
            const size_t mid = (lo + hi) / 2;
            (samples[mid].global_s <= gs ? lo : hi) = mid;
        }
        const SqrtSample& near =
            (std::abs(samples[lo].global_s - gs) <= std::abs(samples[hi].global_s - gs))
                ? samples[lo]
                : samples[hi];
        return detail::continue_w_to(c, near.x, near.w, xq, tl);
    };

    std::vector<std::vector<int>> M(nc, std::vector<int>(nc, 0));
    for (size_t i = 0; i < nc; ++i)
        for (size_t j = i + 1; j < nc; ++j) {
            for (const PathCrossing& q :
                 path_crossings(cycles[i].path, cycles[j].path, 1e-4 * c.scale)) {
                const cplx wi = sheet_w(i, cycles[i].path, q.seg_a, q.s_a, q.point);
                const cplx wj = sheet_w(j, cycles[j].path, q.seg_b, q.s_b, q.point);
                if (std::abs(wi - wj) <= std::abs(wi + wj)) {
                    M[i][j] += q.sign;
                    M[j][i] -= q.sign;
                }
            }
        }
    return M;
}

struct HomologyBasis {
    std::vector<CoverCycle> a, b;

    std::vector<CoverCycle> all() const {
        std::vector<CoverCycle> out = a;
        out.insert(out.end(), b.begin(), b.end());
        return out;
    }
};

namespace detail {

inline CoverCycle anchored_cycle(const CanonicalCover& c, const ContourPath& hull_path,
                                 std::string label, const Tolerances& tol) {
    // Start the cycle at the boundary point farthest from the cuts so the
    // sheet transport target is unambiguous.
    size_t bi = 0;
    double bs = 0.0, best = -1.0;
    for (size_t i = 0; i < hull_path.segments.size(); ++i)
        for (double s : {0.0, 0.25, 0.5, 0.75}) {
            const double d = cut_point_distance(c.cuts, hull_path.segments[i].at(s));
            if (d > best) {
                best = d;
                bi = i;
                bs = s;
            }
        }
    ContourPath p = hull_path.started_at(bi, bs);
    const cplx w0 = transport_w(c, p.start_point(), tol);
    return CoverCycle{std::move(p), w0, std::move(label)};
}

inline ContourPath hull_with_margin(const std::vector<cplx>& enclose,
                                    const std::vector<cplx>& avoid, double factor) {
    const auto hull = convex_hull(enclose);
    double limit = std::numeric_limits<double>::infinity();
    for (cplx p : avoid) limit = std::min(limit, dist_to_hull(hull, p));
    if (!(limit > 0.0) || !std::isfinite(limit))
        throw numeric_error("hull_with_margin: no room around the enclosure");
    return surrounding_contour(enclose, avoid, factor * limit);
}

}  // namespace detail

// Canonical homology basis from the cut structure: a_j encircles cut j-1,
// b_j encircles the branch points from the right end of cut j-1 through the
// left end of the last cut.  Lift closure and the full intersection pairing
// are verified; b-cycles are oriented so that a_j . b_j = +1.
inline HomologyBasis homology_cycles(const CanonicalCover& c, const Tolerances& tol = {},
                                     double margin_scale = 1.0) {
    if (c.genus < 1) throw invalid_input("homology_cycles: positive genus required");
    if (!(margin_scale > 0.05) || !(margin_scale < 1.6))
        throw invalid_input("homology_cycles: margin_scale out of range");
    const int g = c.genus;
    const auto& e = c.branch_finite;

    auto complement = [&](size_t lo, size_t hi) {  // indices outside [lo, hi]
        std::vector<cplx> out;
        for (size_t i = 0; i < e.size(); ++i)
            if (i < lo || i > hi) out.push_back(e[i]);
        return out;
    };

    // Distinct offset factors keep boundary arcs of different cycles from
    // coinciding in symmetric configurations.
    HomologyBasis basis;
    for (int j = 1; j <= g; ++j) {
        const size_t lo = 2 * size_t(j) - 2, hi = lo + 1;
        const std::vector<cplx> enclose{e[lo], e[hi]};
        const double f = (0.35 + 0.03 * (j - 1)) * margin_scale;
        basis.a.push_back(
            detail::anchored_cycle(c, detail::hull_with_margin(enclose, complement(lo, hi), f),
                                   "a" + std::to_string(j), tol));
    }
    for (int j = 1; j <= g; ++j) {
        const size_t lo = 2 * size_t(j) - 1, hi = 2 * size_t(g);
        const std::vector<cplx> enclose(e.begin() + long(lo), e.begin() + long(hi) + 1);
        const double f = (0.52 - 0.02 * (j - 1)) * margin_scale;
        basis.b.push_back(
            detail::anchored_cycle(c, detail::hull_with_margin(enclose, complement(lo, hi), f),
                                   "b" + std::to_string(j), tol));
    }

    auto cycles = basis.all();
    auto M = intersection_matrix(c, cycles, tol);
    for (int j = 0; j < g; ++j) {
        if (M[j][g + j] == -1) {
            basis.b[j].path = basis.b[j].path.reversed();
            for (int i = 0; i < 2 * g; ++i) {
                M[i][g + j] = -M[i][g + j];
                M[g + j][i] = -M[g + j][i];
            }
        }
    }
    for (int i = 0; i < 2 * g; ++i)
        for (int j = 0; j < 2 * g; ++j) {
            const int want = (j == i + g) ? 1 : (i == j + g ? -1 : 0);
            if (M[i][j] != want)
                throw numeric_error("homology_cycles: intersection pairing is not canonical");
        }
    return basis;
}

// ---------------------------------------------------------------------------
// Integration on the cover: w is carried as ODE state alongside any number of
// integrands g(x, w) dx, so each sweep stays on the correct sheet.

using CoverIntegrand = std::function<cplx(cplx, cplx)>;

struct CoverIntegralResult {
    std::vector<cplx> values;
    cplx w_end{0.0};
    OdeStats stats;
};

inline CoverIntegralResult cover_integrate(const CanonicalCover& c, const ContourPath& path,
                                           cplx w_start, std::span<const CoverIntegrand> integrands,
                                           const Tolerances& tol = {}) {
    path.validate();
    const Tolerances tl = scaled_clearance(tol, c.scale);
    const double d = path.min_distance(c.branch_finite);
    if (d < tl.singularity_clearance)
        throw clearance_error("cover_integrate: path clears a branch point by " +
                              std::to_string(d));

    auto polish = [&c](cplx x, cplx w) {
        for (int i = 0; i < 2; ++i) w = 0.5 * (w + c.Q(x) / w);
        return w;
    };
    const cplx w0 = polish(path.start_point(), w_start);
    if (!finite(w0) || std::abs(w0 - w_start) > 1e-3 * std::abs(w0))
        throw invalid_input("cover_integrate: w_start does not satisfy w^2 = Q");

    const size_t k = integrands.size();
    OdeState y(1 + k, cplx{0.0});
    y[0] = w0;

    CoverIntegralResult res;
    for (const PathSegment& seg : path.segments) {
        auto rhs = [&](double s, const OdeState& st, OdeState& dy) {
            const cplx x = seg.at(s);
            const cplx xd = seg.velocity(s);
            dy[0] = 0.5 * c.Q.log_deriv(x) * xd * st[0];
            for (size_t q = 0; q < k; ++q) dy[1 + q] = integrands[q](x, st[0]) * xd;
        };
        auto validate = [](const OdeState& before, const OdeState& after) {
            for (cplx z : after)
                if (!finite(z)) return false;
            if (std::abs(after[0]) < 1e-300) return false;
            return std::abs(std::arg(after[0] / before[0])) < pi / 4.0;
        };
        const OdeStats st = rk54_integrate(rhs, y, 0.0, 1.0, tl, [](double, const OdeState&) {},
                                           validate);
        res.stats.accepted += st.accepted;
        res.stats.rejected += st.rejected;
        res.stats.fevals += st.fevals;
        y[0] = polish(seg.end, y[0]);
    }
    res.w_end = y[0];
    res.values.assign(y.begin() + 1, y.end());
    return res;
}

// Integral of g(x, w) dx around a closed cycle; verifies the lift returns to
// the starting sheet.
inline cplx cycle_integral(const CanonicalCover& c, const CoverCycle& cyc,
                           const CoverIntegrand& g, const Tolerances& tol = {}) {
    if (!cyc.path.closed) throw invalid_input("cycle_integral: cycle must be closed");
    const CoverIntegrand gs[] = {g};
    const auto r = cover_integrate(c, cyc.path, cyc.w_start, std::span{gs, 1}, tol);
    if (std::abs(r.w_end - cyc.w_start) > 1e-6 * std::abs(cyc.w_start))
        throw numeric_error("cycle_integral: lift does not close: " + cyc.label);
    return r.values[0];
}

inline cplx period(const CanonicalCover& c, const CoverCycle& cyc, const Tolerances& tol = {}) {
    return cycle_integral(c, cyc, [](cplx, cplx w) { return w; }, tol);
}

// ---------------------------------------------------------------------------
// Period data of the two natural differentials: w dx (holomorphic) and
// (u+1) w dx (second kind, residue-free), over the verified basis.

struct PeriodData {
    std::vector<cplx> A, B;    // periods of w dx over a_j, b_j
    std::vector<cplx> At, Bt;  // periods of (u+1) w dx over a_j, b_j
};

inline PeriodData all_periods(const CanonicalCover& c, const HomologyBasis& basis,
                              const Tolerances& tol = {}) {
    const Potential pot = potential_u(c.Q);
    const CoverIntegrand gs[2] = {
        [](cplx, cplx w) { return w; },
        [&pot](cplx x, cplx w) { return pot.u_plus_1(x) * w; },
    };

    PeriodData p;
    auto run = [&](const CoverCycle& cyc, std::vector<cplx>& first, std::vector<cplx>& second) {
        const auto r = cover_integrate(c, cyc.path, cyc.w_start, std::span{gs, 2}, tol);
        if (std::abs(r.w_end - cyc.w_start) > 1e-6 * std::abs(cyc.w_start))
            throw numeric_error("all_periods: lift does not close: " + cyc.label);
        first.push_back(r.values[0]);
        second.push_back(r.values[1]);
    };
    for (const CoverCycle& cyc : basis.a) run(cyc, p.A, p.At);
    for (const CoverCycle& cyc : basis.b) run(cyc, p.B, p.Bt);
    return p;
}

// sum_j (At_j B_j - Bt_j A_j) over the canonical integer basis.
inline cplx tau_pairing(const PeriodData& p) {
    cplx s{0.0};
    for (size_t j = 0; j < p.A.size(); ++j) s += p.At[j] * p.B[j] - p.Bt[j] * p.A[j];
    return s;
}

inline cplx tau_pairing(const QuadDiff& Q, const Tolerances& tol = {}) {
    const CanonicalCover c = build_cover(Q, tol);
    const HomologyBasis basis = homology_cycles(c, tol);
    return tau_pairing(all_periods(c, basis, tol));
}

// Integral of g around a small double loop at a branch point (the base circle
// must be traversed twice before the lift closes).
inline cplx branch_loop_integral(const CanonicalCover& c, cplx center, double radius,
                                 const CoverIntegrand& g, const Tolerances& tol = {}) {
    double best = -1.0;
    cplx start = center + radius;
    for (int k = 0; k < 16; ++k) {
        const double th = 2.0 * pi * k / 16.0;
        const cplx cand = center + radius * cplx{std::cos(th), std::sin(th)};
        const double d = detail::cut_point_distance(c.cuts, cand);
        if (d > best) {
            best = d;
            start = cand;
        }
    }
    ContourPath path;
    path.segments.push_back(PathSegment::make_arc(center, start, 2.0 * pi));
    path.segments.push_back(PathSegment::make_arc(center, start, 2.0 * pi));
    path.closed = true;

    const cplx w0 = transport_w(c, start, tol);
    const CoverIntegrand gs[] = {g};
    const auto r = cover_integrate(c, path, w0, std::span{gs, 1}, tol);
    if (std::abs(r.w_end - w0) > 1e-6 * std::abs(w0))
        throw numeric_error("branch_loop_integral: double loop does not close");
    return r.values[0];
}

// ---------------------------------------------------------------------------
// Flat coordinate z(x) = int_b^x w dx anchored at a branch point b.  The leg
// leaving b is integrated in the local parameter sigma (x = b + sigma^2), in
// which the lifted differential is regular:
//   pole of Q at b:  R = (x-b) Q,  w dx = 2 sqrt(R(b+sigma^2)) dsigma
//   zero of Q at b:  R = Q/(x-b),  w dx = 2 sigma^2 sqrt(R(b+sigma^2)) dsigma

struct FlatChart {
    cplx basepoint{0.0};
    bool pole_type = true;
    RationalFn regular;  // R above; finite and nonzero at the basepoint
    cplx x1{0.0};        // landing point of the sigma leg
    cplx z1{0.0};        // z(x1) on the chart's sheet
    cplx w1{0.0};        // w(x1) on the chart's sheet
};

inline FlatChart make_flat_chart(const CanonicalCover& c, const Tolerances& tol = {}) {
    FlatChart ch;
    const auto zeros = c.Q.zeros();
    if (zeros.empty()) {
        ch.basepoint = c.Q.base.finite_punctures().front();
        ch.pole_type = true;
        ch.regular = RationalFn{c.Q.numerator, poly_deflate(c.Q.denominator(), ch.basepoint)};
    } else {
        ch.basepoint = *std::min_element(zeros.begin(), zeros.end(), [](cplx p, cplx q) {
            if (p.real() != q.real()) return p.real() < q.real();
            return p.imag() < q.imag();
        });
        ch.pole_type = false;
        ch.regular = RationalFn{poly_deflate(poly_trim(c.Q.numerator), ch.basepoint),
                                c.Q.denominator()};
    }

    double nearest = std::numeric_limits<double>::infinity();
    for (cplx p : c.branch_finite)
        if (std::abs(p - ch.basepoint) > 1e-12 * c.scale)
            nearest = std::min(nearest, std::abs(p - ch.basepoint));
    const double r1 = 0.3 * nearest;

    double best = -1.0;
    double theta = 0.0;
    for (int k = 0; k < 16; ++k) {
        const double th = 2.0 * pi * k / 16.0;
        const PathSegment leg =
            PathSegment::make_line(ch.basepoint, ch.basepoint + r1 * cplx{std::cos(th), std::sin(th)});
        double score = std::numeric_limits<double>::infinity();
        for (cplx p : c.branch_finite)
            if (std::abs(p - ch.basepoint) > 1e-12 * c.scale)
                score = std::min(score, leg.distance_to(p));
        if (score > best) {
            best = score;
            theta = th;
        }
    }
    const cplx sigma1 = std::sqrt(r1) * cplx{std::cos(theta / 2.0), std::sin(theta / 2.0)};

    const Tolerances tl = scaled_clearance(tol, c.scale);
    const RationalFn dregular = ch.regular.derivative();
    OdeState y{std::sqrt(ch.regular(ch.basepoint)), cplx{0.0}};
    if (!finite(y[0]) || std::abs(y[0]) < 1e-300)
        throw numeric_error("make_flat_chart: degenerate local form at the basepoint");

    auto rhs = [&](double s, const OdeState& st, OdeState& dy) {
        const cplx sigma = s * sigma1;
        const cplx x = ch.basepoint + sigma * sigma;
        dy[0] = sigma1 * (sigma * dregular(x) / st[0]);
        dy[1] = sigma1 * (ch.pole_type ? 2.0 * st[0] : 2.0 * sigma * sigma * st[0]);
    };
    auto validate = [](const OdeState& before, const OdeState& after) {
        if (!finite(after[0]) || !finite(after[1])) return false;
        if (std::abs(after[0]) < 1e-300) return false;
        return std::abs(std::arg(after[0] / before[0])) < pi / 4.0;
    };
    rk54_integrate(rhs, y, 0.0, 1.0, tl, [](double, const OdeState&) {}, validate);

    ch.x1 = ch.basepoint + sigma1 * sigma1;
    for (int i = 0; i < 2; ++i) y[0] = 0.5 * (y[0] + ch.regular(ch.x1) / y[0]);
    ch.z1 = y[1];
    ch.w1 = ch.pole_type ? y[0] / sigma1 : y[0] * sigma1;

    if (std::abs(ch.w1 * ch.w1 - c.Q(ch.x1)) > 1e-6 * std::abs(c.Q(ch.x1)))
        throw numeric_error("make_flat_chart: sigma leg lost the square root");
    return ch;
}

struct FlatPoint {
    cplx z{0.0}, w{0.0};
};

// z(x) and w(x) on the chart's sheet (sign = +1) or its involution image
// (sign = -1).  The route from the chart's landing point dodges every branch
// point, so the value depends only on x, the sign, and the chart.
inline FlatPoint flat_point(const CanonicalCover& c, const FlatChart& chart, cplx x, int sign = 1,
                            const Tolerances& tol = {}) {
    if (sign != 1 && sign != -1) throw invalid_input("flat_point: sign must be +-1");
    const Tolerances tl = scaled_clearance(tol, c.scale);

    auto branch_dist = [&](cplx p) {
        double d = std::numeric_limits<double>::infinity();
        for (cplx b : c.branch_finite) d = std::min(d, std::abs(p - b));
        return d;
    };
    if (branch_dist(x) < 2.0 * tl.singularity_clearance)
        throw clearance_error("flat_point: x too close to a branch point");
    if (std::abs(x - chart.x1) < 1e-14 * c.scale)
        return {double(sign) * chart.z1, double(sign) * chart.w1};

    double min_sep = std::numeric_limits<double>::infinity();
    for (size_t i = 0; i < c.branch_finite.size(); ++i)
        for (size_t j = i + 1; j < c.branch_finite.size(); ++j)
            min_sep = std::min(min_sep, std::abs(c.branch_finite[i] - c.branch_finite[j]));
    const double r =
        std::min({0.35 * min_sep, 0.8 * branch_dist(x), 0.8 * branch_dist(chart.x1)});
    if (r < 1.2 * tl.singularity_clearance)
        throw clearance_error("flat_point: no room to route around the branch points");

    std::vector<Obstacle> obs;
    for (cplx b : c.branch_finite) obs.push_back({b, r});
    const auto route = route_avoiding(chart.x1, x, obs);

    const CoverIntegrand gs[] = {CoverIntegrand{[](cplx, cplx w) { return w; }}};
    const auto res = cover_integrate(c, ContourPath::polyline(route),
                                     double(sign) * chart.w1, std::span{gs, 1}, tol);
    return {double(sign) * chart.z1 + res.values[0], res.w_end};
}

// Follow a straight segment z -> z + dz in the flat coordinate starting from
// (x0, w0): dx/dz = 1/w, dw/dz = (Q'/Q)(x)/2.
struct FlowResult {
    cplx x{0.0}, w{0.0};
    OdeStats stats;
};

inline FlowResult flow_flat_line(const CanonicalCover& c, cplx x0, cplx w0, cplx dz,
                                 const Tolerances& tol = {}) {
    const Tolerances tl = scaled_clearance(tol, c.scale);
    auto polish = [&c](cplx x, cplx w) {
        for (int i = 0; i < 2; ++i) w = 0.5 * (w + c.Q(x) / w);
        return w;
    };
    const cplx w0p = polish(x0, w0);
    if (!finite(w0p) || std::abs(w0p - w0) > 1e-3 * std::abs(w0p))
        throw invalid_input("flow_flat_line: w0 does not satisfy w^2 = Q");

    auto branch_dist = [&](cplx p) {
        double d = std::numeric_limits<double>::infinity();
        for (cplx b : c.branch_finite) d = std::min(d, std::abs(p - b));
        return d;
    };

    OdeState y{x0, w0p};
    auto rhs = [&](double, const OdeState& st, OdeState& dy) {
        dy[0] = dz / st[1];
        dy[1] = 0.5 * c.Q.log_deriv(st[0]) * dz;
    };
    auto validate = [&](const OdeState&, const OdeState& after) {
        if (!finite(after[0]) || !finite(after[1])) return false;
        if (std::abs(after[1]) < 1e-300) return false;
        if (std::abs(after[0]) > 50.0 * c.scale + std::abs(c.x_ref)) return false;
        return branch_dist(after[0]) >= tl.singularity_clearance;
    };
    FlowResult res;
    res.stats = rk54_integrate(rhs, y, 0.0, 1.0, tl, [](double, const OdeState&) {}, validate);
    res.x = y[0];
    res.w = polish(y[0], y[1]);
    return res;
}

}  // namespace qdm
