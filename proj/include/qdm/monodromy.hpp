#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "qdm/core.hpp"
#include "qdm/cover.hpp"
#include "qdm/linalg.hpp"
#include "qdm/path.hpp"
#include "qdm/rk.hpp"
#include "qdm/sphere.hpp"
#include "qdm/transfer.hpp"

namespace qdm {

// ===========================================================================
// Monodromy of phi'' + Q phi = 0 on the punctured sphere: keyhole generators
// from a far basepoint, parameter derivatives of the monodromy in a single
// sweep, the gauge adapted to a branch of sqrt(Q), and derivatives of the
// potential and the monodromy with respect to period coordinates.
// ===========================================================================

// Coefficient data for the first-order system in the columns (phi, phi').
// The potential is any scalar function; schroedinger_zero gives the trivial
// limit in which every transfer is a shear and every monodromy is trivial.
struct SchroedingerData {
    PuncturedSphere base;
    ScalarFn potential;  // value of Q at x
};

inline SchroedingerData schroedinger(const QuadDiff& Q) {
    return {Q.base, [Q](cplx x) { return Q(x); }};
}

inline SchroedingerData schroedinger_zero(const PuncturedSphere& base) {
    return {base, [](cplx) { return cplx{0.0}; }};
}

namespace detail {

inline CoeffFn schroedinger_coeff(const SchroedingerData& data) {
    return [pot = data.potential](cplx x) { return Matrix2{0.0, 1.0, -pot(x), 0.0}; };
}

inline TransferOptions schroedinger_options(const SchroedingerData& data, const Tolerances& tol) {
    TransferOptions opt;
    opt.tol = scaled_clearance(tol, data.base.diameter());
    opt.clearance_points = data.base.finite_punctures();
    return opt;
}

inline void add_stats(OdeStats& into, const OdeStats& from) {
    into.accepted += from.accepted;
    into.rejected += from.rejected;
    into.fevals += from.fevals;
}

}  // namespace detail

// Fundamental transfer along `path` with Phi(start) = I.  Columns carry the
// (value, derivative) pairs of the two normalized solutions, so the first row
// of Phi(x) holds the solution values themselves.
inline TransferResult phi_transfer(const SchroedingerData& data, const ContourPath& path,
                                   const Tolerances& tol = {},
                                   std::span<const ScalarFn> integrands = {}) {
    return integrate_transfer(detail::schroedinger_coeff(data), integrands, path,
                              detail::schroedinger_options(data, tol));
}

// A closed loop on the base sphere with a certified clearance from every
// finite puncture.
struct GeomLoop {
    ContourPath path;
    double clearance = 0.0;
    std::string label;
};

inline GeomLoop make_geom_loop(const SchroedingerData& data, ContourPath path, std::string label,
                               const Tolerances& tol = {}) {
    path.validate();
    if (!path.closed) throw invalid_input("make_geom_loop: loop must be closed");
    const Tolerances tl = scaled_clearance(tol, data.base.diameter());
    const double d = path.min_distance(data.base.finite_punctures());
    if (d < tl.singularity_clearance)
        throw clearance_error("make_geom_loop: loop clears a puncture by " + std::to_string(d));
    return {std::move(path), d, std::move(label)};
}

// Trace of the monodromy along a free loop; independent of where on the loop
// the transfer starts.
inline cplx trace_function(const SchroedingerData& data, const GeomLoop& loop,
                           const Tolerances& tol = {}) {
    return phi_transfer(data, loop.path, tol).transfer.trace();
}

// ---------------------------------------------------------------------------
// Keyhole frame: a basepoint on a far ring, one keyhole loop per finite
// puncture (spoke + full counterclockwise circle + spoke back), and, when the
// sphere is punctured at infinity, one clockwise outer circle.  Loops are
// ordered by the departure angle of the target puncture as seen from the
// basepoint (relative to the ring center), ascending; the outer circle comes
// last.  In that chronological order the word multiplies to the identity.

struct Keyhole {
    GeomLoop loop;
    size_t puncture = 0;     // index into base.finite_punctures()
    double departure = 0.0;  // arg((y - x0) / (center - x0)) in (-pi, pi]
};

struct FrameOptions {
    double ring_factor = 3.5;  // basepoint ring radius over the puncture spread
    int candidates = 64;       // ring angles scored when choosing the basepoint
    double min_margin = 1.5;   // each keyhole clears every other puncture by
                               // at least this multiple of that puncture's
                               // keyhole radius
    std::optional<double> angle_override;  // fix the ring angle instead of scoring
};

struct MonodromyFrame {
    SchroedingerData data;
    cplx center{0.0};
    double ring_radius = 0.0;
    cplx basepoint{0.0};
    std::vector<Keyhole> finite;       // chronological word order
    std::optional<GeomLoop> inf_loop;  // final word letter when present
};

inline MonodromyFrame build_frame(const SchroedingerData& data, const Tolerances& tol = {},
                                  const FrameOptions& opts = {}) {
    const auto fin = data.base.finite_punctures();
    if (fin.size() < 2) throw invalid_input("build_frame: need at least two finite punctures");
    const cplx c = data.base.centroid();
    double span = 0.0;
    for (cplx y : fin) span = std::max(span, std::abs(y - c));
    if (!(span > 0.0)) throw invalid_input("build_frame: punctures are coincident");
    const double R = opts.ring_factor * span;

    std::vector<double> nn(fin.size(), std::numeric_limits<double>::infinity());
    for (size_t i = 0; i < fin.size(); ++i)
        for (size_t j = 0; j < fin.size(); ++j)
            if (j != i) nn[i] = std::min(nn[i], std::abs(fin[i] - fin[j]));

    auto radii_for = [&](cplx x0) {
        std::vector<double> r(fin.size());
        for (size_t i = 0; i < fin.size(); ++i)
            r[i] = std::min(nn[i] / 3.0, std::abs(fin[i] - x0) / 4.0);
        return r;
    };
    auto keyhole_path = [&](cplx x0, size_t i, double r) {
        const cplx dir = (x0 - fin[i]) / std::abs(x0 - fin[i]);
        const cplx pin = fin[i] + r * dir;
        ContourPath p;
        p.segments.push_back(PathSegment::make_line(x0, pin));
        p.segments.push_back(PathSegment::make_arc(fin[i], pin, 2.0 * pi));
        p.segments.push_back(PathSegment::make_line(pin, x0));
        p.closed = true;
        return p;
    };
    auto margin_of = [&](cplx x0) {
        const auto r = radii_for(x0);
        double m = std::numeric_limits<double>::infinity();
        for (size_t i = 0; i < fin.size(); ++i) {
            const ContourPath p = keyhole_path(x0, i, r[i]);
            for (size_t j = 0; j < fin.size(); ++j)
                if (j != i) m = std::min(m, p.min_distance({fin[j]}) / r[j]);
        }
        return m;
    };

    double best_angle = 0.0;
    double best_margin = -std::numeric_limits<double>::infinity();
    if (opts.angle_override) {
        best_angle = *opts.angle_override;
        best_margin = margin_of(c + std::polar(R, best_angle));
    } else {
        for (int k = 0; k < opts.candidates; ++k) {
            const double th = 2.0 * pi * k / opts.candidates;
            const double m = margin_of(c + std::polar(R, th));
            if (m > best_margin) {
                best_margin = m;
                best_angle = th;
            }
        }
    }
    if (!(best_margin >= opts.min_margin))
        throw clearance_error("build_frame: no admissible basepoint angle (best margin " +
                              std::to_string(best_margin) + ")");

    MonodromyFrame fr;
    fr.data = data;
    fr.center = c;
    fr.ring_radius = R;
    fr.basepoint = c + std::polar(R, best_angle);
    const auto rr = radii_for(fr.basepoint);
    for (size_t i = 0; i < fin.size(); ++i) {
        Keyhole k;
        k.puncture = i;
        k.departure = std::arg((fin[i] - fr.basepoint) / (c - fr.basepoint));
        k.loop = make_geom_loop(data, keyhole_path(fr.basepoint, i, rr[i]),
                                "m[" + std::to_string(i) + "]", tol);
        fr.finite.push_back(std::move(k));
    }
    std::stable_sort(fr.finite.begin(), fr.finite.end(),
                     [](const Keyhole& p, const Keyhole& q) { return p.departure < q.departure; });
    if (data.base.has_infinity()) {
        ContourPath big;
        big.segments.push_back(PathSegment::make_arc(c, fr.basepoint, -2.0 * pi));
        big.closed = true;
        fr.inf_loop = make_geom_loop(data, std::move(big), "m[inf]", tol);
    }
    return fr;
}

// ---------------------------------------------------------------------------
// The puncture representation: one monodromy matrix per word letter and the
// word product, with later letters multiplying on the left (a loop traversed
// after another acts after it).

struct LoopMonodromy {
    std::string label;
    size_t puncture = size_t(-1);  // finite puncture index; size_t(-1) = infinity
    Matrix2 M;
    double det_err = 0.0;    // |det M - 1|
    double trace_err = 0.0;  // |tr M - 2|
};

struct MonodromyRep {
    MonodromyFrame frame;
    std::vector<LoopMonodromy> loops;  // chronological word order
    Matrix2 product = Matrix2::identity();
    double product_residual = 0.0;  // Frobenius distance of the word product to I
    OdeStats stats;
};

inline MonodromyRep puncture_monodromies(const MonodromyFrame& frame, const Tolerances& tol = {}) {
    MonodromyRep rep;
    rep.frame = frame;
    Matrix2 P = Matrix2::identity();
    auto add = [&](const GeomLoop& gl, size_t idx) {
        const TransferResult tr = phi_transfer(frame.data, gl.path, tol);
        LoopMonodromy lm;
        lm.label = gl.label;
        lm.puncture = idx;
        lm.M = tr.transfer;
        lm.det_err = std::abs(lm.M.det() - 1.0);
        lm.trace_err = std::abs(lm.M.trace() - 2.0);
        detail::add_stats(rep.stats, tr.stats);
        P = lm.M * P;
        rep.loops.push_back(std::move(lm));
    };
    for (const Keyhole& k : frame.finite) add(k.loop, k.puncture);
    if (frame.inf_loop) add(*frame.inf_loop, size_t(-1));
    rep.product = P;
    rep.product_residual = distance(P, Matrix2::identity());
    return rep;
}

// Factor order of the word product, leftmost factor acting last.
inline std::string product_order(const MonodromyRep& rep) {
    std::string s;
    for (auto it = rep.loops.rbegin(); it != rep.loops.rend(); ++it) {
        if (!s.empty()) s += " * ";
        s += it->label;
    }
    return s;
}

// ---------------------------------------------------------------------------
// Lambda field: the conjugated lowering matrix Phi^{-1} sigma_- Phi.  With
// first row (a, b) of Phi and unit determinant this is
//   [[-a b, -b^2], [a^2, a b]],
// traceless and of rank one; the determinant division below makes the
// conjugation exact for any invertible Phi.

inline Matrix2 lambda_of(const Matrix2& Phi) {
    const cplx det = Phi.det();
    const cplx ab = Phi.a * Phi.b / det;
    return Matrix2{-ab, -Phi.b * Phi.b / det, Phi.a * Phi.a / det, ab};
}

struct LambdaSample {
    double global_s = 0.0;
    cplx x{0.0};
    Matrix2 Lambda;
};

inline std::vector<LambdaSample> lambda_field(const SchroedingerData& data,
                                              const ContourPath& path,
                                              const Tolerances& tol = {}) {
    std::vector<LambdaSample> out;
    TransferOptions opt = detail::schroedinger_options(data, tol);
    opt.on_node = [&out](const TransferNode& n) {
        out.push_back({n.global_s, n.x, lambda_of(n.Y)});
    };
    integrate_transfer(detail::schroedinger_coeff(data), std::span<const ScalarFn>{}, path, opt);
    return out;
}

// ---------------------------------------------------------------------------
// Parameter derivatives of the monodromy of the four-punctured family
// Q = mu / (x (x-1) (x-t)) in one sweep.  A potential perturbation dQ changes
// the transfer by  dM = -M Int_loop dQ(y) Lambda(y) dy,  and here
// dQ/dt = Q/(y-t), dQ/dmu = Q/mu.

struct VariationalMonodromy {
    Matrix2 M;
    Matrix2 dM_dt, dM_dmu;
    double det_err = 0.0;  // |det M - 1|
    OdeStats stats;
};

inline VariationalMonodromy variational_monodromy(const HeunParameters& par,
                                                  const ContourPath& loop,
                                                  const Tolerances& tol = {}) {
    loop.validate();
    if (!loop.closed) throw invalid_input("variational_monodromy: loop must be closed");
    const QuadDiff Q = heun_Q(par);
    const Tolerances tl = scaled_clearance(tol, Q.base.diameter());
    const double dmin = loop.min_distance(Q.base.finite_punctures());
    if (dmin < tl.singularity_clearance)
        throw clearance_error("variational_monodromy: loop clears a puncture by " +
                              std::to_string(dmin));

    OdeState y(12, cplx{0.0});
    y[0] = 1.0;
    y[3] = 1.0;
    VariationalMonodromy out;
    for (const PathSegment& seg : loop.segments) {
        auto rhs = [&](double s, const OdeState& st, OdeState& d) {
            const cplx x = seg.at(s);
            const cplx v = seg.velocity(s);
            const cplx q = Q(x);
            const Matrix2 Phi{st[0], st[1], st[2], st[3]};
            const Matrix2 dPhi = Matrix2{0.0, 1.0, -q, 0.0} * Phi;
            const Matrix2 L = lambda_of(Phi);
            const Matrix2 Lt = (q / (x - par.t)) * L;
            const Matrix2 Lm = (q / par.mu) * L;
            d[0] = v * dPhi.a;
            d[1] = v * dPhi.b;
            d[2] = v * dPhi.c;
            d[3] = v * dPhi.d;
            d[4] = v * Lt.a;
            d[5] = v * Lt.b;
            d[6] = v * Lt.c;
            d[7] = v * Lt.d;
            d[8] = v * Lm.a;
            d[9] = v * Lm.b;
            d[10] = v * Lm.c;
            d[11] = v * Lm.d;
        };
        auto validate = [](const OdeState&, const OdeState& after) {
            for (cplx z : after)
                if (!finite(z)) return false;
            const Matrix2 Phi{after[0], after[1], after[2], after[3]};
            return std::abs(Phi.det() - 1.0) < 0.1;
        };
        const OdeStats st =
            rk54_integrate(rhs, y, 0.0, 1.0, tl, [](double, const OdeState&) {}, validate);
        detail::add_stats(out.stats, st);
    }
    out.M = Matrix2{y[0], y[1], y[2], y[3]};
    out.det_err = std::abs(out.M.det() - 1.0);
    out.dM_dt = cplx{-1.0} * (out.M * Matrix2{y[4], y[5], y[6], y[7]});
    out.dM_dmu = cplx{-1.0} * (out.M * Matrix2{y[8], y[9], y[10], y[11]});
    return out;
}

inline Matrix2 dM_dt(const HeunParameters& par, const ContourPath& loop,
                     const Tolerances& tol = {}) {
    return variational_monodromy(par, loop, tol).dM_dt;
}

inline Matrix2 dM_dmu(const HeunParameters& par, const ContourPath& loop,
                      const Tolerances& tol = {}) {
    return variational_monodromy(par, loop, tol).dM_dmu;
}

// ---------------------------------------------------------------------------
// Square-root-adapted gauge.  With a continuous branch w of sqrt(Q) carried
// as state and u the projective-invariant potential,
//   dPsi = [[0, w], [u w, 0]] Psi dx,
// equivalently dPsi/dz = [[0, 1], [u, 0]] Psi in the flat coordinate
// dz = w dx.  The coefficient is traceless, so det Psi stays 1.

struct PsiTransferResult {
    Matrix2 transfer = Matrix2::identity();
    cplx w_start{0.0}, w_end{0.0};
    double det_err = 0.0;
    OdeStats stats;
};

inline PsiTransferResult psi_transfer(const CanonicalCover& c, const ContourPath& path,
                                      cplx w_start, const Tolerances& tol = {}) {
    path.validate();
    const Tolerances tl = scaled_clearance(tol, c.scale);
    std::vector<cplx> guard = c.Q.base.finite_punctures();
    for (cplx z : c.Q.zeros()) guard.push_back(z);
    const double dmin = path.min_distance(guard);
    if (dmin < tl.singularity_clearance)
        throw clearance_error("psi_transfer: path clears a singular point by " +
                              std::to_string(dmin));

    auto polish = [&c](cplx x, cplx w) {
        for (int i = 0; i < 2; ++i) w = 0.5 * (w + c.Q(x) / w);
        return w;
    };
    const cplx w0 = polish(path.start_point(), w_start);
    if (!finite(w0) || std::abs(w0 - w_start) > 1e-3 * std::abs(w0))
        throw invalid_input("psi_transfer: w_start does not satisfy w^2 = Q");

    const Potential pot = potential_u(c.Q);
    OdeState y{cplx{1.0}, cplx{0.0}, cplx{0.0}, cplx{1.0}, w0};
    PsiTransferResult res;
    res.w_start = w0;
    for (const PathSegment& seg : path.segments) {
        auto rhs = [&](double s, const OdeState& st, OdeState& d) {
            const cplx x = seg.at(s);
            const cplx v = seg.velocity(s);
            const cplx w = st[4];
            const cplx uw = (pot.u_plus_1(x) - 1.0) * w;
            d[0] = v * (w * st[2]);
            d[1] = v * (w * st[3]);
            d[2] = v * (uw * st[0]);
            d[3] = v * (uw * st[1]);
            d[4] = v * (0.5 * c.Q.log_deriv(x) * w);
        };
        auto validate = [](const OdeState& before, const OdeState& after) {
            for (cplx z : after)
                if (!finite(z)) return false;
            if (std::abs(after[4]) < 1e-300) return false;
            return std::abs(std::arg(after[4] / before[4])) < pi / 4.0;
        };
        const OdeStats st =
            rk54_integrate(rhs, y, 0.0, 1.0, tl, [](double, const OdeState&) {}, validate);
        detail::add_stats(res.stats, st);
        y[4] = polish(seg.end, y[4]);
    }
    res.transfer = Matrix2{y[0], y[1], y[2], y[3]};
    res.w_end = y[4];
    res.det_err = std::abs(res.transfer.det() - 1.0);
    return res;
}

inline PsiTransferResult psi_monodromy(const CanonicalCover& c, const ContourPath& loop,
                                       const Tolerances& tol = {}) {
    if (!loop.closed) throw invalid_input("psi_monodromy: loop must be closed");
    return psi_transfer(c, loop, transport_w(c, loop.start_point(), tol), tol);
}

// ---------------------------------------------------------------------------
// Uniform samples of the square-root gauge along a straight segment in the
// flat coordinate: dx/dz = 1/w, dw/dz = (Q'/Q)(x)/2, dPsi/dz = [[0,1],[u,0]] Psi.

struct FlatLineSamples {
    cplx dz{0.0};            // spacing between consecutive nodes
    std::vector<cplx> x, w;  // per node
    std::vector<Matrix2> Psi;
    OdeStats stats;
};

inline FlatLineSamples sample_psi_flat_line(const CanonicalCover& c, cplx x0, cplx w0,
                                            cplx dz_total, int n_nodes,
                                            const Tolerances& tol = {}) {
    if (n_nodes < 8) throw invalid_input("sample_psi_flat_line: need at least 8 nodes");
    const Tolerances tl = scaled_clearance(tol, c.scale);
    auto polish = [&c](cplx x, cplx w) {
        for (int i = 0; i < 2; ++i) w = 0.5 * (w + c.Q(x) / w);
        return w;
    };
    const cplx w0p = polish(x0, w0);
    if (!finite(w0p) || std::abs(w0p - w0) > 1e-3 * std::abs(w0p))
        throw invalid_input("sample_psi_flat_line: w0 does not satisfy w^2 = Q");
    auto branch_dist = [&](cplx p) {
        double d = std::numeric_limits<double>::infinity();
        for (cplx b : c.branch_finite) d = std::min(d, std::abs(p - b));
        return d;
    };

    const Potential pot = potential_u(c.Q);
    FlatLineSamples out;
    out.dz = dz_total / double(n_nodes - 1);
    OdeState y{x0, w0p, cplx{1.0}, cplx{0.0}, cplx{0.0}, cplx{1.0}};
    auto record = [&]() {
        out.x.push_back(y[0]);
        out.w.push_back(y[1]);
        out.Psi.push_back(Matrix2{y[2], y[3], y[4], y[5]});
    };
    record();
    for (int k = 1; k < n_nodes; ++k) {
        auto rhs = [&](double, const OdeState& st, OdeState& d) {
            const cplx u = pot.u_plus_1(st[0]) - 1.0;
            d[0] = out.dz / st[1];
            d[1] = out.dz * 0.5 * c.Q.log_deriv(st[0]);
            d[2] = out.dz * st[4];
            d[3] = out.dz * st[5];
            d[4] = out.dz * (u * st[2]);
            d[5] = out.dz * (u * st[3]);
        };
        auto validate = [&](const OdeState&, const OdeState& after) {
            for (cplx z : after)
                if (!finite(z)) return false;
            if (std::abs(after[1]) < 1e-300) return false;
            return branch_dist(after[0]) >= tl.singularity_clearance;
        };
        const OdeStats st =
            rk54_integrate(rhs, y, 0.0, 1.0, tl, [](double, const OdeState&) {}, validate);
        detail::add_stats(out.stats, st);
        y[1] = polish(y[0], y[1]);
        record();
    }
    return out;
}

// ---------------------------------------------------------------------------
// Finite-difference residuals in the flat coordinate.  The first-row entries
// a, b of Psi solve f'' = u f in z, and their pairwise products a^2, a b, b^2
// solve f''' = 4 u f' + 2 u_z f.  Residuals are normalized by the largest
// same-order derivative magnitude found on the grid.

struct ThirdOrderReport {
    double lambda_residual = 0.0;  // products against the third-order flow
    double psi_residual = 0.0;     // solution entries against f'' = u f
    int n_nodes = 0;
};

inline ThirdOrderReport third_order_residual(const CanonicalCover& c, cplx x0, cplx dz_total,
                                             int n_nodes, const Tolerances& tol = {}) {
    if (n_nodes < 13) throw invalid_input("third_order_residual: need at least 13 nodes");
    const cplx w0 = transport_w(c, x0, tol);
    const FlatLineSamples S = sample_psi_flat_line(c, x0, w0, dz_total, n_nodes, tol);
    const Potential pot = potential_u(c.Q);
    const cplx dz = S.dz;

    const size_t N = size_t(n_nodes);
    std::vector<cplx> fa(N), fb(N), p0(N), p1(N), p2(N);
    for (size_t k = 0; k < N; ++k) {
        const cplx a = S.Psi[k].a, b = S.Psi[k].b;
        fa[k] = a;
        fb[k] = b;
        p0[k] = a * a;
        p1[k] = a * b;
        p2[k] = b * b;
    }
    auto d1 = [&](const std::vector<cplx>& f, size_t k) {
        return (-f[k - 3] + 9.0 * f[k - 2] - 45.0 * f[k - 1] + 45.0 * f[k + 1] - 9.0 * f[k + 2] +
                f[k + 3]) /
               (60.0 * dz);
    };
    auto d2 = [&](const std::vector<cplx>& f, size_t k) {
        return (2.0 * f[k - 3] - 27.0 * f[k - 2] + 270.0 * f[k - 1] - 490.0 * f[k] +
                270.0 * f[k + 1] - 27.0 * f[k + 2] + 2.0 * f[k + 3]) /
               (180.0 * dz * dz);
    };
    auto d3 = [&](const std::vector<cplx>& f, size_t k) {
        return (f[k - 3] - 8.0 * f[k - 2] + 13.0 * f[k - 1] - 13.0 * f[k + 1] + 8.0 * f[k + 2] -
                f[k + 3]) /
               (8.0 * dz * dz * dz);
    };

    double r3 = 0.0, s3 = 0.0, r2 = 0.0, s2 = 0.0;
    for (size_t k = 3; k + 3 < N; ++k) {
        const cplx u = pot.u_plus_1(S.x[k]) - 1.0;
        const cplx uz = pot.du_dx(S.x[k]) / S.w[k];
        for (const auto* f : {&p0, &p1, &p2}) {
            const cplx f3 = d3(*f, k);
            r3 = std::max(r3, std::abs(f3 - 4.0 * u * d1(*f, k) - 2.0 * uz * (*f)[k]));
            s3 = std::max(s3, std::abs(f3));
        }
        for (const auto* f : {&fa, &fb}) {
            const cplx f2 = d2(*f, k);
            r2 = std::max(r2, std::abs(f2 - u * (*f)[k]));
            s2 = std::max(s2, std::abs(f2));
        }
    }
    ThirdOrderReport rep;
    rep.n_nodes = n_nodes;
    rep.lambda_residual = r3 / std::max(s3, 1e-300);
    rep.psi_residual = r2 / std::max(s2, 1e-300);
    return rep;
}

// ---------------------------------------------------------------------------
// Schwarzian probe: S(f)/Q at x_center for f the ratio of the two normalized
// solutions, S(f) = f'''/f' - (3/2)(f''/f')^2, measured on 13 uniform nodes
// along the direction of h (7-point stencils at steps h and h/2, Richardson
// extrapolated on the leading fourth-order error).

struct SchwarzianMeasurement {
    cplx ratio_coarse{0.0};
    cplx ratio_fine{0.0};
    cplx ratio{0.0};  // extrapolated value
};

inline SchwarzianMeasurement schwarzian_ratio(const SchroedingerData& data, cplx x_center, cplx h,
                                              const Tolerances& tol = {}) {
    const cplx step = 0.5 * h;
    std::vector<cplx> nodes(13);
    for (int k = 0; k < 13; ++k) nodes[size_t(k)] = x_center + double(k - 6) * step;

    const TransferOptions opt = detail::schroedinger_options(data, tol);
    const CoeffFn coeff = detail::schroedinger_coeff(data);
    std::vector<Matrix2> Phi(13, Matrix2::identity());
    for (int k = 1; k < 13; ++k) {
        ContourPath leg;
        leg.segments.push_back(PathSegment::make_line(nodes[size_t(k) - 1], nodes[size_t(k)]));
        Phi[size_t(k)] = integrate_transfer(coeff, leg, opt) * Phi[size_t(k) - 1];
    }
    std::vector<cplx> f(13);
    for (int k = 0; k < 13; ++k) {
        if (std::abs(Phi[size_t(k)].a) < 1e-300)
            throw numeric_error("schwarzian_ratio: solution ratio has a pole on the grid");
        f[size_t(k)] = Phi[size_t(k)].b / Phi[size_t(k)].a;
    }
    const cplx q = data.potential(x_center);
    if (std::abs(q) < 1e-300)
        throw invalid_input("schwarzian_ratio: potential vanishes at the probe point");

    auto sratio = [&](const std::array<cplx, 7>& g, cplx hh) {
        const cplx f1 =
            (-g[0] + 9.0 * g[1] - 45.0 * g[2] + 45.0 * g[4] - 9.0 * g[5] + g[6]) / (60.0 * hh);
        const cplx f2 = (2.0 * g[0] - 27.0 * g[1] + 270.0 * g[2] - 490.0 * g[3] + 270.0 * g[4] -
                         27.0 * g[5] + 2.0 * g[6]) /
                        (180.0 * hh * hh);
        const cplx f3 = (g[0] - 8.0 * g[1] + 13.0 * g[2] - 13.0 * g[4] + 8.0 * g[5] - g[6]) /
                        (8.0 * hh * hh * hh);
        return (f3 / f1 - 1.5 * (f2 / f1) * (f2 / f1)) / q;
    };
    SchwarzianMeasurement m;
    m.ratio_fine = sratio({f[3], f[4], f[5], f[6], f[7], f[8], f[9]}, step);
    m.ratio_coarse = sratio({f[0], f[2], f[4], f[6], f[8], f[10], f[12]}, h);
    m.ratio = m.ratio_fine + (m.ratio_fine - m.ratio_coarse) / 15.0;
    return m;
}

// ---------------------------------------------------------------------------
// Periods of the four-punctured family as functions of (t, mu).  The
// reference branch of w may flip between nearby parameter values; periods of
// the flipped branch are the negatives, so evaluations are sign-aligned to a
// reference before differencing.

inline int align_period_sign(PeriodData& p, const PeriodData& ref) {
    double dplus = 0.0, dminus = 0.0;
    auto acc = [&](const std::vector<cplx>& v, const std::vector<cplx>& r) {
        if (v.size() != r.size()) throw invalid_input("align_period_sign: size mismatch");
        for (size_t j = 0; j < v.size(); ++j) {
            dplus += std::abs(v[j] - r[j]);
            dminus += std::abs(v[j] + r[j]);
        }
    };
    acc(p.A, ref.A);
    acc(p.B, ref.B);
    if (std::min(dplus, dminus) > 0.25 * std::max(dplus, dminus))
        throw numeric_error("align_period_sign: sign choice is not decisive");
    if (dplus <= dminus) return 1;
    for (auto* v : {&p.A, &p.B, &p.At, &p.Bt})
        for (cplx& z : *v) z = -z;
    return -1;
}

struct PeriodFamilyDerivs {
    PeriodData value;  // at (t, mu)
    PeriodData d_dt;   // entrywise derivative with respect to t
    PeriodData d_dmu;  // entrywise derivative with respect to mu
    double step_t = 0.0, step_mu = 0.0;
};

inline PeriodFamilyDerivs period_tm_jacobian(const HeunParameters& par, const Tolerances& tol = {},
                                             double rel_step = 1e-5) {
    auto eval = [&](cplx t, cplx mu) {
        const QuadDiff Q = heun_Q({t, mu});
        const CanonicalCover c = build_cover(Q, tol);
        const HomologyBasis basis = homology_cycles(c, tol);
        return all_periods(c, basis, tol);
    };
    PeriodFamilyDerivs out;
    out.value = eval(par.t, par.mu);
    out.step_t = rel_step * std::abs(par.t);
    out.step_mu = rel_step * std::abs(par.mu);

    auto central = [&](bool wrt_t, double hh) {
        const cplx dt = wrt_t ? cplx{hh} : cplx{0.0};
        const cplx dm = wrt_t ? cplx{0.0} : cplx{hh};
        PeriodData plus = eval(par.t + dt, par.mu + dm);
        PeriodData minus = eval(par.t - dt, par.mu - dm);
        align_period_sign(plus, out.value);
        align_period_sign(minus, out.value);
        PeriodData d;
        auto fill = [&](const std::vector<cplx>& p, const std::vector<cplx>& m,
                        std::vector<cplx>& dst) {
            for (size_t j = 0; j < p.size(); ++j) dst.push_back((p[j] - m[j]) / (2.0 * hh));
        };
        fill(plus.A, minus.A, d.A);
        fill(plus.B, minus.B, d.B);
        fill(plus.At, minus.At, d.At);
        fill(plus.Bt, minus.Bt, d.Bt);
        return d;
    };
    auto richardson = [&](bool wrt_t, double hh) {
        const PeriodData Dh = central(wrt_t, hh);
        const PeriodData Dh2 = central(wrt_t, 0.5 * hh);
        PeriodData r;
        auto fill = [&](const std::vector<cplx>& coarse, const std::vector<cplx>& fine,
                        std::vector<cplx>& dst) {
            for (size_t j = 0; j < coarse.size(); ++j)
                dst.push_back((4.0 * fine[j] - coarse[j]) / 3.0);
        };
        fill(Dh.A, Dh2.A, r.A);
        fill(Dh.B, Dh2.B, r.B);
        fill(Dh.At, Dh2.At, r.At);
        fill(Dh.Bt, Dh2.Bt, r.Bt);
        return r;
    };
    out.d_dt = richardson(true, out.step_t);
    out.d_dmu = richardson(false, out.step_mu);
    return out;
}

// ---------------------------------------------------------------------------
// Hyperelliptic model of the double cover and the canonical symmetric
// bidifferential in algebraic (Klein) form.  With D the monic polynomial over
// the finite punctures and N the numerator of Q, the cover w^2 = N/D maps to
// the curve y^2 = P(x), P = N D, through y = w D(x); every root of P is a
// simple branch point (plus infinity when deg P is odd).

namespace detail {

struct HyperellipticModel {
    Poly P;  // y^2 = P(x)
    Poly D;  // y = w D(x)
    int genus = 0;

    cplx y(cplx x, cplx w) const { return w * poly_eval(D, x); }
    cplx lam(size_t i) const { return i < P.size() ? P[i] : cplx{0.0}; }

    // Klein's polarization: the symmetric polynomial with F(x, x) = 2 P(x)
    // that cancels the diagonal double pole on the opposite sheet and the
    // spurious growth at infinity.
    cplx F(cplx x1, cplx x2) const {
        cplx s{0.0};
        cplx p{1.0};  // (x1 x2)^i
        for (int i = 0; i <= genus + 1; ++i) {
            s += p * (2.0 * lam(2 * size_t(i)) + lam(2 * size_t(i) + 1) * (x1 + x2));
            p *= x1 * x2;
        }
        return s;
    }
};

inline HyperellipticModel hyperelliptic_model(const CanonicalCover& c) {
    HyperellipticModel m;
    m.D = poly_from_roots(c.Q.base.finite_punctures());
    m.P = poly_mul(poly_trim(c.Q.numerator), m.D);
    m.genus = (poly_degree(m.P) - 1) / 2;
    if (m.genus < 1) throw invalid_input("hyperelliptic_model: positive genus required");
    return m;
}

// Weights for n+1 nodes cos(k pi / n), k = 0..n (n even), exact through
// degree n for the integral over [-1, 1].
inline std::vector<double> clenshaw_curtis_weights(int n) {
    if (n < 2 || n % 2 != 0) throw invalid_input("clenshaw_curtis_weights: need even n >= 2");
    std::vector<double> w(size_t(n) + 1, 0.0);
    w[0] = w[size_t(n)] = 1.0 / (double(n) * n - 1.0);
    for (int k = 1; k < n; ++k) {
        const double th = pi * k / n;
        double v = 1.0;
        for (int j = 1; j < n / 2; ++j) v -= 2.0 * std::cos(2.0 * j * th) / (4.0 * j * j - 1.0);
        v -= std::cos(double(n) * th) / (double(n) * n - 1.0);
        w[size_t(k)] = 2.0 * v / double(n);
    }
    return w;
}

struct CycleQuadrature {
    std::vector<cplx> nodes;    // points on the cycle
    std::vector<cplx> measure;  // complex weights approximating dt
    std::vector<cplx> wvals;    // transported branch of sqrt(Q) per node
};

inline CycleQuadrature discretize_cycle(const CanonicalCover& c, const CoverCycle& cyc,
                                        int nodes_per_segment, const Tolerances& tol) {
    const Tolerances tl = scaled_clearance(tol, c.scale);
    auto polish = [&c](cplx x, cplx w) {
        for (int i = 0; i < 2; ++i) w = 0.5 * (w + c.Q(x) / w);
        return w;
    };
    const int n = nodes_per_segment;
    const auto wcc = clenshaw_curtis_weights(n);

    CycleQuadrature out;
    const cplx w_first = polish(cyc.path.start_point(), cyc.w_start);
    cplx w = w_first;
    for (const PathSegment& seg : cyc.path.segments) {
        double s_cur = 0.0;
        for (int k = 0; k <= n; ++k) {
            const double s = 0.5 * (1.0 - std::cos(pi * k / n));
            if (s > s_cur) {
                OdeState y{w};
                auto rhs = [&](double ss, const OdeState& st, OdeState& d) {
                    d[0] = 0.5 * c.Q.log_deriv(seg.at(ss)) * seg.velocity(ss) * st[0];
                };
                auto validate = [](const OdeState& before, const OdeState& after) {
                    if (!finite(after[0]) || std::abs(after[0]) < 1e-300) return false;
                    return std::abs(std::arg(after[0] / before[0])) < pi / 4.0;
                };
                rk54_integrate(rhs, y, s_cur, s, tl, [](double, const OdeState&) {}, validate);
                w = polish(seg.at(s), y[0]);
                s_cur = s;
            }
            out.nodes.push_back(seg.at(s));
            out.measure.push_back(seg.velocity(s) * 0.5 * wcc[size_t(k)]);
            out.wvals.push_back(w);
        }
    }
    if (std::abs(w - w_first) > 1e-6 * std::abs(w_first))
        throw numeric_error("discretize_cycle: transported branch does not close");
    return out;
}

}  // namespace detail

// The coefficient beta of the canonical bidifferential B = beta dx1 dx2,
//
//   beta(x1, x2) = (F(x1,x2) + 2 y1 y2) / (4 (x1-x2)^2 y1 y2)
//                  + sum_jk c_jk x1^j x2^k / (y1 y2),
//
// normalized so that every a-period of B in either argument vanishes.  The
// constants c_jk are found numerically from that condition.

struct KleinBergman {
    detail::HyperellipticModel model;
    DenseMatrix c;              // genus x genus normalization constants
    double fit_residual = 0.0;  // holomorphy fit check at a spare sample point

    cplx beta(cplx x1, cplx y1, cplx x2, cplx y2) const {
        const cplx d = x1 - x2;
        cplx corr{0.0};
        cplx p1{1.0};
        for (size_t j = 0; j < c.rows; ++j) {
            cplx p2{1.0};
            for (size_t k = 0; k < c.cols; ++k) {
                corr += c(j, k) * p1 * p2;
                p2 *= x2;
            }
            p1 *= x1;
        }
        return (model.F(x1, x2) + 2.0 * y1 * y2) / (4.0 * d * d * y1 * y2) + corr / (y1 * y2);
    }
};

inline KleinBergman make_klein_bergman(const CanonicalCover& c, const HomologyBasis& basis,
                                       const Tolerances& tol = {}, int nodes_per_segment = 96) {
    KleinBergman kb;
    kb.model = detail::hyperelliptic_model(c);
    const size_t g = size_t(kb.model.genus);
    if (basis.a.size() != g)
        throw invalid_input("make_klein_bergman: homology basis does not match the genus");

    std::vector<detail::CycleQuadrature> quad;
    for (const CoverCycle& cyc : basis.a)
        quad.push_back(detail::discretize_cycle(c, cyc, nodes_per_segment, tol));

    // a-periods of the differentials t^l dt / y
    DenseMatrix A(g, g);  // A(l, k) over the k-th a-cycle
    for (size_t k = 0; k < g; ++k)
        for (size_t l = 0; l < g; ++l) {
            cplx s{0.0};
            for (size_t q = 0; q < quad[k].nodes.size(); ++q) {
                const cplx t = quad[k].nodes[q];
                cplx p{1.0};
                for (size_t e = 0; e < l; ++e) p *= t;
                s += quad[k].measure[q] * p / kb.model.y(t, quad[k].wvals[q]);
            }
            A(l, k) = s;
        }

    // Sample points on a ring far from the bounded cycles; the a-period of
    // the bare kernel in the second argument is a holomorphic differential in
    // the first, so it is a combination of x^j dx / y to be matched.
    auto polish = [&c](cplx x, cplx w) {
        for (int i = 0; i < 2; ++i) w = 0.5 * (w + c.Q(x) / w);
        return w;
    };
    std::vector<cplx> xs, ys;
    for (size_t s = 0; xs.size() < g + 1 && s < 4 * (g + 1); ++s) {
        const double th = 0.7 + 2.1 * double(s);
        const cplx x = c.x_ref + 1.9 * c.scale * cplx{std::cos(th), std::sin(th)};
        const cplx w = polish(x, std::sqrt(c.Q(x)));
        if (!finite(w) || std::abs(w) < 1e-12) continue;
        bool clear = true;
        for (const auto& qd : quad)
            for (cplx nd : qd.nodes)
                if (std::abs(nd - x) < 0.05 * c.scale) clear = false;
        if (!clear) continue;
        xs.push_back(x);
        ys.push_back(kb.model.y(x, w));
    }
    if (xs.size() < g + 1)
        throw numeric_error("make_klein_bergman: could not place kernel sample points");

    auto bare_period = [&](size_t s, size_t k) {
        cplx val{0.0};
        for (size_t q = 0; q < quad[k].nodes.size(); ++q) {
            const cplx t = quad[k].nodes[q];
            const cplx yt = kb.model.y(t, quad[k].wvals[q]);
            const cplx d = xs[s] - t;
            val += quad[k].measure[q] * (kb.model.F(xs[s], t) + 2.0 * ys[s] * yt) /
                   (4.0 * d * d * ys[s] * yt);
        }
        return val;
    };

    // match bare a-periods against x^j / y at the first g samples
    DenseMatrix m(g, g);  // m(j, k)
    double fit = 0.0;
    for (size_t k = 0; k < g; ++k) {
        DenseMatrix V(g, g);
        std::vector<cplx> rhs(g);
        for (size_t s = 0; s < g; ++s) {
            cplx p{1.0};
            for (size_t jj = 0; jj < g; ++jj) {
                V(s, jj) = p / ys[s];
                p *= xs[s];
            }
            rhs[s] = bare_period(s, k);
        }
        const std::vector<cplx> mk = solve_dense(V, rhs);
        double nrm = 0.0;
        for (size_t jj = 0; jj < g; ++jj) {
            m(jj, k) = mk[jj];
            nrm = std::max(nrm, std::abs(mk[jj]));
        }
        // verify the fit at the spare sample point
        cplx pred{0.0};
        cplx p{1.0};
        for (size_t jj = 0; jj < g; ++jj) {
            pred += mk[jj] * p / ys[g];
            p *= xs[g];
        }
        const cplx got = bare_period(g, k);
        fit = std::max(fit, std::abs(pred - got) / std::max(1e-300, std::abs(got)));
    }
    kb.fit_residual = fit;
    if (fit > 1e-4)
        throw numeric_error("make_klein_bergman: kernel periods are not holomorphic (residual " +
                            std::to_string(fit) + ")");

    // c(j, .) solves sum_l c(j, l) A(l, k) = -m(j, k)
    DenseMatrix At(g, g);
    for (size_t l = 0; l < g; ++l)
        for (size_t k = 0; k < g; ++k) At(k, l) = A(l, k);
    kb.c = DenseMatrix(g, g);
    for (size_t jj = 0; jj < g; ++jj) {
        std::vector<cplx> rhs(g);
        for (size_t k = 0; k < g; ++k) rhs[k] = -m(jj, k);
        const std::vector<cplx> row = solve_dense(At, rhs);
        for (size_t l = 0; l < g; ++l) kb.c(jj, l) = row[l];
    }
    return kb;
}

// ---------------------------------------------------------------------------
// Derivative of the potential u at a point x (the flat coordinate of x held
// fixed) with respect to one period coordinate, the others held fixed:
//
//   du/dP = -(3 / 8 pi i) oint_dual beta(x, t)^2 / (Q(x) w(t)) dt.
//
// The dual chain of the j-th a-period is the j-th b-cycle reversed and taken
// twice; the dual of the j-th b-period is the j-th a-cycle taken twice.

inline cplx du_dperiod(const CanonicalCover& c, const HomologyBasis& basis,
                       const KleinBergman& kb, bool wrt_A, size_t j, cplx x,
                       const Tolerances& tol = {}, int sheet = 1) {
    const std::vector<CoverCycle>& duals = wrt_A ? basis.b : basis.a;
    if (j >= duals.size()) throw invalid_input("du_dperiod: cycle index out of range");
    if (sheet != 1 && sheet != -1) throw invalid_input("du_dperiod: sheet must be +-1");
    const CoverCycle& dual = duals[j];
    const double weight = wrt_A ? -2.0 : 2.0;

    const Tolerances tl = scaled_clearance(tol, c.scale);
    if (dual.path.min_distance({x}) < 2.0 * tl.singularity_clearance)
        throw clearance_error("du_dperiod: evaluation point too close to the dual cycle");

    cplx wx = std::sqrt(c.Q(x));
    for (int i = 0; i < 2; ++i) wx = 0.5 * (wx + c.Q(x) / wx);
    wx *= double(sheet);
    const cplx yx = kb.model.y(x, wx);

    const CoverIntegrand g = [&, x, yx](cplx tp, cplx w) {
        const cplx b = kb.beta(x, yx, tp, kb.model.y(tp, w));
        return b * b / w;
    };
    const cplx I = cycle_integral(c, dual, g, tol);
    return weight * cplx{0.0, 3.0 / (8.0 * pi)} * I / c.Q(x);
}

inline cplx du_dperiod(const CanonicalCover& c, const HomologyBasis& basis, bool wrt_A, size_t j,
                       cplx x, const Tolerances& tol = {}) {
    return du_dperiod(c, basis, make_klein_bergman(c, basis, tol), wrt_A, j, x, tol);
}

// ---------------------------------------------------------------------------
// Derivatives of the monodromy with respect to the period coordinates through
// the parameter chart (t, mu): invert the 2x2 period Jacobian of the
// genus-one family and chain with the single-sweep parameter derivatives.

struct MonodromyPeriodDerivs {
    Matrix2 M;
    Matrix2 dM_dt, dM_dmu;
    Matrix2 dM_dA, dM_dB;
    cplx dt_dA{0.0}, dt_dB{0.0}, dmu_dA{0.0}, dmu_dB{0.0};
    PeriodFamilyDerivs periods;
};

inline MonodromyPeriodDerivs dM_dperiod(const HeunParameters& par, const ContourPath& loop,
                                        const Tolerances& tol = {}) {
    MonodromyPeriodDerivs out;
    out.periods = period_tm_jacobian(par, tol);
    if (out.periods.value.A.size() != 1)
        throw invalid_input("dM_dperiod: genus-one family required");
    const cplx At = out.periods.d_dt.A[0], Am = out.periods.d_dmu.A[0];
    const cplx Bt = out.periods.d_dt.B[0], Bm = out.periods.d_dmu.B[0];
    const cplx det = At * Bm - Am * Bt;
    if (!(std::abs(det) > 1e-12 * (std::abs(At * Bm) + std::abs(Am * Bt))))
        throw numeric_error("dM_dperiod: period Jacobian is numerically singular");
    out.dt_dA = Bm / det;
    out.dt_dB = -Am / det;
    out.dmu_dA = -Bt / det;
    out.dmu_dB = At / det;

    const VariationalMonodromy vm = variational_monodromy(par, loop, tol);
    out.M = vm.M;
    out.dM_dt = vm.dM_dt;
    out.dM_dmu = vm.dM_dmu;
    out.dM_dA = vm.dM_dt * out.dt_dA + vm.dM_dmu * out.dmu_dA;
    out.dM_dB = vm.dM_dt * out.dt_dB + vm.dM_dmu * out.dmu_dB;
    return out;
}

// ---------------------------------------------------------------------------
// Direct kernel evaluation of the same derivative, in the branch-weighted
// frame where the transfer matrix solves dPsi = [[0, 1], [u, 0]] Psi w dx:
// the inner integral over the dual cycle is frozen on a fixed quadrature and
// the outer sweep accumulates Lambda(x) du/dP(x) w(x) dx against the transfer
// along `gamma`.  The comparison against the chain-rule pipeline is
// frame-honest at the level of traces.  Meaningful when the outer loop and
// the dual cycle are disjoint on the base (reported in path_class_ok);
// otherwise the value is still computed and recorded.

struct DirectPeriodDeriv {
    Matrix2 M;                   // transfer in the branch-weighted frame
    Matrix2 dM;
    bool path_class_ok = false;  // outer loop and dual cycle are disjoint
    double w_closure = 0.0;      // relative closure defect of the outer branch
    double det_err = 0.0;        // |det M - 1|
    OdeStats stats;
};

inline DirectPeriodDeriv dM_dperiod_direct(const CanonicalCover& c, const HomologyBasis& basis,
                                           const KleinBergman& kb, bool wrt_A, size_t j,
                                           const ContourPath& gamma, const Tolerances& tol = {},
                                           int nodes_per_segment = 96,
                                           std::optional<cplx> w_start = {}) {
    gamma.validate();
    if (!gamma.closed) throw invalid_input("dM_dperiod_direct: loop must be closed");
    const std::vector<CoverCycle>& duals = wrt_A ? basis.b : basis.a;
    if (j >= duals.size()) throw invalid_input("dM_dperiod_direct: cycle index out of range");
    const CoverCycle& dual = duals[j];
    const double weight = wrt_A ? -2.0 : 2.0;

    const Tolerances tl = scaled_clearance(tol, c.scale);
    std::vector<cplx> guard = c.Q.base.finite_punctures();
    for (cplx z : c.Q.zeros()) guard.push_back(z);
    const double dmin = gamma.min_distance(guard);
    if (dmin < tl.singularity_clearance)
        throw clearance_error("dM_dperiod_direct: loop clears a singular point by " +
                              std::to_string(dmin));

    const auto quad = detail::discretize_cycle(c, dual, nodes_per_segment, tol);
    {
        double dq = std::numeric_limits<double>::infinity();
        for (cplx nd : quad.nodes) dq = std::min(dq, gamma.min_distance({nd}));
        if (dq < 2.0 * tl.singularity_clearance)
            throw clearance_error("dM_dperiod_direct: loop passes too close to the dual cycle");
    }

    // du/dP at an outer point, with the inner quadrature frozen
    auto k_of = [&](cplx x, cplx wx) {
        const cplx yx = kb.model.y(x, wx);
        cplx s{0.0};
        for (size_t q = 0; q < quad.nodes.size(); ++q) {
            const cplx b =
                kb.beta(x, yx, quad.nodes[q], kb.model.y(quad.nodes[q], quad.wvals[q]));
            s += quad.measure[q] * b * b / quad.wvals[q];
        }
        return weight * cplx{0.0, 3.0 / (8.0 * pi)} * s / c.Q(x);
    };
    auto polish = [&c](cplx x, cplx w) {
        for (int i = 0; i < 2; ++i) w = 0.5 * (w + c.Q(x) / w);
        return w;
    };

    DirectPeriodDeriv out;
    out.path_class_ok = path_crossings(gamma, dual.path, 1e-4 * c.scale).empty();

    const Potential pot = potential_u(c.Q);
    const cplx w0 = polish(gamma.start_point(), w_start ? *w_start
                                                        : transport_w(c, gamma.start_point(), tol));
    OdeState y(9, cplx{0.0});
    y[0] = 1.0;
    y[3] = 1.0;
    y[4] = w0;
    for (const PathSegment& seg : gamma.segments) {
        auto rhs = [&](double s, const OdeState& st, OdeState& d) {
            const cplx x = seg.at(s);
            const cplx v = seg.velocity(s);
            const cplx u = pot.u_plus_1(x) - 1.0;
            const cplx vw = v * st[4];
            d[0] = vw * st[2];
            d[1] = vw * st[3];
            d[2] = vw * u * st[0];
            d[3] = vw * u * st[1];
            d[4] = v * 0.5 * c.Q.log_deriv(x) * st[4];
            const Matrix2 G = (k_of(x, st[4]) * vw) * lambda_of(Matrix2{st[0], st[1], st[2], st[3]});
            d[5] = v * G.a;
            d[6] = v * G.b;
            d[7] = v * G.c;
            d[8] = v * G.d;
        };
        auto validate = [](const OdeState& before, const OdeState& after) {
            for (cplx z : after)
                if (!finite(z)) return false;
            if (std::abs(after[4]) < 1e-300) return false;
            return std::abs(std::arg(after[4] / before[4])) < pi / 4.0;
        };
        const OdeStats st =
            rk54_integrate(rhs, y, 0.0, 1.0, tl, [](double, const OdeState&) {}, validate);
        detail::add_stats(out.stats, st);
        y[4] = polish(seg.end, y[4]);
    }
    out.M = Matrix2{y[0], y[1], y[2], y[3]};
    out.w_closure = std::abs(y[4] - w0) / std::abs(w0);
    out.det_err = std::abs(out.M.det() - 1.0);
    out.dM = out.M * Matrix2{y[5], y[6], y[7], y[8]};
    return out;
}

inline DirectPeriodDeriv dM_dperiod_direct(const CanonicalCover& c, const HomologyBasis& basis,
                                           bool wrt_A, size_t j, const ContourPath& gamma,
                                           const Tolerances& tol = {},
                                           int nodes_per_segment = 96) {
    return dM_dperiod_direct(c, basis, make_klein_bergman(c, basis, tol), wrt_A, j, gamma, tol,
                             nodes_per_segment);
}

}  // namespace qdm
