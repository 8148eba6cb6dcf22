#include <catch2/catch_amalgamated.hpp>

#include <utility>
#include <vector>

#include "qdm/cover.hpp"
#include "qdm/elliptic.hpp"

using namespace qdm;

namespace {

const cplx t_flag{0.31, 0.27};

QuadDiff flagship(cplx mu = cplx{1.0}) { return heun_Q({t_flag, mu}); }

// Five punctures, one at infinity, with one finite zero of the differential.
QuadDiff five_point(cplx zero_at, cplx scale) {
    PuncturedSphere base;
    base.punctures = {SpherePoint::at(0.0), SpherePoint::at(1.0), SpherePoint::at(cplx{-1.0, 0.0}),
                      SpherePoint::at(cplx{2.0, 0.0}), SpherePoint::infinity()};
    base.validate();
    QuadDiff q;
    q.base = base;
    q.numerator = poly_scale(Poly{-zero_at, cplx{1.0}}, scale);
    q.validate_full_poles();
    return q;
}

QuadDiff five_real() { return five_point(cplx{0.4}, cplx{1.0}); }
QuadDiff five_generic() { return five_point(cplx{0.4, 0.9}, cplx{1.3, -0.4}); }

// Four finite punctures, constant numerator: infinity is a regular point of
// the cover (Q ~ x^-4 there).
QuadDiff quartic_finite() {
    PuncturedSphere base;
    base.punctures = {SpherePoint::at(0.0), SpherePoint::at(1.0), SpherePoint::at(cplx{2.0, 0.0}),
                      SpherePoint::at(cplx{5.0, 0.0})};
    base.validate();
    QuadDiff q;
    q.base = base;
    q.numerator = Poly{cplx{1.0}};
    q.validate_full_poles();
    return q;
}

std::pair<cplx, cplx> elliptic_periods(cplx t, cplx mu = cplx{1.0}) {
    const auto Q = heun_Q({t, mu});
    const auto c = build_cover(Q);
    const auto basis = homology_cycles(c);
    return {period(c, basis.a[0]), period(c, basis.b[0])};
}

// Periods are defined up to a joint sign (the choice of sheet); align a pair
// against a reference before comparing.
double joint_sign(cplx A, cplx B, cplx A_ref, cplx B_ref) {
    const double plus = std::abs(A - A_ref) + std::abs(B - B_ref);
    const double minus = std::abs(A + A_ref) + std::abs(B + B_ref);
    return plus <= minus ? 1.0 : -1.0;
}

}  // namespace

TEST_CASE("cover construction identifies branch points, cuts, and genus") {
    const auto c4 = build_cover(flagship());
    REQUIRE(c4.genus == 1);
    REQUIRE(c4.branch_at_inf);
    REQUIRE(c4.branch_finite.size() == 3);
    REQUIRE(std::abs(c4.branch_finite[0] - cplx{0.0}) < 1e-14);
    REQUIRE(std::abs(c4.branch_finite[1] - t_flag) < 1e-14);
    REQUIRE(std::abs(c4.branch_finite[2] - cplx{1.0}) < 1e-14);
    REQUIRE(c4.cuts.size() == 2);
    REQUIRE(!c4.cuts[0].unbounded);
    REQUIRE(c4.cuts[1].unbounded);
    REQUIRE(std::abs(c4.cuts[1].a - cplx{1.0}) < 1e-14);
    REQUIRE(c4.cut_gap > 0.3);
    for (cplx b : c4.branch_finite) REQUIRE(std::abs(c4.x_ref - b) > 1.2 * c4.scale);

    const auto c5 = build_cover(five_real());
    REQUIRE(c5.genus == 2);
    REQUIRE(c5.branch_finite.size() == 5);
    REQUIRE(c5.cuts.size() == 3);
    REQUIRE(std::abs(c5.cuts[0].a - cplx{-1.0}) < 1e-14);
    REQUIRE(std::abs(c5.cuts[0].b - cplx{0.0}) < 1e-14);
    REQUIRE(std::abs(c5.cuts[1].a - cplx{0.4}) < 1e-12);
    REQUIRE(std::abs(c5.cuts[1].b - cplx{1.0}) < 1e-14);
    REQUIRE(c5.cuts[2].unbounded);

    const auto cq = build_cover(quartic_finite());
    REQUIRE(cq.genus == 1);
    REQUIRE(!cq.branch_at_inf);
    REQUIRE(cq.cuts.size() == 2);
    REQUIRE(!cq.cuts[1].unbounded);
}

TEST_CASE("degenerate configurations are rejected") {
    REQUIRE_THROWS_AS(build_cover(five_point(cplx{1.0, 1e-12}, cplx{1.0})), invalid_input);

    const auto c = build_cover(flagship());
    REQUIRE_THROWS_AS(homology_cycles(c, {}, 5.0), invalid_input);

    const CoverIntegrand g = [](cplx, cplx w) { return w; };
    const CoverIntegrand gs[] = {g};
    ContourPath loop = ContourPath::circle(c.x_ref, 0.2 * c.scale);
    const cplx w_ok = transport_w(c, loop.start_point());
    REQUIRE_THROWS_AS(
        cover_integrate(c, loop, 1.7 * w_ok, std::span{gs, 1}, Tolerances{}),
        invalid_input);
}

TEST_CASE("sheet transport is coherent across nearby targets") {
    const auto c = build_cover(five_generic());
    const cplx p1{0.3, 1.6};
    const cplx p2{0.9, 2.0};
    const cplx w1 = transport_w(c, p1);
    const cplx w2 = transport_w(c, p2);
    REQUIRE(std::abs(w1 * w1 - c.Q(p1)) < 1e-10 * std::abs(c.Q(p1)));
    const cplx w2c = detail::continue_w_to(c, p1, w1, p2, scaled_clearance({}, c.scale));
    REQUIRE(std::abs(w2 - w2c) < 1e-9 * std::abs(w2));
}

TEST_CASE("homology cycles realize the canonical intersection pairing") {
    for (const QuadDiff& Q : {flagship(), five_real(), quartic_finite()}) {
        const auto c = build_cover(Q);
        const auto basis = homology_cycles(c);
        const auto cycles = basis.all();
        const auto M = intersection_matrix(c, cycles);
        const int g = c.genus;
        for (int i = 0; i < 2 * g; ++i)
            for (int j = 0; j < 2 * g; ++j) {
                const int want = (j == i + g) ? 1 : (i == j + g ? -1 : 0);
                REQUIRE(M[i][j] == want);
            }
    }
}

TEST_CASE("elliptic periods match the arithmetic-geometric-mean oracle") {
    for (cplx t : {cplx{0.5}, t_flag}) {
        const auto [A, B] = elliptic_periods(t);
        const auto oracle = elliptic_oracle(t);
        const double s = joint_sign(A, B, oracle.A0, oracle.B0);
        REQUIRE(std::abs(s * A - oracle.A0) < 1e-9 * std::abs(oracle.A0));
        REQUIRE(std::abs(s * B - oracle.B0) < 1e-9 * std::abs(oracle.B0));
        REQUIRE((B / A).imag() > 0.0);
    }
    const auto [A, B] = elliptic_periods(cplx{0.5});
    REQUIRE(std::abs(B / A - cplx{0.0, 1.0}) < 1e-9);
}

TEST_CASE("period wronskian in the puncture position is pinned") {
    auto wronskian = [](cplx t, cplx mu) {
        const double h = 2e-4;
        const auto [A, B] = elliptic_periods(t, mu);
        auto [Ap, Bp] = elliptic_periods(t + h, mu);
        auto [Am, Bm] = elliptic_periods(t - h, mu);
        const double sp = joint_sign(Ap, Bp, A, B);
        const double sm = joint_sign(Am, Bm, A, B);
        const cplx dA = (sp * Ap - sm * Am) / (2.0 * h);
        const cplx dB = (sp * Bp - sm * Bm) / (2.0 * h);
        return t * (1.0 - t) * (A * dB - B * dA) / mu;
    };
    const cplx expected{0.0, -4.0 * pi};
    REQUIRE(std::abs(wronskian(t_flag, cplx{1.0}) - expected) < 1e-5 * std::abs(expected));
    REQUIRE(std::abs(wronskian(cplx{0.62, -0.18}, cplx{2.0, -1.0}) - expected) <
            1e-5 * std::abs(expected));
}

TEST_CASE("periods are homotopy invariant and scale like sqrt(mu)") {
    const auto Q = flagship();
    const auto c = build_cover(Q);
    const auto b1 = homology_cycles(c, {}, 0.7);
    const auto b2 = homology_cycles(c, {}, 1.25);
    const cplx A1 = period(c, b1.a[0]), A2 = period(c, b2.a[0]);
    const cplx B1 = period(c, b1.b[0]), B2 = period(c, b2.b[0]);
    REQUIRE(std::abs(A1 - A2) < 1e-8 * std::abs(A1));
    REQUIRE(std::abs(B1 - B2) < 1e-8 * std::abs(B1));

    for (cplx mu : {cplx{4.0}, cplx{0.0, 2.0}}) {
        const auto [Am, Bm] = elliptic_periods(t_flag, mu);
        REQUIRE(std::abs(Am * Am - mu * A1 * A1) < 1e-8 * std::abs(mu * A1 * A1));
        REQUIRE(std::abs(Am * Bm - mu * A1 * B1) < 1e-8 * std::abs(mu * A1 * B1));
    }
}

TEST_CASE("contractible cycles and exact differentials integrate to zero") {
    for (const QuadDiff& Q : {flagship(), five_generic()}) {
        const auto c = build_cover(Q);

        ContourPath loop = ContourPath::circle(c.x_ref, 0.25 * c.scale);
        const CoverCycle triv{loop, transport_w(c, loop.start_point()), "contractible"};
        REQUIRE(std::abs(period(c, triv)) < 1e-9 * c.scale);

        // d(x w) integrates to zero around every cycle of the basis.
        const CoverIntegrand exact = [&Q](cplx x, cplx w) {
            return w * (1.0 + 0.5 * x * Q.log_deriv(x));
        };
        const auto basis = homology_cycles(c);
        for (const auto& cyc : basis.all()) {
            REQUIRE(std::abs(cycle_integral(c, cyc, exact)) < 1e-8 * (1.0 + c.scale));
        }
    }
}

TEST_CASE("the potential-weighted differential has residue-free branch points") {
    for (const QuadDiff& Q : {flagship(), five_generic()}) {
        const auto c = build_cover(Q);
        const Potential pot = potential_u(Q);
        const CoverIntegrand eta = [&pot](cplx x, cplx w) { return pot.u_plus_1(x) * w; };
        for (cplx bp : c.branch_finite) {
            double nearest = std::numeric_limits<double>::infinity();
            for (cplx other : c.branch_finite)
                if (std::abs(other - bp) > 1e-12 * c.scale)
                    nearest = std::min(nearest, std::abs(other - bp));
            const cplx val = branch_loop_integral(c, bp, 0.25 * nearest, eta);
            REQUIRE(std::abs(val) < 1e-7);
        }
    }
}

TEST_CASE("genus two periods match the frozen oracle values") {
    const auto c = build_cover(five_real());
    const auto basis = homology_cycles(c);
    const auto p = all_periods(c, basis);

    const std::vector<cplx> got = {p.A[0], p.A[1], p.B[0], p.B[1],
                                   p.At[0], p.At[1], p.Bt[0], p.Bt[1]};
    const std::vector<cplx> ref = {cplx{3.0050891159}, cplx{1.4278566935},
                                   cplx{0.0, 4.2978093807}, cplx{0.0, 3.3750956197},
                                   cplx{-3.9009801893}, cplx{1.9229135722},
                                   cplx{0.0, 2.0729921770}, cplx{0.0, 3.1086962290}};
    double dplus = 0.0, dminus = 0.0;
    for (size_t k = 0; k < got.size(); ++k) {
        dplus = std::max(dplus, std::abs(got[k] - ref[k]));
        dminus = std::max(dminus, std::abs(got[k] + ref[k]));
    }
    REQUIRE(std::min(dplus, dminus) < 3e-6);
}

TEST_CASE("the period pairing of the two differentials is pinned") {
    const cplx p4 = tau_pairing(flagship());
    REQUIRE(std::abs(p4 - cplx{0.0, -6.0 * pi}) < 1e-6 * 6.0 * pi);

    const cplx p5 = tau_pairing(five_real());
    REQUIRE(std::abs(p5 - cplx{0.0, -20.0 * pi / 3.0}) < 1e-6 * 21.0);
}

TEST_CASE("flat coordinate charts are consistent with the differential") {
    for (const QuadDiff& Q : {flagship(), five_real()}) {
        const auto c = build_cover(Q);
        const auto ch = make_flat_chart(c);
        REQUIRE(ch.pole_type == Q.zeros().empty());
        REQUIRE(std::abs(ch.w1 * ch.w1 - Q(ch.x1)) < 1e-8 * std::abs(Q(ch.x1)));

        const cplx x{0.8, 0.6};
        const auto fp = flat_point(c, ch, x);
        const auto fm = flat_point(c, ch, x, -1);
        REQUIRE(std::abs(fp.z + fm.z) < 1e-10 * (1.0 + std::abs(fp.z)));
        REQUIRE(std::abs(fp.w + fm.w) < 1e-10 * std::abs(fp.w));
        REQUIRE(std::abs(fp.w * fp.w - Q(x)) < 1e-9 * std::abs(Q(x)));

        // dz/dx = w in both coordinate directions.
        const double h = 1e-5;
        const cplx dre =
            (flat_point(c, ch, x + h).z - flat_point(c, ch, x - h).z) / (2.0 * h);
        const cplx dim = (flat_point(c, ch, x + cplx{0.0, h}).z -
                          flat_point(c, ch, x - cplx{0.0, h}).z) /
                         cplx{0.0, 2.0 * h};
        REQUIRE(std::abs(dre - fp.w) < 2e-6 * std::abs(fp.w));
        REQUIRE(std::abs(dim - fp.w) < 2e-6 * std::abs(fp.w));

        // Additivity over a short leg that stays away from the branch points.
        const cplx y{1.05, 0.85};
        const auto fq = flat_point(c, ch, y);
        const CoverIntegrand gs[] = {CoverIntegrand{[](cplx, cplx w) { return w; }}};
        const auto direct =
            cover_integrate(c, ContourPath::polyline({x, y}), fp.w, std::span{gs, 1});
        REQUIRE(std::abs((fq.z - fp.z) - direct.values[0]) < 1e-8 * (1.0 + std::abs(fq.z)));
        REQUIRE(std::abs(fq.w - direct.w_end) < 1e-8 * std::abs(fq.w));
    }
}

TEST_CASE("flat flow follows straight segments of the coordinate") {
    const auto c = build_cover(flagship());
    const auto ch = make_flat_chart(c);
    const cplx x0{0.7, 0.8};
    const auto fp = flat_point(c, ch, x0);

    // Small step: x(z) = x0 + dz/w - dz^2 (Q'/Q)(x0) / (4 w^2) + O(dz^3).
    const cplx dz_small{0.02, -0.015};
    const auto small = flow_flat_line(c, x0, fp.w, dz_small);
    const cplx second = x0 + dz_small / fp.w -
                        dz_small * dz_small * c.Q.log_deriv(x0) / (4.0 * fp.w * fp.w);
    REQUIRE(std::abs(small.x - second) < 5e-3 * std::abs(dz_small));

    // Larger step: flowing back must return to the start on the same sheet.
    const cplx dz{0.4, -0.3};
    const auto out = flow_flat_line(c, x0, fp.w, dz);
    REQUIRE(std::abs(out.w * out.w - c.Q(out.x)) < 1e-9 * std::abs(c.Q(out.x)));
    const auto back = flow_flat_line(c, out.x, out.w, -dz);
    REQUIRE(std::abs(back.x - x0) < 1e-8);
    REQUIRE(std::abs(back.w - fp.w) < 1e-8 * std::abs(fp.w));
}

TEST_CASE("degenerating puncture position drives one period logarithmic") {
    const auto [A1, B1] = elliptic_periods(cplx{0.05});
    const auto [A2, B2] = elliptic_periods(cplx{0.005});
    REQUIRE((B1 / A1).imag() > 0.0);
    REQUIRE((B2 / A2).imag() > 0.0);
    REQUIRE(std::abs(std::abs(A2) - 2.0 * pi) < 0.02 * 2.0 * pi);
    const double ratio = std::abs(B2) / std::abs(B1);
    REQUIRE(ratio > 1.35);
    REQUIRE(ratio < 1.45);
}
