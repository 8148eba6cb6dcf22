#include <catch2/catch_amalgamated.hpp>

#include "qdm/path.hpp"
#include "qdm/sphere.hpp"
#include "qdm/transfer.hpp"

using namespace qdm;

namespace {

const cplx t_flag{0.31, 0.27};

QuadDiff flagship() { return heun_Q({t_flag, cplx{1.0}}); }

// Five punctures, one at infinity; differential with a prescribed zero.
QuadDiff five_point_example(cplx zero_at = cplx{0.4, 0.9}, cplx scale = cplx{1.3, -0.4}) {
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

SpherePoint moebius(const SpherePoint& p, cplx a, cplx b, cplx c, cplx d) {
    if (p.is_inf) {
        if (std::abs(c) == 0.0) return SpherePoint::infinity();
        return SpherePoint::at(a / c);
    }
    const cplx den = c * p.z + d;
    if (std::abs(den) < 1e-14) return SpherePoint::infinity();
    return SpherePoint::at((a * p.z + b) / den);
}

}  // namespace

TEST_CASE("heun differential evaluates to the closed form") {
    auto Q = heun_Q({cplx{2.0}, cplx{1.0}});
    REQUIRE(std::abs(Q(cplx{5.0}) - 1.0 / 60.0) < 1e-15);
    REQUIRE(Q.zeros().empty());

    // Simple pole at infinity in the 1/x chart: xi * Qtilde(xi) tends to a
    // finite nonzero constant (= mu for this family).
    auto Qtilde = [&](cplx xi) { return Q(1.0 / xi) / (xi * xi * xi * xi); };
    const cplx l1 = cplx{1e-4} * Qtilde(cplx{1e-4});
    const cplx l2 = cplx{1e-5} * Qtilde(cplx{1e-5});
    REQUIRE(std::abs(l1 - 1.0) < 1e-3);
    REQUIRE(std::abs(l2 - 1.0) < 1e-4);
}

TEST_CASE("puncture collisions and degree violations are rejected") {
    PuncturedSphere bad;
    bad.punctures = {SpherePoint::at(0.0), SpherePoint::at(1e-12), SpherePoint::at(1.0),
                     SpherePoint::infinity()};
    REQUIRE_THROWS_AS(bad.validate(), invalid_input);

    QuadDiff q;
    q.base = heun_base(t_flag);
    q.numerator = {cplx{1.0}, cplx{0.5}, cplx{0.25}};  // degree 2 > n_f - 3 = 0
    REQUIRE_THROWS_AS(q.validate(), invalid_input);
}

TEST_CASE("zeros are recovered for a five-puncture differential") {
    const cplx z0{0.4, 0.9};
    auto q = five_point_example(z0);
    auto zs = q.zeros();
    REQUIRE(zs.size() == 1);
    REQUIRE(std::abs(zs[0] - z0) < 1e-12);
}

TEST_CASE("basis differential matches the third-kind product and the closed form") {
    auto base = heun_base(t_flag);
    auto roles = ChartRoles::make(base, {0, 3, 1});  // y1 = 0, y2 = inf, y3 = 1
    REQUIRE(roles.moving == std::vector<int>{2});

    auto Q1 = basis_Qk(base, roles, 0);
    const cplx coef = 1.0 / (4.0 * pi * iu);
    for (cplx x : {cplx{2.3, 1.1}, cplx{-0.7, 0.4}, cplx{0.6, -1.9}}) {
        const cplx closed = coef * (1.0 - t_flag) / (x * (x - 1.0) * (x - t_flag));
        REQUIRE(std::abs(Q1(x) - closed) < 1e-12 * std::abs(closed));

        auto W12 = third_kind_W(base.punctures[0], base.punctures[3]);
        auto W3k = third_kind_W(base.punctures[1], base.punctures[2]);
        const cplx product = coef * W12(x) * W3k(x);
        REQUIRE(std::abs(Q1(x) - product) < 1e-12 * std::abs(product));
    }
}

TEST_CASE("basis differentials on five punctures form the third-kind products") {
    auto q = five_point_example();
    auto roles = ChartRoles::make(q.base, {0, 4, 1});  // y1 = 0, y2 = inf, y3 = 1
    REQUIRE(roles.moving.size() == 2);
    const cplx coef = 1.0 / (4.0 * pi * iu);
    for (size_t k = 0; k < 2; ++k) {
        auto Qk = basis_Qk(q.base, roles, k);
        auto W12 = third_kind_W(q.base.punctures[0], q.base.punctures[4]);
        auto W3k = third_kind_W(q.base.punctures[1], q.base.punctures[roles.moving[k]]);
        for (cplx x : {cplx{3.1, 0.8}, cplx{-1.4, -1.2}}) {
            const cplx product = coef * W12(x) * W3k(x);
            REQUIRE(std::abs(Qk(x) - product) < 1e-12 * std::abs(product));
        }
    }
}

TEST_CASE("position coordinate reduces to log t for the four-point chart") {
    auto base4 = heun_base(cplx{4.0});
    auto roles = ChartRoles::make(base4, {0, 3, 1});
    auto q = coordinates_q(base4, roles);
    REQUIRE(q.size() == 1);
    REQUIRE(std::abs(q[0] - std::log(4.0)) < 1e-14);

    auto basef = heun_base(t_flag);
    auto qf = coordinates_q(basef, ChartRoles::make(basef, {0, 3, 1}));
    REQUIRE(std::abs(qf[0] - std::log(t_flag)) < 1e-14);
}

TEST_CASE("position coordinates are Moebius invariant") {
    auto q = five_point_example();
    auto roles = ChartRoles::make(q.base, {0, 4, 1});
    auto before = coordinates_q(q.base, roles);

    const cplx a{1.2, 0.3}, b{-0.4, 0.1}, c{0.5, -0.2}, d{2.0, 0.4};
    PuncturedSphere moved = q.base;
    for (auto& p : moved.punctures) p = moebius(p, a, b, c, d);
    moved.validate();
    auto after = coordinates_q(moved, ChartRoles::make(moved, {0, 4, 1}));
    // q is defined modulo 2*pi*i; this configuration sits on the log cut.
    for (size_t k = 0; k < before.size(); ++k)
        REQUIRE(std::abs(align_branch(after[k], before[k]) - before[k]) < 1e-10);
}

TEST_CASE("chart positions round-trip through the puncture solve") {
    auto base = heun_base(t_flag);
    auto roles = ChartRoles::make(base, {0, 3, 1});
    auto q = coordinates_q(base, roles);
    auto rebuilt = base_from_q(base, roles, q);
    REQUIRE(std::abs(rebuilt.punctures[2].z - t_flag) < 1e-14);

    // exp(q) = t directly in this chart
    REQUIRE(std::abs(std::exp(q[0]) - t_flag) < 1e-14);

    auto five = five_point_example();
    auto roles5 = ChartRoles::make(five.base, {0, 4, 1});
    auto q5 = coordinates_q(five.base, roles5);
    q5[0] += cplx{0.05, 0.03};
    q5[1] -= cplx{0.02, 0.07};
    auto moved = base_from_q(five.base, roles5, q5);
    auto q5b = coordinates_q(moved, roles5);
    for (size_t k = 0; k < q5.size(); ++k) REQUIRE(std::abs(q5[k] - q5b[k]) < 1e-12);
}

TEST_CASE("momentum decomposition recovers the closed-form coefficient") {
    auto Q = flagship();
    auto chart = make_chart(Q, {0, 3, 1});
    REQUIRE(chart.p.size() == 1);
    const cplx expected = 4.0 * pi * iu * cplx{1.0} / (1.0 - t_flag);
    REQUIRE(std::abs(chart.p[0] - expected) < 1e-10 * std::abs(expected));
}

TEST_CASE("chart decomposition round-trips on five punctures") {
    auto five = five_point_example();
    auto roles = ChartRoles::make(five.base, {0, 4, 1});
    auto chart = make_chart(five, {0, 4, 1});
    REQUIRE(chart.p.size() == 2);

    auto rebuilt = qd_from_chart(five.base, roles, chart.q, chart.p);
    for (cplx x : {cplx{2.4, 1.7}, cplx{-2.0, 0.6}, cplx{0.5, -1.4}})
        REQUIRE(std::abs(rebuilt(x) - five(x)) < 1e-9 * std::abs(five(x)));

    // perturb chart data and round-trip the chart extraction itself
    auto q2 = chart.q;
    auto p2 = chart.p;
    q2[0] += cplx{0.04, -0.02};
    p2[1] *= cplx{1.1, 0.2};
    auto Q2 = qd_from_chart(five.base, roles, q2, p2);
    auto chart2 = make_chart(Q2, {0, 4, 1});
    for (size_t k = 0; k < 2; ++k) {
        REQUIRE(std::abs(align_branch(chart2.q[k], q2[k]) - q2[k]) < 1e-9);
        REQUIRE(std::abs(chart2.p[k] - p2[k]) < 1e-8 * std::abs(p2[k]));
    }
}

TEST_CASE("potential matches a finite-difference Schwarzian oracle") {
    auto Q = flagship();
    auto pot = potential_u(Q);

    // Oracle: S_v = L' - L^2/2 with L = Q'/(2Q) from the closed-form
    // log-derivative and L' by Richardson central differences.
    auto L = [&](cplx x) { return 0.5 * Q.log_deriv(x); };
    for (cplx x : {cplx{2.0, 1.0}, cplx{-1.5, 0.7}, cplx{0.8, 2.2}}) {
        const double h = 1e-5;
        auto dL = [&](double step) { return (L(x + step) - L(x - step)) / (2.0 * step); };
        const cplx Lp = (4.0 * dL(h / 2) - dL(h)) / 3.0;
        const cplx Sv = Lp - 0.5 * L(x) * L(x);
        const cplx u_oracle = Sv / (2.0 * Q(x)) - 1.0;
        REQUIRE(std::abs(pot.u(x) - u_oracle) < 1e-8 * (std::abs(u_oracle) + 1.0));
    }
}

TEST_CASE("four-point log-derivative of v is the half-sum of pole terms") {
    auto Q = flagship();
    for (cplx x : {cplx{2.0, 1.0}, cplx{-0.9, -0.4}}) {
        const cplx expect =
            -0.5 * (1.0 / x + 1.0 / (x - 1.0) + 1.0 / (x - t_flag));
        REQUIRE(std::abs(0.5 * Q.log_deriv(x) - expect) < 1e-12);
    }
}

TEST_CASE("potential scales homogeneously in mu") {
    auto Q1 = flagship();
    auto Q2 = heun_Q({t_flag, cplx{2.5, 1.0}});
    auto p1 = potential_u(Q1), p2 = potential_u(Q2);
    const cplx eps{2.5, 1.0};
    for (cplx x : {cplx{1.9, 0.8}, cplx{-1.2, 1.4}}) {
        REQUIRE(std::abs(p2.u_plus_1(x) - p1.u_plus_1(x) / eps) <
                1e-10 * std::abs(p1.u_plus_1(x)));
    }
}

TEST_CASE("potential derivative matches finite differences") {
    auto pot = potential_u(flagship());
    for (cplx x : {cplx{2.0, 1.0}, cplx{-1.5, 0.7}}) {
        const double h = 1e-5;
        auto d = [&](double step) { return (pot.u(x + step) - pot.u(x - step)) / (2.0 * step); };
        const cplx fd = (4.0 * d(h / 2) - d(h)) / 3.0;
        REQUIRE(std::abs(pot.ux(x) - fd) < 1e-7 * (std::abs(fd) + 1.0));
    }
}

TEST_CASE("potential is invariant under puncture relabeling") {
    auto Q = flagship();
    QuadDiff relabeled = Q;
    std::swap(relabeled.base.punctures[0], relabeled.base.punctures[2]);
    auto p1 = potential_u(Q), p2 = potential_u(relabeled);
    const cplx x{1.4, -0.9};
    REQUIRE(std::abs(p1.u(x) - p2.u(x)) < 1e-12 * (std::abs(p1.u(x)) + 1.0));
}

TEST_CASE("pair kernel closed form and chart transformation") {
    auto Q = flagship();
    const cplx mu{1.0};
    const cplx x{2.2, 0.9}, y{-1.3, 1.6};

    const cplx dx4 = std::pow(x - y, 4);
    const cplx closed = x * (x - 1.0) * (x - t_flag) * y * (y - 1.0) * (y - t_flag) / (mu * mu * dx4);
    REQUIRE(std::abs(h_kernel(Q, x, y) - closed) < 1e-12 * std::abs(closed));

    // 1/x chart: Jacobian factors cancel, h transforms as a function.
    auto Qt = [&](cplx xi) { return Q(1.0 / xi) / std::pow(xi, 4); };
    const cplx xi = 1.0 / x, eta = 1.0 / y;
    const cplx Bt = 1.0 / ((xi - eta) * (xi - eta));
    const cplx ht = Bt * Bt / (Qt(xi) * Qt(eta));
    REQUIRE(std::abs(ht - h_kernel(Q, x, y)) < 1e-10 * std::abs(ht));

    // mu-homogeneity: h scales as mu^-2.
    auto Q2 = heun_Q({t_flag, cplx{3.0, -1.0}});
    const cplx eps{3.0, -1.0};
    REQUIRE(std::abs(h_kernel(Q2, x, y) - h_kernel(Q, x, y) / (eps * eps)) <
            1e-12 * std::abs(h_kernel(Q, x, y)));
}

TEST_CASE("third-kind differentials have the advertised residues") {
    TransferOptions opts;
    auto a = SpherePoint::at(cplx{0.4, 0.2});
    auto b = SpherePoint::at(cplx{-1.1, 0.5});
    auto W = third_kind_W(a, b);

    auto around_a = ContourPath::circle(a.z, 0.3);
    auto around_b = ContourPath::circle(b.z, 0.3);
    REQUIRE(std::abs(contour_integral(W, around_a, opts) - two_pi_i) < 1e-10);
    REQUIRE(std::abs(contour_integral(W, around_b, opts) + two_pi_i) < 1e-10);

    auto W0inf = third_kind_W(SpherePoint::at(0.0), SpherePoint::infinity());
    for (cplx x : {cplx{1.3, 0.4}, cplx{-0.2, 2.0}})
        REQUIRE(std::abs(W0inf(x) - 1.0 / x) < 1e-15);
}
