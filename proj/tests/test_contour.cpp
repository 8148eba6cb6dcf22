#include <catch2/catch_amalgamated.hpp>

#include "qdm/path.hpp"
#include "qdm/poly.hpp"
#include "qdm/transfer.hpp"

using namespace qdm;

namespace {

// Independent oracle: matrix exponential by scaling-and-squaring + Taylor.
Matrix2 expm(Matrix2 A) {
    int squarings = 0;
    while (A.norm() > 0.25) {
        A = A * cplx{0.5};
        ++squarings;
    }
    Matrix2 sum = Matrix2::identity(), term = Matrix2::identity();
    for (int k = 1; k <= 24; ++k) {
        term = term * A * (1.0 / double(k));
        sum = sum + term;
    }
    for (int i = 0; i < squarings; ++i) sum = sum * sum;
    return sum;
}

TransferOptions default_opts() {
    TransferOptions o;
    o.tol = Tolerances{};
    return o;
}

const cplx t_flag{0.31, 0.27};

Matrix2 heun_coeff(cplx x, cplx t, cplx mu) {
    const cplx Q = mu / (x * (x - 1.0) * (x - t));
    return Matrix2{0.0, 1.0, -Q, 0.0};
}

}  // namespace

TEST_CASE("zero coefficient yields identity transfer") {
    auto path = ContourPath::polyline({cplx{0.0}, cplx{1.0, 2.0}, cplx{-0.5, 0.5}});
    auto T = integrate_transfer([](cplx) { return Matrix2::zero(); }, path, default_opts());
    REQUIRE(distance(T, Matrix2::identity()) < 1e-13);
}

TEST_CASE("zero-potential transfer is a shear by the displacement") {
    const cplx a{0.2, -0.3}, b{1.7, 0.4};
    auto path = ContourPath::polyline({a, cplx{1.0, -1.0}, b});
    auto T = integrate_transfer([](cplx) { return Matrix2{0.0, 1.0, 0.0, 0.0}; }, path,
                                default_opts());
    const Matrix2 expected{1.0, b - a, 0.0, 1.0};
    REQUIRE(distance(T, expected) < 1e-12);
}

TEST_CASE("constant coefficient transfer matches the matrix exponential oracle") {
    const Matrix2 C{cplx{0.3, 0.1}, cplx{1.0, -0.2}, cplx{-0.7, 0.4}, cplx{-0.3, -0.1}};
    const cplx a{-1.0, 0.5}, b{2.0, -0.25};

    SECTION("straight segment") {
        auto path = ContourPath::polyline({a, b});
        auto T = integrate_transfer([&](cplx) { return C; }, path, default_opts());
        REQUIRE(distance(T, expm(C * (b - a))) < 1e-11);
    }
    SECTION("bent polyline (path independence)") {
        auto path = ContourPath::polyline({a, cplx{0.5, 3.0}, cplx{1.0, -2.0}, b});
        auto T = integrate_transfer([&](cplx) { return C; }, path, default_opts());
        REQUIRE(distance(T, expm(C * (b - a))) < 1e-11);
    }
    SECTION("arc") {
        ContourPath path;
        path.segments.push_back(PathSegment::make_arc(cplx{0.0}, a, 2.0));
        auto T = integrate_transfer([&](cplx) { return C; }, path, default_opts());
        const cplx b2 = path.segments[0].end;
        REQUIRE(distance(T, expm(C * (b2 - a))) < 1e-11);
    }
}

TEST_CASE("trace-free coefficient keeps unit determinant") {
    auto loop = ContourPath::circle(cplx{0.5, 0.1}, 2.0);
    auto T = integrate_transfer([&](cplx x) { return heun_coeff(x, t_flag, cplx{1.0}); }, loop,
                                default_opts());
    REQUIRE(std::abs(T.det() - 1.0) < 10.0 * Tolerances{}.abs_tol);
}

TEST_CASE("transfer concatenation and reversal") {
    auto coeff = [&](cplx x) { return heun_coeff(x, t_flag, cplx{1.0}); };
    auto p1 = ContourPath::polyline({cplx{2.0, 0.5}, cplx{2.5, 1.5}});
    auto p2 = ContourPath::polyline({cplx{2.5, 1.5}, cplx{1.5, 2.0}});
    auto both = p1;
    both.append(p2);

    auto T1 = integrate_transfer(coeff, p1, default_opts());
    auto T2 = integrate_transfer(coeff, p2, default_opts());
    auto T = integrate_transfer(coeff, both, default_opts());
    REQUIRE(distance(T, T2 * T1) < 1e-11);

    auto Tb = integrate_transfer(coeff, both.reversed(), default_opts());
    REQUIRE(distance(Tb * T, Matrix2::identity()) < 1e-11);
}

TEST_CASE("contour integrals: exact residues and primitives") {
    auto circle = ContourPath::circle(cplx{0.0}, 1.0);
    auto opts = default_opts();

    REQUIRE(std::abs(contour_integral([](cplx) { return cplx{1.0}; }, circle, opts)) < 1e-12);
    REQUIRE(std::abs(contour_integral([](cplx x) { return 1.0 / x; }, circle, opts) - two_pi_i) <
            1e-11);
    REQUIRE(std::abs(contour_integral([](cplx x) { return 1.0 / (x * x); }, circle, opts)) < 1e-11);

    const cplx pole{0.3, -0.2};
    auto around = ContourPath::circle(pole, 0.4);
    REQUIRE(std::abs(contour_integral([&](cplx x) { return 3.0 / (x - pole); }, around, opts) -
                     3.0 * two_pi_i) < 1e-11);

    const cplx a{-1.0, 0.3}, b{2.0, -0.7};
    auto seg = ContourPath::polyline({a, b});
    const cplx exact = (b * b * b - a * a * a) / 3.0;
    REQUIRE(std::abs(contour_integral([](cplx x) { return x * x; }, seg, opts) - exact) < 1e-12);
}

TEST_CASE("homotopy invariance of a closed contour integral") {
    auto opts = default_opts();
    auto f = [](cplx x) { return 1.0 / x; };
    auto circle = ContourPath::circle(cplx{0.0}, 1.0);
    auto square = ContourPath::polyline(
        {cplx{1.2, -1.2}, cplx{1.2, 1.2}, cplx{-1.2, 1.2}, cplx{-1.2, -1.2}}, true);
    const cplx i1 = contour_integral(f, circle, opts);
    const cplx i2 = contour_integral(f, square, opts);
    REQUIRE(std::abs(i1 - i2) < 2.0 * opts.tol.abs_tol);
}

TEST_CASE("closed path rotation preserves the integral") {
    auto opts = default_opts();
    auto f = [](cplx x) { return 1.0 / (x - cplx{0.1, 0.1}); };
    auto circle = ContourPath::circle(cplx{0.0}, 1.0);
    auto rotated = circle.started_at(0, 0.37);
    REQUIRE(std::abs(contour_integral(f, circle, opts) - contour_integral(f, rotated, opts)) <
            1e-11);
}

TEST_CASE("integrator error drops at least 4x when the tolerance is halved") {
    const Matrix2 C{cplx{0.0, 1.1}, cplx{0.9, 0.0}, cplx{-1.3, 0.2}, cplx{0.0, -1.1}};
    const cplx a{0.0}, b{4.0, 1.0};
    auto path = ContourPath::polyline({a, b});
    const Matrix2 exact = expm(C * (b - a));

    auto run = [&](double tol) {
        TransferOptions o;
        o.tol.abs_tol = o.tol.rel_tol = tol;
        auto T = integrate_transfer([&](cplx) { return C; }, path, o);
        return distance(T, exact);
    };
    const double e1 = run(1e-3);
    const double e2 = run(5e-4);
    REQUIRE(e1 > 1e-13);  // above the roundoff floor, so the ratio is meaningful
    // Per-step error control with eps = tol^3 gives global error ~ eps^{4/5},
    // so halving tol contracts the error by 2^{12/5} ~ 5.3.
    REQUIRE(e1 / e2 >= 4.0);
}

TEST_CASE("step underflow raises a structured error") {
    TransferOptions o = default_opts();
    o.tol.min_step = 1e-2;  // cannot resolve the pole passage this coarsely
    auto path = ContourPath::polyline({cplx{-1.0, 1e-7}, cplx{1.0, 1e-7}});
    REQUIRE_THROWS_AS(
        contour_integral([](cplx x) { return 1.0 / (x * x * x * x); }, path, o),
        step_underflow_error);
}

TEST_CASE("clearance violations raise a structured error") {
    TransferOptions o = default_opts();
    o.tol.singularity_clearance = 0.5;
    o.clearance_points = {cplx{0.3, 0.0}};
    auto path = ContourPath::polyline({cplx{0.0}, cplx{1.0}});
    REQUIRE_THROWS_AS(contour_integral([](cplx) { return cplx{1.0}; }, path, o), clearance_error);
}

TEST_CASE("sqrt continuation around a single branch point flips the sheet") {
    auto opts = default_opts();
    auto f = [](cplx x) { return x; };
    auto ld = [](cplx x) { return 1.0 / x; };
    auto circle = ContourPath::circle(cplx{0.0}, 1.0, true, 0.3);
    auto r = sqrt_continuation(f, ld, circle, 1, opts);
    REQUIRE(r.final_sign == -1);
    REQUIRE(std::abs(r.w_end + r.samples.front().w) < 1e-10);
}

TEST_CASE("sqrt continuation around two branch points restores the sheet") {
    auto opts = default_opts();
    auto f = [](cplx x) { return x * (x - 1.0); };
    auto ld = [](cplx x) { return 1.0 / x + 1.0 / (x - 1.0); };
    auto circle = ContourPath::circle(cplx{0.5}, 2.0, true, 1.0);
    auto r = sqrt_continuation(f, ld, circle, 1, opts);
    REQUIRE(r.final_sign == 1);
    REQUIRE(std::abs(r.w_end - r.samples.front().w) < 1e-10);
}

TEST_CASE("sqrt continuation samples satisfy w^2 = f and track the principal oracle") {
    auto opts = default_opts();
    const cplx t{0.31, 0.27};
    auto f = [&](cplx x) { return x * (x - 1.0) * (x - t); };
    auto ld = [&](cplx x) { return 1.0 / x + 1.0 / (x - 1.0) + 1.0 / (x - t); };
    auto path = ContourPath::polyline({cplx{2.0, 0.0}, cplx{2.0, 3.0}, cplx{-1.0, 3.0}});
    auto r = sqrt_continuation(f, ld, path, 1, opts);

    // No branch point is enclosed or approached: stepwise principal-ratio
    // continuation over the recorded samples is an independent oracle.
    cplx w = std::sqrt(f(path.start_point()));
    REQUIRE(std::abs(r.samples.front().w - w) < 1e-12 * std::abs(w));
    for (size_t i = 1; i < r.samples.size(); ++i) {
        w *= std::sqrt(f(r.samples[i].x) / f(r.samples[i - 1].x));
        REQUIRE(std::abs(r.samples[i].w - w) < 1e-9 * std::abs(w));
    }
    for (const auto& s : r.samples)
        REQUIRE(std::abs(s.w * s.w - f(s.x)) <= 1e-10 * std::abs(f(s.x)));
    // final_sign reports the determination relative to the pointwise principal
    // root at the endpoint; the oracle must agree on it.
    const cplx principal_end = std::sqrt(f(path.end_point()));
    const int oracle_sign = std::abs(w - principal_end) <= std::abs(w + principal_end) ? 1 : -1;
    REQUIRE(r.final_sign == oracle_sign);
}

TEST_CASE("polynomial root solver round-trips a seeded degree-8 polynomial") {
    std::vector<cplx> roots = {cplx{1.0, 0.0},  cplx{-2.0, 0.5}, cplx{0.3, -1.7}, cplx{2.5, 2.0},
                               cplx{-1.1, -.9}, cplx{0.0, 2.2},  cplx{3.1, -0.4}, cplx{-2.8, 1.9}};
    auto p = poly_from_roots(roots, cplx{0.7, 0.2});
    auto found = polynomial_roots(p);
    REQUIRE(found.size() == roots.size());
    std::sort(roots.begin(), roots.end(), [](cplx u, cplx v) {
        if (u.real() != v.real()) return u.real() < v.real();
        return u.imag() < v.imag();
    });
    for (size_t i = 0; i < roots.size(); ++i)
        REQUIRE(std::abs(found[i] - roots[i]) < 1e-10 * std::abs(roots[i]));
}

TEST_CASE("polynomial root solver handles simple fixed cases and rejects degeneracies") {
    auto r = polynomial_roots(Poly{cplx{1.0}, cplx{0.0}, cplx{1.0}});  // x^2 + 1
    REQUIRE(r.size() == 2);
    REQUIRE(std::abs(r[0] + iu) < 1e-12);
    REQUIRE(std::abs(r[1] - iu) < 1e-12);

    REQUIRE_THROWS_AS(polynomial_roots(Poly{cplx{0.0}, cplx{0.0}, cplx{1.0}}),  // x^2
                      numeric_error);
    Poly too_big(66, cplx{0.0});
    too_big[0] = 1.0;
    too_big.back() = 1.0;
    REQUIRE_THROWS_AS(polynomial_roots(too_big), invalid_input);
}

TEST_CASE("segment and arc point distances use exact formulas") {
    auto seg = PathSegment::make_line(cplx{0.0}, cplx{1.0});
    REQUIRE(seg.distance_to(cplx{0.5, 0.3}) == Catch::Approx(0.3));
    REQUIRE(seg.distance_to(cplx{-0.4, 0.3}) == Catch::Approx(0.5));

    auto arc = PathSegment::make_arc(cplx{0.0}, cplx{1.0}, pi);  // upper half circle
    REQUIRE(arc.distance_to(cplx{0.0, 2.0}) == Catch::Approx(1.0));
    REQUIRE(arc.distance_to(cplx{-2.0, 0.0}) == Catch::Approx(1.0));
    REQUIRE(arc.distance_to(cplx{0.0, -2.0}) == Catch::Approx(std::sqrt(5.0)));

    ContourPath path;
    path.segments = {seg, PathSegment::make_line(cplx{1.0}, cplx{1.0, 1.0})};
    REQUIRE(path.min_distance({cplx{2.0, 0.5}, cplx{0.5, -2.0}}) == Catch::Approx(1.0));
}

TEST_CASE("winding numbers") {
    auto circle = ContourPath::circle(cplx{0.0}, 1.0);
    REQUIRE(winding_number(circle, cplx{0.1, 0.2}) == 1);
    REQUIRE(winding_number(circle.reversed(), cplx{0.1, 0.2}) == -1);
    REQUIRE(winding_number(circle, cplx{2.0, 0.0}) == 0);
    auto square = ContourPath::polyline(
        {cplx{1.0, -1.0}, cplx{1.0, 1.0}, cplx{-1.0, 1.0}, cplx{-1.0, -1.0}}, true);
    REQUIRE(winding_number(square, cplx{0.0}) == 1);
}

TEST_CASE("path crossings of two overlapping circles") {
    auto c1 = ContourPath::circle(cplx{0.0}, 1.0);
    auto c2 = ContourPath::circle(cplx{1.0}, 1.0);
    auto xs = path_crossings(c1, c2);
    REQUIRE(xs.size() == 2);
    int sum = 0;
    for (const auto& c : xs) {
        REQUIRE(std::abs(std::abs(c.point - cplx{0.0}) - 1.0) < 1e-9);
        REQUIRE(std::abs(std::abs(c.point - cplx{1.0}) - 1.0) < 1e-9);
        sum += c.sign;
    }
    REQUIRE(sum == 0);  // closed curves in the plane: signed crossings cancel

    auto sx = path_crossings(c2, c1);
    REQUIRE(sx.size() == 2);
    REQUIRE(sx[0].sign + sx[1].sign == 0);
    REQUIRE(sx[0].sign * xs[0].sign != 0);
}

TEST_CASE("surrounding contour encloses targets and avoids others") {
    std::vector<cplx> in = {cplx{0.0}, cplx{0.31, 0.27}};
    std::vector<cplx> out = {cplx{1.0}, cplx{-1.5, 0.2}};
    auto c = surrounding_contour(in, out);
    c.validate();
    for (cplx p : in) REQUIRE(winding_number(c, p) == 1);
    for (cplx p : out) REQUIRE(winding_number(c, p) == 0);
    REQUIRE(c.min_distance(out) > 0.0);
    REQUIRE(c.min_distance(in) > 0.0);
}

TEST_CASE("routing detours around clearance disks") {
    std::vector<Obstacle> obs = {{cplx{0.5, 0.0}, 0.25}};
    auto pts = route_avoiding(cplx{0.0}, cplx{1.0}, obs);
    REQUIRE(pts.size() >= 3);
    auto path = ContourPath::polyline(pts);
    REQUIRE(path.min_distance({obs[0].center}) >= 0.25 * (1.0 - 1e-9));
    REQUIRE(std::abs(path.start_point() - cplx{0.0}) < 1e-15);
    REQUIRE(std::abs(path.end_point() - cplx{1.0}) < 1e-15);
}
