#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <vector>

#include "qdm/core.hpp"

namespace qdm {

// Exactly parametrized path piece; s runs over [0, 1].  Arcs are centered
// circular arcs with signed sweep (radians, positive = counterclockwise);
// `end` is stored redundantly and must match the parametrization.
struct PathSegment {
    enum class Kind { line, arc };

    Kind kind = Kind::line;
    cplx start{0.0}, end{0.0};
    cplx center{0.0};   // arc only
    double sweep = 0.0; // arc only

    static PathSegment make_line(cplx a, cplx b) { return {Kind::line, a, b, 0.0, 0.0}; }

    static PathSegment make_arc(cplx center, cplx start, double sweep) {
        PathSegment seg;
        seg.kind = Kind::arc;
        seg.center = center;
        seg.start = start;
        seg.sweep = sweep;
        const cplx r = start - center;
        seg.end = center + r * std::polar(1.0, sweep);
        return seg;
    }

    double radius() const { return std::abs(start - center); }

    cplx at(double s) const {
        if (kind == Kind::line) return start + s * (end - start);
        return center + (start - center) * std::polar(1.0, s * sweep);
    }

    cplx velocity(double s) const {  // d at / d s
        if (kind == Kind::line) return end - start;
        return iu * sweep * (at(s) - center);
    }

    double length() const {
        if (kind == Kind::line) return std::abs(end - start);
        return std::abs(sweep) * radius();
    }

    PathSegment reversed() const {
        if (kind == Kind::line) return make_line(end, start);
        return make_arc(center, end, -sweep);
    }

    std::pair<PathSegment, PathSegment> split(double s) const {
        const cplx mid = at(s);
        if (kind == Kind::line)
            return {make_line(start, mid), make_line(mid, end)};
        return {make_arc(center, start, s * sweep), make_arc(center, mid, (1.0 - s) * sweep)};
    }

    double distance_to(cplx p) const {
        if (kind == Kind::line) {
            const cplx d = end - start;
            const double len2 = std::norm(d);
            if (len2 == 0.0) return std::abs(p - start);
            double u = ((p - start) / d).real() * std::abs(d) * std::abs(d) / len2;
            u = (std::conj(d) * (p - start)).real() / len2;
            u = std::clamp(u, 0.0, 1.0);
            return std::abs(p - (start + u * d));
        }
        const double r = radius();
        const cplx rel = p - center;
        const double dc = std::abs(rel);
        if (std::abs(sweep) >= 2.0 * pi - 1e-12) return std::abs(dc - r);
        if (dc == 0.0) return r;
        const double theta0 = std::arg(start - center);
        double phi = std::arg(rel) - theta0;
        // Reduce to sweep-oriented offset in [0, 2pi).
        const double dir = sweep >= 0.0 ? 1.0 : -1.0;
        phi *= dir;
        phi = std::fmod(phi, 2.0 * pi);
        if (phi < 0.0) phi += 2.0 * pi;
        if (phi <= std::abs(sweep)) return std::abs(dc - r);
        return std::min(std::abs(p - start), std::abs(p - end));
    }
};

struct ContourPath {
    std::vector<PathSegment> segments;
    bool closed = false;

    void validate() const {
        if (segments.empty()) throw invalid_input("ContourPath: empty path");
        const double scale = std::max(1e-30, total_length());
        for (size_t i = 0; i + 1 < segments.size(); ++i)
            if (std::abs(segments[i].end - segments[i + 1].start) > 1e-9 * scale)
                throw invalid_input("ContourPath: segment endpoints do not chain");
        if (closed && std::abs(segments.back().end - segments.front().start) > 1e-9 * scale)
            throw invalid_input("ContourPath: closed path does not return to start");
    }

    cplx start_point() const { return segments.front().start; }
    cplx end_point() const { return segments.back().end; }

    double total_length() const {
        double L = 0.0;
        for (const auto& s : segments) L += s.length();
        return L;
    }

    ContourPath reversed() const {
        ContourPath r;
        r.closed = closed;
        for (auto it = segments.rbegin(); it != segments.rend(); ++it)
            r.segments.push_back(it->reversed());
        return r;
    }

    ContourPath& append(const ContourPath& other) {
        segments.insert(segments.end(), other.segments.begin(), other.segments.end());
        return *this;
    }

    // Rotate a closed path so it starts at segment `i`, local parameter `s`.
    ContourPath started_at(size_t i, double s) const {
        if (!closed) throw invalid_input("started_at: path must be closed");
        ContourPath r;
        r.closed = true;
        auto [head, tail] = segments[i].split(s);
        const bool degenerate_head = head.length() < 1e-14 * std::max(1.0, total_length());
        const bool degenerate_tail = tail.length() < 1e-14 * std::max(1.0, total_length());
        if (!degenerate_tail) r.segments.push_back(tail);
        for (size_t k = 1; k < segments.size(); ++k)
            r.segments.push_back(segments[(i + k) % segments.size()]);
        if (!degenerate_head) r.segments.push_back(head);
        return r;
    }

    double min_distance(const std::vector<cplx>& points) const {
        double d = std::numeric_limits<double>::infinity();
        for (const auto& seg : segments)
            for (cplx p : points) d = std::min(d, seg.distance_to(p));
        return d;
    }

    static ContourPath circle(cplx center, double radius, bool ccw = true, double start_angle = 0.0) {
        ContourPath p;
        p.closed = true;
        const cplx s = center + std::polar(radius, start_angle);
        p.segments.push_back(PathSegment::make_arc(center, s, ccw ? 2.0 * pi : -2.0 * pi));
        return p;
    }

    static ContourPath polyline(const std::vector<cplx>& pts, bool closed = false) {
        if (pts.size() < 2) throw invalid_input("polyline: need at least two points");
        ContourPath p;
        p.closed = closed;
        for (size_t i = 0; i + 1 < pts.size(); ++i)
            p.segments.push_back(PathSegment::make_line(pts[i], pts[i + 1]));
        if (closed) p.segments.push_back(PathSegment::make_line(pts.back(), pts.front()));
        return p;
    }
};

namespace detail {

inline void winding_accumulate(const PathSegment& seg, cplx p, double s0, double s1, double& acc,
                               int depth = 0) {
    const cplx a = seg.at(s0) - p, b = seg.at(s1) - p;
    if (std::abs(a) < 1e-300 || std::abs(b) < 1e-300)
        throw numeric_error("winding_number: point lies on the path");
    // A piece shorter than its distance to p cannot wrap around it, so the
    // chord argument carries no 2pi ambiguity.
    const double piece_len = seg.length() * (s1 - s0);
    if (piece_len <= 0.9 * std::min(std::abs(a), std::abs(b)) || depth > 48) {
        if (depth > 48) throw numeric_error("winding_number: point too close to the path");
        acc += std::arg(b / a);
        return;
    }
    const double sm = 0.5 * (s0 + s1);
    winding_accumulate(seg, p, s0, sm, acc, depth + 1);
    winding_accumulate(seg, p, sm, s1, acc, depth + 1);
}

}  // namespace detail

inline int winding_number(const ContourPath& path, cplx p) {
    double acc = 0.0;
    for (const auto& seg : path.segments) detail::winding_accumulate(seg, p, 0.0, 1.0, acc);
    const double w = acc / (2.0 * pi);
    const double r = std::round(w);
    if (std::abs(w - r) > 1e-6) throw numeric_error("winding_number: non-integer winding (open path?)");
    return static_cast<int>(r);
}

// ---------------------------------------------------------------------------
// Geometric crossings between two paths.

struct PathCrossing {
    cplx point;
    size_t seg_a, seg_b;
    double s_a, s_b;   // local parameters within the segments
    cplx tangent_a, tangent_b;
    int sign;          // sign of cross(tangent_a, tangent_b)
};

namespace detail {

inline void flatten_segment(const PathSegment& seg, double max_sag, std::vector<double>& params) {
    params.push_back(0.0);
    if (seg.kind == PathSegment::Kind::arc) {
        const double r = seg.radius();
        // sagitta of a chord spanning angle a is r(1-cos(a/2))
        double max_angle = 2.0 * std::acos(std::clamp(1.0 - max_sag / std::max(r, 1e-30), -1.0, 1.0));
        max_angle = std::max(max_angle, 1e-3);
        const int n = std::max(4, static_cast<int>(std::ceil(std::abs(seg.sweep) / max_angle)));
        for (int k = 1; k < n; ++k) params.push_back(double(k) / n);
    }
    params.push_back(1.0);
}

inline std::optional<std::pair<double, double>> segment_intersect(cplx a0, cplx a1, cplx b0, cplx b1) {
    const cplx da = a1 - a0, db = b1 - b0;
    const double denom = (std::conj(da) * db).imag();  // cross(da, db)
    if (std::abs(denom) < 1e-14 * std::abs(da) * std::abs(db)) return std::nullopt;
    const cplx d0 = b0 - a0;
    const double u = (std::conj(d0) * db).imag() / denom;
    const double v = (std::conj(d0) * da).imag() / denom;
    if (u < -1e-12 || u > 1.0 + 1e-12 || v < -1e-12 || v > 1.0 + 1e-12) return std::nullopt;
    return std::make_pair(std::clamp(u, 0.0, 1.0), std::clamp(v, 0.0, 1.0));
}

}  // namespace detail

// All transversal crossings between two paths: bisection on flattened
// polylines, then two Newton steps on the exact parametrizations.
// Near-tangential crossings are a hard error.
inline std::vector<PathCrossing> path_crossings(const ContourPath& a, const ContourPath& b,
                                                double flatten_scale = 0.0) {
    const double scale = std::max(a.total_length(), b.total_length());
    const double sag = flatten_scale > 0.0 ? flatten_scale : 1e-4 * scale;

    std::vector<PathCrossing> out;
    for (size_t i = 0; i < a.segments.size(); ++i) {
        std::vector<double> pa;
        detail::flatten_segment(a.segments[i], sag, pa);
        for (size_t j = 0; j < b.segments.size(); ++j) {
            std::vector<double> pb;
            detail::flatten_segment(b.segments[j], sag, pb);
            for (size_t ii = 0; ii + 1 < pa.size(); ++ii) {
                const cplx a0 = a.segments[i].at(pa[ii]), a1 = a.segments[i].at(pa[ii + 1]);
                for (size_t jj = 0; jj + 1 < pb.size(); ++jj) {
                    const cplx b0 = b.segments[j].at(pb[jj]), b1 = b.segments[j].at(pb[jj + 1]);
                    auto hit = detail::segment_intersect(a0, a1, b0, b1);
                    if (!hit) continue;
                    double sa = pa[ii] + hit->first * (pa[ii + 1] - pa[ii]);
                    double sb = pb[jj] + hit->second * (pb[jj + 1] - pb[jj]);
                    for (int newton = 0; newton < 2; ++newton) {
                        const cplx f = a.segments[i].at(sa) - b.segments[j].at(sb);
                        const cplx ta = a.segments[i].velocity(sa);
                        const cplx tb = b.segments[j].velocity(sb);
                        const double det = -(std::conj(ta) * tb).imag();
                        if (std::abs(det) < 1e-14 * std::abs(ta) * std::abs(tb))
                            throw numeric_error("path_crossings: near-tangential intersection");
                        // Solve [ta, -tb] (dsa, dsb)^T = -f  (2x2 real system).
                        const double dsa = -(f.real() * (-tb.imag()) - (-tb.real()) * f.imag()) / det;
                        const double dsb = -(ta.real() * f.imag() - f.real() * ta.imag()) / det;
                        sa += dsa;
                        sb += dsb;
                    }
                    sa = std::clamp(sa, 0.0, 1.0);
                    sb = std::clamp(sb, 0.0, 1.0);
                    PathCrossing c;
                    c.point = 0.5 * (a.segments[i].at(sa) + b.segments[j].at(sb));
                    c.seg_a = i;
                    c.seg_b = j;
                    c.s_a = sa;
                    c.s_b = sb;
                    c.tangent_a = a.segments[i].velocity(sa);
                    c.tangent_b = b.segments[j].velocity(sb);
                    const double cross = (std::conj(c.tangent_a) * c.tangent_b).imag();
                    if (std::abs(cross) < 1e-9 * std::abs(c.tangent_a) * std::abs(c.tangent_b))
                        throw numeric_error("path_crossings: tangential intersection");
                    c.sign = cross > 0.0 ? 1 : -1;
                    bool dup = false;
                    for (const auto& prev : out)
                        if (std::abs(prev.point - c.point) < 1e-7 * scale) dup = true;
                    if (!dup) out.push_back(c);
                }
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Rounded convex hull ("stadium") contour around a point set.

namespace detail {

inline std::vector<cplx> convex_hull(std::vector<cplx> pts) {
    std::sort(pts.begin(), pts.end(), [](cplx u, cplx v) {
        if (u.real() != v.real()) return u.real() < v.real();
        return u.imag() < v.imag();
    });
    pts.erase(std::unique(pts.begin(), pts.end(),
                          [](cplx u, cplx v) { return std::abs(u - v) < 1e-14; }),
              pts.end());
    if (pts.size() <= 2) return pts;
    auto cross = [](cplx o, cplx u, cplx v) {
        return (std::conj(u - o) * (v - o)).imag();
    };
    std::vector<cplx> hull(2 * pts.size());
    size_t k = 0;
    for (size_t i = 0; i < pts.size(); ++i) {  // lower
        while (k >= 2 && cross(hull[k - 2], hull[k - 1], pts[i]) <= 1e-14) --k;
        hull[k++] = pts[i];
    }
    for (size_t i = pts.size() - 1, t = k + 1; i-- > 0;) {  // upper
        while (k >= t && cross(hull[k - 2], hull[k - 1], pts[i]) <= 1e-14) --k;
        hull[k++] = pts[i];
    }
    hull.resize(k - 1);
    return hull;  // counterclockwise, no repeated endpoint
}

inline double dist_to_hull(const std::vector<cplx>& hull, cplx p) {
    if (hull.size() == 1) return std::abs(p - hull[0]);
    double d = std::numeric_limits<double>::infinity();
    bool inside = hull.size() >= 3;
    for (size_t i = 0; i < hull.size(); ++i) {
        const cplx a = hull[i], b = hull[(i + 1) % hull.size()];
        if (hull.size() == 2 && i == 1) break;
        d = std::min(d, PathSegment::make_line(a, b).distance_to(p));
        if (inside && (std::conj(b - a) * (p - a)).imag() < 0.0) inside = false;
    }
    return inside ? 0.0 : d;
}

}  // namespace detail

// Counterclockwise contour at uniform offset `margin` around the convex hull
// of `enclose`.  If margin <= 0 it is chosen as half the clearance to the
// nearest `avoid` point (capped by `margin_cap`).  Throws if any avoid point
// would end up enclosed.
inline ContourPath surrounding_contour(const std::vector<cplx>& enclose,
                                       const std::vector<cplx>& avoid, double margin = 0.0,
                                       double margin_cap = 0.0) {
    if (enclose.empty()) throw invalid_input("surrounding_contour: nothing to enclose");
    const auto hull = detail::convex_hull(enclose);

    double limit = std::numeric_limits<double>::infinity();
    for (cplx p : avoid) limit = std::min(limit, detail::dist_to_hull(hull, p));
    if (limit <= 0.0) throw numeric_error("surrounding_contour: avoid point inside enclosure");
    if (margin <= 0.0) {
        margin = 0.5 * limit;
        if (margin_cap > 0.0) margin = std::min(margin, margin_cap);
        if (!std::isfinite(margin)) {
            double diam = 1.0;
            for (cplx u : hull)
                for (cplx v : hull) diam = std::max(diam, std::abs(u - v));
            margin = margin_cap > 0.0 ? margin_cap : 0.5 * diam;
        }
    }
    if (margin >= limit) throw numeric_error("surrounding_contour: margin reaches an avoid point");
    if (margin <= 0.0 || !std::isfinite(margin))
        throw numeric_error("surrounding_contour: degenerate margin");

    ContourPath path;
    path.closed = true;
    if (hull.size() == 1) return ContourPath::circle(hull[0], margin);

    if (hull.size() == 2) {  // stadium
        const cplx a = hull[0], b = hull[1];
        const cplx dir = (b - a) / std::abs(b - a);
        const cplx n = dir * cplx{0.0, -1.0};
        path.segments.push_back(PathSegment::make_line(a + margin * n, b + margin * n));
        path.segments.push_back(PathSegment::make_arc(b, b + margin * n, pi));
        path.segments.push_back(PathSegment::make_line(b - margin * n, a - margin * n));
        path.segments.push_back(PathSegment::make_arc(a, a - margin * n, pi));
        return path;
    }

    const size_t m = hull.size();
    for (size_t i = 0; i < m; ++i) {
        const cplx v0 = hull[i], v1 = hull[(i + 1) % m], v2 = hull[(i + 2) % m];
        const cplx d01 = (v1 - v0) / std::abs(v1 - v0);
        const cplx d12 = (v2 - v1) / std::abs(v2 - v1);
        const cplx n01 = d01 * cplx{0.0, -1.0};  // outward normal of a ccw polygon
        const cplx n12 = d12 * cplx{0.0, -1.0};
        path.segments.push_back(PathSegment::make_line(v0 + margin * n01, v1 + margin * n01));
        double turn = std::arg(n12 / n01);
        if (turn < 0.0) turn += 2.0 * pi;
        path.segments.push_back(PathSegment::make_arc(v1, v1 + margin * n01, turn));
    }
    return path;
}

// ---------------------------------------------------------------------------
// Obstacle-avoiding polyline routing (rubber-band heuristic over clearance
// disks; adequate for the sparse configurations handled here).

struct Obstacle {
    cplx center;
    double radius;
};

namespace detail {

inline std::vector<cplx> route_rec(cplx a, cplx b, const std::vector<Obstacle>& obstacles,
                                   int depth) {
    if (depth > 24) throw numeric_error("route_avoiding: routing recursion exceeded");
    const PathSegment seg = PathSegment::make_line(a, b);
    const Obstacle* worst = nullptr;
    double worst_gap = 0.0;
    for (const auto& ob : obstacles) {
        const double gap = seg.distance_to(ob.center) - ob.radius;
        if (gap < -1e-12 * std::max(1.0, ob.radius) && (!worst || gap < worst_gap)) {
            worst = &ob;
            worst_gap = gap;
        }
    }
    if (!worst) return {a, b};
    const cplx d = b - a;
    const double len2 = std::norm(d);
    double u = len2 > 0.0 ? (std::conj(d) * (worst->center - a)).real() / len2 : 0.0;
    u = std::clamp(u, 0.0, 1.0);
    const cplx foot = a + u * d;
    cplx dir = foot - worst->center;
    if (std::abs(dir) < 1e-12 * worst->radius) dir = d * iu;  // segment hits center: step sideways
    dir /= std::abs(dir);
    const cplx detour = worst->center + dir * (1.35 * worst->radius);
    auto left = route_rec(a, detour, obstacles, depth + 1);
    auto right = route_rec(detour, b, obstacles, depth + 1);
    left.insert(left.end(), right.begin() + 1, right.end());
    return left;
}

}  // namespace detail

inline std::vector<cplx> route_avoiding(cplx from, cplx to, const std::vector<Obstacle>& obstacles) {
    for (const auto& ob : obstacles) {
        if (std::abs(from - ob.center) < ob.radius * (1.0 - 1e-9) ||
            std::abs(to - ob.center) < ob.radius * (1.0 - 1e-9))
            throw numeric_error("route_avoiding: endpoint inside an obstacle");
    }
    return detail::route_rec(from, to, obstacles, 0);
}

}  // namespace qdm
