#pragma once

#include "qdm/core.hpp"

namespace qdm {

// Arithmetic-geometric mean with the optimal square-root branch at each step
// (|a_{n+1} - b_{n+1}| <= |a_{n+1} + b_{n+1}|), valid for complex arguments
// off the negative-ratio cut.
inline cplx agm(cplx a, cplx b) {
    if (std::abs(a) == 0.0 || std::abs(b) == 0.0) throw invalid_input("agm: zero argument");
    for (int it = 0; it < 80; ++it) {
        if (std::abs(a - b) <= 1e-15 * std::abs(a)) return 0.5 * (a + b);
        const cplx am = 0.5 * (a + b);
        cplx gm = std::sqrt(a * b);
        if (std::abs(am - gm) > std::abs(am + gm)) gm = -gm;
        a = am;
        b = gm;
    }
    throw numeric_error("agm: no convergence");
}

// Complete elliptic integral K as a function of the modulus k (not m = k^2).
inline cplx elliptic_K(cplx k) {
    const cplx kp = std::sqrt(1.0 - k * k);
    return pi / (2.0 * agm(cplx{1.0}, kp));
}

// Reference periods for the curve w^2 = x(x-1)(x-t):
//   A0 = loop around {0, t} of dx/w = 4 K(sqrt(t))        (up to sign)
//   B0 = loop around {t, 1} of dx/w = 4 i K(sqrt(1-t))    (up to sign)
// with Im(B0/A0) > 0 on the principal domain.
struct EllipticOracle {
    cplx A0, B0;
};

inline EllipticOracle elliptic_oracle(cplx t) {
    if (std::abs(t) == 0.0 || std::abs(t - 1.0) == 0.0)
        throw invalid_input("elliptic_oracle: t must avoid {0, 1}");
    return {4.0 * elliptic_K(std::sqrt(t)), 4.0 * iu * elliptic_K(std::sqrt(1.0 - t))};
}

}  // namespace qdm
