"""Smooth cutoff profiles and the radial-flow quadrature they induce.

Everything here is built from the non-analytic kernel exp(-1/x), so every
plateau is reached exactly (not just to rounding) and every junction is
infinitely flat.  The flat plateaus are load-bearing: maps constructed
downstream are *exactly* the identity off their declared supports, and the
radial contraction inside an atomic domain is scale-invariant wherever the
needle cutoff sits on its plateau.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "psi_e",
    "smooth_step",
    "plateau_bump",
    "flat_bump",
    "flat_bump_sharp",
    "RadialFlowTable",
]


def psi_e(x):
    """exp(-1/x) for x > 0, exactly 0 otherwise.  Vectorized."""
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    pos = x > 0.0
    with np.errstate(over="ignore", divide="ignore"):
        out[pos] = np.exp(-1.0 / x[pos])
    if out.ndim == 0:
        return float(out)
    return out


def smooth_step(u):
    """Monotone C^inf step: exactly 0 for u <= 0, exactly 1 for u >= 1."""
    u = np.asarray(u, dtype=float)
    a = psi_e(u)
    b = psi_e(1.0 - u)
    with np.errstate(invalid="ignore"):
        out = np.where(a + b > 0.0, a / np.where(a + b > 0.0, a + b, 1.0), 0.0)
    # u >= 1 forces b == 0, a > 0 -> 1 exactly; u <= 0 symmetric.
    if out.ndim == 0:
        return float(out)
    return out


def plateau_bump(x):
    """Non-increasing C^inf profile on [0, 1]: 1 on [0, 1/4], 0 on [3/4, 1].

    Used as the angular-interpolation profile of the planar rotation
    actuators; the two plateaus make the inner quarter-disc an exact rigid
    rotation and the boundary an exact fixed circle.
    """
    x = np.asarray(x, dtype=float)
    out = 1.0 - smooth_step((x - 0.25) * 2.0)
    if np.ndim(x) == 0:
        return float(out)
    return out


def flat_bump(x):
    """exp(1 - 1/(1-x^2)) for |x| < 1, exactly 0 outside.  Peak value 1 at 0."""
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    inside = np.abs(x) < 1.0
    with np.errstate(over="ignore", divide="ignore", under="ignore"):
        xi = x[inside]
        out[inside] = np.exp(1.0 - 1.0 / (1.0 - xi * xi))
    if out.ndim == 0:
        return float(out)
    return out


def flat_bump_sharp(x):
    """Alternative bump (the square of flat_bump): same support and plateau
    structure, different shape.  Exists so conjugacy-class independence from
    the profile choice can be exercised with two genuinely distinct fields."""
    b = flat_bump(x)
    return b * b


class RadialFlowTable:
    """Quadrature table for the scalar radial flow ds/dt = -b(s) * s.

    In the coordinate Phi(s) = integral ds / (s b(s)) the flow is a unit-speed
    translation, so the time-T map is Phi^{-1}(Phi(s) - T) in closed form.
    Phi splits as log(s) + Omega(s) with Omega smooth at 0, which keeps the
    table accurate down to s = 0.

    Beyond ``s_dead`` the profile b underflows so hard that the flow moves
    points by less than 1e-300; the maps are the identity there.
    """

    def __init__(self, profile=flat_bump, n_head=1 << 16, s_knee=0.90, n_tail=1 << 12):
        self.profile = profile
        # b must not overflow 1/b inside the table range.
        self.s_dead = self._dead_radius(profile)
        head = np.linspace(0.0, s_knee, n_head + 1)
        tail = 1.0 - np.geomspace(1.0 - s_knee, 1.0 - self.s_dead, n_tail + 1)
        s = np.concatenate([head, tail[1:]])
        self._s = s
        self._omega = self._cumulative_omega(s)
        with np.errstate(divide="ignore"):
            self._phi = np.where(s > 0.0, np.log(np.where(s > 0, s, 1.0)), -np.inf) + self._omega
        # first strictly-positive node, for the pure-log inversion regime
        self._s1 = s[1]
        self._phi1 = self._phi[1]

    @staticmethod
    def _dead_radius(profile):
        # largest s with profile(s) >= 1e-280, found by bisection
        lo, hi = 0.0, 1.0 - 1e-12
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            if profile(mid) >= 1e-280:
                lo = mid
            else:
                hi = mid
        return lo

    def _cumulative_omega(self, s):
        b = self.profile(s)
        w = np.zeros_like(s)
        pos = s > 0.0
        w[pos] = (1.0 / b[pos] - 1.0) / s[pos]
        # trapezoid accumulation; node spacing is dense enough that the
        # interpolation error, not the quadrature error, dominates
        ds = np.diff(s)
        omega = np.concatenate([[0.0], np.cumsum(0.5 * (w[1:] + w[:-1]) * ds)])
        return omega

    def phi(self, s):
        s = np.asarray(s, dtype=float)
        omega = np.interp(s, self._s, self._omega)
        with np.errstate(divide="ignore"):
            return np.where(s > 0.0, np.log(np.where(s > 0.0, s, 1.0)), -np.inf) + omega

    def phi_inv(self, y):
        y = np.asarray(y, dtype=float)
        out = np.interp(y, self._phi, self._s)
        # below the first node Omega is negligible: s = exp(y)
        small = y < self._phi1
        out = np.where(small, np.exp(np.minimum(y, self._phi1)), out)
        return out

    def time_map(self, s, t):
        """Image of radial fraction(s) ``s`` under the time-``t`` flow.

        ``t`` may be an array broadcast against ``s``; positive t contracts.
        """
        s = np.asarray(s, dtype=float)
        t = np.broadcast_to(np.asarray(t, dtype=float), s.shape)
        out = s.copy()
        # flow times below the table's round-trip noise produce shifts below
        # the floating floor; return the input exactly there
        live = (s > 0.0) & (s < self.s_dead) & (np.abs(t) > 1e-30)
        if np.any(live):
            out[live] = self.phi_inv(self.phi(s[live]) - t[live])
        return out

    def conjugacy_map(self, other, ratio, s):
        """The homeomorphism c of radial fractions with c . g^T = g~^(ratio*T) . c,
        where g is this profile's flow and g~ is ``other``'s.

        In Phi-coordinates c is multiplication by ``ratio``; it is exact for
        every slice time T simultaneously.
        """
        s = np.asarray(s, dtype=float)
        if ratio == 1.0 and other is self:
            return s.copy()
        out = s.copy()
        live = (s > 0.0) & (s < min(self.s_dead, other.s_dead))
        if np.any(live):
            out[live] = other.phi_inv(ratio * self.phi(s[live]))
        return out
