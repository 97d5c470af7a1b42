"""The planar reduction: binary codes into compactly supported diffeomorphisms.

A depth-N code drives a family of 4N disjoint closed discs accumulating at two
points a, b, each disc carrying a rotation actuator whose angle interpolates
to zero at the disc boundary through a flat profile.  Rotation fractions are
exact rationals, so the minimal period of the rigidly rotated inner
quarter-disc is the fraction's denominator, and the region-resolved period
spectrum is an exact integer invariant from which the code is recovered.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .codes import BinaryCode
from .errors import ConstructionError, RecoveryError, ValidationError
from .profiles import plateau_bump

__all__ = [
    "PlanarRing",
    "PlanarLayout",
    "Actuator",
    "PlanarDiffeo",
    "PlanarHomeo",
    "RegionPeriod",
    "DecayReport",
    "smallest_odd_above_exp",
    "layout",
    "build",
    "period_spectrum",
    "recover_code",
    "build_conjugacy",
    "smoothness_probe",
]

PROBE_SCALES = (1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6)


def smallest_odd_above_exp(n):
    """Smallest odd integer strictly greater than e^n, decided in exact
    rational arithmetic (partial series plus a rigorous tail bound)."""
    terms = 5 * n + 60
    term = Fraction(1)
    total = Fraction(1)
    for k in range(1, terms + 1):
        term *= Fraction(n, k)
        total += term
    # tail < term * n/(terms+1) / (1 - n/(terms+2)), crude doubling is ample
    tail_bound = term * 2
    m = math.floor(total) + 1
    if Fraction(m) <= total + tail_bound and Fraction(m) > total:
        raise ConstructionError("series precision too low to separate e^n from an integer")
    if m % 2 == 0:
        m += 1
    return m


@dataclass(frozen=True)
class PlanarRing:
    """Per-index data of the layout: the four disc centers at index n plus
    the shared radius and rotation denominator."""

    n: int
    c_a: tuple
    c_b: tuple
    z_a: tuple
    z_b: tuple
    r: float
    m: int

    @property
    def q(self):
        return Fraction(1, self.m)


@dataclass(frozen=True)
class PlanarLayout:
    """Disc layout for a given truncation depth (rings n = 2..depth+1)."""

    depth: int
    a: tuple
    b: tuple
    rings: tuple
    angle_scale: float

    def ring(self, n):
        return self.rings[n - 2]

    def all_discs(self):
        """(region_id, center, radius) for every disc of the layout."""
        out = []
        for ring in self.rings:
            out.append((("c_a", ring.n), ring.c_a, ring.r))
            out.append((("c_b", ring.n), ring.c_b, ring.r))
            out.append((("z_a", ring.n), ring.z_a, ring.r))
            out.append((("z_b", ring.n), ring.z_b, ring.r))
        return out


def _verify_disjoint(discs, specials, margin=1e-9):
    """All discs pairwise disjoint and avoiding the marked points."""
    for i in range(len(discs)):
        id_i, c_i, r_i = discs[i]
        ci = np.asarray(c_i)
        for p in specials:
            if np.linalg.norm(ci - np.asarray(p)) <= r_i * (1.0 + margin):
                return False, f"disc {id_i} touches a marked point"
        for j in range(i + 1, len(discs)):
            id_j, c_j, r_j = discs[j]
            gap = np.linalg.norm(ci - np.asarray(c_j)) - (r_i + r_j)
            if gap <= margin * (r_i + r_j):
                return False, f"discs {id_i} and {id_j} are not disjoint"
    return True, ""


def layout(depth) -> PlanarLayout:
    """Deterministic layout at the given depth.

    The four point families sit on rays from a (resp. b) whose angles shrink
    like 2^-n away from the axis through a and b; the disc-disjointness
    invariant is verified explicitly and the angles are halved on failure.
    """
    if depth < 0:
        raise ValidationError("depth must be >= 0")
    a = (0.0, 0.0)
    b = (0.5, 0.0)
    scale = 1.0
    for _attempt in range(8):
        rings = []
        for n in range(2, depth + 2):
            dist_c = 1.0 / n**4
            dist_z = 0.5 / n**4
            ang = scale * 2.0**-n
            # family rays point away from the opposite accumulation point
            c_a = (a[0] - dist_c * math.cos(ang), a[1] + dist_c * math.sin(ang))
            z_a = (a[0] - dist_z * math.cos(ang), a[1] - dist_z * math.sin(ang))
            c_b = (b[0] + dist_c * math.cos(ang), b[1] + dist_c * math.sin(ang))
            z_b = (b[0] + dist_z * math.cos(ang), b[1] - dist_z * math.sin(ang))
            rings.append(
                PlanarRing(
                    n=n, c_a=c_a, c_b=c_b, z_a=z_a, z_b=z_b,
                    r=float(n) ** -10, m=smallest_odd_above_exp(n),
                )
            )
        candidate = PlanarLayout(depth=depth, a=a, b=b, rings=tuple(rings), angle_scale=scale)
        ok, why = _verify_disjoint(candidate.all_discs(), (a, b))
        if ok:
            return candidate
        scale *= 0.5
    raise ConstructionError(f"disc disjointness could not be certified: {why}")


@dataclass(frozen=True)
class Actuator:
    """One rotation actuator: rotate by 2*pi*fraction*profile(rho/radius)
    about ``center`` inside the closed disc of ``radius``."""

    region: tuple
    center: tuple
    radius: float
    fraction: Fraction


class PlanarDiffeo:
    """Evaluable planar diffeomorphism assembled from rotation actuators.

    The map is the identity outside the union of the closed actuator discs;
    inside, displacements are computed in disc-centered coordinates with the
    cos(theta)-1 term expanded, so displacements far below the coordinate ulp
    are still reported exactly.
    """

    def __init__(self, layout: PlanarLayout, code: BinaryCode, actuators):
        self.layout = layout
        self.code = code
        self.actuators = tuple(actuators)
        self._centers = np.array([act.center for act in self.actuators]).reshape(-1, 2)
        self._radii = np.array([act.radius for act in self.actuators])
        self._fractions = np.array([float(act.fraction) for act in self.actuators])

    def displacement(self, points):
        """f(p) - p, shape (N, 2); exact zero off the actuator discs."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        out = np.zeros_like(pts)
        for idx in range(len(self.actuators)):
            c = self._centers[idx]
            r = self._radii[idx]
            v = pts - c
            rho = np.hypot(v[:, 0], v[:, 1])
            mask = rho < r
            if not np.any(mask):
                continue
            prof = plateau_bump(rho[mask] / r)
            theta = 2.0 * math.pi * self._fractions[idx] * prof
            s = np.sin(theta)
            cm1 = -2.0 * np.sin(0.5 * theta) ** 2
            vx, vy = v[mask, 0], v[mask, 1]
            out[mask, 0] = cm1 * vx - s * vy
            out[mask, 1] = s * vx + cm1 * vy
        return out

    def eval(self, points):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return pts + self.displacement(pts)

    def __call__(self, points):
        return self.eval(points)

    def inverse(self):
        """The inverse diffeomorphism (all rotation fractions negated)."""
        flipped = [
            Actuator(a.region, a.center, a.radius, -a.fraction) for a in self.actuators
        ]
        return PlanarDiffeo(self.layout, self.code, flipped)

    def actuator_by_region(self, region):
        for act in self.actuators:
            if act.region == region:
                return act
        raise KeyError(region)


def build(lay: PlanarLayout, code: BinaryCode) -> PlanarDiffeo:
    """Populate the actuator table from the code.

    Ring n reads bit n-1 (stored at code.bits[n-2]): bit 0 gives the z_a disc
    the full fraction q_n and z_b half of it; bit 1 reverses the two.  The
    c discs never depend on the code.
    """
    if lay.depth != code.depth:
        raise ValidationError(f"layout depth {lay.depth} != code depth {code.depth}")
    acts = []
    for ring in lay.rings:
        q = ring.q
        bit = code.bits[ring.n - 2]
        z_a_frac, z_b_frac = (q, q / 2) if bit == 0 else (q / 2, q)
        acts.append(Actuator(("c_a", ring.n), ring.c_a, ring.r, q / 8))
        acts.append(Actuator(("c_b", ring.n), ring.c_b, ring.r, q / 16))
        acts.append(Actuator(("z_a", ring.n), ring.z_a, ring.r, z_a_frac))
        acts.append(Actuator(("z_b", ring.n), ring.z_b, ring.r, z_b_frac))
    return PlanarDiffeo(lay, code, acts)


@dataclass(frozen=True)
class RegionPeriod:
    """Minimal period of the points in the rigid inner quarter of one disc."""

    region: tuple
    minimal_period: int


@functools.lru_cache(maxsize=4096)
def _prime_factors(n):
    out = []
    d = 2
    while d * d <= n:
        if n % d == 0:
            out.append(d)
            while n % d == 0:
                n //= d
        d += 1
    if n > 1:
        out.append(n)
    return out


@functools.lru_cache(maxsize=4096)
def _verify_rotation_period(radius, fraction, period):
    p, q = fraction.numerator, fraction.denominator
    if (period * p) % q != 0:
        return f"claimed period {period} does not return"
    for prime in _prime_factors(period):
        if ((period // prime) * p) % q == 0:
            return f"period {period} is not minimal"
    if period <= 512:
        # iterate in disc-centered coordinates to keep the rotation free of
        # cancellation against the absolute position of the center
        x0, y0 = radius / 8.0, 0.0
        x, y = x0, y0
        theta = 2.0 * math.pi * float(fraction)
        ct, st = math.cos(theta), math.sin(theta)
        tol = 1e-9 * radius
        for k in range(1, period + 1):
            x, y = ct * x - st * y, st * x + ct * y
            dist = math.hypot(x - x0, y - y0)
            if k < period and dist <= 100 * tol:
                return f"early return at {k}"
        if math.hypot(x - x0, y - y0) > tol:
            return f"no return after {period}"
    return None


def _verify_region_period(act: Actuator, period: int):
    """Cross-check the analytic period on one sample point.

    Exact route: k*fraction is an integer exactly when the rotation returns,
    so the claimed period must return and no maximal proper divisor may
    (which rules out every proper divisor).  For small periods the floating
    evaluation loop is run as well.
    """
    problem = _verify_rotation_period(act.radius, abs(act.fraction), period)
    if problem is not None:
        raise ConstructionError(f"{problem} for {act.region}")


def period_spectrum(f: PlanarDiffeo):
    """One RegionPeriod per disc, computed from the actuator fractions and
    cross-checked by iteration on a sample point."""
    out = []
    for act in f.actuators:
        period = abs(act.fraction).denominator
        _verify_region_period(act, period)
        out.append(RegionPeriod(region=act.region, minimal_period=period))
    return out


def recover_code(spectrum, lay: PlanarLayout) -> BinaryCode:
    """The unique code whose build() produces this spectrum (inverse of
    build-then-spectrum)."""
    by_region = {rp.region: rp.minimal_period for rp in spectrum}
    if len(by_region) != 4 * lay.depth or len(spectrum) != 4 * lay.depth:
        raise RecoveryError("spectrum does not cover the layout's discs")
    bits = []
    for ring in lay.rings:
        m = ring.m
        expected_c = {("c_a", ring.n): 8 * m, ("c_b", ring.n): 16 * m}
        for region, want in expected_c.items():
            if by_region.get(region) != want:
                raise RecoveryError(f"c-disc period mismatch at {region}")
        za = by_region.get(("z_a", ring.n))
        zb = by_region.get(("z_b", ring.n))
        if (za, zb) == (m, 2 * m):
            bits.append(0)
        elif (za, zb) == (2 * m, m):
            bits.append(1)
        else:
            raise RecoveryError(f"z-disc periods {za},{zb} fit no bit at n={ring.n}")
    return BinaryCode(tuple(bits))


class PlanarHomeo:
    """Piecewise conjugacy between two same-depth planar diffeomorphisms:
    identity everywhere except on the z-discs of indices where the codes
    differ, which are exchanged by the translation isometry."""

    def __init__(self, lay: PlanarLayout, swapped_indices):
        self.layout = lay
        self.swapped_indices = tuple(sorted(swapped_indices))

    def eval(self, points):
        pts = np.atleast_2d(np.asarray(points, dtype=float)).copy()
        for n in self.swapped_indices:
            ring = self.layout.ring(n)
            za = np.asarray(ring.z_a)
            zb = np.asarray(ring.z_b)
            shift = zb - za
            da = np.linalg.norm(pts - za, axis=1)
            db = np.linalg.norm(pts - zb, axis=1)
            in_a = da <= ring.r
            in_b = db <= ring.r
            pts[in_a] += shift
            pts[in_b] -= shift
        return pts

    def __call__(self, points):
        return self.eval(points)


def build_conjugacy(c1: BinaryCode, c2: BinaryCode, lay: PlanarLayout) -> PlanarHomeo:
    """Disc-swap conjugacy h with h . f_c1 = f_c2 . h on the actuator
    supports: exact because translation commutes with rotation about the
    translated center and differing bits swap equal-radius discs whose
    fractions are exchanged."""
    if c1.depth != c2.depth:
        raise ValidationError("codes must have equal depth")
    if c1.depth != lay.depth:
        raise ValidationError("layout depth must match the codes")
    swapped = [n for n in range(2, lay.depth + 2) if c1.bits[n - 2] != c2.bits[n - 2]]
    return PlanarHomeo(lay, swapped)


@dataclass(frozen=True)
class DecayReport:
    """Flatness probe output: per order k, the nested suprema of
    ||f(x)-x|| / |x-center|^k over samples within each scale."""

    center: tuple
    scales: tuple
    orders: tuple
    ratios: dict
    flat: dict


def _disc_samples(act: Actuator, center, n_radial=24, n_angular=8):
    """Scalar displacement magnitude and distance-to-center for deterministic
    samples inside one disc.

    Everything is computed from radii and angles, never from coordinate
    differences, so no cancellation noise enters even when the displacement
    is hundreds of orders below the coordinate ulp.
    """
    c = np.asarray(act.center, dtype=float)
    ctr = np.asarray(center, dtype=float)
    base = c - ctr
    dist_cc = float(np.hypot(base[0], base[1]))
    rho = act.radius * np.concatenate(
        [np.linspace(1.0 / 16, 15.0 / 16, n_radial), [0.125, 0.25, 0.5, 0.75]]
    )
    prof = plateau_bump(rho / act.radius)
    disp = 2.0 * rho * np.abs(np.sin(math.pi * float(act.fraction) * prof))
    taus = np.linspace(0.0, 2.0 * math.pi, n_angular, endpoint=False)
    disp_all = np.repeat(disp, n_angular)
    rho_all = np.repeat(rho, n_angular)
    cos_all = np.tile(np.cos(taus), len(rho))
    dist = np.sqrt(
        np.maximum(dist_cc**2 + rho_all**2 + 2.0 * dist_cc * rho_all * cos_all, 0.0)
    )
    return disp_all, dist


def _decay_verdict(sups, witnessed, decay_factor):
    """Non-increasing suprema plus genuine decay.

    A zero supremum over a scale that still held samples is the strongest
    possible decay (the displacement vanished outright); a zero over an
    empty scale carries no evidence either way.
    """
    nonincreasing = all(
        sups[i + 1] <= sups[i] * (1.0 + 1e-12) for i in range(len(sups) - 1)
    )
    if not nonincreasing:
        return False
    first = next((v for v in sups if v > 0.0), 0.0)
    if first == 0.0:
        return False
    for v, seen in zip(sups[::-1], witnessed[::-1]):
        if not seen:
            continue
        return v <= decay_factor * first
    return False


def smoothness_probe(
    f: PlanarDiffeo, center, orders=(0, 1, 2, 3, 4), scales=PROBE_SCALES,
    decay_factor=1e-2,
) -> DecayReport:
    """Numerical flatness probe at ``center``.

    For each order k the probe takes the supremum of
    ||f(x)-x|| / |x-center|^k over disc samples within distance s of the
    center, for s running down the scales.  The sample sets are nested, so
    the sequence is non-increasing by construction; ``flat`` additionally
    demands genuine decay (final sup at most decay_factor times the first,
    with a nonzero first).  Centers away from a and b see a constant ratio
    from their own disc and are flagged not flat.
    """
    scales = tuple(sorted(scales, reverse=True))
    ctr = np.asarray(center, dtype=float)
    disp_chunks = []
    dist_chunks = []
    for act in f.actuators:
        disp, dist = _disc_samples(act, ctr)
        disp_chunks.append(disp)
        dist_chunks.append(dist)
    if disp_chunks:
        disp = np.concatenate(disp_chunks)
        dist = np.concatenate(dist_chunks)
    else:
        disp = np.zeros(0)
        dist = np.zeros(0)
    ratios = {}
    flat = {}
    for k in orders:
        sups = []
        witnessed = []
        for s in scales:
            sel = dist <= s
            witnessed.append(bool(np.any(sel)))
            if not witnessed[-1]:
                sups.append(0.0)
                continue
            with np.errstate(divide="ignore"):
                vals = disp[sel] / dist[sel] ** k
            sups.append(float(np.max(vals)))
        ratios[k] = tuple(sups)
        flat[k] = _decay_verdict(sups, witnessed, decay_factor)
    return DecayReport(
        center=tuple(ctr), scales=scales, orders=tuple(orders), ratios=ratios, flat=flat
    )
