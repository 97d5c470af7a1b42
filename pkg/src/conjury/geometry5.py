"""Embedded-graph geometry in 5-space.

Vertices of the complete graph live in the 3-subspace E3 (coordinates 0..2),
accumulating geometrically at a limit point r in general position; the two
extra dimensions E2 (coordinates 3..4) carry the transport directions used by
the conjugacy assembly.  Atomic supports are "cigars": lens-shaped tubes
around segments whose slice at parameter t is a ball of radius eps*(1-t^2)/2.

Every existence claim (disjoint tubes, transport containment, bounded slice
drift) is replaced by a constructive size choice plus a machine-checked
certificate; sizes are halved until the certificates pass with margin.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import ConstructionError, ValidationError
from .permdec import TranspositionSeq
from .tubes import (CertificateFailure, SweptFamily, certify_cross_step,
                    certify_pair, pi2_stub_cover)
from .predicates import (
    angle_between,
    collinearity_margin,
    coplanarity_margin,
    min_angle_ray_to_segment,
    point_segment_distance,
    segment_segment_distance,
    simplex_distance,
)

__all__ = [
    "GOLDEN_ANGLE",
    "cigar_profile",
    "Cigar",
    "AffineField",
    "VertexPlacement",
    "place_vertices",
    "pos",
    "affine_flow",
    "DeltaTube",
    "StepTubes",
    "TubeBudget",
    "TubeSetFamily",
    "build_tubes",
    "needle_collar",
]

GOLDEN_ANGLE = math.pi * (3.0 - math.sqrt(5.0))
PREDICATE_MARGIN = 1e-9


def cigar_profile(t):
    """Slice-radius profile (1 - t^2)/2 of an atomic domain."""
    t = np.asarray(t, dtype=float)
    out = 0.5 * (1.0 - t * t)
    return out


def _normal_frame(axis):
    """Deterministic orthonormal basis of the hyperplane orthogonal to axis."""
    dim = axis.shape[0]
    m = np.concatenate([axis[:, None], np.eye(dim)], axis=1)
    q, _ = np.linalg.qr(m)
    # first column of q is +-axis; the rest spans the normal space
    return q[:, 1:dim]


class Cigar:
    """Open tube U_{x,y,eps}: slice at t in (-1,1) is the ball of radius
    eps*(1-t^2)/2 in the hyperplane normal to [x,y] at gamma(t)."""

    def __init__(self, x, y, eps):
        self.x = np.asarray(x, dtype=float)
        self.y = np.asarray(y, dtype=float)
        if np.array_equal(self.x, self.y):
            raise ValidationError("cigar endpoints must differ")
        self.eps = float(eps)
        self.mid = 0.5 * (self.x + self.y)
        self.half = 0.5 * (self.y - self.x)
        self.halflen = float(np.linalg.norm(self.half))
        self.axis = self.half / self.halflen
        self.frame = _normal_frame(self.axis)

    def gamma(self, t):
        t = np.asarray(t, dtype=float)
        return self.mid + np.multiply.outer(t, self.half)

    def slice_radius(self, t):
        return self.eps * cigar_profile(t)

    def coords(self, points):
        """(t, rho, unit radial normal coords): shapes (N,), (N,), (N,4)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        rel = pts - self.mid
        t = rel @ self.axis / self.halflen
        radial = rel - np.multiply.outer(t * self.halflen, self.axis)
        u4 = radial @ self.frame
        rho = np.linalg.norm(u4, axis=1)
        safe = np.where(rho > 0.0, rho, 1.0)
        return t, rho, u4 / safe[:, None]

    def point_at(self, t, unit4, rho):
        t = np.asarray(t, dtype=float)
        rho = np.asarray(rho, dtype=float)
        unit4 = np.atleast_2d(np.asarray(unit4, dtype=float))
        return (
            self.mid
            + np.multiply.outer(t, self.half)
            + (rho[:, None] * unit4) @ self.frame.T
        )

    def contains(self, points):
        t, rho, _ = self.coords(points)
        return (np.abs(t) < 1.0) & (rho < self.slice_radius(t))

    def reversed(self):
        return Cigar(self.y, self.x, self.eps)

    def resized(self, eps):
        return Cigar(self.x, self.y, eps)


def pos(c: Cigar, z):
    """Slice parameter of z inside the open cigar, None outside (endpoints
    are boundary, so Pos(x) = -1 only as a limit)."""
    t, rho, _ = c.coords(np.asarray(z)[None, :])
    if abs(t[0]) < 1.0 and rho[0] < c.slice_radius(t[0]):
        return float(t[0])
    return None


class AffineField:
    """The unique affine field v(z) = ell(z) * w with ell vanishing on the
    3-plane through x orthogonal to span(y-x, w), ell(y) = 1, and ell killing
    w (so non-singular orbits are straight lines on which v is constant)."""

    def __init__(self, x, y, w):
        self.x = np.asarray(x, dtype=float)
        self.y = np.asarray(y, dtype=float)
        self.w = np.asarray(w, dtype=float)
        d1 = self.y - self.x
        ww = float(np.dot(self.w, self.w))
        if ww == 0.0:
            raise ValidationError("field direction w must be nonzero")
        u = d1 - (np.dot(d1, self.w) / ww) * self.w
        denom = float(np.dot(d1, u))
        if denom <= 1e-14 * np.dot(d1, d1):
            raise ValidationError("w is parallel to y - x; field undefined")
        self.grad = u / denom
        if abs(np.dot(self.w, self.grad)) > 1e-9:
            raise ValidationError("ell(w) = 0 violated at construction")
        self.shear = float(np.linalg.norm(self.w) * np.linalg.norm(self.grad))

    def ell(self, points):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return (pts - self.x) @ self.grad

    def __call__(self, points):
        return self.ell(points)[:, None] * self.w

    def flow(self, points, t):
        """Exact closed-form flow z + t*ell(z)*w."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return pts + t * self.ell(pts)[:, None] * self.w

    def as_affine(self, t=1.0):
        """(A, b) with flow(z, t) = A z + b."""
        dim = self.x.shape[0]
        A = np.eye(dim) + t * np.outer(self.w, self.grad)
        b = -t * float(np.dot(self.x, self.grad)) * self.w
        return A, b


def affine_flow(fld: AffineField, z, t):
    out = fld.flow(np.asarray(z, dtype=float)[None, :], t)
    return out[0]


def _pair(m, n):
    return (m, n) if m < n else (n, m)


@dataclass(frozen=True)
class VertexPlacement:
    """Vertices x_1..x_V accumulating at r in general position, with the
    derived angle and size data every consumer reads off it."""

    count: int
    r: tuple
    vertices: tuple
    eta: dict
    alpha: dict
    eps: dict
    rho: dict
    theta_tilde: dict
    angle_scale: float

    def x(self, n):
        return np.asarray(self.vertices[n - 1], dtype=float)

    @property
    def r_point(self):
        return np.asarray(self.r, dtype=float)

    def pairs(self):
        return [
            (m, n)
            for m in range(1, self.count + 1)
            for n in range(m + 1, self.count + 1)
        ]

    def dist(self, m, n):
        return float(np.linalg.norm(self.x(m) - self.x(n)))

    def eps_of(self, m, n):
        return self.eps[_pair(m, n)]

    def alpha_of(self, m, n):
        return self.alpha[_pair(m, n)]

    def edge(self, m, n):
        return self.x(m), self.x(n)

    def needles(self):
        """Segments [r, x_n] of the needle set."""
        return [(self.r_point, self.x(n)) for n in range(1, self.count + 1)]

    def cigar(self, m, n, eps):
        """Cigar between x_m and x_n with the lower label first, so the
        frame and orientation are shared by every consumer."""
        a, b = _pair(m, n)
        return Cigar(self.x(a), self.x(b), eps)

    def needle_cigar(self, n, theta):
        return Cigar(self.r_point, self.x(n), theta)


def _embed3(v3):
    out = np.zeros(5)
    out[:3] = v3
    return out


def embed_e2(v2):
    out = np.zeros(5)
    out[3:] = v2
    return out


def _candidate_vertices(count, depth_margin, attempt):
    pts = []
    for n in range(1, count + 1):
        polar = 0.8 * 2.0 ** (-n - 1)
        azim = GOLDEN_ANGLE * n + 0.7137 * attempt + 0.31
        radius = (1.0 - depth_margin) * 2.0 ** (-n - 1)
        direction = np.array(
            [
                math.cos(polar),
                math.sin(polar) * math.cos(azim),
                math.sin(polar) * math.sin(azim),
            ]
        )
        pts.append(_embed3(radius * direction))
    return pts


def _general_position_margins(r, vertices):
    """(worst collinearity, worst coplanarity) over all triples/quads."""
    pts = [r] + list(vertices)
    worst_line = math.inf
    for trip in itertools.combinations(pts, 3):
        worst_line = min(worst_line, collinearity_margin(*trip))
    worst_plane = math.inf
    for quad in itertools.combinations(pts, 4):
        worst_plane = min(worst_plane, coplanarity_margin(*quad))
    return worst_line, worst_plane


def place_vertices(count, depth_margin=0.25) -> VertexPlacement:
    """Greedy deterministic placement along shrinking-angle rays toward r.

    All invariants are verified by explicit predicates (normalized
    determinant tests with margin, computed angle margins); on failure the
    azimuth pattern is rotated and the construction retried.
    """
    if count < 2:
        raise ValidationError("need at least two vertices")
    if not (0.0 < depth_margin < 1.0):
        raise ValidationError("depth_margin must be in (0,1)")
    r = np.zeros(5)
    failure = ""
    for attempt in range(8):
        vertices = _candidate_vertices(count, depth_margin, attempt)
        ok, failure = _check_placement(r, vertices)
        if ok:
            return _derive_placement(count, r, vertices, depth_margin)
    raise ConstructionError(f"vertex placement failed: {failure}", clause=failure)


def _check_placement(r, vertices):
    n_count = len(vertices)
    for n, v in enumerate(vertices, start=1):
        if np.linalg.norm(v - r) >= 2.0 ** (-n - 1):
            return False, f"distance bound at vertex {n}"
    worst_line, worst_plane = _general_position_margins(r, vertices)
    if worst_line < PREDICATE_MARGIN:
        return False, "collinearity margin"
    if worst_plane < PREDICATE_MARGIN:
        return False, "coplanarity margin"
    for n in range(1, n_count + 1):
        eta_raw = _eta_raw(r, vertices, n)
        if eta_raw < 2 * PREDICATE_MARGIN:
            return False, f"needle angle margin at vertex {n}"
    return True, ""


def _eta_raw(r, vertices, n):
    """min over edges I_{k,m} (n not in {k,m}) and y on the edge of the angle
    at r between [r,y] and the needle to x_n."""
    best = math.inf
    x_n = vertices[n - 1]
    for k in range(1, len(vertices) + 1):
        for m in range(k + 1, len(vertices) + 1):
            if n in (k, m):
                continue
            best = min(
                best,
                min_angle_ray_to_segment(r, x_n, vertices[k - 1], vertices[m - 1]),
            )
    return best


def _derive_placement(count, r, vertices, depth_margin):
    eta = {n: 0.5 * _eta_raw(r, vertices, n) for n in range(1, count + 1)}
    alpha = {}
    for m in range(1, count + 1):
        for n in range(m + 1, count + 1):
            vals = []
            seg_m, seg_n = vertices[m - 1], vertices[n - 1]
            for k in range(1, count + 1):
                if k in (m, n):
                    continue
                vals.append(angle_between(vertices[k - 1] - seg_m, seg_n - seg_m))
                vals.append(angle_between(vertices[k - 1] - seg_n, seg_m - seg_n))
            for k in range(1, count + 1):
                for l in range(k + 1, count + 1):
                    if {k, l} & {m, n}:
                        continue
                    vals.append(
                        segment_segment_distance(
                            seg_m, seg_n, vertices[k - 1], vertices[l - 1]
                        )
                    )
            raw = min(vals) if vals else angle_between(seg_n - seg_m, r - seg_m)
            if raw <= 0.0:
                raise ConstructionError(f"alpha({m},{n}) not positive")
            alpha[(m, n)] = raw / 1000.0
    eps = {
        pr: min(0.001 * alpha[pr], 2.0 ** (-pr[0] - pr[1])) for pr in alpha
    }
    rho = {}
    for n in range(1, count + 1):
        vals = []
        for m in range(1, count + 1):
            if m != n:
                vals.append(float(np.linalg.norm(vertices[n - 1] - vertices[m - 1])))
        for m in range(1, count + 1):
            for k in range(m + 1, count + 1):
                if n in (m, k):
                    continue
                vals.append(
                    point_segment_distance(vertices[n - 1], vertices[m - 1], vertices[k - 1])
                )
        rho[n] = min(vals) / 1000.0
    placement = VertexPlacement(
        count=count,
        r=tuple(r),
        vertices=tuple(tuple(v) for v in vertices),
        eta=eta,
        alpha=alpha,
        eps=eps,
        rho=rho,
        theta_tilde={},
        angle_scale=depth_margin,
    )
    theta = _certify_needle_sizes(placement)
    object.__setattr__(placement, "theta_tilde", theta)
    return placement


def _cone_half_angle(theta, length):
    """A cigar from an endpoint lies inside the cone of this half-angle:
    slice radius over axial distance is at most 2*eps/length."""
    return math.atan2(2.0 * theta, length)


def _certify_needle_sizes(placement: VertexPlacement):
    """Sizes theta~_n with pairwise-disjoint needle tubes that also avoid all
    cigars over non-incident pairs, by iterative halving."""
    theta = {}
    r = placement.r_point
    for n in range(1, placement.count + 1):
        length = float(np.linalg.norm(placement.x(n) - r))
        theta[n] = min(
            0.1 * length * math.tan(placement.eta[n]),
            min(placement.eps.values()),
        )
    for _ in range(80):
        bad = _needle_certificate_violation(placement, theta)
        if bad is None:
            return theta
        for n in bad:
            theta[n] *= 0.5
    raise ConstructionError("needle tube sizes not certifiable", clause="needle-size")


def _needle_certificate_violation(placement, theta):
    r = placement.r_point
    for m in range(1, placement.count + 1):
        for n in range(m + 1, placement.count + 1):
            gap = angle_between(placement.x(m) - r, placement.x(n) - r)
            ha_m = _cone_half_angle(theta[m], np.linalg.norm(placement.x(m) - r))
            ha_n = _cone_half_angle(theta[n], np.linalg.norm(placement.x(n) - r))
            if ha_m + ha_n >= gap - PREDICATE_MARGIN:
                return (m, n)
    for n in range(1, placement.count + 1):
        for m, k in placement.pairs():
            if n in (m, k):
                continue
            d = segment_segment_distance(r, placement.x(n), placement.x(m), placement.x(k))
            if d - 0.5 * theta[n] - 0.5 * placement.eps[(m, k)] <= PREDICATE_MARGIN:
                return (n,)
    return None


# ---------------------------------------------------------------------------
# tube sets


@dataclass
class StepTubes:
    """Transport supports of one transposition step.

    xi[k] sizes the six-piece track V_{k,i} of the cigars anchored at x_k,
    xi_w the swing track W_i of the swapped pair's own cigar, theta_r the
    needle track anchored at r, delta_bq the rectangle-neighborhood width.
    The primed sizes are the certified in-flight cigar sizes.
    """

    index: int
    pair: tuple
    d: float
    q: Fraction
    w_unit: np.ndarray
    w_vec: np.ndarray
    xi: dict
    xi_w: float
    theta_r: float
    delta_bq: float
    xi_prime: dict = field(default_factory=dict)
    xi_w_prime: float = 0.0
    theta_r_prime: float = 0.0
    shear: dict = field(default_factory=dict)
    version: int = 0

    def anchors(self, placement):
        return [k for k in range(1, placement.count + 1) if k not in self.pair]

    def anchor_point(self, placement, anchor):
        return placement.r_point if anchor == "r" else placement.x(anchor)

    def anchor_size(self, anchor):
        return self.theta_r if anchor == "r" else self.xi[anchor]

    def v_families(self, placement, anchor, xi=None, inflate=True):
        """The four swept families covering V(anchor, x_n, x_m, xi, d*w):
        the two vertical sweeps (each spanning both signs of w) and the two
        across legs at the +w and -w levels."""
        n, m = self.pair
        z = self.anchor_point(placement, anchor)
        if xi is None:
            xi = self.anchor_size(anchor)
        xn, xm = placement.x(n), placement.x(m)
        w = self.w_vec
        fams = []
        legs = [
            (xn, w, -1.0, 1.0, "vertN"),
            (xm, w, -1.0, 1.0, "vertM"),
            (xn + w, xm - xn, 0.0, 1.0, "acrossU"),
            (xm - w, xn - xm, 0.0, 1.0, "acrossD"),
        ]
        for far, sweep, lo, hi, name in legs:
            scale = xi * (1.0 + AffineField(z, far, sweep).shear) if inflate else xi
            fams.append(
                SweptFamily.sweep(
                    z, far, sweep, lo, hi, scale,
                    label=("V", self.index, anchor, name),
                )
            )
        return fams

    def w_families(self, placement, xi=None, inflate=True):
        """The tilt and swing families of W(x_n, x_m, xi, d*w)."""
        n, m = self.pair
        if xi is None:
            xi = self.xi_w
        xn, xm = placement.x(n), placement.x(m)
        mid = 0.5 * (xn + xm)
        w = self.w_vec
        sh1 = AffineField(mid, xn, w).shear
        sh2 = AffineField(mid, xn + w, xm - xn).shear
        scale1 = xi * (1.0 + sh1) if inflate else xi
        scale2 = xi * (1.0 + sh1) * (1.0 + sh2) if inflate else xi
        tilt = SweptFamily(
            xn - w, xn + w, xm + w, xm - w, scale1,
            label=("W", self.index, "tilt"),
        )
        swing = SweptFamily(
            xn + w, xm + w, xm - w, xn - w, scale2,
            label=("W", self.index, "swing"),
        )
        return [tilt, swing]

    def bq_families(self, placement):
        """Capsule families along the six rectangle sides."""
        n, m = self.pair
        xn, xm = placement.x(n), placement.x(m)
        w = self.w_vec
        segs = [
            (xn, xn + w), (xn + w, xm + w), (xm + w, xm),
            (xm, xm - w), (xm - w, xn - w), (xn - w, xn),
        ]
        return [
            SweptFamily.static_cigar(
                a, b, self.delta_bq, lens=False, label=("BQ", self.index, j)
            )
            for j, (a, b) in enumerate(segs)
        ]

    def all_families(self, placement):
        fams = []
        for k in self.anchors(placement):
            fams.extend(self.v_families(placement, k))
        fams.extend(self.v_families(placement, "r"))
        fams.extend(self.w_families(placement))
        return fams

    def support_contains(self, points):
        """Sampling membership in the whole step support (families plus the
        rectangle neighborhood); used as the safety net and by the
        finite-motion report."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        inside = np.zeros(len(pts), dtype=bool)
        for fam in self._cached_families:
            inside |= fam.contains(pts)
        return inside

    def moving_pairs(self, placement):
        n, m = self.pair
        out = [_pair(n, m)]
        for k in self.anchors(placement):
            out.append(_pair(k, n))
            out.append(_pair(k, m))
        return out


@dataclass
class TubeBudget:
    margin: float = PREDICATE_MARGIN
    max_halvings: int = 60
    chain_samples: int = 200
    seed: int = 20240
    xi_init: float = 0.25


@dataclass
class TubeSetFamily:
    """Certified supports for every step, plus the working cigar sizes."""

    placement: VertexPlacement
    seq: TranspositionSeq
    steps: tuple
    eps_prime: dict
    collar: float
    certificates: dict
    cone_gaps: dict

    def step(self, i):
        return self.steps[i - 1]


def _cone_data(n_steps):
    """Exact dyadic cone bookkeeping: q_i = 2^-(i+1), transport directions
    w_i = (cos pi q_i, sin pi q_i) in E2, cone half-angle beta_i/3 with
    beta_i the least angular gap to another direction."""
    qs = [Fraction(1, 2 ** (i + 1)) for i in range(1, n_steps + 1)]
    betas = []
    for i, q in enumerate(qs):
        gaps = [abs(q - qo) for j, qo in enumerate(qs) if j != i]
        betas.append(min(gaps) if gaps else Fraction(1, 4))
    gap_table = {}
    for i in range(n_steps):
        for j in range(i + 1, n_steps):
            sep = abs(qs[i] - qs[j]) - (betas[i] + betas[j]) * Fraction(1, 3)
            gap_table[(i + 1, j + 1)] = sep
    return qs, betas, gap_table


def _expected_vv(st_i, k, st_j, l):
    pairs_i = {_pair(st_i.pair[0], k), _pair(st_i.pair[1], k)}
    pairs_j = {_pair(st_j.pair[0], l), _pair(st_j.pair[1], l)}
    return bool(pairs_i & pairs_j)


def _expected_wv(st_w, st_v, k):
    wpair = _pair(*st_w.pair)
    return wpair in (_pair(st_v.pair[0], k), _pair(st_v.pair[1], k))


def _families_expected_to_meet(st_i, lab_i, st_j, lab_j):
    """Whether two support families are allowed to genuinely intersect
    (they carry the same at-rest cigar)."""
    kind_i, kind_j = lab_i[0], lab_j[0]
    if st_i.index == st_j.index:
        if kind_i == kind_j == "V":
            return lab_i[2] == lab_j[2]  # same anchor: same six-piece track
        if kind_i == kind_j == "W":
            return True
        if {kind_i, kind_j} == {"V", "W"}:
            return False
        return kind_i == kind_j
    if kind_i == "V" and kind_j == "V":
        ai = lab_i[2]
        aj = lab_j[2]
        if ai == "r" or aj == "r":
            if ai == "r" and aj == "r":
                return bool(set(st_i.pair) & set(st_j.pair))
            return False
        return _expected_vv(st_i, ai, st_j, aj)
    if kind_i == "W" and kind_j == "V":
        return lab_j[2] != "r" and _expected_wv(st_i, st_j, lab_j[2])
    if kind_i == "V" and kind_j == "W":
        return lab_i[2] != "r" and _expected_wv(st_j, st_i, lab_i[2])
    return False


def build_tubes(placement: VertexPlacement, seq: TranspositionSeq, budget=None) -> TubeSetFamily:
    """Certified transport supports for every step of the factorization.

    Sizes are chosen by iterative halving until the full disjointness pattern
    holds with margin, then the in-flight (primed) sizes are derived from the
    shear bounds and the slice-drift bound is certified on sampled chains.
    """
    budget = budget or TubeBudget()
    for a, b in seq.steps:
        if not (1 <= a <= placement.count and 1 <= b <= placement.count):
            raise ValidationError(f"step ({a},{b}) outside placement range")
    seq = seq.with_distances(lambda a, b: placement.dist(a, b))
    n_steps = len(seq)
    qs, betas, cone_gaps = _cone_data(n_steps)
    for key, gap in cone_gaps.items():
        if gap < 0:
            raise ConstructionError(f"cone overlap at steps {key}", clause="cones")

    steps = []
    for i, ((a, b), d) in enumerate(zip(seq.steps, seq.distances), start=1):
        q = qs[i - 1]
        w2 = np.array([math.cos(math.pi * float(q)), math.sin(math.pi * float(q))])
        w_unit = embed_e2(w2)
        others = [k for k in range(1, placement.count + 1) if k not in (a, b)]
        steps.append(
            StepTubes(
                index=i,
                pair=(a, b),
                d=d,
                q=q,
                w_unit=w_unit,
                w_vec=d * w_unit,
                xi={
                    k: budget.xi_init
                    * min(placement.eps[_pair(k, a)], placement.eps[_pair(k, b)])
                    for k in others
                },
                xi_w=budget.xi_init * placement.eps[_pair(a, b)],
                theta_r=budget.xi_init
                * min(placement.theta_tilde[a], placement.theta_tilde[b]),
                delta_bq=0.2 * min(placement.rho.values()),
            )
        )

    certificates = {}
    _certify_with_retries(placement, steps, budget, certificates)

    for _round in range(budget.max_halvings):
        _derive_primed_sizes(placement, steps)
        bad = _chain_drift_violation(placement, steps, budget, certificates)
        if bad is None:
            break
        _shrink_for(steps, (bad,))
    else:
        raise ConstructionError("slice drift bound not achieved", clause="chain-drift")

    eps_prime = {}
    for pr in placement.pairs():
        candidates = [0.5 * placement.eps[pr]]
        for st in steps:
            a, b = st.pair
            if pr == _pair(a, b):
                candidates.append(st.xi_w_prime)
            for k in st.xi:
                if pr in (_pair(k, a), _pair(k, b)):
                    candidates.append(st.xi_prime[k])
        eps_prime[pr] = min(candidates)
    collar = needle_collar(placement, eps_prime)

    fam_cache = {st.index: st.all_families(placement) for st in steps}
    for st in steps:
        st._cached_families = fam_cache[st.index] + st.bq_families(placement)

    return TubeSetFamily(
        placement=placement,
        seq=seq,
        steps=tuple(steps),
        eps_prime=eps_prime,
        collar=collar,
        certificates=certificates,
        cone_gaps=cone_gaps,
    )


def _certify_with_retries(placement, steps, budget, certificates):
    """Certify every required disjointness clause, shrinking the owning
    sizes and retrying the failed clause only: shrinking sets preserves the
    clauses already certified."""

    def retry(make_fams_and_check):
        last = None
        for _ in range(budget.max_halvings):
            try:
                return make_fams_and_check()
            except CertificateFailure as fail:
                last = fail
                _shrink_for(steps, fail.labels)
        raise ConstructionError(
            f"tube certificates not achieved: {last}",
            clause=str(last.labels if last else "unknown"),
        )

    fam_descriptors = []
    for st in steps:
        for k in st.anchors(placement):
            for leg in range(4):
                fam_descriptors.append((st, "V", k, leg))
        for leg in range(4):
            fam_descriptors.append((st, "V", "r", leg))
        for leg in range(2):
            fam_descriptors.append((st, "W", None, leg))

    fam_cache = {}

    def build_fam(desc):
        st, kind, anchor, leg = desc
        key = (st.index, kind, anchor, leg, st.version)
        if key not in fam_cache:
            if kind == "V":
                fams = st.v_families(placement, anchor)
                for j, f in enumerate(fams):
                    fam_cache[(st.index, kind, anchor, j, st.version)] = f
            else:
                fams = st.w_families(placement)
                for j, f in enumerate(fams):
                    fam_cache[(st.index, kind, anchor, j, st.version)] = f
        return fam_cache[key]

    for da, db in itertools.combinations(fam_descriptors, 2):
        st_i, kind_i, anchor_i, _ = da
        st_j, kind_j, anchor_j, _ = db
        lab_i = ("V", st_i.index, anchor_i) if kind_i == "V" else ("W", st_i.index)
        lab_j = ("V", st_j.index, anchor_j) if kind_j == "V" else ("W", st_j.index)
        if _families_expected_to_meet(st_i, lab_i, st_j, lab_j):
            continue

        def check(da=da, db=db, st_i=st_i, st_j=st_j):
            fam_i = build_fam(da)
            fam_j = build_fam(db)
            if st_i.index != st_j.index:
                angle = math.pi * float(abs(st_i.q - st_j.q))
                clearance = certify_cross_step(
                    fam_i, fam_j, st_i.w_unit, st_j.w_unit, angle,
                    margin=budget.margin,
                )
            else:
                clearance = certify_pair(fam_i, fam_j, margin=budget.margin)
            certificates[(fam_i.label, fam_j.label)] = clearance

        retry(check)

    # supports must avoid the at-rest cigars and needles they do not move
    for st in steps:
        moving = set(st.moving_pairs(placement))
        statics = []
        for pr in placement.pairs():
            if pr in moving:
                continue
            statics.append(
                SweptFamily.static_cigar(
                    placement.x(pr[0]), placement.x(pr[1]),
                    0.5 * placement.eps[pr], label=("cigar",) + pr,
                )
            )
        for nd in range(1, placement.count + 1):
            if nd in st.pair:
                continue
            statics.append(
                SweptFamily.static_cigar(
                    placement.r_point, placement.x(nd),
                    placement.theta_tilde[nd], label=("needle", nd),
                )
            )
        for desc in fam_descriptors:
            if desc[0].index != st.index:
                continue
            for static in statics:

                def check(desc=desc, static=static, st=st):
                    fam = build_fam(desc)
                    level = 0.5 * (static.scale + fam.scale)
                    clearance = math.inf
                    for stub in pi2_stub_cover(fam, st.w_unit, level):
                        clearance = min(
                            clearance,
                            certify_pair(stub, static, margin=budget.margin),
                        )
                    certificates[(fam.label, static.label)] = clearance

                retry(check)

    # rectangle neighborhoods
    for st_i, st_j in itertools.combinations(steps, 2):
        shared = set(st_i.pair) & set(st_j.pair)

        def check(st_i=st_i, st_j=st_j, shared=shared):
            for fam_i in st_i.bq_families(placement):
                for fam_j in st_j.bq_families(placement):
                    if shared:
                        v = placement.x(next(iter(shared)))
                        near_i = min(
                            np.linalg.norm(fam_i.a0 - v), np.linalg.norm(fam_i.b0 - v)
                        ) < 2 * st_i.d
                        near_j = min(
                            np.linalg.norm(fam_j.a0 - v), np.linalg.norm(fam_j.b0 - v)
                        ) < 2 * st_j.d
                        if near_i and near_j:
                            if st_i.delta_bq + st_j.delta_bq >= placement.rho[
                                next(iter(shared))
                            ]:
                                raise CertificateFailure(
                                    "rectangle widths exceed the vertex ball",
                                    labels=(("BQ", st_i.index), ("BQ", st_j.index)),
                                    kind="bq",
                                )
                            continue
                    clearance = certify_pair(fam_i, fam_j, margin=budget.margin)
                    certificates[(fam_i.label, fam_j.label)] = clearance

        retry(check)

    # witnesses close the iff: expected intersections must actually occur
    for st_i, st_j in itertools.combinations(steps, 2):
        for k in st_i.anchors(placement):
            for l in st_j.anchors(placement):
                if not _expected_vv(st_i, k, st_j, l):
                    continue
                shared = (
                    {_pair(st_i.pair[0], k), _pair(st_i.pair[1], k)}
                    & {_pair(st_j.pair[0], l), _pair(st_j.pair[1], l)}
                )
                pr = sorted(shared)[0]
                xi_min = 0.5 * min(st_i.xi[k], st_j.xi[l])
                base = placement.cigar(pr[0], pr[1], xi_min)
                witness = base.point_at(
                    np.array([0.0]),
                    np.array([[1.0, 0.0, 0.0, 0.0]]),
                    np.array([0.1 * base.slice_radius(0.0)]),
                )
                in_i = any(
                    f.contains(witness)[0] for f in st_i.v_families(placement, k)
                )
                in_j = any(
                    f.contains(witness)[0] for f in st_j.v_families(placement, l)
                )
                if not (in_i and in_j):
                    raise ConstructionError(
                        f"expected intersection missing: V({k},{st_i.index}) vs "
                        f"V({l},{st_j.index})",
                        clause="witness",
                    )


def _shrink_for(steps, labels):
    for lab in labels:
        if not isinstance(lab, tuple) or not lab:
            continue
        kind = lab[0]
        if kind == "V":
            st = steps[lab[1] - 1]
            if lab[2] == "r":
                st.theta_r *= 0.5
            else:
                st.xi[lab[2]] *= 0.5
            st.version += 1
        elif kind == "W":
            steps[lab[1] - 1].xi_w *= 0.5
            steps[lab[1] - 1].version += 1
        elif kind == "BQ":
            steps[lab[1] - 1].delta_bq *= 0.5
            steps[lab[1] - 1].version += 1
        elif kind in ("cigar", "needle"):
            continue


def _leg_fields(placement, st: StepTubes, anchor):
    """The three affine transport fields moving the anchor's n-side cigar up,
    across, and down onto the m-side (their inverses drive the m-to-n leg)."""
    n, m = st.pair
    z = st.anchor_point(placement, anchor)
    w = st.w_vec
    up_n = AffineField(z, placement.x(n), w)
    across = AffineField(z, placement.x(n) + w, placement.x(m) - placement.x(n))
    down_m = AffineField(z, placement.x(m), -w)
    return up_n, across, down_m


def _w_leg_fields(placement, st: StepTubes):
    n, m = st.pair
    mid = 0.5 * (placement.x(n) + placement.x(m))
    up = AffineField(mid, placement.x(n), st.w_vec)
    across = AffineField(mid, placement.x(n) + st.w_vec, placement.x(m) - placement.x(n))
    return up, across


def _derive_primed_sizes(placement, steps):
    """In-flight containment: a xi'-cigar transported along the legs stays in
    the half-xi tube of each displaced pair; solved from the shear bound
    xi' (1+sigma) <= (xi/2)(1 - sigma xi'/halflen)."""
    for st in steps:
        n, m = st.pair
        st.shear = {}
        for k in list(st.xi) + ["r"]:
            xi = st.anchor_size(k)
            up, across, down = _leg_fields(placement, st, k)
            sigma = (1 + up.shear) * (1 + across.shear) * (1 + down.shear) - 1.0
            z = st.anchor_point(placement, k)
            halflen = 0.5 * min(
                np.linalg.norm(placement.x(n) - z), np.linalg.norm(placement.x(m) - z)
            )
            xi_p = 0.45 * xi / (1.0 + sigma)
            xi_p = min(
                xi_p, 0.45 * xi * (1.0 - sigma * xi_p / halflen) / (1.0 + sigma)
            )
            if xi_p <= 0.0:
                raise ConstructionError("in-flight containment impossible", clause="inflight")
            st.shear[k] = sigma
            if k == "r":
                st.theta_r_prime = xi_p
            else:
                st.xi_prime[k] = xi_p
        up_w, across_w = _w_leg_fields(placement, st)
        sigma_w = (1 + up_w.shear) ** 2 * (1 + across_w.shear) - 1.0
        halflen_w = 0.5 * placement.dist(n, m)
        xi_wp = 0.45 * st.xi_w / (1.0 + sigma_w)
        st.xi_w_prime = min(
            xi_wp, 0.45 * st.xi_w * (1.0 - sigma_w * xi_wp / halflen_w) / (1.0 + sigma_w)
        )
        st.shear["w"] = sigma_w


def _sample_cigar_points(cigar: Cigar, rng, count, t_span=0.95, s_span=0.9):
    t = rng.uniform(-t_span, t_span, count)
    u = rng.normal(size=(count, 4))
    u /= np.linalg.norm(u, axis=1)[:, None]
    s = s_span * rng.uniform(0, 1, count) ** 0.25
    rho = s * cigar.slice_radius(t)
    return cigar.point_at(t, u, rho)


def _chain_drift_violation(placement, steps, budget, certificates):
    """Slice drift along the transport chains must stay under 1/(500*2^i)."""
    rng = np.random.default_rng(budget.seed)
    for st in steps:
        bound = 1.0 / (500.0 * 2.0**st.index)
        n, m = st.pair
        for k in st.xi:
            src = Cigar(placement.x(k), placement.x(n), st.xi_prime[k])
            dst = Cigar(placement.x(k), placement.x(m), st.xi_prime[k])
            pts = _sample_cigar_points(src, rng, budget.chain_samples)
            t0 = src.coords(pts)[0]
            up, across, down = _leg_fields(placement, st, k)
            moved = down.flow(across.flow(up.flow(pts, 1.0), 1.0), 1.0)
            t1 = dst.coords(moved)[0]
            drift = float(np.max(np.abs(t1 - t0)))
            certificates[("chain", st.index, k)] = bound - drift
            if drift >= bound:
                return ("V", st.index, k)
        src = Cigar(placement.x(n), placement.x(m), st.xi_w_prime)
        pts = _sample_cigar_points(src, rng, budget.chain_samples)
        t0 = src.coords(pts)[0]
        up, across = _w_leg_fields(placement, st)
        moved = up.flow(across.flow(up.flow(pts, 1.0), 1.0), 1.0)
        dst = Cigar(placement.x(m), placement.x(n), st.xi_w_prime)
        t1 = dst.coords(moved)[0]
        drift = float(np.max(np.abs(t1 - t0)))
        certificates[("chainW", st.index)] = bound - drift
        if drift >= bound:
            return ("W", st.index)
    return None


def needle_collar(placement: VertexPlacement, eps_map) -> float:
    """Largest certified collar width for the needle cutoff.

    Guarantee: every cigar point whose distance to the needle set is at most
    twice the collar sits at |t| beyond the flat-dead zone of the axial bump
    (value below 1e-60), so the needle cutoff can only differ from 1 where
    the flow is numerically dead.  Halved until certified.
    """
    t_flat = math.sqrt(1.0 - 1.0 / (1.0 + 60.0 * math.log(10.0)))
    # tip-graded grid: clearances shrink linearly in (1 - |t|) toward the
    # tips, so the grid is log-graded there and the slack is local
    head = np.linspace(0.0, 0.9, 2048)
    tail = 1.0 - np.geomspace(0.1, 1.0 - t_flat, 2048)
    half_ts = np.concatenate([head, tail[1:]])
    ts = np.concatenate([-half_ts[::-1], half_ts[1:]])
    local = np.empty_like(ts)
    local[:-1] = np.diff(ts)
    local[-1] = local[-2]
    local = np.maximum(local, np.roll(local, 1))
    needles = placement.needles()
    collar = 1e-3 * min(placement.rho.values())
    worst = math.inf
    for (m, n), eps in eps_map.items():
        cig = placement.cigar(m, n, eps)
        centers = cig.gamma(ts)
        radii = cig.slice_radius(ts)
        clearance = np.full(len(ts), np.inf)
        for a, b in needles:
            d = _points_segment_distance(centers, a, b)
            clearance = np.minimum(clearance, d)
        slack = cig.halflen * local
        worst = min(worst, float(np.min(clearance - radii - slack)))
    if worst <= 0.0:
        raise ConstructionError("needle collar not certifiable", clause="collar")
    return min(collar, 0.5 * worst)


def _points_segment_distance(points, a, b):
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    d = b - a
    denom = float(np.dot(d, d))
    t = np.clip((points - a) @ d / denom, 0.0, 1.0)
    proj = a + t[:, None] * d
    return np.linalg.norm(points - proj, axis=1)
