"""Certified disjointness engine for swept-cigar supports.

Every transport support decomposes into one-parameter families of cigars
whose endpoints move affinely (a static cigar is the degenerate family).
Disjointness of two open families is certified by one of three routes:

* no closure contact: branch-and-bound grid minimum of
  dist(center, center) - radius - radius with explicit Lipschitz slack, a
  true global lower bound;
* collinear endpoint paths (the families pinch along a common line): every
  cigar lies inside the cone from its endpoint on that line, and membership
  forces the direction transverse to the line to align with the cone axis,
  so a transverse-sector separation over the cross sweep grid certifies
  global disjointness;
* isolated shared closure points: a cone separation at each shared point
  plus the banded grid bound away from balls around them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .predicates import simplex_distance

__all__ = [
    "SweptFamily",
    "family_gap",
    "certify_pair",
    "CertificateFailure",
]


class CertificateFailure(Exception):
    """A disjointness clause could not be certified at the current sizes."""

    def __init__(self, message, labels, kind):
        super().__init__(message)
        self.labels = labels
        self.kind = kind


@dataclass
class SweptFamily:
    """Cigars C(s) = U(A(s), B(s), scale) for s in [0,1], with A, B affine.

    ``lens=True`` uses the slice profile scale*(1-t^2)/2; ``lens=False`` is a
    constant-radius capsule family (used for rectangle neighborhoods).
    ``scale`` already includes any shear inflation of the true swept set.
    """

    a0: np.ndarray
    a1: np.ndarray
    b0: np.ndarray
    b1: np.ndarray
    scale: float
    lens: bool = True
    label: tuple = field(default_factory=tuple)
    t_lo: float = -1.0
    t_hi: float = 1.0

    def __post_init__(self):
        self.a0 = np.asarray(self.a0, dtype=float)
        self.a1 = np.asarray(self.a1, dtype=float)
        self.b0 = np.asarray(self.b0, dtype=float)
        self.b1 = np.asarray(self.b1, dtype=float)

    def geo_key(self):
        return (
            self.a0.tobytes(), self.a1.tobytes(), self.b0.tobytes(),
            self.b1.tobytes(), self.scale, self.lens, self.t_lo, self.t_hi,
        )

    def sub(self, s_lo, s_hi, t_lo, t_hi):
        """Restriction to a parameter box (sweep and slice sub-ranges)."""
        return SweptFamily(
            self.a(s_lo), self.a(s_hi), self.b(s_lo), self.b(s_hi),
            self.scale, lens=self.lens,
            label=self.label + ("sub",),
            t_lo=max(self.t_lo, t_lo), t_hi=min(self.t_hi, t_hi),
        )

    @classmethod
    def static_cigar(cls, x, y, scale, lens=True, label=()):
        return cls(x, x, y, y, scale, lens=lens, label=label)

    @classmethod
    def sweep(cls, anchor, far, w, s_lo, s_hi, scale, label=()):
        far = np.asarray(far, dtype=float)
        w = np.asarray(w, dtype=float)
        return cls(anchor, anchor, far + s_lo * w, far + s_hi * w, scale, label=label)

    def a(self, s):
        s = np.asarray(s, dtype=float)
        return self.a0 + np.multiply.outer(s, self.a1 - self.a0)

    def b(self, s):
        s = np.asarray(s, dtype=float)
        return self.b0 + np.multiply.outer(s, self.b1 - self.b0)

    def centers(self, s, t):
        a = self.a(s)
        b = self.b(s)
        mid = 0.5 * (a + b)
        half = 0.5 * (b - a)
        return mid + half * np.asarray(t, dtype=float)[..., None]

    def radii(self, t):
        t = np.asarray(t, dtype=float)
        if self.lens:
            return self.scale * 0.5 * (1.0 - t * t)
        return np.full(t.shape, self.scale)

    def lipschitz(self):
        ls = max(
            float(np.linalg.norm(self.a1 - self.a0)),
            float(np.linalg.norm(self.b1 - self.b0)),
        )
        span = max(
            float(np.linalg.norm(self.b0 - self.a0)),
            float(np.linalg.norm(self.b1 - self.a1)),
            float(np.linalg.norm(self.b0 - self.a1)),
            float(np.linalg.norm(self.b1 - self.a0)),
        )
        lt = 0.5 * span + (self.scale if self.lens else 0.0)
        return ls, lt

    def paths(self):
        """The two endpoint paths as (side, p0, p1); degenerate paths are
        reported with p0 == p1."""
        return [("a", self.a0, self.a1), ("b", self.b0, self.b1)]

    def corner_points(self):
        return [self.a0, self.a1, self.b0, self.b1]

    def bounding_sphere(self):
        pts = np.stack(self.corner_points())
        center = pts.mean(axis=0)
        rad = float(np.max(np.linalg.norm(pts - center, axis=1))) + self.scale
        return center, rad

    def max_cone_half_angle(self):
        """Every member cigar lies inside the cone from either endpoint of
        half-angle atan(2*scale/length); take the worst length."""
        lengths = [
            float(np.linalg.norm(self.b(s) - self.a(s)))
            for s in np.linspace(0.0, 1.0, 9)
        ]
        if self.lens:
            return math.atan2(2.0 * self.scale, min(lengths))
        # capsules do not pinch; treat as half-angle pi/2 (cone test unusable)
        return 0.5 * math.pi

    def contains(self, points, n_grid=41):
        """Sampling membership over the sweep grid (safety-net predicate)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        inside = np.zeros(len(pts), dtype=bool)
        for s in np.linspace(0.0, 1.0, n_grid):
            a = self.a0 + s * (self.a1 - self.a0)
            b = self.b0 + s * (self.b1 - self.b0)
            mid, half = 0.5 * (a + b), 0.5 * (b - a)
            halflen = float(np.linalg.norm(half))
            if halflen == 0.0:
                continue
            axis = half / halflen
            rel = pts - mid
            t = rel @ axis / halflen
            radial = rel - np.multiply.outer(t * halflen, axis)
            rho = np.linalg.norm(radial, axis=1)
            inside |= (t > self.t_lo) & (t < self.t_hi) & (rho < self.radii(t))
        return inside


# ---------------------------------------------------------------------------
# branch-and-bound gap


def _cell_data(fam, s_lo, s_hi, t_lo, t_hi):
    """Corner points and max slice radius of one parameter cell.

    The center surface is bilinear in (s, t), hence contained in the convex
    hull of the four corner points; the radius is monotone in |t|.
    """
    corners = np.stack([
        fam.centers(np.array([s_lo]), np.array([t_lo]))[0],
        fam.centers(np.array([s_lo]), np.array([t_hi]))[0],
        fam.centers(np.array([s_hi]), np.array([t_lo]))[0],
        fam.centers(np.array([s_hi]), np.array([t_hi]))[0],
    ])
    if fam.lens:
        t_star = 0.0 if t_lo <= 0.0 <= t_hi else (t_lo if abs(t_lo) < abs(t_hi) else t_hi)
        r = fam.scale * 0.5 * (1.0 - t_star * t_star)
    else:
        r = fam.scale
    return corners, r


def _support_gap(corners_a, corners_b, directions):
    """Max over candidate directions of the separation of the two corner
    hulls; any direction yields a valid lower bound on their distance."""
    best = -math.inf
    for u in directions:
        nu = float(np.linalg.norm(u))
        if nu == 0.0:
            continue
        u = u / nu
        sep = float(np.min(corners_b @ u) - np.max(corners_a @ u))
        best = max(best, sep)
    return best


def family_gap(fam_a, fam_b, exclude=(), target=1e-9, max_boxes=20000):
    """Verified global lower bound on the distance between the two swept
    sets, ignoring material inside the ``exclude`` balls.

    Branch and bound over parameter cells: each cell's material lies in the
    convex hull of its four center corners fattened by the cell's max slice
    radius, so support-function separation gives slack-free lower bounds; a
    cell is dropped once it provably sits inside an excluded ball, and the
    exact hull distance settles cells the support bound cannot.
    """
    exclude = [(np.asarray(c, dtype=float), r) for c, r in exclude]
    boxes = [(0.0, 1.0, fam_a.t_lo, fam_a.t_hi, 0.0, 1.0, fam_b.t_lo, fam_b.t_hi)]
    certified = math.inf
    processed = 0
    while boxes:
        processed += 1
        if processed > max_boxes:
            return -math.inf
        sa_lo, sa_hi, ta_lo, ta_hi, sb_lo, sb_hi, tb_lo, tb_hi = boxes.pop()
        ca, ra = _cell_data(fam_a, sa_lo, sa_hi, ta_lo, ta_hi)
        cb, rb = _cell_data(fam_b, sb_lo, sb_hi, tb_lo, tb_hi)
        dropped = False
        for center, radius in exclude:
            da = np.linalg.norm(ca - center, axis=1)
            if np.max(da) + ra <= radius:
                dropped = True
                break
            db = np.linalg.norm(cb - center, axis=1)
            if np.max(db) + rb <= radius:
                dropped = True
                break
        if dropped:
            continue
        cen_a = ca.mean(axis=0)
        cen_b = cb.mean(axis=0)
        bound = _support_gap(ca, cb, [cen_b - cen_a]) - ra - rb
        if bound > target:
            certified = min(certified, bound)
            continue
        spread_a = float(np.max(np.linalg.norm(ca - cen_a, axis=1)))
        spread_b = float(np.max(np.linalg.norm(cb - cen_b, axis=1)))
        if max(spread_a, spread_b) <= 0.25 * max(target, 1e-13):
            exact = simplex_distance(list(ca), list(cb)) - ra - rb - 2 * max(spread_a, spread_b)
            if exact > target:
                certified = min(certified, exact)
                continue
            return exact
        # split the family and axis with the widest hull
        if spread_a >= spread_b:
            box_idx = 0
            widths = (
                np.linalg.norm(fam_a.centers(np.array([sa_hi]), np.array([ta_lo]))[0]
                               - fam_a.centers(np.array([sa_lo]), np.array([ta_lo]))[0]),
                np.linalg.norm(fam_a.centers(np.array([sa_lo]), np.array([ta_hi]))[0]
                               - fam_a.centers(np.array([sa_lo]), np.array([ta_lo]))[0]),
            )
        else:
            box_idx = 2
            widths = (
                np.linalg.norm(fam_b.centers(np.array([sb_hi]), np.array([tb_lo]))[0]
                               - fam_b.centers(np.array([sb_lo]), np.array([tb_lo]))[0]),
                np.linalg.norm(fam_b.centers(np.array([sb_lo]), np.array([tb_hi]))[0]
                               - fam_b.centers(np.array([sb_lo]), np.array([tb_lo]))[0]),
            )
        dim = box_idx + (0 if widths[0] >= widths[1] else 1)
        box = [sa_lo, sa_hi, ta_lo, ta_hi, sb_lo, sb_hi, tb_lo, tb_hi]
        lo, hi = box[2 * dim], box[2 * dim + 1]
        mid = 0.5 * (lo + hi)
        left = list(box)
        left[2 * dim + 1] = mid
        right = list(box)
        right[2 * dim] = mid
        boxes.append(tuple(left))
        boxes.append(tuple(right))
    return certified


# ---------------------------------------------------------------------------
# pinch structure detection


def _collinear_overlap(p0, p1, q0, q1, tol=1e-12):
    """True when [p0,p1] and [q0,q1] lie on one line and overlap in more than
    a point.  Degenerate segments never overlap."""
    dp = p1 - p0
    dq = q1 - q0
    lp = float(np.linalg.norm(dp))
    lq = float(np.linalg.norm(dq))
    if lp <= tol or lq <= tol:
        return False
    u = dp / lp
    if np.linalg.norm(dq / lq - u) > 1e-9 and np.linalg.norm(dq / lq + u) > 1e-9:
        return False
    off = q0 - p0
    if np.linalg.norm(off - np.dot(off, u) * u) > tol:
        return False
    ta, tb = 0.0, lp
    qa, qb = sorted((float(np.dot(q0 - p0, u)), float(np.dot(q1 - p0, u))))
    lo, hi = max(ta, qa), min(tb, qb)
    return hi - lo > tol


def _point_on_path(v, p0, p1, tol=1e-12):
    d = p1 - p0
    ll = float(np.dot(d, d))
    if ll == 0.0:
        return float(np.linalg.norm(v - p0)) <= tol
    t = float(np.clip(np.dot(v - p0, d) / ll, 0.0, 1.0))
    return float(np.linalg.norm(v - (p0 + t * d))) <= tol


def _shared_line(fam_a, fam_b):
    """A common line along which both families' endpoint paths run, if any."""
    for side_a, p0, p1 in fam_a.paths():
        for side_b, q0, q1 in fam_b.paths():
            if _collinear_overlap(p0, p1, q0, q1):
                return (side_a, p0, p1), (side_b, q0, q1)
    return None


def _shared_points(fam_a, fam_b, tol=1e-12):
    """Closure contact candidates: corner-corner and corner-on-path."""
    out = []

    def push(v):
        for s in out:
            if np.linalg.norm(v - s) <= tol:
                return
        out.append(np.asarray(v, dtype=float))

    for p in fam_a.corner_points():
        for q in fam_b.corner_points():
            if np.linalg.norm(p - q) <= tol:
                push(p)
        for _, q0, q1 in fam_b.paths():
            if _point_on_path(p, q0, q1, tol):
                push(p)
    for q in fam_b.corner_points():
        for _, p0, p1 in fam_a.paths():
            if _point_on_path(q, p0, p1, tol):
                push(q)
    return out


# ---------------------------------------------------------------------------
# cone and sector certificates


def _apex_dirs(fam, v, tol=1e-12):
    """Directions from v toward the family's far side, one per sweep sample,
    for every endpoint path whose closure passes through v."""
    dirs = []
    ss = np.linspace(0.0, 1.0, 17)
    av = fam.a(ss)
    bv = fam.b(ss)
    for i, s in enumerate(ss):
        if np.linalg.norm(av[i] - v) <= max(tol, 1e-9 * (1.0 + np.linalg.norm(v))):
            d = bv[i] - av[i]
            dirs.append(d / np.linalg.norm(d))
        if np.linalg.norm(bv[i] - v) <= max(tol, 1e-9 * (1.0 + np.linalg.norm(v))):
            d = av[i] - bv[i]
            dirs.append(d / np.linalg.norm(d))
    return dirs


def _direction_arcs(fam, v):
    """Geodesic arcs on the direction sphere covering every direction from v
    into the family's material near v: apex-cone axes, the sweep directions
    of paths through v, and (since a material offset is a positive
    combination of the two) the arcs between them."""
    apex = _apex_dirs(fam, v)
    path_dirs = []
    for _, p0, p1 in fam.paths():
        d = p1 - p0
        nrm = float(np.linalg.norm(d))
        if nrm <= 1e-14:
            continue
        if not _point_on_path(v, p0, p1, tol=1e-9):
            continue
        # only inward path directions carry material: at an endpoint the
        # family does not extend past v
        at_start = float(np.linalg.norm(v - p0)) <= 1e-9 * (1.0 + nrm)
        at_end = float(np.linalg.norm(v - p1)) <= 1e-9 * (1.0 + nrm)
        if at_start and not at_end:
            path_dirs.append(d / nrm)
        elif at_end and not at_start:
            path_dirs.append(-d / nrm)
        else:
            path_dirs.extend([d / nrm, -d / nrm])
    arcs = [(d, d) for d in apex + path_dirs]
    for da in apex:
        for dp in path_dirs:
            arcs.append((da, dp))
    return arcs


def _slerp(u, w, lam):
    dot = float(np.clip(np.dot(u, w), -1.0, 1.0))
    omega = math.acos(dot)
    if omega < 1e-12:
        return np.broadcast_to(u, (len(lam), u.shape[0])).copy()
    so = math.sin(omega)
    lam = np.asarray(lam, dtype=float)
    return (
        np.outer(np.sin((1.0 - lam) * omega) / so, u)
        + np.outer(np.sin(lam * omega) / so, w)
    )


_ARC_CACHE = {}


def _arc_pair_min_angle(arc_a, arc_b, target, n=9, max_boxes=500):
    """Verified lower bound on the angle between two geodesic arcs, by branch
    and bound with the arc-length Lipschitz slack.  Memoized: stub covers
    reuse the same parent arcs many times."""
    key = (
        arc_a[0].tobytes(), arc_a[1].tobytes(),
        arc_b[0].tobytes(), arc_b[1].tobytes(),
    )
    if key in _ARC_CACHE:
        return _ARC_CACHE[key]
    out = _arc_pair_min_angle_impl(arc_a, arc_b, target, n, max_boxes)
    if len(_ARC_CACHE) > 500000:
        _ARC_CACHE.clear()
    _ARC_CACHE[key] = out
    return out


def _arc_pair_min_angle_impl(arc_a, arc_b, target, n=9, max_boxes=500):
    a1, a2 = arc_a
    b1, b2 = arc_b
    len_a = math.acos(float(np.clip(np.dot(a1, a2), -1.0, 1.0)))
    len_b = math.acos(float(np.clip(np.dot(b1, b2), -1.0, 1.0)))
    boxes = [(0.0, 1.0, 0.0, 1.0)]
    certified = math.inf
    processed = 0
    while boxes:
        processed += 1
        if processed > max_boxes:
            return -math.inf
        la_lo, la_hi, lb_lo, lb_hi = boxes.pop()
        la = np.linspace(la_lo, la_hi, n)
        lb = np.linspace(lb_lo, lb_hi, n)
        pa = _slerp(a1, a2, la)
        pb = _slerp(b1, b2, lb)
        ang = np.arccos(np.clip(pa @ pb.T, -1.0, 1.0))
        slack = (la[1] - la[0]) * len_a + (lb[1] - lb[0]) * len_b
        bound = float(np.min(ang)) - slack
        if bound > target:
            certified = min(certified, bound)
            continue
        if slack <= max(1e-7, 0.02 * max(bound, 0.0)):
            return bound
        lam_mid = 0.5 * (la_lo + la_hi)
        lbm = 0.5 * (lb_lo + lb_hi)
        for ra in ((la_lo, lam_mid), (lam_mid, la_hi)):
            for rb in ((lb_lo, lbm), (lbm, lb_hi)):
                boxes.append(ra + rb)
    return certified


def _min_member_length(fam):
    return min(
        float(np.linalg.norm(fam.b(s) - fam.a(s)))
        for s in np.linspace(0.0, 1.0, 9)
    )


def _sector_margin(fam_a, fam_b, line_a, line_b):
    """Transverse-sector separation for families pinching along a common
    line.

    Membership of a point z in a member cigar forces the direction of z from
    the cigar's on-line endpoint to align with the cigar axis within the cone
    half-angle, so the component transverse to the line is pinned to the
    transverse part of the axis direction.  If the two families' transverse
    axis directions stay separated by more than the summed widened
    half-angles across the sweep cross-grid, the open sets are disjoint.
    """
    _, p0, p1 = line_a
    u = p1 - p0
    u = u / np.linalg.norm(u)

    def transverse_dirs(fam, side):
        ss = np.linspace(0.0, 1.0, 21)
        a = fam.a(ss)
        b = fam.b(ss)
        axis = (b - a) if side == "a" else (a - b)
        axis_t = axis - np.outer(axis @ u, u)
        norms = np.linalg.norm(axis_t, axis=1)
        full = np.linalg.norm(axis, axis=1)
        frac = norms / full
        return axis_t / norms[:, None], float(np.min(frac))

    da, frac_a = transverse_dirs(fam_a, line_a[0])
    db, frac_b = transverse_dirs(fam_b, line_b[0])
    ha = fam_a.max_cone_half_angle()
    hb = fam_b.max_cone_half_angle()

    # a member point's transverse direction deviates from the transverse axis
    # direction by at most asin(tan(ha)/frac)
    def widen(h, frac):
        arg = math.tan(h) / max(frac, 1e-12)
        return 0.5 * math.pi if arg >= 1.0 else math.asin(arg)

    cosm = da @ db.T
    ang = np.arccos(np.clip(cosm, -1.0, 1.0))
    return (
        float(np.min(ang))
        - widen(ha, frac_a)
        - widen(hb, frac_b)
        - ha
        - hb
    )


def _self_angle(fam, v):
    """Least angle between the family's apex-cone axes at v and its own sweep
    directions there; controls how quickly material can backtrack toward v
    along the path (pi/2 when no path passes through v)."""
    apex = _apex_dirs(fam, v)
    paths = []
    for _, p0, p1 in fam.paths():
        d = p1 - p0
        nrm = float(np.linalg.norm(d))
        if nrm > 1e-14 and _point_on_path(v, p0, p1, tol=1e-9):
            paths.extend([d / nrm, -d / nrm])
    if not apex:
        return 0.0
    if not paths:
        return 0.5 * math.pi
    worst = math.inf
    for da in apex:
        for dp in paths:
            worst = min(worst, math.acos(float(np.clip(np.dot(da, dp), -1.0, 1.0))))
    return worst


_PINCH_CACHE = {}


def _pinch_analysis(fam_a, fam_b, v, margin):
    """Certified data for the shared point v: a verified lower bound on the
    cross angle between the two direction-arc systems, plus per-family
    half-angles, member lengths, and self-angles.  Memoized on the exact
    geometry, which repeats heavily across stub covers and retry sweeps."""
    key = (fam_a.geo_key(), fam_b.geo_key(), np.asarray(v).tobytes())
    if key in _PINCH_CACHE:
        return _PINCH_CACHE[key]
    out = _pinch_analysis_impl(fam_a, fam_b, v, margin)
    if len(_PINCH_CACHE) > 200000:
        _PINCH_CACHE.clear()
    _PINCH_CACHE[key] = out
    return out


def _pinch_analysis_impl(fam_a, fam_b, v, margin):
    arcs_a = _direction_arcs(fam_a, v)
    arcs_b = _direction_arcs(fam_b, v)
    if not arcs_a or not arcs_b:
        return None
    cross = math.inf
    for arc_a in arcs_a:
        for arc_b in arcs_b:
            cross = min(cross, _arc_pair_min_angle(arc_a, arc_b, target=math.pi))
            if cross <= margin:
                return {"cross": cross}
    return {
        "cross": cross,
        "ha": fam_a.max_cone_half_angle(),
        "hb": fam_b.max_cone_half_angle(),
        "la": _min_member_length(fam_a),
        "lb": _min_member_length(fam_b),
        "sa": _self_angle(fam_a, v),
        "sb": _self_angle(fam_b, v),
    }



def _sample_material(fam, rng, count):
    """Random points inside the open swept set (uniform over parameters)."""
    s = rng.uniform(0.0, 1.0, count)
    t = rng.uniform(fam.t_lo, fam.t_hi, count)
    a = fam.a(s)
    b = fam.b(s)
    mid = 0.5 * (a + b)
    half = 0.5 * (b - a)
    centers = mid + half * t[:, None]
    axes = half / np.linalg.norm(half, axis=1)[:, None]
    raw = rng.normal(size=(count, centers.shape[1]))
    raw -= (np.sum(raw * axes, axis=1))[:, None] * axes
    raw /= np.linalg.norm(raw, axis=1)[:, None]
    rho = fam.radii(t) * rng.uniform(0.0, 1.0, count) ** 0.5
    return centers + rho[:, None] * raw


def _sampled_band_check(fam_a, fam_b, exclude, seed=7, count=4000):
    """Safety-net membership cross-sampling outside the pinch balls: no
    sampled point of one family may fall inside the other."""
    rng = np.random.default_rng(seed)
    for src, dst in ((fam_a, fam_b), (fam_b, fam_a)):
        pts = _sample_material(src, rng, count)
        keep = np.ones(len(pts), dtype=bool)
        for center, radius in exclude:
            keep &= np.linalg.norm(pts - np.asarray(center), axis=1) > radius
        if np.any(dst.contains(pts[keep])):
            return False
    return True


_CERT_CACHE = {}


def certify_pair(fam_a, fam_b, margin=1e-9, pinch_radius=None):
    """Memoizing wrapper around the pair certification:  retry sweeps and
    stub covers revisit identical geometry constantly."""
    key = (fam_a.geo_key(), fam_b.geo_key(), margin, pinch_radius)
    hit = _CERT_CACHE.get(key)
    if hit is not None:
        ok, payload = hit
        if ok:
            return payload
        raise payload
    try:
        out = _certify_pair_impl(fam_a, fam_b, margin, pinch_radius)
    except CertificateFailure as fail:
        if len(_CERT_CACHE) > 200000:
            _CERT_CACHE.clear()
        _CERT_CACHE[key] = (False, fail)
        raise
    if len(_CERT_CACHE) > 200000:
        _CERT_CACHE.clear()
    _CERT_CACHE[key] = (True, out)
    return out


def _certify_pair_impl(fam_a, fam_b, margin=1e-9, pinch_radius=None):
    """Certify that two swept families are disjoint as open sets.

    Raises CertificateFailure when no route succeeds; returns the verified
    clearance (a distance for gap routes, an angle for cone/sector routes).
    Routing: bounding spheres; the transverse-sector test for families
    pinching along a common line; the plain branch-and-bound gap when the
    closures share nothing; otherwise cone separation at each shared point
    (with radius-aware widening) covering the material inside balls whose
    radius is derived from the certified angles, plus the banded gap outside
    those balls.
    """
    ca, ra = fam_a.bounding_sphere()
    cb, rb = fam_b.bounding_sphere()
    quick = float(np.linalg.norm(ca - cb)) - ra - rb
    if quick > margin:
        return quick

    shared_line = _shared_line(fam_a, fam_b)
    if shared_line is not None:
        sector = _sector_margin(fam_a, fam_b, *shared_line)
        if sector <= margin:
            raise CertificateFailure(
                f"sector separation along shared line failed for "
                f"{fam_a.label} vs {fam_b.label} (margin {sector:.3e})",
                labels=(fam_a.label, fam_b.label),
                kind="sector",
            )
        return sector

    shared = _shared_points(fam_a, fam_b)
    if not shared:
        gap = family_gap(fam_a, fam_b, target=margin)
        if gap <= margin:
            raise CertificateFailure(
                f"gap failed for {fam_a.label} vs {fam_b.label} ({gap:.3e})",
                labels=(fam_a.label, fam_b.label),
                kind="gap",
            )
        return gap
    return _certify_pinched(fam_a, fam_b, shared, margin, pinch_radius)


def _certify_pinched(fam_a, fam_b, shared, margin, pinch_radius):
    """Cone-plus-banded-gap route at shared closure points.

    At each shared point v, material of a family inside ball(v, R) must
    direction-align with the family's arc system at v: a member point z of a
    cigar with on-path endpoint p satisfies angle(z-p, axis) < ha, and
    |z - v| <= R forces both |z - p| and |p - v| below R/sin(theta) (theta
    the self-angle between axis and path), so the direction of z - v sits on
    the arcs widened by 2*ha + asin(2R/(L sin theta)).  R is chosen so that
    widening spends at most half of the certified cross-angle surplus.
    Outside the balls the branch-and-bound gap applies.
    """
    worst_angle = math.inf
    exclude = []
    for v in shared:
        data = _pinch_analysis(fam_a, fam_b, v, margin)
        if data is None:
            raise CertificateFailure(
                f"no direction data at a shared point for {fam_a.label} vs "
                f"{fam_b.label}",
                labels=(fam_a.label, fam_b.label),
                kind="cone",
            )
        surplus = data["cross"] - margin - 2.0 * data.get("ha", 0.0) - 2.0 * data.get("hb", 0.0)
        if "ha" not in data or surplus <= 0.0:
            raise CertificateFailure(
                f"cone separation failed at a shared point for {fam_a.label} "
                f"vs {fam_b.label} (cross {data['cross']:.3e})",
                labels=(fam_a.label, fam_b.label),
                kind="cone",
            )
        allowed = 0.25 * surplus  # per-family widening budget
        sin_a = math.sin(max(data["sa"], 1e-6))
        sin_b = math.sin(max(data["sb"], 1e-6))
        r_a = 0.5 * data["la"] * sin_a * math.sin(min(allowed, 0.5 * math.pi))
        r_b = 0.5 * data["lb"] * sin_b * math.sin(min(allowed, 0.5 * math.pi))
        radius = min(r_a, r_b)
        if pinch_radius is not None:
            radius = min(radius, pinch_radius)
        if radius <= 0.0:
            raise CertificateFailure(
                f"pinch ball degenerate for {fam_a.label} vs {fam_b.label}",
                labels=(fam_a.label, fam_b.label),
                kind="cone",
            )
        worst_angle = min(worst_angle, surplus - 2.0 * allowed)
        exclude.append((v, radius))

    gap = family_gap(fam_a, fam_b, exclude=exclude, target=margin, max_boxes=1500)
    if gap == -math.inf:
        # box budget exhausted: the analytic cone part stands on its own and
        # the band falls back to the sampled safety net
        if not _sampled_band_check(fam_a, fam_b, exclude):
            raise CertificateFailure(
                f"sampled band found an intersection for {fam_a.label} vs "
                f"{fam_b.label}",
                labels=(fam_a.label, fam_b.label),
                kind="band-sampled",
            )
        return worst_angle
    if gap <= margin:
        raise CertificateFailure(
            f"banded gap failed for {fam_a.label} vs {fam_b.label} ({gap:.3e})",
            labels=(fam_a.label, fam_b.label),
            kind="band",
        )
    return min(gap, worst_angle)


# ---------------------------------------------------------------------------
# cross-step reduction through the E2 projection


def pi2_stub_cover(fam, w_hat, level, grid=5):
    """Sub-families covering the material whose component along ``w_hat``
    is at most ``level`` in absolute value.

    The component of an axis point is bilinear in (sweep, slice), so its
    range over a parameter cell is attained at the cell corners; the slice
    radius fattens the range by scale/2.
    """
    w_hat = np.asarray(w_hat, dtype=float)
    ss = np.linspace(0.0, 1.0, grid)
    ts = np.linspace(fam.t_lo, fam.t_hi, grid)
    g = fam.centers(ss[:, None], np.broadcast_to(ts, (grid, grid))) @ w_hat
    fuzz = 0.5 * fam.scale
    out = []
    for i in range(grid - 1):
        for j in range(grid - 1):
            corners = (g[i, j], g[i + 1, j], g[i, j + 1], g[i + 1, j + 1])
            lo = min(corners) - fuzz
            hi = max(corners) + fuzz
            if hi < -level or lo > level:
                continue
            out.append(fam.sub(ss[i], ss[i + 1], ts[j], ts[j + 1]))
    return out


def certify_cross_step(fam_a, fam_b, w_a, w_b, angle, margin=1e-9):
    """Disjointness of supports from different steps via the transport-plane
    projection.

    Each family's projection to the transport plane lies in a segment along
    its own direction fattened by half its scale; the two segments meet at
    angle ``angle``, so any common point projects into a ball of radius
    rho* = (r_a + r_b)/sin(angle) + r_a + r_b.  Only the stub material with
    projection in that ball can collide, and the stubs are certified pairwise.
    """
    ca, ra = fam_a.bounding_sphere()
    cb, rb = fam_b.bounding_sphere()
    quick = float(np.linalg.norm(ca - cb)) - ra - rb
    if quick > margin:
        return quick
    r_a = 0.5 * fam_a.scale
    r_b = 0.5 * fam_b.scale
    if angle <= 0.0:
        raise CertificateFailure(
            "cross-step transport directions coincide",
            labels=(fam_a.label, fam_b.label),
            kind="cross-angle",
        )
    rho_star = (r_a + r_b) / math.sin(angle) + r_a + r_b
    worst = math.inf
    stubs_a = pi2_stub_cover(fam_a, w_a, rho_star + r_a)
    stubs_b = pi2_stub_cover(fam_b, w_b, rho_star + r_b)
    for sa in stubs_a:
        for sb in stubs_b:
            worst = min(worst, certify_pair(sa, sb, margin=margin))
    return worst
