"""Geometric predicates and exact distances for the 5-space construction.

General-position tests are normalized (sines of angles, volumes over edge
products) so one margin applies across the exponentially shrinking scales of
the vertex sequence.  Convex-hull distances enumerate support faces and solve
the affine subproblems exactly, which is cheap for the <= 4-point spines used
as tube bounds.
"""

from __future__ import annotations

import itertools

import numpy as np

__all__ = [
    "collinearity_margin",
    "coplanarity_margin",
    "angle_between",
    "point_segment_distance",
    "segment_segment_distance",
    "simplex_distance",
    "min_angle_ray_to_segment",
]


def collinearity_margin(p, q, s):
    """sin of the angle at p between q and s: zero exactly when collinear."""
    u = np.asarray(q, float) - np.asarray(p, float)
    v = np.asarray(s, float) - np.asarray(p, float)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        return 0.0
    u, v = u / nu, v / nv
    # |u x v| in any dimension via Gram determinant
    g = 1.0 - np.dot(u, v) ** 2
    return float(np.sqrt(max(g, 0.0)))


def coplanarity_margin(p, q, s, u):
    """Normalized volume of the tetrahedron (p,q,s,u): zero when coplanar."""
    a = np.asarray(q, float) - np.asarray(p, float)
    b = np.asarray(s, float) - np.asarray(p, float)
    c = np.asarray(u, float) - np.asarray(p, float)
    na, nb, nc = np.linalg.norm(a), np.linalg.norm(b), np.linalg.norm(c)
    if na == 0.0 or nb == 0.0 or nc == 0.0:
        return 0.0
    m = np.stack([a / na, b / nb, c / nc])
    g = np.linalg.det(m @ m.T)
    return float(np.sqrt(max(g, 0.0)))


def angle_between(u, v):
    u = np.asarray(u, float)
    v = np.asarray(v, float)
    c = np.dot(u, v) / (np.linalg.norm(u) * np.linalg.norm(v))
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def point_segment_distance(p, a, b):
    p, a, b = (np.asarray(x, float) for x in (p, a, b))
    d = b - a
    denom = float(np.dot(d, d))
    t = 0.0 if denom == 0.0 else float(np.clip(np.dot(p - a, d) / denom, 0.0, 1.0))
    return float(np.linalg.norm(p - (a + t * d)))


def segment_segment_distance(a1, b1, a2, b2):
    """Exact distance between two closed segments in any dimension."""
    a1, b1, a2, b2 = (np.asarray(x, float) for x in (a1, b1, a2, b2))
    d1 = b1 - a1
    d2 = b2 - a2
    r = a1 - a2
    a = float(np.dot(d1, d1))
    e = float(np.dot(d2, d2))
    f = float(np.dot(d2, r))
    if a == 0.0 and e == 0.0:
        return float(np.linalg.norm(r))
    if a == 0.0:
        t = np.clip(f / e, 0.0, 1.0)
        return float(np.linalg.norm(a1 - (a2 + t * d2)))
    c = float(np.dot(d1, r))
    if e == 0.0:
        s = np.clip(-c / a, 0.0, 1.0)
        return float(np.linalg.norm(a1 + s * d1 - a2))
    b = float(np.dot(d1, d2))
    denom = a * e - b * b
    s = np.clip((b * f - c * e) / denom, 0.0, 1.0) if denom > 0.0 else 0.0
    t = (b * s + f) / e
    if t < 0.0:
        t = 0.0
        s = np.clip(-c / a, 0.0, 1.0)
    elif t > 1.0:
        t = 1.0
        s = np.clip((b - c) / a, 0.0, 1.0)
    return float(np.linalg.norm(a1 + s * d1 - (a2 + t * d2)))


def _face_distance(ps, qs):
    """Critical value of ||x-y|| for x, y affine in the given support points,
    or None when the critical point leaves the faces."""
    s0, t0 = ps[0], qs[0]
    ds = [p - s0 for p in ps[1:]]
    dt = [q - t0 for q in qs[1:]]
    cols = ds + [-d for d in dt]
    c = t0 - s0
    if not cols:
        return float(np.linalg.norm(c))
    A = np.stack(cols, axis=1)
    sol, *_ = np.linalg.lstsq(A, c, rcond=None)
    al = sol[: len(ds)]
    be = sol[len(ds):]
    tol = 1e-10
    if np.any(al < -tol) or al.sum() > 1.0 + tol:
        return None
    if np.any(be < -tol) or be.sum() > 1.0 + tol:
        return None
    x = s0 + sum(a * d for a, d in zip(al, ds))
    y = t0 + sum(b * d for b, d in zip(be, dt))
    return float(np.linalg.norm(x - y))


def simplex_distance(points_a, points_b):
    """Distance between the convex hulls of two point sets (each <= 4 points).

    Enumerates every pair of support faces and keeps the feasible critical
    values; the optimum's own support face always contributes, so the minimum
    over faces is the hull distance.
    """
    pa = [np.asarray(p, float) for p in points_a]
    pb = [np.asarray(p, float) for p in points_b]
    best = None
    for ka in range(1, len(pa) + 1):
        for sub_a in itertools.combinations(pa, ka):
            for kb in range(1, len(pb) + 1):
                for sub_b in itertools.combinations(pb, kb):
                    d = _face_distance(list(sub_a), list(sub_b))
                    if d is not None and (best is None or d < best):
                        best = d
    if best is None:
        # every critical point infeasible cannot happen for full faces
        raise RuntimeError("no feasible face pair")
    return best


def min_angle_ray_to_segment(origin, direction_point, seg_a, seg_b, samples=65):
    """min over y in [seg_a, seg_b] of the angle at origin between the rays
    origin->direction_point and origin->y, by dense scan plus golden-section
    refinement."""
    origin = np.asarray(origin, float)
    u = np.asarray(direction_point, float) - origin
    a = np.asarray(seg_a, float)
    b = np.asarray(seg_b, float)

    def ang(t):
        return angle_between(u, a + t * (b - a) - origin)

    ts = np.linspace(0.0, 1.0, samples)
    vals = [ang(t) for t in ts]
    i = int(np.argmin(vals))
    lo = ts[max(i - 1, 0)]
    hi = ts[min(i + 1, samples - 1)]
    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    x1 = hi - invphi * (hi - lo)
    x2 = lo + invphi * (hi - lo)
    f1, f2 = ang(x1), ang(x2)
    for _ in range(60):
        if f1 < f2:
            hi, x2, f2 = x2, x1, f1
            x1 = hi - invphi * (hi - lo)
            f1 = ang(x1)
        else:
            lo, x1, f1 = x1, x2, f2
            x2 = lo + invphi * (hi - lo)
            f2 = ang(x2)
    return min(f1, f2, vals[i])
