"""The graph-to-diffeomorphism reduction on 5-space.

A graph on the placed vertices drives one flow per vertex pair: inside the
pair's cigar, points move radially toward the centerline when the pair is an
edge and away from it otherwise, under the field cutoff * axial-bump *
radial-bump * radial-vector.  The needle cutoff vanishes flatly on the
segments joining the accumulation point to the vertices, which keeps the
assembled map smooth where infinitely many cigars would pile up; at finite
truncation it still pins the fixed set.

Within a slice the field is radial, so evaluation reduces to one scalar
initial value problem per point; the quadrature table of the radial profile
provides an independent closed-form route used as the test oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .codes import GraphCode
from .errors import AmbiguousDetectionError, ValidationError
from .geometry5 import VertexPlacement, _pair, needle_collar
from .integrate import time_one_map
from .planar import _decay_verdict
from .profiles import RadialFlowTable, flat_bump, flat_bump_sharp, smooth_step

__all__ = [
    "FlowProfile",
    "Diffeo5",
    "build_R",
    "orbit_class",
    "edge_detect",
    "needle_flatness_probe",
]

_TABLES = {}


def _table_for(radial):
    if radial not in _TABLES:
        _TABLES[radial] = RadialFlowTable(profile=radial)
    return _TABLES[radial]


@dataclass(frozen=True)
class FlowProfile:
    """Shape choices for the cigar fields: the axial bump, the radial bump
    (with its flow table), and the needle-cutoff collar width."""

    axial: callable
    radial: callable
    collar: float
    name: str = "standard"

    @property
    def table(self):
        return _table_for(self.radial)


def standard_profile(placement, eps_map, sharp=False):
    collar = needle_collar(placement, eps_map)
    if sharp:
        return FlowProfile(
            axial=flat_bump_sharp, radial=flat_bump_sharp, collar=collar,
            name="sharp",
        )
    return FlowProfile(axial=flat_bump, radial=flat_bump, collar=collar)


class Diffeo5:
    """Evaluable diffeomorphism of 5-space built from per-pair radial flows.

    The map is the identity outside the open cigars; centerlines, cigar
    boundaries, and the needle set are fixed exactly.
    """

    def __init__(self, placement: VertexPlacement, graph: GraphCode, eps_map, profile):
        if graph.order != placement.count:
            raise ValidationError(
                f"graph order {graph.order} != placement count {placement.count}"
            )
        self.placement = placement
        self.graph = graph
        self.eps_map = dict(eps_map)
        self.profile = profile
        self.cigars = {
            pr: placement.cigar(pr[0], pr[1], self.eps_map[pr])
            for pr in placement.pairs()
        }
        self._needle_segs = placement.needles()

    def sign(self, m, n):
        """+1 on edges (attracting), -1 on non-edges (repelling)."""
        return 1.0 if self.graph.adjacency(m, n) else -1.0

    def needle_cutoff(self, points):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        dist = np.full(len(pts), np.inf)
        for a, b in self._needle_segs:
            d = b - a
            denom = float(np.dot(d, d))
            t = np.clip((pts - a) @ d / denom, 0.0, 1.0)
            proj = a + t[:, None] * d
            dist = np.minimum(dist, np.linalg.norm(pts - proj, axis=1))
        return smooth_step(dist / self.profile.collar)

    def _radial_shift(self, pair, t, rho, u4, tol, closed_form):
        """New radial fractions for points in one cigar's slices."""
        cig = self.cigars[pair]
        radius = cig.slice_radius(t)
        s0 = rho / radius
        axial = self.profile.axial(t)
        sign = self.sign(*pair)
        if closed_form:
            return self.profile.table.time_map(s0, sign * axial)
        frame_pts = lambda s: cig.point_at(t, u4, s * radius)

        def rhs(s):
            theta = self.needle_cutoff(frame_pts(np.clip(s, 0.0, 1.0)))
            return -sign * theta * axial * self.profile.radial(np.clip(s, 0.0, 1.0)) * s

        return time_one_map(rhs, s0, tol)

    def displacement(self, points, tol=1e-8, closed_form=False):
        """f(p) - p computed in slice coordinates (no cancellation even when
        the shift is far below the coordinate ulp)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        out = np.zeros_like(pts)
        for pair, cig in self.cigars.items():
            t, rho, u4 = cig.coords(pts)
            inside = (np.abs(t) < 1.0) & (rho < cig.slice_radius(t)) & (rho > 0.0)
            if not np.any(inside):
                continue
            t_in = t[inside]
            s1 = self._radial_shift(
                pair, t_in, rho[inside], u4[inside], tol, closed_form
            )
            radius = cig.slice_radius(t_in)
            delta = (s1 * radius - rho[inside])[:, None] * (u4[inside] @ cig.frame.T)
            out[inside] = delta
        return out

    def eval(self, points, tol=1e-8):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return pts + self.displacement(pts, tol=tol)

    def closed_eval(self, points):
        """Quadrature-table route (the independent oracle for eval)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return pts + self.displacement(pts, closed_form=True)

    def __call__(self, points):
        return self.eval(points)

    def radial_fraction(self, points):
        """(pair, t, s) of each point inside some cigar, NaN rows outside."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        t_out = np.full(len(pts), np.nan)
        s_out = np.full(len(pts), np.nan)
        for pair, cig in self.cigars.items():
            t, rho, _ = cig.coords(pts)
            inside = (np.abs(t) < 1.0) & (rho < cig.slice_radius(t))
            t_out[inside] = t[inside]
            s_out[inside] = rho[inside] / cig.slice_radius(t[inside])
        return t_out, s_out


def build_R(graph: GraphCode, placement: VertexPlacement, eps_map=None,
            profile=None) -> Diffeo5:
    """Assemble the reduction at the placement's working sizes (half the
    pairwise eps bound unless a certified size map is supplied)."""
    if eps_map is None:
        eps_map = {pr: 0.5 * placement.eps[pr] for pr in placement.pairs()}
    if profile is None:
        profile = standard_profile(placement, eps_map)
    return Diffeo5(placement, graph, eps_map, profile)


def orbit_class(f: Diffeo5, p, max_iter=200, tol=1e-9):
    """Classify the orbit of p: fixed, converging to a centerline,
    escaping to the cigar boundary, or undecided at the iteration cap."""
    if max_iter > 10**5:
        raise ValidationError("max_iter capped at 1e5")
    p = np.asarray(p, dtype=float)[None, :]
    _, s0 = f.radial_fraction(p)
    if math.isnan(s0[0]):
        moved = float(np.linalg.norm(f.displacement(p)))
        return "fixed" if moved < 1e-12 else "undecided"
    if s0[0] == 0.0:
        return "fixed"
    s_prev = s0[0]
    z = p.copy()
    for _ in range(max_iter):
        z = z + f.displacement(z)
        _, s = f.radial_fraction(z)
        if math.isnan(s[0]):
            return "undecided"
        if s[0] < s_prev * (1.0 - 1e-9):
            if s[0] < 0.5 * s0[0]:
                return "to_centerline"
        elif s[0] > s_prev * (1.0 + 1e-9):
            if s[0] > min(1.0, 2.0 * s0[0]) or s[0] > 0.97:
                return "to_boundary"
        else:
            return "fixed" if abs(s[0] - s0[0]) < 1e-12 else "undecided"
        s_prev = s[0]
    return "undecided"


def edge_detect(f: Diffeo5, tol=1e-8) -> GraphCode:
    """Recover the adjacency table from the radial displacement sign at the
    mid-slice of every cigar."""
    edges = []
    for pair, cig in f.cigars.items():
        u = np.zeros((1, 4))
        u[0, 0] = 1.0
        rho = 0.5 * cig.slice_radius(0.0)
        z = cig.point_at(np.array([0.0]), u, np.array([rho]))
        t, r0, u4 = cig.coords(z)
        s1 = f._radial_shift(pair, t, r0, u4, tol, closed_form=False)
        delta = s1[0] * cig.slice_radius(t[0]) - r0[0]
        if abs(delta) < 10.0 * tol * rho:
            raise AmbiguousDetectionError(
                f"radial displacement {delta:.3e} too small at {pair}"
            )
        if delta < 0.0:
            edges.append(pair)
    return GraphCode.from_edge_list(f.placement.count, edges)


def needle_flatness_probe(f: Diffeo5, center, orders=(0, 1, 2, 3, 4),
                          scales=(1e-1, 1e-2, 1e-3, 1e-4, 1e-5),
                          decay_factor=1e-2):
    """Decay of ||f(x)-x|| / |x-center|^k toward a needle point, sampled in
    the incident cigars with displacements from the closed-form route."""
    center = np.asarray(center, dtype=float)
    scales = tuple(sorted(scales, reverse=True))
    disp_chunks = []
    dist_chunks = []
    for pair, cig in f.cigars.items():
        ts = np.concatenate([
            np.linspace(-0.999, 0.999, 41),
            1.0 - np.geomspace(1e-6, 1.0, 25)[:-1],
            -1.0 + np.geomspace(1e-6, 1.0, 25)[:-1],
        ])
        for frac in (0.25, 0.5, 0.75):
            radius = cig.slice_radius(ts)
            s1 = f.profile.table.time_map(
                np.full(ts.shape, frac), f.sign(*pair) * f.profile.axial(ts)
            )
            disp = np.abs(s1 - frac) * radius
            u = np.zeros((len(ts), 4))
            u[:, 0] = 1.0
            pts = cig.point_at(ts, u, frac * radius)
            disp_chunks.append(disp)
            dist_chunks.append(np.linalg.norm(pts - center, axis=1))
    disp = np.concatenate(disp_chunks)
    dist = np.concatenate(dist_chunks)
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
                sups.append(float(np.max(disp[sel] / dist[sel] ** k)))
        ratios[k] = tuple(sups)
        flat[k] = _decay_verdict(sups, witnessed, decay_factor)
    return ratios, flat
