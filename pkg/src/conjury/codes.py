"""Finite encodings of binary sequences and countable graphs.

A depth-N binary code stands for the cylinder of all of its infinite
extensions; every claim made downstream is "within prefix N".  Vertices of
graph codes are 1-indexed.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

from .errors import ValidationError

__all__ = [
    "BinaryCode",
    "GraphCode",
    "AgreementReport",
    "VertexBijection",
    "e0_compare",
    "graph_iso",
    "verify_bijection",
]

ISO_ORACLE_MAX_ORDER = 8


@dataclass(frozen=True)
class BinaryCode:
    """Prefix of a one-sided binary sequence; bits[0] is the first symbol."""

    bits: tuple

    def __post_init__(self):
        object.__setattr__(self, "bits", tuple(int(b) for b in self.bits))
        if any(b not in (0, 1) for b in self.bits):
            raise ValidationError("code bits must be 0 or 1")

    @classmethod
    def from_string(cls, text):
        text = text.strip()
        if not text or any(c not in "01" for c in text):
            raise ValidationError(f"not a binary string: {text!r}")
        return cls(tuple(int(c) for c in text))

    @property
    def depth(self):
        return len(self.bits)

    def __str__(self):
        return "".join(str(b) for b in self.bits)


@dataclass(frozen=True)
class GraphCode:
    """Symmetric adjacency table on vertices 1..order with empty diagonal."""

    order: int
    edges: frozenset

    def __post_init__(self):
        if self.order < 1:
            raise ValidationError("graph order must be >= 1")
        normalized = set()
        for e in self.edges:
            m, n = e
            if m == n:
                raise ValidationError("loops are not allowed")
            if not (1 <= m <= self.order and 1 <= n <= self.order):
                raise ValidationError(f"edge {e} outside 1..{self.order}")
            normalized.add(frozenset((m, n)))
        object.__setattr__(self, "edges", frozenset(normalized))

    @classmethod
    def from_edge_list(cls, order, pairs):
        return cls(order, frozenset(frozenset(p) for p in pairs))

    def adjacency(self, m, n):
        if m == n:
            return False
        return frozenset((m, n)) in self.edges

    def relabel(self, mapping):
        """Graph with vertex m renamed mapping[m]; mapping must be a bijection
        of 1..order."""
        return GraphCode.from_edge_list(
            self.order, [(mapping[m], mapping[n]) for (m, n) in self.edge_pairs()]
        )

    def edge_pairs(self):
        return sorted(tuple(sorted(e)) for e in self.edges)

    def __str__(self):
        return f"GraphCode(order={self.order}, edges={self.edge_pairs()})"


@dataclass(frozen=True)
class AgreementReport:
    """Outcome of comparing two same-depth codes position by position."""

    first_agreeing_index: int | None
    equal: bool


@dataclass(frozen=True)
class VertexBijection:
    """Bijection of 1..order, stored as images[m-1] = phi(m)."""

    images: tuple

    def __post_init__(self):
        images = tuple(int(v) for v in self.images)
        object.__setattr__(self, "images", images)
        if sorted(images) != list(range(1, len(images) + 1)):
            raise ValidationError("not a bijection of 1..n")

    @property
    def order(self):
        return len(self.images)

    def __call__(self, m):
        return self.images[m - 1]

    def inverse(self):
        inv = [0] * self.order
        for m, v in enumerate(self.images, start=1):
            inv[v - 1] = m
        return VertexBijection(tuple(inv))

    @classmethod
    def identity(cls, order):
        return cls(tuple(range(1, order + 1)))


def e0_compare(c1: BinaryCode, c2: BinaryCode) -> AgreementReport:
    """Smallest index k (0-based) such that the codes agree at every position
    >= k.  Absent when they disagree at the final position; equal reports
    agreement everywhere."""
    if c1.depth != c2.depth:
        raise ValidationError(f"depth mismatch: {c1.depth} != {c2.depth}")
    k = c1.depth
    for i in range(c1.depth - 1, -1, -1):
        if c1.bits[i] != c2.bits[i]:
            break
        k = i
    if k == c1.depth:
        return AgreementReport(first_agreeing_index=None, equal=False)
    return AgreementReport(first_agreeing_index=k, equal=(k == 0))


def verify_bijection(g1: GraphCode, g2: GraphCode, phi: VertexBijection) -> bool:
    """Edge-by-edge check that phi carries g1 onto g2."""
    if g1.order != g2.order or phi.order != g1.order:
        return False
    for m in range(1, g1.order + 1):
        for n in range(m + 1, g1.order + 1):
            if g1.adjacency(m, n) != g2.adjacency(phi(m), phi(n)):
                return False
    return True


def graph_iso(g1: GraphCode, g2: GraphCode) -> VertexBijection | None:
    """Exhaustive-search isomorphism oracle.

    Tries all order! bijections in lexicographic order (so the identity wins
    ties) and returns the first that matches, or None.  Deliberately brute
    force; refuses orders beyond ISO_ORACLE_MAX_ORDER.
    """
    if g1.order != g2.order:
        raise ValidationError("orders differ")
    if g1.order > ISO_ORACLE_MAX_ORDER:
        raise ValidationError(
            f"oracle is brute force by design; order {g1.order} > {ISO_ORACLE_MAX_ORDER}"
        )
    if len(g1.edges) != len(g2.edges):
        return None
    for images in itertools.permutations(range(1, g1.order + 1)):
        phi = VertexBijection(images)
        if verify_bijection(g1, g2, phi):
            return phi
    return None
