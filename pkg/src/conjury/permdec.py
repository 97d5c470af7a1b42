"""Factorization of permutations into transpositions with bounded contamination.

The factorization follows the zig-zag pattern (-1,1), (0,1), (-2,2), (-1,2),
(-3,3), (-2,3), ... folded around a base element of each cycle.  That pattern
buys three structural properties that the downstream geometric assembly leans
on: no transposition repeats, every element is moved by at most two steps, and
every contamination set has at most four elements.  Cycles are dovetailed
round-robin by increasing minimum element, which cannot enlarge contamination
sets because chains never leave a cycle's support.
"""

from __future__ import annotations

from dataclasses import dataclass

from .codes import GraphCode
from .errors import ConstructionError, ValidationError

__all__ = [
    "Permutation",
    "TranspositionSeq",
    "ContTable",
    "decompose",
    "contamination",
    "cont_pairs",
    "interpolate_graphs",
]


class Permutation:
    """Finite-support permutation of the integers.

    ``mapping`` holds only the moved elements.  ``demo_window`` marks the
    shift-on-window demonstration mode, which exists solely to reproduce the
    doubly-infinite zig-zag pattern at finite width.
    """

    def __init__(self, mapping=None, demo_window=None):
        mapping = dict(mapping or {})
        mapping = {m: v for m, v in mapping.items() if v != m}
        if sorted(mapping.keys()) != sorted(mapping.values()):
            raise ValidationError("mapping is not a bijection of its support")
        self.mapping = mapping
        self.demo_window = demo_window

    def __call__(self, m):
        return self.mapping.get(m, m)

    def __eq__(self, other):
        return isinstance(other, Permutation) and self.mapping == other.mapping

    @property
    def support(self):
        return set(self.mapping)

    def cycles(self):
        """Non-trivial cycles, each rotated to start at its minimum, sorted
        by that minimum."""
        seen = set()
        out = []
        for start in sorted(self.mapping):
            if start in seen:
                continue
            cyc = [start]
            seen.add(start)
            x = self(start)
            while x != start:
                cyc.append(x)
                seen.add(x)
                x = self(x)
            out.append(tuple(cyc))
        return out

    @classmethod
    def identity(cls):
        return cls({})

    @classmethod
    def from_cycles(cls, cycles):
        mapping = {}
        for cyc in cycles:
            cyc = list(cyc)
            if len(set(cyc)) != len(cyc):
                raise ValidationError(f"cycle {cyc} repeats an element")
            for a in cyc:
                if a in mapping:
                    raise ValidationError("cycles are not disjoint")
            for a, b in zip(cyc, cyc[1:] + cyc[:1]):
                mapping[a] = b
        return cls(mapping)

    @classmethod
    def from_one_line(cls, images, offset=1):
        """Permutation of offset..offset+n-1 with images[i] the image of
        offset+i."""
        n = len(images)
        return cls({offset + i: images[i] for i in range(n)})

    @classmethod
    def shift_demo(cls, radius):
        """Cyclic shift on the window [-radius, radius]: the finite stand-in
        for the shift m_i -> m_{i+1} on a doubly-infinite cycle."""
        if radius < 1:
            raise ValidationError("demo radius must be >= 1")
        window = list(range(-radius, radius + 1))
        mapping = {window[i]: window[(i + 1) % len(window)] for i in range(len(window))}
        return cls(mapping, demo_window=radius)

    @classmethod
    def random(cls, rng, support_size, low=1):
        elems = list(range(low, low + support_size))
        images = list(elems)
        rng.shuffle(images)
        return cls(dict(zip(elems, images)))

    def __repr__(self):
        return f"Permutation({self.cycles()!r})"


@dataclass(frozen=True)
class TranspositionSeq:
    """Ordered transposition steps, applied earliest first.

    ``distances`` is filled by geometry consumers with the ambient distance
    between the two swapped vertices of each step.
    """

    steps: tuple
    distances: tuple | None = None

    def __post_init__(self):
        norm = []
        for a, b in self.steps:
            if a == b:
                raise ValidationError("a transposition must move two elements")
            norm.append((min(a, b), max(a, b)))
        object.__setattr__(self, "steps", tuple(norm))
        if self.distances is not None and len(self.distances) != len(norm):
            raise ValidationError("one distance per step required")

    def __len__(self):
        return len(self.steps)

    def elements(self):
        out = set()
        for a, b in self.steps:
            out.update((a, b))
        return out

    def apply(self, m):
        for a, b in self.steps:
            if m == a:
                m = b
            elif m == b:
                m = a
        return m

    def validate_structure(self):
        """Properties 2 and 3 of the factorization: no repeated transposition,
        at most two moves per element."""
        if len(set(self.steps)) != len(self.steps):
            raise ConstructionError("a transposition repeats", clause="no-repeat")
        counts = {}
        for a, b in self.steps:
            counts[a] = counts.get(a, 0) + 1
            counts[b] = counts.get(b, 0) + 1
        worst = max(counts.values(), default=0)
        if worst > 2:
            raise ConstructionError(
                f"an element is moved {worst} times", clause="two-moves"
            )

    def with_distances(self, dist_fn):
        return TranspositionSeq(
            self.steps, tuple(float(dist_fn(a, b)) for a, b in self.steps)
        )


@dataclass(frozen=True)
class ContTable:
    """Contamination sets plus the frozen-stage bookkeeping derived from them.

    Stages are 1-based step indices; an element is frozen at stage i when no
    step with index >= i moves it.
    """

    steps: tuple
    cont: dict
    frozen_stage: dict
    J: dict
    T: dict

    def cont_of(self, m):
        return self.cont.get(m, frozenset((m,)))

    def frozen_at(self, m, stage):
        return stage >= self.frozen_stage.get(m, 1)

    def max_cont_size(self):
        return max((len(s) for s in self.cont.values()), default=1)


def _zigzag_window(k):
    """Index pattern (-1,1), (0,1), ..., (-k,k), (-k+1,k) on the window of
    half-width k."""
    steps = []
    for j in range(1, k + 1):
        steps.append((-j, j))
        steps.append((-j + 1, j))
    return steps


def _cycle_steps(cycle):
    """Zig-zag factorization of one cycle (a_0 ... a_{L-1}), base a_0.

    Window labels j are folded onto the cycle through a_{j mod L}; for odd L
    the truncated doubly-infinite pattern composes to exactly the cyclic
    shift, for even L one extra transposition closes the window.
    """
    L = len(cycle)
    if L < 2:
        return []
    if L == 2:
        return [(cycle[0], cycle[1])]
    if L % 2 == 1:
        k = (L - 1) // 2
        idx_steps = _zigzag_window(k)
    else:
        k = L // 2
        idx_steps = _zigzag_window(k - 1)
        idx_steps.append((-k + 1, k))
    return [(cycle[i % L], cycle[j % L]) for i, j in idx_steps]


def _split_cycle_halves(cycle):
    """Fallback: write the cycle as a composition of two shorter cycles
    sharing one element (right half applied first)."""
    L = len(cycle)
    h = L // 2
    right = cycle[h:]
    left = cycle[: h + 1]
    return [right, left]


def _dovetail(per_cycle):
    """Round-robin interleave, preserving each cycle's internal order."""
    out = []
    i = 0
    while any(i < len(steps) for steps in per_cycle):
        for steps in per_cycle:
            if i < len(steps):
                out.append(steps[i])
        i += 1
    return out


def _certify(seq: TranspositionSeq, p: Permutation):
    seq.validate_structure()
    probe = set(p.support) | seq.elements()
    for m in probe:
        if seq.apply(m) != p(m):
            raise ConstructionError(
                f"composition disagrees with the permutation at {m}",
                clause="composition",
            )
    table = contamination(seq)
    if table.max_cont_size() > 4:
        raise ConstructionError(
            "a contamination set exceeds four elements", clause="contamination"
        )
    return table


def decompose(p: Permutation) -> TranspositionSeq:
    """Ordered transposition factorization of a finite-support permutation.

    Applied earliest first the steps reproduce p on its support.  The primary
    zig-zag pattern is certified (composition, no-repeat, two-moves,
    contamination <= 4); if certification ever failed the cycle would be
    split into two shorter halves and re-certified.
    """
    if p.demo_window is not None:
        seq = TranspositionSeq(tuple(_zigzag_window(p.demo_window)))
        _certify(seq, p)
        return seq

    cycles = p.cycles()
    candidates = [[_cycle_steps(c) for c in cycles]]
    halved = []
    for c in cycles:
        if len(c) > 3:
            halved.extend(_cycle_steps(h) for h in _split_cycle_halves(c))
        else:
            halved.append(_cycle_steps(c))
    candidates.append(halved)

    last_error = None
    for per_cycle in candidates:
        seq = TranspositionSeq(tuple(_dovetail(per_cycle)))
        try:
            _certify(seq, p)
            return seq
        except ConstructionError as err:
            last_error = err
    raise last_error


def contamination(seq: TranspositionSeq) -> ContTable:
    """Contamination sets by exhaustive chain enumeration.

    A chain walks through steps of strictly increasing index, hopping to the
    partner element at each step it touches.
    """
    steps = seq.steps
    by_elem = {}
    for idx, (a, b) in enumerate(steps, start=1):
        by_elem.setdefault(a, []).append(idx)
        by_elem.setdefault(b, []).append(idx)

    def reach(m):
        seen_states = set()
        out = {m}
        stack = [(m, 1)]
        while stack:
            elem, lo = stack.pop()
            for idx in by_elem.get(elem, ()):
                if idx < lo:
                    continue
                a, b = steps[idx - 1]
                other = b if elem == a else a
                out.add(other)
                state = (other, idx + 1)
                if state not in seen_states:
                    seen_states.add(state)
                    stack.append(state)
        return frozenset(out)

    elems = sorted(by_elem)
    cont = {m: reach(m) for m in elems}
    frozen_stage = {m: max(by_elem[m]) + 1 for m in elems}
    J = {m: max(frozen_stage.get(x, 1) for x in cont[m]) for m in elems}
    T = {}
    for m in elems:
        bound = [e for idx, (a, b) in enumerate(steps, start=1) if idx <= J[m] for e in (a, b)]
        T[m] = max(bound) if bound else m
    return ContTable(steps=steps, cont=cont, frozen_stage=frozen_stage, J=J, T=T)


def cont_pairs(table: ContTable, n, m):
    """Cartesian product Cont_n x Cont_m of edge contamination."""
    if n == m:
        raise ValidationError("cont_pairs needs two distinct elements")
    return frozenset((a, b) for a in table.cont_of(n) for b in table.cont_of(m))


def interpolate_graphs(e1: GraphCode, seq: TranspositionSeq):
    """Relabeled-graph sequence E^(1) .. E^(K+1) along the transpositions.

    Each successor renames the two swapped vertices; the final graph is e1
    relabeled by the whole composition.  Vertices are 1-indexed, so step
    elements must lie in 1..order.
    """
    for a, b in seq.steps:
        if not (1 <= a <= e1.order and 1 <= b <= e1.order):
            raise ValidationError(f"step ({a},{b}) outside vertex range 1..{e1.order}")
    out = [e1]
    g = e1
    for a, b in seq.steps:
        mapping = {v: v for v in range(1, e1.order + 1)}
        mapping[a], mapping[b] = b, a
        g = g.relabel(mapping)
        out.append(g)
    return out
