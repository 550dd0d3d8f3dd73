"""Associative scans over sequences of array-valued elements.

An element sequence is a tuple of ndarrays that share a leading (time) axis;
``combine(a, b)`` must accept such tuples with any common leading shape and
return the composition "a then b".  The parallel scan is a work-efficient
two-phase (up-sweep / down-sweep) tree that handles any length without
identity padding: positions whose partner falls off the end of the array are
simply not combined at that level.  Each level is one vectorised ``combine``
call, so the tree has ``2 * ceil(log2 K)`` levels at most.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError

Element = tuple  # tuple of np.ndarray


@dataclass(frozen=True)
class AssociativeOperator:
    """A vectorised associative ``combine`` plus an optional identity element."""

    combine: Callable[[Element, Element], Element]
    identity: Element | None = None
    name: str = "op"

    def __call__(self, a: Element, b: Element) -> Element:
        return self.combine(a, b)


def _as_elems(elems) -> Element:
    if isinstance(elems, np.ndarray):
        return (elems,)
    return tuple(np.asarray(e) for e in elems)


def _length(elems: Element) -> int:
    if not elems or np.ndim(elems[0]) == 0:
        raise ContractError("scan needs a sequence with a leading axis")
    n = elems[0].shape[0]
    if any(e.shape[0] != n for e in elems):
        raise ContractError("element components disagree on sequence length")
    return n


def scan_sequential(op, elems, stats: dict | None = None) -> Element:
    """Inclusive prefix scan by left fold; the correctness oracle for :func:`scan_parallel`.

    When ``stats`` is given, ``stats["combines"]`` is incremented per combined position.
    """
    elems = _as_elems(elems)
    n = _length(elems)
    if n == 0:
        raise ContractError("scan of an empty sequence")
    out = [np.empty_like(e) for e in elems]
    acc = tuple(e[0] for e in elems)
    for o, v in zip(out, acc):
        o[0] = v
    for k in range(1, n):
        acc = op(acc, tuple(e[k] for e in elems))
        if stats is not None:
            stats["combines"] = stats.get("combines", 0) + 1
        for o, v in zip(out, acc):
            o[k] = v
    return tuple(out)


def scan_parallel(op, elems, stats: dict | None = None) -> Element:
    """Inclusive prefix scan with a two-phase logarithmic-depth tree.

    Up-sweep at stride ``s`` combines ``x[i-s] . x[i]`` for ``i = 2s-1, 4s-1, ...``;
    the down-sweep at stride ``s`` fills ``i = 3s-1, 5s-1, ...``.  The number of
    combines (per sequence position, recorded in ``stats["combines"]``) equals
    :func:`tree_combine_count`.
    """
    elems = _as_elems(elems)
    n = _length(elems)
    if n == 0:
        raise ContractError("scan of an empty sequence")
    x = [e.copy() for e in elems]
    s = 1
    while 2 * s <= n:
        tgt = slice(2 * s - 1, n, 2 * s)
        cnt = len(range(2 * s - 1, n, 2 * s))
        src = slice(s - 1, s - 1 + 2 * s * cnt, 2 * s)
        res = op(tuple(c[src] for c in x), tuple(c[tgt] for c in x))
        for c, r in zip(x, res):
            c[tgt] = r
        _tally(stats, cnt)
        s *= 2
    s //= 2
    while s >= 1:
        cnt = len(range(3 * s - 1, n, 2 * s))
        if cnt:
            tgt = slice(3 * s - 1, n, 2 * s)
            src = slice(2 * s - 1, 2 * s - 1 + 2 * s * cnt, 2 * s)
            res = op(tuple(c[src] for c in x), tuple(c[tgt] for c in x))
            for c, r in zip(x, res):
                c[tgt] = r
            _tally(stats, cnt)
        s //= 2
    return tuple(x)


def _tally(stats, cnt):
    if stats is not None:
        stats["combines"] = stats.get("combines", 0) + cnt


def tree_combine_count(n: int) -> int:
    """Exact number of pairwise combines :func:`scan_parallel` performs on ``n`` elements.

    ``C(1) = 0``, ``C(n) = n//2 + C(n//2) + (n+1)//2 - 1``; for ``n = 2**m`` this is
    ``2n - 2 - m``.
    """
    if n < 1:
        raise ContractError("length must be >= 1")
    total = 0
    while n > 1:
        total += n // 2 + (n + 1) // 2 - 1
        n //= 2
    return total


def tree_depth(n: int) -> int:
    """Number of sequential combine levels (up-sweep plus down-sweep)."""
    if n < 1:
        raise ContractError("length must be >= 1")
    up = 0
    s = 1
    while 2 * s <= n:
        up += 1
        s *= 2
    down = sum(1 for k in range(up) if 3 * (1 << k) - 1 < n)
    return up + down


# -- masked associative operator ----------------------------------------------

class MaskedOperator:
    """Lift of an associative operator to ``(element, mask)`` pairs.

    ``(a, m_a) . (b, 1) = (a, m_a)`` and ``(a, m_a) . (b, 0) = (a . b, m_a)``.
    The mask is the last component of each element tuple; its shape is the
    leading shape of the payload components.  The underlying operator is only
    evaluated where ``m_b == 0``; ``evaluated``/``skipped`` count those pairs.
    """

    def __init__(self, op):
        self.op = op
        self.evaluated = 0
        self.skipped = 0

    def __call__(self, a: Element, b: Element) -> Element:
        *pa, ma = a
        *pb, mb = b
        ma = np.asarray(ma, dtype=bool)
        mb = np.asarray(mb, dtype=bool)
        live = ~mb
        n_live = int(live.sum())
        self.evaluated += n_live
        self.skipped += int(mb.size - n_live)
        out = [np.array(p, copy=True) for p in pa]
        if n_live:
            if live.ndim == 0:
                res = self.op(tuple(pa), tuple(pb))
                out = [np.asarray(r) for r in res]
            else:
                res = self.op(tuple(p[live] for p in pa), tuple(p[live] for p in pb))
                for o, r in zip(out, res):
                    o[live] = r
        return (*out, np.array(ma, copy=True))


def lift_mao(op) -> MaskedOperator:
    return MaskedOperator(op)


def check_right_padding(mask: np.ndarray, axis: int = 0) -> None:
    """Raise unless ``mask`` is non-decreasing along ``axis`` (once 1, always 1)."""
    m = np.asarray(mask).astype(np.int8)
    if m.shape[axis] > 1 and np.any(np.diff(m, axis=axis) < 0):
        raise ContractError("mask is not a right-padding mask")


# -- a few stock operators ---------------------------------------------------------

def scalar_add() -> AssociativeOperator:
    return AssociativeOperator(lambda a, b: (a[0] + b[0],), identity=(np.zeros(()),), name="add")


def matrix_product() -> AssociativeOperator:
    """Composition of linear maps: ``a then b`` is ``b @ a``."""
    return AssociativeOperator(lambda a, b: (b[0] @ a[0],), name="matmul")


def _mobius_combine(a: Element, b: Element) -> Element:
    a11, a12, a21, a22 = a
    b11, b12, b21, b22 = b
    c11 = b11 * a11 + b12 * a21
    c12 = b11 * a12 + b12 * a22
    c21 = b21 * a11 + b22 * a21
    c22 = b21 * a12 + b22 * a22
    scale = np.maximum(np.maximum(np.abs(c11), np.abs(c12)), np.maximum(np.abs(c21), np.abs(c22)))
    scale = np.where(scale > 0, scale, 1)
    return c11 / scale, c12 / scale, c21 / scale, c22 / scale


def _affine_combine(a: Element, b: Element) -> Element:
    return b[0] * a[0], b[0] * a[1] + b[1]


def mobius_operator() -> AssociativeOperator:
    """Composition of fractional-linear maps ``p -> (m11 p + m12) / (m21 p + m22)``.

    Results are renormalised by their largest entry, which leaves the map unchanged.
    """
    return AssociativeOperator(_mobius_combine, name="mobius")


def affine_operator() -> AssociativeOperator:
    """Composition of scalar affine maps ``x -> alpha x + beta``."""
    return AssociativeOperator(_affine_combine, name="affine")


def apply_mobius(maps: Sequence[np.ndarray], p0) -> np.ndarray:
    m11, m12, m21, m22 = maps
    return (m11 * p0 + m12) / (m21 * p0 + m22)


def apply_affine(maps: Sequence[np.ndarray], x0) -> np.ndarray:
    alpha, beta = maps
    return alpha * x0 + beta
