"""Concrete sample-sharing layouts and realized estimator values.

A layout fixes, for each control variate ``i``, the global sample indices
feeding ``Qbar_i(S_i^1)`` and ``muhat_i(S_i^2)``. Points are drawn once per
realization and every model is evaluated at most once per point. Index sets
are stored as tuples of half-open ``(start, stop)`` ranges.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .ensemble import ModelEnsemble, MomentSpec
from .errors import LayoutError
from .theory import Allocation, Scheme, fixed_weights_result, structure

Ranges = tuple[tuple[int, int], ...]

CHUNK = 2000


@dataclass(frozen=True)
class SchemeLayout:
    """Index sets of one estimator realization.

    Attributes:
        scheme: sampling scheme.
        n: high-fidelity count N; ``Q`` is evaluated on ``[0, N)``.
        counts: evaluation count of each control variate.
        cme: ranges behind ``Qbar_i(S_i^1)``, one entry per control variate.
        ecvm: ranges behind ``muhat_i(S_i^2)``.
        total_points: number of distinct input points drawn.
        kl: ``(K, L)`` for ACV-KL.
    """

    scheme: Scheme
    n: int
    counts: tuple[int, ...]
    cme: tuple[Ranges, ...]
    ecvm: tuple[Ranges, ...]
    total_points: int
    kl: tuple[int, int] | None = None

    @property
    def num_cv(self) -> int:
        return len(self.counts)

    def model_ranges(self, i: int) -> Ranges:
        """Merged ranges on which model ``i`` (0 = high fidelity) is evaluated."""
        if i == 0:
            return ((0, self.n),)
        return _merge(self.cme[i - 1] + self.ecvm[i - 1])

    def effective_allocation(self) -> Allocation:
        """Allocation whose ratios are the realized ``N_i / N``."""
        if self.scheme is Scheme.MC:
            return Allocation(self.n, ())
        return Allocation.from_counts(self.n, self.counts, self.kl)

    def cost(self, costs: Sequence[float]) -> float:
        costs = np.asarray(costs, dtype=float)
        return float(costs[0] * self.n + np.dot(costs[1 : 1 + self.num_cv], self.counts))


@dataclass(frozen=True, eq=False)
class EstimatorReport:
    """One realized estimate and its bookkeeping."""

    estimate: float
    weights_used: np.ndarray
    cost: float
    predicted_variance: float
    scheme: Scheme
    seed: object
    allocation: Allocation
    layout: SchemeLayout | None = field(default=None, repr=False)


def _merge(ranges: Ranges) -> Ranges:
    out: list[list[int]] = []
    for start, stop in sorted(r for r in ranges if r[1] > r[0]):
        if out and start <= out[-1][1]:
            out[-1][1] = max(out[-1][1], stop)
        else:
            out.append([start, stop])
    return tuple((a, b) for a, b in out)


def _size(ranges: Ranges) -> int:
    return sum(b - a for a, b in _merge(ranges))


def _indices(ranges: Ranges) -> set[int]:
    return {k for a, b in ranges for k in range(a, b)}


def build_layout(scheme: Scheme, alloc: Allocation) -> SchemeLayout:
    """Sample sets of ``scheme`` for an integer N, with ``N_i = ceil(r_i N)``.

    Raises:
        LayoutError: when the rounded counts violate the scheme's orderings.
    """
    scheme = Scheme(scheme)
    if scheme is Scheme.MC:
        if not alloc.is_integral:
            raise LayoutError(f"N={alloc.n} is not an integer")
        n = int(alloc.n)
        return SchemeLayout(scheme, n, (), (), (), n)

    n, counts = alloc.counts()
    m = len(counts)
    if m == 0:
        raise LayoutError(f"{scheme.value} needs at least one control variate")
    s = ((0, n),)

    if scheme is Scheme.MFMC:
        prev = n
        for i, c in enumerate(counts):
            if c <= prev:
                raise LayoutError(f"MFMC needs N_{i + 1}={c} > N_{i}={prev}")
            prev = c
        full = (n,) + counts
        cme = tuple(((0, full[i]),) for i in range(m))
        ecvm = tuple(((0, full[i + 1]),) for i in range(m))
        return SchemeLayout(scheme, n, counts, cme, ecvm, counts[-1])

    if scheme in (Scheme.WRDIFF, Scheme.RDIFF):
        sizes, prev = [], n
        for i, c in enumerate(counts):
            size = c - prev
            if size < 1:
                raise LayoutError(
                    f"partition S_{i + 1}^2 would hold {size} points (N_{i + 1}={c}, "
                    f"|S_{i}^2|={prev}); every partition needs at least one"
                )
            sizes.append(size)
            prev = size
        blocks, start = [(0, n)], n
        for size in sizes:
            blocks.append((start, start + size))
            start += size
        cme = tuple((blocks[i],) for i in range(m))
        ecvm = tuple((blocks[i + 1],) for i in range(m))
        return SchemeLayout(scheme, n, counts, cme, ecvm, start)

    low = [i + 1 for i, c in enumerate(counts) if c <= n]
    if low:
        raise LayoutError(f"{scheme.value} needs N_i > N={n}; violated for i={low}")

    if scheme is Scheme.ACV_IS:
        ecvm, start = [], n
        for c in counts:
            tail = c - n
            ecvm.append(((0, n), (start, start + tail)))
            start += tail
        return SchemeLayout(scheme, n, counts, (s,) * m, tuple(ecvm), start)

    if scheme is Scheme.ACV_MF:
        ecvm = tuple(((0, c),) for c in counts)
        return SchemeLayout(scheme, n, counts, (s,) * m, ecvm, max(counts))

    if scheme is Scheme.ACV_KL:
        if alloc.kl is None:
            raise LayoutError("ACV-KL needs (K, L) on the allocation")
        k, l = alloc.kl
        n_l = counts[l - 1]
        high = [i + 1 for i in range(l, m) if counts[i] <= n_l]
        if high:
            raise LayoutError(f"ACV-KL needs N_i > N_L={n_l} for i > L; violated for i={high}")
        cme = tuple(s if i < k else ((0, n_l),) for i in range(m))
        ecvm = tuple(((0, c),) for c in counts)
        return SchemeLayout(scheme, n, counts, cme, ecvm, max(counts), (k, l))

    raise LayoutError(f"unknown scheme {scheme}")


def audit_layout(layout: SchemeLayout) -> list[str]:
    """Check the set relations of the layout's scheme; returns every violation found."""
    errs: list[str] = []
    n, m = layout.n, layout.num_cv
    s = set(range(n))
    cme = [_indices(r) for r in layout.cme]
    ecvm = [_indices(r) for r in layout.ecvm]
    used = set(s)
    for i in range(m):
        union = cme[i] | ecvm[i]
        used |= union
        if len(union) != layout.counts[i]:
            errs.append(f"model {i + 1} evaluated on {len(union)} points, expected {layout.counts[i]}")
        if not cme[i] or not ecvm[i]:
            errs.append(f"model {i + 1} has an empty sample set")
        if cme[i] == ecvm[i]:
            errs.append(f"model {i + 1}: S_i^1 == S_i^2 makes Delta_i identically zero")
    if used != set(range(layout.total_points)):
        errs.append("drawn points are not exactly the union of all sample sets")

    sch = layout.scheme
    if sch is Scheme.MFMC:
        chain = [s] + ecvm
        for i in range(m):
            if cme[i] != chain[i]:
                errs.append(f"MFMC: S_{i + 1}^1 != S_{i}")
            if not chain[i] < chain[i + 1]:
                errs.append(f"MFMC: S_{i} not strictly nested in S_{i + 1}")
    elif sch in (Scheme.WRDIFF, Scheme.RDIFF):
        chain = [s] + ecvm
        for i in range(m):
            if cme[i] != chain[i]:
                errs.append(f"RDiff: S_{i + 1}^1 != S_{i}^2")
        for i in range(m + 1):
            for j in range(i + 1, m + 1):
                if chain[i] & chain[j]:
                    errs.append(f"RDiff: partitions {i} and {j} overlap")
    elif sch is Scheme.ACV_IS:
        tails = [ecvm[i] - s for i in range(m)]
        for i in range(m):
            if cme[i] != s or not s <= ecvm[i]:
                errs.append(f"ACV-IS: model {i + 1} does not share S")
            for j in range(i + 1, m):
                if tails[i] & tails[j]:
                    errs.append(f"ACV-IS: tails {i + 1} and {j + 1} overlap")
    elif sch in (Scheme.ACV_MF, Scheme.ACV_KL):
        k, l = layout.kl if sch is Scheme.ACV_KL else (m, m)
        for i in range(m):
            want = s if i < k else ecvm[l - 1]
            if cme[i] != want:
                errs.append(f"{sch.value}: S_{i + 1}^1 is not the required shared set")
            if ecvm[i] != set(range(layout.counts[i])):
                errs.append(f"{sch.value}: S_{i + 1} is not a shared prefix")
    return errs


def _eval_model(ensemble: ModelEnsemble, i: int, points: np.ndarray, ranges: Ranges) -> np.ndarray:
    """Values of model ``i`` on ``ranges``, scattered into a full-width array."""
    out = np.full(points.shape[:2], np.nan)
    idx = np.concatenate([np.arange(a, b) for a, b in ranges])
    out[:, idx] = ensemble.evaluate(i, points[:, idx, :])
    return out


def _range_mean(values: np.ndarray, ranges: Ranges) -> np.ndarray:
    total = sum(values[:, a:b].sum(axis=1) for a, b in ranges)
    return total / _size(ranges)


def simulate(layout: SchemeLayout, ensemble: ModelEnsemble, rng: np.random.Generator, n_rep: int):
    """``n_rep`` independent realizations of ``Qbar(S)`` and the discrepancies.

    Returns:
        Tuple ``(qbar, delta)`` with shapes ``(n_rep,)`` and ``(n_rep, M)``.
    """
    if ensemble.num_cv < layout.num_cv:
        raise ValueError(
            f"layout uses {layout.num_cv} control variates, ensemble has {ensemble.num_cv}"
        )
    points = ensemble.sample(rng, (n_rep, layout.total_points))
    qbar = ensemble.evaluate(0, points[:, : layout.n, :]).mean(axis=1)
    delta = np.empty((n_rep, layout.num_cv))
    for i in range(layout.num_cv):
        vals = _eval_model(ensemble, i + 1, points, layout.model_ranges(i + 1))
        delta[:, i] = _range_mean(vals, layout.cme[i]) - _range_mean(vals, layout.ecvm[i])
    return qbar, delta


def chunk_seeds(
    seed: int, n_rep: int, chunk: int = CHUNK, stream: int = 0
) -> list[tuple[np.random.SeedSequence, int]]:
    """Deterministic ``(seed sequence, size)`` pairs; chunk ``c`` owns spawn key ``(stream, c)``."""
    out = []
    for c, start in enumerate(range(0, n_rep, chunk)):
        ss = np.random.SeedSequence(seed, spawn_key=(stream, c))
        out.append((ss, min(chunk, n_rep - start)))
    return out


def replicate(
    layout: SchemeLayout,
    ensemble: ModelEnsemble,
    n_rep: int,
    seed: int,
    threads: int = 1,
    chunk: int = CHUNK,
    stream: int = 0,
):
    """Many realizations with per-chunk RNG streams; output is independent of ``threads``."""
    jobs = chunk_seeds(seed, n_rep, chunk, stream)

    def run(job):
        ss, size = job
        return simulate(layout, ensemble, np.random.default_rng(ss), size)

    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, jobs))
    else:
        parts = [run(j) for j in jobs]
    qbar = np.concatenate([p[0] for p in parts])
    delta = np.concatenate([p[1] for p in parts], axis=0)
    return qbar, delta


def predicted_variance(
    layout: SchemeLayout, weights: Sequence[float], moments: MomentSpec | None
) -> float:
    """Variance of the layout's estimator for fixed weights, from exact moments."""
    if moments is None:
        return math.nan
    if layout.scheme is Scheme.MC:
        return moments.var_q / layout.n
    alloc = layout.effective_allocation()
    sub = moments.subset(layout.num_cv) if moments.num_cv != layout.num_cv else moments
    return fixed_weights_result(structure(layout.scheme, sub, alloc), sub, weights).variance


def realize(
    layout: SchemeLayout,
    weights: Sequence[float],
    ensemble: ModelEnsemble,
    seed: int | np.random.SeedSequence | np.random.Generator | None,
    moments: MomentSpec | None = None,
) -> EstimatorReport:
    """Draw the layout's points once and assemble ``Qbar + alpha . Delta``.

    Args:
        layout: sample sets from :func:`build_layout`.
        weights: one weight per control variate.
        ensemble: models to evaluate; extra trailing models are ignored.
        seed: seed or generator owning this realization's stream.
        moments: moments for the predicted variance; defaults to the ensemble's.

    Raises:
        ValueError: if the weight count does not match the layout.
    """
    weights = np.asarray(weights, dtype=float).reshape(-1)
    if weights.size != layout.num_cv:
        raise ValueError(f"expected {layout.num_cv} weights, got {weights.size}")
    if ensemble.num_cv < layout.num_cv:
        raise ValueError(
            f"layout uses {layout.num_cv} control variates, ensemble has {ensemble.num_cv}"
        )
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    qbar, delta = simulate(layout, ensemble, rng, 1)
    estimate = float(qbar[0] + delta[0] @ weights)
    moments = moments if moments is not None else ensemble.moments
    return EstimatorReport(
        estimate=estimate,
        weights_used=weights,
        cost=layout.cost(ensemble.costs),
        predicted_variance=predicted_variance(layout, weights, moments),
        scheme=layout.scheme,
        seed=seed,
        allocation=layout.effective_allocation(),
        layout=layout,
    )
