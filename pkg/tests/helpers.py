from __future__ import annotations

import numpy as np

from acvmc.theory import Allocation, Scheme, kl_pairs, kl_violations


def random_allocation(scheme: Scheme, rng: np.random.Generator, m: int, n_max: int = 20,
                      r_max: int = 8) -> Allocation:
    """Random integer allocation that is feasible for ``scheme``."""
    scheme = Scheme(scheme)
    n = int(rng.integers(2, n_max + 1))
    top = r_max * n
    if scheme is Scheme.MC:
        return Allocation(n, ())
    if scheme is Scheme.MFMC:
        counts = np.sort(rng.choice(np.arange(n + 1, top + 1), size=m, replace=False))
        return Allocation.from_counts(n, counts.tolist())
    if scheme in (Scheme.WRDIFF, Scheme.RDIFF):
        prev, counts = n, []
        for _ in range(m):
            part = int(rng.integers(max(1, n - prev), top - prev + 1))
            counts.append(prev + part)
            prev = part
        return Allocation.from_counts(n, counts)
    while True:
        counts = rng.integers(n + 1, top + 1, size=m).tolist()
        alloc = Allocation.from_counts(n, counts)
        if scheme is not Scheme.ACV_KL:
            return alloc
        pairs = [p for p in kl_pairs(m) if not kl_violations(alloc.r, *p)]
        if pairs:
            k, l = pairs[int(rng.integers(len(pairs)))]
            return alloc.with_kl(k, l)
