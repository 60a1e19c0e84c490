"""Exact tour oracles and classical construction/improvement heuristics.

All functions are pure; parallelize over instances freely. The exact
solvers refuse sizes beyond their documented caps unless the caller
raises the cap explicitly (memory and time grow as 2^n * n^2 for the
subset DP and (n-1)! for enumeration).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .instances import TspInstance, distance_matrix, tour_length


def _canonical_cycle(tour: np.ndarray) -> np.ndarray:
    """Rotate node 0 to the front and fix the orientation so that the two
    traversals of a cycle report one tour (and one float summation order)."""
    tour = np.asarray(tour, dtype=np.int64)
    pos = int(np.flatnonzero(tour == 0)[0])
    tour = np.roll(tour, -pos)
    if tour.shape[0] > 2 and tour[1] > tour[-1]:
        tour = np.roll(tour[::-1], 1)
    return tour

BRUTE_FORCE_MAX_N = 10
HELD_KARP_MAX_N = 16

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba present in normal installs
    _HAVE_NUMBA = False


@dataclass(frozen=True)
class OracleResult:
    tour: np.ndarray
    length: float
    method: str


def _resolve_dm(inst: TspInstance | np.ndarray) -> np.ndarray:
    if isinstance(inst, TspInstance):
        return distance_matrix(inst)
    return np.asarray(inst, dtype=np.float64)


def brute_force(inst: TspInstance | np.ndarray, max_n: int = BRUTE_FORCE_MAX_N) -> OracleResult:
    """Minimum over all (n-1)!/2 distinct cycles; node 0 fixed, reversals skipped."""
    dm = _resolve_dm(inst)
    n = dm.shape[0]
    if n > max_n:
        raise ValueError(f"brute_force refuses n={n} > {max_n}")
    best_len = np.inf
    best: tuple[int, ...] | None = None
    rest = list(range(1, n))
    for perm in itertools.permutations(rest):
        if n > 2 and perm[0] > perm[-1]:
            continue  # each cycle visited once per orientation
        length = dm[0, perm[0]]
        for a, b in zip(perm, perm[1:]):
            length += dm[a, b]
        length += dm[perm[-1], 0]
        if length < best_len:
            best_len = length
            best = perm
    tour = _canonical_cycle(np.array((0,) + best, dtype=np.int64))
    return OracleResult(tour=tour, length=tour_length(tour, dm), method="brute_force")


def _held_karp_python(dm: np.ndarray) -> tuple[float, np.ndarray]:
    n = dm.shape[0]
    m = n - 1  # subsets over nodes 1..n-1
    full = 1 << m
    dp = np.full((full, m), np.inf)
    parent = np.full((full, m), -1, dtype=np.int16)
    for k in range(m):
        dp[1 << k, k] = dm[0, k + 1]
    for mask in range(1, full):
        row = dp[mask]
        for j in range(m):
            cur = row[j]
            if not np.isfinite(cur) or not (mask >> j) & 1:
                continue
            for k in range(m):
                if (mask >> k) & 1:
                    continue
                nm = mask | (1 << k)
                cand = cur + dm[j + 1, k + 1]
                if cand < dp[nm, k]:
                    dp[nm, k] = cand
                    parent[nm, k] = j
    closing = dp[full - 1] + dm[1:, 0]
    last = int(np.argmin(closing))
    return float(closing[last]), _reconstruct(parent, full - 1, last, n)


def _reconstruct(parent: np.ndarray, mask: int, last: int, n: int) -> np.ndarray:
    seq = []
    while last >= 0:
        seq.append(last + 1)
        nxt = int(parent[mask, last])
        mask ^= 1 << last
        last = nxt
    seq.append(0)
    return np.array(seq[::-1], dtype=np.int64)


if _HAVE_NUMBA:

    @njit(cache=True)
    def _held_karp_kernel(dm):  # pragma: no cover - exercised via held_karp
        n = dm.shape[0]
        m = n - 1
        full = 1 << m
        dp = np.full((full, m), np.inf)
        parent = np.full((full, m), -1, dtype=np.int16)
        for k in range(m):
            dp[1 << k, k] = dm[0, k + 1]
        for mask in range(1, full):
            for j in range(m):
                cur = dp[mask, j]
                if cur == np.inf or not (mask >> j) & 1:
                    continue
                for k in range(m):
                    if (mask >> k) & 1:
                        continue
                    nm = mask | (1 << k)
                    cand = cur + dm[j + 1, k + 1]
                    if cand < dp[nm, k]:
                        dp[nm, k] = cand
                        parent[nm, k] = j
        return dp, parent


def held_karp(inst: TspInstance | np.ndarray, max_n: int = HELD_KARP_MAX_N) -> OracleResult:
    """Optimal cycle via subset dynamic programming with parent reconstruction.

    The default cap keeps memory under ~20 MB; callers that accept the
    2^n blow-up (e.g. n=20 for held-out scoring) may raise ``max_n``.
    """
    dm = _resolve_dm(inst)
    n = dm.shape[0]
    if n > max_n:
        raise ValueError(f"held_karp refuses n={n} > {max_n}")
    if n == 2:
        return OracleResult(np.array([0, 1]), float(dm[0, 1] + dm[1, 0]), "held_karp")
    if _HAVE_NUMBA and n > 3:
        dp, parent = _held_karp_kernel(np.ascontiguousarray(dm, dtype=np.float64))
        full = 1 << (n - 1)
        closing = dp[full - 1] + dm[1:, 0]
        last = int(np.argmin(closing))
        tour = _reconstruct(parent, full - 1, last, n)
    else:
        _, tour = _held_karp_python(dm)
    tour = _canonical_cycle(tour)
    return OracleResult(tour=tour, length=tour_length(tour, dm), method="held_karp")


def nearest_insertion(inst: TspInstance | np.ndarray) -> np.ndarray:
    """Grow a cycle from the closest pair, always inserting the node nearest
    to the current cycle at its cheapest position."""
    dm = _resolve_dm(inst)
    n = dm.shape[0]
    if n < 3:
        raise ValueError("insertion heuristics need n >= 3")
    masked = dm + np.where(np.eye(n, dtype=bool), np.inf, 0.0)
    i, j = np.unravel_index(np.argmin(masked), masked.shape)
    cycle = [int(i), int(j)]
    in_cycle = np.zeros(n, dtype=bool)
    in_cycle[[i, j]] = True
    while len(cycle) < n:
        dist_to_cycle = dm[:, cycle].min(axis=1)
        dist_to_cycle[in_cycle] = np.inf
        k = int(np.argmin(dist_to_cycle))
        _insert_cheapest(cycle, k, dm)
        in_cycle[k] = True
    return np.array(cycle, dtype=np.int64)


def farthest_insertion(inst: TspInstance | np.ndarray) -> np.ndarray:
    """Like nearest insertion but selecting the node farthest from the cycle."""
    dm = _resolve_dm(inst)
    n = dm.shape[0]
    if n < 3:
        raise ValueError("insertion heuristics need n >= 3")
    i, j = np.unravel_index(np.argmax(dm), dm.shape)
    cycle = [int(i), int(j)]
    in_cycle = np.zeros(n, dtype=bool)
    in_cycle[[i, j]] = True
    while len(cycle) < n:
        dist_to_cycle = dm[:, cycle].min(axis=1)
        dist_to_cycle[in_cycle] = -np.inf
        k = int(np.argmax(dist_to_cycle))
        _insert_cheapest(cycle, k, dm)
        in_cycle[k] = True
    return np.array(cycle, dtype=np.int64)


def _insert_cheapest(cycle: list[int], k: int, dm: np.ndarray) -> None:
    arr = np.array(cycle)
    nxt = np.roll(arr, -1)
    delta = dm[arr, k] + dm[k, nxt] - dm[arr, nxt]
    pos = int(np.argmin(delta))
    cycle.insert(pos + 1, k)


def two_opt(tour: np.ndarray, dm: np.ndarray, max_passes: int = 50) -> np.ndarray:
    """First-improvement 2-opt; output length never exceeds the input's."""
    order = np.asarray(tour, dtype=np.int64).copy()
    n = order.shape[0]
    for _ in range(max_passes):
        improved = False
        for i in range(n - 1):
            a, b = order[i], order[(i + 1) % n]
            # reversing order[i+1 .. j] swaps edges (a,b),(c,d) for (a,c),(b,d)
            for j in range(i + 2, n):
                if i == 0 and j == n - 1:
                    continue
                c, d = order[j], order[(j + 1) % n]
                if dm[a, c] + dm[b, d] < dm[a, b] + dm[c, d] - 1e-12:
                    order[i + 1:j + 1] = order[i + 1:j + 1][::-1]
                    improved = True
                    a, b = order[i], order[(i + 1) % n]
        if not improved:
            break
    return order
