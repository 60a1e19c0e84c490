"""Decode (beta, A) model outputs into feasible tours.

Every function here consumes the model's outputs by value and never calls
back into the network: one forward pass supplies everything the search
needs, which is what makes wide beams cheap. Greedy and sampling record a
per-step probability trace for policy-gradient training; beam search
accumulates log-probabilities and picks a final tour by rule. Ties always
break toward the lowest index so decoding is deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import neg_inf
from .instances import CvrpInstance, CvrpSolution, validate_tour
from .model import ModelOutput


@dataclass(frozen=True)
class DecodeTrace:
    tour: np.ndarray  # permutation of 0..n-1
    step_probs: np.ndarray  # length n; first entry from softmax(beta)
    log_prob: float  # sum of log step probs (final return-step has prob 1)


@dataclass(frozen=True)
class BeamConfig:
    width: int = 1
    final_rule: str = "shortest_tour"  # or "highest_prob"

    def __post_init__(self):
        if self.width < 1:
            raise ValueError("beam width must be >= 1")
        if self.final_rule not in ("shortest_tour", "highest_prob"):
            raise ValueError(f"unknown final rule {self.final_rule!r}")


def _softmax(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    if np.any(m <= neg_inf(x.dtype)):
        raise ValueError("softmax over a fully masked vector")
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    if np.any(m <= neg_inf(x.dtype)):
        raise ValueError("softmax over a fully masked vector")
    s = x - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def step_distribution(A: np.ndarray, visited: np.ndarray, current: int) -> np.ndarray:
    """Next-node probabilities: softmax of A[current] with visited masked out."""
    visited = np.asarray(visited, dtype=bool)
    if visited.all():
        raise ValueError("no unvisited node left to step to")
    row = np.where(visited, neg_inf(A.dtype), A[current])
    return _softmax(row)


def greedy_decode(out: ModelOutput) -> DecodeTrace:
    """Arg-max start from beta, then arg-max next-node at every step."""
    beta, A = out.beta, out.A
    n = beta.shape[0]
    probs0 = _softmax(beta)
    start = int(np.argmax(beta))
    order = np.empty(n, dtype=np.int64)
    step_probs = np.empty(n, dtype=np.float64)
    order[0] = start
    step_probs[0] = probs0[start]
    visited = np.zeros(n, dtype=bool)
    visited[start] = True
    cur = start
    for i in range(1, n):
        gamma = step_distribution(A, visited, cur)
        cur = int(np.argmax(gamma))
        order[i] = cur
        step_probs[i] = gamma[cur]
        visited[cur] = True
    return DecodeTrace(tour=order, step_probs=step_probs,
                       log_prob=float(np.log(step_probs).sum()))


def sample_decode(out: ModelOutput, seed) -> DecodeTrace:
    """Start sampled from softmax(beta), every step sampled from the masked
    next-node distribution; deterministic given the seed/generator."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    beta, A = out.beta, out.A
    n = beta.shape[0]
    probs0 = _softmax(beta).astype(np.float64)
    start = _sample_index(probs0, rng)
    order = np.empty(n, dtype=np.int64)
    step_probs = np.empty(n, dtype=np.float64)
    order[0] = start
    step_probs[0] = probs0[start]
    visited = np.zeros(n, dtype=bool)
    visited[start] = True
    cur = start
    for i in range(1, n):
        gamma = step_distribution(A, visited, cur).astype(np.float64)
        cur = _sample_index(gamma / gamma.sum(), rng)
        order[i] = cur
        step_probs[i] = gamma[cur]
        visited[cur] = True
    return DecodeTrace(tour=order, step_probs=step_probs,
                       log_prob=float(np.log(step_probs).sum()))


def _sample_index(p: np.ndarray, rng: np.random.Generator) -> int:
    u = rng.random()
    return int(min(np.searchsorted(np.cumsum(p), u, side="right"), p.shape[0] - 1))


def beam_decode(out: ModelOutput, cfg: BeamConfig,
                dm: np.ndarray | None = None) -> np.ndarray:
    """Width-B breadth-first search over tour prefixes.

    Prefixes are scored by cumulative log-probability (log domain, never
    linear products). The first step branches over starting nodes weighted
    by softmax(beta), so width 1 reduces to greedy exactly. The final tour
    among the B completed ones is picked by ``final_rule``; the shortest
    tour rule needs the distance matrix.
    """
    if cfg.final_rule == "shortest_tour" and dm is None:
        raise ValueError("shortest_tour rule requires the distance matrix")
    beta, A = out.beta, out.A
    n = beta.shape[0]
    B = cfg.width

    logb = _log_softmax(beta.astype(np.float64))
    starts = np.argsort(-logb, kind="stable")[:min(B, n)]
    tours = starts[:, None].astype(np.int64)
    cums = logb[starts]
    visited = np.zeros((len(starts), n), dtype=bool)
    visited[np.arange(len(starts)), starts] = True

    sentinel = neg_inf(np.float64)
    for _ in range(1, n):
        rows = A[tours[:, -1]].astype(np.float64)  # (beams, n)
        masked = np.where(visited, sentinel, rows)
        lgam = _log_softmax(masked)
        cand = cums[:, None] + lgam
        valid = int((~visited).sum())
        keep = min(B, valid)
        flat = np.argsort(-cand.ravel(), kind="stable")[:keep]
        src, nxt = np.divmod(flat, n)
        tours = np.concatenate([tours[src], nxt[:, None]], axis=1)
        cums = cand.ravel()[flat]
        visited = visited[src].copy()
        visited[np.arange(keep), nxt] = True

    if cfg.final_rule == "highest_prob":
        best = int(np.argmax(cums))
    else:
        lengths = dm[tours, np.roll(tours, -1, axis=1)].sum(axis=1)
        best = int(np.argmin(lengths))
    return tours[best]


def tour_log_prob(out: ModelOutput, tour: np.ndarray) -> float:
    """Log-probability of the given tour under the decode chain rule:
    softmax(beta) for the start, masked next-node softmax per step, and a
    probability-1 terminal return contributing zero."""
    beta, A = out.beta, out.A
    n = beta.shape[0]
    order = validate_tour(tour, n)
    logp = float(_log_softmax(beta.astype(np.float64))[order[0]])
    visited = np.zeros(n, dtype=bool)
    visited[order[0]] = True
    for i in range(1, n):
        row = np.where(visited, neg_inf(np.float64), A[order[i - 1]].astype(np.float64))
        logp += float(_log_softmax(row)[order[i]])
        visited[order[i]] = True
    return logp


def greedy_decode_batch(beta: np.ndarray, A: np.ndarray) -> np.ndarray:
    """Vectorized greedy decode over a batch: (b,n), (b,n,n) -> (b,n) tours."""
    b, n = beta.shape
    order = np.empty((b, n), dtype=np.int64)
    visited = np.zeros((b, n), dtype=bool)
    cur = np.argmax(beta, axis=1)
    order[:, 0] = cur
    rows_b = np.arange(b)
    visited[rows_b, cur] = True
    sentinel = neg_inf(A.dtype)
    for i in range(1, n):
        rows = A[rows_b, cur]
        masked = np.where(visited, sentinel, rows)
        cur = np.argmax(masked, axis=1)
        order[:, i] = cur
        visited[rows_b, cur] = True
    return order


def cvrp_decode(out: ModelOutput, inst: CvrpInstance, policy: str = "greedy",
                seed=0) -> CvrpSolution:
    """Capacity-feasible decoding over n+1 nodes with the depot at index 0.

    The walk starts at the depot (the pointer is unused for routing);
    customers whose demand exceeds the remaining capacity are masked,
    selecting the depot closes the route and resets capacity, and the
    depot is never available twice in a row. Feasible because every
    demand fits an empty vehicle.
    """
    if policy not in ("greedy", "sample"):
        raise ValueError("cvrp policy must be 'greedy' or 'sample'")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    A = out.A
    n = inst.n
    if A.shape != (n + 1, n + 1):
        raise ValueError("edge scores must cover depot plus customers")
    demands = inst.demands
    visited = np.zeros(n + 1, dtype=bool)
    remaining = float(inst.capacity)
    cur = 0
    routes: list[list[int]] = []
    route: list[int] = []
    while not visited[1:].all():
        mask = visited.copy()
        mask[0] = cur == 0  # depot unavailable while standing on it
        over = np.zeros(n + 1, dtype=bool)
        over[1:] = demands > remaining + 1e-12
        mask |= over
        assert not mask.all(), "infeasible state despite demands <= capacity"
        row = np.where(mask, neg_inf(A.dtype), A[cur])
        gamma = _softmax(row).astype(np.float64)
        if policy == "greedy":
            nxt = int(np.argmax(gamma))
        else:
            nxt = _sample_index(gamma / gamma.sum(), rng)
        if nxt == 0:
            routes.append(route)
            route = []
            remaining = float(inst.capacity)
        else:
            route.append(nxt)
            visited[nxt] = True
            remaining -= float(demands[nxt - 1])
        cur = nxt
    if route:
        routes.append(route)
    return CvrpSolution(routes=tuple(tuple(r) for r in routes))
