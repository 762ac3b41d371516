"""Independent exact oracles used as ground truth by the test suite."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError, SizeLimitError
from .instance import CVRP, TSP, Instance
from .solution import Tour, capacity_violation, objective

HELD_KARP_MAX = 13
EXACT_CVRP_MAX = 8


@dataclass(frozen=True)
class OracleResult:
    cost: float
    tour: Tour
    n_total: int
    method: str


def _distance_matrix(coords: np.ndarray) -> np.ndarray:
    diff = coords[:, None, :] - coords[None, :, :]
    return np.sqrt((diff * diff).sum(axis=2))


def held_karp(instance: Instance) -> OracleResult:
    """Exact TSP optimum by bitmask dynamic programming over subsets."""
    if instance.kind != TSP:
        raise InvalidArgumentError("held_karp handles tsp instances only")
    n = instance.n_total
    if n > HELD_KARP_MAX:
        raise SizeLimitError(f"held_karp capped at n <= {HELD_KARP_MAX}")
    dist = _distance_matrix(instance.coords)
    # best[mask][last] = min cost of a path 0 -> ... -> last visiting mask,
    # mask over nodes 1..n-1 (node 0 fixed as the start).
    m = n - 1
    full = (1 << m) - 1
    inf = float("inf")
    best = [[inf] * m for _ in range(full + 1)]
    parent = [[-1] * m for _ in range(full + 1)]
    for j in range(m):
        best[1 << j][j] = dist[0][j + 1]
    for mask in range(1, full + 1):
        row = best[mask]
        for j in range(m):
            cj = row[j]
            if cj == inf or not mask & (1 << j):
                continue
            for k in range(m):
                if mask & (1 << k):
                    continue
                nmask = mask | (1 << k)
                cand = cj + dist[j + 1][k + 1]
                if cand < best[nmask][k]:
                    best[nmask][k] = cand
                    parent[nmask][k] = j
    best_cost = inf
    best_last = -1
    for j in range(m):
        cand = best[full][j] + dist[j + 1][0]
        if cand < best_cost:
            best_cost = cand
            best_last = j
    seq = [best_last + 1]
    mask, j = full, best_last
    while parent[mask][j] != -1:
        pj = parent[mask][j]
        mask ^= 1 << j
        j = pj
        seq.append(j + 1)
    seq.append(0)
    seq.reverse()
    tour = Tour.from_sequence(np.array(seq, dtype=np.int64))
    return OracleResult(cost=float(best_cost), tour=tour, n_total=n, method="held_karp")


def _best_route_order(
    depot_xy: np.ndarray, coords: np.ndarray, block: tuple[int, ...]
) -> tuple[float, tuple[int, ...]]:
    """Cheapest depot -> customers -> depot ordering of one route."""
    if len(block) == 1:
        c = block[0]
        return 2.0 * float(np.linalg.norm(coords[c] - depot_xy)), block
    best_cost, best_order = float("inf"), block
    first = block[0]  # fix the first customer; reversal is symmetric
    rest = block[1:]
    for perm in itertools.permutations(rest):
        order = (first,) + perm
        cost = float(np.linalg.norm(coords[order[0]] - depot_xy))
        for a, b in zip(order, order[1:]):
            cost += float(np.linalg.norm(coords[b] - coords[a]))
        cost += float(np.linalg.norm(depot_xy - coords[order[-1]]))
        if cost < best_cost:
            best_cost, best_order = cost, order
    return best_cost, best_order


def _partitions(items: list[int]):
    """All set partitions (Bell-number many)."""
    if not items:
        yield []
        return
    head, rest = items[0], items[1:]
    for part in _partitions(rest):
        for i in range(len(part)):
            yield part[:i] + [part[i] + [head]] + part[i + 1:]
        yield [[head]] + part


def exact_cvrp(instance: Instance) -> OracleResult:
    """Exact CVRP optimum: minimum over capacity-feasible set partitions of
    the customers, each route ordered optimally. Routes are capped at the
    instance's depot-copy count so the result is expressible as one cycle."""
    if instance.kind != CVRP:
        raise InvalidArgumentError("exact_cvrp handles cvrp instances only")
    if instance.n_customers > EXACT_CVRP_MAX:
        raise SizeLimitError(f"exact_cvrp capped at n <= {EXACT_CVRP_MAX}")
    d = instance.n_depot_copies
    cap = instance.capacity
    depot_xy = instance.coords[0]
    customers = [int(c) for c in instance.customer_indices()]
    best_cost, best_routes = float("inf"), None
    for part in _partitions(customers):
        if len(part) > d:
            continue
        if any(sum(int(instance.demands[c]) for c in blk) > cap for blk in part):
            continue
        cost = 0.0
        routes = []
        for blk in part:
            c, order = _best_route_order(depot_xy, instance.coords, tuple(blk))
            cost += c
            routes.append(order)
        if cost < best_cost:
            best_cost, best_routes = cost, routes
    assert best_routes is not None  # singleton partition always feasible
    seq: list[int] = []
    for i, route in enumerate(best_routes):
        seq.append(i)
        seq.extend(route)
    seq.extend(range(len(best_routes), d))
    tour = Tour.from_sequence(np.array(seq, dtype=np.int64))
    return OracleResult(
        cost=float(best_cost), tour=tour, n_total=instance.n_total, method="exact_cvrp"
    )


@dataclass(frozen=True)
class TourReport:
    is_single_cycle: bool
    covers_all: bool
    pred_succ_consistent: bool
    violation: float
    failures: tuple[str, ...] = field(default_factory=tuple)

    @property
    def ok(self) -> bool:
        return not self.failures


def verify_tour(instance: Instance, successor: np.ndarray) -> TourReport:
    """Post-hoc gate on solver outputs; checks structure from the raw
    successor array without trusting Tour's constructor."""
    successor = np.asarray(successor, dtype=np.int64)
    n = instance.n_total
    failures: list[str] = []
    covers_all = successor.shape == (n,) and set(successor.tolist()) == set(range(n))
    if not covers_all:
        failures.append("successor is not a permutation of all nodes")
    single = False
    if successor.shape == (n,):
        seen = set()
        node = 0
        for _ in range(n):
            if node in seen or not 0 <= node < n:
                break
            seen.add(node)
            node = int(successor[node])
        single = node == 0 and len(seen) == n
    if not single:
        failures.append("successor is not a single cycle")
    consistent = False
    violation = float("nan")
    if single and covers_all:
        tour = Tour(successor)
        consistent = bool((tour.predecessor[tour.successor] == np.arange(n)).all())
        if not consistent:
            failures.append("predecessor/successor inconsistent")
        violation = (
            capacity_violation(instance, tour) if instance.kind == CVRP else 0.0
        )
    return TourReport(
        is_single_cycle=single,
        covers_all=covers_all,
        pred_succ_consistent=consistent,
        violation=violation,
        failures=tuple(failures),
    )
