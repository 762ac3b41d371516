"""Tour representation, objective, CVRP feasibility accounting, node features.

A tour is one Hamiltonian cycle over all nodes (depot copies included), stored
as successor/predecessor arrays. Routes are the maximal customer segments
between depot copies; empty routes (depot followed by depot) are legal.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import InfeasibleConstructionError, InvalidArgumentError
from .instance import CVRP, TSP, Instance


class FeasibilityClass(Enum):
    FEASIBLE = 0
    EPS_FEASIBLE = 1
    INFEASIBLE = 2


class Tour:
    """Hamiltonian cycle as successor/predecessor arrays."""

    __slots__ = ("successor", "predecessor")

    def __init__(self, successor: np.ndarray):
        successor = np.asarray(successor, dtype=np.int64)
        n = successor.shape[0]
        if n < 3:
            raise InvalidArgumentError("tour needs at least 3 nodes")
        # Single-orbit check: walking n successor steps from 0 must visit
        # every node exactly once and return to 0.
        seen = np.zeros(n, dtype=bool)
        node = 0
        for _ in range(n):
            if node < 0 or node >= n or seen[node]:
                raise InvalidArgumentError("successor array is not one cycle")
            seen[node] = True
            node = successor[node]
        if node != 0 or not seen.all():
            raise InvalidArgumentError("successor array is not one cycle")
        self.successor = successor
        pred = np.empty(n, dtype=np.int64)
        pred[successor] = np.arange(n, dtype=np.int64)
        self.predecessor = pred

    @staticmethod
    def from_sequence(seq) -> "Tour":
        seq = np.asarray(seq, dtype=np.int64)
        n = seq.shape[0]
        succ = np.empty(n, dtype=np.int64)
        succ[seq] = np.roll(seq, -1)
        return Tour(succ)

    @property
    def n_total(self) -> int:
        return int(self.successor.shape[0])

    def sequence(self, start: int = 0) -> np.ndarray:
        """Node sequence walking the cycle from `start`."""
        n = self.n_total
        out = np.empty(n, dtype=np.int64)
        node = start
        for i in range(n):
            out[i] = node
            node = self.successor[node]
        return out

    def positions(self) -> np.ndarray:
        """positions[v] = index of v in the sequence starting at node 0."""
        seq = self.sequence(0)
        pos = np.empty(self.n_total, dtype=np.int64)
        pos[seq] = np.arange(self.n_total, dtype=np.int64)
        return pos

    def copy(self) -> "Tour":
        t = object.__new__(Tour)
        t.successor = self.successor.copy()
        t.predecessor = self.predecessor.copy()
        return t

    def __eq__(self, other) -> bool:
        return isinstance(other, Tour) and np.array_equal(
            self.successor, other.successor
        )

    def __hash__(self):
        return hash(self.successor.tobytes())


def initial_tour(instance: Instance, rng: np.random.Generator) -> Tour:
    """Random starting tour. TSP: uniform random cycle. CVRP: customers in
    random order, split greedily so every route fits capacity; leftover depot
    copies form empty routes at the end."""
    if instance.kind == TSP:
        perm = rng.permutation(instance.n_total)
        return Tour.from_sequence(perm)
    d, cap = instance.n_depot_copies, instance.capacity
    customers = rng.permutation(instance.customer_indices())
    seq = [0]
    depot_next = 1
    load = 0
    for c in customers:
        dem = int(instance.demands[c])
        if load + dem > cap:
            if depot_next >= d:
                raise InfeasibleConstructionError(
                    "not enough depot copies for a feasible split"
                )
            seq.append(depot_next)
            depot_next += 1
            load = 0
        seq.append(int(c))
        load += dem
    seq.extend(range(depot_next, d))
    return Tour.from_sequence(np.array(seq, dtype=np.int64))


def objective(instance: Instance, tour: Tour) -> float:
    """Total Euclidean length of the cycle."""
    coords = instance.coords
    diffs = coords[tour.successor] - coords
    return float(np.sqrt((diffs * diffs).sum(axis=1)).sum())


def _route_loads(instance: Instance, tour: Tour) -> list[int]:
    """Total demand of each route, walking the cycle from depot copy 0."""
    seq = tour.sequence(0)
    d = instance.n_depot_copies
    loads = []
    load = 0
    in_route = False
    for node in seq[1:]:
        if node < d:
            if in_route:
                loads.append(load)
            load = 0
            in_route = False
        else:
            load += int(instance.demands[node])
            in_route = True
    if in_route:
        loads.append(load)
    return loads


def capacity_violation(instance: Instance, tour: Tour) -> float:
    """Sum over routes of max(0, load - capacity), as a fraction of capacity."""
    if instance.kind != CVRP:
        raise InvalidArgumentError("capacity_violation needs a cvrp instance")
    cap = instance.capacity
    excess = sum(max(0, load - cap) for load in _route_loads(instance, tour))
    return excess / cap


def feasibility_class(
    instance: Instance, tour: Tour, eps: float
) -> tuple[FeasibilityClass, float]:
    """Classify a tour; returns (class, violation). TSP is always feasible."""
    if eps < 0:
        raise InvalidArgumentError("eps must be nonnegative")
    if instance.kind == TSP:
        return FeasibilityClass.FEASIBLE, 0.0
    v = capacity_violation(instance, tour)
    if v == 0.0:
        return FeasibilityClass.FEASIBLE, v
    if v <= eps:
        return FeasibilityClass.EPS_FEASIBLE, v
    return FeasibilityClass.INFEASIBLE, v


def node_features(
    instance: Instance, tour: Tour, gire_enabled: bool = False
) -> np.ndarray:
    """Raw per-node feature rows for the policy encoder.

    TSP: [x, y]. CVRP: [x, y, demand, prefix demand sum (incl. node), suffix
    demand sum (excl. node), is_customer], all demand terms divided by the
    capacity. gire_enabled appends the two VI flags [prefix excl. > cap,
    prefix incl. > cap].
    """
    if instance.kind == TSP:
        return instance.coords.copy()
    n = instance.n_total
    d = instance.n_depot_copies
    cap = float(instance.capacity)
    feats = np.zeros((n, 8 if gire_enabled else 6), dtype=np.float64)
    feats[:, 0:2] = instance.coords
    feats[d:, 2] = instance.demands[d:] / cap
    feats[d:, 5] = 1.0
    seq = tour.sequence(0)
    # Route accounting in one pass: prefix sums reset at each depot copy.
    route_start = 0
    prefix = np.zeros(n, dtype=np.float64)  # per node, incl. the node itself
    route_total = np.zeros(n, dtype=np.float64)
    members: list[int] = []
    running = 0.0

    def close_route() -> None:
        for m in members:
            route_total[m] = running

    for node in seq:
        node = int(node)
        if node < d:
            close_route()
            members = []
            running = 0.0
        else:
            running += float(instance.demands[node])
            prefix[node] = running
            members.append(node)
    close_route()
    feats[d:, 3] = prefix[instance.customer_indices()] / cap
    feats[d:, 4] = (route_total - prefix)[instance.customer_indices()] / cap
    if gire_enabled:
        dem = instance.demands.astype(np.float64)
        pre_excl = prefix - dem
        cust = instance.customer_indices()
        feats[d:, 6] = (pre_excl[cust] > cap).astype(np.float64)
        feats[d:, 7] = (prefix[cust] > cap).astype(np.float64)
    return feats


def tour_to_json(tour: Tour) -> list[int]:
    return [int(v) for v in tour.sequence(0)]


def tour_from_json(seq: list[int]) -> Tour:
    return Tour.from_sequence(np.asarray(seq, dtype=np.int64))
