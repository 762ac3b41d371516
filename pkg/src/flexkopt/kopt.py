"""Basis-move state machine for flexible k-opt actions.

An action on a tour is one S-move (remove the edge leaving the anchor, opening
the cycle into a directed path), zero or more I-moves (attach the path tail to
a higher-ranked node, drop that node's outgoing edge, reverse the intervening
segment), and one E-move (close the path), padded with null steps to a fixed
length K. Node ranks are forward distances from the anchor along the original
tour and are frozen when the action begins.

The working path is kept as a node list in edge direction. After the S-move it
reads [rank-1 node, ..., rank-(n-1) node, anchor]; an I-move on the node at
position p maps it to path[p+1:] + reversed(path[:p+1]), and an E-move adds
the closing edge path[-1] -> path[0].
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import (
    InvalidArgumentError,
    InvalidMoveError,
    InvalidStateError,
    SizeLimitError,
)
from .solution import Tour

# Trace sentinels for selection slots that are not plain node picks.
NULL_SENTINEL = -1
ENFORCED_SENTINEL = -2


class MoveType(Enum):
    S = "S"
    I = "I"
    E = "E"
    NULL = "Null"


@dataclass(frozen=True)
class RankTable:
    """rank[v] = number of successor hops from the anchor to v."""

    anchor: int
    rank: np.ndarray

    @staticmethod
    def build(tour: Tour, anchor: int) -> "RankTable":
        n = tour.n_total
        if not 0 <= anchor < n:
            raise InvalidArgumentError(f"anchor {anchor} out of range")
        rank = np.empty(n, dtype=np.int64)
        node = anchor
        for i in range(n):
            rank[node] = i
            node = tour.successor[node]
        return RankTable(anchor=anchor, rank=rank)


def rank_table(tour: Tour, anchor: int) -> RankTable:
    return RankTable.build(tour, anchor)


@dataclass(frozen=True)
class ActionTrace:
    """One K-step action: the anchor plus K-1 selection slots.

    Selections are node indices, ENFORCED_SENTINEL for a forced E-move, or
    NULL_SENTINEL padding. move_types has K entries (the S-move first).
    """

    anchor: int
    selections: tuple[int, ...]
    move_types: tuple[MoveType, ...]

    def to_dict(self) -> dict:
        return {
            "anchor": self.anchor,
            "selections": list(self.selections),
            "move_types": [m.value for m in self.move_types],
        }

    @staticmethod
    def from_dict(d: dict) -> "ActionTrace":
        return ActionTrace(
            anchor=int(d["anchor"]),
            selections=tuple(int(v) for v in d["selections"]),
            move_types=tuple(MoveType(m) for m in d["move_types"]),
        )


class DecodeState:
    """In-flight action state; value-like, single owner."""

    __slots__ = ("ranks", "path", "head_rank", "step", "terminated", "cycle")

    def __init__(self, ranks: RankTable, path: list[int]):
        self.ranks = ranks
        self.path = path
        self.head_rank = 1
        self.step = 2  # the S-move was step 1
        self.terminated = False
        self.cycle: list[int] | None = None

    @property
    def n_total(self) -> int:
        return int(self.ranks.rank.shape[0])

    @property
    def tail(self) -> int:
        return self.path[-1]

    @property
    def head(self) -> int:
        return self.path[0]


def begin_action(tour: Tour, anchor: int) -> DecodeState:
    """S-move: remove anchor->successor(anchor). tail = anchor, m = 1."""
    ranks = rank_table(tour, anchor)
    n = tour.n_total
    path = [0] * n
    node = tour.successor[anchor]
    for i in range(n):
        path[i] = int(node)
        node = tour.successor[node]
    return DecodeState(ranks=ranks, path=path)


def valid_targets(state: DecodeState) -> np.ndarray:
    """Boolean mask over nodes: selectable iff rank >= m. All-false means an
    E-move is enforced."""
    if state.terminated:
        raise InvalidStateError("action already terminated")
    return state.ranks.rank >= state.head_rank


def advance(state: DecodeState, selection: int) -> tuple[DecodeState, MoveType]:
    """Apply one selection: rank m picks the E-move, rank > m an I-move, and
    ENFORCED_SENTINEL the forced E-move when every node is masked."""
    if state.terminated:
        raise InvalidStateError("action already terminated")
    m = state.head_rank
    n = state.n_total
    if selection == ENFORCED_SENTINEL:
        if m < n:
            raise InvalidMoveError("enforced E-move only legal when all masked")
        state.cycle = state.path
        state.terminated = True
        state.step += 1
        return state, MoveType.E
    if not 0 <= selection < n:
        raise InvalidMoveError(f"selection {selection} out of range")
    r = int(state.ranks.rank[selection])
    if r < m:
        raise InvalidMoveError(f"selection rank {r} below bound {m}")
    if r == m:
        # E-move: close tail -> head.
        state.cycle = state.path
        state.terminated = True
        state.step += 1
        return state, MoveType.E
    # I-move. Ranks m..n-1 occupy path positions 0..n-1-m untouched, so the
    # selected node sits at position r - m.
    pv = r - m
    path = state.path
    assert path[pv] == selection
    state.path = path[pv + 1:] + path[:pv + 1][::-1]
    state.head_rank = r + 1
    state.step += 1
    return state, MoveType.I


def close_path(state: DecodeState) -> DecodeState:
    """Implicit E-move appended when an action's last basis move was an I."""
    if state.terminated:
        raise InvalidStateError("action already terminated")
    state.cycle = state.path
    state.terminated = True
    return state


def _tour_from_cycle(cycle: list[int]) -> Tour:
    return Tour.from_sequence(np.array(cycle, dtype=np.int64))


def finalize(tour: Tour, trace: ActionTrace) -> Tour:
    """Replay a trace against the tour and return the successor tour.

    Null padding is legal only after termination or as a trailing run (the
    path is then closed by the implicit E-move). Inconsistent traces raise
    InvalidMoveError.
    """
    state = begin_action(tour, trace.anchor)
    saw_null = False
    for sel in trace.selections:
        if state.terminated:
            if sel != NULL_SENTINEL:
                raise InvalidMoveError("selection after termination")
            continue
        if sel == NULL_SENTINEL:
            saw_null = True
            continue
        if saw_null:
            raise InvalidMoveError("selection after null padding")
        state, _ = advance(state, sel)
    if not state.terminated:
        close_path(state)
    assert state.cycle is not None
    return _tour_from_cycle(state.cycle)


def undirected_edges(tour: Tour) -> set[frozenset[int]]:
    return {
        frozenset((int(i), int(s)))
        for i, s in enumerate(tour.successor)
    }


def edges_changed(before: Tour, after: Tour) -> int:
    """Number of undirected edges in `after` that `before` lacks."""
    return len(undirected_edges(after) - undirected_edges(before))


def canonical_key(tour: Tour) -> tuple[int, ...]:
    """Direction-invariant identity of the cycle (rotation fixed at node 0)."""
    n = tour.n_total
    fwd = [0] * n
    bwd = [0] * n
    a, b = 0, 0
    for i in range(n):
        fwd[i] = a
        bwd[i] = b
        a = int(tour.successor[a])
        b = int(tour.predecessor[b])
    return min(tuple(fwd), tuple(bwd))


def neighborhood(tour: Tour, K: int) -> dict[tuple[int, ...], Tour]:
    """All tours reachable by one K-step action, keyed by canonical identity.

    Exhaustive DFS over anchors and valid selections; guarded to small n.
    """
    n = tour.n_total
    if n > 12:
        raise SizeLimitError("neighborhood enumeration capped at n_total <= 12")
    if K < 2:
        raise InvalidArgumentError("K must be at least 2")
    out: dict[tuple[int, ...], Tour] = {}

    def record(cycle: list[int]) -> None:
        t = _tour_from_cycle(cycle)
        out.setdefault(canonical_key(t), t)

    def dfs(state: DecodeState, moves_left: int) -> None:
        if moves_left == 0:
            record(list(state.path))  # implicit E
            return
        mask = valid_targets(state)
        if not mask.any():
            record(list(state.path))  # enforced E
            return
        for v in np.flatnonzero(mask):
            r = int(state.ranks.rank[v])
            if r == state.head_rank:
                record(list(state.path))  # explicit E closes here
                continue
            child = DecodeState(state.ranks, state.path)
            child.head_rank = state.head_rank
            child, _ = advance(child, int(v))
            dfs(child, moves_left - 1)

    for anchor in range(n):
        dfs(begin_action(tour, anchor), K - 1)
    return out
