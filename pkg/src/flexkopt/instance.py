"""Routing instances: generation, augmentation, benchmark parsing, dataset IO.

An instance is a fixed array of nodes. For CVRP the depot is physically
replicated into `n_depot_copies` nodes (indices 0..D-1, identical coordinates,
zero demand) so that a solution is always one Hamiltonian cycle over all nodes;
customers occupy indices D..D+n-1. TSP instances have no depot copies.
"""

from __future__ import annotations

import dataclasses
import json
import math
import re
from dataclasses import dataclass

import numpy as np

from .errors import (
    InvalidArgumentError,
    MalformedInputError,
    UnsupportedFormatError,
)

TSP = "tsp"
CVRP = "cvrp"

# (capacity, depot copies) for the benchmark customer counts; other sizes fall
# back to the nearest table capacity and D = max(1, ceil(n/2)).
_SIZE_TABLE = {20: (30, 10), 50: (40, 20), 100: (50, 20), 200: (70, 30)}

DEMAND_LOW = 1
DEMAND_HIGH = 9  # inclusive


def default_capacity_rule(n_customers: int) -> tuple[int, int]:
    """Return (capacity, n_depot_copies) for a CVRP of the given size."""
    if n_customers in _SIZE_TABLE:
        return _SIZE_TABLE[n_customers]
    nearest = min(_SIZE_TABLE, key=lambda s: (abs(s - n_customers), s))
    return _SIZE_TABLE[nearest][0], max(1, math.ceil(n_customers / 2))


@dataclass(frozen=True)
class Instance:
    """One routing problem. Arrays are owned and must not be mutated."""

    kind: str
    coords: np.ndarray  # (n_total, 2) float64
    demands: np.ndarray  # (n_total,) int64; empty for TSP
    capacity: int | None
    n_customers: int
    n_depot_copies: int
    uid: str

    def __post_init__(self) -> None:
        coords = np.ascontiguousarray(np.asarray(self.coords, dtype=np.float64))
        object.__setattr__(self, "coords", coords)
        demands = np.ascontiguousarray(np.asarray(self.demands, dtype=np.int64))
        object.__setattr__(self, "demands", demands)
        if self.kind not in (TSP, CVRP):
            raise InvalidArgumentError(f"unknown problem kind: {self.kind!r}")
        if coords.ndim != 2 or coords.shape[1] != 2:
            raise InvalidArgumentError("coords must have shape (n_total, 2)")
        if not np.isfinite(coords).all():
            raise InvalidArgumentError("coords must be finite")
        n_total = self.n_depot_copies + self.n_customers
        if coords.shape[0] != n_total:
            raise InvalidArgumentError(
                f"coords has {coords.shape[0]} rows, expected {n_total}"
            )
        if self.kind == TSP:
            if self.n_depot_copies != 0 or self.capacity is not None:
                raise InvalidArgumentError("tsp instances carry no depot/capacity")
            if demands.size != 0:
                raise InvalidArgumentError("tsp instances carry no demands")
            if self.n_customers < 3:
                raise InvalidArgumentError("tsp needs at least 3 nodes")
            return
        if self.n_depot_copies < 1:
            raise InvalidArgumentError("cvrp needs at least one depot copy")
        if self.capacity is None or self.capacity <= 0:
            raise InvalidArgumentError("cvrp capacity must be a positive integer")
        if demands.shape != (n_total,):
            raise InvalidArgumentError("demands must have one entry per node")
        d = self.n_depot_copies
        if (demands[:d] != 0).any():
            raise InvalidArgumentError("depot copies must have zero demand")
        if not np.allclose(coords[:d], coords[0], atol=0.0):
            raise InvalidArgumentError("depot copies must share one coordinate")
        if (demands[d:] < 0).any():
            raise InvalidArgumentError("demands must be nonnegative")
        if (demands[d:] > self.capacity).any():
            raise InvalidArgumentError("each customer demand must fit capacity")

    @property
    def n_total(self) -> int:
        return self.n_depot_copies + self.n_customers

    def customer_indices(self) -> np.ndarray:
        return np.arange(self.n_depot_copies, self.n_total)

    def mean_customer_demand(self) -> float:
        if self.kind == TSP:
            raise InvalidArgumentError("tsp instances have no demands")
        return float(self.demands[self.n_depot_copies:].mean())

    def with_coords(self, coords: np.ndarray, uid: str | None = None) -> "Instance":
        return dataclasses.replace(self, coords=coords, uid=uid or self.uid)


def generate_uniform(
    kind: str,
    n_customers: int,
    seed: int,
    capacity: int | None = None,
    n_depot_copies: int | None = None,
    uid: str | None = None,
) -> Instance:
    """Sample one instance: coordinates uniform on the unit square, integer
    demands uniform on {1..9}. Capacity/depot-copy defaults follow the size
    table; explicit arguments override it."""
    if n_customers < 3:
        raise InvalidArgumentError("need at least 3 customers")
    rng = np.random.default_rng(seed)
    if kind == TSP:
        coords = rng.random((n_customers, 2))
        return Instance(
            kind=TSP,
            coords=coords,
            demands=np.empty(0, dtype=np.int64),
            capacity=None,
            n_customers=n_customers,
            n_depot_copies=0,
            uid=uid or f"tsp-n{n_customers}-s{seed}",
        )
    if kind != CVRP:
        raise InvalidArgumentError(f"unknown problem kind: {kind!r}")
    cap_default, copies_default = default_capacity_rule(n_customers)
    cap = capacity if capacity is not None else cap_default
    copies = n_depot_copies if n_depot_copies is not None else copies_default
    depot = rng.random(2)
    customers = rng.random((n_customers, 2))
    coords = np.vstack([np.tile(depot, (copies, 1)), customers])
    demands = np.concatenate(
        [
            np.zeros(copies, dtype=np.int64),
            rng.integers(DEMAND_LOW, DEMAND_HIGH + 1, size=n_customers),
        ]
    )
    return Instance(
        kind=CVRP,
        coords=coords,
        demands=demands,
        capacity=int(cap),
        n_customers=n_customers,
        n_depot_copies=copies,
        uid=uid or f"cvrp-n{n_customers}-s{seed}",
    )


# --- augmentation ---------------------------------------------------------

_OPS = ("flip_xy", "one_minus_x", "one_minus_y", "rotate")


@dataclass(frozen=True)
class AugmentConfig:
    """A replayable coordinate transform: the four ops in `order`, each
    performed or skipped; rotation is by `rotate_quarters` * pi/2 about the
    origin. All four ops are plane isometries."""

    order: tuple[str, str, str, str]
    flip_xy: bool
    one_minus_x: bool
    one_minus_y: bool
    rotate_quarters: int  # 0..3

    def __post_init__(self) -> None:
        if sorted(self.order) != sorted(_OPS):
            raise InvalidArgumentError(f"order must permute {_OPS}")
        if self.rotate_quarters not in (0, 1, 2, 3):
            raise InvalidArgumentError("rotate_quarters must be in {0,1,2,3}")

    def to_dict(self) -> dict:
        return {
            "order": list(self.order),
            "flip_xy": self.flip_xy,
            "one_minus_x": self.one_minus_x,
            "one_minus_y": self.one_minus_y,
            "rotate_quarters": self.rotate_quarters,
        }

    @staticmethod
    def from_dict(d: dict) -> "AugmentConfig":
        return AugmentConfig(
            order=tuple(d["order"]),
            flip_xy=bool(d["flip_xy"]),
            one_minus_x=bool(d["one_minus_x"]),
            one_minus_y=bool(d["one_minus_y"]),
            rotate_quarters=int(d["rotate_quarters"]),
        )


def _apply_op(coords: np.ndarray, op: str, config: AugmentConfig) -> np.ndarray:
    if op == "flip_xy":
        if config.flip_xy:
            coords = coords[:, ::-1]
    elif op == "one_minus_x":
        if config.one_minus_x:
            coords = np.column_stack([1.0 - coords[:, 0], coords[:, 1]])
    elif op == "one_minus_y":
        if config.one_minus_y:
            coords = np.column_stack([coords[:, 0], 1.0 - coords[:, 1]])
    elif op == "rotate":
        q = config.rotate_quarters
        if q:
            # Quarter turns are exact in floating point: no trig needed.
            x, y = coords[:, 0], coords[:, 1]
            if q == 1:
                coords = np.column_stack([-y, x])
            elif q == 2:
                coords = np.column_stack([-x, -y])
            else:
                coords = np.column_stack([y, -x])
    else:  # pragma: no cover - guarded by AugmentConfig validation
        raise InvalidArgumentError(f"unknown op {op!r}")
    return coords


def apply_augment(instance: Instance, config: AugmentConfig) -> Instance:
    """Replay an augmentation config. Deterministic; same config, same output."""
    coords = instance.coords
    for op in config.order:
        coords = _apply_op(coords, op, config)
    return instance.with_coords(np.ascontiguousarray(coords))


def sample_augment_config(rng: np.random.Generator) -> AugmentConfig:
    order = tuple(str(o) for o in rng.permutation(np.array(_OPS, dtype=object)))
    return AugmentConfig(
        order=order,  # type: ignore[arg-type]
        flip_xy=bool(rng.integers(0, 2)),
        one_minus_x=bool(rng.integers(0, 2)),
        one_minus_y=bool(rng.integers(0, 2)),
        rotate_quarters=int(rng.integers(0, 4)),
    )


def augment(
    instance: Instance, rng: np.random.Generator
) -> tuple[Instance, AugmentConfig]:
    """Random augmentation: shuffle the four ops, independently perform or
    skip each. Tour lengths are preserved exactly (isometries)."""
    config = sample_augment_config(rng)
    return apply_augment(instance, config), config


# --- benchmark parsing ----------------------------------------------------

_KV_RE = re.compile(r"^\s*([A-Z_]+)\s*:?\s*(.*?)\s*$")


def parse_benchmark(text: str) -> Instance:
    """Parse a TSPLIB-style EUC_2D instance (TSP or CVRP).

    CVRP depots are replicated into the default depot-copy count for the
    instance's customer count. Non-EUC_2D edge weights raise
    UnsupportedFormatError; structural problems raise MalformedInputError.
    """
    fields: dict[str, str] = {}
    coords: dict[int, tuple[float, float]] = {}
    demands: dict[int, int] = {}
    depot_ids: list[int] = []
    section = None
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line == "EOF":
            section = None if line == "EOF" else section
            continue
        if line in ("NODE_COORD_SECTION", "DEMAND_SECTION", "DEPOT_SECTION"):
            section = line
            continue
        if section == "NODE_COORD_SECTION":
            parts = line.split()
            if len(parts) != 3:
                raise MalformedInputError(f"bad coord line: {raw!r}")
            coords[int(parts[0])] = (float(parts[1]), float(parts[2]))
            continue
        if section == "DEMAND_SECTION":
            parts = line.split()
            if len(parts) != 2:
                raise MalformedInputError(f"bad demand line: {raw!r}")
            demands[int(parts[0])] = int(parts[1])
            continue
        if section == "DEPOT_SECTION":
            val = int(line.split()[0])
            if val == -1:
                section = None
            else:
                depot_ids.append(val)
            continue
        m = _KV_RE.match(line)
        if m:
            fields[m.group(1)] = m.group(2)
    if "TYPE" not in fields or "DIMENSION" not in fields:
        raise MalformedInputError("missing TYPE or DIMENSION")
    kind = fields["TYPE"].upper()
    ewt = fields.get("EDGE_WEIGHT_TYPE", "")
    if ewt != "EUC_2D":
        raise UnsupportedFormatError(f"unsupported EDGE_WEIGHT_TYPE: {ewt!r}")
    dim = int(fields["DIMENSION"])
    if len(coords) != dim:
        raise MalformedInputError(
            f"DIMENSION {dim} but {len(coords)} coordinate rows"
        )
    name = fields.get("NAME", "benchmark")
    order = sorted(coords)
    xy = np.array([coords[i] for i in order], dtype=np.float64)
    if kind == "TSP":
        return Instance(
            kind=TSP,
            coords=xy,
            demands=np.empty(0, dtype=np.int64),
            capacity=None,
            n_customers=dim,
            n_depot_copies=0,
            uid=name,
        )
    if kind != "CVRP":
        raise UnsupportedFormatError(f"unsupported TYPE: {kind!r}")
    if "CAPACITY" not in fields:
        raise MalformedInputError("cvrp benchmark missing CAPACITY")
    if len(demands) != dim:
        raise MalformedInputError("DEMAND_SECTION does not cover all nodes")
    depot_id = depot_ids[0] if depot_ids else order[0]
    if depot_id not in coords:
        raise MalformedInputError(f"depot id {depot_id} has no coordinates")
    if demands.get(depot_id, 0) != 0:
        raise MalformedInputError("depot demand must be zero")
    customer_ids = [i for i in order if i != depot_id]
    n = len(customer_ids)
    _, copies = default_capacity_rule(n)
    depot_xy = np.array(coords[depot_id], dtype=np.float64)
    xy = np.vstack(
        [
            np.tile(depot_xy, (copies, 1)),
            np.array([coords[i] for i in customer_ids], dtype=np.float64),
        ]
    )
    dem = np.concatenate(
        [
            np.zeros(copies, dtype=np.int64),
            np.array([demands[i] for i in customer_ids], dtype=np.int64),
        ]
    )
    return Instance(
        kind=CVRP,
        coords=xy,
        demands=dem,
        capacity=int(fields["CAPACITY"]),
        n_customers=n,
        n_depot_copies=copies,
        uid=name,
    )


# --- dataset IO -----------------------------------------------------------


def instance_to_dict(instance: Instance) -> dict:
    return {
        "id": instance.uid,
        "kind": instance.kind,
        "coords": instance.coords.tolist(),
        "demands": instance.demands.tolist(),
        "capacity": instance.capacity,
        "n_depot_copies": instance.n_depot_copies,
    }


def instance_from_dict(d: dict) -> Instance:
    try:
        coords = np.asarray(d["coords"], dtype=np.float64)
        copies = int(d["n_depot_copies"])
        kind = d["kind"]
        capacity = d["capacity"]
        return Instance(
            kind=kind,
            coords=coords,
            demands=np.asarray(d["demands"], dtype=np.int64),
            capacity=None if capacity is None else int(capacity),
            n_customers=coords.shape[0] - copies if coords.ndim == 2 else 0,
            n_depot_copies=copies,
            uid=str(d["id"]),
        )
    except (KeyError, TypeError, IndexError) as exc:
        raise MalformedInputError(f"bad instance record: {exc}") from exc


def write_dataset(path: str, instances: list[Instance]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            fh.write(json.dumps(instance_to_dict(inst)) + "\n")


def read_dataset(path: str) -> list[Instance]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedInputError(f"line {lineno}: {exc}") from exc
            out.append(instance_from_dict(record))
    return out
