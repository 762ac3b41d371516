"""Search environment: MDP stepping with best-so-far rewards, feasibility
bookkeeping, and the dynamic-augmentation inference driver.

The reward is r = f(bsf) - min(f(new), f(bsf)); an infeasible tour never
enters the comparison, so r = 0 there and the best-so-far tour stays
feasible by construction. Inference runs several augmented copies of one
instance in parallel and re-augments any copy whose best-so-far stalls.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import torch

from . import gire, kopt
from .errors import ConfigError, InvalidArgumentError
from .gire import EsHistory
from .instance import CVRP, Instance, augment
from .networks import PolicyNet, decode_batch, encode_batch
from .solution import (
    FeasibilityClass,
    Tour,
    feasibility_class,
    initial_tour,
    node_features,
    objective,
)


@dataclass
class GireRuntime:
    """Per-rollout reward configuration. `shaping` off means raw rewards
    (TSP, or the CVRP ablation with alpha = beta = 0). mean_r is the EMA of
    per-step batch-mean raw rewards, maintained by the trainer."""

    shaping: bool = False
    alpha: float = gire.ALPHA_DEFAULT
    beta: float = gire.BETA_DEFAULT
    mean_r: float = 0.0
    ema_decay: float = gire.EMA_DECAY_DEFAULT
    c1: float = gire.ENTROPY_C1
    c2: float = gire.ENTROPY_C2

    @staticmethod
    def disabled() -> "GireRuntime":
        return GireRuntime(shaping=False, alpha=0.0, beta=0.0)


def epsilon_for(instance: Instance, zeta: float) -> float:
    """Slack threshold splitting the infeasible region for this instance."""
    if instance.kind != CVRP:
        return 0.0
    return gire.epsilon_threshold(
        zeta,
        instance.n_customers,
        instance.mean_customer_demand(),
        float(instance.capacity),
    )


@dataclass
class SearchState:
    """One search trajectory over one (possibly augmented) instance."""

    instance: Instance
    tour: Tour
    bsf_tour: Tour
    bsf_cost: float
    bsf_eps_cost: float | None  # best cost seen strictly inside the eps band
    epsilon: float
    t: int
    history: EsHistory
    cur_class: FeasibilityClass
    stall: int
    rng: np.random.Generator

    def es_features(self) -> np.ndarray:
        flag = gire.is_feasible_flag(self.cur_class)
        return gire.exploration_stats(self.history, flag).vector()

    def critic_eps_cost(self) -> float:
        """Bonus-head input; falls back to the feasible bsf before any
        eps-band solution has been seen."""
        return self.bsf_cost if self.bsf_eps_cost is None else self.bsf_eps_cost


def init_search_state(
    instance: Instance,
    rng: np.random.Generator,
    epsilon: float = 0.0,
    t_his: int = gire.T_HIS_DEFAULT,
) -> SearchState:
    tour = initial_tour(instance, rng)
    cost = objective(instance, tour)
    if instance.kind == CVRP:
        cls, _ = feasibility_class(instance, tour, epsilon)
    else:
        cls = FeasibilityClass.FEASIBLE
    # The greedy constructor guarantees a feasible start, so the best-so-far
    # cost is well defined from step 0.
    assert cls is FeasibilityClass.FEASIBLE, "initial solution must be feasible"
    return SearchState(
        instance=instance,
        tour=tour,
        bsf_tour=tour.copy(),
        bsf_cost=cost,
        bsf_eps_cost=None,
        epsilon=epsilon,
        t=0,
        history=EsHistory(t_his=t_his),
        cur_class=cls,
        stall=0,
        rng=rng,
    )


def reset_episode(state: SearchState) -> SearchState:
    """Start a fresh episode from the best-so-far tour: history, stall, and
    eps bookkeeping cleared (used after curriculum warm-up)."""
    state.tour = state.bsf_tour.copy()
    state.cur_class = FeasibilityClass.FEASIBLE
    state.bsf_eps_cost = None
    state.history.buffer.clear()
    state.stall = 0
    state.t = 0
    return state


def env_step(
    state: SearchState, trace: kopt.ActionTrace, config: GireRuntime
) -> tuple[SearchState, gire.RewardTerms]:
    """Apply one K-step action, update best-so-far bookkeeping, and return
    the (possibly shaped) reward. Mutates and returns `state`."""
    new_tour = kopt.finalize(state.tour, trace)
    cost = objective(state.instance, new_tour)
    if state.instance.kind == CVRP:
        new_class, _ = feasibility_class(state.instance, new_tour, state.epsilon)
    else:
        new_class = FeasibilityClass.FEASIBLE

    improved = new_class is FeasibilityClass.FEASIBLE and cost < state.bsf_cost
    r = state.bsf_cost - cost if improved else 0.0
    if improved:
        state.bsf_cost = cost
        state.bsf_tour = new_tour.copy()

    r_bonus = 0.0
    if config.shaping and new_class is FeasibilityClass.EPS_FEASIBLE:
        if state.bsf_eps_cost is None:
            state.bsf_eps_cost = cost  # first visit seeds the reference
        else:
            r_bonus = max(0.0, state.bsf_eps_cost - cost)
            state.bsf_eps_cost = min(state.bsf_eps_cost, cost)

    if state.instance.kind == CVRP:
        gire.record_transition(state.history, state.cur_class, new_class)
        es = gire.exploration_stats(state.history, gire.is_feasible_flag(new_class))
    else:
        es = None

    if config.shaping:
        assert es is not None
        terms = gire.shape_reward(
            r, es, config.mean_r, r_bonus, config.alpha, config.beta,
            c1=config.c1, c2=config.c2,
        )
    else:
        terms = gire.RewardTerms.raw(r)

    state.tour = new_tour
    state.cur_class = new_class
    state.t += 1
    state.stall = 0 if improved else state.stall + 1
    return state, terms


def policy_step(
    states: list[SearchState],
    policy: PolicyNet,
    config: GireRuntime,
    mode: str = "sample",
) -> list[gire.RewardTerms]:
    """One batched policy action applied to every state (all states must
    share n_total). Mutates the states; returns per-state RewardTerms."""
    vi = policy.cfg.vi_features
    feats = np.stack(
        [node_features(s.instance, s.tour, gire_enabled=vi) for s in states]
    )
    positions = np.stack([s.tour.positions() for s in states])
    es = (
        np.stack([s.es_features() for s in states])
        if policy.cfg.es_hypernet
        else None
    )
    with torch.no_grad():
        h = encode_batch(policy, feats, positions)
        traces, _, _ = decode_batch(
            policy,
            h,
            [s.tour for s in states],
            es=es,
            rngs=[s.rng for s in states],
            mode=mode,
        )
    return [env_step(s, traces[i], config)[1] for i, s in enumerate(states)]


def rollout(
    states: list[SearchState],
    policy: PolicyNet,
    steps: int,
    config: GireRuntime,
    mode: str = "sample",
) -> None:
    """Run `steps` batched policy actions; used for curriculum warm-up and
    validation (no data collected)."""
    for _ in range(steps):
        policy_step(states, policy, config, mode=mode)


# --- D2A inference -----------------------------------------------------------


@dataclass
class SolveResult:
    instance_id: str
    best_cost: float
    best_tour: list[int]  # node sequence starting at node 0
    steps: int
    best_cost_trajectory: np.ndarray  # (T,) min best-so-far across copies
    class_trajectory: np.ndarray  # (T, n_aug) FeasibilityClass values
    aug_events: list[dict]
    wall_ms: float

    def to_json_dict(self) -> dict:
        return {
            "id": self.instance_id,
            "best_cost": self.best_cost,
            "best_tour": [int(v) for v in self.best_tour],
            "steps": int(self.steps),
            "aug_events": self.aug_events,
            "wall_ms": self.wall_ms,
        }


def _check_solve_args(policy: PolicyNet, instances: list[Instance], T, n_aug, t_d2a):
    if T < 1 or n_aug < 1 or t_d2a < 1:
        raise InvalidArgumentError("T, n_aug, and t_d2a must all be >= 1")
    for inst in instances:
        if policy.cfg.kind != inst.kind:
            raise ConfigError(
                f"checkpoint is for {policy.cfg.kind}, instance {inst.uid} "
                f"is {inst.kind}"
            )


def _solve_group(
    instances: list[Instance],
    seeds: list[int],
    model,
    T: int,
    n_aug: int,
    t_d2a: int,
    mode: str,
) -> list[SolveResult]:
    """Solve instances of equal n_total as one decode batch of
    len(instances) * n_aug rows."""
    policy: PolicyNet = model.policy
    zeta = float(getattr(model, "zeta", gire.ZETA_DEFAULT))
    runtime = GireRuntime.disabled()
    start = time.perf_counter()

    states: list[SearchState] = []
    row_owner: list[int] = []  # row -> instance index
    for i, inst in enumerate(instances):
        inst_rng = np.random.default_rng(seeds[i])
        eps = epsilon_for(inst, zeta)
        copy_seeds = inst_rng.integers(0, 2**63 - 1, size=n_aug)
        for c in range(n_aug):
            crng = np.random.default_rng(int(copy_seeds[c]))
            aug_inst, _ = augment(inst, crng)
            states.append(init_search_state(aug_inst, crng, epsilon=eps))
            row_owner.append(i)

    n_inst = len(instances)
    best_traj = np.empty((T, n_inst), dtype=np.float64)
    class_traj = np.empty((T, n_inst, n_aug), dtype=np.int64)
    aug_events: list[list[dict]] = [[] for _ in range(n_inst)]

    for t in range(T):
        policy_step(states, policy, runtime, mode=mode)
        for row, s in enumerate(states):
            i, c = row_owner[row], row % n_aug
            class_traj[t, i, c] = s.cur_class.value
            if s.stall >= t_d2a:
                new_inst, _ = augment(instances[i], s.rng)
                s.instance = new_inst
                s.stall = 0
                aug_events[i].append({"t": t + 1, "copy": c})
        for i in range(n_inst):
            best_traj[t, i] = min(
                states[i * n_aug + c].bsf_cost for c in range(n_aug)
            )

    elapsed_ms = (time.perf_counter() - start) * 1000.0
    results = []
    for i, inst in enumerate(instances):
        best_state = min(
            (states[i * n_aug + c] for c in range(n_aug)),
            key=lambda s: s.bsf_cost,
        )
        # Transforms are exact isometries, so this equals the copy's bsf cost;
        # the original coordinates are authoritative for reporting.
        best_cost = float(objective(inst, best_state.bsf_tour))
        results.append(
            SolveResult(
                instance_id=inst.uid,
                best_cost=best_cost,
                best_tour=[int(v) for v in best_state.bsf_tour.sequence(0)],
                steps=T,
                best_cost_trajectory=best_traj[:, i].copy(),
                class_trajectory=class_traj[:, i, :].copy(),
                aug_events=aug_events[i],
                wall_ms=elapsed_ms / n_inst,
            )
        )
    return results


def solve_batch(
    instances: list[Instance],
    model,
    T: int,
    n_aug: int,
    t_d2a: int,
    rng: np.random.Generator,
    mode: str = "sample",
) -> list[SolveResult]:
    """solve_d2a over many instances, batching equal-size groups through the
    policy together. Per-instance results are identical to solving each
    instance alone with its derived seed."""
    _check_solve_args(model.policy, instances, T, n_aug, t_d2a)
    seeds = [int(s) for s in rng.integers(0, 2**63 - 1, size=len(instances))]
    order = sorted(range(len(instances)), key=lambda i: instances[i].n_total)
    results: list[SolveResult | None] = [None] * len(instances)
    pos = 0
    while pos < len(order):
        end = pos
        size = instances[order[pos]].n_total
        while end < len(order) and instances[order[end]].n_total == size:
            end += 1
        group = [order[j] for j in range(pos, end)]
        group_results = _solve_group(
            [instances[j] for j in group],
            [seeds[j] for j in group],
            model,
            T,
            n_aug,
            t_d2a,
            mode,
        )
        for j, res in zip(group, group_results):
            results[j] = res
        pos = end
    return results  # type: ignore[return-value]


def solve_d2a(
    instance: Instance,
    model,
    T: int,
    n_aug: int,
    t_d2a: int,
    rng: np.random.Generator,
    mode: str = "sample",
) -> SolveResult:
    """Policy-guided search with dynamic augmentation on one instance.

    `model` carries .policy (PolicyNet) and .zeta; see training.ModelBundle.
    Runs n_aug augmented copies for T steps each; a copy whose best-so-far
    stalls for t_d2a consecutive steps is re-augmented from the original
    instance (fresh transform, tour carried over). All transforms are exact
    isometries, so costs compare across copies without correction.
    """
    return solve_batch([instance], model, T, n_aug, t_d2a, rng, mode=mode)[0]
