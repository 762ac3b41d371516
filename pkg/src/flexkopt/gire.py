"""Feasibility-aware exploration machinery: transition history, exploration
statistics, entropy regulation, and reward shaping.

Feasibility is tracked as a binary F/U split: the eps-feasible region is a
subset of U for bookkeeping, so EpsFeasible records as infeasible here.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError
from .solution import FeasibilityClass

T_HIS_DEFAULT = 25
ENTROPY_C1 = 0.5
ENTROPY_C2 = 2.5
ALPHA_DEFAULT = 0.05
BETA_DEFAULT = 0.05
ZETA_DEFAULT = 0.1
EMA_DECAY_DEFAULT = 0.99

# Frozen layout of the ES feature vector (the hypernetwork input contract):
# [P(F,U), P(U,F), P(F,F), P(U,U), P(F|U), P(U|F), P(F|F), P(U|U), cur_feas].
ES_DIM = 9


class EsHistory:
    """Ring buffer of the last T_his (from_feasible, to_feasible) records."""

    __slots__ = ("buffer",)

    def __init__(self, t_his: int = T_HIS_DEFAULT):
        if t_his < 1:
            raise InvalidArgumentError("t_his must be positive")
        self.buffer: deque[tuple[bool, bool]] = deque(maxlen=t_his)

    def __len__(self) -> int:
        return len(self.buffer)


def is_feasible_flag(cls: FeasibilityClass) -> bool:
    return cls is FeasibilityClass.FEASIBLE


def record_transition(
    history: EsHistory, from_class: FeasibilityClass, to_class: FeasibilityClass
) -> EsHistory:
    history.buffer.append((is_feasible_flag(from_class), is_feasible_flag(to_class)))
    return history


@dataclass(frozen=True)
class EsFeatures:
    joint_fu: float
    joint_uf: float
    joint_ff: float
    joint_uu: float
    cond_f_given_u: float
    cond_u_given_f: float
    cond_f_given_f: float
    cond_u_given_u: float
    current_feasible: float

    def vector(self) -> np.ndarray:
        return np.array(
            [
                self.joint_fu,
                self.joint_uf,
                self.joint_ff,
                self.joint_uu,
                self.cond_f_given_u,
                self.cond_u_given_f,
                self.cond_f_given_f,
                self.cond_u_given_u,
                self.current_feasible,
            ],
            dtype=np.float64,
        )


def exploration_stats(history: EsHistory, current_feasible: bool) -> EsFeatures:
    """Joint and conditional transition estimates over the buffer. Empty
    buffer: joints 0. Conditionals with an unseen source default to 0.5
    (neutral for the decoder and zero entropy penalty)."""
    n = len(history.buffer)
    c_fu = c_uf = c_ff = c_uu = 0
    for frm, to in history.buffer:
        if frm and to:
            c_ff += 1
        elif frm:
            c_fu += 1
        elif to:
            c_uf += 1
        else:
            c_uu += 1
    from_f = c_ff + c_fu
    from_u = c_uf + c_uu

    def cond(count: int, total: int) -> float:
        return count / total if total > 0 else 0.5

    return EsFeatures(
        joint_fu=c_fu / n if n else 0.0,
        joint_uf=c_uf / n if n else 0.0,
        joint_ff=c_ff / n if n else 0.0,
        joint_uu=c_uu / n if n else 0.0,
        cond_f_given_u=cond(c_uf, from_u),
        cond_u_given_f=cond(c_fu, from_f),
        cond_f_given_f=cond(c_ff, from_f),
        cond_u_given_u=cond(c_uu, from_u),
        current_feasible=1.0 if current_feasible else 0.0,
    )


def entropy_measure(p: float, c1: float = ENTROPY_C1, c2: float = ENTROPY_C2) -> float:
    """Clip{1 - c1*log2[c2*pi*e*p(1-p)], 0, 1}; zero on roughly [0.25, 0.75],
    saturating at 1 toward the endpoints (p in {0,1} returns the limit 1)."""
    if not 0.0 <= p <= 1.0:
        raise InvalidArgumentError(f"p={p} outside [0,1]")
    q = p * (1.0 - p)
    if q == 0.0:
        return 1.0
    h = 1.0 - c1 * math.log2(c2 * math.pi * math.e * q)
    return min(1.0, max(0.0, h))


def epsilon_threshold(
    zeta: float, n_customers: int, mean_demand: float, capacity: float
) -> float:
    """eps = zeta * n_customers * (mean_demand / capacity)."""
    return zeta * n_customers * (mean_demand / capacity)


@dataclass(frozen=True)
class RewardTerms:
    r: float
    r_reg: float  # <= 0
    r_bonus: float  # >= 0
    r_gire: float

    @staticmethod
    def raw(r: float) -> "RewardTerms":
        return RewardTerms(r=r, r_reg=0.0, r_bonus=0.0, r_gire=r)


def shape_reward(
    r: float,
    es: EsFeatures,
    mean_r_estimate: float,
    r_bonus: float,
    alpha: float = ALPHA_DEFAULT,
    beta: float = BETA_DEFAULT,
    c1: float = ENTROPY_C1,
    c2: float = ENTROPY_C2,
) -> RewardTerms:
    """r_gire = r + alpha*r_reg + beta*r_bonus with
    r_reg = -E[r] * (H[P(U|U)] + H[P(F|F)])."""
    if alpha < 0 or beta < 0:
        raise InvalidArgumentError("alpha and beta must be nonnegative")
    h_sum = entropy_measure(es.cond_u_given_u, c1, c2) + entropy_measure(
        es.cond_f_given_f, c1, c2
    )
    r_reg = -mean_r_estimate * h_sum
    return RewardTerms(
        r=r,
        r_reg=r_reg,
        r_bonus=r_bonus,
        r_gire=r + alpha * r_reg + beta * r_bonus,
    )
