"""Policy network (encoder + recurrent dual-stream decoder + hypernetworks)
and the critic heads.

Decoding walks the basis-move state machine for K steps. Two GRU streams run
in lockstep: the move stream is fed the embedding of the last selected node,
the edge stream the embedding of the current path tail (the source of the
edge about to be introduced). Each stream scores every node; the action
distribution is softmax(6 * tanh(move + edge)) with rank-invalid nodes masked.
Hypernetworks may generate the per-stream output projections from the nine
exploration statistics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import (
    InvalidArgumentError,
    InvalidMoveError,
    InvalidStateError,
)
from .gire import ES_DIM
from .instance import CVRP, TSP
from .kopt import (
    ENFORCED_SENTINEL,
    NULL_SENTINEL,
    ActionTrace,
    MoveType,
    advance,
    begin_action,
    valid_targets,
)
from .neural import (
    DTYPE,
    MLP,
    AttentionLayer,
    GRUCell,
    Linear,
    MultiHeadAttention,
    cpe_table,
    init_tensor,
)
from .solution import Tour

SCORE_SCALE = 6.0  # C in softmax(C * tanh(move + edge))


@dataclass(frozen=True)
class NetConfig:
    """Architecture plus the ablation toggles that alter decode pathways."""

    kind: str
    d: int = 128
    encoder_layers: int = 3
    heads: int = 4
    K: int = 4
    vi_features: bool = False
    es_hypernet: bool = False
    use_grus: bool = True
    use_move_stream: bool = True
    use_edge_stream: bool = True
    learnable_s_move: bool = True
    allow_e_move: bool = True

    def __post_init__(self) -> None:
        if self.kind not in (TSP, CVRP):
            raise InvalidArgumentError(f"unknown kind {self.kind!r}")
        if self.K < 2:
            raise InvalidArgumentError("K must be at least 2")
        if self.d % 2 or self.d % self.heads:
            raise InvalidArgumentError("d must be even and divisible by heads")
        if not (self.use_move_stream or self.use_edge_stream):
            raise InvalidArgumentError("at least one decoder stream required")
        if self.kind == TSP and (self.vi_features or self.es_hypernet):
            raise InvalidArgumentError("feasibility machinery is cvrp-only")

    @property
    def d_h(self) -> int:
        if self.kind == TSP:
            return 2
        return 8 if self.vi_features else 6


class DecoderStream(nn.Module):
    """One scoring stream: a GRU plus summation and Hadamard query/key pairs.

    score(v) = Tanh((q Wq + h_v Wk) + (q Wq2) * (h_v Wk2)) . w_out
    """

    def __init__(self, d: int, rng: np.random.Generator, static_out: bool):
        super().__init__()
        self.gru = GRUCell(d, rng)
        self.w_query = nn.Parameter(init_tensor(rng, (d, d), d))
        self.w_key = nn.Parameter(init_tensor(rng, (d, d), d))
        self.w_query2 = nn.Parameter(init_tensor(rng, (d, d), d))
        self.w_key2 = nn.Parameter(init_tensor(rng, (d, d), d))
        self.first_input = nn.Parameter(init_tensor(rng, (d,), d))
        # Static output projection; absent when a hypernetwork generates it.
        self.w_out = nn.Parameter(init_tensor(rng, (d,), d)) if static_out else None

    def scores(self, q: torch.Tensor, h: torch.Tensor, w_out: torch.Tensor | None) -> torch.Tensor:
        add = (q @ self.w_query).unsqueeze(1) + h @ self.w_key
        had = (q @ self.w_query2).unsqueeze(1) * (h @ self.w_key2)
        t = torch.tanh(add + had)  # (B, n, d)
        if w_out is None:
            w_out = self.w_out.unsqueeze(0).expand(h.shape[0], -1)
        return (t * w_out.unsqueeze(1)).sum(-1)  # (B, n)


class PolicyNet(nn.Module):
    def __init__(self, cfg: NetConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        d = cfg.d
        self.nfe = MLP((cfg.d_h, d // 2, d), rng)
        self.encoder = nn.ModuleList(
            AttentionLayer(d, cfg.heads, rng) for _ in range(cfg.encoder_layers)
        )
        self.stream_mu = DecoderStream(d, rng, static_out=not cfg.es_hypernet)
        self.stream_lam = DecoderStream(d, rng, static_out=not cfg.es_hypernet)
        if cfg.es_hypernet:
            self.hyper_shared = Linear(ES_DIM, 8, rng)
            self.hyper_mu = Linear(8, d, rng)
            self.hyper_lam = Linear(8, d, rng)


class CriticNet(nn.Module):
    """State-value network reading the policy encoder's embeddings."""

    def __init__(self, cfg: NetConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        d = cfg.d
        self.attn = MultiHeadAttention(d, cfg.heads, rng)
        self.w_local = nn.Parameter(init_tensor(rng, (d, d // 2), d))
        self.w_global = nn.Parameter(init_tensor(rng, (d, d // 2), d))
        self.head_origin = MLP((d + 1, d, d // 2, 1), rng)
        if cfg.kind == CVRP:
            self.head_reg = MLP((d + 1 + ES_DIM, d, d // 2, 1), rng)
            self.head_bonus = MLP((d + 1, d, d // 2, 1), rng)


# --- encoding ---------------------------------------------------------------


def encode_batch(
    policy: PolicyNet, features: np.ndarray | torch.Tensor, positions: np.ndarray
) -> torch.Tensor:
    """features (B, n, d_h), positions (B, n) -> embeddings (B, n, d)."""
    cfg = policy.cfg
    if isinstance(features, np.ndarray):
        features = torch.from_numpy(features).to(DTYPE)
    if features.shape[-1] != cfg.d_h:
        raise InvalidArgumentError(
            f"feature width {features.shape[-1]} != configured {cfg.d_h}"
        )
    n = features.shape[-2]
    table = torch.from_numpy(cpe_table(n, cfg.d))
    g = table[torch.from_numpy(np.asarray(positions, dtype=np.int64))]
    h = policy.nfe(features)
    for layer in policy.encoder:
        h = layer(h, g)
    return h


def encode(policy: PolicyNet, features: np.ndarray, tour: Tour) -> torch.Tensor:
    """Single-instance encode; positions are the node indices along the tour
    sequence from node 0."""
    positions = tour.positions()[None, :]
    feats = np.asarray(features, dtype=np.float64)[None, :, :]
    return encode_batch(policy, feats, positions)[0]


def hyper_project(policy: PolicyNet, es_features: np.ndarray | torch.Tensor):
    """ES statistics (B, 9) -> per-stream output projections (B, d) each."""
    if policy.cfg.es_hypernet is False:
        raise InvalidStateError("hypernetworks disabled for this policy")
    if isinstance(es_features, np.ndarray):
        es_features = torch.from_numpy(es_features).to(DTYPE)
    single = es_features.ndim == 1
    if single:
        es_features = es_features.unsqueeze(0)
    if es_features.shape[-1] != ES_DIM:
        raise InvalidArgumentError("es feature width must be 9")
    hidden = torch.relu(policy.hyper_shared(es_features))
    w_mu = policy.hyper_mu(hidden)
    w_lam = policy.hyper_lam(hidden)
    if single:
        return w_mu[0], w_lam[0]
    return w_mu, w_lam


# --- decoding ---------------------------------------------------------------


@dataclass
class DecodeCache:
    """Everything needed to replay the decoder without the state machine."""

    anchors: np.ndarray  # (B,)
    selections: np.ndarray  # (B, K-1)
    net_step: np.ndarray  # (B, K) bool: network-scored step?
    masks: np.ndarray  # (B, K-1, n) bool, meaningful where net_step
    in_mu: np.ndarray  # (B, K) int
    in_lam: np.ndarray  # (B, K) int


def _policy_mask(state, allow_e_move: bool) -> np.ndarray:
    mask = valid_targets(state)
    if not allow_e_move:
        mask = mask & (state.ranks.rank != state.head_rank)
    return mask


def _stream_state_init(policy: PolicyNet, h: torch.Tensor):
    cfg = policy.cfg
    B = h.shape[0]
    q0 = h.mean(dim=1)  # (B, d)
    return q0, q0.clone()


def _step_scores(
    policy: PolicyNet,
    h: torch.Tensor,
    q_mu: torch.Tensor,
    q_lam: torch.Tensor,
    w_mu: torch.Tensor | None,
    w_lam: torch.Tensor | None,
) -> torch.Tensor:
    cfg = policy.cfg
    parts = []
    if cfg.use_move_stream:
        parts.append(policy.stream_mu.scores(q_mu, h, w_mu))
    if cfg.use_edge_stream:
        parts.append(policy.stream_lam.scores(q_lam, h, w_lam))
    total = parts[0] if len(parts) == 1 else parts[0] + parts[1]
    return SCORE_SCALE * torch.tanh(total)


def _hyper_outs(policy: PolicyNet, es: np.ndarray | torch.Tensor | None, B: int):
    if not policy.cfg.es_hypernet:
        return None, None
    if es is None:
        raise InvalidArgumentError("es features required when hypernet enabled")
    es_arr = np.asarray(es, dtype=np.float64)
    if es_arr.ndim == 1:
        es_arr = np.tile(es_arr, (B, 1))
    return hyper_project(policy, es_arr)


def decode_batch(
    policy: PolicyNet,
    h: torch.Tensor,
    tours: list[Tour],
    es: np.ndarray | None = None,
    rngs: list[np.random.Generator] | None = None,
    mode: str = "sample",
    K: int | None = None,
    forced: list[ActionTrace] | None = None,
):
    """Run the decoder over a batch, sampling or replaying traces.

    Returns (traces, logprob (B,) tensor, DecodeCache). With `forced`, the
    stored selections are teacher-forced and validated against the live masks;
    the returned logprob is then differentiable w.r.t. the policy parameters.
    """
    cfg = policy.cfg
    K = K or cfg.K
    if K < 2:
        raise InvalidArgumentError("K must be at least 2")
    if mode not in ("sample", "greedy"):
        raise InvalidArgumentError(f"unknown mode {mode!r}")
    B, n, d = h.shape
    if forced is None and mode == "sample" and rngs is None:
        raise InvalidArgumentError("sampling needs rng streams")
    w_mu, w_lam = _hyper_outs(policy, es, B)
    q_mu, q_lam = _stream_state_init(policy, h)

    anchors = np.zeros(B, dtype=np.int64)
    selections = np.full((B, K - 1), NULL_SENTINEL, dtype=np.int64)
    net_step = np.zeros((B, K), dtype=bool)
    masks = np.zeros((B, K - 1, n), dtype=bool)
    in_mu = np.zeros((B, K), dtype=np.int64)
    in_lam = np.zeros((B, K), dtype=np.int64)
    move_types: list[list[MoveType]] = [[] for _ in range(B)]

    states = [None] * B
    alive = np.ones(B, dtype=bool)
    total_logp = h.new_zeros(B)
    arange_b = torch.arange(B)

    for k in range(K):
        if k == 0:
            o_mu = policy.stream_mu.first_input.unsqueeze(0).expand(B, d)
            o_lam = policy.stream_lam.first_input.unsqueeze(0).expand(B, d)
            step_mask = np.ones((B, n), dtype=bool)
            net_rows = np.ones(B, dtype=bool)
        else:
            o_mu = h[arange_b, torch.from_numpy(in_mu[:, k])]
            o_lam = h[arange_b, torch.from_numpy(in_lam[:, k])]
            step_mask = np.zeros((B, n), dtype=bool)
            net_rows = np.zeros(B, dtype=bool)
            for b in range(B):
                if alive[b]:
                    step_mask[b] = _policy_mask(states[b], cfg.allow_e_move)
                    net_rows[b] = step_mask[b].any()
            masks[:, k - 1, :] = step_mask
        if cfg.use_grus:
            q_mu = policy.stream_mu.gru(o_mu, q_mu)
            q_lam = policy.stream_lam.gru(o_lam, q_lam)
        else:
            q_mu, q_lam = o_mu, o_lam
        if k == 0 and not cfg.learnable_s_move:
            scores = h.new_zeros(B, n)
        else:
            scores = _step_scores(policy, h, q_mu, q_lam, w_mu, w_lam)
        mask_t = torch.from_numpy(step_mask)
        net_t = torch.from_numpy(net_rows)
        logits = scores.masked_fill(~mask_t, float("-inf"))
        safe = torch.where(net_t.unsqueeze(1), logits, torch.zeros_like(scores))
        logp = torch.log_softmax(safe, dim=1)
        net_step[:, k] = net_rows

        picks = np.zeros(B, dtype=np.int64)
        for b in range(B):
            if not net_rows[b]:
                continue
            if forced is not None:
                sel = forced[b].anchor if k == 0 else forced[b].selections[k - 1]
                if sel < 0 or not step_mask[b, sel]:
                    raise InvalidMoveError(
                        f"forced selection {sel} invalid at step {k + 1}"
                    )
                picks[b] = sel
            elif mode == "greedy":
                picks[b] = int(torch.argmax(logits[b]).item())
            else:
                p = torch.softmax(logits[b], dim=0).detach().numpy()
                p = p / p.sum()
                picks[b] = int(rngs[b].choice(n, p=p))
        pick_t = torch.from_numpy(picks)
        total_logp = total_logp + logp[arange_b, pick_t] * net_t.to(DTYPE)

        # Drive the state machines and stage the next step's inputs.
        for b in range(B):
            if k == 0:
                anchors[b] = picks[b]
                move_types[b].append(MoveType.S)
                states[b] = begin_action(tours[b], int(picks[b]))
                in_mu[b, 1] = picks[b]
                in_lam[b, 1] = states[b].tail  # == anchor
                continue
            if not alive[b]:
                if forced is not None and forced[b].selections[k - 1] != NULL_SENTINEL:
                    raise InvalidMoveError("selection after termination")
                continue
            st = states[b]
            if net_rows[b]:
                sel = int(picks[b])
                st, mt = advance(st, sel)
                selections[b, k - 1] = sel
                move_types[b].append(mt)
                if mt is MoveType.E:
                    alive[b] = False
                elif k + 1 < K:
                    in_mu[b, k + 1] = sel
                    in_lam[b, k + 1] = st.tail
            else:
                # Forced E: explicitly on the head if it is still rank-valid
                # (allow_e_move off), otherwise the enforced sentinel.
                if st.head_rank < st.n_total:
                    sel = st.head
                    if forced is not None and forced[b].selections[k - 1] != sel:
                        raise InvalidMoveError("trace disagrees with forced E-move")
                    st, mt = advance(st, sel)
                    selections[b, k - 1] = sel
                else:
                    if (
                        forced is not None
                        and forced[b].selections[k - 1] != ENFORCED_SENTINEL
                    ):
                        raise InvalidMoveError("trace missing enforced sentinel")
                    st, mt = advance(st, ENFORCED_SENTINEL)
                    selections[b, k - 1] = ENFORCED_SENTINEL
                move_types[b].append(MoveType.E)
                alive[b] = False

    traces = []
    for b in range(B):
        pad = K - len(move_types[b])
        traces.append(
            ActionTrace(
                anchor=int(anchors[b]),
                selections=tuple(int(v) for v in selections[b]),
                move_types=tuple(move_types[b]) + (MoveType.NULL,) * pad,
            )
        )
    cache = DecodeCache(
        anchors=anchors,
        selections=selections,
        net_step=net_step,
        masks=masks,
        in_mu=in_mu,
        in_lam=in_lam,
    )
    return traces, total_logp, cache


def replay_cache(
    policy: PolicyNet, h: torch.Tensor, cache: DecodeCache, es: np.ndarray | None = None
) -> torch.Tensor:
    """Differentiable teacher-forced replay from a DecodeCache (no state
    machine); bit-for-bit the same arithmetic as decode_batch."""
    cfg = policy.cfg
    B, n, d = h.shape
    K = cache.net_step.shape[1]
    w_mu, w_lam = _hyper_outs(policy, es, B)
    q_mu, q_lam = _stream_state_init(policy, h)
    total_logp = h.new_zeros(B)
    arange_b = torch.arange(B)
    for k in range(K):
        if k == 0:
            o_mu = policy.stream_mu.first_input.unsqueeze(0).expand(B, d)
            o_lam = policy.stream_lam.first_input.unsqueeze(0).expand(B, d)
            step_mask = np.ones((B, n), dtype=bool)
            picks = cache.anchors
        else:
            o_mu = h[arange_b, torch.from_numpy(cache.in_mu[:, k])]
            o_lam = h[arange_b, torch.from_numpy(cache.in_lam[:, k])]
            step_mask = cache.masks[:, k - 1, :]
            picks = np.maximum(cache.selections[:, k - 1], 0)
        if cfg.use_grus:
            q_mu = policy.stream_mu.gru(o_mu, q_mu)
            q_lam = policy.stream_lam.gru(o_lam, q_lam)
        else:
            q_mu, q_lam = o_mu, o_lam
        if k == 0 and not cfg.learnable_s_move:
            scores = h.new_zeros(B, n)
        else:
            scores = _step_scores(policy, h, q_mu, q_lam, w_mu, w_lam)
        net_t = torch.from_numpy(cache.net_step[:, k].copy())
        logits = scores.masked_fill(~torch.from_numpy(step_mask.copy()), float("-inf"))
        safe = torch.where(net_t.unsqueeze(1), logits, torch.zeros_like(scores))
        logp = torch.log_softmax(safe, dim=1)
        total_logp = total_logp + logp[arange_b, torch.from_numpy(picks.copy())] * net_t.to(DTYPE)
    return total_logp


def decode(
    policy: PolicyNet,
    h: torch.Tensor,
    tour: Tour,
    es_features: np.ndarray | None,
    rng: np.random.Generator | None,
    mode: str = "sample",
    K: int | None = None,
):
    """Single-instance decode; returns (ActionTrace, logprob tensor)."""
    traces, logp, _ = decode_batch(
        policy,
        h.unsqueeze(0) if h.ndim == 2 else h,
        [tour],
        es=None if es_features is None else np.asarray(es_features)[None, :],
        rngs=None if rng is None else [rng],
        mode=mode,
        K=K,
    )
    return traces[0], logp[0]


def trace_logprob(
    policy: PolicyNet,
    h: torch.Tensor,
    tour: Tour,
    es_features: np.ndarray | None,
    trace: ActionTrace,
) -> torch.Tensor:
    """Teacher-forced replay of a stored trace; differentiable."""
    K = 1 + len(trace.selections)
    _, logp, _ = decode_batch(
        policy,
        h.unsqueeze(0) if h.ndim == 2 else h,
        [tour],
        es=None if es_features is None else np.asarray(es_features)[None, :],
        rngs=None,
        mode="sample",
        K=K,
        forced=[trace],
    )
    return logp[0]


# --- critic -----------------------------------------------------------------


def critic_values(
    critic: CriticNet,
    h: torch.Tensor,
    bsf_cost: np.ndarray | float,
    bsf_eps_cost: np.ndarray | float | None = None,
    es_features: np.ndarray | None = None,
    gire_enabled: bool = False,
) -> dict[str, torch.Tensor]:
    """Per-state values: {'origin'} or {'origin','reg','bonus'} under GIRE.

    h may carry gradients from the policy encoder; it is detached here so the
    critic loss trains critic parameters only.
    """
    single = h.ndim == 2
    if single:
        h = h.unsqueeze(0)
    h = h.detach()
    B = h.shape[0]
    if gire_enabled and critic.cfg.kind != CVRP:
        raise InvalidStateError("feasibility critic heads are cvrp-only")

    def as_col(x) -> torch.Tensor:
        arr = np.asarray(x, dtype=np.float64).reshape(-1)
        if arr.shape[0] == 1 and B > 1:
            arr = np.repeat(arr, B)
        return torch.from_numpy(arr).unsqueeze(1)

    hh = critic.attn(h)
    y = hh @ critic.w_local + hh.mean(dim=1, keepdim=True) @ critic.w_global
    pooled = torch.cat([y.max(dim=1).values, y.mean(dim=1)], dim=-1)  # (B, d)
    out = {
        "origin": critic.head_origin(
            torch.cat([pooled, as_col(bsf_cost)], dim=-1)
        ).squeeze(-1)
    }
    if gire_enabled:
        if es_features is None or bsf_eps_cost is None:
            raise InvalidArgumentError("gire critic needs es features and eps cost")
        es_t = torch.from_numpy(
            np.asarray(es_features, dtype=np.float64).reshape(B, ES_DIM)
        )
        out["reg"] = critic.head_reg(
            torch.cat([pooled, as_col(bsf_cost), es_t], dim=-1)
        ).squeeze(-1)
        out["bonus"] = critic.head_bonus(
            torch.cat([pooled, as_col(bsf_eps_cost)], dim=-1)
        ).squeeze(-1)
    if single:
        out = {k: v[0] for k, v in out.items()}
    return out
