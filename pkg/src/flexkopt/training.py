"""n-step PPO with curriculum warm-up, the guided-reward loss variants, and
checkpoint persistence.

Each batch draws fresh instances, warms their initial tours up with the
current policy (curriculum), then alternates n-step collection with a few
clipped update passes. Returns are bootstrapped from the current critic at
the segment end and recomputed every pass; the collection-time policy and
critic snapshots provide the PPO ratio denominators and value clamps.
"""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import torch

from . import gire
from .errors import ConfigError, DataError, TrainingDivergedError
from .instance import CVRP, TSP, generate_uniform
from .kopt import ActionTrace
from .networks import (
    CriticNet,
    DecodeCache,
    NetConfig,
    PolicyNet,
    critic_values,
    decode_batch,
    encode_batch,
    replay_cache,
)
from .search import (
    GireRuntime,
    SearchState,
    env_step,
    epsilon_for,
    init_search_state,
    reset_episode,
    rollout,
)
from .solution import node_features

CHECKPOINT_MAGIC = b"FLEXKOPT1\n"
CHECKPOINT_VERSION = 1
VAL_SEED_BASE = 900_000_000

_XI_TABLE = {20: 1.0, 50: 0.5, 100: 0.25, 200: 0.125}


def _nearest_size(n: int, table: dict[int, float]) -> float:
    best = min(table, key=lambda s: (abs(s - n), s))
    return table[best]


@dataclass
class Config:
    """Flat training configuration; every field is one config-file key.

    None means "use the documented size/problem-dependent default", resolved
    at construction.
    """

    problem: str = TSP
    n_customers: int = 20
    capacity: float | None = None
    depot_copies: int | None = None
    d: int = 128
    encoder_layers: int = 3
    heads: int = 4
    K: int = 4
    epochs: int = 200
    batches_per_epoch: int = 20
    batch_size: int | None = None  # 512 tsp / 600 cvrp
    n_step: int | None = None  # 4 tsp / 5 cvrp
    t_train: int | None = None  # 200 tsp / 250 cvrp
    omega: int = 3
    theta_clip: float = 0.1
    gamma: float = 0.999
    lr_policy: float = 8e-5
    lr_critic: float = 2e-5
    lr_decay: float = 0.985
    grad_clip: float = 0.05
    xi: float | None = None  # curriculum scalar, size-dependent
    alpha: float = gire.ALPHA_DEFAULT
    beta: float = gire.BETA_DEFAULT
    zeta: float = gire.ZETA_DEFAULT
    t_his: int = gire.T_HIS_DEFAULT
    c1: float = gire.ENTROPY_C1
    c2: float = gire.ENTROPY_C2
    ema_decay: float = gire.EMA_DECAY_DEFAULT
    vi_features: bool | None = None  # cvrp True / tsp False
    es_features: bool | None = None
    reward_shaping: bool | None = None
    use_grus: bool = True
    use_move_stream: bool = True
    use_edge_stream: bool = True
    learnable_s_move: bool = True
    allow_e_move: bool = True
    seed: int = 0
    val_size: int = 1000
    val_steps: int | None = None  # defaults to t_train

    def __post_init__(self) -> None:
        if self.problem not in (TSP, CVRP):
            raise ConfigError(f"problem must be tsp or cvrp, got {self.problem!r}")
        cvrp = self.problem == CVRP
        if self.batch_size is None:
            self.batch_size = 600 if cvrp else 512
        if self.n_step is None:
            self.n_step = 5 if cvrp else 4
        if self.t_train is None:
            self.t_train = 250 if cvrp else 200
        if self.xi is None:
            self.xi = _nearest_size(self.n_customers, _XI_TABLE)
        if self.vi_features is None:
            self.vi_features = cvrp
        if self.es_features is None:
            self.es_features = cvrp
        if self.reward_shaping is None:
            self.reward_shaping = cvrp
        if self.val_steps is None:
            self.val_steps = self.t_train
        self._validate()

    def _validate(self) -> None:
        def need(cond: bool, msg: str) -> None:
            if not cond:
                raise ConfigError(msg)

        need(self.n_customers >= (2 if self.problem == CVRP else 3),
             "n_customers too small")
        need(self.d >= 2 and self.d % 2 == 0, "d must be even and >= 2")
        need(self.heads >= 1 and self.d % self.heads == 0,
             "heads must divide d")
        need(self.encoder_layers >= 1, "encoder_layers must be >= 1")
        need(self.K >= 2, "K must be >= 2")
        need(self.epochs >= 1 and self.batches_per_epoch >= 1, "epochs/batches must be >= 1")
        need(self.batch_size >= 1, "batch_size must be >= 1")
        need(self.n_step >= 1 and self.t_train >= 1, "n_step/t_train must be >= 1")
        need(self.omega >= 1, "omega must be >= 1")
        need(self.theta_clip > 0, "theta_clip must be > 0")
        need(0.0 < self.gamma < 1.0, "gamma must lie in (0, 1)")
        need(self.lr_policy > 0 and self.lr_critic > 0, "learning rates must be > 0")
        need(0.0 < self.lr_decay <= 1.0, "lr_decay must lie in (0, 1]")
        need(self.grad_clip > 0, "grad_clip must be > 0")
        need(self.xi > 0, "xi must be > 0")
        need(self.alpha >= 0 and self.beta >= 0, "alpha/beta must be >= 0")
        need(self.zeta >= 0, "zeta must be >= 0")
        need(self.t_his >= 1, "t_his must be >= 1")
        need(self.c1 > 0 and self.c2 > 0, "c1/c2 must be > 0")
        need(0.0 <= self.ema_decay < 1.0, "ema_decay must lie in [0, 1)")
        need(self.use_move_stream or self.use_edge_stream,
             "at least one decoder stream must stay enabled")
        need(self.val_size >= 1 and self.val_steps >= 1, "val_size/val_steps must be >= 1")
        if self.problem == TSP:
            need(not (self.vi_features or self.es_features or self.reward_shaping),
                 "feasibility machinery is cvrp-only")
        if self.capacity is not None:
            need(self.capacity > 0, "capacity must be > 0")
        if self.depot_copies is not None:
            need(self.depot_copies >= 1, "depot_copies must be >= 1")

    def net_config(self) -> NetConfig:
        return NetConfig(
            kind=self.problem,
            d=self.d,
            encoder_layers=self.encoder_layers,
            heads=self.heads,
            K=self.K,
            vi_features=bool(self.vi_features),
            es_hypernet=bool(self.es_features),
            use_grus=self.use_grus,
            use_move_stream=self.use_move_stream,
            use_edge_stream=self.use_edge_stream,
            learnable_s_move=self.learnable_s_move,
            allow_e_move=self.allow_e_move,
        )

    def runtime(self) -> GireRuntime:
        return GireRuntime(
            shaping=bool(self.reward_shaping),
            alpha=self.alpha,
            beta=self.beta,
            ema_decay=self.ema_decay,
            c1=self.c1,
            c2=self.c2,
        )

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @staticmethod
    def from_dict(values: dict) -> "Config":
        known = {f.name for f in fields(Config)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        return Config(**values)

    @staticmethod
    def from_mapping(raw: dict[str, str]) -> "Config":
        """Build from flat key=value text values (CLI config files)."""
        typed: dict[str, object] = {}
        by_name = {f.name: f for f in fields(Config)}
        for key, val in raw.items():
            if key not in by_name:
                raise ConfigError(f"unknown config key(s): {key}")
            typed[key] = _parse_value(key, val, by_name[key].type)
        return Config(**typed)


_BOOL_WORDS = {
    "true": True, "1": True, "yes": True, "on": True,
    "false": False, "0": False, "no": False, "off": False,
}


def _parse_value(key: str, raw: str, annotation: str) -> object:
    text = raw.strip()
    if text.lower() in ("none", "null"):
        return None
    ann = str(annotation)
    try:
        if "bool" in ann:
            word = text.lower()
            if word not in _BOOL_WORDS:
                raise ValueError(f"not a boolean: {text}")
            return _BOOL_WORDS[word]
        if "int" in ann and "float" not in ann:
            return int(text)
        if "float" in ann:
            return float(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from exc


# --- model bundle and checkpoints --------------------------------------------


@dataclass
class ModelBundle:
    """A trained (or initialized) model with its configuration."""

    policy: PolicyNet
    critic: CriticNet
    config: Config
    epoch: int = 0
    val_obj: float = math.nan

    @property
    def zeta(self) -> float:
        return self.config.zeta

    @property
    def kind(self) -> str:
        return self.config.problem


def build_models(config: Config, rng: np.random.Generator) -> ModelBundle:
    net_cfg = config.net_config()
    policy = PolicyNet(net_cfg, rng)
    critic = CriticNet(net_cfg, rng)
    return ModelBundle(policy=policy, critic=critic, config=config)


def _named_blocks(bundle: ModelBundle) -> list[tuple[str, torch.Tensor]]:
    out = [("policy." + n, p) for n, p in bundle.policy.named_parameters()]
    out += [("critic." + n, p) for n, p in bundle.critic.named_parameters()]
    return out


def save_checkpoint(bundle: ModelBundle, path: str | Path) -> None:
    """Deterministic binary format: magic, length-prefixed JSON header
    (version, config echo, metadata, block table), then raw row-major
    float64 little-endian parameter data."""
    blocks = []
    payload = bytearray()
    for name, param in _named_blocks(bundle):
        arr = np.ascontiguousarray(param.detach().numpy(), dtype="<f8")
        blocks.append({"name": name, "shape": list(arr.shape)})
        payload += arr.tobytes()
    header = {
        "version": CHECKPOINT_VERSION,
        "config": bundle.config.to_dict(),
        "meta": {"epoch": bundle.epoch, "val_obj": bundle.val_obj},
        "blocks": blocks,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        fh.write(payload)


def load_checkpoint(path: str | Path) -> ModelBundle:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise DataError(f"{path}: not a checkpoint file")
    off = len(CHECKPOINT_MAGIC)
    (head_len,) = struct.unpack_from("<Q", blob, off)
    off += 8
    try:
        header = json.loads(blob[off:off + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: corrupt checkpoint header: {exc}") from exc
    off += head_len
    if header.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version")
    config = Config.from_dict(header["config"])
    bundle = build_models(config, np.random.default_rng(0))
    params = dict(_named_blocks(bundle))
    seen = set()
    for block in header["blocks"]:
        name, shape = block["name"], tuple(block["shape"])
        if name not in params:
            raise DataError(f"{path}: unexpected parameter block {name}")
        param = params[name]
        if tuple(param.shape) != shape:
            raise DataError(
                f"{path}: block {name} has shape {shape}, expected "
                f"{tuple(param.shape)}"
            )
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        end = off + count * 8
        if end > len(blob):
            raise DataError(f"{path}: truncated checkpoint data")
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(shape)
        with torch.no_grad():
            param.copy_(torch.from_numpy(arr.copy()))
        off = end
        seen.add(name)
    missing = sorted(set(params) - seen)
    if missing:
        raise DataError(f"{path}: missing parameter block(s): {', '.join(missing)}")
    if off != len(blob):
        raise DataError(f"{path}: trailing bytes after parameter data")
    meta = header.get("meta", {})
    bundle.epoch = int(meta.get("epoch", 0))
    bundle.val_obj = float(meta.get("val_obj", math.nan))
    return bundle


# --- trajectories and losses --------------------------------------------------


@dataclass
class Trajectory:
    """n collected steps per instance plus the bootstrap snapshot, with
    everything needed for exact teacher-forced replay."""

    policy: PolicyNet
    n_step: int
    gire: bool
    features: np.ndarray  # (n+1, B, N, d_h)
    positions: np.ndarray  # (n+1, B, N)
    bsf_costs: np.ndarray  # (n+1, B)
    eps_costs: np.ndarray  # (n+1, B)
    es: np.ndarray | None  # (n+1, B, 9) when the hypernet is active
    caches: list[DecodeCache]  # n entries
    traces: list[list[ActionTrace]]  # n x B
    old_logp: np.ndarray  # (n, B)
    rewards: np.ndarray  # (H, n, B): raw / alpha*reg / beta*bonus
    v_old: np.ndarray | None = None  # (H, n, B) collection-time critic
    returns: np.ndarray | None = None  # (H, n, B)
    advantages: np.ndarray | None = None  # (H, n, B)

    @property
    def heads(self) -> int:
        return self.rewards.shape[0]


def collect_segment(
    states: list[SearchState],
    policy: PolicyNet,
    n: int,
    gire_config: GireRuntime,
) -> Trajectory:
    """Sample n policy steps per state, snapshotting each pre-step state for
    replay. Mutates the states and (under shaping) the reward EMA."""
    B = len(states)
    N = states[0].instance.n_total
    vi = policy.cfg.vi_features
    use_es = policy.cfg.es_hypernet
    shaping = gire_config.shaping
    heads = 3 if shaping else 1

    feats = np.empty((n + 1, B, N, policy.cfg.d_h), dtype=np.float64)
    positions = np.empty((n + 1, B, N), dtype=np.int64)
    bsf_costs = np.empty((n + 1, B), dtype=np.float64)
    eps_costs = np.empty((n + 1, B), dtype=np.float64)
    es = np.empty((n + 1, B, gire.ES_DIM), dtype=np.float64) if use_es else None
    caches: list[DecodeCache] = []
    traces: list[list[ActionTrace]] = []
    old_logp = np.empty((n, B), dtype=np.float64)
    rewards = np.zeros((heads, n, B), dtype=np.float64)

    def snapshot(idx: int) -> None:
        for b, s in enumerate(states):
            feats[idx, b] = node_features(s.instance, s.tour, gire_enabled=vi)
            positions[idx, b] = s.tour.positions()
            bsf_costs[idx, b] = s.bsf_cost
            eps_costs[idx, b] = s.critic_eps_cost()
            if use_es:
                es[idx, b] = s.es_features()

    for t in range(n):
        snapshot(t)
        with torch.no_grad():
            h = encode_batch(policy, feats[t], positions[t])
            step_traces, logp, cache = decode_batch(
                policy,
                h,
                [s.tour for s in states],
                es=es[t] if use_es else None,
                rngs=[s.rng for s in states],
                mode="sample",
            )
        caches.append(cache)
        traces.append(step_traces)
        old_logp[t] = logp.numpy()
        raw_step = np.empty(B, dtype=np.float64)
        for b, s in enumerate(states):
            _, terms = env_step(s, step_traces[b], gire_config)
            raw_step[b] = terms.r
            rewards[0, t, b] = terms.r
            if shaping:
                rewards[1, t, b] = gire_config.alpha * terms.r_reg
                rewards[2, t, b] = gire_config.beta * terms.r_bonus
        if shaping:
            # Shaping above used the pre-update estimate; fold this step in.
            gire_config.mean_r = (
                gire_config.ema_decay * gire_config.mean_r
                + (1.0 - gire_config.ema_decay) * float(raw_step.mean())
            )
    snapshot(n)

    return Trajectory(
        policy=policy,
        n_step=n,
        gire=shaping,
        features=feats,
        positions=positions,
        bsf_costs=bsf_costs,
        eps_costs=eps_costs,
        es=es,
        caches=caches,
        traces=traces,
        old_logp=old_logp,
        rewards=rewards,
    )


def _critic_heads(
    critic: CriticNet, h: torch.Tensor, traj: Trajectory, steps: int
) -> torch.Tensor:
    """Stacked critic values (H, steps, B) for the first `steps` snapshots,
    given embeddings for exactly those snapshots, flattened step-major."""
    B = traj.old_logp.shape[1]
    bsf = traj.bsf_costs[:steps].reshape(-1)
    eps = traj.eps_costs[:steps].reshape(-1)
    es = traj.es[:steps].reshape(-1, gire.ES_DIM) if traj.es is not None else None
    vals = critic_values(
        critic,
        h,
        bsf,
        bsf_eps_cost=eps if traj.gire else None,
        es_features=es if traj.gire else None,
        gire_enabled=traj.gire,
    )
    names = ("origin", "reg", "bonus") if traj.gire else ("origin",)
    return torch.stack([vals[k].reshape(steps, B) for k in names])


def returns_and_advantages(
    trajectory: Trajectory, critic: CriticNet, gamma: float
) -> Trajectory:
    """Bootstrapped discounted returns from the current critic at the segment
    end, and advantages against the current per-state values. Stored back on
    the trajectory as detached arrays (targets are constants in the losses)."""
    if not 0.0 <= gamma < 1.0:
        raise ConfigError("gamma must lie in [0, 1) for returns")
    n, B = trajectory.old_logp.shape
    flat_feats = trajectory.features.reshape((n + 1) * B, *trajectory.features.shape[2:])
    flat_pos = trajectory.positions.reshape((n + 1) * B, -1)
    with torch.no_grad():
        h = encode_batch(trajectory.policy, flat_feats, flat_pos)
        values = _critic_heads(critic, h, trajectory, n + 1).numpy()  # (H, n+1, B)
    heads = trajectory.heads
    returns = np.empty((heads, n, B), dtype=np.float64)
    nxt = values[:, n, :]
    for t in range(n - 1, -1, -1):
        nxt = trajectory.rewards[:, t, :] + gamma * nxt
        returns[:, t, :] = nxt
    trajectory.returns = returns
    trajectory.advantages = returns - values[:, :n, :]
    return trajectory


def ppo_losses(
    policy: PolicyNet,
    critic: CriticNet,
    trajectory: Trajectory,
    theta_clip: float,
    gire_enabled: bool,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Clipped-surrogate losses, both to MINIMIZE.

    policy_loss = -mean min(ratio*A, clip(ratio)*A) with A summed across
    heads; critic_loss = mean max over {plain, value-clipped} of the squared
    errors summed across heads. Value clamp: v_old + clip(v - v_old, +-theta).
    """
    if trajectory.advantages is None or trajectory.v_old is None:
        raise ConfigError("trajectory lacks advantages/v_old; run the prep steps")
    if gire_enabled != trajectory.gire:
        raise ConfigError("gire_enabled disagrees with the trajectory")
    n, B = trajectory.old_logp.shape
    flat_feats = trajectory.features[:n].reshape(n * B, *trajectory.features.shape[2:])
    flat_pos = trajectory.positions[:n].reshape(n * B, -1)
    h = encode_batch(trajectory.policy, flat_feats, flat_pos)

    new_logp = []
    for t in range(n):
        h_t = h[t * B:(t + 1) * B]
        es_t = trajectory.es[t] if trajectory.es is not None else None
        new_logp.append(replay_cache(policy, h_t, trajectory.caches[t], es=es_t))
    new_logp_t = torch.stack(new_logp)  # (n, B)
    old_logp_t = torch.from_numpy(trajectory.old_logp)
    ratio = torch.exp(new_logp_t - old_logp_t)
    adv = torch.from_numpy(trajectory.advantages.sum(axis=0))  # (n, B)
    clipped_ratio = torch.clamp(ratio, 1.0 - theta_clip, 1.0 + theta_clip)
    objective = torch.minimum(ratio * adv, clipped_ratio * adv).mean()
    policy_loss = -objective

    v = _critic_heads(critic, h, trajectory, n)  # (H, n, B) with grad
    v_old = torch.from_numpy(trajectory.v_old)
    v_clip = v_old + torch.clamp(v - v_old, -theta_clip, theta_clip)
    targets = torch.from_numpy(trajectory.returns)
    err_plain = ((v - targets) ** 2).sum(dim=0)
    err_clip = ((v_clip - targets) ** 2).sum(dim=0)
    critic_loss = torch.maximum(err_plain, err_clip).mean()
    return policy_loss, critic_loss


def snapshot_values(trajectory: Trajectory, critic: CriticNet) -> None:
    """Collection-time critic snapshot (the value-clip anchors)."""
    n, B = trajectory.old_logp.shape
    flat_feats = trajectory.features[:n].reshape(n * B, *trajectory.features.shape[2:])
    flat_pos = trajectory.positions[:n].reshape(n * B, -1)
    with torch.no_grad():
        h = encode_batch(trajectory.policy, flat_feats, flat_pos)
        trajectory.v_old = _critic_heads(critic, h, trajectory, n).numpy()


# --- training loop -------------------------------------------------------------


def _make_states(
    config: Config, seeds: np.ndarray, instance_seeds: np.ndarray
) -> list[SearchState]:
    states = []
    for inst_seed, rng_seed in zip(instance_seeds, seeds):
        inst = generate_uniform(
            config.problem,
            config.n_customers,
            int(inst_seed),
            capacity=config.capacity,
            n_depot_copies=config.depot_copies,
        )
        states.append(
            init_search_state(
                inst,
                np.random.default_rng(int(rng_seed)),
                epsilon=epsilon_for(inst, config.zeta),
                t_his=config.t_his,
            )
        )
    return states


def validation_states(config: Config) -> list[SearchState]:
    """Fixed held-out instances shared by every run of the same problem."""
    seeds = np.arange(config.val_size) + VAL_SEED_BASE
    return _make_states(config, seeds + 10_000_000, seeds)


def validate(bundle: ModelBundle) -> float:
    states = validation_states(bundle.config)
    rollout(states, bundle.policy, bundle.config.val_steps, GireRuntime.disabled())
    return float(np.mean([s.bsf_cost for s in states]))


def _check_finite(loss_p: torch.Tensor, loss_c: torch.Tensor, where: str) -> None:
    if not (torch.isfinite(loss_p) and torch.isfinite(loss_c)):
        raise TrainingDivergedError(
            f"non-finite loss at {where}: policy={float(loss_p)}, "
            f"critic={float(loss_c)}"
        )


def _assert_params_finite(bundle: ModelBundle, where: str) -> None:
    for name, param in _named_blocks(bundle):
        if not torch.isfinite(param).all():
            raise TrainingDivergedError(f"non-finite parameter {name} at {where}")


def train(
    config: Config, rng: np.random.Generator, out_dir: str | Path | None = None
) -> ModelBundle:
    """Full training run. Writes per-epoch checkpoints and log.csv into
    out_dir when given; returns the bundle with the best validation
    objective."""
    bundle = build_models(config, rng)
    policy, critic = bundle.policy, bundle.critic
    runtime = config.runtime()
    data_rng = np.random.default_rng(int(rng.integers(0, 2**63 - 1)))
    opt_policy = torch.optim.Adam(policy.parameters(), lr=config.lr_policy)
    opt_critic = torch.optim.Adam(critic.parameters(), lr=config.lr_critic)

    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
    log_rows: list[dict] = []

    def log_epoch(epoch: int, mean_obj: float, mean_reward, p_ff, p_uu, lr: float):
        row = {
            "epoch": epoch,
            "mean_obj": repr(mean_obj),
            "mean_reward": "" if mean_reward is None else repr(mean_reward),
            "p_ff": "" if p_ff is None else repr(p_ff),
            "p_uu": "" if p_uu is None else repr(p_uu),
            "lr": repr(lr),
        }
        log_rows.append(row)
        if out_path is not None:
            with open(out_path / "log.csv", "w", newline="") as fh:
                writer = csv.DictWriter(fh, fieldnames=list(row.keys()))
                writer.writeheader()
                writer.writerows(log_rows)

    best_state: dict | None = None
    best_obj = math.inf
    best_epoch = 0

    val0 = validate(bundle)
    log_epoch(0, val0, None, None, None, config.lr_policy)

    for epoch in range(1, config.epochs + 1):
        epoch_rewards: list[float] = []
        epoch_pff: list[float] = []
        epoch_puu: list[float] = []
        warm = int(math.floor(epoch / config.xi))
        for _ in range(config.batches_per_epoch):
            inst_seeds = data_rng.integers(0, 2**63 - 1, size=config.batch_size)
            rng_seeds = data_rng.integers(0, 2**63 - 1, size=config.batch_size)
            states = _make_states(config, rng_seeds, inst_seeds)
            if warm > 0:
                rollout(states, policy, warm, runtime)
                for s in states:
                    reset_episode(s)
            t = 0
            while t < config.t_train:
                traj = collect_segment(states, policy, config.n_step, runtime)
                snapshot_values(traj, critic)
                for _pass in range(config.omega):
                    returns_and_advantages(traj, critic, config.gamma)
                    loss_p, loss_c = ppo_losses(
                        policy, critic, traj, config.theta_clip, traj.gire
                    )
                    _check_finite(loss_p, loss_c, f"epoch {epoch}")
                    opt_policy.zero_grad(set_to_none=True)
                    opt_critic.zero_grad(set_to_none=True)
                    (loss_p + loss_c).backward()
                    torch.nn.utils.clip_grad_norm_(policy.parameters(), config.grad_clip)
                    torch.nn.utils.clip_grad_norm_(critic.parameters(), config.grad_clip)
                    opt_policy.step()
                    opt_critic.step()
                    _assert_params_finite(bundle, f"epoch {epoch}")
                epoch_rewards.append(float(traj.rewards[0].mean()))
                if traj.es is not None:
                    epoch_pff.append(float(traj.es[:-1, :, 6].mean()))
                    epoch_puu.append(float(traj.es[:-1, :, 7].mean()))
                t += config.n_step

        lr_epoch = opt_policy.param_groups[0]["lr"]
        for group in opt_policy.param_groups:
            group["lr"] *= config.lr_decay
        for group in opt_critic.param_groups:
            group["lr"] *= config.lr_decay

        bundle.epoch = epoch
        bundle.val_obj = validate(bundle)
        mean_reward = float(np.mean(epoch_rewards)) if epoch_rewards else None
        p_ff = float(np.mean(epoch_pff)) if epoch_pff else None
        p_uu = float(np.mean(epoch_puu)) if epoch_puu else None
        log_epoch(epoch, bundle.val_obj, mean_reward, p_ff, p_uu, lr_epoch)
        if out_path is not None:
            save_checkpoint(bundle, out_path / f"epoch_{epoch:04d}.ckpt")
        if bundle.val_obj < best_obj:
            best_obj = bundle.val_obj
            best_epoch = epoch
            best_state = {
                name: param.detach().clone()
                for name, param in _named_blocks(bundle)
            }

    if best_state is not None:
        params = dict(_named_blocks(bundle))
        with torch.no_grad():
            for name, tensor in best_state.items():
                params[name].copy_(tensor)
        bundle.epoch = best_epoch
        bundle.val_obj = best_obj
    if out_path is not None:
        save_checkpoint(bundle, out_path / "best.ckpt")
    return bundle
