"""Training-loop tests: config resolution, bootstrapped returns, the clipped
losses, replay exactness inside collected segments, checkpoint persistence,
and end-to-end determinism of tiny runs."""

import json
import math
import struct

import numpy as np
import pytest
import torch

from flexkopt.errors import ConfigError, DataError
from flexkopt.instance import CVRP, TSP, generate_uniform
from flexkopt.networks import encode_batch, replay_cache
from flexkopt.search import GireRuntime, epsilon_for, init_search_state
from flexkopt.training import (
    CHECKPOINT_MAGIC,
    Config,
    _make_states,
    build_models,
    collect_segment,
    load_checkpoint,
    ppo_losses,
    returns_and_advantages,
    save_checkpoint,
    snapshot_values,
    train,
    validate,
    validation_states,
)


def _tsp_cfg(**over) -> Config:
    base = dict(
        problem=TSP,
        n_customers=6,
        d=8,
        encoder_layers=1,
        heads=2,
        K=2,
        epochs=1,
        batches_per_epoch=1,
        batch_size=2,
        n_step=2,
        t_train=2,
        val_size=2,
        val_steps=2,
        seed=0,
    )
    base.update(over)
    return Config(**base)


def _cvrp_cfg(**over) -> Config:
    over.setdefault("problem", CVRP)
    return _tsp_cfg(**over)


def _states(cfg: Config, count: int, seed0: int = 100):
    out = []
    for i in range(count):
        inst = generate_uniform(
            cfg.problem,
            cfg.n_customers,
            seed0 + i,
            capacity=cfg.capacity,
            n_depot_copies=cfg.depot_copies,
        )
        out.append(
            init_search_state(
                inst,
                np.random.default_rng(seed0 + 1000 + i),
                epsilon=epsilon_for(inst, cfg.zeta),
                t_his=cfg.t_his,
            )
        )
    return out


def _freeze_critic(critic, value: float) -> None:
    """Zero the final layers so every head outputs exactly `value`."""
    heads = [critic.head_origin]
    if hasattr(critic, "head_reg"):
        heads += [critic.head_reg, critic.head_bonus]
    with torch.no_grad():
        for head in heads:
            head.layers[-1].weight.zero_()
            head.layers[-1].bias.fill_(value)


# --- configuration -----------------------------------------------------------


def test_tsp_defaults_resolve():
    cfg = Config(problem=TSP, n_customers=20)
    assert cfg.batch_size == 512
    assert cfg.n_step == 4
    assert cfg.t_train == 200
    assert cfg.xi == 1.0
    assert cfg.vi_features is False
    assert cfg.es_features is False
    assert cfg.reward_shaping is False
    assert cfg.val_steps == cfg.t_train


def test_cvrp_defaults_resolve():
    cfg = Config(problem=CVRP, n_customers=50)
    assert cfg.batch_size == 600
    assert cfg.n_step == 5
    assert cfg.t_train == 250
    assert cfg.xi == 0.5
    assert cfg.vi_features is True
    assert cfg.es_features is True
    assert cfg.reward_shaping is True


@pytest.mark.parametrize(
    "n,xi",
    [(20, 1.0), (50, 0.5), (100, 0.25), (200, 0.125), (10, 1.0), (160, 0.125),
     (35, 1.0)],  # 35 ties 20 vs 50; the smaller size wins
)
def test_curriculum_scalar_uses_nearest_size(n, xi):
    assert Config(problem=TSP, n_customers=n).xi == xi


@pytest.mark.parametrize(
    "over",
    [
        {"gamma": 1.5},
        {"gamma": 1.0},
        {"gamma": 0.0},
        {"gamma": -0.1},
        {"theta_clip": 0.0},
        {"K": 1},
        {"d": 7},
        {"d": 10, "heads": 4},
        {"omega": 0},
        {"lr_decay": 0.0},
        {"ema_decay": 1.0},
        {"use_move_stream": False, "use_edge_stream": False},
        {"es_features": True},
        {"vi_features": True},
        {"reward_shaping": True},
        {"alpha": -0.1, "problem": CVRP},
        {"n_customers": 2},
        {"epochs": 0},
        {"grad_clip": 0.0},
        {"problem": "vrp"},
    ],
)
def test_config_rejects_out_of_range(over):
    base = dict(problem=TSP, n_customers=6)
    base.update(over)
    with pytest.raises(ConfigError):
        Config(**base)


def test_config_dict_round_trip():
    cfg = _cvrp_cfg(alpha=0.07, t_his=9)
    assert Config.from_dict(cfg.to_dict()) == cfg


def test_config_from_dict_rejects_unknown_key():
    with pytest.raises(ConfigError, match="unknown config key.*bogus"):
        Config.from_dict({"bogus": 1})


def test_config_from_mapping_parses_text_values():
    cfg = Config.from_mapping(
        {
            "problem": "cvrp",
            "n_customers": "12",
            "d": "16",
            "use_grus": "false",
            "allow_e_move": "off",
            "capacity": "none",
            "lr_policy": "1e-4",
        }
    )
    assert cfg.problem == CVRP
    assert cfg.n_customers == 12
    assert cfg.d == 16
    assert cfg.use_grus is False
    assert cfg.allow_e_move is False
    assert cfg.capacity is None
    assert cfg.lr_policy == pytest.approx(1e-4, abs=0)


@pytest.mark.parametrize(
    "raw",
    [{"use_grus": "maybe"}, {"n_customers": "twelve"}, {"lr_policy": "fast"},
     {"nonsense": "1"}],
)
def test_config_from_mapping_rejects_bad_text(raw):
    with pytest.raises(ConfigError):
        Config.from_mapping(raw)


def test_net_config_and_runtime_mirror_fields():
    cfg = _cvrp_cfg(alpha=0.02, beta=0.03, ema_decay=0.9)
    net = cfg.net_config()
    assert net.kind == CVRP
    assert net.K == cfg.K
    assert net.vi_features and net.es_hypernet
    rt = cfg.runtime()
    assert rt.shaping is True
    assert rt.alpha == 0.02 and rt.beta == 0.03 and rt.ema_decay == 0.9
    assert _tsp_cfg().runtime().shaping is False


# --- returns -----------------------------------------------------------------


def test_returns_frozen_example_values():
    cfg = _tsp_cfg()
    bundle = build_models(cfg, np.random.default_rng(3))
    _freeze_critic(bundle.critic, 0.5)
    traj = collect_segment(_states(cfg, 1), bundle.policy, 2, GireRuntime.disabled())
    traj.rewards = np.array([[[1.0], [0.0]]])  # (heads, n, B)
    returns_and_advantages(traj, bundle.critic, 0.999)
    np.testing.assert_allclose(
        traj.returns[0, :, 0], [1.4990005, 0.4995], rtol=0, atol=1e-12
    )
    np.testing.assert_allclose(
        traj.advantages[0, :, 0], [0.9990005, -0.0005], rtol=0, atol=1e-12
    )


def test_returns_gamma_zero_reduce_to_rewards():
    cfg = _tsp_cfg()
    bundle = build_models(cfg, np.random.default_rng(3))
    _freeze_critic(bundle.critic, 0.5)
    traj = collect_segment(_states(cfg, 2), bundle.policy, 3, GireRuntime.disabled())
    returns_and_advantages(traj, bundle.critic, 0.0)
    np.testing.assert_array_equal(traj.returns, traj.rewards)
    np.testing.assert_allclose(traj.advantages, traj.rewards - 0.5, atol=1e-15)


@pytest.mark.parametrize("gamma", [1.0, 1.5, -0.1])
def test_returns_reject_gamma_outside_unit_interval(gamma):
    cfg = _tsp_cfg()
    bundle = build_models(cfg, np.random.default_rng(3))
    traj = collect_segment(_states(cfg, 1), bundle.policy, 2, GireRuntime.disabled())
    with pytest.raises(ConfigError):
        returns_and_advantages(traj, bundle.critic, gamma)


# --- replay inside segments ----------------------------------------------------


def test_collected_segment_replays_to_identical_logprobs():
    cfg = _cvrp_cfg(n_customers=5, K=3)
    bundle = build_models(cfg, np.random.default_rng(5))
    traj = collect_segment(_states(cfg, 3), bundle.policy, 4, cfg.runtime())
    for t in range(4):
        h = encode_batch(bundle.policy, traj.features[t], traj.positions[t])
        logp = replay_cache(bundle.policy, h, traj.caches[t], es=traj.es[t])
        np.testing.assert_allclose(
            logp.detach().numpy(), traj.old_logp[t], rtol=0, atol=1e-12
        )


# --- clipped losses -------------------------------------------------------------


def _prepared(cfg: Config, seed: int, n: int, B: int):
    bundle = build_models(cfg, np.random.default_rng(seed))
    traj = collect_segment(_states(cfg, B), bundle.policy, n, GireRuntime.disabled())
    snapshot_values(traj, bundle.critic)
    returns_and_advantages(traj, bundle.critic, cfg.gamma)
    return bundle, traj


def test_policy_loss_clips_inflated_ratio():
    cfg = _tsp_cfg()
    bundle, traj = _prepared(cfg, 7, 2, 2)
    # Replay reproduces the stored logprobs, so shifting them dials the ratio.
    traj.old_logp = traj.old_logp - math.log(1.2)
    traj.advantages = np.ones_like(traj.advantages)
    traj.returns = traj.v_old.copy()
    loss_p, loss_c = ppo_losses(bundle.policy, bundle.critic, traj, 0.1, False)
    assert float(loss_p.detach()) == pytest.approx(-1.1, abs=1e-9)
    assert float(loss_c.detach()) == pytest.approx(0.0, abs=1e-18)


def test_policy_loss_clips_deflated_ratio_on_negative_advantage():
    cfg = _tsp_cfg()
    bundle, traj = _prepared(cfg, 7, 2, 2)
    traj.old_logp = traj.old_logp + math.log(1.25)  # ratio 0.8
    traj.advantages = -np.ones_like(traj.advantages)
    traj.returns = traj.v_old.copy()
    loss_p, _ = ppo_losses(bundle.policy, bundle.critic, traj, 0.1, False)
    assert float(loss_p.detach()) == pytest.approx(0.9, abs=1e-9)


def test_critic_loss_takes_worse_of_plain_and_clipped_error():
    cfg = _tsp_cfg()
    bundle = build_models(cfg, np.random.default_rng(9))
    _freeze_critic(bundle.critic, 0.25)
    traj = collect_segment(_states(cfg, 1), bundle.policy, 2, GireRuntime.disabled())
    snapshot_values(traj, bundle.critic)
    np.testing.assert_allclose(traj.v_old, 0.25, atol=1e-15)
    # Push the clamp anchor away: v stays on target but clip(v) lands 0.2 off,
    # and the pessimistic max must pick that branch up.
    traj.v_old = traj.v_old - 0.3
    traj.returns = np.full_like(traj.v_old, 0.25)
    traj.advantages = np.zeros_like(traj.v_old)
    loss_p, loss_c = ppo_losses(bundle.policy, bundle.critic, traj, 0.1, False)
    assert float(loss_p.detach()) == 0.0
    assert float(loss_c.detach()) == pytest.approx(0.04, abs=1e-12)


def test_ppo_losses_require_prepared_trajectory():
    cfg = _tsp_cfg()
    bundle = build_models(cfg, np.random.default_rng(7))
    traj = collect_segment(_states(cfg, 1), bundle.policy, 2, GireRuntime.disabled())
    with pytest.raises(ConfigError):
        ppo_losses(bundle.policy, bundle.critic, traj, 0.1, False)
    snapshot_values(traj, bundle.critic)
    returns_and_advantages(traj, bundle.critic, cfg.gamma)
    with pytest.raises(ConfigError):
        ppo_losses(bundle.policy, bundle.critic, traj, 0.1, True)


def test_unclipped_surrogate_gradient_matches_plain_policy_gradient():
    cfg = _tsp_cfg()
    bundle, traj = _prepared(cfg, 13, 2, 2)
    policy = bundle.policy

    loss_p, _ = ppo_losses(policy, bundle.critic, traj, 1e6, False)
    policy.zero_grad(set_to_none=True)
    loss_p.backward()
    surrogate = {
        n: p.grad.clone() for n, p in policy.named_parameters() if p.grad is not None
    }

    n, B = traj.old_logp.shape
    flat_feats = traj.features[:n].reshape(n * B, *traj.features.shape[2:])
    flat_pos = traj.positions[:n].reshape(n * B, -1)
    h = encode_batch(policy, flat_feats, flat_pos)
    new_logp = torch.stack(
        [replay_cache(policy, h[t * B:(t + 1) * B], traj.caches[t]) for t in range(n)]
    )
    adv = torch.from_numpy(traj.advantages.sum(axis=0))
    plain = -(new_logp * adv).mean()
    policy.zero_grad(set_to_none=True)
    plain.backward()

    # At collection time the ratio is exactly 1, so with a clip wide enough to
    # never bind the surrogate's gradient must coincide with advantage-weighted
    # logprob ascent.
    assert surrogate
    for name, param in policy.named_parameters():
        if param.grad is None:
            assert name not in surrogate
            continue
        np.testing.assert_allclose(
            surrogate[name].numpy(), param.grad.numpy(), rtol=0, atol=1e-9,
            err_msg=name,
        )


# --- shaping ablation ------------------------------------------------------------


def test_zero_coefficients_shaping_matches_raw_rewards():
    cfg = _cvrp_cfg(n_customers=5)
    bundle = build_models(cfg, np.random.default_rng(21))
    shaped_rt = GireRuntime(shaping=True, alpha=0.0, beta=0.0)
    plain_rt = GireRuntime.disabled()
    shaped = collect_segment(_states(cfg, 3), bundle.policy, 4, shaped_rt)
    plain = collect_segment(_states(cfg, 3), bundle.policy, 4, plain_rt)

    assert shaped.gire and not plain.gire
    assert shaped.rewards.shape == (3, 4, 3)
    assert plain.rewards.shape == (1, 4, 3)
    np.testing.assert_array_equal(shaped.rewards[0], plain.rewards[0])
    np.testing.assert_array_equal(shaped.rewards[1:], 0.0)
    np.testing.assert_array_equal(shaped.old_logp, plain.old_logp)

    # The EMA folds in each step's batch-mean raw reward; disabled mode never
    # touches it.
    assert plain_rt.mean_r == 0.0
    expect = 0.0
    for t in range(4):
        expect = 0.99 * expect + 0.01 * float(shaped.rewards[0, t].mean())
    assert shaped_rt.mean_r == pytest.approx(expect, abs=1e-15)


# --- state construction -----------------------------------------------------------


def test_make_states_keeps_instance_and_rng_seeds_apart():
    cfg = _cvrp_cfg(n_customers=5)
    states = _make_states(cfg, np.array([11]), np.array([22]))
    direct = generate_uniform(cfg.problem, cfg.n_customers, 22)
    np.testing.assert_array_equal(states[0].instance.coords, direct.coords)
    np.testing.assert_array_equal(states[0].instance.demands, direct.demands)
    assert states[0].epsilon == pytest.approx(epsilon_for(direct, cfg.zeta))
    assert states[0].instance.capacity == direct.capacity


def test_validation_states_are_fixed_across_run_seeds():
    a = validation_states(_tsp_cfg(seed=1, val_size=3))
    b = validation_states(_tsp_cfg(seed=999, val_size=3, batch_size=7))
    for sa, sb in zip(a, b):
        np.testing.assert_array_equal(sa.instance.coords, sb.instance.coords)
        assert sa.bsf_cost == sb.bsf_cost


# --- checkpoints -------------------------------------------------------------------


def _surgery(path, mutate):
    """Load checkpoint bytes, let `mutate(header, payload)` produce new parts,
    and write them back in the container format."""
    blob = path.read_bytes()
    off = len(CHECKPOINT_MAGIC)
    (head_len,) = struct.unpack_from("<Q", blob, off)
    header = json.loads(blob[off + 8:off + 8 + head_len].decode("utf-8"))
    payload = blob[off + 8 + head_len:]
    header, payload = mutate(header, payload)
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    path.write_bytes(
        CHECKPOINT_MAGIC + struct.pack("<Q", len(head)) + head + payload
    )


def test_checkpoint_round_trip_preserves_everything(tmp_path):
    cfg = _cvrp_cfg(n_customers=5, alpha=0.01)
    bundle = build_models(cfg, np.random.default_rng(31))
    bundle.epoch = 3
    bundle.val_obj = 1.25
    path = tmp_path / "model.ckpt"
    save_checkpoint(bundle, path)
    loaded = load_checkpoint(path)
    assert loaded.config == cfg
    assert loaded.epoch == 3
    assert loaded.val_obj == 1.25
    orig = dict(bundle.policy.named_parameters())
    for name, param in loaded.policy.named_parameters():
        assert torch.equal(param, orig[name]), name
    orig_c = dict(bundle.critic.named_parameters())
    for name, param in loaded.critic.named_parameters():
        assert torch.equal(param, orig_c[name]), name


def test_checkpoint_bytes_are_deterministic(tmp_path):
    cfg = _tsp_cfg()
    bundle = build_models(cfg, np.random.default_rng(31))
    save_checkpoint(bundle, tmp_path / "a.ckpt")
    save_checkpoint(bundle, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_checkpoint_rejects_corruption(tmp_path):
    cfg = _tsp_cfg()
    bundle = build_models(cfg, np.random.default_rng(31))
    good = tmp_path / "good.ckpt"
    save_checkpoint(bundle, good)
    blob = good.read_bytes()

    bad = tmp_path / "bad.ckpt"

    bad.write_bytes(b"NOTACKPT" + blob[8:])
    with pytest.raises(DataError, match="not a checkpoint"):
        load_checkpoint(bad)

    bad.write_bytes(blob[:-16])
    with pytest.raises(DataError, match="truncated"):
        load_checkpoint(bad)

    bad.write_bytes(blob + b"\x00\x00")
    with pytest.raises(DataError, match="trailing bytes"):
        load_checkpoint(bad)

    bad.write_bytes(blob)
    _surgery(bad, lambda h, p: ({**h, "version": 99}, p))
    with pytest.raises(DataError, match="version"):
        load_checkpoint(bad)

    def rename_block(h, p):
        h["blocks"][0]["name"] = "policy.bogus"
        return h, p

    bad.write_bytes(blob)
    _surgery(bad, rename_block)
    with pytest.raises(DataError, match="unexpected parameter block"):
        load_checkpoint(bad)

    def warp_shape(h, p):
        h["blocks"][0]["shape"] = [1, 1]
        return h, p

    bad.write_bytes(blob)
    _surgery(bad, warp_shape)
    with pytest.raises(DataError, match="shape"):
        load_checkpoint(bad)

    def drop_last_block(h, p):
        block = h["blocks"].pop()
        count = int(np.prod(block["shape"])) if block["shape"] else 1
        return h, p[:-count * 8]

    bad.write_bytes(blob)
    _surgery(bad, drop_last_block)
    with pytest.raises(DataError, match="missing parameter block"):
        load_checkpoint(bad)

    def break_json(h, p):
        return h, p

    bad.write_bytes(blob)
    off = len(CHECKPOINT_MAGIC)
    (head_len,) = struct.unpack_from("<Q", blob, off)
    corrupt = bytearray(blob)
    corrupt[off + 8] = ord("X")  # first header byte, breaks the JSON object
    bad.write_bytes(bytes(corrupt))
    with pytest.raises(DataError, match="corrupt checkpoint header"):
        load_checkpoint(bad)


# --- end-to-end tiny runs -------------------------------------------------------------


def test_train_emits_checkpoints_and_log(tmp_path):
    cfg = _tsp_cfg(epochs=2, batch_size=3, t_train=4, val_size=3, val_steps=3,
                   lr_policy=8e-5, lr_decay=0.985)
    bundle = train(cfg, np.random.default_rng(11), tmp_path)
    for name in ("epoch_0001.ckpt", "epoch_0002.ckpt", "best.ckpt", "log.csv"):
        assert (tmp_path / name).exists(), name

    import csv as _csv

    with open(tmp_path / "log.csv", newline="") as fh:
        rows = list(_csv.DictReader(fh))
    assert [r["epoch"] for r in rows] == ["0", "1", "2"]
    assert list(rows[0].keys()) == ["epoch", "mean_obj", "mean_reward", "p_ff",
                                    "p_uu", "lr"]
    assert rows[0]["mean_reward"] == ""
    assert rows[1]["mean_reward"] != ""
    # TSP runs carry no feasibility statistics.
    assert rows[1]["p_ff"] == "" and rows[1]["p_uu"] == ""
    # The logged rate is the one used that epoch; decay applies afterwards.
    assert float(rows[0]["lr"]) == pytest.approx(8e-5, abs=0)
    assert float(rows[1]["lr"]) == pytest.approx(8e-5, abs=0)
    assert float(rows[2]["lr"]) == pytest.approx(8e-5 * 0.985, rel=1e-15)

    # Best-epoch selection: the returned bundle carries the smallest logged
    # validation objective, and the saved best checkpoint reproduces it.
    vals = {int(r["epoch"]): float(r["mean_obj"]) for r in rows[1:]}
    best_epoch = min(vals, key=vals.get)
    assert bundle.epoch == best_epoch
    assert bundle.val_obj == vals[best_epoch]
    loaded = load_checkpoint(tmp_path / "best.ckpt")
    assert loaded.epoch == best_epoch
    assert loaded.val_obj == vals[best_epoch]
    assert validate(loaded) == pytest.approx(bundle.val_obj, abs=1e-12)

    for module in (bundle.policy, bundle.critic):
        for name, param in module.named_parameters():
            assert torch.isfinite(param).all(), name


def test_train_is_bitwise_deterministic(tmp_path):
    cfg = _cvrp_cfg(n_customers=4, epochs=1, batch_size=2, t_train=2,
                    val_size=2, val_steps=2)
    out1, out2 = tmp_path / "run1", tmp_path / "run2"
    b1 = train(cfg, np.random.default_rng(17), out1)
    b2 = train(cfg, np.random.default_rng(17), out2)
    assert b1.val_obj == b2.val_obj
    for name in ("best.ckpt", "epoch_0001.ckpt"):
        assert (out1 / name).read_bytes() == (out2 / name).read_bytes(), name
    assert (out1 / "log.csv").read_text() == (out2 / "log.csv").read_text()
