"""End-to-end command line tests: generation, training, solving, evaluation,
and the exit-code contract (0 ok, 2 usage, 3 config, 4 data, 5 internal)."""

import json

import pytest

from flexkopt.cli import main
from flexkopt.training import load_checkpoint

TRAIN_CONFIG = """\
# tiny smoke setup
problem = tsp
n_customers = 5
d = 8
encoder_layers = 1
heads = 2
K = 2
epochs = 1
batches_per_epoch = 1
batch_size = 2
n_step = 2
t_train = 2
val_size = 2
val_steps = 2
seed = 3
"""


def _run(argv) -> int:
    try:
        return main(argv)
    except SystemExit as exc:  # argparse usage failures
        return exc.code


def _write_jsonl(path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """One shared tiny pipeline: dataset, trained checkpoint, solve output."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "tsp5.jsonl"
    assert _run(["gen", "--problem", "tsp", "--n", "5", "--count", "3",
                 "--seed", "0", "--out", str(data)]) == 0

    cfg = root / "train.cfg"
    cfg.write_text(TRAIN_CONFIG)
    run_dir = root / "run"
    assert _run(["train", "--config", str(cfg), "--out", str(run_dir)]) == 0

    results = root / "results.jsonl"
    assert _run(["solve", "--ckpt", str(run_dir / "best.ckpt"),
                 "--instances", str(data), "--T", "6", "--d2a", "2",
                 "--seed", "5", "--out", str(results)]) == 0
    return {"root": root, "data": data, "cfg": cfg, "run": run_dir,
            "results": results}


# --- gen -----------------------------------------------------------------------


def test_gen_is_byte_deterministic(tmp_path):
    a, b, c = tmp_path / "a.jsonl", tmp_path / "b.jsonl", tmp_path / "c.jsonl"
    args = ["gen", "--problem", "cvrp", "--n", "6", "--count", "4", "--seed", "9"]
    assert _run(args + ["--out", str(a)]) == 0
    assert _run(args + ["--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert _run(["gen", "--problem", "cvrp", "--n", "6", "--count", "4",
                 "--seed", "10", "--out", str(c)]) == 0
    assert a.read_bytes() != c.read_bytes()


def test_gen_rejects_tiny_n(tmp_path):
    code = _run(["gen", "--problem", "tsp", "--n", "2", "--count", "1",
                 "--seed", "0", "--out", str(tmp_path / "x.jsonl")])
    assert code == 2


def test_gen_rejects_unknown_problem(tmp_path):
    code = _run(["gen", "--problem", "atsp", "--n", "5", "--count", "1",
                 "--seed", "0", "--out", str(tmp_path / "x.jsonl")])
    assert code == 2


# --- train -----------------------------------------------------------------------


def test_train_writes_artifacts_and_echoes_defaults(workdir):
    run = workdir["run"]
    assert (run / "best.ckpt").exists()
    assert (run / "epoch_0001.ckpt").exists()
    assert (run / "log.csv").exists()
    bundle = load_checkpoint(run / "best.ckpt")
    # Keys omitted from the config file land at their documented defaults.
    assert bundle.config.lr_policy == pytest.approx(8e-5, abs=0)
    assert bundle.config.gamma == 0.999
    assert bundle.config.omega == 3
    assert bundle.config.t_his == 25


def test_train_unknown_config_key_exits_3(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("problem = tsp\nwarp_factor = 9\n")
    assert _run(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 3
    assert "warp_factor" in capsys.readouterr().err


def test_train_out_of_range_gamma_exits_3(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("problem = tsp\nn_customers = 5\ngamma = 1.5\n")
    assert _run(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 3


def test_train_config_line_without_equals_exits_3(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("problem = tsp\njust some words\n")
    assert _run(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 3
    assert ":2:" in capsys.readouterr().err


def test_train_missing_config_file_exits_3(tmp_path):
    missing = tmp_path / "nope.cfg"
    assert _run(["train", "--config", str(missing), "--out", str(tmp_path / "o")]) == 3


# --- solve -----------------------------------------------------------------------


def _rows_sans_wall(path):
    rows = [json.loads(line) for line in path.read_text().splitlines()]
    for row in rows:
        row.pop("wall_ms")
    return rows


def test_solve_output_contract(workdir):
    rows = [json.loads(line) for line in workdir["results"].read_text().splitlines()]
    assert len(rows) == 3
    for row in rows:
        assert set(row) == {"id", "best_cost", "best_tour", "steps",
                            "aug_events", "wall_ms"}
        assert sorted(row["best_tour"]) == list(range(5))
        assert row["steps"] == 6
        assert row["best_cost"] > 0


def test_solve_is_deterministic_modulo_wall_time(workdir, tmp_path):
    again = tmp_path / "again.jsonl"
    assert _run(["solve", "--ckpt", str(workdir["run"] / "best.ckpt"),
                 "--instances", str(workdir["data"]), "--T", "6", "--d2a", "2",
                 "--seed", "5", "--out", str(again)]) == 0
    assert _rows_sans_wall(again) == _rows_sans_wall(workdir["results"])


def test_solve_rejects_zero_steps(workdir, tmp_path):
    code = _run(["solve", "--ckpt", str(workdir["run"] / "best.ckpt"),
                 "--instances", str(workdir["data"]), "--T", "0",
                 "--seed", "5", "--out", str(tmp_path / "x.jsonl")])
    assert code == 2


def test_solve_kind_mismatch_exits_3(workdir, tmp_path):
    cvrp_data = tmp_path / "cvrp.jsonl"
    assert _run(["gen", "--problem", "cvrp", "--n", "5", "--count", "2",
                 "--seed", "1", "--out", str(cvrp_data)]) == 0
    code = _run(["solve", "--ckpt", str(workdir["run"] / "best.ckpt"),
                 "--instances", str(cvrp_data), "--T", "4",
                 "--seed", "5", "--out", str(tmp_path / "x.jsonl")])
    assert code == 3


def test_solve_missing_checkpoint_exits_4(workdir, tmp_path):
    bogus = tmp_path / "bogus.ckpt"
    bogus.write_bytes(b"not a checkpoint at all")
    code = _run(["solve", "--ckpt", str(bogus),
                 "--instances", str(workdir["data"]), "--T", "4",
                 "--seed", "5", "--out", str(tmp_path / "x.jsonl")])
    assert code == 4


# --- eval -----------------------------------------------------------------------


def test_eval_mean_gap_single_worse_row(tmp_path, capsys):
    results = tmp_path / "r.jsonl"
    reference = tmp_path / "ref.jsonl"
    _write_jsonl(results, [{"id": f"i{k}", "best_cost": 1.01 if k == 0 else 1.0}
                           for k in range(100)])
    _write_jsonl(reference, [{"id": f"i{k}", "best_cost": 1.0}
                             for k in range(100)])
    out = tmp_path / "summary.json"
    assert _run(["eval", "--results", str(results), "--reference",
                 str(reference), "--out", str(out)]) == 0
    printed = capsys.readouterr().out
    assert "mean_gap: 0.0100%" in printed
    summary = json.loads(out.read_text())
    assert summary["count"] == 100
    assert summary["mean_gap"] == pytest.approx(1e-4, rel=1e-9)
    assert summary["feasibility_rate"] == 1.0


def test_eval_perfect_match_reports_zero_gap(workdir, tmp_path, capsys):
    out = tmp_path / "summary.json"
    assert _run(["eval", "--results", str(workdir["results"]),
                 "--reference", str(workdir["results"]),
                 "--instances", str(workdir["data"]),
                 "--out", str(out)]) == 0
    assert "mean_gap: 0.0000%" in capsys.readouterr().out
    summary = json.loads(out.read_text())
    assert summary["mean_gap"] == 0.0
    assert summary["feasibility_rate"] == 1.0


def test_eval_missing_reference_id_exits_4(tmp_path, capsys):
    results = tmp_path / "r.jsonl"
    reference = tmp_path / "ref.jsonl"
    _write_jsonl(results, [{"id": "z9", "best_cost": 1.0}])
    _write_jsonl(reference, [{"id": "other", "best_cost": 1.0}])
    assert _run(["eval", "--results", str(results),
                 "--reference", str(reference)]) == 4
    assert "z9" in capsys.readouterr().err


def test_eval_cost_mismatch_against_instances_exits_4(workdir, tmp_path, capsys):
    rows = [json.loads(line)
            for line in workdir["results"].read_text().splitlines()]
    rows[0]["best_cost"] *= 2.0
    doctored = tmp_path / "doctored.jsonl"
    _write_jsonl(doctored, rows)
    code = _run(["eval", "--results", str(doctored),
                 "--reference", str(workdir["results"]),
                 "--instances", str(workdir["data"])])
    assert code == 4
    assert "recomputed" in capsys.readouterr().err


def test_eval_bad_json_exits_4(tmp_path):
    results = tmp_path / "r.jsonl"
    results.write_text("{not json}\n")
    reference = tmp_path / "ref.jsonl"
    _write_jsonl(reference, [{"id": "a", "best_cost": 1.0}])
    assert _run(["eval", "--results", str(results),
                 "--reference", str(reference)]) == 4


def test_eval_empty_results_exits_4(tmp_path):
    results = tmp_path / "r.jsonl"
    results.write_text("")
    reference = tmp_path / "ref.jsonl"
    _write_jsonl(reference, [{"id": "a", "best_cost": 1.0}])
    assert _run(["eval", "--results", str(results),
                 "--reference", str(reference)]) == 4


# --- global flags ------------------------------------------------------------------


def test_threads_flag_is_accepted(tmp_path):
    out = tmp_path / "d.jsonl"
    assert _run(["--threads", "1", "gen", "--problem", "tsp", "--n", "5",
                 "--count", "1", "--seed", "0", "--out", str(out)]) == 0


def test_missing_subcommand_is_usage_error():
    assert _run([]) == 2
