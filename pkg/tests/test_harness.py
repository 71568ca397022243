import json

import pytest

from catrl import cli, harness
from catrl.config import (ExperimentConfig, apply_overrides, config_equal, from_dict, load_config,
                          save_config)
from catrl.errors import ConfigError, IncompatibleCheckpointError

TINY = ["algo.epochs=2", "algo.num_envs=4", "algo.horizon=8", "algo.minibatch_size=16", "algo.mini_epochs=1",
        "algo.actor_hidden=[8]", "algo.critic_hidden=[8]", "run.eval_episodes=2"]


def tiny(out, *extra, env="pendulum"):
    doc = apply_overrides(ExperimentConfig(env_name=env).to_dict(), TINY + [f'run.output_dir="{out}"', *extra])
    return from_dict(doc)


def write_toml(path, text):
    path.write_text(text)
    return path


def test_missing_required_param_is_reported_with_path(tmp_path):
    p = write_toml(tmp_path / "c.toml", """
[env]
name = "pendulum"
[constraints.torque]
fn = "torque_limit"
kind = "soft"
""")
    with pytest.raises(ConfigError, match=r"constraints\.torque\.limit: missing required field"):
        load_config(p)


def test_all_errors_reported_together(tmp_path):
    p = write_toml(tmp_path / "c.toml", """
[env]
name = "pendulum"
bogus = 1
[constraints.a]
fn = "nope"
kind = "medium"
[algo]
gamma = -1
[extra]
""")
    with pytest.raises(ConfigError) as e:
        load_config(p)
    msg = str(e.value)
    for fragment in ("env.bogus", "constraints.a.fn", "constraints.a.kind", "algo.gamma", "extra: unknown section"):
        assert fragment in msg


def test_unknown_gate_and_variant():
    doc = {"env": {"name": "pointmass"},
           "constraints": {"h": {"fn": "heading_alignment", "kind": "soft", "max_angle": 0.5, "gate": "x"}}}
    with pytest.raises(ConfigError, match="constraints.h.gate"):
        from_dict(doc)
    with pytest.raises(ConfigError, match="variant.name"):
        from_dict({"variant": {"name": "magic"}})
    with pytest.raises(ConfigError, match="penalty_weights"):
        from_dict({"variant": {"name": "penalty"}})


def test_bad_config_file_messages(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.toml")
    with pytest.raises(ConfigError):
        load_config(write_toml(tmp_path / "bad.toml", "[env\nname="))


def test_toml_roundtrip(tmp_path):
    cfg = tiny(tmp_path / "r", "env.mass=0.4", "variant=penalty", "variant.penalty_weights={torque = 2.0}")
    cfg = cfg.resolve()
    save_config(cfg, tmp_path / "c.toml")
    assert config_equal(load_config(tmp_path / "c.toml"), cfg)


def test_overrides_apply_dotted_paths():
    cfg = from_dict(apply_overrides({}, ["variant=etmdp", "algo.learning_rate=1e-3", "env.mass=0.5",
                                         "algo.actor_hidden=[32, 32]"]))
    assert cfg.variant.name == "etmdp" and cfg.algo.learning_rate == 1e-3
    assert cfg.env_params["mass"] == 0.5 and cfg.algo.actor_hidden == [32, 32]
    with pytest.raises(ConfigError):
        apply_overrides({}, ["novalue"])


def test_output_root_env_var(tmp_path, monkeypatch):
    monkeypatch.setenv("CATRL_OUTPUT_ROOT", str(tmp_path))
    assert ExperimentConfig().output_path() == tmp_path / "runs" / "default"


@pytest.fixture(scope="module")
def finished_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    return harness.run_config(tiny(out))


def test_run_writes_all_artifacts(finished_run):
    out = finished_run.output_dir
    for name in ("config.toml", "metrics.csv", "checkpoint.npz", "eval.json", "eval_log.npz"):
        assert (out / name).exists()
    header, rows = harness.read_metrics(out / "metrics.csv")
    assert header[0] == "epoch" and [r[0] for r in rows] == ["1", "2"]
    assert "viol_frac.torque" in header
    report = json.loads((out / "eval.json").read_text())
    assert report["episodes"] == 2 and "success_rule" in report


def test_stored_config_reproduces_run(finished_run, tmp_path):
    cfg = load_config(finished_run.output_dir / "config.toml", [f'run.output_dir="{tmp_path}"'])
    harness.run_config(cfg)
    assert (tmp_path / "metrics.csv").read_bytes() == (finished_run.output_dir / "metrics.csv").read_bytes()


def test_violation_fraction_matches_independent_recount(finished_run):
    log_ = harness.EvalLog.load(finished_run.output_dir / "eval_log.npz")
    recount = harness.recount_violation_fraction(log_)
    for cid, frac in finished_run.report.violation_fraction.items():
        assert 0.0 <= frac <= 1.0
        assert frac == pytest.approx(recount[cid], abs=1e-15)


def test_checkpoint_roundtrip_and_eval(finished_run):
    ckpt = harness.load_checkpoint(finished_run.output_dir / "checkpoint.npz")
    assert ckpt.meta["schema_version"] == harness.CHECKPOINT_SCHEMA
    report, _ = harness.evaluate_checkpoint(finished_run.output_dir / "checkpoint.npz", episodes=2,
                                            seed=finished_run.config.run.seed)
    assert report.to_dict() == finished_run.report.to_dict()


def test_checkpoint_rejected_on_mismatched_env(finished_run, tmp_path):
    wrong = tiny(tmp_path, env="pointmass")
    with pytest.raises(IncompatibleCheckpointError):
        harness.evaluate_checkpoint(finished_run.output_dir / "checkpoint.npz", wrong)


def test_failed_run_leaves_marker(tmp_path, monkeypatch):
    def boom(cfg, on_epoch=None):
        on_epoch({**{c: 0.0 for c in harness.metric_columns(["torque", "joint_velocity", "action_rate"])},
                  "epoch": 1})
        raise RuntimeError("diverged")
    monkeypatch.setattr(harness, "train", boom)
    with pytest.raises(RuntimeError):
        harness.run_config(tiny(tmp_path))
    assert "diverged" in (tmp_path / "FAILED").read_text()
    assert len((tmp_path / "metrics.csv").read_text().splitlines()) == 2


def test_metrics_writer_rejects_gaps(tmp_path):
    w = harness.MetricsWriter(tmp_path / "m.csv", ["epoch", "x"])
    w.write({"epoch": 1, "x": 0.1})
    with pytest.raises(RuntimeError):
        w.write({"epoch": 3, "x": 0.2})
    w.close()


def test_single_run_aggregate_has_no_dispersion():
    rep = harness.EvalReport(["a"], {"a": 0.1}, 0.1, 5.0, 0.0, [True], 1.0, 1)
    table = harness.aggregate({"x": [rep]})
    assert table["x"]["return"] == {"mean": 5.0, "std": None, "n": 1}
    assert "(n=1)" in harness.render_table(table)


def test_compare_small_matrix(tmp_path):
    base = tiny(tmp_path / "unused")
    matrix = {v: base.with_overrides([f"variant={v}"]) for v in ("cat", "etmdp")}
    doc = harness.compare(matrix, [0, 1], tmp_path / "cmp")
    assert doc["table"]["cat"]["runs"] == 2 and not doc["failures"]
    assert doc["table"]["cat"]["return"]["std"] is not None
    assert (tmp_path / "cmp" / "compare.md").read_text().startswith("| Method")
    with pytest.raises(ConfigError):
        harness.compare(matrix, [0], tmp_path / "cmp2")


def test_table2_preset_rows():
    rows = harness.table2_preset(ExperimentConfig())
    assert list(rows) == ["hard_only", "etmdp", "penalty", "cat-optionA", "cat-optionB"]
    assert rows["penalty"].variant.penalty_weights == {"torque": 1.0, "joint_velocity": 1.0, "action_rate": 1.0}
    assert rows["cat-optionB"].task_mode == "constraint"
    assert "upright" in rows["cat-optionB"].resolved_constraints()


def test_export_plotdata(finished_run, tmp_path):
    paths = harness.export_plotdata(finished_run.output_dir, tmp_path)
    names = {p.name for p in paths}
    assert "mean_raw_return.csv" in names and "c_max.torque.csv" in names
    lines = (tmp_path / "lr.csv").read_text().splitlines()
    assert lines[0] == "epoch,lr" and len(lines) == 3


def test_cli_exit_codes(tmp_path, capsys):
    cfg = tmp_path / "c.toml"
    save_config(tiny(tmp_path / "cli"), cfg)
    assert cli.main(["train", str(cfg), "--variant", "hard_only"]) == 0
    assert "hard_only" in (tmp_path / "cli" / "config.toml").read_text()
    assert cli.main(["eval", str(tmp_path / "cli" / "checkpoint.npz"), "--episodes", "1"]) == 0
    assert cli.main(["train", str(cfg), "--set", "algo.gamma=-3"]) == 1
    assert cli.main(["eval", str(tmp_path / "nothing.npz")]) == 2
    assert cli.main(["export", str(tmp_path / "cli")]) == 0
    err = capsys.readouterr().err
    assert "algo.gamma" in err
