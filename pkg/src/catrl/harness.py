"""Running, evaluating, comparing and exporting experiments."""

from __future__ import annotations

import csv
import json
import logging
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from . import nn
from .algo import TrainResult, metric_columns, train
from .config import ExperimentConfig, dumps, load_config
from .envs import ConstrainedEnv, make_env
from .errors import ConfigError, IncompatibleCheckpointError

log = logging.getLogger(__name__)

CHECKPOINT_SCHEMA = 1
SUCCESS_RULE_NOTE = "artifact-defined stand-in success rule"


# -- checkpoints ----------------------------------------------------------

def save_checkpoint(path, result: TrainResult, config: ExperimentConfig):
    net, adam = result.net, result.adam
    meta = {
        "schema_version": CHECKPOINT_SCHEMA,
        "env_name": config.env_name,
        "obs_dim": net.obs_dim,
        "act_dim": net.act_dim,
        "actor_sizes": list(net.actor.layer_sizes),
        "critic_sizes": list(net.critic.layer_sizes),
        "activation": net.actor.activation,
        "log_std_bounds": list(net.log_std_bounds),
        "adam": {"step": adam.step, "learning_rate": adam.learning_rate, "beta1": adam.beta1,
                 "beta2": adam.beta2, "epsilon": adam.epsilon},
        "constraint_ids": [s.id for s in result.experiment.wiring.specs] if result.experiment else [],
        "config": config.to_dict(),
    }
    arrays = {f"net/{k}": v for k, v in net.state_dict().items()}
    for i, (m, v) in enumerate(zip(adam.m, adam.v)):
        arrays[f"adam/m/{i}"] = m
        arrays[f"adam/v/{i}"] = v
    arrays["c_max"] = result.termination.c_max
    arrays["schema_version"] = np.array(CHECKPOINT_SCHEMA)
    arrays["meta"] = np.array(json.dumps(meta))
    with open(path, "wb") as f:
        np.savez(f, **arrays)


@dataclass
class Checkpoint:
    net: nn.PolicyValueNet
    adam: nn.AdamState
    c_max: np.ndarray
    meta: dict


def load_checkpoint(path) -> Checkpoint:
    with np.load(path, allow_pickle=False) as data:
        version = int(data["schema_version"])
        if version != CHECKPOINT_SCHEMA:
            raise IncompatibleCheckpointError(f"{path}: checkpoint schema {version}, expected {CHECKPOINT_SCHEMA}")
        meta = json.loads(str(data["meta"]))
        net = nn.PolicyValueNet(meta["obs_dim"], meta["act_dim"], tuple(meta["actor_sizes"][1:-1]),
                                tuple(meta["critic_sizes"][1:-1]), meta["activation"],
                                rng=np.random.default_rng(0), log_std_bounds=tuple(meta["log_std_bounds"]))
        net.load_state_dict({k[4:]: data[k] for k in data.files if k.startswith("net/")})
        params = net.parameters()
        adam = nn.AdamState([data[f"adam/m/{i}"] for i in range(len(params))],
                            [data[f"adam/v/{i}"] for i in range(len(params))], **meta["adam"])
        c_max = data["c_max"].copy()
    return Checkpoint(net, adam, c_max, meta)


# -- evaluation -------------------------------------------------------------

@dataclass
class EvalReport:
    constraint_ids: list[str]
    violation_fraction: dict[str, float]
    any_violation_fraction: float
    mean_return: float
    std_return: float
    success: list[bool]
    success_rate: float
    episodes: int
    success_rule: str = SUCCESS_RULE_NOTE

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "EvalReport":
        return cls(**d)


@dataclass
class EvalLog:
    """Per-step evaluation record, arrays shaped (steps, episodes, ...)."""

    constraint_ids: list[str]
    reward: np.ndarray
    violated: np.ndarray
    quantities: dict[str, np.ndarray] = field(default_factory=dict)

    def save(self, path):
        arrays = {"reward": self.reward, "violated": self.violated,
                  "constraint_ids": np.array(json.dumps(self.constraint_ids))}
        arrays.update({f"q/{k}": v for k, v in self.quantities.items()})
        with open(path, "wb") as f:
            np.savez_compressed(f, **arrays)

    @classmethod
    def load(cls, path) -> "EvalLog":
        with np.load(path, allow_pickle=False) as d:
            return cls(json.loads(str(d["constraint_ids"])), d["reward"], d["violated"],
                       {k[2:]: d[k] for k in d.files if k.startswith("q/")})


def _policy_fn(net: nn.PolicyValueNet):
    return net.mean


def evaluate(policy, env: ConstrainedEnv, episodes: int, seed: int = 0) -> tuple[EvalReport, EvalLog]:
    """Roll the deterministic (mean) policy for full episodes and count violations per step.

    ``policy`` is a PolicyValueNet, a Checkpoint, or a callable obs -> action.
    """
    if isinstance(policy, Checkpoint):
        policy = policy.net
    if isinstance(policy, nn.PolicyValueNet):
        if policy.obs_dim != env.obs_dim or policy.act_dim != env.act_dim:
            raise IncompatibleCheckpointError(
                f"policy expects obs/act dims ({policy.obs_dim}, {policy.act_dim}) but {env.name} provides "
                f"({env.obs_dim}, {env.act_dim})")
        policy = _policy_fn(policy)
    if episodes < 1:
        raise ConfigError("evaluate needs at least one episode")
    rngs = [np.random.default_rng([int(seed), 2, i]) for i in range(episodes)]
    state = env.reset_batch(rngs)
    L, K = env.episode_length, len(env.constraints)
    rewards = np.zeros((L, episodes))
    violated = np.zeros((L, episodes, K), dtype=bool)
    quantities: dict[str, list] = {}
    for t in range(L):
        tr = env.step(state, policy(env.observe(state)))
        state = tr.next_state
        rewards[t] = tr.reward
        violated[t] = tr.violations.violated
        for k, v in tr.quantities.items():
            quantities.setdefault(k, []).append(np.asarray(v, dtype=np.float64))
    q = {k: np.stack(v) for k, v in quantities.items()}
    ids = env.constraints.ids
    returns = rewards.sum(axis=0)
    success = env.episode_success(q)
    frac = {cid: float(violated[..., i].mean()) for i, cid in enumerate(ids)}
    report = EvalReport(ids, frac, float(violated.any(axis=-1).mean()) if K else 0.0, float(returns.mean()),
                        float(returns.std()), [bool(s) for s in success], float(np.mean(success)), episodes)
    return report, EvalLog(ids, rewards, violated, q)


def eval_env(config: ExperimentConfig) -> ConstrainedEnv:
    """Evaluation uses the declared constraint set (gates and kinds as configured)."""
    return make_env(config.env_name, config.env_params, config.task_mode, config.constraint_specs())


def recount_violation_fraction(log_: EvalLog) -> dict[str, float]:
    out = {}
    steps, episodes = log_.reward.shape
    for i, cid in enumerate(log_.constraint_ids):
        count = 0
        for t in range(steps):
            for e in range(episodes):
                count += bool(log_.violated[t, e, i])
        out[cid] = count / (steps * episodes)
    return out


# -- single run ---------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


class MetricsWriter:
    """Append-only CSV; one row per epoch, flushed as it is written."""

    def __init__(self, path, columns: Sequence[str]):
        self.path = Path(path)
        self.columns = list(columns)
        self._f = open(self.path, "w", newline="")
        self._w = csv.writer(self._f, lineterminator="\n")
        self._w.writerow(self.columns)
        self._f.flush()
        self._last = 0

    def write(self, row: Mapping):
        if row["epoch"] != self._last + 1:
            raise RuntimeError(f"metrics epoch gap: {self._last} -> {row['epoch']}")
        self._w.writerow([_fmt(row[c]) for c in self.columns])
        self._f.flush()
        self._last = row["epoch"]

    def close(self):
        self._f.close()


@dataclass
class RunArtifacts:
    output_dir: Path
    config: ExperimentConfig
    report: Optional[EvalReport] = None
    failed: bool = False
    error: str = ""


def run_config(config: ExperimentConfig) -> RunArtifacts:
    """Train, checkpoint and evaluate one experiment, writing everything under its output dir."""
    cfg = config.resolve()
    out = cfg.output_path()
    out.mkdir(parents=True, exist_ok=True)
    (out / "FAILED").unlink(missing_ok=True)
    (out / "config.toml").write_text(dumps(cfg))
    ids = [s.id for s in cfg.constraint_specs()]
    writer = MetricsWriter(out / "metrics.csv", metric_columns(ids))
    try:
        result = train(cfg, on_epoch=writer.write)
    except Exception as e:
        writer.close()
        (out / "FAILED").write_text(f"{type(e).__name__}: {e}\n\n{traceback.format_exc()}")
        raise
    writer.close()
    save_checkpoint(out / "checkpoint.npz", result, cfg)
    report, elog = evaluate(result.net, eval_env(cfg), cfg.run.eval_episodes, seed=cfg.run.seed)
    (out / "eval.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    elog.save(out / "eval_log.npz")
    return RunArtifacts(out, cfg, report)


def run(config_path, overrides: Sequence[str] = ()) -> RunArtifacts:
    return run_config(load_config(config_path, overrides))


def evaluate_checkpoint(checkpoint_path, config: Optional[ExperimentConfig] = None,
                        episodes: Optional[int] = None, seed: int = 0) -> tuple[EvalReport, EvalLog]:
    ckpt = load_checkpoint(checkpoint_path)
    if config is None:
        from .config import from_dict
        config = from_dict(ckpt.meta["config"])
    env = eval_env(config)
    return evaluate(ckpt.net, env, episodes or config.run.eval_episodes, seed=seed)


# -- comparison ---------------------------------------------------------------

def _run_one(args):
    label, seed, cfg = args
    try:
        art = run_config(cfg)
        return label, seed, art.report.to_dict(), None
    except Exception as e:  # a failed run is reported, the others still aggregate
        return label, seed, None, f"{type(e).__name__}: {e}"


def _stats(values: Sequence[float]) -> dict:
    n = len(values)
    if n == 0:
        return {"mean": None, "std": None, "n": 0}
    mean = float(np.mean(values))
    # dispersion is undefined for a single run
    std = float(np.std(values, ddof=1)) if n > 1 else None
    return {"mean": mean, "std": std, "n": n}


def aggregate(reports: Mapping[str, Sequence[EvalReport]]) -> dict:
    table = {}
    for label, reps in reports.items():
        ids = reps[0].constraint_ids if reps else []
        table[label] = {
            "runs": len(reps),
            "return": _stats([r.mean_return for r in reps]),
            "success_rate": _stats([r.success_rate for r in reps]),
            "any_violation": _stats([r.any_violation_fraction for r in reps]),
            "violation": {cid: _stats([r.violation_fraction[cid] for r in reps]) for cid in ids},
        }
    return table


def render_table(table: Mapping) -> str:
    def cell(s, pct=False):
        if s["mean"] is None:
            return "n/a"
        m = s["mean"] * (100 if pct else 1)
        if s["std"] is None:
            return f"{m:.1f}{'%' if pct else ''} (n=1)"
        sd = s["std"] * (100 if pct else 1)
        return f"{m:.1f}{'%' if pct else ''} (± {sd:.1f})"

    ids: list[str] = []
    for row in table.values():
        ids += [c for c in row["violation"] if c not in ids]
    head = ["Method", "Runs", "Return", "Success"] + [f"Cstr. {c}" for c in ids]
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for label, row in table.items():
        cells = [label, str(row["runs"]), cell(row["return"]), cell(row["success_rate"], True)]
        cells += [cell(row["violation"][c], True) if c in row["violation"] else "n/a" for c in ids]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def compare(config_matrix: Mapping[str, ExperimentConfig], seeds: Sequence[int], output_root,
            workers: int = 1) -> dict:
    if len(config_matrix) < 2 or len(seeds) < 2:
        raise ConfigError("compare needs at least 2 variants and 2 seeds")
    root = Path(output_root)
    jobs = []
    for label, cfg in config_matrix.items():
        for s in seeds:
            c = cfg.with_overrides([f"run.seed={int(s)}", f"run.output_dir=\"{(root / label / f'seed_{s}').as_posix()}\""])
            jobs.append((label, int(s), c))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = [_run_one(j) for j in jobs]
    reports: dict[str, list[EvalReport]] = {label: [] for label in config_matrix}
    failures = []
    for label, seed, rep, err in results:
        if err is not None:
            log.warning("run %s seed %d failed: %s", label, seed, err)
            failures.append({"label": label, "seed": seed, "error": err})
        else:
            reports[label].append(EvalReport.from_dict(rep))
    table = aggregate(reports)
    doc = {"seeds": list(seeds), "table": table, "failures": failures,
           "runs": [{"label": l, "seed": s, "report": r} for l, s, r, _ in results]}
    root.mkdir(parents=True, exist_ok=True)
    (root / "compare.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    (root / "compare.md").write_text(render_table(table))
    return doc


def table2_preset(base: ExperimentConfig) -> dict[str, ExperimentConfig]:
    """Rows of the flat-terrain comparison: hard_only, etmdp, penalty, CaT with task via reward or constraint."""
    ids = list(base.resolved_constraints())
    weights = "{" + ", ".join(f"{c} = 1.0" for c in ids) + "}"
    keep = ["constraints"] if base.constraints is not None else []
    return {
        "hard_only": base.with_overrides(["variant=hard_only"]),
        "etmdp": base.with_overrides(["variant=etmdp"]),
        "penalty": base.with_overrides(["variant=penalty", f"variant.penalty_weights={weights}"]),
        "cat-optionA": base.with_overrides(["variant=cat", "env.task_mode=reward"]),
        "cat-optionB": _option_b(base, keep),
    }


def _option_b(base: ExperimentConfig, keep) -> ExperimentConfig:
    doc = base.to_dict()
    doc["env"]["task_mode"] = "constraint"
    doc["variant"] = {"name": "cat"}
    if not keep:
        doc.pop("constraints", None)
    from .config import from_dict
    return from_dict(doc)


# -- export -------------------------------------------------------------------

def read_metrics(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    return rows[0], rows[1:]


def export_plotdata(metrics_dir, out_dir=None) -> list[Path]:
    """One two-column CSV (epoch, value) per metric; no rendering."""
    metrics_dir = Path(metrics_dir)
    header, rows = read_metrics(metrics_dir / "metrics.csv")
    out = Path(out_dir) if out_dir else metrics_dir / "plotdata"
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for j, col in enumerate(header):
        if col == "epoch":
            continue
        path = out / f"{col}.csv"
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["epoch", col])
            for r in rows:
                if len(r) == len(header):
                    w.writerow([r[0], r[j]])
        written.append(path)
    return written
