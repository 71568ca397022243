"""Acceptance suite: one PASS/FAIL line per criterion.

Criteria 4 to 7 train full-size runs (300 epochs, 256 envs) and take most of
the suite's runtime. Runs are shared between criteria through a module cache.
"""

import time
from pathlib import Path

import numpy as np
import pytest

from conftest import record
from catrl import harness, nn
from catrl.algo import gae_stochastic
from catrl.config import load_config
from catrl.constraints import (ConstraintSet, ConstraintSpec, Kind, Registry, SoftSchedule, TerminationState,
                               naive_termination, p_max, termination_probability, update_c_max)

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
SEEDS = [0, 1, 2, 3]


def verdict(n, name, ok, detail):
    record(f"[{'PASS' if ok else 'FAIL'}] criterion {n} ({name}): {detail}")
    return ok


# -- 1. formula unit suite -------------------------------------------------------

def test_criterion_1_formula_suite():
    t0 = time.perf_counter()
    sched = SoftSchedule()
    soft = ConstraintSpec("s", Kind.SOFT, "f", {})
    hard = ConstraintSpec("h", Kind.HARD, "f", {})
    examples = [
        termination_probability(TerminationState(np.array([2.0])), np.array([0.0]), [0.25]) == 0.0,
        termination_probability(TerminationState(np.array([2.0])), np.array([2.0]), [0.25]) == 0.25,
        termination_probability(TerminationState(np.array([2.0, 4.0])), np.array([1.0, 0.4]), [0.25, 1.0]) == 0.125,
        update_c_max(TerminationState(np.array([1.0]), tau_c=0.5), np.zeros((3, 1))).c_max[0] == 0.5,
        update_c_max(TerminationState(np.array([0.5]), tau_c=0.95), np.array([[0.5], [0.1]])).c_max[0] == 0.5,
        naive_termination(np.zeros(3)) == 0.0,
        naive_termination(np.array([0.0, 1e-9])) == 1.0,
        p_max(hard, sched, 0, 10) == 1.0,
        p_max(soft, sched, 0, 10) == 0.05,
        p_max(soft, sched, 10, 10) == 0.25,
        termination_probability(TerminationState.initial(0), np.zeros((4, 0)), np.zeros(0)).tolist() == [0.0] * 4,
    ]

    rng = np.random.default_rng(0)
    n, K = 10_000, 5
    positive = np.where(rng.uniform(size=(n, K)) < 0.5, 0.0, rng.exponential(2.0, size=(n, K)))
    c_max = rng.uniform(1e-6, 5.0, size=K)
    pm = rng.uniform(0.0, 1.0, size=K)
    state = TerminationState(c_max)
    d = termination_probability(state, positive, pm)
    in_range = bool(np.all((d >= 0.0) & (d <= 1.0)))
    zero_iff = bool(np.all(d[~np.any(positive > 0, axis=1)] == 0.0))
    bumped = positive.copy()
    col = rng.integers(0, K, size=n)
    bumped[np.arange(n), col] += rng.exponential(1.0, size=n)
    monotone = bool(np.all(termination_probability(state, bumped, pm) >= d))

    reg = Registry()
    reg.add("ident", required=())(lambda q, p: q["u"])
    reg.add_gate("g")(lambda q: q["g"])
    cs = ConstraintSet([ConstraintSpec("a", Kind.SOFT, "ident", {}, gate="g"),
                        ConstraintSpec("b", Kind.HARD, "ident", {})], reg)
    u = rng.normal(size=n) * 3
    gate = rng.uniform(size=n) < 0.5
    v = cs.evaluate({"u": u, "g": gate}, (n,))
    gated = termination_probability(TerminationState(np.array([1.0, 1.0])), v, [1.0, 0.0])
    nullity = bool(np.all(gated[~gate] == 0.0)) and bool(np.all(v.positive[~gate, 0] == 0.0))
    elapsed = time.perf_counter() - t0

    ok = all(examples) and in_range and zero_iff and monotone and nullity and elapsed < 10
    verdict(1, "formula unit suite", ok,
            f"{sum(examples)}/{len(examples)} examples exact; 1e4 cases: range={in_range} zero-iff={zero_iff} "
            f"monotone={monotone} gating-nullity={nullity}; {elapsed:.2f}s (< 10s)")
    assert ok


# -- 2. GAE equivalence ----------------------------------------------------------

def _boolean_gae(rewards, dones, values, bootstrap, gamma, lam):
    T = len(rewards)
    adv = np.zeros(T)
    nxt_adv, nxt_v = 0.0, bootstrap
    for t in reversed(range(T)):
        nonterminal = 0.0 if dones[t] else 1.0
        err = rewards[t] + gamma * nxt_v * nonterminal - values[t]
        nxt_adv = err + gamma * lam * nonterminal * nxt_adv
        adv[t] = nxt_adv
        nxt_v = values[t]
    return adv


def test_criterion_2_gae_equivalence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst_bool, worst_prod = 0.0, 0.0
    for _ in range(1000):
        T = int(rng.integers(1, 33))
        gamma, lam = rng.uniform(0.8, 1.0), rng.uniform(0.5, 1.0)
        r, v = rng.normal(size=T), rng.normal(size=T)
        boot = rng.normal()
        dones = rng.uniform(size=T) < 0.2
        est = gae_stochastic(r, dones.astype(float), np.zeros(T, bool), v, boot, gamma, lam)
        worst_bool = max(worst_bool, float(np.max(np.abs(est.advantages - _boolean_gae(r, dones, v, boot, gamma, lam)))))

        delta = rng.uniform(size=T)
        raw = rng.normal(size=T)
        rec = gae_stochastic((1 - delta) * raw, delta, np.zeros(T, bool), np.zeros(T), 0.0, gamma, 1.0)
        brute, prod = 0.0, 1.0
        for t in range(T):
            prod *= gamma * (1.0 - delta[t])
            brute += prod * raw[t]
        worst_prod = max(worst_prod, abs(gamma * rec.returns[0] - brute))
    elapsed = time.perf_counter() - t0
    ok = worst_bool <= 1e-12 and worst_prod <= 1e-10 and elapsed < 10
    verdict(2, "GAE equivalence", ok, f"boolean max err {worst_bool:.2e} (<= 1e-12), product-form max err "
            f"{worst_prod:.2e} (<= 1e-10); {elapsed:.2f}s (< 10s)")
    assert ok


# -- 3. gradient correctness -----------------------------------------------------

DEFAULT_SHAPES = {
    "pendulum actor": (5, 64, 64, 1), "pendulum critic": (5, 64, 64, 1),
    "pointmass actor": (10, 64, 64, 2), "pointmass critic": (10, 64, 64, 1),
}


def _oracle_loss(params, x, coeffs):
    """Independent extended-precision forward pass (hidden ELU, linear output)."""
    h = x.astype(np.longdouble)
    last = len(params.weights) - 1
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w.T + b
        h = np.where(z > 0, z, np.expm1(np.minimum(z, 0))) if l < last else z
    return np.sum(h * coeffs)


def _fd_worst(params, x, coeffs, entries, h=1e-5):
    """Worst relative gap between backprop and a 4-point central difference in long double."""
    _, cache = nn.forward(params, x)
    dws, dbs = nn.backward(params, cache, coeffs)
    grads = [g for pair in zip(dws, dbs) for g in pair]
    wide = nn.MlpParams(params.layer_sizes, [w.astype(np.longdouble) for w in params.weights],
                        [b.astype(np.longdouble) for b in params.biases], params.activation)
    arrays = wide.arrays()
    h = np.longdouble(h)
    worst = 0.0
    for a, idx in entries:
        p = arrays[a]
        old = p[idx]
        vals = []
        for k in (2, 1, -1, -2):
            p[idx] = old + k * h
            vals.append(_oracle_loss(wide, x, coeffs))
        p[idx] = old
        fd = float((-vals[0] + 8 * vals[1] - 8 * vals[2] + vals[3]) / (12 * h))
        bp = float(grads[a][idx])
        worst = max(worst, abs(fd - bp) / (max(abs(fd), abs(bp)) + 1e-12))
    return worst


def test_criterion_3_gradient_correctness():
    t0 = time.perf_counter()
    worst = 0.0
    per_array = 32
    for seed in range(100):
        rng = np.random.default_rng([3, seed])
        for sizes in DEFAULT_SHAPES.values():
            params = nn.init_mlp(sizes, "elu", rng=rng)
            for b in params.biases:
                b[:] = 0.1 * rng.normal(size=b.shape)
            x = rng.normal(size=(4, sizes[0]))
            coeffs = rng.normal(size=(4, sizes[-1]))
            entries = []
            for a, arr in enumerate(params.arrays()):
                flat = rng.choice(arr.size, size=min(per_array, arr.size), replace=False)
                entries += [(a, np.unravel_index(i, arr.shape)) for i in flat]
            worst = max(worst, _fd_worst(params, x, coeffs, entries))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and elapsed < 60
    verdict(3, "gradient correctness", ok, f"max relative error {worst:.2e} (< 1e-4) over 100 seeds x "
            f"{len(DEFAULT_SHAPES)} default networks, {per_array} entries per parameter array; {elapsed:.1f}s (< 60s)")
    assert ok


# -- shared training runs ---------------------------------------------------------

_RUNS: dict = {}


def run_once(tmp_root: Path, label: str, config_file: str, seed: int, *overrides):
    key = (label, seed)
    if key not in _RUNS:
        cfg = load_config(CONFIGS / config_file, [*overrides, f"run.seed={seed}",
                                                  f'run.output_dir="{(tmp_root / label / f"seed_{seed}").as_posix()}"'])
        _RUNS[key] = harness.run_config(cfg)
    return _RUNS[key]


@pytest.fixture(scope="module")
def run_root(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


# -- 4. pendulum ordering ----------------------------------------------------------

PENDULUM_VARIANTS = ["unconstrained", "cat", "etmdp", "hard_only"]


def test_criterion_4_pendulum_ordering(run_root):
    t0 = time.perf_counter()
    ret, viol = {}, {}
    for v in PENDULUM_VARIANTS:
        reps = [run_once(run_root, f"pendulum-{v}", "pendulum.toml", s, f"variant={v}").report for s in SEEDS]
        ret[v] = float(np.mean([r.mean_return for r in reps]))
        viol[v] = float(np.mean([r.violation_fraction["torque"] for r in reps]))
    elapsed = time.perf_counter() - t0
    a = ret["cat"] >= 0.8 * ret["unconstrained"] and viol["cat"] < 0.02
    b = viol["unconstrained"] > 0.10
    c = ret["etmdp"] < 0.2 * ret["cat"] and ret["hard_only"] < 0.2 * ret["cat"]
    summary = ", ".join(f"{v} return {ret[v]:.1f} torque-viol {100 * viol[v]:.2f}%" for v in PENDULUM_VARIANTS)
    verdict("4a", "CaT >= 80% of unconstrained return, torque violation < 2%", a,
            f"ratio {ret['cat'] / ret['unconstrained']:.3f}, violation {100 * viol['cat']:.2f}%")
    verdict("4b", "unconstrained torque violation > 10%", b, f"{100 * viol['unconstrained']:.2f}%")
    verdict("4c", "ET-MDP and hard-only < 20% of CaT return", c,
            f"etmdp ratio {ret['etmdp'] / ret['cat']:.3f}, hard_only ratio {ret['hard_only'] / ret['cat']:.3f}")
    record(f"    criterion 4 detail: {summary}; {elapsed / 60:.1f} min (target < 20 min)")
    assert a and b and c


# -- 5. Option A vs Option B ---------------------------------------------------------

def _pm_reports(run_root, label, config_file, *overrides):
    return [run_once(run_root, label, config_file, s, *overrides).report for s in SEEDS]


def test_criterion_5_option_a_vs_b(run_root):
    a = _pm_reports(run_root, "pointmass-optionA", "pointmass_option_a.toml")
    b = _pm_reports(run_root, "pointmass-optionB", "pointmass_option_b.toml")
    sa, sb = np.mean([r.success_rate for r in a]), np.mean([r.success_rate for r in b])
    va, vb = np.mean([r.any_violation_fraction for r in a]), np.mean([r.any_violation_fraction for r in b])
    ok = sa >= 0.7 and sb >= 0.7
    verdict(5, "Option A and Option B success >= 70%", ok,
            f"success A {100 * sa:.1f}%, B {100 * sb:.1f}%; any-violation A {100 * va:.2f}%, B {100 * vb:.2f}% "
            f"(reported only; B {'>' if vb > va else '<='} A)")
    assert ok


# -- 6. style gating ablation ---------------------------------------------------------

def test_criterion_6_style_gating(run_root):
    t0 = time.perf_counter()
    gated = _pm_reports(run_root, "pointmass-optionA", "pointmass_option_a.toml")
    always = _pm_reports(run_root, "pointmass-style_always", "pointmass_option_a.toml", "variant=style_always")
    sg, sa = np.mean([r.success_rate for r in gated]), np.mean([r.success_rate for r in always])
    elapsed = time.perf_counter() - t0
    ok = sa < sg
    verdict(6, "style_always success strictly below gated CaT", ok,
            f"gated {100 * sg:.1f}%, always {100 * sa:.1f}%; {elapsed / 60:.1f} min (target < 20 min)")
    assert ok


# -- 7. behaviour shaping by config only --------------------------------------------------

def test_criterion_7_speed_ceiling(run_root):
    cfg = load_config(CONFIGS / "pointmass_speed_ceiling.toml")
    ceiling = cfg.resolved_constraints()["speed_ceiling"]["limit"]
    art = run_once(run_root, "pointmass-speed", "pointmass_speed_ceiling.toml", 0)
    log_ = harness.EvalLog.load(art.output_dir / "eval_log.npz")
    p95 = float(np.percentile(log_.quantities["speed"], 95))
    free = harness.EvalLog.load(run_once(run_root, "pointmass-optionA", "pointmass_option_a.toml", 0).output_dir
                                / "eval_log.npz")
    p95_free = float(np.percentile(free.quantities["speed"], 95))
    ok = p95 < 1.1 * ceiling
    verdict(7, "speed ceiling added by config", ok,
            f"95th-percentile speed {p95:.3f} vs bound {1.1 * ceiling:.3f} (ceiling {ceiling}); "
            f"without the ceiling {p95_free:.3f}")
    assert ok


# -- 8. determinism ------------------------------------------------------------------------

def test_criterion_8_determinism(tmp_path):
    overrides = ["algo.epochs=5", "algo.num_envs=32", "run.eval_episodes=4"]
    paths = []
    for name in ("a", "b"):
        cfg = load_config(CONFIGS / "pendulum.toml", overrides + [f'run.output_dir="{(tmp_path / name).as_posix()}"'])
        paths.append(harness.run_config(cfg).output_dir / "metrics.csv")
    ok = paths[0].read_bytes() == paths[1].read_bytes()
    verdict(8, "determinism", ok, f"metrics files byte-identical: {ok} ({paths[0].stat().st_size} bytes)")
    assert ok
