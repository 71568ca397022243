"""PPO with constraint-driven stochastic terminations."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import nn
from .baselines import Wiring, apply_variant
from .config import ExperimentConfig, PpoHyper
from .constraints import (TerminationState, naive_termination, p_max_vector, termination_probability,
                          update_c_max)
from .envs import ConstrainedEnv, VecEnv, make_env
from .errors import ConfigError, TrainingError

log = logging.getLogger(__name__)

LR_MIN, LR_MAX = 1e-6, 1e-2


@dataclass
class RolloutBatch:
    """Arrays are laid out (T, N, ...)."""

    obs: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    means: np.ndarray
    log_std: np.ndarray
    rewards: np.ndarray
    scaled_rewards: np.ndarray
    deltas: np.ndarray
    timeouts: np.ndarray
    values: np.ndarray
    next_values: np.ndarray
    bootstrap: np.ndarray
    raw: np.ndarray
    positive: np.ndarray
    active: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.rewards.shape  # type: ignore[return-value]


@dataclass
class AdvantageEstimate:
    advantages: np.ndarray
    returns: np.ndarray
    mean: float = 0.0
    std: float = 1.0

    def normalized(self, eps: float = 1e-8) -> np.ndarray:
        return (self.advantages - self.mean) / (self.std + eps)


def collect_rollout(net: nn.PolicyValueNet, envs: VecEnv, horizon: int, rng: np.random.Generator,
                    termination_source: Optional[Callable[[np.ndarray], np.ndarray]] = None) -> RolloutBatch:
    """Roll the stochastic policy for ``horizon`` steps in every environment.

    Constraint terminations never reset an environment. When a
    ``termination_source`` is given, it maps the (T, N, K) violations to
    deltas once collection is finished; otherwise deltas are left at zero.
    """
    T, N, K = horizon, envs.num_envs, len(envs.env.constraints)
    A, O = envs.env.act_dim, envs.env.obs_dim
    obs = np.zeros((T, N, O))
    actions = np.zeros((T, N, A))
    means = np.zeros((T, N, A))
    log_probs, rewards, values = (np.zeros((T, N)) for _ in range(3))
    timeouts = np.zeros((T, N), dtype=bool)
    timeout_values = np.zeros((T, N))
    raw, positive = np.zeros((T, N, K)), np.zeros((T, N, K))
    active = np.ones((T, N, K), dtype=bool)
    for t in range(T):
        o = envs.obs
        a, lp, v, mu = net.act(o, rng)
        try:
            tr = envs.step(a)
        except TrainingError as e:
            raise TrainingError(f"rollout step {t}: {e}") from e
        obs[t], actions[t], means[t], log_probs[t], values[t] = o, a, mu, lp, v
        rewards[t], timeouts[t] = tr.reward, tr.timeout
        raw[t], positive[t], active[t] = tr.violations.raw, tr.violations.positive, tr.violations.active
        if np.any(tr.timeout):
            idx = np.flatnonzero(tr.timeout)
            timeout_values[t, idx] = net.value(tr.next_obs[idx])
    bootstrap = net.value(envs.obs)
    next_values = np.concatenate([values[1:], bootstrap[None]], axis=0)
    next_values = np.where(timeouts, timeout_values, next_values)
    deltas = np.zeros((T, N)) if termination_source is None else termination_source(positive)
    batch = RolloutBatch(obs, actions, log_probs, means, net.log_std.copy(), rewards, rewards.copy(), deltas,
                         timeouts, values, next_values, bootstrap, raw, positive, active)
    return batch


def gae_stochastic(rewards, deltas, timeouts, values, bootstrap, gamma: float, lam: float,
                   next_values=None) -> AdvantageEstimate:
    """GAE where the done signal is a termination probability in [0, 1].

    Arrays are (T, ...) with time first. ``rewards`` should already be scaled
    by (1 - delta). ``next_values[t]`` is V(s_{t+1}) before any timeout reset;
    by default it is ``values[t+1]`` and ``bootstrap`` at the last step.
    At a timeout the bootstrap is kept but the advantage carry is cut.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    timeouts = np.asarray(timeouts, dtype=bool)
    if next_values is None:
        next_values = np.concatenate([values[1:], np.asarray(bootstrap, dtype=np.float64)[None]], axis=0)
    if not (rewards.shape == deltas.shape == values.shape == timeouts.shape == np.shape(next_values)):
        raise ValueError("rewards, deltas, timeouts and values must share a shape")
    keep = 1.0 - deltas
    carry_keep = keep * (~timeouts)
    adv = np.zeros_like(rewards)
    last = np.zeros(rewards.shape[1:])
    for t in range(rewards.shape[0] - 1, -1, -1):
        err = rewards[t] + gamma * keep[t] * next_values[t] - values[t]
        last = err + gamma * lam * carry_keep[t] * last
        adv[t] = last
    returns = adv + values
    return AdvantageEstimate(adv, returns, float(adv.mean()), float(adv.std()))


def adaptive_lr(current_lr: float, measured_kl: float, kl_threshold: float,
                lr_min: float = LR_MIN, lr_max: float = LR_MAX) -> float:
    if current_lr <= 0:
        raise ValueError("learning rate must be positive")
    lr = current_lr
    if measured_kl > 2.0 * kl_threshold:
        lr = current_lr / 1.5
    elif measured_kl < 0.5 * kl_threshold:
        lr = current_lr * 1.5
    return float(min(max(lr, lr_min), lr_max))


def ppo_loss_and_grads(net: nn.PolicyValueNet, obs, actions, old_log_probs, advantages, returns,
                       hyper: PpoHyper):
    """Clipped-surrogate loss on one minibatch and its gradients w.r.t. ``net.parameters()``."""
    B = obs.shape[0]
    mu, actor_cache = nn.forward(net.actor, obs)
    v_out, critic_cache = nn.forward(net.critic, obs)
    v = v_out[:, 0]
    log_std = net.log_std
    inv_var = np.exp(-2.0 * log_std)
    diff = actions - mu
    logp = nn.gaussian_log_prob(mu, log_std, actions)
    ratio = np.exp(logp - old_log_probs)
    clipped = np.clip(ratio, 1.0 - hyper.clip, 1.0 + hyper.clip)
    surr1, surr2 = ratio * advantages, clipped * advantages
    surrogate = np.minimum(surr1, surr2)
    actor_loss = -float(surrogate.mean())
    value_loss = float(np.mean((v - returns) ** 2))
    entropy = nn.gaussian_entropy(log_std)
    loss = actor_loss + hyper.critic_coef * value_loss - hyper.entropy_coef * entropy

    # gradient flows only where the unclipped branch attains the minimum
    use = surr1 <= surr2
    d_logp = np.where(use, -advantages * ratio / B, 0.0)
    d_mu = d_logp[:, None] * diff * inv_var
    d_log_std = (d_logp[:, None] * (diff * diff * inv_var - 1.0)).sum(axis=0) - hyper.entropy_coef
    d_v = (2.0 * hyper.critic_coef / B) * (v - returns)
    aw, ab = nn.backward(net.actor, actor_cache, d_mu)
    cw, cb = nn.backward(net.critic, critic_cache, d_v[:, None])
    grads = []
    for w, b in zip(aw, ab):
        grads += [w, b]
    grads.append(d_log_std)
    for w, b in zip(cw, cb):
        grads += [w, b]
    stats = {
        "loss": loss, "actor_loss": actor_loss, "value_loss": value_loss, "entropy": entropy,
        "clip_frac": float(np.mean(np.abs(ratio - 1.0) > hyper.clip)), "mean": mu,
    }
    return loss, grads, stats


def ppo_update(net: nn.PolicyValueNet, adam: nn.AdamState, batch: RolloutBatch, advantages: AdvantageEstimate,
               hyper: PpoHyper, rng: np.random.Generator) -> dict:
    T, N = batch.shape
    M = T * N
    obs = batch.obs.reshape(M, -1)
    actions = batch.actions.reshape(M, -1)
    old_means = batch.means.reshape(M, -1)
    old_logp = batch.log_probs.reshape(M)
    adv = advantages.normalized().reshape(M)
    ret = advantages.returns.reshape(M)
    mb = min(hyper.minibatch_size, M)
    n_mb = max(1, M // mb)
    acc = {"actor_loss": 0.0, "value_loss": 0.0, "entropy": 0.0, "clip_frac": 0.0, "kl": 0.0, "grad_norm": 0.0}
    count = 0
    for _ in range(hyper.mini_epochs):
        perm = rng.permutation(M)
        epoch_kl = 0.0
        for k in range(n_mb):
            idx = perm[k * mb:(k + 1) * mb]
            loss, grads, st = ppo_loss_and_grads(net, obs[idx], actions[idx], old_logp[idx], adv[idx], ret[idx], hyper)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss (actor {st['actor_loss']}, value {st['value_loss']}, "
                                    f"log_std {net.log_std.tolist()})")
            kl = float(np.mean(nn.gaussian_kl(old_means[idx], batch.log_std, st["mean"], net.log_std)))
            gnorm = nn.global_norm(grads)
            if gnorm > hyper.max_grad_norm:
                scale = hyper.max_grad_norm / (gnorm + 1e-12)
                grads = [g * scale for g in grads]
            nn.adam_step(adam, net.parameters(), grads)
            net.touch()
            epoch_kl += kl
            for key in ("actor_loss", "value_loss", "entropy", "clip_frac"):
                acc[key] += st[key]
            acc["kl"] += kl
            acc["grad_norm"] += gnorm
            count += 1
        if hyper.lr_schedule == "adaptive":
            adam.learning_rate = adaptive_lr(adam.learning_rate, epoch_kl / n_mb, hyper.kl_threshold)
    return {k: v / count for k, v in acc.items()}


@dataclass
class Experiment:
    """Everything ``train`` needs, built from a config."""

    config: ExperimentConfig
    wiring: Wiring
    env: ConstrainedEnv

    @classmethod
    def build(cls, config: ExperimentConfig) -> "Experiment":
        wiring = apply_variant(config.variant, config.constraint_specs())
        env = make_env(config.env_name, config.env_params, config.task_mode, wiring.specs)
        return cls(config, wiring, env)


def make_net(config: ExperimentConfig, env: ConstrainedEnv, rng: np.random.Generator) -> nn.PolicyValueNet:
    a = config.algo
    return nn.PolicyValueNet(env.obs_dim, env.act_dim, tuple(a.actor_hidden), tuple(a.critic_hidden),
                             a.activation, rng=rng, log_std_init=a.log_std_init,
                             log_std_bounds=(a.log_std_min, a.log_std_max))


@dataclass
class TrainResult:
    net: nn.PolicyValueNet
    adam: nn.AdamState
    termination: TerminationState
    metrics: list[dict] = field(default_factory=list)
    experiment: Optional[Experiment] = None


def metric_columns(constraint_ids) -> list[str]:
    cols = ["epoch", "mean_raw_return", "mean_scaled_return", "episodes", "mean_reward", "mean_delta",
            "lr", "kl", "actor_loss", "value_loss", "entropy", "clip_frac", "grad_norm"]
    for cid in constraint_ids:
        cols += [f"cplus_mean.{cid}", f"viol_frac.{cid}", f"p_max.{cid}", f"c_max.{cid}"]
    return cols


def train(config: ExperimentConfig, on_epoch: Optional[Callable[[dict], None]] = None) -> TrainResult:
    exp = Experiment.build(config)
    wiring, env, hyper = exp.wiring, exp.env, config.algo
    seed = config.run.seed
    rng = np.random.default_rng([int(seed), 0])
    net = make_net(config, env, rng)
    adam = nn.AdamState.like(net.parameters(), learning_rate=hyper.learning_rate)
    envs = VecEnv(env, hyper.num_envs, seed, randomize_start=hyper.randomize_start)
    K = len(wiring.specs)
    term = TerminationState.initial(K, hyper.tau_c, hyper.c_max_floor)
    schedule = hyper.schedule()
    ids = [s.id for s in wiring.specs]

    N = hyper.num_envs
    ep_raw, ep_scaled = np.zeros(N), np.zeros(N)
    # partial first episodes (randomised start) are not reported
    full_episode = envs.state.steps == 0
    result = TrainResult(net, adam, term, experiment=exp)
    total = max(hyper.epochs - 1, 1)
    for epoch in range(1, hyper.epochs + 1):
        try:
            p_maxes = p_max_vector(wiring.specs, schedule, epoch - 1, total)
            batch = collect_rollout(net, envs, hyper.horizon, rng)
            term = update_c_max(term, batch.positive) if K else replace(term, epoch=term.epoch + 1)
            if wiring.termination == "stochastic":
                deltas = termination_probability(term, batch.positive, p_maxes)
            elif wiring.termination == "naive":
                deltas = naive_termination(batch.positive)
            else:
                deltas = np.zeros(batch.shape)
            rewards = wiring.shape_reward(batch.rewards, batch.positive)
            batch.deltas = deltas
            batch.scaled_rewards = (1.0 - deltas) * rewards
            adv = gae_stochastic(batch.scaled_rewards, deltas, batch.timeouts, batch.values, batch.bootstrap,
                                 hyper.gamma, hyper.lam, next_values=batch.next_values)
            stats = ppo_update(net, adam, batch, adv, hyper, rng)
        except (TrainingError, ConfigError) as e:
            raise TrainingError(f"epoch {epoch}: {e}") from e

        finished_raw, finished_scaled = [], []
        for t in range(hyper.horizon):
            ep_raw += batch.rewards[t]
            ep_scaled += batch.scaled_rewards[t]
            done = batch.timeouts[t]
            if np.any(done):
                sel = done & full_episode
                finished_raw += ep_raw[sel].tolist()
                finished_scaled += ep_scaled[sel].tolist()
                ep_raw[done] = 0.0
                ep_scaled[done] = 0.0
                full_episode[done] = True
        row = {
            "epoch": epoch,
            "mean_raw_return": float(np.mean(finished_raw)) if finished_raw else float("nan"),
            "mean_scaled_return": float(np.mean(finished_scaled)) if finished_scaled else float("nan"),
            "episodes": len(finished_raw),
            "mean_reward": float(batch.rewards.mean()),
            "mean_delta": float(deltas.mean()),
            "lr": adam.learning_rate,
            **stats,
        }
        for i, cid in enumerate(ids):
            row[f"cplus_mean.{cid}"] = float(batch.positive[..., i].mean())
            row[f"viol_frac.{cid}"] = float((batch.positive[..., i] > 0).mean())
            row[f"p_max.{cid}"] = float(p_maxes[i])
            row[f"c_max.{cid}"] = float(term.c_max[i])
        result.metrics.append(row)
        if on_epoch is not None:
            on_epoch(row)
        if epoch % 50 == 0:
            log.info("epoch %d return %.2f delta %.4f lr %.2e", epoch, row["mean_raw_return"], row["mean_delta"],
                     row["lr"])
    result.termination = term
    return result
