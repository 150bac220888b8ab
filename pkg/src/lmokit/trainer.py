"""Clipped-surrogate policy gradient with GAE for the intent-flag policy.

``LocoEnv`` wraps a batch of plants with the command gate, flag sampler,
episode segmenter, arm replay and pushes. ``train`` runs the two-stage
curriculum; ``velocity_baseline_train`` trains the continuous-twist
controller used for comparisons under the same plant and seed.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffkit as dk
from . import plant as pl
from .command import CommandFlags, CommandGate, GateConfig, OnlineSegmenter, StabilityCriterion
from .rewards import N_LEG, RewardWeights, context_from_plant, dir_deviation, step_reward
from .seeding import derive_rng

log = logging.getLogger(__name__)

FLAG_VALUES = np.array([-1, 0, 1])

# observation channel scales: command(4), omega(3), gravity(3), q(4), qd(4), a_prev(4)
OBS_SCALE = np.concatenate([np.ones(4), np.ones(3), np.ones(3), np.ones(4), np.full(4, 0.1), np.ones(4)])


# ---------------------------------------------------------------- command sampling


def _draw_flags(rng: np.random.Generator, probs: Sequence[float], n: int) -> np.ndarray:
    return rng.choice(FLAG_VALUES, size=(n, 3), p=np.asarray(probs))


def sample_command_stage1(
    rng: np.random.Generator,
    v_max: Sequence[float] = (0.6, 0.4, 0.8),
    probs: Sequence[float] = (0.3, 0.4, 0.3),
    h_range: tuple[float, float] = (0.45, 0.75),
    flags: Sequence[int] | None = None,
) -> tuple[CommandFlags, np.ndarray]:
    """Random flags; active axes get a goal speed drawn from ``U[0, v_max]``."""
    v_max = np.asarray(v_max, dtype=np.float64)
    if np.any(v_max <= 0):
        raise ValueError("v_max must be positive")
    s = np.asarray(flags) if flags is not None else _draw_flags(rng, probs, 1)[0]
    goal = np.where(s != 0, rng.uniform(0.0, 1.0, size=3) * v_max, 0.0)
    h = float(rng.uniform(*h_range))
    return CommandFlags(int(s[0]), int(s[1]), int(s[2]), h), goal


def sample_command_stage2(
    rng: np.random.Generator,
    cruise: Sequence[float] = (0.3, 0.3, 0.3),
    probs: Sequence[float] = (0.3, 0.4, 0.3),
    h_range: tuple[float, float] = (0.45, 0.75),
    p_stationary: float = 0.2,
) -> tuple[CommandFlags, np.ndarray]:
    """Random flags at fixed cruise speeds; a share of commands are all-zero."""
    cruise = np.asarray(cruise, dtype=np.float64)
    if np.any(cruise <= 0):
        raise ValueError("cruise speeds must be positive")
    if rng.uniform() < p_stationary:
        s = np.zeros(3, dtype=int)
    else:
        s = _draw_flags(rng, probs, 1)[0]
    h = float(rng.uniform(*h_range))
    return CommandFlags(int(s[0]), int(s[1]), int(s[2]), h), np.where(s != 0, cruise, 0.0)


# ---------------------------------------------------------------- environment


@dataclass
class EnvConfig:
    n_hist: int = 5
    episode_s: float = 15.0
    resample_s: tuple[float, float] = (3.0, 6.0)
    v_max: tuple[float, float, float] = (0.6, 0.4, 0.8)
    cruise: tuple[float, float, float] = (0.3, 0.3, 0.3)
    flag_probs: tuple[float, float, float] = (0.3, 0.4, 0.3)
    p_stationary: float = 0.2
    h_range: tuple[float, float] = (0.45, 0.75)
    twist_range: float = 0.5
    twist_resample_s: float = 3.0
    randomize: bool = True
    pushes: bool = True
    arm: bool = True
    gate: GateConfig = field(default_factory=GateConfig)
    dt: float = 0.02

    @property
    def episode_steps(self) -> int:
        return int(round(self.episode_s / self.dt))


class LocoEnv:
    """Batched training environment.

    ``mode`` is ``"lmo"`` (flag commands through the gate) or ``"velocity"``
    (continuous twists tracked directly, no gate, no episode terms).
    """

    def __init__(
        self,
        n: int,
        config: EnvConfig,
        rng: np.random.Generator,
        weights: RewardWeights | None = None,
        mode: str = "lmo",
        stage: int = 1,
    ):
        if mode not in ("lmo", "velocity"):
            raise ValueError(f"unknown env mode {mode!r}")
        self.n = n
        self.c = config
        self.rng = rng
        self.mode = mode
        self.stage = stage
        base = weights or RewardWeights()
        self.base_weights = base
        self.dt = config.dt
        self.arm_factor = 0.0
        self.params = self._draw_params(n)
        self.state = pl.initial_state(self.params)
        self.gate = CommandGate(n, replace(config.gate, dt=config.dt))
        self.seg = OnlineSegmenter(n, StabilityCriterion(dt=config.dt))
        self.arm = pl.ArmReplay(replace(pl.ArmReplayConfig(), enabled=config.arm), n, rng, config.dt)
        self.push = pl.DisturbanceGenerator(replace(pl.DisturbanceSchedule.train(), enabled=config.pushes), n, rng, config.dt)
        self.hist = pl.ObservationHistory(n, config.n_hist)
        self.flags = np.zeros((n, 3))
        self.v_goal = np.zeros((n, 3))
        self.h_star = np.full(n, pl.H_NOMINAL)
        self.twist = np.zeros((n, 3))
        self.countdown = np.zeros(n, dtype=np.int64)
        self.ep_t = np.zeros(n, dtype=np.int64)
        self.a_prev = np.zeros((n, pl.N_JOINTS))
        self.a_prev2 = np.zeros((n, pl.N_JOINTS))
        self._resample(np.ones(n, dtype=bool))
        self.obs = self._observe()

    # -- weights and stage

    @property
    def weights(self) -> RewardWeights:
        w = self.base_weights
        off = set()
        if self.mode == "velocity" or self.stage == 1:
            off |= {"dir_deviation", "stand_still"}
        return w.disable(*off) if off else w

    @property
    def dir_active(self) -> bool:
        return self.mode == "lmo" and self.stage == 2 and "dir_deviation" not in self.base_weights.disabled

    def set_stage(self, stage: int) -> None:
        self.stage = stage

    def set_arm_factor(self, factor: float) -> None:
        self.arm_factor = float(np.clip(factor, 0.0, 1.0))
        self.arm.factor = self.arm_factor

    # -- internals

    def _draw_params(self, k: int) -> pl.PlantParams:
        if self.c.randomize:
            return pl.sample_domain_rand(self.rng, k, dt=self.c.dt)
        return pl.nominal_params(k, self.c.dt)

    def command_vector(self) -> np.ndarray:
        if self.mode == "velocity":
            return np.concatenate([self.twist, self.h_star[:, None]], axis=1)
        return np.concatenate([self.flags, self.h_star[:, None]], axis=1)

    def _observe(self) -> np.ndarray:
        return pl.assemble_observation(self.state, self.params, self.command_vector(), self.a_prev, self.hist)

    def _resample(self, mask: np.ndarray) -> None:
        idx = np.flatnonzero(mask)
        if not len(idx):
            return
        c = self.c
        for i in idx:
            if self.mode == "velocity":
                self.twist[i] = self.rng.uniform(-c.twist_range, c.twist_range, size=3)
                self.h_star[i] = self.rng.uniform(*c.h_range)
                self.countdown[i] = int(round(c.twist_resample_s / self.dt))
                continue
            if self.stage == 1:
                cmd, goal = sample_command_stage1(self.rng, c.v_max, c.flag_probs, c.h_range)
            else:
                cmd, goal = sample_command_stage2(self.rng, c.cruise, c.flag_probs, c.h_range, c.p_stationary)
            self.flags[i] = cmd.flags
            self.v_goal[i] = goal
            self.h_star[i] = cmd.h_star
            self.countdown[i] = int(round(self.rng.uniform(*c.resample_s) / self.dt))

    def _reset(self, mask: np.ndarray) -> None:
        idx = np.flatnonzero(mask)
        if not len(idx):
            return
        fresh = self._draw_params(len(idx))
        for f in fields(pl.PlantParams):
            v = getattr(self.params, f.name)
            if isinstance(v, np.ndarray):
                v[idx] = getattr(fresh, f.name)
        pl.reset_rows(self.state, self.params, mask)
        self.gate.reset(mask, pl.H_NOMINAL)
        self.seg.reset(mask)
        self.arm.reset(mask)
        self.push.reset(mask)
        self.hist.reset(mask)
        self.a_prev[mask] = self.state.q[mask]
        self.a_prev2[mask] = self.state.q[mask]
        self.ep_t[mask] = 0
        self._resample(mask)

    def step(self, action: np.ndarray):
        """Advance all workers; returns ``(obs, breakdown, done, timeout, terminal_obs)``.

        ``terminal_obs`` is the observation of the final state of workers
        that finished this step (rows of other workers are meaningless).
        """
        action = np.clip(action, self.params.q_min, self.params.q_max)
        if self.mode == "velocity":
            v_ref = self.twist.copy()
            self.gate.step(np.zeros((self.n, 3)), np.zeros((self.n, 3)), self.h_star)
            h_ref = self.gate.h_ref.copy()
        else:
            v_ref, h_ref = self.gate.step(self.flags, self.v_goal, self.h_star)
        prev = self.state
        self.state = pl.step(prev, self.params, action, self.push.step(), self.arm.step())
        self.ep_t += 1
        timeout = self.ep_t >= self.c.episode_steps
        fallen = self.state.fallen.copy()
        done = timeout | fallen

        dir_dev = None
        if self.mode == "lmo":
            vb = self.state.body_velocity()
            crit = self.seg.crit
            still = (np.hypot(vb[:, 0], vb[:, 1]) < crit.v_eps) & (np.abs(vb[:, 2]) < crit.w_eps)
            psi = self.state.pose[:, 2]
            closed, psi0, clean = self.seg.update(self.flags, still, psi)
            forced = self.seg.active & done[:, None]
            closed = closed | forced
            clean = np.where(forced, self.seg.yaw_clean, clean)
            psi0 = np.where(forced, self.seg.psi_start, psi0)
            use = closed[:, :2] & clean[:, :2]
            dev = np.where(use, dir_deviation(psi0[:, :2], psi[:, None]), 0.0)
            self.last_dir = (use, dev)
            if self.dir_active:
                dir_dev = dev.sum(axis=1)
        ctx = context_from_plant(
            self.state, prev, self.params, action, self.a_prev, self.a_prev2, v_ref, h_ref, self.flags.copy(), dir_dev
        )
        bd = step_reward(ctx, self.weights, self.stage)
        self.last_ref = (v_ref, h_ref)
        self.a_prev2 = self.a_prev
        self.a_prev = action.copy()

        self.countdown -= 1
        self._resample((self.countdown <= 0) & ~done)
        terminal_obs = self._observe()
        if np.any(done):
            self._reset(done)
            self.obs = self._observe_rows(done, terminal_obs)
        else:
            self.obs = terminal_obs
        return self.obs, bd, done, timeout & ~fallen, terminal_obs

    def _observe_rows(self, mask: np.ndarray, obs: np.ndarray) -> np.ndarray:
        # the fresh rows need a fresh slice; the history push above already shifted the others
        out = obs.copy()
        cur = pl.observation_slice(self.state, self.params, self.command_vector(), self.a_prev)
        self.hist.buf[mask] = 0.0
        self.hist.buf[mask, 0] = cur[mask]
        out[mask] = self.hist.buf[mask].reshape(int(mask.sum()), -1)
        return out


def ppo_reward(bd, dt: float) -> np.ndarray:
    """Per-step table terms are scaled by ``dt``; episode terms count in full."""
    episodic = np.zeros_like(bd.total)
    for k in ("dir_deviation", "fall"):
        if k in bd.terms:
            episodic = episodic + bd.weights[k] * bd.terms[k]
    return dt * (bd.total - episodic) + episodic


# ---------------------------------------------------------------- networks


class PolicyNet:
    """Gaussian policy: MLP action means plus a learned per-joint log-std."""

    def __init__(
        self,
        n_hist: int = 5,
        hidden: Sequence[int] = (128, 128),
        rng: np.random.Generator | None = None,
        init_log_std: float = math.log(0.2),
        command_mode: str = "flags",
    ):
        rng = rng or np.random.default_rng(0)
        self.n_hist = n_hist
        self.hidden = tuple(hidden)
        self.command_mode = command_mode
        self.obs_dim = n_hist * pl.OBS_SLICE
        self.mlp = dk.MLP([self.obs_dim, *hidden, pl.N_JOINTS], rng, out_gain=0.01, name="pi")
        self.log_std = dk.Param(np.full(pl.N_JOINTS, init_log_std), name="log_std")
        self.scale = np.tile(OBS_SCALE, n_hist)

    def params(self) -> list[dk.Param]:
        return self.mlp.params() + [self.log_std]

    def mean(self, obs: np.ndarray) -> np.ndarray:
        return self.mlp.forward_np(np.atleast_2d(obs) * self.scale)

    def act(self, obs: np.ndarray) -> np.ndarray:
        """Deterministic action (the mean)."""
        return self.mean(obs)

    def sample(self, obs: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        mu = self.mean(obs)
        a = mu + np.exp(self.log_std.data) * rng.standard_normal(mu.shape)
        return a, self.log_prob(obs, a, mu)

    def log_prob(self, obs, a, mu=None) -> np.ndarray:
        mu = self.mean(obs) if mu is None else mu
        ls = self.log_std.data
        z = (a - mu) / np.exp(ls)
        return -0.5 * np.sum(z * z, axis=1) - np.sum(ls) - 0.5 * pl.N_JOINTS * math.log(2 * math.pi)

    def log_prob_t(self, obs: np.ndarray, a: np.ndarray) -> dk.Tensor:
        mu = self.mlp(obs * self.scale)
        z = dk.mul_rowvec(dk.sub(dk.Tensor(a), mu), dk.exp(-self.log_std))
        return dk.row_sum(dk.square(z)) * -0.5 - dk.total(self.log_std) - 0.5 * pl.N_JOINTS * math.log(2 * math.pi)

    def entropy(self) -> float:
        return float(np.sum(self.log_std.data) + 0.5 * pl.N_JOINTS * (1.0 + math.log(2 * math.pi)))

    def to_dict(self) -> dict:
        return {
            "kind": "policy",
            "n_hist": self.n_hist,
            "hidden": list(self.hidden),
            "command_mode": self.command_mode,
            "mlp": self.mlp.state_dict(),
            "log_std": self.log_std.data.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyNet":
        if d.get("kind") != "policy":
            raise ValueError("not a policy checkpoint")
        p = cls(int(d["n_hist"]), d["hidden"], command_mode=d["command_mode"])
        p.mlp.load_state_dict(d["mlp"])
        p.log_std.data = np.array(d["log_std"], dtype=np.float64)
        return p


class ValueNet:
    def __init__(self, n_hist: int = 5, hidden: Sequence[int] = (128, 128), rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(1)
        self.n_hist = n_hist
        self.hidden = tuple(hidden)
        self.mlp = dk.MLP([n_hist * pl.OBS_SLICE, *hidden, 1], rng, out_gain=1.0, name="v")
        self.scale = np.tile(OBS_SCALE, n_hist)

    def params(self) -> list[dk.Param]:
        return self.mlp.params()

    def __call__(self, obs: np.ndarray) -> np.ndarray:
        return self.mlp.forward_np(np.atleast_2d(obs) * self.scale)[:, 0]

    def value_t(self, obs: np.ndarray) -> dk.Tensor:
        out = self.mlp(obs * self.scale)
        return dk.reshape(out, (out.shape[0],))

    def to_dict(self) -> dict:
        return {"kind": "value", "n_hist": self.n_hist, "hidden": list(self.hidden), "mlp": self.mlp.state_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "ValueNet":
        v = cls(int(d["n_hist"]), d["hidden"])
        v.mlp.load_state_dict(d["mlp"])
        return v


def save_checkpoint(path: str | Path, policy: PolicyNet, value: ValueNet | None = None, meta: dict | None = None) -> None:
    blob = {"policy": policy.to_dict(), "meta": meta or {}}
    if value is not None:
        blob["value"] = value.to_dict()
    Path(path).write_text(json.dumps(blob))


def load_checkpoint(path: str | Path) -> tuple[PolicyNet, ValueNet | None, dict]:
    blob = json.loads(Path(path).read_text())
    value = ValueNet.from_dict(blob["value"]) if "value" in blob else None
    return PolicyNet.from_dict(blob["policy"]), value, blob.get("meta", {})


# ---------------------------------------------------------------- GAE and update


@dataclass
class RolloutBatch:
    obs: np.ndarray  # (T, n, obs_dim)
    actions: np.ndarray  # (T, n, 4)
    logp: np.ndarray  # (T, n)
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    def flat(self) -> dict[str, np.ndarray]:
        T, n = self.logp.shape
        return {
            "obs": self.obs.reshape(T * n, -1),
            "actions": self.actions.reshape(T * n, -1),
            "logp": self.logp.reshape(-1),
            "advantages": self.advantages.reshape(-1),
            "returns": self.returns.reshape(-1),
        }


def gae(rewards, values, dones, gamma: float = 0.99, lam: float = 0.95, last_value=None):
    """Backward GAE recursion; arrays are (T,) or (T, n).

    ``dones[t]`` marks that the episode ended after step ``t`` so nothing is
    bootstrapped across it. ``last_value`` is V of the state after the final
    step (zero when omitted).
    """
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    d = np.asarray(dones, dtype=bool)
    if r.shape != v.shape or r.shape != d.shape:
        raise ValueError(f"length mismatch: rewards {r.shape}, values {v.shape}, dones {d.shape}")
    T = r.shape[0]
    nxt = np.zeros(r.shape[1:]) if last_value is None else np.asarray(last_value, dtype=np.float64)
    adv = np.zeros_like(r)
    running = np.zeros(r.shape[1:])
    for t in range(T - 1, -1, -1):
        alive = 1.0 - d[t]
        delta = r[t] + gamma * nxt * alive - v[t]
        running = delta + gamma * lam * alive * running
        adv[t] = running
        nxt = v[t]
    return adv, adv + v


@dataclass
class PPOConfig:
    clip: float = 0.2
    epochs: int = 4
    minibatches: int = 4
    entropy: float = 0.005
    lr: float = 3e-4
    vf_lr: float = 1e-3
    max_grad_norm: float = 1.0
    log_std_bounds: tuple[float, float] = (-3.0, 0.5)


class NonFiniteLoss(RuntimeError):
    pass


def normalize_advantages(adv: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    std = float(np.std(adv))
    return (adv - np.mean(adv)) / (std if std > eps else 1.0)


def policy_loss_t(policy: PolicyNet, obs, actions, logp_old, adv, clip: float, entropy: float) -> dk.Tensor:
    logp = policy.log_prob_t(obs, actions)
    ratio = dk.exp(dk.sub(logp, dk.Tensor(logp_old)))
    A = dk.Tensor(adv)
    surr = dk.minimum(dk.mul(ratio, A), dk.mul(dk.clip(ratio, 1.0 - clip, 1.0 + clip), A))
    loss = -dk.mean(surr)
    if entropy:
        loss = loss - entropy * dk.total(policy.log_std)
    return loss


def ppo_update(
    policy: PolicyNet,
    value: ValueNet,
    batch: RolloutBatch | dict,
    config: PPOConfig,
    rng: np.random.Generator,
) -> dict:
    data = batch.flat() if isinstance(batch, RolloutBatch) else batch
    obs, act, logp_old = data["obs"], data["actions"], data["logp"]
    adv = normalize_advantages(data["advantages"])
    ret = data["returns"]
    N = len(adv)
    mb = max(1, N // config.minibatches)
    stats = {"policy_loss": 0.0, "value_loss": 0.0, "grad_norm": 0.0, "clip_frac": 0.0}
    count = 0
    pparams, vparams = policy.params(), value.params()
    for _ in range(config.epochs):
        perm = rng.permutation(N)
        for s in range(0, N - mb + 1, mb):
            idx = perm[s : s + mb]
            dk.zero_grad(pparams)
            with dk.Tape() as tape:
                loss = policy_loss_t(policy, obs[idx], act[idx], logp_old[idx], adv[idx], config.clip, config.entropy)
            if not np.isfinite(loss.item()):
                raise NonFiniteLoss(f"policy loss {loss.item()} at minibatch {count}")
            dk.backward(tape, loss)
            gn = dk.clip_grad_norm(pparams, config.max_grad_norm)
            dk.adam_step(pparams, lr=config.lr)
            policy.log_std.data = np.clip(policy.log_std.data, *config.log_std_bounds)

            dk.zero_grad(vparams)
            with dk.Tape() as tape:
                vloss = dk.mse(value.value_t(obs[idx]), ret[idx])
            if not np.isfinite(vloss.item()):
                raise NonFiniteLoss(f"value loss {vloss.item()} at minibatch {count}")
            dk.backward(tape, vloss)
            dk.clip_grad_norm(vparams, config.max_grad_norm)
            dk.adam_step(vparams, lr=config.vf_lr)

            ratio = np.exp(policy.log_prob(obs[idx], act[idx]) - logp_old[idx])
            stats["clip_frac"] += float(np.mean(np.abs(ratio - 1.0) > config.clip))
            stats["policy_loss"] += loss.item()
            stats["value_loss"] += vloss.item()
            stats["grad_norm"] += gn
            count += 1
    return {k: v / max(count, 1) for k, v in stats.items()}


# ---------------------------------------------------------------- training loop


@dataclass
class TrainConfig:
    n_workers: int = 64
    horizon: int = 512
    iterations: int = 100
    stage: str = "both"  # "1", "2" or "both"
    stage_split: float = 0.6
    gamma: float = 0.99
    lam_gae: float = 0.95
    hidden: tuple[int, ...] = (128, 128)
    init_log_std: float = math.log(0.2)
    ppo: PPOConfig = field(default_factory=PPOConfig)
    env: EnvConfig = field(default_factory=EnvConfig)
    weight_overrides: dict = field(default_factory=dict)
    ablate: tuple[str, ...] = ()
    mode: str = "lmo"
    seed: int = 0

    def __post_init__(self):
        self.stage = str(self.stage)
        if self.stage not in ("1", "2", "both"):
            raise ValueError(f"stage must be 1, 2 or both, got {self.stage!r}")
        for a in self.ablate:
            if a not in ("dir", "standstill"):
                raise ValueError(f"unknown ablation {a!r}")
        if self.mode not in ("lmo", "velocity"):
            raise ValueError(f"unknown mode {self.mode!r}")

    @classmethod
    def toy(cls, **kw) -> "TrainConfig":
        """Desk-scale budget: 16 workers x 128 steps x 150 iterations, faster step size, narrower exploration."""
        base = dict(n_workers=16, horizon=128, iterations=150, ppo=PPOConfig(lr=1e-3), init_log_std=math.log(0.1))
        base.update(kw)
        return cls(**base)

    def weights(self) -> RewardWeights:
        w = RewardWeights().with_overrides(self.weight_overrides)
        off = []
        if "dir" in self.ablate:
            off.append("dir_deviation")
        if "standstill" in self.ablate:
            off.append("stand_still")
        return w.disable(*off) if off else w

    def stage_at(self, it: int) -> int:
        if self.stage == "1":
            return 1
        if self.stage == "2":
            return 2
        return 1 if it < int(round(self.stage_split * self.iterations)) else 2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ablate"] = list(self.ablate)
        return d


@dataclass
class TrainResult:
    policy: PolicyNet
    value: ValueNet
    log: list[dict]
    config: TrainConfig

    def write_log(self, path: str | Path) -> None:
        write_train_log(path, self.log)


def write_train_log(path: str | Path, rows: list[dict]) -> None:
    cols: list[str] = []
    for r in rows:
        for k in r:
            if k not in cols:
                cols.append(k)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, restval="")
        w.writeheader()
        for r in rows:
            w.writerow(r)


def read_train_log(path: str | Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def collect_rollout(env: LocoEnv, policy: PolicyNet, value: ValueNet, horizon: int, gamma: float, rng) -> tuple[RolloutBatch, dict]:
    n = env.n
    obs_buf = np.zeros((horizon, n, policy.obs_dim))
    act_buf = np.zeros((horizon, n, pl.N_JOINTS))
    logp_buf = np.zeros((horizon, n))
    rew_buf = np.zeros((horizon, n))
    val_buf = np.zeros((horizon, n))
    done_buf = np.zeros((horizon, n), dtype=bool)
    term_sums: dict[str, float] = {}
    total_sum = 0.0
    dir_vals: list[float] = []
    still_norms: list[float] = []
    ep_returns: list[float] = []
    obs = env.obs
    for t in range(horizon):
        a, lp = policy.sample(obs, rng)
        v = value(obs)
        stationary = np.all(env.flags == 0, axis=1) if env.mode == "lmo" else np.zeros(n, dtype=bool)
        if np.any(stationary):
            still_norms.extend(np.linalg.norm(a[stationary, :N_LEG], axis=1).tolist())
        nobs, bd, done, timeout, term_obs = env.step(a)
        r = ppo_reward(bd, env.dt)
        if np.any(timeout):
            r = r + gamma * np.where(timeout, value(term_obs), 0.0)
        obs_buf[t], act_buf[t], logp_buf[t] = obs, a, lp
        rew_buf[t], val_buf[t], done_buf[t] = r, v, done
        for k, vals in bd.terms.items():
            term_sums[k] = term_sums.get(k, 0.0) + float(np.sum(vals))
        total_sum += float(np.sum(bd.total))
        if env.mode == "lmo" and env.stage == 2:
            use, dev = env.last_dir
            dir_vals.extend(dev[use].tolist())
        obs = nobs
    env.obs = obs
    last_v = value(obs)
    batch = RolloutBatch(obs_buf, act_buf, logp_buf, rew_buf, val_buf, done_buf)
    batch.advantages, batch.returns = gae(rew_buf, val_buf, done_buf, gamma, 0.95, last_v)
    steps = horizon * n
    info = {
        "mean_reward": total_sum / steps,
        "mean_ppo_reward": float(np.mean(rew_buf)),
        "terms": {k: v / steps for k, v in term_sums.items()},
        "yaw_drift": float(np.mean(dir_vals)) if dir_vals else float("nan"),
        "standstill_norm": float(np.mean(still_norms)) if still_norms else float("nan"),
        "episode_ends": int(np.sum(done_buf)),
    }
    return batch, info


def train(config: TrainConfig, log_every: int = 0, on_iteration=None) -> TrainResult:
    """Run the curriculum and return the trained policy plus per-iteration log rows."""
    seed = config.seed
    net_rng = derive_rng(seed, "trainer.init")
    env_rng = derive_rng(seed, "trainer.env")
    act_rng = derive_rng(seed, "trainer.act")
    upd_rng = derive_rng(seed, "trainer.update")
    cmd_mode = "twist" if config.mode == "velocity" else "flags"
    policy = PolicyNet(config.env.n_hist, config.hidden, net_rng, config.init_log_std, cmd_mode)
    value = ValueNet(config.env.n_hist, config.hidden, net_rng)
    env = LocoEnv(config.n_workers, config.env, env_rng, config.weights(), config.mode, config.stage_at(0))
    n_stage1 = sum(1 for i in range(config.iterations) if config.stage_at(i) == 1)
    rows: list[dict] = []
    t0 = time.perf_counter()
    for it in range(config.iterations):
        stage = config.stage_at(it)
        env.set_stage(stage)
        if stage == 1:
            env.set_arm_factor(it / max(1, n_stage1 - 1) if n_stage1 > 1 else 1.0)
        else:
            env.set_arm_factor(1.0)
        batch, info = collect_rollout(env, policy, value, config.horizon, config.gamma, act_rng)
        batch.advantages, batch.returns = gae(
            batch.rewards, batch.values, batch.dones, config.gamma, config.lam_gae, value(env.obs)
        )
        if not np.all(np.isfinite(batch.advantages)):
            raise NonFiniteLoss(f"non-finite advantages at iteration {it}")
        stats = ppo_update(policy, value, batch, config.ppo, upd_rng)
        row = {
            "iteration": it,
            "stage": stage,
            "arm_factor": round(env.arm_factor, 6),
            "mean_reward": info["mean_reward"],
            "mean_ppo_reward": info["mean_ppo_reward"],
            "episode_ends": info["episode_ends"],
            "policy_loss": stats["policy_loss"],
            "value_loss": stats["value_loss"],
            "clip_frac": stats["clip_frac"],
            "log_std": float(np.mean(policy.log_std.data)),
        }
        for k, v in info["terms"].items():
            if k == "dir_deviation":
                continue
            row[f"term_{k}"] = v
        if env.mode == "lmo":
            row["standstill_norm"] = "" if math.isnan(info["standstill_norm"]) else info["standstill_norm"]
        if "dir_deviation" in info["terms"]:
            row["term_dir_deviation"] = info["terms"]["dir_deviation"]
        if env.mode == "lmo" and stage == 2:
            row["yaw_drift"] = "" if math.isnan(info["yaw_drift"]) else info["yaw_drift"]
        if config.mode == "velocity":
            row["twist_resample_s"] = config.env.twist_resample_s
            row["twist_range"] = config.env.twist_range
        rows.append(row)
        if on_iteration is not None:
            on_iteration(row)
        if log_every and it % log_every == 0:
            log.info("iter %d stage %d reward %.4f (%.1fs)", it, stage, row["mean_reward"], time.perf_counter() - t0)
    return TrainResult(policy, value, rows, config)


def velocity_baseline_train(config: TrainConfig, **kw) -> TrainResult:
    """Continuous-twist controller trained with the same budget, plant and seed."""
    return train(replace(config, mode="velocity", ablate=()), **kw)
