"""Stage-dependent reward terms for the locomotion policy and episode metrics.

Every function is vectorized over a leading worker axis. Term values are
reported unweighted (intent and height kernels in (0, 1], penalties >= 0);
the sign lives in the weight.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# term -> (stage I weight, stage II weight)
DEFAULT_WEIGHTS: dict[str, tuple[float, float]] = {
    "forward_intent": (1.5, 1.8),
    "lateral_intent": (1.0, 1.2),
    "yaw_intent": (2.0, 2.0),
    "height": (2.0, 2.0),
    "vertical_velocity": (-0.5, -0.75),
    "ang_vel_xy": (-0.025, -0.05),
    "roll_pitch": (-1.5, -1.5),
    "dof_acc": (-2.5e-7, -2.5e-7),
    "dof_pos_limit": (-2.0, -2.0),
    "dof_vel": (-1e-4, -1e-4),
    "dof_vel_limit": (-0.002, -0.002),
    "torque_limit": (-0.1, -0.1),
    "action_rate": (-0.01, -0.01),
    "smoothness": (-0.05, -0.05),
    "joint_power": (-2.0e-5, -2.0e-5),
    "torque_usage": (-2.5e-6, -2.5e-6),
    "stand_still": (-0.05, -0.1),
    "joint_tracking": (-0.1, -0.1),
}

# rows that need feet, contacts or actuator saturation semantics the planar plant lacks
EXCLUDED_TERMS = frozenset(
    {
        "hip_deviation",
        "ankle_deviation",
        "knee_deviation",
        "feet_air_time",
        "foot_clearance",
        "foot_lateral_spacing",
        "knee_lateral_spacing",
        "feet_ground_parallel",
        "feet_parallel",
        "no_fly",
        "foot_slip",
        "foot_stumble",
        "feet_contact_force",
        "contact_momentum",
        "action_vanish",
        "roll_action_zero",
    }
)

DEFAULT_W_DIR = 2.0
FALL_PENALTY = -10.0
SOFT_LIMIT = 0.9
N_LEG = 3  # planar gait joints; the stance joint is excluded from the stand-still term
INTENT_SHARPNESS = 4.0


class UnknownTermError(KeyError):
    pass


@dataclass
class RewardWeights:
    table: dict[str, tuple[float, float]] = field(default_factory=lambda: dict(DEFAULT_WEIGHTS))
    w_dir: float = DEFAULT_W_DIR
    fall: float = FALL_PENALTY
    disabled: frozenset = frozenset()

    def weight(self, term: str, stage: int) -> float:
        if stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {stage}")
        if term == "dir_deviation":
            return 0.0 if term in self.disabled else -self.w_dir
        if term == "fall":
            return self.fall
        _check_term(term)
        if term in self.disabled:
            return 0.0
        return self.table[term][stage - 1]

    def with_overrides(self, overrides: dict) -> "RewardWeights":
        table = dict(self.table)
        w_dir = self.w_dir
        for k, v in overrides.items():
            if k == "w_dir":
                w_dir = float(v)
                continue
            _check_term(k)
            if isinstance(v, (int, float)):
                table[k] = (float(v), float(v))
            else:
                a, b = v
                table[k] = (float(a), float(b))
        return RewardWeights(table, w_dir, self.fall, self.disabled)

    def disable(self, *terms: str) -> "RewardWeights":
        for t in terms:
            if t != "dir_deviation":
                _check_term(t)
        return RewardWeights(dict(self.table), self.w_dir, self.fall, self.disabled | frozenset(terms))

    def effective(self, stage: int) -> dict[str, float]:
        out = {t: self.weight(t, stage) for t in self.table}
        out["dir_deviation"] = self.weight("dir_deviation", stage)
        out["fall"] = self.fall
        return out

    def to_dict(self) -> dict:
        return {"table": {k: list(v) for k, v in self.table.items()}, "w_dir": self.w_dir, "fall": self.fall, "disabled": sorted(self.disabled)}


def _check_term(term: str) -> None:
    if term in EXCLUDED_TERMS:
        raise UnknownTermError(f"reward term {term!r} is excluded on the planar plant")
    if term not in DEFAULT_WEIGHTS:
        raise UnknownTermError(f"unknown reward term {term!r}")


# ---------------------------------------------------------------- kernels and metrics


def intent_reward(v, s, v_goal):
    """Tracking kernel ``exp(-4 (v - s * v_goal)^2)``."""
    if np.any(np.asarray(v_goal) < 0):
        raise ValueError("v_goal must be non-negative")
    err = np.asarray(v, dtype=np.float64) - np.asarray(s, dtype=np.float64) * np.asarray(v_goal, dtype=np.float64)
    return np.exp(-INTENT_SHARPNESS * err * err)


def tracking_kernel(v, v_ref):
    err = np.asarray(v, dtype=np.float64) - np.asarray(v_ref, dtype=np.float64)
    return np.exp(-INTENT_SHARPNESS * err * err)


def height_reward(h, h_ref):
    return tracking_kernel(h, h_ref)


def wrap(angle):
    """Principal angle in (-pi, pi]."""
    a = np.asarray(angle, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise ValueError("angle must be finite")
    out = np.pi - np.mod(np.pi - a, 2.0 * np.pi)
    return float(out) if out.ndim == 0 else out


def dir_deviation(psi_start, psi_end):
    """Absolute wrapped heading change, in [0, pi]."""
    return np.abs(wrap(np.asarray(psi_end, dtype=np.float64) - np.asarray(psi_start, dtype=np.float64)))


# ---------------------------------------------------------------- per-step breakdown


@dataclass
class RewardContext:
    """Everything one control step needs; arrays have a leading worker axis."""

    v_body: np.ndarray  # (n, 3) vx, vy, yaw rate
    v_h: np.ndarray  # (n,)
    tilt_rate: np.ndarray  # (n, 2)
    gravity: np.ndarray  # (n, 3)
    h: np.ndarray
    q: np.ndarray  # (n, 4)
    qd: np.ndarray
    qd_prev: np.ndarray
    tau: np.ndarray
    tau_cmd: np.ndarray
    a: np.ndarray
    a_prev: np.ndarray
    a_prev2: np.ndarray
    a_delayed: np.ndarray
    v_ref: np.ndarray  # (n, 3)
    h_ref: np.ndarray
    flags: np.ndarray  # (n, 3)
    kp: np.ndarray
    q_min: np.ndarray
    q_max: np.ndarray
    qd_max: np.ndarray
    tau_max: np.ndarray
    dt: float = 0.02
    fallen: np.ndarray | None = None
    dir_dev: np.ndarray | None = None  # terminal heading deviation, 0 where nothing closed

    @property
    def n(self) -> int:
        return self.q.shape[0]


def context_from_plant(state, prev_state, params, action, a_prev, a_prev2, v_ref, h_ref, flags, dir_dev=None) -> RewardContext:
    from .plant import gravity_vector

    return RewardContext(
        v_body=state.body_velocity(),
        v_h=state.vh,
        tilt_rate=state.tilt_rate,
        gravity=gravity_vector(state.pose[:, 4], state.pose[:, 5]),
        h=state.pose[:, 3],
        q=state.q,
        qd=state.qd,
        qd_prev=prev_state.qd,
        tau=state.tau,
        tau_cmd=state.tau_cmd,
        a=action,
        a_prev=a_prev,
        a_prev2=a_prev2,
        a_delayed=state.a_applied,
        v_ref=v_ref,
        h_ref=h_ref,
        flags=flags,
        kp=params.kp,
        q_min=params.q_min,
        q_max=params.q_max,
        qd_max=params.qd_max,
        tau_max=params.tau_max,
        dt=params.dt,
        fallen=state.fallen,
        dir_dev=dir_dev,
    )


@dataclass
class StepRewardBreakdown:
    terms: dict[str, np.ndarray]
    weights: dict[str, float]
    total: np.ndarray
    stage: int

    def means(self) -> dict[str, float]:
        return {k: float(np.mean(v)) for k, v in self.terms.items()}

    def row(self, i: int) -> dict[str, float]:
        return {k: float(v[i]) for k, v in self.terms.items()}


def _hinge(x):
    return np.maximum(x, 0.0)


def term_values(ctx: RewardContext) -> dict[str, np.ndarray]:
    """Unweighted value of every table term."""
    mid = 0.5 * (ctx.q_min + ctx.q_max)
    half = 0.5 * (ctx.q_max - ctx.q_min) * SOFT_LIMIT
    sq = lambda x: np.sum(x * x, axis=1)  # noqa: E731
    stationary = np.all(ctx.flags == 0, axis=1)
    return {
        "forward_intent": tracking_kernel(ctx.v_body[:, 0], ctx.v_ref[:, 0]),
        "lateral_intent": tracking_kernel(ctx.v_body[:, 1], ctx.v_ref[:, 1]),
        "yaw_intent": tracking_kernel(ctx.v_body[:, 2], ctx.v_ref[:, 2]),
        "height": height_reward(ctx.h, ctx.h_ref),
        "vertical_velocity": ctx.v_h * ctx.v_h,
        "ang_vel_xy": sq(ctx.tilt_rate),
        "roll_pitch": ctx.gravity[:, 0] ** 2 + ctx.gravity[:, 1] ** 2,
        "dof_acc": sq((ctx.qd - ctx.qd_prev) / ctx.dt),
        "dof_pos_limit": np.sum(_hinge(np.abs(ctx.q - mid) - half), axis=1),
        "dof_vel": sq(ctx.qd),
        "dof_vel_limit": np.sum(_hinge(np.abs(ctx.qd) - SOFT_LIMIT * ctx.qd_max), axis=1),
        "torque_limit": np.sum(_hinge(np.abs(ctx.tau_cmd) - SOFT_LIMIT * ctx.tau_max), axis=1),
        "action_rate": sq(ctx.a - ctx.a_prev),
        "smoothness": sq(ctx.a - 2.0 * ctx.a_prev + ctx.a_prev2),
        "joint_power": np.sum(np.abs(ctx.tau * ctx.qd), axis=1),
        "torque_usage": np.sum(ctx.tau * ctx.tau / ctx.kp, axis=1),
        "stand_still": np.where(stationary, sq(ctx.a[:, :N_LEG]), 0.0),
        "joint_tracking": sq(ctx.q - ctx.a_delayed),
    }


def step_reward(ctx: RewardContext, weights: RewardWeights | None = None, stage: int = 2) -> StepRewardBreakdown:
    """Weighted total plus per-term values.

    ``dir_deviation`` is included only when ``ctx.dir_dev`` is given and
    ``fall`` only when ``ctx.fallen`` is given.
    """
    weights = weights or RewardWeights()
    terms = term_values(ctx)
    if ctx.dir_dev is not None:
        terms["dir_deviation"] = np.asarray(ctx.dir_dev, dtype=np.float64)
    if ctx.fallen is not None:
        terms["fall"] = np.asarray(ctx.fallen, dtype=np.float64)
    w = {k: weights.weight(k, stage) for k in terms}
    total = np.zeros(ctx.n)
    for k, v in terms.items():
        total = total + w[k] * v
    return StepRewardBreakdown(terms, w, total, stage)


def recompute_total(terms: dict[str, float], weights: dict[str, float]) -> float:
    return math.fsum(weights[k] * terms[k] for k in terms)
