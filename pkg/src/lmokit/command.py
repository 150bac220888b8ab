"""Ternary intent flags, the smoothed reference gate, and flag-delimited episodes."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

AXES = ("x", "y", "psi")
H_MIN, H_MAX = 0.4, 0.8


@dataclass(frozen=True)
class CommandFlags:
    sx: int = 0
    sy: int = 0
    spsi: int = 0
    h_star: float = 0.7

    def __post_init__(self):
        for v in (self.sx, self.sy, self.spsi):
            if v not in (-1, 0, 1):
                raise ValueError(f"flag {v!r} is not in {{-1, 0, 1}}")
        if not H_MIN <= self.h_star <= H_MAX:
            raise ValueError(f"h_star {self.h_star} outside [{H_MIN}, {H_MAX}]")

    @property
    def flags(self) -> np.ndarray:
        return np.array([self.sx, self.sy, self.spsi], dtype=np.float64)

    @property
    def stationary(self) -> bool:
        return self.sx == 0 and self.sy == 0 and self.spsi == 0


@dataclass
class GateConfig:
    alpha: float = 2.0
    lam: float = 0.1
    mode: str = "ramp"
    h_slew: float = 0.2  # m/s
    dt: float = 0.02


@dataclass
class GateState:
    """Smoothed flags plus the rate-limited height reference."""

    sbar: np.ndarray = field(default_factory=lambda: np.zeros(3))
    h_ref: float = 0.7


@dataclass(frozen=True)
class ReferenceTwist:
    vx: float
    vy: float
    wz: float
    h: float

    def as_array(self) -> np.ndarray:
        return np.array([self.vx, self.vy, self.wz])


def update_gate(state: GateState, flags: CommandFlags | Sequence[float], lam: float = 0.1) -> GateState:
    """One control step of ``sbar <- (1 - lam) * sbar + lam * s``."""
    s = flags.flags if isinstance(flags, CommandFlags) else np.asarray(flags, dtype=np.float64)
    return GateState(sbar=(1.0 - lam) * np.asarray(state.sbar) + lam * s, h_ref=state.h_ref)


def gate_reference(s, sbar, v_goal, alpha: float, mode: str = "ramp"):
    """Per-axis reference speed; works on scalars or arrays.

    ``literal``: ``v_goal * tanh(alpha * (s - sbar))`` which vanishes once the
    smoothed flag has converged. ``ramp``: ``v_goal * tanh(alpha * sbar)``,
    which rises with the gate and decays after release.
    """
    s = np.asarray(s, dtype=np.float64)
    sbar = np.asarray(sbar, dtype=np.float64)
    if mode == "ramp":
        return np.asarray(v_goal) * np.tanh(alpha * sbar)
    if mode == "literal":
        return np.asarray(v_goal) * np.tanh(alpha * (s - sbar))
    raise ValueError(f"unknown gate mode {mode!r}")


def slew_height(h_ref, h_star, max_rate: float, dt: float):
    step = max_rate * dt
    return np.asarray(h_ref) + np.clip(np.asarray(h_star) - np.asarray(h_ref), -step, step)


def shape_reference(
    state: GateState,
    flags: CommandFlags,
    goals: Sequence[float],
    mode: str = "ramp",
    alpha: float = 2.0,
    h_slew: float = 0.2,
    dt: float = 0.02,
) -> tuple[ReferenceTwist, GateState]:
    """Reference twist from the current gate; also advances the height filter."""
    goals = np.asarray(goals, dtype=np.float64)
    if np.any(goals < 0):
        raise ValueError("goal speeds must be non-negative")
    v = gate_reference(flags.flags, state.sbar, goals, alpha, mode)
    h = float(slew_height(state.h_ref, flags.h_star, h_slew, dt))
    return ReferenceTwist(float(v[0]), float(v[1]), float(v[2]), h), GateState(np.array(state.sbar), h)


class CommandGate:
    """Gate for a batch of control loops, one row per worker."""

    def __init__(self, n: int, config: GateConfig | None = None, h0: float = 0.7):
        self.config = config or GateConfig()
        self.sbar = np.zeros((n, 3))
        self.h_ref = np.full(n, h0)

    def reset(self, mask: np.ndarray, h0: np.ndarray | float = 0.7) -> None:
        self.sbar[mask] = 0.0
        self.h_ref[mask] = h0 if np.isscalar(h0) else np.asarray(h0)[mask]

    def step(self, flags: np.ndarray, v_goal: np.ndarray, h_star: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Advance one step and return ``(v_ref (n, 3), h_ref (n,))``."""
        c = self.config
        self.sbar = (1.0 - c.lam) * self.sbar + c.lam * flags
        v_ref = gate_reference(flags, self.sbar, v_goal, c.alpha, c.mode)
        self.h_ref = slew_height(self.h_ref, h_star, c.h_slew, c.dt)
        return v_ref, self.h_ref.copy()


# ---------------------------------------------------------------- episodes


@dataclass
class StabilityCriterion:
    v_eps: float = 0.05
    w_eps: float = 0.05
    hold_s: float = 0.5
    dt: float = 0.02

    @property
    def hold_steps(self) -> int:
        return max(1, int(round(self.hold_s / self.dt)))


@dataclass(frozen=True)
class EpisodeSegment:
    axis: str
    sign: int
    start: int
    flag_off: int | None
    end: int | None  # step at which the stillness window completes

    @property
    def open(self) -> bool:
        return self.end is None


def _still(base: np.ndarray, crit: StabilityCriterion) -> np.ndarray:
    speed = np.hypot(base[:, 0], base[:, 1])
    return (speed < crit.v_eps) & (np.abs(base[:, 2]) < crit.w_eps)


def segment_episodes(
    flag_trace: np.ndarray,
    base_trace: np.ndarray,
    crit: StabilityCriterion | None = None,
) -> list[EpisodeSegment]:
    """Per-axis segments from a 0 -> +/-1 flip until release plus stillness.

    ``flag_trace`` is (T, 3); ``base_trace`` is (T, 3) holding planar velocity
    (vx, vy) and yaw rate. A direct sign reversal closes the running segment
    at the reversal step (no stillness check) and opens a new one.
    """
    crit = crit or StabilityCriterion()
    flags = np.asarray(flag_trace)
    base = np.asarray(base_trace, dtype=np.float64)
    if flags.shape[0] != base.shape[0]:
        raise ValueError("flag and base traces differ in length")
    still = _still(base, crit) if len(base) else np.zeros(0, dtype=bool)
    hold = crit.hold_steps
    segments: list[EpisodeSegment] = []
    T = flags.shape[0]
    for k, axis in enumerate(AXES):
        f = flags[:, k].astype(int)
        t = 0
        prev = 0
        while t < T:
            if f[t] != 0 and prev == 0:
                start, sign = t, int(f[t])
                u = t
                while u < T and f[u] == sign:
                    u += 1
                if u < T and f[u] == -sign:
                    segments.append(EpisodeSegment(axis, sign, start, u, u))
                    t, prev = u, 0
                    continue
                if u >= T:
                    segments.append(EpisodeSegment(axis, sign, start, None, None))
                    break
                flag_off, run, end = u, 0, None
                v = u
                while v < T and f[v] == 0:
                    run = run + 1 if still[v] else 0
                    if run >= hold:
                        end = v
                        break
                    v += 1
                segments.append(EpisodeSegment(axis, sign, start, flag_off, end))
                t, prev = v, 0
                continue
            prev = f[t]
            t += 1
    segments.sort(key=lambda s: (s.start, AXES.index(s.axis)))
    return segments


class OnlineSegmenter:
    """Incremental per-axis segmentation for a batch of workers.

    ``update`` returns, per worker and axis, whether a segment closed on this
    step, so a terminal penalty can be paid at that moment.
    """

    def __init__(self, n: int, crit: StabilityCriterion | None = None):
        self.crit = crit or StabilityCriterion()
        self.n = n
        self.prev = np.zeros((n, 3), dtype=int)
        self.active = np.zeros((n, 3), dtype=bool)
        self.released = np.zeros((n, 3), dtype=bool)
        self.run = np.zeros((n, 3), dtype=int)
        self.psi_start = np.zeros((n, 3))
        self.yaw_clean = np.ones((n, 3), dtype=bool)

    def reset(self, mask: np.ndarray) -> None:
        for arr in (self.prev, self.run):
            arr[mask] = 0
        self.active[mask] = False
        self.released[mask] = False
        self.yaw_clean[mask] = True

    def update(self, flags: np.ndarray, still: np.ndarray, psi: np.ndarray):
        """Advance one step.

        Returns ``(closed, psi_start, yaw_clean)``, each (n, 3): which segments
        closed on this step, the heading recorded at their onset, and whether
        the yaw flag stayed zero from onset through closing.
        """
        flags = np.asarray(flags).astype(int)
        closed = np.zeros((self.n, 3), dtype=bool)
        on = self.active & ~self.released
        reversal = on & (self.prev != 0) & (flags == -self.prev)
        relapse = self.active & self.released & (flags != 0)
        closed |= reversal | relapse
        self.active &= ~closed
        rel = self.active & self.released
        self.run = np.where(rel, np.where(still[:, None], self.run + 1, 0), self.run)
        newly_off = self.active & ~self.released & (flags == 0)
        self.released |= newly_off
        self.run = np.where(newly_off, np.where(still[:, None], 1, 0), self.run)
        done = self.active & self.released & (self.run >= self.crit.hold_steps)
        closed |= done
        self.active &= ~done
        clean = self.yaw_clean & (flags[:, 2:3] == 0)
        psi_start = self.psi_start.copy()
        onset = ~self.active & (flags != 0) & ((self.prev == 0) | reversal)
        self.active |= onset
        self.released &= ~onset
        self.run = np.where(onset, 0, self.run)
        self.psi_start = np.where(onset, psi[:, None], self.psi_start)
        self.yaw_clean = np.where(onset, flags[:, 2:3] == 0, clean)
        self.prev = flags
        return closed, psi_start, clean


# ---------------------------------------------------------------- traces


def write_flag_trace(path: str | Path, rows: Iterable[tuple[int, int, int, int, float]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t, sx, sy, spsi, h in rows:
            fh.write(json.dumps({"t": int(t), "sx": int(sx), "sy": int(sy), "spsi": int(spsi), "h": float(h)}) + "\n")


def read_flag_trace(path: str | Path) -> list[tuple[int, CommandFlags]]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                o = json.loads(line)
                out.append((int(o["t"]), CommandFlags(o["sx"], o["sy"], o["spsi"], o["h"])))
    return out
