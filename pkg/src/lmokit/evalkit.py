"""Evaluation protocols: settled locomotion accuracy and balance under perturbation.

A controller is anything with ``act(obs) -> action`` plus ``n_hist`` and
``command_mode`` (``"flags"`` or ``"twist"``). An optional
``after_step(state, ref_pose)`` hook lets a harness oracle overwrite the
plant state. Repetitions run as one batch of plants, one row per seed.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import plant as pl
from .command import CommandGate, GateConfig, StabilityCriterion, segment_episodes
from .rewards import RewardContext, RewardWeights, context_from_plant, dir_deviation, step_reward, wrap
from .seeding import derive_rng, derive_seed

PRIMITIVES = {
    "forward": (1, 0, 0),
    "backward": (-1, 0, 0),
    "left": (0, 1, 0),
    "right": (0, -1, 0),
    "turn-left": (0, 0, 1),
    "turn-right": (0, 0, -1),
}
POSTURES = {"standing": 0.7, "squatting": 0.45}
REPORT_COLUMNS = ["primitive", "metric", "mean", "std", "n", "failures"]
STABILITY_COLUMNS = ["posture", "h_star", "mean", "std", "n", "failures"]


@dataclass
class TrialSpec:
    primitive: str = "forward"
    magnitude: float = 0.3
    active_s: float = 5.0
    settle_s: float = 10.0
    repetitions: int = 5
    h_star: float = 0.7

    def __post_init__(self):
        if self.primitive not in PRIMITIVES:
            raise ValueError(f"unknown primitive {self.primitive!r}")
        if self.active_s <= 0 or self.settle_s <= 0:
            raise ValueError("durations must be positive")
        if self.magnitude < 0:
            raise ValueError("magnitude must be non-negative")


@dataclass
class EvalPlantConfig:
    """Which plants the trials run on: nominal, or domain-randomized per seed."""

    randomize: bool = False
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    dt: float = 0.02

    def params(self, k: int | None = None) -> pl.PlantParams:
        seeds = list(self.seeds)[: (k or len(self.seeds))]
        if self.randomize:
            return pl.concat_params([pl.sample_domain_rand(derive_seed(s, "eval.plant"), 1, dt=self.dt) for s in seeds])
        return pl.nominal_params(len(seeds), self.dt)


def reference_pose(primitive: str, magnitude: float = 0.3, active_s: float = 5.0) -> tuple[float, float, float]:
    """Integral of the constant command over the active phase (start pose at the origin)."""
    sx, sy, spsi = PRIMITIVES[primitive]
    d = magnitude * active_s
    return (sx * d, sy * d, spsi * d)


def com_sway(trace) -> float:
    """RMS distance of a planar trace (T, 2) from its temporal mean."""
    c = np.asarray(trace, dtype=np.float64)
    if c.ndim == 1:
        c = c[:, None]
    if c.shape[0] < 2:
        raise ValueError("sway needs at least two samples")
    dev = c - c.mean(axis=0)
    return float(math.sqrt(np.mean(np.sum(dev * dev, axis=1))))


# ---------------------------------------------------------------- controllers


class ZeroController:
    """Holds every joint target at zero (ignores commands)."""

    command_mode = "flags"

    def __init__(self, n_hist: int = 5):
        self.n_hist = n_hist

    def act(self, obs: np.ndarray) -> np.ndarray:
        return np.zeros((np.atleast_2d(obs).shape[0], pl.N_JOINTS))


class TeleportOracle(ZeroController):
    """Harness self-test: after every step the base is moved onto the reference pose."""

    command_mode = "twist"

    def after_step(self, state: pl.PlantState, ref_pose: np.ndarray) -> None:
        state.pose[:, :3] = ref_pose
        state.slip[:] = 0.0
        state.gait[:] = 0.0
        state.tilt_rate[:] = 0.0
        state.pose[:, 4:6] = 0.0


# ---------------------------------------------------------------- trial runner


@dataclass
class Trace:
    t: np.ndarray  # (T,)
    pose: np.ndarray  # (T, n, 6)
    vel: np.ndarray  # (T, n, 6)
    flags: np.ndarray  # (T, n, 3)
    action: np.ndarray  # (T, n, 4)
    fallen: np.ndarray  # (n,)


class TrajectoryLogger:
    """JSON-lines trajectory log for one plant row: header, one line per step, summary."""

    def __init__(self, path: str | Path, header: dict):
        self.fh = open(path, "w", encoding="utf-8")
        self.fh.write(json.dumps({"header": header}) + "\n")

    def step(self, rec: dict) -> None:
        self.fh.write(json.dumps(rec) + "\n")

    def close(self, summary: dict) -> None:
        self.fh.write(json.dumps({"summary": summary}) + "\n")
        self.fh.close()


def _row_list(a, i) -> list:
    return [float(x) for x in np.asarray(a)[i]]


def _params_row(params: pl.PlantParams, i: int) -> dict:
    return params.select(np.array([i])).to_dict()


def run_episode(
    controller,
    params: pl.PlantParams,
    flags_fn,
    steps: int,
    h_star: float,
    magnitude: float = 0.3,
    twist_fn=None,
    ref_fn=None,
    arm: pl.ArmReplay | None = None,
    pushes: pl.DisturbanceGenerator | None = None,
    log_path: str | Path | None = None,
    log_meta: dict | None = None,
    weights: RewardWeights | None = None,
    gate: GateConfig | None = None,
) -> Trace:
    """Drive a batch of plants for ``steps`` control periods.

    ``flags_fn(t) -> (3,)`` gives the intent flags at step ``t``;
    ``twist_fn(t)`` the twist for twist-mode controllers (defaults to
    ``magnitude * flags``). When ``log_path`` is set, row 0 is written as a
    replayable trajectory log.
    """
    n = params.n
    state = pl.initial_state(params, h_star)
    hist = pl.ObservationHistory(n, controller.n_hist)
    gcfg = gate or GateConfig(dt=params.dt)
    g = CommandGate(n, gcfg, h0=h_star)
    weights = weights or RewardWeights()
    a_prev = state.q.copy()
    a_prev2 = state.q.copy()
    twist_fn = twist_fn or (lambda t: magnitude * np.asarray(flags_fn(t), dtype=np.float64))
    T = steps
    poses = np.zeros((T, n, 6))
    vels = np.zeros((T, n, 6))
    flag_tr = np.zeros((T, n, 3))
    acts = np.zeros((T, n, pl.N_JOINTS))
    fallen = np.zeros(n, dtype=bool)
    logger = None
    if log_path is not None:
        header = {
            "kind": (log_meta or {}).get("kind", "trial"),
            "meta": log_meta or {},
            "params": _params_row(params, 0),
            "weights": weights.to_dict(),
            "stage": 2,
            "command_mode": controller.command_mode,
            "init": {"q": _row_list(state.q, 0), "qd": _row_list(state.qd, 0), "a_prev": _row_list(a_prev, 0)},
        }
        logger = TrajectoryLogger(log_path, header)
    h_arr = np.full(n, h_star)
    for t in range(T):
        f = np.tile(np.asarray(flags_fn(t), dtype=np.float64), (n, 1))
        tw = np.tile(np.asarray(twist_fn(t), dtype=np.float64), (n, 1))
        if controller.command_mode == "twist":
            cmd = np.concatenate([tw, h_arr[:, None]], axis=1)
            g.step(np.zeros((n, 3)), np.zeros((n, 3)), h_arr)
            v_ref, h_ref = tw, g.h_ref.copy()
        else:
            cmd = np.concatenate([f, h_arr[:, None]], axis=1)
            v_ref, h_ref = g.step(f, np.full((n, 3), magnitude), h_arr)
        obs = pl.assemble_observation(state, params, cmd, a_prev, hist)
        action = np.clip(controller.act(obs), params.q_min, params.q_max)
        prev = state
        state = pl.step(prev, params, action, pushes.step() if pushes else None, arm.step() if arm else None)
        if hasattr(controller, "after_step") and ref_fn is not None:
            controller.after_step(state, np.tile(ref_fn(t + 1), (n, 1)))
        if logger is not None:
            ctx = context_from_plant(state, prev, params, action, a_prev, a_prev2, v_ref, h_ref, f)
            bd = step_reward(ctx, weights, 2)
            logger.step(
                {
                    "t": t,
                    "pose": _row_list(state.pose, 0),
                    "vel": _row_list(state.velocity6(), 0),
                    "q": _row_list(state.q, 0),
                    "qd": _row_list(state.qd, 0),
                    "a": _row_list(action, 0),
                    "flags": _row_list(f, 0),
                    "href": float(h_ref[0]),
                    "vref": _row_list(v_ref, 0),
                    "tau": _row_list(state.tau, 0),
                    "tau_cmd": _row_list(state.tau_cmd, 0),
                    "a_delayed": _row_list(state.a_applied, 0),
                    "fallen": bool(state.fallen[0]),
                    "reward_total": float(bd.total[0]),
                    "reward_terms": bd.row(0),
                }
            )
        a_prev2, a_prev = a_prev, action
        poses[t], vels[t], flag_tr[t], acts[t] = state.pose, state.velocity6(), f, action
        fallen |= state.fallen
    tr = Trace(np.arange(T), poses, vels, flag_tr, acts, fallen)
    tr._logger = logger  # closed by the caller once the summary is known
    return tr


def _close_log(trace: Trace, summary: dict) -> None:
    logger = getattr(trace, "_logger", None)
    if logger is not None:
        logger.close(summary)


def _step_ref(primitive: str, magnitude: float, active_steps: int, dt: float):
    direction = np.asarray(PRIMITIVES[primitive], dtype=np.float64)

    def ref(t: int) -> np.ndarray:
        # planar integral of the command up to step t; translation is along the start heading
        return direction * magnitude * dt * min(t, active_steps)

    return ref


# ---------------------------------------------------------------- locomotion accuracy


@dataclass
class Stat:
    mean: float
    std: float
    n: int
    failures: int

    @classmethod
    def of(cls, values: Sequence[float], failures: int) -> "Stat":
        v = np.asarray(values, dtype=np.float64)
        if len(v) == 0:
            return cls(float("nan"), float("nan"), 0, failures)
        return cls(float(np.mean(v)), float(np.std(v)), len(v), failures)


@dataclass
class TrialResult:
    pos_err: np.ndarray
    yaw_err: np.ndarray
    fallen: np.ndarray
    final_pose: np.ndarray


@dataclass
class AccuracyReport:
    position: dict[str, Stat] = field(default_factory=dict)
    yaw: dict[str, Stat] = field(default_factory=dict)

    def rows(self) -> list[dict]:
        out = []
        for prim in self.position:
            for metric, table in (("position_m", self.position), ("yaw_rad", self.yaw)):
                s = table[prim]
                out.append({"primitive": prim, "metric": metric, "mean": s.mean, "std": s.std, "n": s.n, "failures": s.failures})
        return out

    def to_csv(self, path: str | Path | None = None) -> str:
        return _write_csv(self.rows(), REPORT_COLUMNS, path)

    def to_json(self) -> str:
        return json.dumps(self.rows(), indent=2)


def _write_csv(rows: list[dict], cols: list[str], path) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


def settled_errors(final_pose: np.ndarray, ref: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    """Planar position error and wrapped yaw error of final poses (n, >=3)."""
    fp = np.atleast_2d(final_pose)
    pos = np.hypot(fp[:, 0] - ref[0], fp[:, 1] - ref[1])
    yaw = np.abs(wrap(fp[:, 2] - ref[2]))
    return pos, np.atleast_1d(yaw)


def run_trial(controller, spec: TrialSpec, plant: EvalPlantConfig, log_path=None) -> TrialResult:
    params = plant.params(spec.repetitions)
    dt = params.dt
    n_act = int(round(spec.active_s / dt))
    n_all = n_act + int(round(spec.settle_s / dt))
    flags = np.asarray(PRIMITIVES[spec.primitive], dtype=np.float64)
    flags_fn = lambda t: flags if t < n_act else np.zeros(3)  # noqa: E731
    ref_fn = _step_ref(spec.primitive, spec.magnitude, n_act, dt)
    tr = run_episode(
        controller,
        params,
        flags_fn,
        n_all,
        spec.h_star,
        spec.magnitude,
        ref_fn=ref_fn,
        log_path=log_path,
        log_meta={"kind": "loco", "spec": asdict(spec)},
    )
    ref = reference_pose(spec.primitive, spec.magnitude, spec.active_s)
    final = tr.pose[-1]
    pos, yaw = settled_errors(final, ref)
    _close_log(tr, {"reference": list(ref), "pos_err": float(pos[0]), "yaw_err": float(yaw[0]), "fallen": bool(tr.fallen[0])})
    return TrialResult(pos, yaw, tr.fallen, final)


def loco_accuracy(
    controller,
    plant: EvalPlantConfig | None = None,
    spec: TrialSpec | None = None,
    primitives: Sequence[str] | None = None,
) -> AccuracyReport:
    """Settled position/yaw error per primitive; fallen trials are excluded and counted."""
    plant = plant or EvalPlantConfig()
    base = spec or TrialSpec()
    rep = AccuracyReport()
    for prim in primitives or list(PRIMITIVES):
        s = TrialSpec(prim, base.magnitude, base.active_s, base.settle_s, base.repetitions, base.h_star)
        res = run_trial(controller, s, plant)
        ok = ~res.fallen
        rep.position[prim] = Stat.of(res.pos_err[ok], int(np.sum(res.fallen)))
        rep.yaw[prim] = Stat.of(res.yaw_err[ok], int(np.sum(res.fallen)))
    return rep


def terminal_yaw_deviation(
    controller,
    plant: EvalPlantConfig | None = None,
    spec: TrialSpec | None = None,
    crit: StabilityCriterion | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Heading change over the flag-delimited episode of a single-axis trial.

    The episode closes once the base has been still for the hold window
    after release; an episode that never settles is closed at trial end.
    Returns ``(deviation per plant, fallen per plant)``.
    """
    plant = plant or EvalPlantConfig(randomize=True)
    spec = spec or TrialSpec("forward")
    crit = crit or StabilityCriterion(dt=plant.dt)
    params = plant.params(spec.repetitions)
    n_act = int(round(spec.active_s / params.dt))
    n_all = n_act + int(round(spec.settle_s / params.dt))
    flags = np.asarray(PRIMITIVES[spec.primitive], dtype=np.float64)
    tr = run_episode(controller, params, lambda t: flags if t < n_act else np.zeros(3), n_all, spec.h_star, spec.magnitude)
    axis = int(np.flatnonzero(flags)[0])
    out = np.zeros(params.n)
    for i in range(params.n):
        base = tr.vel[:, i, [0, 1, 2]]
        segs = [s for s in segment_episodes(tr.flags[:, i], base, crit) if s.axis == ("x", "y", "psi")[axis]]
        end = segs[0].end if segs and segs[0].end is not None else n_all - 1
        out[i] = dir_deviation(0.0, tr.pose[end, i, 2])
    return out, tr.fallen


def stationary_action_norm(
    controller,
    plant: EvalPlantConfig | None = None,
    duration_s: float = 10.0,
    h_star: float = 0.7,
    seed: int = 0,
) -> np.ndarray:
    """Mean leg-action norm per plant while every flag stays zero under training-level disturbances."""
    plant = plant or EvalPlantConfig(randomize=True)
    params = plant.params()
    n = params.n
    rng = derive_rng(seed, "eval.stationary")
    arm = pl.ArmReplay(pl.ArmReplayConfig(), n, rng, params.dt)
    pushes = pl.DisturbanceGenerator(pl.DisturbanceSchedule.train(), n, rng, params.dt)
    steps = int(round(duration_s / params.dt))
    tr = run_episode(controller, params, lambda t: np.zeros(3), steps, h_star, arm=arm, pushes=pushes)
    norms = np.linalg.norm(tr.action[:, :, :3], axis=2)
    return norms.mean(axis=0)


# ---------------------------------------------------------------- stability


@dataclass
class StabilityReport:
    posture: str
    h_star: float
    sway: Stat
    per_run: list[float] = field(default_factory=list)

    def rows(self) -> list[dict]:
        s = self.sway
        return [{"posture": self.posture, "h_star": self.h_star, "mean": s.mean, "std": s.std, "n": s.n, "failures": s.failures}]

    def to_csv(self, path: str | Path | None = None) -> str:
        return _write_csv(self.rows(), STABILITY_COLUMNS, path)

    def to_json(self) -> str:
        return json.dumps({**self.rows()[0], "per_run": self.per_run}, indent=2)


def stability_eval(
    controller,
    posture: str = "standing",
    duration_s: float = 20.0,
    plant: EvalPlantConfig | None = None,
    push_scale: float = 1.0,
    pushes: bool = True,
    arm: bool = True,
    seed: int = 0,
    log_path=None,
) -> StabilityReport:
    """CoM sway (base planar position) with all flags zero under evaluation disturbances."""
    if posture not in POSTURES:
        raise ValueError(f"unknown posture {posture!r}")
    h = POSTURES[posture]
    plant = plant or EvalPlantConfig()
    params = plant.params()
    n = params.n
    arm_rng = derive_rng(seed, "eval.arm")
    push_rng = derive_rng(seed, "eval.push")
    arm_r = pl.ArmReplay(pl.ArmReplayConfig.evaluation(), n, arm_rng, params.dt) if arm else None
    push_g = pl.DisturbanceGenerator(pl.DisturbanceSchedule.eval(scale=push_scale), n, push_rng, params.dt) if pushes else None
    steps = int(round(duration_s / params.dt))
    tr = run_episode(
        controller,
        params,
        lambda t: np.zeros(3),
        steps,
        h,
        arm=arm_r,
        pushes=push_g,
        log_path=log_path,
        log_meta={"kind": "stability", "posture": posture, "h_star": h},
    )
    sways = np.array([com_sway(tr.pose[:, i, :2]) for i in range(n)])
    _close_log(tr, {"sway": float(sways[0]), "fallen": bool(tr.fallen[0])})
    ok = ~tr.fallen
    return StabilityReport(posture, h, Stat.of(sways[ok], int(np.sum(tr.fallen))), sways.tolist())


# ---------------------------------------------------------------- replay


@dataclass
class ReplayDiff:
    step: int | None
    field: str
    logged: float
    recomputed: float


def replay_log(path: str | Path, tol: float = 0.0) -> list[ReplayDiff]:
    """Recompute rewards and summary metrics from a trajectory log.

    Differences larger than ``tol`` are returned; an untouched log yields none.
    """
    lines = [json.loads(x) for x in Path(path).read_text(encoding="utf-8").splitlines() if x.strip()]
    if not lines or "header" not in lines[0]:
        raise ValueError("log has no header line")
    head = lines[0]["header"]
    for key in ("params", "weights", "init", "stage"):
        if key not in head:
            raise ValueError(f"header lacks {key!r}")
    params = pl.PlantParams.from_dict(head["params"])
    wd = head["weights"]
    weights = RewardWeights({k: tuple(v) for k, v in wd["table"].items()}, wd["w_dir"], wd["fall"], frozenset(wd["disabled"]))
    stage = int(head["stage"])
    steps = [x for x in lines[1:] if "summary" not in x]
    summary = next((x["summary"] for x in lines[1:] if "summary" in x), None)
    need = ("t", "pose", "vel", "q", "qd", "a", "flags", "href", "vref", "tau", "tau_cmd", "a_delayed", "reward_total", "reward_terms")
    diffs: list[ReplayDiff] = []
    qd_prev = np.array([head["init"]["qd"]])
    a_prev = np.array([head["init"]["a_prev"]])
    a_prev2 = a_prev.copy()
    r = lambda v: np.array([v], dtype=np.float64)  # noqa: E731
    for rec in steps:
        missing = [k for k in need if k not in rec]
        if missing:
            raise ValueError(f"step record lacks {missing}")
        pose, vel = r(rec["pose"]), r(rec["vel"])
        a = r(rec["a"])
        ctx = RewardContext(
            v_body=vel[:, :3],
            v_h=vel[:, 3],
            tilt_rate=vel[:, 4:6],
            gravity=pl.gravity_vector(pose[:, 4], pose[:, 5]),
            h=pose[:, 3],
            q=r(rec["q"]),
            qd=r(rec["qd"]),
            qd_prev=qd_prev,
            tau=r(rec["tau"]),
            tau_cmd=r(rec["tau_cmd"]),
            a=a,
            a_prev=a_prev,
            a_prev2=a_prev2,
            a_delayed=r(rec["a_delayed"]),
            v_ref=r(rec["vref"]),
            h_ref=np.array([rec["href"]], dtype=np.float64),
            flags=r(rec["flags"]),
            kp=params.kp,
            q_min=params.q_min,
            q_max=params.q_max,
            qd_max=params.qd_max,
            tau_max=params.tau_max,
            dt=params.dt,
            fallen=np.array([rec["fallen"]]) if "fallen" in rec else None,
        )
        bd = step_reward(ctx, weights, stage)
        t = int(rec["t"])
        if abs(bd.total[0] - rec["reward_total"]) > tol:
            diffs.append(ReplayDiff(t, "reward_total", rec["reward_total"], float(bd.total[0])))
        for k, v in bd.row(0).items():
            lv = rec["reward_terms"].get(k)
            if lv is None or abs(v - lv) > tol:
                diffs.append(ReplayDiff(t, f"reward_terms.{k}", float("nan") if lv is None else lv, v))
        qd_prev, a_prev2, a_prev = ctx.qd, a_prev, a
    if summary is not None and steps:
        final = np.array(steps[-1]["pose"])
        if head.get("kind") == "loco" and "reference" in summary:
            pos, yaw = settled_errors(final[None], summary["reference"])
            for k, v in (("pos_err", pos[0]), ("yaw_err", yaw[0])):
                if abs(float(v) - summary[k]) > tol:
                    diffs.append(ReplayDiff(None, f"summary.{k}", summary[k], float(v)))
        if head.get("kind") == "stability" and "sway" in summary:
            s = com_sway(np.array([x["pose"][:2] for x in steps]))
            if abs(s - summary["sway"]) > tol:
                diffs.append(ReplayDiff(None, "summary.sway", summary["sway"], s))
    return diffs
