"""Planar floating-base proxy plant.

Four virtual PD joints drive the base: joints 0-2 set the gait velocity
(surge, sway, yaw rate) in proportion to their position, joint 3 sets stance
height. Roll and pitch are passive spring-dampers excited by pushes, gait
acceleration and the reaction of a replayed arm trajectory. External pushes
feed a "slip" twist that friction bleeds off.

All state arrays carry a leading worker axis so many plants step together;
a single plant is just ``n=1``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import numpy as np

N_JOINTS = 4
OBS_SLICE = 22
FALL_ANGLE = 0.6
FALL_PENALTY = -10.0
H_NOMINAL = 0.7

# nominal numbers for the proxy body
BASE_MASS = 40.0
YAW_INERTIA = 8.0
TILT_INERTIA = 4.0
TILT_STIFFNESS = 80.0
TILT_DAMPING = 8.0
ARM_COUPLING = 0.5  # N m s^2 per rad/s^2 of arm acceleration
ARM_FORCE = 2.0  # N s^2 per rad/s^2, horizontal reaction
GAIT_TILT = 0.05  # fraction of M*h*a fed back as tilt torque
PUSH_TILT = 0.1  # lever fraction of stance height for pushes
BASE_DAMPING = 2.0  # 1/s slip decay at friction scale 1

MAX_ACTION_LAG = 8
MAX_JOINT_LAG = 8
MAX_IMU_LAG = 10


def _j(*vals) -> np.ndarray:
    return np.array(vals, dtype=np.float64)


@dataclass
class PlantParams:
    """Per-worker physical parameters; every array has a leading worker axis."""

    joint_mass: np.ndarray
    gear: np.ndarray
    kp: np.ndarray
    kd: np.ndarray
    q_min: np.ndarray
    q_max: np.ndarray
    qd_max: np.ndarray
    tau_max: np.ndarray
    base_mass: np.ndarray
    base_damping: np.ndarray
    actuation_offset: np.ndarray
    torque_injection: np.ndarray
    action_lag: np.ndarray
    joint_lag: np.ndarray
    imu_lag: np.ndarray
    dt: float = 0.02

    @property
    def n(self) -> int:
        return self.kp.shape[0]

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        for name in ("joint_mass", "kp", "kd", "qd_max", "tau_max", "base_mass", "base_damping"):
            if np.any(getattr(self, name) <= 0):
                raise ValueError(f"{name} must be positive")

    def select(self, idx) -> "PlantParams":
        kw = {f.name: getattr(self, f.name) for f in fields(self)}
        for k, v in kw.items():
            if isinstance(v, np.ndarray):
                kw[k] = v[idx]
        return PlantParams(**kw)

    def to_dict(self) -> dict:
        return {f.name: (getattr(self, f.name).tolist() if isinstance(getattr(self, f.name), np.ndarray) else getattr(self, f.name)) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "PlantParams":
        kw = {}
        for f in fields(cls):
            v = d[f.name]
            if f.name in ("action_lag", "joint_lag", "imu_lag"):
                kw[f.name] = np.array(v, dtype=np.int64)
            elif f.name == "dt":
                kw[f.name] = float(v)
            else:
                kw[f.name] = np.array(v, dtype=np.float64)
        return cls(**kw)


def nominal_params(n: int = 1, dt: float = 0.02) -> PlantParams:
    def rep(v):
        return np.tile(np.asarray(v, dtype=np.float64), (n, 1))

    return PlantParams(
        joint_mass=rep(_j(0.3, 0.3, 0.3, 0.5)),
        gear=rep(_j(0.75, 0.5, 1.0, 0.5)),
        kp=rep(_j(40.0, 40.0, 40.0, 60.0)),
        kd=rep(_j(4.0, 4.0, 4.0, 6.0)),
        q_min=rep(_j(-0.8, -0.8, -0.8, -0.6)),
        q_max=rep(_j(0.8, 0.8, 0.8, 0.2)),
        qd_max=rep(_j(10.0, 10.0, 10.0, 10.0)),
        tau_max=rep(_j(30.0, 30.0, 30.0, 40.0)),
        base_mass=np.full(n, BASE_MASS),
        base_damping=np.full(n, BASE_DAMPING),
        actuation_offset=np.zeros((n, N_JOINTS)),
        torque_injection=np.zeros((n, N_JOINTS)),
        action_lag=np.full(n, 2, dtype=np.int64),
        joint_lag=np.zeros(n, dtype=np.int64),
        imu_lag=np.ones(n, dtype=np.int64),
        dt=dt,
    )


@dataclass
class RandomizationRanges:
    mass_scale: tuple[float, float] = (0.8, 1.2)
    kp_scale: tuple[float, float] = (0.9, 1.1)
    kd_scale: tuple[float, float] = (0.9, 1.1)
    friction: tuple[float, float] = (0.1, 3.0)
    actuation_offset: tuple[float, float] = (-0.05, 0.05)
    torque_injection: tuple[float, float] = (-0.05, 0.05)
    action_lag: tuple[int, int] = (2, 8)
    joint_lag: tuple[int, int] = (0, 8)
    imu_lag: tuple[int, int] = (1, 10)
    payload_kg: tuple[float, float] = (-5.0, 10.0)

    @classmethod
    def degenerate(cls) -> "RandomizationRanges":
        return cls((1, 1), (1, 1), (1, 1), (1, 1), (0, 0), (0, 0), (2, 2), (0, 0), (1, 1), (0, 0))


def sample_domain_rand(
    seed_or_rng, n: int = 1, ranges: RandomizationRanges | None = None, dt: float = 0.02
) -> PlantParams:
    """Randomized parameters drawn from the training ranges.

    Friction maps onto the slip damping scale; torque injection is a constant
    torque expressed as a fraction of each joint's torque limit; the actuation
    offset shifts the position target (rad); torso payload adds base mass.
    """
    r = ranges or RandomizationRanges()
    rng = seed_or_rng if isinstance(seed_or_rng, np.random.Generator) else np.random.default_rng(seed_or_rng)
    p = nominal_params(n, dt)
    mass = rng.uniform(*r.mass_scale, size=(n, 1))
    kp_s = rng.uniform(*r.kp_scale, size=(n, N_JOINTS))
    kd_s = rng.uniform(*r.kd_scale, size=(n, N_JOINTS))
    friction = rng.uniform(*r.friction, size=n)
    offset = rng.uniform(*r.actuation_offset, size=(n, N_JOINTS))
    inj = rng.uniform(*r.torque_injection, size=(n, N_JOINTS))
    a_lag = rng.integers(r.action_lag[0], r.action_lag[1] + 1, size=n)
    j_lag = rng.integers(r.joint_lag[0], r.joint_lag[1] + 1, size=n)
    i_lag = rng.integers(r.imu_lag[0], r.imu_lag[1] + 1, size=n)
    payload = rng.uniform(*r.payload_kg, size=n)
    return replace(
        p,
        joint_mass=p.joint_mass * mass,
        kp=p.kp * kp_s,
        kd=p.kd * kd_s,
        base_mass=(p.base_mass + payload) * mass[:, 0],
        base_damping=p.base_damping * friction,
        actuation_offset=offset,
        torque_injection=inj,
        action_lag=a_lag.astype(np.int64),
        joint_lag=j_lag.astype(np.int64),
        imu_lag=i_lag.astype(np.int64),
    )


# ---------------------------------------------------------------- state


@dataclass
class PlantState:
    pose: np.ndarray  # (n, 6): x, y, psi, h, roll, pitch
    gait: np.ndarray  # (n, 3): body-frame gait twist vx, vy, wz
    slip: np.ndarray  # (n, 3): world-frame slip vx, vy and yaw rate
    tilt_rate: np.ndarray  # (n, 2)
    vh: np.ndarray  # (n,)
    q: np.ndarray  # (n, 4)
    qd: np.ndarray  # (n, 4)
    tau: np.ndarray  # (n, 4) applied
    tau_cmd: np.ndarray  # (n, 4) before clamping
    a_applied: np.ndarray  # (n, 4) delayed action used this step
    action_buf: np.ndarray  # (n, MAX_ACTION_LAG + 1, 4), newest first
    q_buf: np.ndarray  # (n, MAX_JOINT_LAG + 1, 4)
    qd_buf: np.ndarray
    imu_buf: np.ndarray  # (n, MAX_IMU_LAG + 1, 3)
    arm_prev: np.ndarray  # (n, 2, 2) last two arm positions, newest first
    t: np.ndarray  # (n,) step counter
    fallen: np.ndarray  # (n,) bool

    @property
    def n(self) -> int:
        return self.pose.shape[0]

    def copy(self) -> "PlantState":
        return PlantState(**{f.name: getattr(self, f.name).copy() for f in fields(self)})

    def body_velocity(self) -> np.ndarray:
        """Planar body-frame velocity and yaw rate, (n, 3)."""
        psi = self.pose[:, 2]
        c, s = np.cos(psi), np.sin(psi)
        vx = self.gait[:, 0] + c * self.slip[:, 0] + s * self.slip[:, 1]
        vy = self.gait[:, 1] - s * self.slip[:, 0] + c * self.slip[:, 1]
        return np.stack([vx, vy, self.gait[:, 2] + self.slip[:, 2]], axis=1)

    def world_velocity(self) -> np.ndarray:
        psi = self.pose[:, 2]
        c, s = np.cos(psi), np.sin(psi)
        vx = c * self.gait[:, 0] - s * self.gait[:, 1] + self.slip[:, 0]
        vy = s * self.gait[:, 0] + c * self.gait[:, 1] + self.slip[:, 1]
        return np.stack([vx, vy, self.gait[:, 2] + self.slip[:, 2]], axis=1)

    def angular_velocity(self) -> np.ndarray:
        """Body angular velocity (roll rate, pitch rate, yaw rate)."""
        return np.stack([self.tilt_rate[:, 0], self.tilt_rate[:, 1], self.gait[:, 2] + self.slip[:, 2]], axis=1)

    def velocity6(self) -> np.ndarray:
        """(n, 6): body vx, vy, yaw rate, vh, roll rate, pitch rate."""
        return np.concatenate([self.body_velocity(), self.vh[:, None], self.tilt_rate], axis=1)


def initial_state(params: PlantParams, h: float | np.ndarray = H_NOMINAL) -> PlantState:
    n = params.n
    h = np.broadcast_to(np.asarray(h, dtype=np.float64), (n,)).copy()
    q = np.zeros((n, N_JOINTS))
    q[:, 3] = (h - H_NOMINAL) / params.gear[:, 3]
    pose = np.zeros((n, 6))
    pose[:, 3] = h
    return PlantState(
        pose=pose,
        gait=np.zeros((n, 3)),
        slip=np.zeros((n, 3)),
        tilt_rate=np.zeros((n, 2)),
        vh=np.zeros(n),
        q=q,
        qd=np.zeros((n, N_JOINTS)),
        tau=np.zeros((n, N_JOINTS)),
        tau_cmd=np.zeros((n, N_JOINTS)),
        a_applied=q.copy(),
        action_buf=np.repeat(q[:, None, :], MAX_ACTION_LAG + 1, axis=1),
        q_buf=np.repeat(q[:, None, :], MAX_JOINT_LAG + 1, axis=1),
        qd_buf=np.zeros((n, MAX_JOINT_LAG + 1, N_JOINTS)),
        imu_buf=np.zeros((n, MAX_IMU_LAG + 1, 3)),
        arm_prev=np.zeros((n, 2, 2)),
        t=np.zeros(n, dtype=np.int64),
        fallen=np.zeros(n, dtype=bool),
    )


def reset_rows(state: PlantState, params: PlantParams, mask: np.ndarray, h: np.ndarray | float = H_NOMINAL) -> None:
    """Re-initialize the workers selected by ``mask`` in place."""
    if not np.any(mask):
        return
    idx = np.flatnonzero(mask)
    h_arr = np.broadcast_to(np.asarray(h, dtype=np.float64), (state.n,))[idx]
    fresh = initial_state(params.select(idx), h_arr)
    for f in fields(PlantState):
        getattr(state, f.name)[idx] = getattr(fresh, f.name)


# ---------------------------------------------------------------- disturbances and arm replay


@dataclass
class Disturbance:
    """External load for one step: world force (N), yaw torque (N m), velocity kick (m/s)."""

    force: np.ndarray  # (n, 2)
    yaw_torque: np.ndarray  # (n,)
    kick: np.ndarray  # (n, 2)

    @classmethod
    def zero(cls, n: int) -> "Disturbance":
        return cls(np.zeros((n, 2)), np.zeros(n), np.zeros((n, 2)))


@dataclass
class DisturbanceSchedule:
    """Push generator.

    ``train``: velocity impulses up to ``max_kick`` every ``interval`` s with
    +/- ``jitter`` s. ``eval``: horizontal forces up to ``max_force`` and yaw
    torques up to ``max_torque`` held for ``duration`` s, roughly every
    ``interval`` s.
    """

    mode: str = "train"
    max_kick: float = 0.5
    max_force: float = 150.0
    max_torque: float = 30.0
    duration: float = 0.2
    interval: float = 4.0
    jitter: float = 1.0
    scale: float = 1.0
    enabled: bool = True

    @classmethod
    def train(cls, **kw) -> "DisturbanceSchedule":
        return cls(mode="train", interval=4.0, jitter=1.0, **kw)

    @classmethod
    def eval(cls, **kw) -> "DisturbanceSchedule":
        return cls(mode="eval", interval=2.5, jitter=0.5, **kw)


class DisturbanceGenerator:
    def __init__(self, schedule: DisturbanceSchedule, n: int, rng: np.random.Generator, dt: float = 0.02):
        if schedule.mode not in ("train", "eval"):
            raise ValueError(f"unknown disturbance mode {schedule.mode!r}")
        self.s = schedule
        self.n = n
        self.rng = rng
        self.dt = dt
        self.countdown = np.zeros(n, dtype=np.int64)
        self.hold = np.zeros(n, dtype=np.int64)
        self.force = np.zeros((n, 2))
        self.torque = np.zeros(n)
        self.reset(np.ones(n, dtype=bool))

    def _next_gap(self, k: int) -> np.ndarray:
        gap = self.s.interval + self.rng.uniform(-self.s.jitter, self.s.jitter, size=k)
        return np.maximum(1, np.round(gap / self.dt)).astype(np.int64)

    def reset(self, mask: np.ndarray) -> None:
        k = int(np.sum(mask))
        if k:
            self.countdown[mask] = self._next_gap(k)
            self.hold[mask] = 0
            self.force[mask] = 0.0
            self.torque[mask] = 0.0

    def step(self) -> Disturbance:
        d = Disturbance.zero(self.n)
        if not self.s.enabled:
            return d
        self.countdown -= 1
        fire = self.countdown <= 0
        k = int(np.sum(fire))
        if k:
            self.countdown[fire] = self._next_gap(k)
            ang = self.rng.uniform(0.0, 2 * np.pi, size=k)
            if self.s.mode == "train":
                mag = self.rng.uniform(0.0, self.s.max_kick, size=k) * self.s.scale
                d.kick[fire] = np.stack([np.cos(ang), np.sin(ang)], axis=1) * mag[:, None]
            else:
                mag = self.rng.uniform(0.0, self.s.max_force, size=k) * self.s.scale
                self.force[fire] = np.stack([np.cos(ang), np.sin(ang)], axis=1) * mag[:, None]
                self.torque[fire] = self.rng.uniform(-self.s.max_torque, self.s.max_torque, size=k) * self.s.scale
                self.hold[fire] = int(round(self.s.duration / self.dt))
        if self.s.mode == "eval":
            active = self.hold > 0
            d.force[active] = self.force[active]
            d.yaw_torque[active] = self.torque[active]
            self.hold = np.maximum(self.hold - 1, 0)
        return d


def arm_replay_advance(omega, gamma, delta, dt, cap):
    """Time-warped clip phase: ``min(cap, omega + (gamma + delta) * dt)``."""
    return np.minimum(cap, np.asarray(omega) + (np.asarray(gamma) + np.asarray(delta)) * dt)


@dataclass
class ArmReplayConfig:
    cap: tuple[float, float] = (0.8, 2.5)
    rate: tuple[float, float] = (0.8, 1.5)
    jitter: float = 0.25
    noise: float = 0.05
    speed: float = 1.0
    amplitude: float = 1.0
    clip_amplitude: float = 0.6  # rad, peak of sampled waypoints
    waypoints: int = 6
    follow_freq: float = 10.0  # rad/s bandwidth of the simulated arm
    enabled: bool = True

    @classmethod
    def evaluation(cls) -> "ArmReplayConfig":
        return cls(noise=0.02, speed=2.0, amplitude=1.5)


class ArmReplay:
    """Replays randomly sampled two-channel arm clips for a batch of workers.

    Each clip is a set of waypoints over phase [0, cap]; the phase advances by
    the time-warp recurrence, targets get Gaussian noise, and a critically
    damped second-order follower turns targets into arm motion. The plant uses
    the arm's second difference as the inertial reaction.
    """

    def __init__(self, config: ArmReplayConfig, n: int, rng: np.random.Generator, dt: float = 0.02):
        self.c = config
        self.n = n
        self.rng = rng
        self.dt = dt
        self.factor = 1.0  # curriculum amplitude multiplier
        k = config.waypoints
        self.knots = np.zeros((n, k, 2))
        self.cap = np.ones(n)
        self.gamma = np.ones(n)
        self.omega = np.zeros(n)
        self.pos = np.zeros((n, 2))
        self.vel = np.zeros((n, 2))
        self.target = np.zeros((n, 2))
        self.reset(np.ones(n, dtype=bool))

    def reset(self, mask: np.ndarray) -> None:
        k = int(np.sum(mask))
        if not k:
            return
        self.cap[mask] = self.rng.uniform(*self.c.cap, size=k)
        self.gamma[mask] = self.rng.uniform(*self.c.rate, size=k)
        self.knots[mask] = self.rng.uniform(-1.0, 1.0, size=(k, self.c.waypoints, 2)) * self.c.clip_amplitude
        self.knots[mask, 0] = 0.0
        self.omega[mask] = 0.0
        self.pos[mask] = 0.0
        self.vel[mask] = 0.0
        self.target[mask] = 0.0

    def _clip_value(self) -> np.ndarray:
        k = self.c.waypoints
        u = self.omega / self.cap * (k - 1)
        i0 = np.clip(np.floor(u).astype(int), 0, k - 2)
        w = (u - i0)[:, None]
        rows = np.arange(self.n)
        return (1 - w) * self.knots[rows, i0] + w * self.knots[rows, i0 + 1]

    def step(self) -> np.ndarray:
        """Advance one control step; returns arm position (n, 2)."""
        if not self.c.enabled:
            return np.zeros((self.n, 2))
        delta = self.rng.uniform(-self.c.jitter, self.c.jitter, size=self.n)
        self.omega = arm_replay_advance(self.omega, self.gamma, delta, self.dt * self.c.speed, self.cap)
        done = self.omega >= self.cap
        noise = self.rng.normal(0.0, self.c.noise, size=(self.n, 2))
        self.target = self._clip_value() * self.c.amplitude * self.factor + noise * self.factor
        w = self.c.follow_freq
        acc = w * w * (self.target - self.pos) - 2.0 * w * self.vel
        self.vel = self.vel + self.dt * acc
        self.pos = self.pos + self.dt * self.vel
        if np.any(done):
            # start a fresh clip from the current arm pose
            keep_pos, keep_vel = self.pos[done].copy(), self.vel[done].copy()
            self.reset(done)
            self.knots[done, 0] = keep_pos
            self.pos[done], self.vel[done] = keep_pos, keep_vel
        return self.pos.copy()


# ---------------------------------------------------------------- dynamics


def gravity_vector(roll, pitch) -> np.ndarray:
    """World (0, 0, -1) expressed in a body rotated by roll about X then pitch about Y."""
    roll = np.asarray(roll, dtype=np.float64)
    pitch = np.asarray(pitch, dtype=np.float64)
    cr, sr = np.cos(roll), np.sin(roll)
    cp, sp = np.cos(pitch), np.sin(pitch)
    # R = Rx(roll) @ Ry(pitch); g_body = R^T (0, 0, -1)
    return np.stack([sp * cr, -sr * np.ones_like(cp), -cr * cp], axis=-1)


def _shift_in(buf: np.ndarray, new: np.ndarray) -> np.ndarray:
    out = np.empty_like(buf)
    out[:, 1:] = buf[:, :-1]
    out[:, 0] = new
    return out


def mechanical_energy(state: PlantState, params: PlantParams, include_base: bool = True) -> np.ndarray:
    """Kinetic plus spring energy of joints and tilt, optionally plus slip kinetic energy."""
    e = np.sum(0.5 * params.joint_mass * state.qd**2 + 0.5 * params.kp * state.q**2, axis=1)
    e += np.sum(0.5 * TILT_INERTIA * state.tilt_rate**2 + 0.5 * TILT_STIFFNESS * state.pose[:, 4:6] ** 2, axis=1)
    if include_base:
        e += 0.5 * params.base_mass * np.sum(state.slip[:, :2] ** 2, axis=1) + 0.5 * YAW_INERTIA * state.slip[:, 2] ** 2
    return e


def step(
    state: PlantState,
    params: PlantParams,
    action: np.ndarray,
    disturbance: Disturbance | None = None,
    arm: np.ndarray | None = None,
) -> PlantState:
    """Advance every worker by one control period.

    Joint PD terms are integrated implicitly (backward Euler on the linear
    spring-damper), with clamped torque falling back to an explicit update.
    Returns a new state; the input is not modified.
    """
    action = np.asarray(action, dtype=np.float64)
    n, dt = state.n, params.dt
    if action.shape != (n, N_JOINTS):
        raise ValueError(f"action must have shape {(n, N_JOINTS)}, got {action.shape}")
    if not np.all(np.isfinite(action)):
        raise ValueError("non-finite action")
    d = disturbance if disturbance is not None else Disturbance.zero(n)
    s = state.copy()
    rows = np.arange(n)

    action = np.clip(action, params.q_min, params.q_max)
    s.action_buf = _shift_in(state.action_buf, action)
    a_del = s.action_buf[rows, params.action_lag]
    target = a_del + params.actuation_offset
    extra = params.torque_injection * params.tau_max

    m, kp, kd = params.joint_mass, params.kp, params.kd
    q0, qd0 = state.q, state.qd
    qd_imp = (m * qd0 + dt * (kp * (target - q0) + extra)) / (m + dt * kd + dt * dt * kp)
    tau_imp = m * (qd_imp - qd0) / dt
    tau = np.clip(tau_imp, -params.tau_max, params.tau_max)
    clamped = tau != tau_imp
    qd1 = np.where(clamped, qd0 + dt * tau / m, qd_imp)
    q1 = q0 + dt * qd1
    # hard stops
    hit_lo, hit_hi = q1 < params.q_min, q1 > params.q_max
    q1 = np.clip(q1, params.q_min, params.q_max)
    qd1 = np.where(hit_lo & (qd1 < 0) | hit_hi & (qd1 > 0), 0.0, qd1)
    s.q, s.qd = q1, qd1
    s.tau = tau
    s.tau_cmd = kp * (target - q1) - kd * qd1 + extra
    s.a_applied = a_del

    # gait twist follows joint posture; height follows the stance joint
    gear = params.gear
    gait_new = np.stack([gear[:, 0] * q1[:, 0], gear[:, 1] * q1[:, 1], gear[:, 2] * q1[:, 2]], axis=1)
    gait_acc = (gait_new - state.gait) / dt
    s.gait = gait_new
    h_new = H_NOMINAL + gear[:, 3] * q1[:, 3]
    s.vh = (h_new - state.pose[:, 3]) / dt

    # arm reaction
    if arm is None:
        arm = np.zeros((n, 2))
    arm_acc = (arm - 2.0 * state.arm_prev[:, 0] + state.arm_prev[:, 1]) / (dt * dt)
    s.arm_prev = np.stack([arm, state.arm_prev[:, 0]], axis=1)

    # slip twist (world frame): pushes in, friction out
    M = params.base_mass
    psi = state.pose[:, 2]
    c, si = np.cos(psi), np.sin(psi)
    arm_force_body = ARM_FORCE * arm_acc[:, ::-1] * np.array([1.0, -1.0])
    arm_force = np.stack(
        [c * arm_force_body[:, 0] - si * arm_force_body[:, 1], si * arm_force_body[:, 0] + c * arm_force_body[:, 1]], axis=1
    )
    force = d.force + arm_force
    decay = 1.0 / (1.0 + dt * params.base_damping)
    slip = state.slip.copy()
    slip[:, :2] = (slip[:, :2] + dt * force / M[:, None] + d.kick) * decay[:, None]
    slip[:, 2] = (slip[:, 2] + dt * d.yaw_torque / YAW_INERTIA) * decay
    s.slip = slip

    # passive roll/pitch, implicit spring-damper
    h = state.pose[:, 3]
    fb = np.stack([c * d.force[:, 0] + si * d.force[:, 1], -si * d.force[:, 0] + c * d.force[:, 1]], axis=1)
    tau_roll = GAIT_TILT * M * h * gait_acc[:, 1] + PUSH_TILT * h * fb[:, 1] + ARM_COUPLING * arm_acc[:, 1]
    tau_pitch = -GAIT_TILT * M * h * gait_acc[:, 0] - PUSH_TILT * h * fb[:, 0] + ARM_COUPLING * arm_acc[:, 0]
    ext = np.stack([tau_roll, tau_pitch], axis=1)
    ang0, rate0 = state.pose[:, 4:6], state.tilt_rate
    I, k, b = TILT_INERTIA, TILT_STIFFNESS, TILT_DAMPING
    rate1 = (I * rate0 + dt * (-k * ang0 + ext)) / (I + dt * b + dt * dt * k)
    ang1 = ang0 + dt * rate1
    s.tilt_rate = rate1

    # integrate pose with the new twist
    pose = state.pose.copy()
    wv = s.world_velocity()
    pose[:, 0] += dt * wv[:, 0]
    pose[:, 1] += dt * wv[:, 1]
    pose[:, 2] += dt * wv[:, 2]
    pose[:, 3] = h_new
    pose[:, 4:6] = ang1
    s.pose = pose

    s.q_buf = _shift_in(state.q_buf, q1)
    s.qd_buf = _shift_in(state.qd_buf, qd1)
    s.imu_buf = _shift_in(state.imu_buf, s.angular_velocity())
    s.t = state.t + 1
    s.fallen = state.fallen | (np.abs(ang1[:, 0]) > FALL_ANGLE) | (np.abs(ang1[:, 1]) > FALL_ANGLE)
    return s


# ---------------------------------------------------------------- observations


def observation_slice(state: PlantState, params: PlantParams, command: np.ndarray, prev_action: np.ndarray) -> np.ndarray:
    """Current 22-wide slice: command(4), ang vel(3), gravity(3), q(4), qd(4), a_prev(4).

    Joint states and angular velocity are read through their sensor lags.
    """
    rows = np.arange(state.n)
    omega = state.imu_buf[rows, params.imu_lag]
    g = gravity_vector(state.pose[:, 4], state.pose[:, 5])
    q = state.q_buf[rows, params.joint_lag]
    qd = state.qd_buf[rows, params.joint_lag]
    return np.concatenate([command, omega, g, q, qd, prev_action], axis=1)


class ObservationHistory:
    """Newest-first stack of observation slices, zero padded at episode start."""

    def __init__(self, n: int, n_hist: int):
        self.n_hist = n_hist
        self.buf = np.zeros((n, n_hist, OBS_SLICE))

    def reset(self, mask: np.ndarray) -> None:
        self.buf[mask] = 0.0

    def push(self, current: np.ndarray) -> np.ndarray:
        self.buf = _shift_in(self.buf, current)
        return self.buf.reshape(self.buf.shape[0], -1).copy()


def assemble_observation(
    state: PlantState,
    params: PlantParams,
    command: np.ndarray,
    prev_action: np.ndarray,
    history: ObservationHistory,
) -> np.ndarray:
    return history.push(observation_slice(state, params, command, prev_action))


def concat_params(parts: list[PlantParams]) -> PlantParams:
    """Stack single- or multi-worker parameter sets along the worker axis."""
    if not parts:
        raise ValueError("nothing to concatenate")
    dt = parts[0].dt
    if any(p.dt != dt for p in parts):
        raise ValueError("parameter sets disagree on dt")
    kw = {}
    for f in fields(PlantParams):
        if f.name == "dt":
            kw["dt"] = dt
        else:
            kw[f.name] = np.concatenate([getattr(p, f.name) for p in parts], axis=0)
    return PlantParams(**kw)
