from __future__ import annotations

import math
from dataclasses import fields, replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lmokit import plant as pl


def rest(n=1, **kw):
    params = pl.nominal_params(n)
    if kw:
        params = replace(params, **kw)
    return params, pl.initial_state(params)


def run(params, state, actions, disturbances=None):
    states = []
    for i, a in enumerate(actions):
        d = disturbances[i] if disturbances is not None else None
        state = pl.step(state, params, np.atleast_2d(a), d)
        states.append(state)
    return states


def test_params_validation():
    p = pl.nominal_params(2)
    with pytest.raises(ValueError):
        replace(p, dt=0.0)
    with pytest.raises(ValueError):
        replace(p, kp=-p.kp)
    assert p.select([1]).n == 1
    back = pl.PlantParams.from_dict(p.to_dict())
    for f in fields(pl.PlantParams):
        assert np.array_equal(getattr(back, f.name), getattr(p, f.name))


def test_domain_rand_reproducible_and_degenerate():
    a, b = pl.sample_domain_rand(7, 5), pl.sample_domain_rand(7, 5)
    for f in fields(pl.PlantParams):
        assert np.array_equal(getattr(a, f.name), getattr(b, f.name))
    deg = pl.sample_domain_rand(3, 4, pl.RandomizationRanges.degenerate())
    nom = pl.nominal_params(4)
    for f in fields(pl.PlantParams):
        assert np.array_equal(getattr(deg, f.name), getattr(nom, f.name)), f.name


def test_domain_rand_range_audit():
    n = 10_000
    p = pl.sample_domain_rand(0, n)
    nom = pl.nominal_params(n)
    mass = p.joint_mass / nom.joint_mass
    assert np.allclose(mass, mass[:, :1])
    assert mass.min() >= 0.8 and mass.max() <= 1.2
    for name in ("kp", "kd"):
        r = getattr(p, name) / getattr(nom, name)
        assert r.min() >= 0.9 and r.max() <= 1.1
    friction = p.base_damping / nom.base_damping
    assert friction.min() >= 0.1 and friction.max() <= 3.0
    payload = p.base_mass / mass[:, 0] - pl.BASE_MASS
    assert payload.min() >= -5.0 - 1e-9 and payload.max() <= 10.0 + 1e-9
    for name in ("actuation_offset", "torque_injection"):
        v = getattr(p, name)
        assert v.min() >= -0.05 and v.max() <= 0.05
    assert set(np.unique(p.action_lag)) == set(range(2, 9))
    assert set(np.unique(p.joint_lag)) == set(range(0, 9))
    assert set(np.unique(p.imu_lag)) == set(range(1, 11))


def test_zero_action_at_rest_is_equilibrium():
    params, s0 = rest()
    s1 = pl.step(s0, params, np.zeros((1, 4)))
    for f in fields(pl.PlantState):
        if f.name != "t":
            assert np.array_equal(getattr(s1, f.name), getattr(s0, f.name)), f.name
    assert s1.t[0] == 1


def test_step_rejects_bad_actions():
    params, s0 = rest()
    with pytest.raises(ValueError):
        pl.step(s0, params, np.array([[np.nan, 0, 0, 0]]))
    with pytest.raises(ValueError):
        pl.step(s0, params, np.zeros((1, 3)))


def test_constant_surge_converges():
    params, s = rest()
    states = run(params, s, [np.array([0.4, 0, 0, 0])] * 150)
    vx = np.array([st_.body_velocity()[0, 0] for st_ in states])
    target = params.gear[0, 0] * 0.4
    assert vx[-1] == pytest.approx(target, abs=1e-6)
    assert np.all(vx[20:] > 0)
    err = np.abs(vx[30:] - target)
    windows = [err[i : i + 20].max() for i in range(0, 100, 20)]
    assert all(a >= b for a, b in zip(windows, windows[1:]))


@pytest.mark.parametrize("lag", range(0, 9))
def test_action_lag_impulse_timing(lag):
    params, s = rest(action_lag=np.array([lag]))
    actions = [np.zeros(4) for _ in range(20)]
    actions[3] = np.array([0.5, 0, 0, 0])
    states = run(params, s, actions)
    applied = np.array([x.a_applied[0, 0] for x in states])
    torque = np.array([x.tau[0, 0] for x in states])
    assert int(np.argmax(applied)) == 3 + lag
    assert np.count_nonzero(applied) == 1
    assert int(np.flatnonzero(np.abs(torque) > 0)[0]) == 3 + lag


def test_arm_replay_advance_examples():
    assert pl.arm_replay_advance(0.0, 1.0, 0.0, 0.02, 2.0) == pytest.approx(0.02)
    assert pl.arm_replay_advance(2.0, 1.0, 0.1, 0.02, 2.0) == 2.0
    for gamma, cap in ((1.2, 5.0), (1.0, 1.5)):
        w = 0.0
        for _ in range(100):
            w = pl.arm_replay_advance(w, gamma, 0.0, 0.02, cap)
        assert w == pytest.approx(min(cap, 100 * gamma * 0.02), abs=1e-12)


def test_arm_replay_phase_invariants():
    rng = np.random.default_rng(0)
    arm = pl.ArmReplay(pl.ArmReplayConfig(), 8, rng)
    prev = arm.omega.copy()
    for _ in range(400):
        arm.step()
        assert np.all(arm.omega >= 0) and np.all(arm.omega <= arm.cap + 1e-12)
        restarted = arm.omega == 0
        assert np.all((arm.omega >= prev) | restarted)
        prev = arm.omega.copy()
    assert np.all(pl.ArmReplayConfig.evaluation().noise == 0.02)
    assert pl.ArmReplayConfig.evaluation().speed == 2.0 and pl.ArmReplayConfig.evaluation().amplitude == 1.5


def test_gravity_vector_examples():
    assert np.allclose(pl.gravity_vector(0.0, 0.0), [0, 0, -1], atol=0)
    assert np.allclose(pl.gravity_vector(math.pi / 2, 0.0), [0, -1, 0], atol=1e-15)


def _rx(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def _ry(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def test_gravity_matches_rotation_oracle_and_norm():
    rng = np.random.default_rng(1)
    for roll, pitch in rng.uniform(-math.pi, math.pi, size=(1000, 2)):
        g = pl.gravity_vector(roll, pitch)
        want = (_rx(roll) @ _ry(pitch)).T @ np.array([0.0, 0.0, -1.0])
        assert np.max(np.abs(g - want)) < 1e-12
        assert abs(np.linalg.norm(g) - 1.0) < 1e-12


def _joint_energy(state, params):
    return np.sum(0.5 * params.joint_mass * state.qd**2 + 0.5 * params.kp * state.q**2, axis=1)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6))
def test_joint_energy_dissipates_under_zero_action(seed):
    rng = np.random.default_rng(seed)
    params, s = rest(4)
    s.q[:, :3] = rng.uniform(-0.3, 0.3, size=(4, 3))
    s.qd = rng.uniform(-1.0, 1.0, size=(4, 4))
    s.action_buf[:] = 0.0
    e = _joint_energy(s, params)
    for _ in range(100):
        s = pl.step(s, params, np.zeros((4, 4)))
        e_new = _joint_energy(s, params)
        assert np.all(e_new <= e + 1e-12)
        e = e_new


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6))
def test_mechanical_energy_dissipates_with_joints_at_rest(seed):
    rng = np.random.default_rng(seed)
    params, s = rest(4)
    s.pose[:, 4:6] = rng.uniform(-0.3, 0.3, size=(4, 2))
    s.tilt_rate = rng.uniform(-1.0, 1.0, size=(4, 2))
    s.slip = rng.uniform(-0.5, 0.5, size=(4, 3))
    kinetic = lambda x: (  # noqa: E731
        0.5 * params.base_mass * np.sum(x.slip[:, :2] ** 2, axis=1)
        + 0.5 * pl.YAW_INERTIA * x.slip[:, 2] ** 2
        + 0.5 * pl.TILT_INERTIA * np.sum(x.tilt_rate**2, axis=1)
    )
    e = pl.mechanical_energy(s, params)
    k0 = kinetic(s)
    for _ in range(100):
        s = pl.step(s, params, np.zeros((4, 4)))
        e_new = pl.mechanical_energy(s, params)
        assert np.all(e_new <= e + 1e-12)
        e = e_new
    assert np.all(kinetic(s) < 0.05 * k0)


def test_falls_past_threshold():
    params, s = rest()
    s.pose[0, 5] = 0.59
    s.tilt_rate[0, 1] = 3.0
    s = pl.step(s, params, np.zeros((1, 4)))
    assert s.fallen[0]
    params, s = rest()
    s = pl.step(s, params, np.zeros((1, 4)))
    assert not s.fallen[0]


def test_trajectory_determinism():
    def traj():
        rng = np.random.default_rng(5)
        params = pl.sample_domain_rand(rng, 1)
        dist = pl.DisturbanceGenerator(pl.DisturbanceSchedule.eval(), 1, rng)
        arm = pl.ArmReplay(pl.ArmReplayConfig(), 1, rng)
        s = pl.initial_state(params)
        out = []
        for _ in range(200):
            s = pl.step(s, params, rng.uniform(-0.5, 0.5, size=(1, 4)), dist.step(), arm.step())
            out.append(s.pose.copy())
        return np.array(out)

    assert np.array_equal(traj(), traj())


def test_frame_consistency_under_yaw_offset():
    params, s_a = rest()
    s_b = s_a.copy()
    offset = 1.1
    s_b.pose[0, 2] = offset
    rng = np.random.default_rng(2)
    c, si = math.cos(offset), math.sin(offset)
    rot = np.array([[c, -si], [si, c]])
    hist_a, hist_b = pl.ObservationHistory(1, 3), pl.ObservationHistory(1, 3)
    cmd = np.array([[1.0, 0.0, 0.0, 0.7]])
    for t in range(120):
        a = rng.uniform(-0.5, 0.5, size=(1, 4))
        kick = rng.normal(0, 0.1, size=(1, 2)) if t % 30 == 0 else np.zeros((1, 2))
        force = rng.normal(0, 40, size=(1, 2))
        da = pl.Disturbance(force, np.array([5.0]), kick)
        db = pl.Disturbance(force @ rot.T, np.array([5.0]), kick @ rot.T)
        s_a = pl.step(s_a, params, a, da)
        s_b = pl.step(s_b, params, a, db)
        oa = pl.assemble_observation(s_a, params, cmd, a, hist_a)
        ob = pl.assemble_observation(s_b, params, cmd, a, hist_b)
        assert np.allclose(oa, ob, rtol=0, atol=1e-9)
        assert np.allclose(s_a.body_velocity(), s_b.body_velocity(), atol=1e-9)


def test_disturbance_magnitudes_within_bounds():
    rng = np.random.default_rng(0)
    gen = pl.DisturbanceGenerator(pl.DisturbanceSchedule.train(), 50, rng)
    fires = np.zeros(50, dtype=int)
    for _ in range(1000):
        d = gen.step()
        mag = np.linalg.norm(d.kick, axis=1)
        assert np.all(mag <= 0.5 + 1e-12)
        fires += mag > 0
    # 20 s at one push per 4 +/- 1 s
    assert fires.min() >= 4 and fires.max() <= 7
    gen = pl.DisturbanceGenerator(pl.DisturbanceSchedule.eval(), 50, rng)
    held = np.zeros(50, dtype=int)
    for _ in range(1000):
        d = gen.step()
        assert np.all(np.linalg.norm(d.force, axis=1) <= 150 + 1e-9)
        assert np.all(np.abs(d.yaw_torque) <= 30)
        held += np.linalg.norm(d.force, axis=1) > 0
    # each push lasts 0.2 s = 10 steps, 6 to 10 pushes in 20 s
    assert held.min() >= 60 and held.max() <= 100
    with pytest.raises(ValueError):
        pl.DisturbanceGenerator(pl.DisturbanceSchedule(mode="storm"), 1, rng)


def test_observation_layout_and_padding():
    params, s = rest()
    hist = pl.ObservationHistory(1, 5)
    cmd = np.array([[1.0, -1.0, 0.0, 0.6]])
    prev = np.array([[0.1, 0.2, 0.3, 0.4]])
    obs = pl.assemble_observation(s, params, cmd, prev, hist)
    assert obs.shape == (1, 5 * pl.OBS_SLICE)
    cur = obs[0, : pl.OBS_SLICE]
    assert np.array_equal(cur[:4], cmd[0])
    assert np.array_equal(cur[7:10], [0, 0, -1])
    assert np.array_equal(cur[18:22], prev[0])
    assert np.all(obs[0, pl.OBS_SLICE :] == 0)
    single = pl.ObservationHistory(1, 1)
    assert np.array_equal(pl.assemble_observation(s, params, cmd, prev, single), pl.observation_slice(s, params, cmd, prev))


def test_joint_lag_bookkeeping():
    params, s = rest(joint_lag=np.array([3]))
    qs = [s.q.copy()]
    for t in range(12):
        s = pl.step(s, params, np.full((1, 4), 0.1 * (t % 3)))
        qs.append(s.q.copy())
        obs = pl.observation_slice(s, params, np.zeros((1, 4)), np.zeros((1, 4)))
        if t >= 3:
            assert np.array_equal(obs[0, 10:14], qs[-4][0])


def test_imu_lag_bookkeeping():
    params, s = rest(imu_lag=np.array([4]))
    omegas = [s.angular_velocity().copy()]
    rng = np.random.default_rng(0)
    for _ in range(12):
        s = pl.step(s, params, rng.uniform(-0.5, 0.5, size=(1, 4)))
        omegas.append(s.angular_velocity().copy())
    obs = pl.observation_slice(s, params, np.zeros((1, 4)), np.zeros((1, 4)))
    assert np.array_equal(obs[0, 4:7], omegas[-5][0])


def test_reset_rows_and_concat():
    params = pl.nominal_params(3)
    s = pl.initial_state(params)
    for _ in range(10):
        s = pl.step(s, params, np.full((3, 4), 0.3))
    pl.reset_rows(s, params, np.array([False, True, False]), h=0.5)
    assert s.pose[1, 3] == pytest.approx(0.5) and s.t[1] == 0
    assert s.t[0] == 10
    both = pl.concat_params([pl.nominal_params(1), pl.nominal_params(2)])
    assert both.n == 3
    with pytest.raises(ValueError):
        pl.concat_params([])
