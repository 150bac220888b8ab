from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lmokit import plant as pl
from lmokit import rewards as rw

# hard-coded copy of the reference reward table (stage I, stage II)
REFERENCE_TABLE = {
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
KERNELS = ("forward_intent", "lateral_intent", "yaw_intent", "height")


def test_embedded_table_is_exact():
    assert rw.DEFAULT_WEIGHTS == REFERENCE_TABLE
    assert not set(rw.DEFAULT_WEIGHTS) & rw.EXCLUDED_TERMS


def test_weights_lookup_and_errors():
    w = rw.RewardWeights()
    assert w.weight("forward_intent", 1) == 1.5 and w.weight("forward_intent", 2) == 1.8
    assert w.weight("dir_deviation", 2) == -rw.DEFAULT_W_DIR
    assert w.weight("fall", 1) == -10.0
    with pytest.raises(rw.UnknownTermError):
        w.weight("feet_air_time", 1)
    with pytest.raises(rw.UnknownTermError):
        w.weight("banana", 1)
    with pytest.raises(ValueError):
        w.weight("height", 3)
    with pytest.raises(rw.UnknownTermError):
        w.with_overrides({"foot_slip": 1.0})


def test_overrides_and_disable():
    w = rw.RewardWeights().with_overrides({"height": 3.0, "stand_still": [-0.2, -0.4], "w_dir": 5.0})
    assert w.weight("height", 1) == 3.0 and w.weight("stand_still", 2) == -0.4
    assert w.weight("dir_deviation", 2) == -5.0
    off = w.disable("dir_deviation", "stand_still")
    assert off.weight("dir_deviation", 2) == 0.0 and off.weight("stand_still", 1) == 0.0
    eff = off.effective(2)
    assert eff["stand_still"] == 0.0 and eff["height"] == 3.0 and "fall" in eff
    assert rw.RewardWeights().to_dict()["table"]["height"] == [2.0, 2.0]


def test_intent_reward_examples():
    assert rw.intent_reward(0.5, 1, 0.5) == 1.0
    assert rw.intent_reward(0.0, 1, 0.5) == pytest.approx(math.exp(-1), abs=1e-15)
    assert rw.intent_reward(0.0, 0, 0.7) == 1.0
    with pytest.raises(ValueError):
        rw.intent_reward(0.0, 1, -0.1)


def test_height_reward_examples():
    assert rw.height_reward(0.6, 0.6) == 1.0
    assert rw.height_reward(1.1, 0.6) == pytest.approx(math.exp(-1), abs=1e-15)


@given(st.floats(-2, 2), st.floats(0, 1))
def test_height_reward_symmetric(h_ref, d):
    assert rw.height_reward(h_ref + d, h_ref) == pytest.approx(rw.height_reward(h_ref - d, h_ref), rel=1e-12)


def test_wrap_examples():
    assert rw.wrap(0.0) == 0.0
    assert rw.wrap(math.pi) == math.pi
    assert rw.wrap(-math.pi) == math.pi
    assert rw.wrap(-6.0) == pytest.approx(-6.0 + 2 * math.pi, abs=1e-12)
    assert rw.wrap(-6.0) == pytest.approx(0.283185, abs=1e-6)
    with pytest.raises(ValueError):
        rw.wrap(float("nan"))


@given(st.floats(-100, 100))
def test_wrap_range_and_congruence(a):
    w = rw.wrap(a)
    assert -math.pi < w <= math.pi
    k = (a - w) / (2 * math.pi)
    assert abs(k - round(k)) < 1e-9


def test_dir_deviation_examples():
    assert rw.dir_deviation(1.3, 1.3) == 0.0
    assert rw.dir_deviation(3.0, -3.0) == pytest.approx(2 * math.pi - 6.0, abs=1e-12)


@given(st.floats(-10, 10), st.floats(-10, 10), st.floats(-10, 10))
def test_dir_deviation_properties(a, b, offset):
    d = rw.dir_deviation(a, b)
    assert 0.0 <= d <= math.pi
    assert d == pytest.approx(rw.dir_deviation(b, a), abs=1e-9)
    assert d == pytest.approx(rw.dir_deviation(a + offset, b + offset), abs=1e-9)
    assert d == pytest.approx(rw.dir_deviation(a + 2 * math.pi, b + 2 * math.pi), abs=1e-9)


def rest_context(n=1):
    params = pl.nominal_params(n)
    z3, z4 = np.zeros((n, 3)), np.zeros((n, 4))
    return rw.RewardContext(
        v_body=z3.copy(),
        v_h=np.zeros(n),
        tilt_rate=np.zeros((n, 2)),
        gravity=np.tile([0.0, 0.0, -1.0], (n, 1)),
        h=np.full(n, 0.7),
        q=z4.copy(),
        qd=z4.copy(),
        qd_prev=z4.copy(),
        tau=z4.copy(),
        tau_cmd=z4.copy(),
        a=z4.copy(),
        a_prev=z4.copy(),
        a_prev2=z4.copy(),
        a_delayed=z4.copy(),
        v_ref=z3.copy(),
        h_ref=np.full(n, 0.7),
        flags=z3.copy(),
        kp=params.kp,
        q_min=params.q_min,
        q_max=params.q_max,
        qd_max=params.qd_max,
        tau_max=params.tau_max,
    )


@pytest.mark.parametrize("stage", [1, 2])
def test_perfect_rest_context(stage):
    bd = rw.step_reward(rest_context(), stage=stage)
    for k, v in bd.terms.items():
        assert v[0] == (1.0 if k in KERNELS else 0.0), k
    positive = sum(REFERENCE_TABLE[k][stage - 1] for k in KERNELS)
    assert bd.total[0] == pytest.approx(positive, abs=1e-15)
    assert bd.stage == stage


def test_stand_still_substitution():
    ctx = rest_context()
    ctx.a = np.array([[0.1, 0.0, 0.0, 0.0]])
    assert rw.term_values(ctx)["stand_still"][0] == pytest.approx(0.01, abs=1e-15)
    ctx.flags = np.array([[0.0, 1.0, 0.0]])
    assert rw.term_values(ctx)["stand_still"][0] == 0.0


def random_context(rng, n=3):
    ctx = rest_context(n)
    for name in ("v_body", "v_ref", "q", "qd", "qd_prev", "a", "a_prev", "a_prev2", "a_delayed"):
        setattr(ctx, name, rng.uniform(-1.5, 1.5, size=getattr(ctx, name).shape))
    ctx.v_h = rng.normal(size=n)
    ctx.tilt_rate = rng.normal(size=(n, 2))
    ctx.gravity = pl.gravity_vector(rng.uniform(-0.5, 0.5, n), rng.uniform(-0.5, 0.5, n))
    ctx.h = rng.uniform(0.4, 0.8, n)
    ctx.h_ref = rng.uniform(0.4, 0.8, n)
    ctx.tau = rng.uniform(-40, 40, size=(n, 4))
    ctx.tau_cmd = rng.uniform(-60, 60, size=(n, 4))
    ctx.qd = rng.uniform(-12, 12, size=(n, 4))
    ctx.flags = rng.integers(-1, 2, size=(n, 3)).astype(float)
    ctx.flags[0] = 0.0
    ctx.dir_dev = rng.uniform(0, math.pi, n)
    ctx.fallen = rng.random(n) < 0.5
    return ctx


def spreadsheet_terms(ctx, i):
    """Term-by-term scalar recomputation for worker ``i``."""
    t = {}
    names = ("forward_intent", "lateral_intent", "yaw_intent")
    for k, name in enumerate(names):
        t[name] = math.exp(-4 * (ctx.v_body[i, k] - ctx.v_ref[i, k]) ** 2)
    t["height"] = math.exp(-4 * (ctx.h[i] - ctx.h_ref[i]) ** 2)
    t["vertical_velocity"] = ctx.v_h[i] ** 2
    t["ang_vel_xy"] = ctx.tilt_rate[i, 0] ** 2 + ctx.tilt_rate[i, 1] ** 2
    t["roll_pitch"] = ctx.gravity[i, 0] ** 2 + ctx.gravity[i, 1] ** 2
    dof_acc = dof_pos = dof_vel = vel_lim = tq_lim = rate = smooth = power = usage = track = 0.0
    for j in range(4):
        dof_acc += ((ctx.qd[i, j] - ctx.qd_prev[i, j]) / ctx.dt) ** 2
        lo, hi = ctx.q_min[i, j], ctx.q_max[i, j]
        mid, half = (lo + hi) / 2, (hi - lo) / 2 * 0.9
        dof_pos += max(0.0, abs(ctx.q[i, j] - mid) - half)
        dof_vel += ctx.qd[i, j] ** 2
        vel_lim += max(0.0, abs(ctx.qd[i, j]) - 0.9 * ctx.qd_max[i, j])
        tq_lim += max(0.0, abs(ctx.tau_cmd[i, j]) - 0.9 * ctx.tau_max[i, j])
        rate += (ctx.a[i, j] - ctx.a_prev[i, j]) ** 2
        smooth += (ctx.a[i, j] - 2 * ctx.a_prev[i, j] + ctx.a_prev2[i, j]) ** 2
        power += abs(ctx.tau[i, j] * ctx.qd[i, j])
        usage += ctx.tau[i, j] ** 2 / ctx.kp[i, j]
        track += (ctx.q[i, j] - ctx.a_delayed[i, j]) ** 2
    t.update(
        dof_acc=dof_acc,
        dof_pos_limit=dof_pos,
        dof_vel=dof_vel,
        dof_vel_limit=vel_lim,
        torque_limit=tq_lim,
        action_rate=rate,
        smoothness=smooth,
        joint_power=power,
        torque_usage=usage,
        joint_tracking=track,
    )
    still = all(ctx.flags[i, k] == 0 for k in range(3))
    t["stand_still"] = sum(ctx.a[i, j] ** 2 for j in range(3)) if still else 0.0
    t["dir_deviation"] = ctx.dir_dev[i]
    t["fall"] = float(ctx.fallen[i])
    return t


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from([1, 2]))
def test_breakdown_matches_spreadsheet(seed, stage):
    rng = np.random.default_rng(seed)
    ctx = random_context(rng)
    bd = rw.step_reward(ctx, rw.RewardWeights(w_dir=2.5), stage)
    for i in range(ctx.n):
        want = spreadsheet_terms(ctx, i)
        assert set(want) == set(bd.terms)
        for k, v in want.items():
            assert bd.terms[k][i] == pytest.approx(v, rel=1e-10, abs=1e-12), k
        weights = {k: REFERENCE_TABLE[k][stage - 1] for k in REFERENCE_TABLE}
        weights["dir_deviation"], weights["fall"] = -2.5, -10.0
        total = math.fsum(weights[k] * want[k] for k in want)
        assert abs(bd.total[i] - total) <= 1e-10 * max(1.0, abs(total))
        assert abs(bd.total[i] - rw.recompute_total(bd.row(i), bd.weights)) <= 1e-12 * max(1.0, abs(total))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**6))
def test_term_ranges(seed):
    bd = rw.step_reward(random_context(np.random.default_rng(seed)))
    for k, v in bd.terms.items():
        if k in KERNELS:
            assert np.all((v > 0) & (v <= 1))
        else:
            assert np.all(v >= 0)


def test_optional_terms_only_when_given():
    ctx = rest_context()
    assert "dir_deviation" not in rw.step_reward(ctx).terms and "fall" not in rw.step_reward(ctx).terms


def test_context_from_plant_at_rest():
    params = pl.nominal_params(2)
    s = pl.initial_state(params)
    s1 = pl.step(s, params, np.zeros((2, 4)))
    ctx = rw.context_from_plant(
        s1, s, params, np.zeros((2, 4)), np.zeros((2, 4)), np.zeros((2, 4)), np.zeros((2, 3)), np.full(2, 0.7), np.zeros((2, 3))
    )
    bd = rw.step_reward(ctx, stage=1)
    assert np.allclose(bd.total, 1.5 + 1.0 + 2.0 + 2.0)
    assert np.array_equal(bd.terms["fall"], [0.0, 0.0])
