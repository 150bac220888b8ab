from __future__ import annotations

from collections import Counter
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lmokit import synthworld as sw
from lmokit.synthworld import Primitive

seeds = st.integers(0, 2**31 - 2)


def test_gen_scene_deterministic_and_seed_dependent():
    assert sw.gen_scene(0).same_as(sw.gen_scene(0))
    assert sw.grid_hash(sw.gen_scene(0)) != sw.grid_hash(sw.gen_scene(1))


@settings(max_examples=50, deadline=None)
@given(seeds)
def test_scene_invariants(seed):
    s = sw.gen_scene(seed)
    assert s.grid[s.row, s.col] == 0
    assert np.mean(s.grid > 0) >= 0.2
    assert 0 <= s.arm_ext <= 3 and s.crouch in (0, 1)


def test_scene_rejects_out_of_range():
    s = sw.gen_scene(0)
    with pytest.raises(ValueError):
        replace(s, row=-1)
    with pytest.raises(ValueError):
        replace(s, arm_ext=4)


def test_idle_is_noop():
    s = sw.gen_scene(3)
    s2, blocked = sw.step_primitive(s, Primitive.IDLE)
    assert s2.same_as(s) and not blocked


@settings(max_examples=50, deadline=None)
@given(seeds, st.sampled_from(["turn-left", "turn-right"]))
def test_four_turns_close(seed, turn):
    s = sw.gen_scene(seed)
    t = s
    for _ in range(4):
        t, _ = sw.step_primitive(t, turn)
    assert t.same_as(s)


INVERSES = [
    ("advance", "retreat"),
    ("retreat", "advance"),
    ("step-left", "step-right"),
    ("step-right", "step-left"),
    ("turn-left", "turn-right"),
    ("squat", "rise"),
    ("arm-extend", "arm-retract"),
    ("gripper-open", "gripper-close"),
]


@settings(max_examples=100, deadline=None)
@given(seeds, st.sampled_from(INVERSES))
def test_inverse_pairs_restore_scene(seed, pair):
    a, b = pair
    s = sw.gen_scene(seed)
    if a == "rise":
        s = replace(s, crouch=1)
    t, blocked = sw.step_primitive(s, a)
    if blocked:
        assert t.same_as(s)
        return
    u, blocked_back = sw.step_primitive(t, b)
    assert not blocked_back
    assert u.same_as(s)


def test_blocked_advance_flagged():
    s = sw.gen_scene(0)
    grid = s.grid.copy()
    fr, fc = {0: (-1, 0), 1: (0, 1), 2: (1, 0), 3: (0, -1)}[s.heading]
    r, c = s.row + fr, s.col + fc
    if 0 <= r < grid.shape[0] and 0 <= c < grid.shape[1]:
        grid[r, c] = 1
    s = replace(s, grid=grid)
    t, blocked = sw.step_primitive(s, "advance")
    assert blocked and t.same_as(s)


@settings(max_examples=60, deadline=None)
@given(seeds, st.integers(0, 3))
def test_advance_shifts_loco_view_by_one_cell(seed, heading):
    s = replace(sw.gen_scene(seed), heading=heading, crouch=0)
    t, blocked = sw.step_primitive(s, "advance")
    if blocked:
        return
    a, b = sw.render(s), sw.render(t)
    cell = sw.RES // sw.view_cells(s)
    # heading always points up after rotation, so moving forward slides content down one cell
    rows, cols = sw.arm_region()
    keep = np.ones((sw.RES, sw.RES), dtype=bool)
    keep[rows, cols] = False
    shifted_ok = keep[cell:] & keep[:-cell]
    assert np.array_equal(b[cell:][shifted_ok], a[:-cell][shifted_ok])


@settings(max_examples=40, deadline=None)
@given(seeds, st.sampled_from(["loco", "manip"]))
def test_arm_changes_are_local(seed, regime):
    s = replace(sw.gen_scene(seed), arm_ext=1)
    rows, cols = sw.arm_region()
    outside = np.ones((sw.RES, sw.RES), dtype=bool)
    outside[rows, cols] = False
    for p in ("arm-extend", "arm-retract", "gripper-open", "gripper-close"):
        t, _ = sw.step_primitive(s, p)
        a, b = sw.render(s, regime), sw.render(t, regime)
        assert np.array_equal(a[outside], b[outside])


@settings(max_examples=30, deadline=None)
@given(seeds, st.sampled_from(["loco", "manip"]))
def test_render_pure_and_bounded(seed, regime):
    s = sw.gen_scene(seed)
    a, b = sw.render(s, regime), sw.render(s, regime)
    assert a.shape == (32, 32)
    assert np.array_equal(a, b)
    assert a.min() >= 0.0 and a.max() <= 1.0


def test_render_unknown_regime():
    with pytest.raises(ValueError):
        sw.render(sw.gen_scene(0), "aerial")


def test_squat_widens_view():
    s = replace(sw.gen_scene(5), crouch=0)
    t, _ = sw.step_primitive(s, "squat")
    assert sw.view_cells(t) > sw.view_cells(s)
    assert not np.array_equal(sw.render(s), sw.render(t))


def test_primitive_regimes():
    assert len(sw.LOCO_PRIMITIVES) == 9 and len(sw.MANIP_PRIMITIVES) == 5
    assert sw.regime_of(Primitive.IDLE) == {"loco", "manip"}
    assert sw.regime_of(Primitive.SQUAT) == {"loco"}
    assert sw.regime_of(Primitive.GRIPPER_OPEN) == {"manip"}


def test_regime_mix_extremes_and_split():
    assert {p.regime for p in sw.gen_dataset(40, 0.0, seed=1)} == {"manip"}
    counts = Counter(p.regime for p in sw.gen_dataset(100, 0.5, seed=1))
    assert counts == {"loco": 50, "manip": 50}


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 60), st.floats(0, 1), st.integers(0, 1000))
def test_regime_proportions_within_one(n, mix, seed):
    pairs = sw.gen_dataset(n, mix, gap=1, seed=seed)
    n_loco = sum(p.regime == "loco" for p in pairs)
    assert len(pairs) == n
    assert abs(n_loco - n * mix) <= 1


def test_gen_dataset_errors():
    with pytest.raises(ValueError):
        sw.gen_dataset(0)
    with pytest.raises(ValueError):
        sw.gen_dataset(10, 1.5)


@pytest.fixture(scope="module")
def big_dataset():
    return sw.gen_dataset(10_000, 0.5, 5, seed=0)


def test_label_histogram_uniform(big_dataset):
    for regime, prims in (("loco", sw.LOCO_PRIMITIVES), ("manip", sw.MANIP_PRIMITIVES)):
        counts = Counter(p.label for p in big_dataset if p.regime == regime)
        expected = sum(counts.values()) / len(prims)
        assert set(counts) == set(prims)
        assert all(abs(c - expected) <= 0.1 * expected for c in counts.values())


def test_regime_separation(big_dataset):
    sample = big_dataset[:1000]
    diff = {"loco": [], "manip": []}
    for p in sample:
        diff[p.regime].append(np.mean(np.abs(p.after - p.before)))
    assert np.mean(diff["loco"]) >= 2.0 * np.mean(diff["manip"])


def test_pair_metadata_consistent(big_dataset):
    for p in big_dataset[:50]:
        assert p.gap == 5
        assert p.regime in sw.regime_of(p.label)


def test_make_pair_matches_step_oracle():
    pair = sw.make_pair(11, Primitive.TURN_LEFT, "loco", 3)
    s = sw.gen_scene(11)
    rng = np.random.default_rng([11, 0xC40C])
    s = replace(s, crouch=int(rng.integers(2)))
    t = s
    for _ in range(3):
        t, _ = sw.step_primitive(t, "turn-left")
    assert np.array_equal(pair.before, sw.render(s))
    assert np.array_equal(pair.after, sw.render(t))


def test_dataset_deterministic_and_roundtrip(tmp_path):
    a = sw.gen_dataset(30, 0.4, 3, seed=9)
    b = sw.gen_dataset(30, 0.4, 3, seed=9)
    assert all(np.array_equal(x.before, y.before) and x.label == y.label for x, y in zip(a, b))
    path = tmp_path / "d.jsonl"
    sw.save_dataset(a, path)
    back = sw.load_dataset(path)
    assert len(back) == 30
    for x, y in zip(a, back):
        assert np.array_equal(x.before, y.before) and np.array_equal(x.after, y.after)
        assert (x.gap, x.regime, x.label) == (y.gap, y.regime, y.label)
    before, after = sw.stack_pairs(back)
    assert before.shape == (30, 1024) and after.shape == (30, 1024)
