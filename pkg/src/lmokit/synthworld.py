"""Synthetic egocentric frame pairs with two visual regimes.

Locomotion frames are an egocentric window that moves and turns with the
agent; manipulation frames look at a fixed workbench patch where only the arm
changes. Everything is a pure function of its integer seed.
"""

from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

GRID = 24
RES = 32
# intensity of cell ids 0..4; void is outside the grid, arm/gripper drawn on top
CELL_INTENSITY = np.array([0.2, 0.4, 0.55, 0.7, 0.85])
VOID = 0.05
ARM = 0.98
GRIPPER = 0.92
# top-left cell of the 8x8 workbench patch seen in the manipulation regime
BENCH = (8, 8)
HEADINGS = "NESW"
_FORWARD = {0: (-1, 0), 1: (0, 1), 2: (1, 0), 3: (0, -1)}  # (drow, dcol)


class Primitive(str, enum.Enum):
    ADVANCE = "advance"
    RETREAT = "retreat"
    STEP_LEFT = "step-left"
    STEP_RIGHT = "step-right"
    TURN_LEFT = "turn-left"
    TURN_RIGHT = "turn-right"
    SQUAT = "squat"
    RISE = "rise"
    ARM_EXTEND = "arm-extend"
    ARM_RETRACT = "arm-retract"
    GRIPPER_OPEN = "gripper-open"
    GRIPPER_CLOSE = "gripper-close"
    IDLE = "idle"


LOCO_PRIMITIVES = tuple(Primitive)[:8] + (Primitive.IDLE,)
MANIP_PRIMITIVES = tuple(Primitive)[8:12] + (Primitive.IDLE,)
ALL_PRIMITIVES = tuple(Primitive)


def regime_of(p: Primitive) -> set[str]:
    if p is Primitive.IDLE:
        return {"loco", "manip"}
    return {"loco"} if p in LOCO_PRIMITIVES else {"manip"}


@dataclass(frozen=True)
class Scene:
    grid: np.ndarray = field(repr=False)
    col: int
    row: int
    heading: int  # index into "NESW"
    crouch: int  # 0 standing, 1 crouched
    arm_ext: int  # 0..3
    gripper_closed: bool

    def __post_init__(self):
        h, w = self.grid.shape
        if not (0 <= self.row < h and 0 <= self.col < w):
            raise ValueError(f"agent ({self.row},{self.col}) outside {h}x{w} grid")
        if not (0 <= self.arm_ext <= 3 and self.crouch in (0, 1) and 0 <= self.heading < 4):
            raise ValueError("arm/crouch/heading out of range")

    def same_as(self, other: "Scene") -> bool:
        return (
            np.array_equal(self.grid, other.grid)
            and (self.col, self.row, self.heading, self.crouch, self.arm_ext, self.gripper_closed)
            == (other.col, other.row, other.heading, other.crouch, other.arm_ext, other.gripper_closed)
        )


def gen_scene(seed: int, size: int = GRID) -> Scene:
    """Random block layout (>=20% occupied) with the agent on a free cell."""
    rng = np.random.default_rng([seed, 0x5CE4E])
    grid = np.zeros((size, size), dtype=np.int64)
    target = rng.uniform(0.2, 0.35)
    while np.mean(grid > 0) < target:
        h, w = rng.integers(1, 4, size=2)
        r, c = rng.integers(0, size - h + 1), rng.integers(0, size - w + 1)
        grid[r : r + h, c : c + w] = rng.integers(1, 5)
    free = np.argwhere(grid == 0)
    row, col = free[rng.integers(len(free))]
    return Scene(
        grid=grid,
        col=int(col),
        row=int(row),
        heading=int(rng.integers(4)),
        crouch=0,
        arm_ext=int(rng.integers(4)),
        gripper_closed=bool(rng.integers(2)),
    )


def _move(scene: Scene, drow: int, dcol: int) -> tuple[Scene, bool]:
    r, c = scene.row + drow, scene.col + dcol
    h, w = scene.grid.shape
    if not (0 <= r < h and 0 <= c < w) or scene.grid[r, c] != 0:
        return scene, True
    return replace(scene, row=r, col=c), False


def step_primitive(scene: Scene, primitive: Primitive | str) -> tuple[Scene, bool]:
    """Apply one primitive unit. Returns ``(scene', blocked)``."""
    p = Primitive(primitive)
    fr, fc = _FORWARD[scene.heading]
    # right of heading is the forward vector rotated clockwise
    rr, rc = fc, -fr
    if p is Primitive.ADVANCE:
        return _move(scene, fr, fc)
    if p is Primitive.RETREAT:
        return _move(scene, -fr, -fc)
    if p is Primitive.STEP_RIGHT:
        return _move(scene, rr, rc)
    if p is Primitive.STEP_LEFT:
        return _move(scene, -rr, -rc)
    if p is Primitive.TURN_LEFT:
        return replace(scene, heading=(scene.heading - 1) % 4), False
    if p is Primitive.TURN_RIGHT:
        return replace(scene, heading=(scene.heading + 1) % 4), False
    if p is Primitive.SQUAT:
        return (scene, True) if scene.crouch == 1 else (replace(scene, crouch=1), False)
    if p is Primitive.RISE:
        return (scene, True) if scene.crouch == 0 else (replace(scene, crouch=0), False)
    if p is Primitive.ARM_EXTEND:
        return (scene, True) if scene.arm_ext == 3 else (replace(scene, arm_ext=scene.arm_ext + 1), False)
    if p is Primitive.ARM_RETRACT:
        return (scene, True) if scene.arm_ext == 0 else (replace(scene, arm_ext=scene.arm_ext - 1), False)
    if p is Primitive.GRIPPER_OPEN:
        return (scene, True) if not scene.gripper_closed else (replace(scene, gripper_closed=False), False)
    if p is Primitive.GRIPPER_CLOSE:
        return (scene, True) if scene.gripper_closed else (replace(scene, gripper_closed=True), False)
    return scene, False


# ---------------------------------------------------------------- rendering


def arm_region() -> tuple[slice, slice]:
    """Bounding box (rows, cols) that contains every possible arm drawing."""
    return slice(RES - arm_length(3) - 3, RES), slice(13, 19)


def arm_length(ext: int) -> int:
    return 4 + 6 * ext


def _draw_arm(img: np.ndarray, ext: int, closed: bool) -> None:
    length = arm_length(ext)
    top = RES - length
    img[top:RES, 15:17] = ARM
    if closed:
        img[top - 2 : top, 15:17] = GRIPPER
    else:
        img[top - 3 : top, 13:14] = GRIPPER
        img[top - 3 : top, 18:19] = GRIPPER
        img[top - 1 : top, 14:18] = GRIPPER


def _cells_to_pixels(cells: np.ndarray) -> np.ndarray:
    n = cells.shape[0]
    scale = RES // n
    vals = np.where(cells < 0, VOID, CELL_INTENSITY[np.clip(cells, 0, 4)])
    return np.kron(vals, np.ones((scale, scale)))


def _window(scene: Scene, top: int, left: int, n: int) -> np.ndarray:
    h, w = scene.grid.shape
    out = np.full((n, n), -1, dtype=np.int64)
    r0, c0 = max(top, 0), max(left, 0)
    r1, c1 = min(top + n, h), min(left + n, w)
    if r0 < r1 and c0 < c1:
        out[r0 - top : r1 - top, c0 - left : c1 - left] = scene.grid[r0:r1, c0:c1]
    return out


def view_cells(scene: Scene) -> int:
    return 8 if scene.crouch == 0 else 16


def render(scene: Scene, regime: str = "loco") -> np.ndarray:
    """32x32 raster in [0, 1].

    ``loco``: window of 8x8 cells (16x16 when crouched, i.e. a wider view)
    centred on the agent and rotated so the heading points up.
    ``manip``: fixed 8x8-cell workbench patch. The arm is drawn in both.
    """
    if regime == "loco":
        n = view_cells(scene)
        cells = _window(scene, scene.row - n // 2, scene.col - n // 2, n)
        # heading N needs no rotation; E means the world is turned left by 90 deg
        cells = np.rot90(cells, k=scene.heading)
    elif regime == "manip":
        cells = _window(scene, BENCH[0], BENCH[1], 8)
    else:
        raise ValueError(f"unknown regime {regime!r}")
    img = _cells_to_pixels(cells)
    _draw_arm(img, scene.arm_ext, scene.gripper_closed)
    return img


# ---------------------------------------------------------------- datasets


@dataclass
class FramePair:
    before: np.ndarray
    after: np.ndarray
    gap: int
    regime: str
    label: Primitive

    def to_json(self) -> str:
        return json.dumps(
            {
                "before": self.before.reshape(-1).tolist(),
                "after": self.after.reshape(-1).tolist(),
                "gap": self.gap,
                "regime": self.regime,
                "label": self.label.value,
            }
        )

    @classmethod
    def from_json(cls, line: str) -> "FramePair":
        obj = json.loads(line)
        return cls(
            before=np.array(obj["before"], dtype=np.float64).reshape(RES, RES),
            after=np.array(obj["after"], dtype=np.float64).reshape(RES, RES),
            gap=int(obj["gap"]),
            regime=obj["regime"],
            label=Primitive(obj["label"]),
        )


def _prepare(scene: Scene, label: Primitive) -> Scene:
    # make the labelled primitive applicable where that is a pure state choice
    if label is Primitive.SQUAT:
        return replace(scene, crouch=0)
    if label is Primitive.RISE:
        return replace(scene, crouch=1)
    if label is Primitive.ARM_EXTEND and scene.arm_ext == 3:
        return replace(scene, arm_ext=scene.arm_ext % 3)
    if label is Primitive.ARM_RETRACT and scene.arm_ext == 0:
        return replace(scene, arm_ext=1 + scene.arm_ext % 3)
    if label is Primitive.GRIPPER_OPEN:
        return replace(scene, gripper_closed=True)
    if label is Primitive.GRIPPER_CLOSE:
        return replace(scene, gripper_closed=False)
    return scene


def make_pair(scene_seed: int, label: Primitive, regime: str, gap: int) -> FramePair:
    scene = _prepare(gen_scene(scene_seed), label)
    if regime == "loco":
        # random stance so squat/rise do not dominate the loco appearance
        rng = np.random.default_rng([scene_seed, 0xC40C])
        if label not in (Primitive.SQUAT, Primitive.RISE):
            scene = replace(scene, crouch=int(rng.integers(2)))
    after = scene
    for _ in range(gap):
        after, _ = step_primitive(after, label)
    return FramePair(render(scene, regime), render(after, regime), gap, regime, label)


def _balanced_labels(prims: tuple[Primitive, ...], n: int, rng: np.random.Generator) -> list[Primitive]:
    labels = [prims[i % len(prims)] for i in range(n)]
    order = rng.permutation(n)
    return [labels[i] for i in order]


def gen_dataset(n_pairs: int, regime_mix: float = 0.5, gap: int = 5, seed: int = 0) -> list[FramePair]:
    """``regime_mix`` is the locomotion fraction; labels are balanced per regime."""
    if n_pairs <= 0:
        raise ValueError("n_pairs must be positive")
    if not 0.0 <= regime_mix <= 1.0:
        raise ValueError("regime_mix must lie in [0, 1]")
    rng = np.random.default_rng([seed, 0xDA7A])
    n_loco = int(round(n_pairs * regime_mix))
    regimes = ["loco"] * n_loco + ["manip"] * (n_pairs - n_loco)
    regimes = [regimes[i] for i in rng.permutation(n_pairs)]
    loco_labels = iter(_balanced_labels(LOCO_PRIMITIVES, n_loco, rng))
    manip_labels = iter(_balanced_labels(MANIP_PRIMITIVES, n_pairs - n_loco, rng))
    scene_seeds = rng.integers(0, 2**31 - 1, size=n_pairs)
    pairs = []
    for regime, s in zip(regimes, scene_seeds):
        label = next(loco_labels) if regime == "loco" else next(manip_labels)
        pairs.append(make_pair(int(s), label, regime, gap))
    return pairs


def save_dataset(pairs: Iterable[FramePair], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in pairs:
            fh.write(p.to_json() + "\n")


def iter_dataset(path: str | Path) -> Iterator[FramePair]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                yield FramePair.from_json(line)


def load_dataset(path: str | Path) -> list[FramePair]:
    return list(iter_dataset(path))


def grid_hash(scene: Scene) -> str:
    return hashlib.sha256(scene.grid.tobytes()).hexdigest()


def stack_pairs(pairs: list[FramePair]) -> tuple[np.ndarray, np.ndarray]:
    """(N, 1024) before and after matrices."""
    before = np.stack([p.before.reshape(-1) for p in pairs])
    after = np.stack([p.after.reshape(-1) for p in pairs])
    return before, after
