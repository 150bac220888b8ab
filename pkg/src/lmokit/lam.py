"""VQ-VAE latent action model over frame pairs.

The encoder sees ``(before, after)`` and emits a continuous latent ``z``; it is
snapped to the nearest codebook row and the decoder predicts ``after`` from
``before`` plus the selected row. Reconstruction quality is scored against the
copy-the-previous-frame baseline (relative reconstruction gain).
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffkit as dk
from .synthworld import RES, FramePair, stack_pairs

log = logging.getLogger(__name__)

FRAME = RES * RES


@dataclass
class LamConfig:
    K: int = 16
    D: int = 8
    beta: float = 0.25
    gap: int = 5
    lr: float = 1e-3
    steps: int = 3000
    batch_size: int = 64
    dead_threshold: float = 1e-3
    dead_patience: int = 100
    usage_decay: float = 0.99
    hidden: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.K < 2 or self.D < 1:
            raise ValueError("codebook needs K >= 2 and D >= 1")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")


class Codebook:
    """K x D embedding table plus an exponentially decayed usage count."""

    def __init__(self, entries: np.ndarray, decay: float = 0.99):
        entries = np.asarray(entries, dtype=np.float64)
        if entries.ndim != 2 or entries.shape[0] == 0:
            raise ValueError("empty codebook")
        self.entries = dk.Param(entries, name="codebook")
        self.usage = np.zeros(entries.shape[0])
        self.decay = decay

    @property
    def K(self) -> int:
        return self.entries.shape[0]

    @property
    def D(self) -> int:
        return self.entries.shape[1]

    def distances(self, z: np.ndarray) -> np.ndarray:
        z = np.atleast_2d(z)
        diff = z[:, None, :] - self.entries.data[None, :, :]
        return np.sum(diff * diff, axis=-1)

    def nearest(self, z: np.ndarray) -> np.ndarray:
        # np.argmin returns the first minimum, i.e. the lowest index on ties
        return np.argmin(self.distances(z), axis=1)

    def quantize(self, z, update_usage: bool = True) -> tuple[int, np.ndarray]:
        z = np.asarray(z, dtype=np.float64)
        if z.shape != (self.D,):
            raise ValueError(f"latent of shape {z.shape} does not match D={self.D}")
        idx = int(self.nearest(z)[0])
        if update_usage:
            self.usage *= self.decay
            self.usage[idx] += 1.0 - self.decay
        return idx, self.entries.data[idx].copy()

    def record_batch(self, idx: np.ndarray) -> None:
        counts = np.bincount(idx, minlength=self.K) / max(len(idx), 1)
        self.usage = self.decay * self.usage + (1.0 - self.decay) * counts


class LamModel:
    def __init__(self, config: LamConfig):
        self.config = config
        rng = np.random.default_rng([config.seed, 0x1A4])
        H, D = config.hidden, config.D
        self.encoder = dk.MLP([2 * FRAME, H, D], rng, name="enc")
        self.dec_w1, self.dec_b1 = dk.init_dense(rng, FRAME + D, H, name="dec.0")
        self.dec_w2, self.dec_b2 = dk.init_dense(rng, H, FRAME, gain=0.1, name="dec.1")
        # per-pixel gain on the copied previous frame; 1 means "copy"
        self.dec_skip = dk.Param(np.ones(FRAME), name="dec.skip")
        self.codebook = Codebook(rng.uniform(-1.0 / config.K, 1.0 / config.K, (config.K, D)), config.usage_decay)

    def decoder_params(self) -> list[dk.Param]:
        return [self.dec_w1, self.dec_b1, self.dec_w2, self.dec_b2, self.dec_skip]

    def params(self) -> list[dk.Param]:
        return self.encoder.params() + self.decoder_params() + [self.codebook.entries]

    # ------------------------------------------------------------ graph pieces

    def encode_t(self, before, after) -> dk.Tensor:
        return self.encoder(dk.concat([before, after], axis=1))

    def decode_t(self, before, code) -> dk.Tensor:
        h = dk.tanh(dk.linear(dk.concat([before, code], axis=1), self.dec_w1, self.dec_b1))
        out = dk.add(dk.mul_rowvec(before, self.dec_skip), dk.linear(h, self.dec_w2, self.dec_b2))
        return dk.clip(out, 0.0, 1.0)

    # ------------------------------------------------------------ numpy inference

    def encode_batch(self, before: np.ndarray, after: np.ndarray) -> np.ndarray:
        return self.encoder.forward_np(np.concatenate([before, after], axis=1))

    def decode_batch(self, before: np.ndarray, code: np.ndarray) -> np.ndarray:
        h = np.tanh(np.concatenate([before, code], axis=1) @ self.dec_w1.data + self.dec_b1.data)
        return np.clip(before * self.dec_skip.data + h @ self.dec_w2.data + self.dec_b2.data, 0.0, 1.0)

    def predict_batch(self, before: np.ndarray, after: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        z = self.encode_batch(before, after)
        idx = self.codebook.nearest(z)
        return self.decode_batch(before, self.codebook.entries.data[idx]), idx

    # ------------------------------------------------------------ persistence

    def to_dict(self) -> dict:
        return {
            "config": asdict(self.config),
            "encoder": self.encoder.state_dict(),
            "decoder": {
                "w1": self.dec_w1.data.tolist(),
                "b1": self.dec_b1.data.tolist(),
                "w2": self.dec_w2.data.tolist(),
                "b2": self.dec_b2.data.tolist(),
                "skip": self.dec_skip.data.tolist(),
            },
            "codebook": self.codebook.entries.data.tolist(),
            "usage": self.codebook.usage.tolist(),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "LamModel":
        model = cls(LamConfig(**obj["config"]))
        model.encoder.load_state_dict(obj["encoder"])
        dec = obj["decoder"]
        for name in ("w1", "b1", "w2", "b2", "skip"):
            p = getattr(model, f"dec_{name}")
            arr = np.array(dec[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"decoder.{name}: shape {arr.shape} != {p.shape}")
            p.data = arr
        model.codebook.entries.data = np.array(obj["codebook"], dtype=np.float64)
        model.codebook.usage = np.array(obj["usage"], dtype=np.float64)
        return model

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "LamModel":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _flat(frame) -> np.ndarray:
    arr = np.asarray(frame, dtype=np.float64)
    if arr.size != FRAME:
        raise ValueError(f"frame must have {FRAME} pixels, got shape {arr.shape}")
    return arr.reshape(1, FRAME)


def encode(model: LamModel, before, after) -> np.ndarray:
    return model.encode_batch(_flat(before), _flat(after))[0]


def quantize(codebook: Codebook, z) -> tuple[int, np.ndarray]:
    return codebook.quantize(z)


def decode(model: LamModel, before, embedding) -> np.ndarray:
    emb = np.asarray(embedding, dtype=np.float64)
    if emb.shape != (model.config.D,):
        raise ValueError(f"embedding of shape {emb.shape} does not match D={model.config.D}")
    return model.decode_batch(_flat(before), emb[None, :])[0].reshape(RES, RES)


@dataclass
class VQLoss:
    total: dk.Tensor
    recon: dk.Tensor
    codebook_term: dk.Tensor
    commit_term: dk.Tensor
    indices: np.ndarray

    def values(self) -> tuple[float, float, float, float]:
        return self.total.item(), self.recon.item(), self.codebook_term.item(), self.commit_term.item()


def vq_loss_batch(model: LamModel, before: np.ndarray, after: np.ndarray) -> VQLoss:
    """recon + ||sg[z] - e||^2 + beta * ||z - sg[e]||^2 (squared terms are means).

    The codebook term moves only the selected rows, the commitment term only
    the encoder; the decoder input carries the straight-through gradient.
    """
    z = model.encode_t(before, after)
    idx = model.codebook.nearest(z.data)
    e = dk.take_rows(model.codebook.entries, idx)
    code = dk.straight_through(z, e)
    pred = model.decode_t(before, code)
    recon = dk.mse(pred, after)
    codebook_term = dk.mse(e, dk.stop_gradient(z))
    commit_term = dk.mse(z, dk.stop_gradient(e))
    total = dk.add(dk.add(recon, codebook_term), dk.mul(commit_term, model.config.beta))
    return VQLoss(total, recon, codebook_term, commit_term, idx)


def vq_loss(model: LamModel, pair: FramePair) -> tuple[float, float, float, float]:
    return vq_loss_batch(model, _flat(pair.before), _flat(pair.after)).values()


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)

    def to_csv(self, path: str | Path) -> None:
        cols = ["step", "total", "recon", "codebook", "commit", "active_codes", "restarts"]
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(",".join(cols) + "\n")
            for r in self.rows:
                fh.write(",".join(repr(r[c]) for c in cols) + "\n")


def _batch_indices(rng: np.random.Generator, groups: list[np.ndarray], batch: int) -> np.ndarray:
    if len(groups) == 1:
        return rng.choice(groups[0], size=batch, replace=len(groups[0]) < batch)
    # equal share per source, remainder to the first
    share = batch // len(groups)
    parts = []
    for i, g in enumerate(groups):
        n = share + (batch - share * len(groups) if i == 0 else 0)
        parts.append(rng.choice(g, size=n, replace=len(g) < n))
    return np.concatenate(parts)


def train_lam(
    config: LamConfig,
    dataset: Sequence[FramePair],
    balance_regimes: bool = False,
    log_every: int = 0,
) -> tuple[LamModel, TrainLog]:
    """Minibatch Adam on the VQ objective with dead-code restarts.

    With ``balance_regimes`` every batch draws half of its pairs from each
    regime present in ``dataset``.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    model = LamModel(config)
    rng = np.random.default_rng([config.seed, 0x7A1])
    before, after = stack_pairs(list(dataset))
    if balance_regimes:
        regimes = np.array([p.regime for p in dataset])
        groups = [np.flatnonzero(regimes == r) for r in sorted(set(regimes))]
    else:
        groups = [np.arange(len(dataset))]
    params = model.params()
    starved = np.zeros(config.K, dtype=np.int64)
    train_log = TrainLog()
    restarts = 0
    for step in range(config.steps):
        bi = _batch_indices(rng, groups, config.batch_size)
        b, a = before[bi], after[bi]
        dk.zero_grad(params)
        with dk.Tape() as tape:
            loss = vq_loss_batch(model, b, a)
        dk.backward(tape, loss.total)
        dk.adam_step(params, lr=config.lr)
        model.codebook.record_batch(loss.indices)
        starved = np.where(model.codebook.usage < config.dead_threshold, starved + 1, 0)
        dead = np.flatnonzero(starved >= config.dead_patience)
        if dead.size:
            z = model.encode_batch(b, a)
            picks = rng.choice(len(z), size=dead.size, replace=len(z) < dead.size)
            model.codebook.entries.data[dead] = z[picks]
            model.codebook.entries.m[dead] = 0.0
            model.codebook.entries.v[dead] = 0.0
            model.codebook.usage[dead] = config.dead_threshold
            starved[dead] = 0
            restarts += int(dead.size)
        total, recon, cb, cm = loss.values()
        train_log.rows.append(
            {
                "step": step,
                "total": total,
                "recon": recon,
                "codebook": cb,
                "commit": cm,
                "active_codes": int(np.sum(model.codebook.usage >= config.dead_threshold)),
                "restarts": restarts,
            }
        )
        if log_every and step % log_every == 0:
            log.info("lam step %d total %.5f recon %.5f", step, total, recon)
    return model, train_log


# ---------------------------------------------------------------- evaluation


@dataclass
class RRGResult:
    rrg: float
    per_pair_mean: float
    mse_base_sum: float
    mse_recon_sum: float
    n_used: int
    n_skipped: int


def rrg_detail(model: LamModel, dataset: Sequence[FramePair], batch: int = 512) -> RRGResult:
    """Aggregate relative reconstruction gain: (sum base - sum recon) / sum base.

    Pairs whose copy baseline is exactly zero are skipped and counted.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    base_all, recon_all = [], []
    for start in range(0, len(dataset), batch):
        b, a = stack_pairs(list(dataset[start : start + batch]))
        pred, _ = model.predict_batch(b, a)
        base_all.append(np.mean((b - a) ** 2, axis=1))
        recon_all.append(np.mean((pred - a) ** 2, axis=1))
    base = np.concatenate(base_all)
    recon = np.concatenate(recon_all)
    keep = base > 0
    if not np.any(keep):
        raise ValueError("every pair has zero baseline error; RRG undefined")
    b_sum, r_sum = float(base[keep].sum()), float(recon[keep].sum())
    per_pair = float(np.mean((base[keep] - recon[keep]) / base[keep]))
    return RRGResult((b_sum - r_sum) / b_sum, per_pair, b_sum, r_sum, int(keep.sum()), int((~keep).sum()))


def rrg(model: LamModel, dataset: Sequence[FramePair]) -> float:
    return rrg_detail(model, dataset).rrg


@dataclass(frozen=True)
class LatentAssignment:
    pair_index: int
    code: int
    z: np.ndarray


def assign_codes(model: LamModel, dataset: Sequence[FramePair], batch: int = 512) -> list[LatentAssignment]:
    out = []
    for start in range(0, len(dataset), batch):
        b, a = stack_pairs(list(dataset[start : start + batch]))
        z = model.encode_batch(b, a)
        idx = model.codebook.nearest(z)
        out.extend(LatentAssignment(start + i, int(c), z[i]) for i, c in enumerate(idx))
    return out


def retrieval_purity(codes: Sequence[int], labels: Sequence) -> float:
    """Usage-weighted majority-label fraction per code."""
    if len(codes) == 0:
        raise ValueError("no assignments")
    if len(codes) != len(labels):
        raise ValueError("codes and labels are not aligned")
    by_code: dict[int, dict] = {}
    for c, lab in zip(codes, labels):
        hist = by_code.setdefault(int(c), {})
        hist[lab] = hist.get(lab, 0) + 1
    majority = sum(max(h.values()) for h in by_code.values())
    return majority / len(codes)


def copy_model(config: LamConfig | None = None) -> LamModel:
    """Decoder that returns the previous frame exactly (RRG 0 reference)."""
    model = LamModel(config or LamConfig())
    for p in (model.dec_w1, model.dec_b1, model.dec_w2, model.dec_b2):
        p.data = np.zeros_like(p.data)
    model.dec_skip.data = np.ones(FRAME)
    return model
