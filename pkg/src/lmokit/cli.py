"""Command-line front end: ``lmokit <subcommand> ...``.

Every subcommand reads an optional JSON experiment config (strictly parsed,
merged over defaults), writes the effective config and exactly one
``manifest.json`` into its output directory, and exits 0 on success, 1 on a
runtime failure and 2 on a configuration error.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import math
import os
import platform
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from . import evalkit as ev
from . import lam as lm
from . import synthworld as sw
from .command import GateConfig
from .rewards import RewardWeights
from .trainer import EnvConfig, PPOConfig, TrainConfig, load_checkpoint, save_checkpoint, train

log = logging.getLogger("lmokit")

DEFAULTS: dict = {
    "seed": 0,
    "out_dir": "runs",
    "synthworld": {"n_pairs": 5000, "regime_mix": 0.5, "gap": 5},
    "lam": {k: v for k, v in asdict(lm.LamConfig()).items() if k not in ("seed", "gap")},
    "command": {"alpha": 2.0, "lam": 0.1, "mode": "ramp", "h_slew": 0.2},
    "plant": {"randomize": True, "pushes": True, "arm": True},
    "rewards": {"overrides": {}, "w_dir": 2.0},
    "trainer": {
        "n_workers": 64,
        "horizon": 512,
        "iterations": 100,
        "stage_split": 0.6,
        "gamma": 0.99,
        "lam_gae": 0.95,
        "hidden": [128, 128],
        "init_std": 0.1,
        "lr": 1e-3,
        "vf_lr": 1e-3,
        "epochs": 4,
        "minibatches": 4,
        "entropy": 0.005,
        "clip": 0.2,
        "max_grad_norm": 1.0,
        "n_hist": 5,
        "episode_s": 15.0,
        "resample_s": [3.0, 6.0],
        "v_max": [0.6, 0.4, 0.8],
        "cruise": [0.3, 0.3, 0.3],
        "p_stationary": 0.2,
        "twist_range": 0.5,
        "twist_resample_s": 3.0,
    },
    "eval": {
        "seeds": [0, 1, 2, 3, 4],
        "randomize": False,
        "magnitude": 0.3,
        "active_s": 5.0,
        "settle_s": 10.0,
        "stability_s": 20.0,
        "postures": ["standing", "squatting"],
        "push_scale": 1.0,
        "log_trajectories": True,
    },
}


class ConfigError(ValueError):
    pass


def _merge(default, given, path: str):
    if isinstance(default, dict):
        if not isinstance(given, dict):
            raise ConfigError(f"{path or 'config'} must be an object")
        if path.endswith("overrides"):
            return copy.deepcopy(given)
        out = copy.deepcopy(default)
        for k, v in given.items():
            if k not in default:
                raise ConfigError(f"unknown key {path + '.' if path else ''}{k}")
            out[k] = _merge(default[k], v, f"{path}.{k}" if path else k)
        return out
    if isinstance(default, bool):
        if not isinstance(given, bool):
            raise ConfigError(f"{path} must be a boolean")
        return given
    if isinstance(default, (int, float)) and not isinstance(default, bool):
        if isinstance(given, bool) or not isinstance(given, (int, float)):
            raise ConfigError(f"{path} must be a number")
        if isinstance(default, int) and not isinstance(given, int):
            raise ConfigError(f"{path} must be an integer")
        return given
    if isinstance(default, str):
        if not isinstance(given, str):
            raise ConfigError(f"{path} must be a string")
        return given
    if isinstance(default, list):
        if not isinstance(given, list):
            raise ConfigError(f"{path} must be a list")
        return list(given)
    return given


def load_config(path: str | None) -> dict:
    """Defaults merged with the given JSON file; unknown keys raise ``ConfigError``."""
    given = {}
    if path:
        try:
            given = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
    cfg = _merge(DEFAULTS, given, "")
    env_seed = os.environ.get("LMO_SEED")
    cfg["_seed_source"] = "config"
    if env_seed is not None:
        try:
            cfg["seed"] = int(env_seed)
        except ValueError as exc:
            raise ConfigError(f"LMO_SEED must be an integer, got {env_seed!r}") from exc
        cfg["_seed_source"] = "LMO_SEED"
    return cfg


def config_hash(cfg: dict) -> str:
    clean = {k: v for k, v in cfg.items() if not k.startswith("_")}
    return hashlib.sha256(json.dumps(clean, sort_keys=True).encode()).hexdigest()


class Run:
    """Output directory bookkeeping: effective config, artifact list, manifest."""

    def __init__(self, command: str, out: str | Path, cfg: dict, argv: list[str]):
        self.command = command
        self.out = Path(out)
        try:
            self.out.mkdir(parents=True, exist_ok=True)
            probe = self.out / ".write_probe"
            probe.write_text("")
            probe.unlink()
        except OSError as exc:
            raise ConfigError(f"output directory {out} is not writable: {exc}") from exc
        self.cfg = cfg
        self.argv = argv
        self.t0 = time.time()
        self.artifacts: list[str] = []
        self.extra: dict = {}
        clean = {k: v for k, v in cfg.items() if not k.startswith("_")}
        (self.out / "config.json").write_text(json.dumps(clean, indent=2, sort_keys=True), encoding="utf-8")

    def path(self, name: str) -> Path:
        p = self.out / name
        self.artifacts.append(str(p))
        return p

    def finish(self) -> Path:
        manifest = {
            "command": self.command,
            "argv": self.argv,
            "config_hash": config_hash(self.cfg),
            "seed": self.cfg["seed"],
            "seed_source": self.cfg.get("_seed_source", "config"),
            "versions": {"lmokit": __version__, "numpy": np.__version__, "python": platform.python_version()},
            "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(self.t0)),
            "wall_clock_s": round(time.time() - self.t0, 3),
            "artifacts": self.artifacts,
            **self.extra,
        }
        p = self.out / "manifest.json"
        p.write_text(json.dumps(manifest, indent=2), encoding="utf-8")
        return p


# ---------------------------------------------------------------- builders


def lam_config(cfg: dict) -> lm.LamConfig:
    return lm.LamConfig(**cfg["lam"], gap=cfg["synthworld"]["gap"], seed=cfg["seed"])


def train_config(cfg: dict, stage: str = "both", ablate=(), mode: str = "lmo") -> TrainConfig:
    t, c, p = cfg["trainer"], cfg["command"], cfg["plant"]
    gate = GateConfig(alpha=c["alpha"], lam=c["lam"], mode=c["mode"], h_slew=c["h_slew"])
    env = EnvConfig(
        n_hist=t["n_hist"],
        episode_s=t["episode_s"],
        resample_s=tuple(t["resample_s"]),
        v_max=tuple(t["v_max"]),
        cruise=tuple(t["cruise"]),
        p_stationary=t["p_stationary"],
        twist_range=t["twist_range"],
        twist_resample_s=t["twist_resample_s"],
        randomize=p["randomize"],
        pushes=p["pushes"],
        arm=p["arm"],
        gate=gate,
    )
    ppo = PPOConfig(
        clip=t["clip"],
        epochs=t["epochs"],
        minibatches=t["minibatches"],
        entropy=t["entropy"],
        lr=t["lr"],
        vf_lr=t["vf_lr"],
        max_grad_norm=t["max_grad_norm"],
    )
    overrides = dict(cfg["rewards"]["overrides"])
    overrides["w_dir"] = cfg["rewards"]["w_dir"]
    return TrainConfig(
        n_workers=t["n_workers"],
        horizon=t["horizon"],
        iterations=t["iterations"],
        stage=stage,
        stage_split=t["stage_split"],
        gamma=t["gamma"],
        lam_gae=t["lam_gae"],
        hidden=tuple(t["hidden"]),
        init_log_std=math.log(t["init_std"]),
        ppo=ppo,
        env=env,
        weight_overrides=overrides,
        ablate=tuple(ablate),
        mode=mode,
        seed=cfg["seed"],
    )


def _controller(spec: str, n_hist: int = 5):
    if spec == "oracle":
        return ev.TeleportOracle(n_hist)
    if spec == "zero":
        return ev.ZeroController(n_hist)
    policy, _, _ = load_checkpoint(spec)
    return policy


def _eval_plant(cfg: dict) -> ev.EvalPlantConfig:
    e = cfg["eval"]
    return ev.EvalPlantConfig(randomize=e["randomize"], seeds=tuple(e["seeds"]))


# ---------------------------------------------------------------- subcommands


def cmd_gen_data(args, cfg) -> int:
    run = Run("gen-data", args.out, cfg, args.argv)
    s = cfg["synthworld"]
    pairs = sw.gen_dataset(s["n_pairs"], s["regime_mix"], s["gap"], cfg["seed"])
    path = run.path("dataset.jsonl")
    sw.save_dataset(pairs, path)
    run.extra["n_pairs"] = len(pairs)
    run.finish()
    print(path)
    return 0


def _regime_split(pairs):
    out = {"loco": [], "manip": []}
    for p in pairs:
        out[p.regime].append(p)
    return out


def cmd_train_lam(args, cfg) -> int:
    pairs = sw.load_dataset(args.data)
    if not pairs:
        raise RuntimeError(f"dataset {args.data} is empty")
    run = Run("train-lam", args.out, cfg, args.argv)
    lcfg = lam_config(cfg)
    jobs = [("shared", pairs, True)] if args.shared else [(r, ps, False) for r, ps in _regime_split(pairs).items()]
    for name, subset, balance in jobs:
        if not subset:
            raise RuntimeError(f"no {name} pairs in {args.data}")
        model, tlog = lm.train_lam(lcfg, subset, balance_regimes=balance)
        blob = model.to_dict()
        blob["regime"] = name
        run.path(f"lam_{name}.json").write_text(json.dumps(blob), encoding="utf-8")
        tlog.to_csv(run.path(f"lam_{name}_log.csv"))
        print(f"{name}: trained on {len(subset)} pairs")
    run.extra["mode"] = "shared" if args.shared else "dual"
    run.finish()
    return 0


RRG_COLUMNS = ["label", "n_used", "n_skipped", "base_sum", "recon_sum", "rrg", "per_pair_mean", "purity"]


def rrg_rows(model: lm.LamModel, pairs, by_label: bool) -> list[dict]:
    def row(label, subset):
        d = lm.rrg_detail(model, subset)
        codes = [a.code for a in lm.assign_codes(model, subset)]
        purity = lm.retrieval_purity(codes, [p.label for p in subset])
        return {
            "label": label,
            "n_used": d.n_used,
            "n_skipped": d.n_skipped,
            "base_sum": d.mse_base_sum,
            "recon_sum": d.mse_recon_sum,
            "rrg": d.rrg,
            "per_pair_mean": d.per_pair_mean,
            "purity": purity,
        }

    rows = [row("all", pairs)]
    if by_label:
        for lab in sorted({p.label for p in pairs}):
            subset = [p for p in pairs if p.label == lab]
            if any(np.any(p.before != p.after) for p in subset):
                rows.append(row(lab, subset))
            else:
                rows.append({"label": lab, "n_used": 0, "n_skipped": len(subset), "base_sum": 0.0, "recon_sum": 0.0,
                             "rrg": "", "per_pair_mean": "", "purity": ""})
    return rows


def cmd_eval_rrg(args, cfg) -> int:
    pairs = sw.load_dataset(args.data)
    if not pairs:
        raise RuntimeError(f"dataset {args.data} is empty")
    if args.model == "copy":
        model, regime = lm.copy_model(), None
    else:
        blob = json.loads(Path(args.model).read_text(encoding="utf-8"))
        model, regime = lm.LamModel.from_dict(blob), blob.get("regime")
    data_regimes = sorted({p.regime for p in pairs})
    if regime in ("loco", "manip") and data_regimes != [regime]:
        log.warning("model trained on %s pairs evaluated on %s", regime, ",".join(data_regimes))
        print(f"warning: regime mismatch (model {regime}, data {','.join(data_regimes)})", file=sys.stderr)
    run = Run("eval-rrg", args.out, cfg, args.argv)
    rows = rrg_rows(model, pairs, args.by_label)
    text = ev._write_csv(rows, RRG_COLUMNS, run.path("rrg.csv"))
    run.extra["model"] = args.model
    run.finish()
    print(text, end="")
    return 0


def cmd_train_lmo(args, cfg) -> int:
    mode = "velocity" if args.baseline == "velocity" else "lmo"
    ablate = tuple(args.ablate or ())
    if mode == "velocity" and ablate:
        raise ConfigError("ablations apply to the flag policy only")
    tcfg = train_config(cfg, stage=args.stage, ablate=ablate, mode=mode)
    run = Run("train-lmo", args.out, cfg, args.argv)
    weights = tcfg.weights()
    result = train(tcfg)
    meta = {"mode": mode, "stage": args.stage, "ablate": list(ablate), "seed": cfg["seed"]}
    save_checkpoint(run.path("policy.json"), result.policy, result.value, meta)
    result.write_log(run.path("train_log.csv"))
    run.extra.update(
        {
            "mode": mode,
            "stage": args.stage,
            "ablate": list(ablate),
            "gate_bypassed": mode == "velocity",
            "w_dir_effective": weights.weight("dir_deviation", 2),
            "reward_weights": {"stage1": weights.effective(1), "stage2": weights.effective(2)},
        }
    )
    run.finish()
    last = result.log[-1]
    print(f"trained {tcfg.iterations} iterations; final mean reward {last['mean_reward']:.4f}")
    return 0


def cmd_eval_loco(args, cfg) -> int:
    e = cfg["eval"]
    ctrl = _controller(args.policy, cfg["trainer"]["n_hist"])
    run = Run("eval-loco", args.out, cfg, args.argv)
    plant = _eval_plant(cfg)
    base = ev.TrialSpec(magnitude=e["magnitude"], active_s=e["active_s"], settle_s=e["settle_s"], repetitions=len(e["seeds"]))
    rep = ev.AccuracyReport()
    for prim in ev.PRIMITIVES:
        spec = ev.TrialSpec(prim, base.magnitude, base.active_s, base.settle_s, base.repetitions)
        lp = run.path(f"traj_{prim}.jsonl") if e["log_trajectories"] else None
        res = ev.run_trial(ctrl, spec, plant, log_path=lp)
        ok = ~res.fallen
        rep.position[prim] = ev.Stat.of(res.pos_err[ok], int(np.sum(res.fallen)))
        rep.yaw[prim] = ev.Stat.of(res.yaw_err[ok], int(np.sum(res.fallen)))
    text = rep.to_csv(run.path("loco.csv"))
    run.path("loco.json").write_text(rep.to_json(), encoding="utf-8")
    run.extra["policy"] = args.policy
    run.finish()
    print(text, end="")
    return 0


def cmd_eval_stability(args, cfg) -> int:
    e = cfg["eval"]
    ctrl = _controller(args.policy, cfg["trainer"]["n_hist"])
    run = Run("eval-stability", args.out, cfg, args.argv)
    rows, blobs = [], []
    for posture in e["postures"]:
        lp = run.path(f"traj_{posture}.jsonl") if e["log_trajectories"] else None
        rep = ev.stability_eval(
            ctrl, posture, e["stability_s"], _eval_plant(cfg), e["push_scale"], seed=cfg["seed"], log_path=lp
        )
        rows.extend(rep.rows())
        blobs.append(json.loads(rep.to_json()))
    text = ev._write_csv(rows, ev.STABILITY_COLUMNS, run.path("stability.csv"))
    run.path("stability.json").write_text(json.dumps(blobs, indent=2), encoding="utf-8")
    run.extra["policy"] = args.policy
    run.finish()
    print(text, end="")
    return 0


def cmd_replay(args, cfg) -> int:
    diffs = ev.replay_log(args.log, tol=args.tol)
    out = args.out or str(Path(args.log).parent / f"{Path(args.log).stem}_replay")
    run = Run("replay", out, cfg, args.argv)
    report = [asdict(d) for d in diffs]
    run.path("replay.json").write_text(json.dumps({"log": args.log, "diffs": report}, indent=2), encoding="utf-8")
    run.extra["n_diffs"] = len(diffs)
    run.finish()
    for d in diffs:
        print(f"step {d.step} {d.field}: logged {d.logged!r} recomputed {d.recomputed!r}")
    print(f"{len(diffs)} diffs")
    return 0 if not diffs else 1


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lmokit", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a frame-pair corpus")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-lam", help="train latent action models")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--shared", action="store_true", help="one model on both regimes with balanced batches")
    p.set_defaults(func=cmd_train_lam)

    p = sub.add_parser("eval-rrg", help="relative reconstruction gain and code purity")
    p.add_argument("--config")
    p.add_argument("--model", required=True, help="model JSON, or 'copy' for the copy baseline")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--by-label", action="store_true")
    p.set_defaults(func=cmd_eval_rrg)

    p = sub.add_parser("train-lmo", help="train the locomotion policy")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--stage", choices=["1", "2", "both"], default="both")
    p.add_argument("--baseline", choices=["velocity"])
    p.add_argument("--ablate", choices=["dir", "standstill"], action="append")
    p.set_defaults(func=cmd_train_lmo)

    for name, fn, help_ in (
        ("eval-loco", cmd_eval_loco, "settled position and yaw error per primitive"),
        ("eval-stability", cmd_eval_stability, "CoM sway under arm replay and pushes"),
    ):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config")
        p.add_argument("--policy", required=True, help="checkpoint JSON, 'oracle' or 'zero'")
        p.add_argument("--out", required=True)
        p.set_defaults(func=fn)

    p = sub.add_parser("replay", help="recompute rewards and metrics from a trajectory log")
    p.add_argument("--config")
    p.add_argument("--log", required=True)
    p.add_argument("--out")
    p.add_argument("--tol", type=float, default=0.0)
    p.set_defaults(func=cmd_replay)
    return ap


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
