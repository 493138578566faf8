"""Command-line pipeline driver.

Subcommands mirror the pipeline stages: gen-data simulates episode
datasets, train fits a ratio estimator, plan optimizes one grasp,
eval benchmarks a strategy, export-posterior writes marginal CSVs,
show-config prints the resolved configuration.

Every command is reproducible from (config, seed). The configuration
is a JSON file merged over built-in defaults (DESKGRASP_CONFIG names a
default path); its canonical SHA-256 hash is embedded in every written
artifact. Outputs are staged and renamed so failed runs leave nothing
behind. Exit codes: 0 success, 1 usage, 2 data error, 3 numeric
failure.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import os
import shutil
import sys
import time
from dataclasses import dataclass

import numpy as np

from . import world as w
from .distributions import (
    HandPrior,
    QuaternionMixturePrior,
    ScenePrior,
    scene_prior_sample,
)
from .errors import DataError, NumericError, UsageError
from .eval import ExportGrids, export_posterior, observation_for, run_benchmark, write_posterior_csvs
from .planner import STRATEGIES, plan_strategy
from .ratio import (
    TrainSpec,
    load_ratio_model,
    oracle_conditioning,
    save_ratio_model,
    train_image_ratio,
    train_oracle_ratio,
    train_success_ratio,
)

TRAIN_KINDS = ("success", "image", "oracle")


def default_config_dict() -> dict:
    """Built-in defaults; every tunable that affects results lives here."""
    return {
        "prior": {
            "x_low": [-0.15, -0.15, 0.12],
            "x_high": [0.15, 0.15, 0.34],
            "kappa": 30.0,
            "grasp_probs": [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
        },
        "scene": {
            "catalog": [o.to_dict() for o in w.default_catalog()],
            "xy_low": -0.05,
            "xy_high": 0.05,
            "phi_low": -float(np.pi),
            "phi_high": float(np.pi),
            "beta_low": 0.9,
            "beta_high": 1.1,
        },
        "world": {
            "workspace_low": [-0.18, -0.18, 0.09],
            "workspace_high": [0.18, 0.18, 0.37],
            "palm_radius": 0.022,
            "finger_radius": 0.007,
            "grasp_offset": 0.15,
            "finger_length": 0.10,
            "closure_pad": 0.02,
            "spans": {"basic": 0.105, "wide": 0.13, "pinch": 0.085},
            "slip_gain": {"basic": 1.0, "wide": 1.2, "pinch": 0.8},
            "closure_min": 0.3,
            "sigma_jitter_xy": 0.002,
            "sigma_jitter_phi": float(np.radians(2.0)),
            "friction_jitter": 0.02,
        },
        "camera": {
            "position": [0.0, -0.45, 0.42],
            "lookat": [0.0, 0.0, 0.03],
            "fov_y": 0.85,
            "depth_min": 0.40,
            "depth_max": 0.90,
            "width": 64,
            "height": 48,
            "sigma_px": 0.005,
            "sigma_cam_pos": 0.005,
            "sigma_cam_rot": [0.002, 0.01, 0.002],
            "range_jitter": 0.02,
        },
        "train": {
            "success": {
                "batch_size": 256,
                "max_epochs": 40,
                "lr": 3e-3,
                "patience": 6,
                "min_delta": 1e-5,
                "val_fraction": 0.1,
                "min_positives": 64,
                "hidden": 128,
            },
            "image": {
                "batch_size": 128,
                "max_epochs": 40,
                "lr": 1e-3,
                "patience": 8,
                "min_delta": 1e-5,
                "val_fraction": 0.1,
                "min_positives": 64,
                "hidden": 128,
            },
            "oracle": {
                "batch_size": 256,
                "max_epochs": 120,
                "lr": 1e-3,
                "patience": 15,
                "min_delta": 1e-5,
                "val_fraction": 0.1,
                "min_positives": 64,
                "hidden": 128,
            },
        },
        "plan": {"n_candidates": 1000, "max_iters": 20},
        "paths": {"out_root": "runs"},
        "seed": 0,
    }


def _merge(base: dict, override: dict, prefix: str) -> dict:
    out = dict(base)
    for key, value in override.items():
        if key not in base:
            raise DataError(f"unknown config key {prefix + key!r}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            out[key] = _merge(base[key], value, prefix + key + ".")
        else:
            out[key] = value
    return out


@dataclass
class Config:
    prior: dict
    scene: dict
    world: dict
    camera: dict
    train: dict
    plan: dict
    paths: dict
    seed: int

    def to_dict(self) -> dict:
        return {
            "prior": self.prior,
            "scene": self.scene,
            "world": self.world,
            "camera": self.camera,
            "train": self.train,
            "plan": self.plan,
            "paths": self.paths,
            "seed": self.seed,
        }

    def hand_prior(self) -> HandPrior:
        p = self.prior
        try:
            rotation = QuaternionMixturePrior(kappa=float(p["kappa"]))
            return HandPrior(
                np.asarray(p["x_low"], dtype=np.float64),
                np.asarray(p["x_high"], dtype=np.float64),
                rotation,
                np.asarray(p["grasp_probs"], dtype=np.float64),
            )
        except (ValueError, TypeError) as exc:
            raise DataError(f"invalid prior config: {exc}") from exc

    def scene_prior(self) -> ScenePrior:
        s = self.scene
        try:
            catalog = [w.ObjectSpec.from_dict(d) for d in s["catalog"]]
            return ScenePrior(
                catalog,
                float(s["xy_low"]),
                float(s["xy_high"]),
                float(s["phi_low"]),
                float(s["phi_high"]),
                float(s["beta_low"]),
                float(s["beta_high"]),
            )
        except (ValueError, TypeError) as exc:
            raise DataError(f"invalid scene config: {exc}") from exc

    def world_params(self) -> w.WorldParams:
        try:
            return w.WorldParams(**self.world)
        except (ValueError, TypeError) as exc:
            raise DataError(f"invalid world config: {exc}") from exc

    def camera_params(self) -> w.CameraParams:
        try:
            return w.CameraParams(**self.camera)
        except (ValueError, TypeError) as exc:
            raise DataError(f"invalid camera config: {exc}") from exc

    def train_spec(self, kind: str) -> TrainSpec:
        if kind not in self.train:
            raise DataError(f"no training section for kind {kind!r}")
        try:
            return TrainSpec(**self.train[kind])
        except TypeError as exc:
            raise DataError(f"invalid training config for {kind!r}: {exc}") from exc

    def validate(self) -> None:
        """Construct every derived object once so bad values fail at load."""
        self.hand_prior()
        self.scene_prior()
        self.world_params()
        self.camera_params()
        for kind in TRAIN_KINDS:
            spec = self.train_spec(kind)
            if spec.batch_size < 1 or spec.max_epochs < 1 or spec.lr <= 0.0:
                raise DataError(f"training config for {kind!r} must have positive sizes and lr")
        if int(self.plan["n_candidates"]) < 1 or int(self.plan["max_iters"]) < 0:
            raise DataError("plan config needs n_candidates >= 1 and max_iters >= 0")
        if not isinstance(self.paths.get("out_root"), str) or not self.paths["out_root"]:
            raise DataError("paths.out_root must be a non-empty string")
        self.seed = int(self.seed)


def config_hash(cfg: Config) -> str:
    canon = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def load_config(path: str | None = None) -> Config:
    """Merge a JSON config file over the defaults and validate it.

    Falls back to the DESKGRASP_CONFIG env var, then to pure defaults.
    """
    if path is None:
        path = os.environ.get("DESKGRASP_CONFIG") or None
    merged = default_config_dict()
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as f:
                user = json.load(f)
        except OSError as exc:
            raise DataError(f"cannot read config {path!r}: {exc}") from exc
        except ValueError as exc:
            raise DataError(f"config {path!r} is not valid JSON: {exc}") from exc
        if not isinstance(user, dict):
            raise DataError("config root must be a JSON object")
        merged = _merge(merged, user, "")
    cfg = Config(**copy.deepcopy(merged))
    cfg.validate()
    return cfg


# --- shared helpers ---


def _write_json(path: str, payload: dict) -> None:
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    try:
        text = json.dumps(payload, sort_keys=True, indent=2, allow_nan=False)
    except ValueError as exc:
        raise NumericError(f"non-finite value in output for {path!r}") from exc
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        f.write(text + "\n")
    os.replace(tmp, path)


def load_scene(path: str) -> w.Scene:
    try:
        with open(path, "r", encoding="utf-8") as f:
            d = json.load(f)
        return w.Scene(w.ObjectSpec.from_dict(d["obj"]), w.ScenePose.from_dict(d["pose"]))
    except OSError as exc:
        raise DataError(f"cannot read scene {path!r}: {exc}") from exc
    except (ValueError, KeyError, TypeError) as exc:
        raise DataError(f"scene file {path!r} is malformed: {exc}") from exc


def scene_to_dict(scene: w.Scene) -> dict:
    return {"obj": scene.obj.to_dict(), "pose": scene.pose.to_dict()}


def _resolve_scene(args, cfg: Config, rng: np.random.Generator) -> w.Scene:
    if args.scene is not None:
        return load_scene(args.scene)
    return scene_prior_sample(cfg.scene_prior(), rng)


_NEEDED_MODELS = {
    "prior-sample": (),
    "prior-argmax": (),
    "metric-mle": ("success",),
    "metric-map": ("success",),
    "image-mle": ("success", "image"),
    "image-map": ("success", "image"),
    "oracle-mle": ("success", "oracle"),
    "oracle-map": ("success", "oracle"),
}


def _load_models(args, strategy: str) -> dict:
    models = {}
    for kind in _NEEDED_MODELS[strategy]:
        path = getattr(args, kind)
        if path is None:
            raise DataError(f"strategy {strategy!r} needs --{kind} CKPT")
        model = load_ratio_model(path)
        if model.kind != kind:
            raise DataError(f"checkpoint {path!r} holds a {model.kind!r} model, expected {kind!r}")
        models[kind] = model
    return models


def _seed_of(args, cfg: Config) -> int:
    return cfg.seed if args.seed is None else int(args.seed)


def _out_or(args, cfg: Config, *parts: str) -> str:
    return args.out if args.out is not None else os.path.join(cfg.paths["out_root"], *parts)


# --- subcommands ---


def cmd_show_config(args) -> int:
    cfg = load_config(args.config)
    payload = dict(cfg.to_dict())
    payload["config_hash"] = config_hash(cfg)
    if args.out is not None:
        _write_json(args.out, payload)
    else:
        print(json.dumps(payload, sort_keys=True, indent=2))
    return 0


def cmd_gen_data(args) -> int:
    if args.episodes < 1:
        raise UsageError("--episodes must be positive")
    if args.workers < 1:
        raise UsageError("--workers must be positive")
    cfg = load_config(args.config)
    out = _out_or(args, cfg, "data")
    manifest = w.generate_episodes(
        out,
        args.episodes,
        _seed_of(args, cfg),
        cfg.hand_prior(),
        cfg.scene_prior(),
        cfg.world_params(),
        cfg.camera_params(),
        config_hash(cfg),
        images_mode=args.images,
        workers=args.workers,
        zero_timing=args.zero_timing,
    )
    print(
        f"wrote {manifest['episodes']} episodes "
        f"({manifest['success_count']} successes) to {out}"
    )
    return 0


def cmd_train(args) -> int:
    """Report JSON schema: kind, seed, config_hash, dataset, checkpoint,
    plus the TrainReport fields train_loss, val_loss, best_epoch,
    best_val, n_train, n_val, wall_time_s."""
    cfg = load_config(args.config)
    seed = _seed_of(args, cfg)
    spec = cfg.train_spec(args.kind)
    records, manifest = w.load_episodes(args.data)
    if args.kind == "success":
        model, report = train_success_ratio(records, spec, seed)
    elif args.kind == "oracle":
        model, report = train_oracle_ratio(records, spec, seed)
    else:
        kept = [r for r in records if r.success and r.img is not None]
        if not kept:
            raise DataError(f"dataset {args.data!r} has no stored success images to train on")
        images = np.stack(
            [w.load_image(args.data, r, manifest["image_width"], manifest["image_height"]) for r in kept]
        )
        model, report = train_image_ratio(kept, images, spec, seed)
    if args.zero_timing:
        report.wall_time_s = 0.0
    out = _out_or(args, cfg, "models", f"{args.kind}.ckpt")
    parent = os.path.dirname(out)
    if parent:
        os.makedirs(parent, exist_ok=True)
    chash = config_hash(cfg)
    save_ratio_model(out, model, report, extra={"config_hash": chash, "seed": seed})
    payload = {
        "kind": args.kind,
        "seed": seed,
        "config_hash": chash,
        "dataset": args.data,
        "checkpoint": out,
        **report.to_dict(),
    }
    _write_json(out + ".report.json", payload)
    print(
        f"trained {args.kind} estimator: best val loss {report.best_val:.4f} "
        f"at epoch {report.best_epoch} ({report.n_train} train rows) -> {out}"
    )
    return 0


def _plan_sizes(args, cfg: Config) -> tuple:
    n_candidates = int(cfg.plan["n_candidates"]) if args.candidates is None else args.candidates
    max_iters = int(cfg.plan["max_iters"]) if args.iters is None else args.iters
    if n_candidates < 1 or max_iters < 0:
        raise UsageError("need --candidates >= 1 and --iters >= 0")
    return n_candidates, max_iters


def cmd_plan(args) -> int:
    cfg = load_config(args.config)
    seed = _seed_of(args, cfg)
    models = _load_models(args, args.strategy)
    rng = np.random.default_rng(seed)
    scene = _resolve_scene(args, cfg, rng)
    cam = cfg.camera_params()
    nuis = w.sample_nuisances(cam, cfg.world_params(), rng)
    observation = observation_for(args.strategy, scene, nuis, cam, rng)
    n_candidates, max_iters = _plan_sizes(args, cfg)
    t0 = time.perf_counter()
    result = plan_strategy(
        args.strategy, models, observation, cfg.hand_prior(), rng, n_candidates, max_iters
    )
    wall = time.perf_counter() - t0
    out = _out_or(args, cfg, "plan.json")
    payload = {
        "strategy": args.strategy,
        "seed": seed,
        "config_hash": config_hash(cfg),
        "scene": scene_to_dict(scene),
        "wall_time_s": 0.0 if args.zero_timing else wall,
        **result.to_dict(),
    }
    _write_json(out, payload)
    h = result.hand
    print(
        f"{args.strategy}: {h.g} grasp at ({h.x[0]:.3f}, {h.x[1]:.3f}, {h.x[2]:.3f}), "
        f"cost {result.cost:.4f}, {wall:.2f}s -> {out}"
    )
    return 0


def cmd_eval(args) -> int:
    if args.trials < 1:
        raise UsageError("--trials must be positive")
    if args.workers < 1:
        raise UsageError("--workers must be positive")
    cfg = load_config(args.config)
    models = _load_models(args, args.strategy)
    n_candidates, max_iters = _plan_sizes(args, cfg)
    result = run_benchmark(
        args.strategy,
        models,
        args.trials,
        _seed_of(args, cfg),
        cfg.hand_prior(),
        cfg.scene_prior(),
        cfg.world_params(),
        cfg.camera_params(),
        n_candidates,
        max_iters,
        workers=args.workers,
        zero_timing=args.zero_timing,
    )
    out = _out_or(args, cfg, f"eval-{args.strategy}.json")
    _write_json(out, {"config_hash": config_hash(cfg), **result.to_dict()})
    lo, hi = result.interval
    print(
        f"{args.strategy}: {result.successes}/{result.n_trials} successes "
        f"({100 * result.rate:.1f}%, 95% CI [{100 * lo:.1f}%, {100 * hi:.1f}%]) -> {out}"
    )
    return 0


def cmd_export_posterior(args) -> int:
    cfg = load_config(args.config)
    seed = _seed_of(args, cfg)
    if args.success is None:
        raise DataError("export-posterior needs --success CKPT")
    if args.image is not None and args.oracle is not None:
        raise DataError("give at most one conditioning checkpoint (--image or --oracle)")
    success = load_ratio_model(args.success)
    if success.kind != "success":
        raise DataError(f"checkpoint {args.success!r} holds a {success.kind!r} model, expected 'success'")
    cond = None
    cond_kind = None
    if args.image is not None or args.oracle is not None:
        cond_kind = "image" if args.image is not None else "oracle"
        cond = load_ratio_model(args.image if args.image is not None else args.oracle)
        if cond.kind != cond_kind:
            raise DataError(f"conditioning checkpoint holds a {cond.kind!r} model, expected {cond_kind!r}")
    rng = np.random.default_rng(seed)
    scene = _resolve_scene(args, cfg, rng)
    observation = None
    if cond_kind == "image":
        cam = cfg.camera_params()
        nuis = w.sample_nuisances(cam, cfg.world_params(), rng)
        observation = w.render_depth(scene, nuis, cam, rng).data
    elif cond_kind == "oracle":
        observation = oracle_conditioning(scene.obj, scene.pose)
    grids = ExportGrids(
        nx=args.nx, ny=args.ny, nz=args.nz, n_rotations=args.rotations, n_marginal=args.marginal
    )
    export = export_posterior(success, cond, observation, cfg.hand_prior(), grids, seed)
    out = _out_or(args, cfg, "posterior")
    if os.path.exists(out):
        raise DataError(f"output directory {out!r} already exists")
    stage = out + ".partial"
    if os.path.exists(stage):
        raise DataError(f"stale partial output {stage!r}; remove it first")
    try:
        os.makedirs(stage)
        write_posterior_csvs(export, stage)
        _write_json(
            os.path.join(stage, "meta.json"),
            {
                "config_hash": config_hash(cfg),
                "seed": seed,
                "scene": scene_to_dict(scene),
                "conditioning": cond_kind,
                "grids": {
                    "nx": args.nx,
                    "ny": args.ny,
                    "nz": args.nz,
                    "n_rotations": args.rotations,
                    "n_marginal": args.marginal,
                },
            },
        )
        os.replace(stage, out)
    except Exception:
        shutil.rmtree(stage, ignore_errors=True)
        raise
    print(f"wrote posterior marginals to {out}")
    return 0


# --- argument parsing ---


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="config JSON path (default: $DESKGRASP_CONFIG)")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--success", default=None, help="success-ratio checkpoint")
    p.add_argument("--image", default=None, help="image-ratio checkpoint")
    p.add_argument("--oracle", default=None, help="oracle-ratio checkpoint")


def _add_scene_flags(p: argparse.ArgumentParser) -> None:
    grp = p.add_mutually_exclusive_group(required=True)
    grp.add_argument("--scene", default=None, help="scene JSON file with obj and pose")
    grp.add_argument("--sample", action="store_true", help="draw the scene from the scene prior")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="deskgrasp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("show-config", help="print the resolved config with its hash")
    _add_common(p)
    p.add_argument("--out", default=None, help="write JSON here instead of stdout")
    p.set_defaults(func=cmd_show_config)

    p = sub.add_parser("gen-data", help="simulate an episode dataset")
    _add_common(p)
    p.add_argument("--episodes", type=int, required=True, help="number of episodes")
    p.add_argument("--out", default=None, help="output dataset directory")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--images", choices=("success", "all", "none"), default="success")
    p.add_argument("--zero-timing", action="store_true", help="report wall_time_s as 0")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a ratio estimator on a dataset")
    _add_common(p)
    p.add_argument("--kind", choices=TRAIN_KINDS, required=True)
    p.add_argument("--data", required=True, help="dataset directory from gen-data")
    p.add_argument("--out", default=None, help="checkpoint path")
    p.add_argument("--zero-timing", action="store_true", help="report wall_time_s as 0")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("plan", help="plan one grasp for a scene")
    _add_common(p)
    p.add_argument("--strategy", choices=STRATEGIES, required=True)
    _add_scene_flags(p)
    _add_model_flags(p)
    p.add_argument("--out", default=None, help="result JSON path")
    p.add_argument("--candidates", type=int, default=None, help="override plan.n_candidates")
    p.add_argument("--iters", type=int, default=None, help="override plan.max_iters")
    p.add_argument("--zero-timing", action="store_true", help="report wall_time_s as 0")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("eval", help="benchmark a strategy over random scenes")
    _add_common(p)
    p.add_argument("--strategy", choices=STRATEGIES, required=True)
    p.add_argument("--trials", type=int, required=True)
    _add_model_flags(p)
    p.add_argument("--out", default=None, help="result JSON path")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--candidates", type=int, default=None, help="override plan.n_candidates")
    p.add_argument("--iters", type=int, default=None, help="override plan.max_iters")
    p.add_argument("--zero-timing", action="store_true", help="report mean_plan_seconds as 0")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-posterior", help="write posterior marginal CSVs")
    _add_common(p)
    _add_scene_flags(p)
    _add_model_flags(p)
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--nx", type=int, default=12)
    p.add_argument("--ny", type=int, default=12)
    p.add_argument("--nz", type=int, default=10)
    p.add_argument("--rotations", type=int, default=256)
    p.add_argument("--marginal", type=int, default=64)
    p.set_defaults(func=cmd_export_posterior)

    return parser


def main(argv: list | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
