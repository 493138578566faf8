"""Success-rate benchmarking across planning strategies and posterior
marginal export.

Benchmark trials are independently seeded from (seed, trial index), so
results are identical for any worker count and aggregation is a
deterministic reduction in trial order. Success simulation always uses
nuisance values resampled after planning, never the ones behind the
planner's observation.
"""

from __future__ import annotations

import csv
import math
import os
import time
from dataclasses import dataclass

import numpy as np

from . import world as w
from .distributions import (
    HandPrior,
    ScenePrior,
    hand_prior_sample_batch,
    mixture_log_prob_batch,
    scene_prior_sample,
)
from .errors import DataError, NumericError, PlanError
from .hand import GRASP_TYPES
from .planner import STRATEGIES, plan_strategy
from .ratio import embed_observation, logits_given_embedding, oracle_conditioning

Z_95 = 1.959963984540054  # two-sided 95% normal quantile


def wilson_interval(successes: int, n: int, z: float = Z_95) -> tuple:
    """Wilson score interval; valid for rates near 0 unlike the normal
    approximation."""
    if n <= 0:
        raise DataError("interval needs at least one trial")
    if not 0 <= successes <= n:
        raise DataError("successes must lie in [0, n]")
    p = successes / n
    z2 = z * z
    denom = 1.0 + z2 / n
    center = (p + z2 / (2.0 * n)) / denom
    half = z * math.sqrt(p * (1.0 - p) / n + z2 / (4.0 * n * n)) / denom
    return (max(0.0, center - half), min(1.0, center + half))


@dataclass
class BenchmarkResult:
    strategy: str
    n_trials: int
    successes: int
    rate: float
    interval: tuple
    per_object: dict
    plan_failures: int
    mean_plan_seconds: float
    seed: int

    def __post_init__(self) -> None:
        if not 0 <= self.successes <= self.n_trials:
            raise DataError("successes must lie in [0, n_trials]")
        lo, hi = self.interval
        if not (0.0 <= lo <= hi <= 1.0):
            raise DataError("interval must be an ordered pair inside [0, 1]")

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "n_trials": self.n_trials,
            "successes": self.successes,
            "rate": float(self.rate),
            "wilson_low": float(self.interval[0]),
            "wilson_high": float(self.interval[1]),
            "per_object": self.per_object,
            "plan_failures": self.plan_failures,
            "mean_plan_seconds": float(self.mean_plan_seconds),
            "seed": self.seed,
        }

    @staticmethod
    def from_dict(d: dict) -> "BenchmarkResult":
        return BenchmarkResult(
            d["strategy"],
            int(d["n_trials"]),
            int(d["successes"]),
            float(d["rate"]),
            (float(d["wilson_low"]), float(d["wilson_high"])),
            d["per_object"],
            int(d["plan_failures"]),
            float(d["mean_plan_seconds"]),
            int(d["seed"]),
        )


def observation_for(strategy: str, scene: w.Scene, nuis, cam: w.CameraParams, rng):
    """Build the conditioning input a strategy expects for one scene."""
    if strategy.startswith("image"):
        return w.render_depth(scene, nuis, cam, rng).data
    if strategy.startswith("oracle"):
        return oracle_conditioning(scene.obj, scene.pose)
    return None


def run_trial(
    strategy: str,
    models: dict,
    trial: int,
    seed: int,
    prior: HandPrior,
    scene_prior: ScenePrior,
    world_params: w.WorldParams,
    cam: w.CameraParams,
    n_candidates: int,
    max_iters: int,
) -> tuple:
    """One benchmark trial; returns (trial, object name, S, plan_failed,
    plan_seconds)."""
    rng = np.random.default_rng((seed, trial))
    scene = scene_prior_sample(scene_prior, rng)
    obs_nuis = w.sample_nuisances(cam, world_params, rng)
    observation = observation_for(strategy, scene, obs_nuis, cam, rng)
    t0 = time.perf_counter()
    try:
        res = plan_strategy(strategy, models, observation, prior, rng, n_candidates, max_iters)
    except (PlanError, NumericError):
        return (trial, scene.obj.name, 0, True, time.perf_counter() - t0)
    dt = time.perf_counter() - t0
    sim_nuis = w.sample_nuisances(cam, world_params, rng)
    outcome = w.simulate_grasp(res.hand, scene.obj, scene.pose, sim_nuis, world_params, rng)
    return (trial, scene.obj.name, int(outcome.success), False, dt)


_EVAL_CTX: dict = {}


def _init_eval_ctx(ctx: dict) -> None:
    global _EVAL_CTX
    _EVAL_CTX = ctx


def _trial_worker(trial: int) -> tuple:
    c = _EVAL_CTX
    return run_trial(
        c["strategy"],
        c["models"],
        trial,
        c["seed"],
        c["prior"],
        c["scene_prior"],
        c["world"],
        c["camera"],
        c["n_candidates"],
        c["max_iters"],
    )


def run_benchmark(
    strategy: str,
    models: dict,
    n_trials: int,
    seed: int,
    prior: HandPrior | None = None,
    scene_prior: ScenePrior | None = None,
    world_params: w.WorldParams | None = None,
    cam: w.CameraParams | None = None,
    n_candidates: int = 1000,
    max_iters: int = 20,
    workers: int = 1,
    zero_timing: bool = False,
) -> BenchmarkResult:
    """Success rate of one strategy over independently seeded trials."""
    if strategy not in STRATEGIES:
        raise DataError(f"unknown strategy {strategy!r}")
    if n_trials <= 0:
        raise DataError("benchmark needs at least one trial")
    prior = prior if prior is not None else HandPrior()
    scene_prior = scene_prior if scene_prior is not None else ScenePrior(w.default_catalog())
    world_params = world_params if world_params is not None else w.WorldParams()
    cam = cam if cam is not None else w.CameraParams()

    ctx = {
        "strategy": strategy,
        "models": models,
        "seed": seed,
        "prior": prior,
        "scene_prior": scene_prior,
        "world": world_params,
        "camera": cam,
        "n_candidates": n_candidates,
        "max_iters": max_iters,
    }
    if workers > 1:
        import multiprocessing as mp

        with mp.Pool(workers, initializer=_init_eval_ctx, initargs=(ctx,)) as pool:
            rows = pool.map(_trial_worker, range(n_trials), chunksize=8)
    else:
        _init_eval_ctx(ctx)
        rows = [_trial_worker(t) for t in range(n_trials)]

    rows.sort(key=lambda r: r[0])
    successes = 0
    failures = 0
    times = []
    per_object: dict = {}
    for _, name, s, plan_failed, dt in rows:
        entry = per_object.setdefault(name, {"trials": 0, "successes": 0})
        entry["trials"] += 1
        entry["successes"] += s
        successes += s
        failures += plan_failed
        times.append(dt)
    for entry in per_object.values():
        entry["rate"] = entry["successes"] / entry["trials"]
    return BenchmarkResult(
        strategy,
        n_trials,
        successes,
        successes / n_trials,
        wilson_interval(successes, n_trials),
        per_object,
        failures,
        0.0 if zero_timing else float(np.mean(times)),
        seed,
    )


# --- posterior marginal export ---


@dataclass
class ExportGrids:
    """Grid sizes for the marginal export; position bounds default to
    the prior's support box."""

    nx: int = 12
    ny: int = 12
    nz: int = 10
    n_rotations: int = 256
    n_marginal: int = 64
    x_low: np.ndarray | None = None
    x_high: np.ndarray | None = None

    def __post_init__(self) -> None:
        for v in (self.nx, self.ny, self.nz, self.n_rotations, self.n_marginal):
            if v < 1:
                raise DataError("grid sizes must be at least 1")


@dataclass
class PosteriorExport:
    positions: np.ndarray
    position_density: np.ndarray
    rotations: np.ndarray
    rotation_density: np.ndarray
    grasp_probs: np.ndarray

    def __post_init__(self) -> None:
        if abs(float(np.sum(self.grasp_probs)) - 1.0) > 1e-9:
            raise DataError("grasp probabilities must sum to 1")
        for arr in (self.position_density, self.rotation_density, self.grasp_probs):
            if not np.all(np.isfinite(arr)) or np.any(arr < 0.0):
                raise DataError("densities must be finite and non-negative")


def _ratio_sum(success_model, cond_model, cond_emb, X, Q, G) -> np.ndarray:
    s_emb = embed_observation(success_model, 1.0)
    out = logits_given_embedding(success_model, s_emb, X, Q, G)
    if cond_model is not None:
        out = out + logits_given_embedding(cond_model, cond_emb, X, Q, G)
    return np.exp(out)


def export_posterior(
    success_model,
    cond_model,
    observation,
    prior: HandPrior,
    grids: ExportGrids | None = None,
    seed: int = 0,
) -> PosteriorExport:
    """Monte Carlo marginals of ratio x ratio x prior.

    Positions: cell-center grid over the support box, rotation and
    grasp type integrated out with shared prior draws; the density is
    normalized to integrate to 1 over the box. Rotations: prior samples
    carrying posterior density values. Grasp types: ratio-weighted
    prior probabilities.
    """
    grids = grids if grids is not None else ExportGrids()
    if success_model is None:
        raise DataError("posterior export needs a success-ratio model")
    cond_emb = None
    if cond_model is not None:
        cond_emb = embed_observation(cond_model, observation)

    lo = prior.x_low if grids.x_low is None else np.asarray(grids.x_low, dtype=np.float64)
    hi = prior.x_high if grids.x_high is None else np.asarray(grids.x_high, dtype=np.float64)
    if np.any(lo < prior.x_low) or np.any(hi > prior.x_high) or np.any(hi <= lo):
        raise DataError("position grid must lie inside the prior support box")

    rng = np.random.default_rng(seed)
    Xm, Qm = hand_prior_sample_batch(prior, rng, grids.n_marginal)
    Gm = rng.choice(len(GRASP_TYPES), size=grids.n_marginal, p=prior.grasp_probs)

    axes = [
        lo[k] + (np.arange(n) + 0.5) * (hi[k] - lo[k]) / n
        for k, n in enumerate((grids.nx, grids.ny, grids.nz))
    ]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    points = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    n_pts = len(points)

    pos_raw = np.zeros(n_pts)
    for j in range(grids.n_marginal):
        Qj = np.tile(Qm[j], (n_pts, 1))
        Gj = np.full(n_pts, Gm[j])
        pos_raw += _ratio_sum(success_model, cond_model, cond_emb, points, Qj, Gj)
    pos_raw /= grids.n_marginal
    cell_vol = float(np.prod((hi - lo) / np.array([grids.nx, grids.ny, grids.nz])))
    pos_density = pos_raw / (float(np.sum(pos_raw)) * cell_vol)

    _, Qr = hand_prior_sample_batch(prior, rng, grids.n_rotations)
    rot_raw = np.zeros(grids.n_rotations)
    for k in range(grids.n_marginal):
        Xk = np.tile(Xm[k], (grids.n_rotations, 1))
        Gk = np.full(grids.n_rotations, Gm[k])
        rot_raw += _ratio_sum(success_model, cond_model, cond_emb, Xk, Qr, Gk)
    rot_raw /= grids.n_marginal
    rot_density = np.exp(mixture_log_prob_batch(prior.rotation, Qr)) * rot_raw / float(np.mean(rot_raw))

    grasp_raw = np.zeros(len(GRASP_TYPES))
    for gi in range(len(GRASP_TYPES)):
        Gg = np.full(grids.n_marginal, gi)
        grasp_raw[gi] = prior.grasp_probs[gi] * float(
            np.mean(_ratio_sum(success_model, cond_model, cond_emb, Xm, Qm, Gg))
        )
    grasp_probs = grasp_raw / float(np.sum(grasp_raw))

    return PosteriorExport(points, pos_density, Qr, rot_density, grasp_probs)


def _atomic_csv(path: str, header: list, rows) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)
    os.replace(tmp, path)


def write_posterior_csvs(export: PosteriorExport, out_dir: str) -> dict:
    """Write positions.csv, rotations.csv, grasp.csv; returns the paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "positions": os.path.join(out_dir, "positions.csv"),
        "rotations": os.path.join(out_dir, "rotations.csv"),
        "grasp": os.path.join(out_dir, "grasp.csv"),
    }
    _atomic_csv(
        paths["positions"],
        ["x", "y", "z", "density"],
        (
            [f"{p[0]:.9g}", f"{p[1]:.9g}", f"{p[2]:.9g}", f"{d:.9g}"]
            for p, d in zip(export.positions, export.position_density)
        ),
    )
    _atomic_csv(
        paths["rotations"],
        ["w", "x", "y", "z", "density"],
        (
            [f"{q[0]:.9g}", f"{q[1]:.9g}", f"{q[2]:.9g}", f"{q[3]:.9g}", f"{d:.9g}"]
            for q, d in zip(export.rotations, export.rotation_density)
        ),
    )
    _atomic_csv(
        paths["grasp"],
        ["type", "prob"],
        ([g, f"{p:.9g}"] for g, p in zip(GRASP_TYPES, export.grasp_probs)),
    )
    return paths
