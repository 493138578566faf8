import csv
import os

import numpy as np
import pytest
from scipy.stats import binomtest

from deskgrasp import eval as ev
from deskgrasp import ratio
from deskgrasp import world as w
from deskgrasp.distributions import HandPrior, ScenePrior, mixture_log_prob_batch
from deskgrasp.errors import DataError, PlanError
from deskgrasp.hand import GRASP_TYPES
from deskgrasp.ratio import RatioModel, _LAYOUTS, init_ratio_params

RNG = np.random.default_rng


def zero_model(kind: str, seed: int = 0, hidden: int = 32) -> RatioModel:
    params = init_ratio_params(kind, RNG(seed), hidden)
    return RatioModel(kind, _LAYOUTS[kind], params, hidden)


def random_head_model(kind: str, seed: int, hidden: int = 32) -> RatioModel:
    rng = RNG(seed)
    params = init_ratio_params(kind, rng, hidden)
    head = params["trunk"][-1]
    head["w"] = rng.normal(size=head["w"].shape) * 0.3
    head["b"] = rng.normal(size=head["b"].shape) * 0.1
    return RatioModel(kind, _LAYOUTS[kind], params, hidden)


# --- Wilson intervals ---


def test_wilson_matches_scipy() -> None:
    for s, n in [(0, 10), (1, 10), (5, 10), (0, 500), (7, 500), (250, 500), (499, 500), (500, 500)]:
        lo, hi = ev.wilson_interval(s, n)
        ref = binomtest(s, n).proportion_ci(confidence_level=0.95, method="wilson")
        assert lo == pytest.approx(ref.low, abs=1e-12)
        assert hi == pytest.approx(ref.high, abs=1e-12)


def test_wilson_properties() -> None:
    lo, hi = ev.wilson_interval(3, 200)
    assert 0.0 <= lo <= 3 / 200 <= hi <= 1.0
    lo2, hi2 = ev.wilson_interval(30, 2000)
    assert hi2 - lo2 < hi - lo
    with pytest.raises(DataError):
        ev.wilson_interval(1, 0)
    with pytest.raises(DataError):
        ev.wilson_interval(5, 3)


# --- benchmark ---


def test_prior_sample_rate_in_world_band() -> None:
    res = ev.run_benchmark("prior-sample", {}, 2000, seed=100, zero_timing=True)
    assert 0.005 <= res.rate <= 0.10
    assert res.interval[0] > 0.0
    assert res.plan_failures == 0


def test_benchmark_rejects_bad_inputs() -> None:
    with pytest.raises(DataError):
        ev.run_benchmark("prior-sample", {}, 0, seed=1)
    with pytest.raises(DataError):
        ev.run_benchmark("grid-search", {}, 10, seed=1)


def test_benchmark_deterministic() -> None:
    models = {"success": zero_model("success")}
    kw = dict(n_candidates=60, max_iters=3, zero_timing=True)
    a = ev.run_benchmark("metric-map", models, 12, seed=7, **kw)
    b = ev.run_benchmark("metric-map", models, 12, seed=7, **kw)
    assert a.to_dict() == b.to_dict()
    c = ev.run_benchmark("metric-map", models, 12, seed=8, **kw)
    assert c.seed != a.seed


def test_benchmark_worker_split_invariance() -> None:
    a = ev.run_benchmark("prior-sample", {}, 30, seed=21, workers=1, zero_timing=True)
    b = ev.run_benchmark("prior-sample", {}, 30, seed=21, workers=2, zero_timing=True)
    assert a.to_dict() == b.to_dict()


def test_benchmark_per_object_accounting() -> None:
    res = ev.run_benchmark("prior-sample", {}, 400, seed=5, zero_timing=True)
    assert sum(e["trials"] for e in res.per_object.values()) == 400
    assert sum(e["successes"] for e in res.per_object.values()) == res.successes
    for e in res.per_object.values():
        assert e["rate"] == e["successes"] / e["trials"]
    names = {o.name for o in w.default_catalog()}
    assert set(res.per_object) <= names


def test_benchmark_flags_plan_failures(monkeypatch) -> None:
    def boom(*args, **kwargs):
        raise PlanError("no feasible candidate")

    monkeypatch.setattr(ev, "plan_strategy", boom)
    res = ev.run_benchmark(
        "metric-map", {"success": zero_model("success")}, 9, seed=3, zero_timing=True
    )
    assert res.plan_failures == 9
    assert res.successes == 0


def test_benchmark_reports_plan_time() -> None:
    models = {"success": zero_model("success")}
    res = ev.run_benchmark("metric-map", models, 3, seed=4, n_candidates=40, max_iters=2)
    assert res.mean_plan_seconds > 0.0
    res0 = ev.run_benchmark(
        "metric-map", models, 3, seed=4, n_candidates=40, max_iters=2, zero_timing=True
    )
    assert res0.mean_plan_seconds == 0.0


def test_benchmark_result_round_trip_and_validation() -> None:
    res = ev.run_benchmark("prior-sample", {}, 50, seed=9, zero_timing=True)
    back = ev.BenchmarkResult.from_dict(res.to_dict())
    assert back.to_dict() == res.to_dict()
    with pytest.raises(DataError):
        ev.BenchmarkResult("prior-sample", 5, 6, 1.2, (0.0, 1.0), {}, 0, 0.0, 0)
    with pytest.raises(DataError):
        ev.BenchmarkResult("prior-sample", 5, 2, 0.4, (0.7, 0.2), {}, 0, 0.0, 0)


# --- posterior export ---


def test_posterior_with_stub_ratios_is_the_prior() -> None:
    prior = HandPrior()
    grids = ev.ExportGrids(nx=6, ny=5, nz=4, n_rotations=64, n_marginal=16)
    exp = ev.export_posterior(zero_model("success"), None, None, prior, grids, seed=2)
    vol = float(np.prod(prior.x_high - prior.x_low))
    np.testing.assert_allclose(exp.position_density, 1.0 / vol, rtol=1e-12)
    np.testing.assert_allclose(
        exp.rotation_density, np.exp(mixture_log_prob_batch(prior.rotation, exp.rotations))
    )
    np.testing.assert_allclose(exp.grasp_probs, prior.grasp_probs, atol=1e-12)


def test_posterior_normalization() -> None:
    prior = HandPrior()
    grids = ev.ExportGrids(nx=5, ny=5, nz=4, n_rotations=32, n_marginal=12)
    exp = ev.export_posterior(
        random_head_model("success", 11),
        random_head_model("oracle", 12),
        ratio.oracle_conditioning(w.default_catalog()[2], w.ScenePose(0.01, 0.0, 0.5)),
        prior,
        grids,
        seed=3,
    )
    assert abs(float(np.sum(exp.grasp_probs)) - 1.0) <= 1e-9
    cell = float(np.prod((prior.x_high - prior.x_low) / np.array([5, 5, 4])))
    assert float(np.sum(exp.position_density)) * cell == pytest.approx(1.0, abs=1e-9)
    assert np.all(exp.position_density >= 0.0)


def test_posterior_validates_inputs() -> None:
    prior = HandPrior()
    with pytest.raises(DataError):
        ev.export_posterior(None, None, None, prior)
    with pytest.raises(DataError):
        ev.ExportGrids(nx=0)
    bad = ev.ExportGrids(nx=4, ny=4, nz=4, x_low=np.array([-0.5, 0.0, 0.15]), x_high=np.array([0.1, 0.1, 0.3]))
    with pytest.raises(DataError):
        ev.export_posterior(zero_model("success"), None, None, prior, bad)


def test_posterior_csv_export(tmp_path) -> None:
    prior = HandPrior()
    grids = ev.ExportGrids(nx=4, ny=3, nz=2, n_rotations=16, n_marginal=8)
    exp = ev.export_posterior(zero_model("success"), None, None, prior, grids, seed=4)
    paths = ev.write_posterior_csvs(exp, str(tmp_path))
    with open(paths["positions"], newline="") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["x", "y", "z", "density"]
    assert len(rows) == 1 + 4 * 3 * 2
    floats = [float(v) for v in rows[1]]
    assert all(np.isfinite(floats))
    with open(paths["rotations"], newline="") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["w", "x", "y", "z", "density"]
    assert len(rows) == 1 + 16
    with open(paths["grasp"], newline="") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["type", "prob"]
    assert [r[0] for r in rows[1:]] == list(GRASP_TYPES)
    assert sum(float(r[1]) for r in rows[1:]) == pytest.approx(1.0, abs=1e-6)
    assert not any(name.endswith(".tmp") for name in os.listdir(tmp_path))


# --- trained-model posterior shape ---


@pytest.fixture(scope="module")
def trained_posterior_models():
    """Success model on 40k episodes plus a conditioning model on 2000
    rejection-sampled positives; sized so the low-z concentration of the
    conditioned posterior is clearly resolved."""
    hp = HandPrior()
    sp = ScenePrior(w.default_catalog())
    wp = w.WorldParams()
    cam = w.CameraParams()
    head, positives = [], []
    i = 0
    while len(positives) < 2000 and i < 250000:
        rec, _ = w.run_episode(i, 888, hp, sp, wp, cam, "none")
        if i < 40000:
            head.append(rec)
        if rec.success:
            positives.append(rec)
        i += 1
    assert len(positives) == 2000
    succ, _ = ratio.train_success_ratio(
        head, ratio.TrainSpec(batch_size=256, max_epochs=40, lr=3e-3, patience=6, hidden=128), seed=12
    )
    orac, _ = ratio.train_oracle_ratio(
        positives,
        ratio.TrainSpec(batch_size=256, max_epochs=120, lr=1e-3, patience=15, hidden=128),
        seed=13,
    )
    return succ, orac


def test_posterior_mass_sits_above_the_object(trained_posterior_models) -> None:
    succ, orac = trained_posterior_models
    prior = HandPrior()
    box = w.default_catalog()[0]  # 0.15 m tall box, centered scene
    obs = ratio.oracle_conditioning(box, w.ScenePose(0.0, 0.0, 0.0))
    grids = ev.ExportGrids(nx=8, ny=8, nz=10, n_rotations=64, n_marginal=48)
    exp = ev.export_posterior(succ, orac, obs, prior, grids, seed=5)
    slices = exp.position_density.reshape(8, 8, 10).mean(axis=(0, 1))
    zs = prior.x_low[2] + (np.arange(10) + 0.5) * (prior.x_high[2] - prior.x_low[2]) / 10
    band = float(slices[(zs >= 0.15) & (zs <= 0.23)].mean())
    top = float(slices[-1])
    assert band >= 2.0 * top
