import numpy as np
import pytest

from deskgrasp import distributions as dist
from deskgrasp import ratio
from deskgrasp import world as w
from deskgrasp.errors import DataError
from deskgrasp.geometry import normalize_quat
from deskgrasp.hand import GRASP_TYPES, HandConfig

RNG = np.random.default_rng


def quick_spec(**kw) -> ratio.TrainSpec:
    base = dict(batch_size=128, max_epochs=30, lr=3e-3, patience=5, hidden=64)
    base.update(kw)
    return ratio.TrainSpec(**base)


def synth_1d(n: int, seed: int):
    """Scalar world with a closed-form ratio: p(S=1|u) = u for u ~ U(0,1),
    so r(S=1|u) = u / E[u] = 2u."""
    rng = RNG(seed)
    u = rng.uniform(0.0, 1.0, size=n)
    s = (rng.uniform(size=n) < u).astype(np.float64)
    return u[:, None], s[:, None]


def test_one_dimensional_ratio_matches_closed_form() -> None:
    u, s = synth_1d(6000, 0)
    trunk, params, report = ratio.train_ratio_from_arrays(s, u, quick_spec(), seed=1)
    grid = np.linspace(0.05, 0.95, 61)[:, None]
    z = np.concatenate([np.ones_like(grid), grid], axis=1)
    logits = trunk.apply(params["trunk"], z)[:, 0]
    r_hat = np.exp(logits)
    mae = float(np.mean(np.abs(r_hat - 2.0 * grid[:, 0])))
    assert mae < 0.1
    # Bayes consistency: the ratio times the marginal recovers p(S=1|u)=u.
    p_s1 = float(np.mean(s))
    assert float(np.mean(np.abs(r_hat * p_s1 - grid[:, 0]))) < 0.05
    assert report.best_epoch >= 0
    assert all(np.isfinite(v) for v in report.val_loss)


def test_independent_flag_gives_flat_ratio() -> None:
    rng = RNG(2)
    u = rng.uniform(0.0, 1.0, size=(4000, 1))
    s = (rng.uniform(size=(4000, 1)) < 0.3).astype(np.float64)
    trunk, params, _ = ratio.train_ratio_from_arrays(s, u, quick_spec(), seed=3)
    grid = np.linspace(0.02, 0.98, 50)[:, None]
    z = np.concatenate([np.ones_like(grid), grid], axis=1)
    logits = trunk.apply(params["trunk"], z)[:, 0]
    assert float(np.mean(np.abs(logits))) < 0.1


def test_derangement_has_no_fixed_points() -> None:
    for n in [2, 3, 5, 17, 64]:
        idx = ratio.derangement_indices(n)
        assert sorted(idx) == list(range(n))
        assert not np.any(idx == np.arange(n))
    with pytest.raises(DataError):
        ratio.derangement_indices(1)


def test_untrained_model_scores_zero_log_ratio() -> None:
    rng = RNG(4)
    params = ratio.init_ratio_params("success", rng)
    model = ratio.RatioModel("success", ratio._LAYOUTS["success"], params)
    h = HandConfig(np.array([0.05, -0.02, 0.2]), normalize_quat(rng.normal(size=4)), "wide")
    assert ratio.log_ratio(model, 1.0, h) == 0.0
    # A constant head bias c shifts the logit, and the log-ratio IS the
    # logit, exactly.
    model.params["trunk"][-1]["b"][:] = -1.75
    assert ratio.log_ratio(model, 1.0, h) == pytest.approx(-1.75, abs=1e-15)


def test_log_ratio_gradient_matches_finite_differences() -> None:
    rng = RNG(5)
    params = ratio.init_ratio_params("success", rng)
    # Randomize the zero-init head so gradients are non-trivial.
    params["trunk"][-1]["w"] = rng.normal(size=params["trunk"][-1]["w"].shape) * 0.3
    model = ratio.RatioModel("success", ratio._LAYOUTS["success"], params)

    for trial in range(5):
        x = rng.uniform([-0.1, -0.1, 0.13], [0.1, 0.1, 0.3])
        q = normalize_quat(rng.normal(size=4))
        g = GRASP_TYPES[int(rng.integers(3))]
        h = HandConfig(x, q, g)
        val, grad = ratio.log_ratio_grad(model, 1.0, h)
        assert val == pytest.approx(ratio.log_ratio(model, 1.0, h), abs=1e-12)

        eps = 1e-6
        for k in range(3):
            dx = np.zeros(3)
            dx[k] = eps
            fp = ratio.log_ratio(model, 1.0, HandConfig(x + dx, q, g))
            fm = ratio.log_ratio(model, 1.0, HandConfig(x - dx, q, g))
            num = (fp - fm) / (2 * eps)
            assert num == pytest.approx(grad.dx[k], rel=1e-3, abs=1e-8)

        for _ in range(3):
            v = rng.normal(size=4)
            v -= np.dot(v, q) * q
            v /= np.linalg.norm(v)
            fp = ratio.log_ratio(model, 1.0, HandConfig(x, normalize_quat(q + eps * v), g))
            fm = ratio.log_ratio(model, 1.0, HandConfig(x, normalize_quat(q - eps * v), g))
            num = (fp - fm) / (2 * eps)
            assert num == pytest.approx(float(np.dot(grad.dq, v)), rel=1e-3, abs=1e-8)


def test_oracle_conditioning_round_trip() -> None:
    obj = w.ObjectSpec("cylinder", np.array([0.07, 0.07, 0.15]), beta=1.07, friction=0.93)
    pose = w.ScenePose(0.04, -0.06, 2.4)
    vec = ratio.oracle_conditioning(obj, pose)
    layout = ratio._LAYOUTS["oracle"]
    assert vec.shape == (layout.cond_width,)
    onehot = vec[layout.slice_of("shape_onehot")]
    assert w.SHAPES[int(np.argmax(onehot))] == "cylinder" and onehot.sum() == 1.0
    np.testing.assert_allclose(vec[layout.slice_of("scaled_dims")], ratio.X_SCALE * 1.07 * obj.dims)
    assert vec[layout.slice_of("friction")][0] == 0.93
    np.testing.assert_allclose(vec[layout.slice_of("position_xy")], ratio.X_SCALE * np.array([0.04, -0.06]))
    sc = vec[layout.slice_of("yaw_sincos")]
    assert np.arctan2(sc[0], sc[1]) == pytest.approx(np.arctan2(np.sin(2.4), np.cos(2.4)), abs=1e-12)


def test_layout_descriptor_round_trip() -> None:
    for kind in ("success", "image", "oracle"):
        layout = ratio._LAYOUTS[kind]
        back = ratio.LayoutDescriptor.from_dict(layout.to_dict())
        assert back == layout
    with pytest.raises(DataError):
        ratio.LayoutDescriptor("bogus", ())


def _toy_records(n: int, seed: int):
    hp = dist.HandPrior()
    sp = dist.ScenePrior(w.default_catalog())
    wp = w.WorldParams()
    cam = w.CameraParams()
    return [w.run_episode(i, seed, hp, sp, wp, cam, "none")[0] for i in range(n)]


@pytest.fixture(scope="module")
def toy_success_model():
    records = _toy_records(8000, 888)
    spec = ratio.TrainSpec(batch_size=256, max_epochs=30, lr=3e-3, patience=5, hidden=128)
    model, report = ratio.train_success_ratio(records, spec, seed=12)
    return records, model, report


def test_success_trainer_beats_chance_and_orders_hands(toy_success_model) -> None:
    records, model, report = toy_success_model
    assert report.best_val < np.log(2.0)
    emb = ratio.embed_observation(model, 1.0)
    good = [r for r in records if r.success][:40]
    bad = [r for r in records if not r.success][:40]

    def mean_logit(rs):
        X = np.array([r.h.x for r in rs])
        Q = np.array([r.h.q for r in rs])
        G = [r.h.g_index for r in rs]
        return float(np.mean(ratio.logits_given_embedding(model, emb, X, Q, G)))

    assert mean_logit(good) > mean_logit(bad)


def test_training_is_bitwise_reproducible() -> None:
    records = _toy_records(400, 777)
    spec = quick_spec(max_epochs=4, hidden=32)
    m1, r1 = ratio.train_success_ratio(records, spec, seed=9)
    m2, r2 = ratio.train_success_ratio(records, spec, seed=9)
    leaves1: list = []
    leaves2: list = []
    ratio.nets._tree_leaves(m1.params, (), leaves1)
    ratio.nets._tree_leaves(m2.params, (), leaves2)
    assert [n for n, _ in leaves1] == [n for n, _ in leaves2]
    for (_, a), (_, b) in zip(leaves1, leaves2):
        np.testing.assert_array_equal(a, b)
    assert r1.train_loss == r2.train_loss and r1.val_loss == r2.val_loss


def test_calibration_diagnostic_stub_and_negative_control(toy_success_model) -> None:
    prior = dist.HandPrior()
    rng = RNG(11)
    # Analytic unit ratio: diagnostic is exactly 1.
    assert ratio.calibration_diagnostic(lambda h: 0.0, prior, 500, rng) == 1.0

    _, model, _ = toy_success_model
    value = ratio.calibration_diagnostic(model, prior, 4000, RNG(13))
    assert 0.8 < value < 1.2
    # Label-flipped estimator (logit negated at the optimum): far from 1.
    flipped = lambda h: -ratio.log_ratio(model, 1.0, h)  # noqa: E731
    bad = ratio.calibration_diagnostic(flipped, prior, 4000, RNG(13))
    assert not (0.8 <= bad <= 1.2)


def test_image_trainer_constant_image_is_uninformative() -> None:
    rng = RNG(14)
    hp = dist.HandPrior()
    n = 240
    img = np.full((48, 64), 0.7)
    records = []
    for i in range(n):
        h = dist.hand_prior_sample(hp, rng)
        records.append(
            w.EpisodeRecord(
                idx=i,
                h=h,
                obj=w.ObjectSpec("box", np.array([0.07, 0.07, 0.15])),
                pose=w.ScenePose(0.0, 0.0, 0.0),
                nuis=w.nominal_nuisances(w.CameraParams()),
                success=1,
                failure="none",
                img=None,
            )
        )
    images = np.broadcast_to(img, (n, 48, 64))
    spec = quick_spec(batch_size=64, max_epochs=8, hidden=64, min_positives=64)
    model, report = ratio.train_image_ratio(records, images, spec, seed=15)
    emb = ratio.embed_observation(model, img)
    X = np.array([r.h.x for r in records[:80]])
    Q = np.array([r.h.q for r in records[:80]])
    G = [r.h.g_index for r in records[:80]]
    logits = ratio.logits_given_embedding(model, emb, X, Q, G)
    assert float(np.mean(np.abs(logits))) < 0.15
    assert report.n_train + report.n_val == n


def test_image_trainer_input_validation() -> None:
    records = _toy_records(30, 999)
    with pytest.raises(DataError):
        ratio.train_image_ratio(records, np.zeros((29, 48, 64)), quick_spec(), seed=0)
    with pytest.raises(DataError):
        ratio.train_image_ratio(records, np.zeros((30, 48, 64)), quick_spec(min_positives=64), seed=0)
    with pytest.raises(DataError):
        ratio.train_success_ratio([], quick_spec(), seed=0)


def test_oracle_trainer_smoke_and_checkpoint_round_trip(tmp_path) -> None:
    rng = RNG(16)
    hp = dist.HandPrior()
    sp = dist.ScenePrior(w.default_catalog())
    records = []
    for i in range(200):
        h = dist.hand_prior_sample(hp, rng)
        scene = dist.scene_prior_sample(sp, rng)
        records.append(
            w.EpisodeRecord(
                idx=i,
                h=h,
                obj=scene.obj,
                pose=scene.pose,
                nuis=w.nominal_nuisances(w.CameraParams()),
                success=1,
                failure="none",
                img=None,
            )
        )
    spec = quick_spec(batch_size=64, max_epochs=5, hidden=48, min_positives=32)
    model, report = ratio.train_oracle_ratio(records, spec, seed=17)

    path = str(tmp_path / "oracle.ckpt")
    ratio.save_ratio_model(path, model, report)
    back = ratio.load_ratio_model(path)
    assert back.kind == "oracle" and back.layout == model.layout and back.hidden == model.hidden

    cond = ratio.oracle_conditioning(records[0].obj, records[0].pose)
    h = records[3].h
    assert ratio.log_ratio(back, cond, h) == ratio.log_ratio(model, cond, h)
    with pytest.raises(DataError):
        ratio.log_ratio(back, cond[:5], h)
