import numpy as np
import pytest
from scipy.stats import chi2

from deskgrasp import distributions as dist
from deskgrasp import geometry as geo
from deskgrasp.hand import GRASP_TYPES, HandConfig
from deskgrasp.world import ObjectSpec, default_catalog

RNG = np.random.default_rng

# Area of S^3 is 2*pi^2; a kappa=0 power spherical is the uniform density.
LOG_UNIFORM_S3 = -float(np.log(2.0 * np.pi**2))


def uniform_s3(rng, n: int) -> np.ndarray:
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def ps_density_formula(mu, kappa, q):
    """Test-side oracle: the extended (ambient) density formula."""
    log_c = -dist.ps_log_norm(kappa)
    return np.exp(log_c + kappa * np.log1p(np.dot(mu, q)))


def mixture_log_density_formula(modes, kappa, q):
    """Test-side oracle: ambient log mixture density, 8 components."""
    log_c = -dist.ps_log_norm(kappa)
    terms = []
    for sign in (1.0, -1.0):
        for m in modes:
            terms.append(kappa * np.log1p(sign * np.dot(m, q)))
    terms = np.array(terms)
    top = np.max(terms)
    return np.log(1.0 / 8.0) + log_c + top + np.log(np.sum(np.exp(terms - top)))


def central_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        g[j] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def test_ps_log_norm_kappa_zero_is_sphere_area() -> None:
    assert dist.ps_log_norm(0.0) == pytest.approx(float(np.log(2.0 * np.pi**2)), abs=1e-12)


def test_ps_log_prob_uniform_at_kappa_zero() -> None:
    d = dist.PowerSpherical(np.array([1.0, 0.0, 0.0, 0.0]), 0.0)
    rng = RNG(3)
    for q in uniform_s3(rng, 20):
        assert dist.ps_log_prob(d, q) == pytest.approx(LOG_UNIFORM_S3, abs=1e-12)


def test_ps_rejects_bad_inputs() -> None:
    with pytest.raises(ValueError):
        dist.PowerSpherical(np.array([1.0, 0.0, 0.0, 0.1]), 1.0)
    with pytest.raises(ValueError):
        dist.PowerSpherical(np.array([1.0, 0.0, 0.0, 0.0]), -1.0)
    d = dist.PowerSpherical(np.array([1.0, 0.0, 0.0, 0.0]), 5.0)
    with pytest.raises(ValueError):
        dist.ps_log_prob(d, np.array([1.0, 0.0, 0.0, 0.1]))


def test_ps_normalization_monte_carlo() -> None:
    # MC estimate of the integral over S^3 with 1e6 uniform draws.
    rng = RNG(5)
    qs = uniform_s3(rng, 1_000_000)
    for kappa in (0.0, 2.0, 30.0):
        d = dist.PowerSpherical(geo.normalize_quat([0.3, -0.5, 0.8, 0.1]), kappa)
        t = np.clip(qs @ d.mu, -1.0, 1.0)
        with np.errstate(divide="ignore"):
            log_p = d._log_c + kappa * np.log1p(t)
        integral = float(np.mean(np.exp(log_p))) * (2.0 * np.pi**2)
        assert integral == pytest.approx(1.0, rel=0.02)


def test_ps_grad_matches_finite_differences_and_is_parallel_to_mu() -> None:
    rng = RNG(7)
    mu = geo.normalize_quat([0.2, 0.4, -0.7, 0.5])
    for kappa in (2.0, 7.5, 30.0):
        d = dist.PowerSpherical(mu, kappa)
        for q in uniform_s3(rng, 30):
            grad = dist.ps_grad(d, q)
            fd = central_grad(lambda x: ps_density_formula(mu, kappa, x), q, h=1e-6)
            np.testing.assert_allclose(grad, fd, rtol=1e-5, atol=1e-10)
            # Parallel to mu.
            cross = grad - np.dot(grad, mu) * mu
            assert np.linalg.norm(cross) <= 1e-12 * max(1.0, np.linalg.norm(grad))


def test_ps_grad_zero_at_antipode_for_large_kappa() -> None:
    mu = np.array([1.0, 0.0, 0.0, 0.0])
    d = dist.PowerSpherical(mu, 30.0)
    np.testing.assert_array_equal(dist.ps_grad(d, -mu), np.zeros(4))


def test_ps_sample_unit_norm_and_mean_direction() -> None:
    mu = geo.normalize_quat([0.5, 0.5, 0.5, 0.5])
    d = dist.PowerSpherical(mu, 30.0)
    rng = RNG(11)
    samples = np.array([dist.ps_sample(d, rng) for _ in range(20_000)])
    np.testing.assert_allclose(np.linalg.norm(samples, axis=1), 1.0, atol=1e-9)
    mean_dir = samples.mean(axis=0)
    mean_dir /= np.linalg.norm(mean_dir)
    angle = np.degrees(np.arccos(np.clip(np.dot(mean_dir, mu), -1, 1)))
    assert angle < 5.0


def test_ps_sample_marginal_chi_square() -> None:
    # The t = mu.q marginal must follow (1+t)^kappa (1-t^2)^(1/2), checked
    # against numeric integration of that expression with a chi^2 test.
    kappa = 30.0
    mu = geo.normalize_quat([0.1, -0.3, 0.9, 0.2])
    d = dist.PowerSpherical(mu, kappa)
    rng = RNG(13)
    n = 100_000
    t = np.array([np.dot(dist.ps_sample(d, rng), mu) for _ in range(n)])

    grid = np.linspace(-1.0, 1.0, 200_001)
    with np.errstate(divide="ignore"):
        dens = np.exp(kappa * np.log1p(grid)) * np.sqrt(np.maximum(0.0, 1.0 - grid**2))
    cdf = np.concatenate(([0.0], np.cumsum((dens[1:] + dens[:-1]) / 2.0 * np.diff(grid))))
    cdf /= cdf[-1]
    # 20 equal-probability bins from the numeric CDF.
    edges = np.interp(np.linspace(0.0, 1.0, 21), cdf, grid)
    edges[0], edges[-1] = -1.0, 1.0
    counts, _ = np.histogram(t, bins=edges)
    expected = n / 20.0
    stat = float(np.sum((counts - expected) ** 2 / expected))
    p_value = float(chi2.sf(stat, df=19))
    assert p_value > 0.01


def test_default_modes_are_quarter_turns_and_point_down() -> None:
    modes = dist.default_rotation_modes()
    down = np.array([0.0, 0.0, -1.0])
    for k, m in enumerate(modes):
        r = geo.quat_to_rotmat(m)
        np.testing.assert_allclose(r[:, 0], down, atol=1e-12)
        # Mode k is the base mode composed with a z rotation by k*pi/2.
        expected = geo.quat_mul(geo.z_rotation_quat(k * np.pi / 2.0), modes[0])
        assert min(np.linalg.norm(m - expected), np.linalg.norm(m + expected)) <= 1e-12
    # Adjacent modes differ by a quarter turn, diagonal pairs by a half turn.
    for i in range(4):
        for j in range(i + 1, 4):
            sep = np.pi / 2.0 if (j - i) % 2 == 1 else np.pi
            assert geo.quat_rotation_angle(modes[i], modes[j]) == pytest.approx(sep, abs=1e-9)


def test_mixture_antipodal_bitwise() -> None:
    m = dist.QuaternionMixturePrior()
    rng = RNG(17)
    for q in uniform_s3(rng, 200):
        assert dist.mixture_log_prob(m, q) == dist.mixture_log_prob(m, -q)


def test_mixture_log_prob_matches_formula_oracle() -> None:
    m = dist.QuaternionMixturePrior()
    rng = RNG(19)
    for q in uniform_s3(rng, 100):
        expected = mixture_log_density_formula(m.modes, m.kappa, q)
        assert dist.mixture_log_prob(m, q) == pytest.approx(expected, rel=1e-12, abs=1e-12)


def test_mixture_batch_matches_scalar() -> None:
    m = dist.QuaternionMixturePrior()
    rng = RNG(23)
    qs = uniform_s3(rng, 64)
    batch = dist.mixture_log_prob_batch(m, qs)
    for q, b in zip(qs, batch):
        assert dist.mixture_log_prob(m, q) == pytest.approx(float(b), rel=1e-12)


def test_mixture_normalization_monte_carlo() -> None:
    m = dist.QuaternionMixturePrior()
    rng = RNG(29)
    qs = uniform_s3(rng, 1_000_000)
    integral = float(np.mean(np.exp(dist.mixture_log_prob_batch(m, qs)))) * (2.0 * np.pi**2)
    assert integral == pytest.approx(1.0, rel=0.02)


def test_mixture_grad_matches_finite_differences() -> None:
    m = dist.QuaternionMixturePrior()
    rng = RNG(31)
    count = 0
    for q in uniform_s3(rng, 60):
        if not np.isfinite(dist.mixture_log_prob(m, q)):
            continue
        grad = dist.mixture_grad(m, q)
        fd = central_grad(lambda x: mixture_log_density_formula(m.modes, m.kappa, x), q, h=1e-6)
        np.testing.assert_allclose(grad, fd, rtol=1e-5, atol=1e-8)
        count += 1
    assert count >= 50


def test_mixture_sample_concentrates_near_modes() -> None:
    m = dist.QuaternionMixturePrior()
    rng = RNG(37)
    qs = np.array([dist.mixture_sample(m, rng) for _ in range(4000)])
    np.testing.assert_allclose(np.linalg.norm(qs, axis=1), 1.0, atol=1e-9)
    # Every mode's antipodal pair should collect roughly 1/4 of the draws.
    owner = np.argmax(np.abs(qs @ m.modes.T), axis=1)
    frac = np.bincount(owner, minlength=4) / len(qs)
    assert np.all(frac > 0.15) and np.all(frac < 0.35)


def test_hand_prior_log_prob_support_and_constant() -> None:
    p = dist.HandPrior()
    q = dist.default_rotation_modes()[0]
    inside = HandConfig(np.array([0.0, 0.0, 0.2]), q, "basic")
    outside = HandConfig(np.array([0.2, 0.0, 0.2]), q, "basic")
    assert dist.hand_prior_in_support(p, inside)
    assert not dist.hand_prior_in_support(p, outside)
    assert dist.hand_prior_log_prob(p, outside) == -np.inf
    # Inside the box the positional factor is the constant 1/volume.
    vol = 0.3 * 0.3 * 0.22
    expected = -np.log(vol) + dist.mixture_log_prob(p.rotation, q) + np.log(1.0 / 3.0)
    assert dist.hand_prior_log_prob(p, inside) == pytest.approx(expected, rel=1e-12)


def test_hand_prior_grad_tangent_and_fd() -> None:
    p = dist.HandPrior()
    rng = RNG(41)
    for _ in range(30):
        q = dist.mixture_sample(p.rotation, rng)
        h = HandConfig(np.array([0.0, 0.0, 0.2]), q, "wide")
        g = dist.hand_prior_grad(p, h)
        np.testing.assert_array_equal(g.dx, np.zeros(3))
        assert abs(np.dot(g.dq, q)) <= 1e-9
        # Directional FD along a random tangent through the retraction.
        v = geo.project_sphere_tangent(q, rng.normal(size=4))
        v /= np.linalg.norm(v)
        eps = 1e-6
        fp = dist.mixture_log_prob(p.rotation, geo.retract_sphere(q, eps * v))
        fm = dist.mixture_log_prob(p.rotation, geo.retract_sphere(q, -eps * v))
        fd = (fp - fm) / (2 * eps)
        assert float(np.dot(g.dq, v)) == pytest.approx(fd, rel=1e-5, abs=1e-6)


def test_hand_prior_sample_in_support() -> None:
    p = dist.HandPrior()
    rng = RNG(43)
    seen = set()
    for _ in range(500):
        h = dist.hand_prior_sample(p, rng)
        assert dist.hand_prior_in_support(p, h)
        assert abs(np.linalg.norm(h.q) - 1.0) <= 1e-9
        assert h.g in GRASP_TYPES
        seen.add(h.g)
    assert seen == set(GRASP_TYPES)


def test_hand_prior_sample_batch_matches_bounds() -> None:
    p = dist.HandPrior()
    rng = RNG(47)
    xs, qs = dist.hand_prior_sample_batch(p, rng, 256)
    assert np.all(xs >= p.x_low) and np.all(xs <= p.x_high)
    np.testing.assert_allclose(np.linalg.norm(qs, axis=1), 1.0, atol=1e-9)


def test_hand_prior_validation() -> None:
    with pytest.raises(ValueError):
        dist.HandPrior(x_low=np.array([0.0, 0.0, 0.3]), x_high=np.array([0.1, 0.1, 0.2]))
    with pytest.raises(ValueError):
        dist.HandPrior(grasp_probs=np.array([0.5, 0.5, 0.5]))
    with pytest.raises(ValueError):
        dist.QuaternionMixturePrior(kappa=0.0)


def test_scene_prior_sampling_bounds() -> None:
    sp = dist.ScenePrior(default_catalog())
    rng = RNG(53)
    names = set()
    for _ in range(400):
        s = dist.scene_prior_sample(sp, rng)
        assert -0.05 <= s.pose.x <= 0.05 and -0.05 <= s.pose.y <= 0.05
        assert -np.pi <= s.pose.phi <= np.pi
        assert 0.9 <= s.obj.beta <= 1.1
        names.add(s.obj.name)
    assert len(names) == 8


def test_scene_prior_validation() -> None:
    with pytest.raises(ValueError):
        dist.ScenePrior([])
    with pytest.raises(ValueError):
        dist.ScenePrior(default_catalog(), beta_low=1.2, beta_high=1.1)
    with pytest.raises(ValueError):
        dist.ScenePrior(default_catalog(), xy_low=0.1, xy_high=-0.1)


def test_sphere_uniform_mixture_consistency() -> None:
    # Sanity: mixture density integrates pointwise consistently with its
    # uniform-mixture bound p(q) <= C(kappa) since (1+t) <= 2.
    m = dist.QuaternionMixturePrior()
    bound = -dist.ps_log_norm(m.kappa) + m.kappa * np.log(2.0)
    rng = RNG(59)
    for q in uniform_s3(rng, 50):
        assert dist.mixture_log_prob(m, q) <= bound + 1e-9


def test_catalog_objects_are_valid_specs() -> None:
    for o in default_catalog():
        assert isinstance(o, ObjectSpec)
        assert o.friction > 0 and o.beta == 1.0
