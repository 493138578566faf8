"""Priors over hand configurations and scenes.

The rotation prior is an antipodally symmetric mixture of power
spherical distributions on S^3 (De Cao & Aziz, 2020), with density
proportional to (1 + mu.q)^kappa per component. Four modes, each split
into a +/- antipodal pair, give eight components of weight 1/8. The
default modes point the gripper approach axis straight down at the
table and differ by quarter turns about the world z axis.

Positions are uniform in an axis-aligned box, the grasp type is
categorical, and scenes (object choice, planar pose, scale) are uniform
within their bounds.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import loggamma

from .geometry import (
    TangentVector,
    check_unit_quat,
    normalize_quat,
    project_sphere_tangent,
    quat_mul,
    z_rotation_quat,
)
from .hand import GRASP_TYPES, HandConfig
from .world import ObjectSpec, Scene, ScenePose

LOG_S3_AREA = np.log(2.0 * np.pi**2)


def ps_log_norm(kappa: float) -> float:
    """log of the S^3 power-spherical normalizer N(kappa).

    N = 2^(a+b) pi^b Gamma(a) / Gamma(a+b) with a = kappa + 3/2, b = 3/2;
    the density is (1 + mu.q)^kappa / N. kappa = 0 gives the area of S^3.
    """
    a = kappa + 1.5
    b = 1.5
    return float((a + b) * np.log(2.0) + b * np.log(np.pi) + loggamma(a) - loggamma(a + b))


@dataclass
class PowerSpherical:
    """Power spherical distribution on S^3 with mean direction mu."""

    mu: np.ndarray
    kappa: float

    def __post_init__(self) -> None:
        self.mu = check_unit_quat(self.mu)
        self.kappa = float(self.kappa)
        if not np.isfinite(self.kappa) or self.kappa < 0.0:
            raise ValueError(f"kappa must be finite and >= 0, got {self.kappa}")
        self._log_c = -ps_log_norm(self.kappa)


def ps_log_prob(d: PowerSpherical, q) -> float:
    q = check_unit_quat(q)
    t = float(np.dot(d.mu, q))
    base = 1.0 + t
    if base <= 0.0:
        return d._log_c if d.kappa == 0.0 else -np.inf
    return d._log_c + d.kappa * float(np.log1p(t))


def ps_prob(d: PowerSpherical, q) -> float:
    return float(np.exp(ps_log_prob(d, q)))


def ps_grad(d: PowerSpherical, q) -> np.ndarray:
    """Ambient-space gradient of the density itself: C k mu (1 + mu.q)^(k-1).

    Always parallel to mu; zero at the antipode for kappa > 1.
    """
    q = check_unit_quat(q)
    if d.kappa == 0.0:
        return np.zeros(4)
    t = float(np.dot(d.mu, q))
    base = 1.0 + t
    if base <= 0.0:
        if d.kappa > 1.0:
            return np.zeros(4)
        if d.kappa == 1.0:
            return np.exp(d._log_c) * d.mu
        return np.full(4, np.inf) * d.mu
    scale = np.exp(d._log_c + (d.kappa - 1.0) * np.log1p(t)) * d.kappa
    return scale * d.mu


def ps_sample(d: PowerSpherical, rng: np.random.Generator) -> np.ndarray:
    """Draw one sample: Beta marginal for t = mu.q, uniform subsphere,
    then a Householder reflection taking e1 to mu."""
    a = d.kappa + 1.5
    b = 1.5
    z = rng.beta(a, b)
    t = 2.0 * z - 1.0
    v = rng.normal(size=3)
    v /= np.linalg.norm(v)
    y = np.concatenate(([t], np.sqrt(max(0.0, 1.0 - t * t)) * v))
    e1 = np.array([1.0, 0.0, 0.0, 0.0])
    diff = e1 - d.mu
    nd = np.linalg.norm(diff)
    if nd < 1e-12:
        x = y
    else:
        u = diff / nd
        x = y - 2.0 * np.dot(u, y) * u
    return x / np.linalg.norm(x)


def default_rotation_modes() -> np.ndarray:
    """Four modes: approach axis down, quarter turns apart about z.

    The base mode rotates the gripper x axis onto world -z (a +90 degree
    turn about y); modes k = 1..3 pre-compose z rotations by k*pi/2.
    """
    base = normalize_quat([np.cos(np.pi / 4.0), 0.0, np.sin(np.pi / 4.0), 0.0])
    modes = [normalize_quat(quat_mul(z_rotation_quat(k * np.pi / 2.0), base)) for k in range(4)]
    return np.array(modes)


@dataclass
class QuaternionMixturePrior:
    """Antipodally symmetric 4-mode power-spherical mixture on S^3."""

    modes: np.ndarray = field(default_factory=default_rotation_modes)
    kappa: float = 30.0

    def __post_init__(self) -> None:
        self.modes = np.asarray(self.modes, dtype=np.float64)
        if self.modes.shape != (4, 4):
            raise ValueError(f"expected 4 modes of shape (4,), got {self.modes.shape}")
        for m in self.modes:
            check_unit_quat(m)
        self.kappa = float(self.kappa)
        if not np.isfinite(self.kappa) or self.kappa <= 0.0:
            raise ValueError(f"kappa must be finite and > 0, got {self.kappa}")
        self._log_c = -ps_log_norm(self.kappa)


def _mixture_pair_logs(m: QuaternionMixturePrior, t: np.ndarray) -> np.ndarray:
    """log of [(1+t)^k + (1-t)^k] per mode, computed symmetrically.

    Pooling each antipodal pair first keeps mixture_log_prob bitwise
    equal under q -> -q (the pair sum commutes; the outer sum then runs
    in fixed mode order).
    """
    with np.errstate(divide="ignore"):
        lp = m.kappa * np.log1p(t)
        ln = m.kappa * np.log1p(-t)
    hi = np.maximum(lp, ln)
    lo = np.minimum(lp, ln)
    return hi + np.log1p(np.exp(lo - hi))


def mixture_log_prob(m: QuaternionMixturePrior, q) -> float:
    q = check_unit_quat(q)
    t = m.modes @ q
    t = np.clip(t, -1.0, 1.0)
    pair = _mixture_pair_logs(m, t)
    top = float(np.max(pair))
    s = float(np.sum(np.exp(pair - top)))
    return float(np.log(1.0 / 8.0) + m._log_c + top + np.log(s))


def mixture_log_prob_batch(m: QuaternionMixturePrior, qs: np.ndarray) -> np.ndarray:
    qs = np.asarray(qs, dtype=np.float64)
    t = np.clip(qs @ m.modes.T, -1.0, 1.0)
    with np.errstate(divide="ignore"):
        lp = m.kappa * np.log1p(t)
        ln = m.kappa * np.log1p(-t)
    hi = np.maximum(lp, ln)
    lo = np.minimum(lp, ln)
    pair = hi + np.log1p(np.exp(lo - hi))
    top = np.max(pair, axis=1, keepdims=True)
    s = np.sum(np.exp(pair - top), axis=1)
    return np.log(1.0 / 8.0) + m._log_c + top[:, 0] + np.log(s)


def mixture_grad(m: QuaternionMixturePrior, q) -> np.ndarray:
    """Ambient gradient of the log mixture density at unit q.

    Density-weighted sum of per-component density gradients over the
    mixture density, assembled in log space.
    """
    q = check_unit_quat(q)
    log_p = mixture_log_prob(m, q)
    grad = np.zeros(4)
    log_w = np.log(1.0 / 8.0) + m._log_c
    for sign in (1.0, -1.0):
        mus = sign * m.modes
        t = np.clip(mus @ q, -1.0, 1.0)
        for i in range(4):
            base = 1.0 + t[i]
            if base <= 0.0:
                continue
            coeff = np.exp(log_w + (m.kappa - 1.0) * np.log1p(t[i]) - log_p) * m.kappa
            grad += coeff * mus[i]
    return grad


def mixture_sample(m: QuaternionMixturePrior, rng: np.random.Generator) -> np.ndarray:
    idx = int(rng.integers(8))
    mu = m.modes[idx % 4] * (1.0 if idx < 4 else -1.0)
    return ps_sample(PowerSpherical(mu, m.kappa), rng)


@dataclass
class HandPrior:
    """p(h) = uniform(x; box) * mixture(q) * categorical(g)."""

    x_low: np.ndarray = field(default_factory=lambda: np.array([-0.15, -0.15, 0.12]))
    x_high: np.ndarray = field(default_factory=lambda: np.array([0.15, 0.15, 0.34]))
    rotation: QuaternionMixturePrior = field(default_factory=QuaternionMixturePrior)
    grasp_probs: np.ndarray = field(default_factory=lambda: np.full(3, 1.0 / 3.0))

    def __post_init__(self) -> None:
        self.x_low = np.asarray(self.x_low, dtype=np.float64).reshape(3)
        self.x_high = np.asarray(self.x_high, dtype=np.float64).reshape(3)
        if np.any(self.x_high <= self.x_low):
            raise ValueError("position box must have x_high > x_low per axis")
        self.grasp_probs = np.asarray(self.grasp_probs, dtype=np.float64).reshape(3)
        if np.any(self.grasp_probs < 0) or abs(float(np.sum(self.grasp_probs)) - 1.0) > 1e-9:
            raise ValueError("grasp probabilities must be nonnegative and sum to 1")
        self._log_box = -float(np.sum(np.log(self.x_high - self.x_low)))


def hand_prior_in_support(p: HandPrior, h: HandConfig) -> bool:
    return bool(np.all(h.x >= p.x_low) and np.all(h.x <= p.x_high))


def hand_prior_log_prob(p: HandPrior, h: HandConfig) -> float:
    if not hand_prior_in_support(p, h):
        return -np.inf
    gp = float(p.grasp_probs[h.g_index])
    if gp <= 0.0:
        return -np.inf
    return p._log_box + mixture_log_prob(p.rotation, h.q) + float(np.log(gp))


def hand_prior_grad(p: HandPrior, h: HandConfig) -> TangentVector:
    """Riemannian gradient of log p(h): zero in x, projected mixture grad in q."""
    dq = project_sphere_tangent(h.q, mixture_grad(p.rotation, h.q))
    return TangentVector(np.zeros(3), dq)


def hand_prior_sample(p: HandPrior, rng: np.random.Generator) -> HandConfig:
    x = rng.uniform(p.x_low, p.x_high)
    q = mixture_sample(p.rotation, rng)
    g = GRASP_TYPES[int(rng.choice(3, p=p.grasp_probs))]
    return HandConfig(x, q, g)


def hand_prior_sample_batch(p: HandPrior, rng: np.random.Generator, n: int):
    """Vectorized draws used by the planner's candidate sweep.

    Returns (xs (n,3), qs (n,4)); the grasp type is scanned separately.
    """
    xs = rng.uniform(p.x_low, p.x_high, size=(n, 3))
    qs = np.empty((n, 4))
    for i in range(n):
        qs[i] = mixture_sample(p.rotation, rng)
    return xs, qs


@dataclass
class ScenePrior:
    """Uniform catalog choice, uniform planar pose, uniform scale."""

    catalog: list
    xy_low: float = -0.05
    xy_high: float = 0.05
    phi_low: float = -np.pi
    phi_high: float = np.pi
    beta_low: float = 0.9
    beta_high: float = 1.1

    def __post_init__(self) -> None:
        if not self.catalog:
            raise ValueError("scene prior needs a non-empty object catalog")
        for o in self.catalog:
            if not isinstance(o, ObjectSpec):
                raise ValueError("catalog entries must be ObjectSpec records")
        if self.xy_high <= self.xy_low or self.phi_high <= self.phi_low:
            raise ValueError("scene pose bounds must be ordered")
        if self.beta_high <= self.beta_low or self.beta_low <= 0.0:
            raise ValueError("scale bounds must be ordered and positive")


def scene_prior_sample(sp: ScenePrior, rng: np.random.Generator) -> Scene:
    proto = sp.catalog[int(rng.integers(len(sp.catalog)))]
    beta = float(rng.uniform(sp.beta_low, sp.beta_high))
    obj = ObjectSpec(proto.shape, np.array(proto.dims), beta, proto.friction, proto.name)
    pose = ScenePose(
        float(rng.uniform(sp.xy_low, sp.xy_high)),
        float(rng.uniform(sp.xy_low, sp.xy_high)),
        float(rng.uniform(sp.phi_low, sp.phi_high)),
    )
    return Scene(obj, pose)
