"""MAP grasp planning over position, orientation, and grasp type.

The cost is the negative log of (estimated ratios x prior); continuous
variables are optimized with a conjugate-gradient method that respects
the product manifold R^3 x S^3 (tangent projection, renormalization
retraction, transport by projection), and the discrete grasp type is
scanned. Candidates come from the prior regardless of whether the
prior term enters the cost, so MLE and MAP variants differ only in the
objective.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .distributions import (
    HandPrior,
    hand_prior_grad,
    hand_prior_in_support,
    hand_prior_sample,
    hand_prior_sample_batch,
    mixture_log_prob_batch,
)
from .errors import DataError, PlanError
from .geometry import TangentVector, project_sphere_tangent, retract_sphere
from .hand import GRASP_TYPES, HandConfig
from .ratio import (
    RatioModel,
    embed_observation,
    logit_grad_given_embedding,
    logits_given_embedding,
)

ARMIJO_C = 1e-4
ARMIJO_SHRINK = 0.5
MAX_BACKTRACKS = 30


@dataclass
class MapProblem:
    """Objective assembly: which terms enter the cost.

    cond_embedding is the pre-embedded conditioning value (image passed
    through the encoder once, or the oracle vector); it stays fixed
    during optimization.
    """

    prior: HandPrior
    success_model: RatioModel | None = None
    cond_model: RatioModel | None = None
    cond_embedding: np.ndarray | None = None
    use_prior: bool = True
    use_conditioning: bool = False

    def __post_init__(self) -> None:
        if self.success_model is not None and self.success_model.kind != "success":
            raise DataError("success_model must have kind 'success'")
        if self.use_conditioning:
            if self.cond_model is None or self.cond_embedding is None:
                raise DataError("use_conditioning requires a conditioning model and value")
            if self.cond_model.kind not in ("image", "oracle"):
                raise DataError("conditioning model must have kind 'image' or 'oracle'")


@dataclass
class OptTrace:
    costs: list = field(default_factory=list)
    grad_norms: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    accepted: list = field(default_factory=list)
    backtracks: list = field(default_factory=list)
    error: str | None = None

    def to_dict(self) -> dict:
        return {
            "costs": [float(v) for v in self.costs],
            "grad_norms": [float(v) for v in self.grad_norms],
            "steps": [float(v) for v in self.steps],
            "accepted": [bool(v) for v in self.accepted],
            "backtracks": [int(v) for v in self.backtracks],
            "error": self.error,
        }


def _costs_batch(prob: MapProblem, X: np.ndarray, Q: np.ndarray, g: str) -> np.ndarray:
    """Cost of n hands sharing one grasp type; the scalar map_cost runs
    through this same path so values agree exactly."""
    n = len(X)
    g_idx = np.full(n, GRASP_TYPES.index(g), dtype=int)
    cost = np.zeros(n)
    if prob.success_model is not None:
        emb = embed_observation(prob.success_model, 1.0)
        cost -= logits_given_embedding(prob.success_model, emb, X, Q, g_idx)
    if prob.use_conditioning:
        cost -= logits_given_embedding(prob.cond_model, prob.cond_embedding, X, Q, g_idx)
    if prob.use_prior:
        p = prob.prior
        lp = p._log_box + mixture_log_prob_batch(p.rotation, Q)
        gp = float(p.grasp_probs[GRASP_TYPES.index(g)])
        lp = lp + (np.log(gp) if gp > 0 else -np.inf)
        inside = np.all((X >= p.x_low) & (X <= p.x_high), axis=1)
        cost = np.where(inside, cost - lp, np.inf)
    return cost


def map_cost(prob: MapProblem, h: HandConfig) -> float:
    return float(_costs_batch(prob, h.x[None], h.q[None], h.g)[0])


def map_cost_grad(prob: MapProblem, h: HandConfig) -> TangentVector:
    """Tangent gradient of the cost; zero outside the prior's support."""
    if prob.use_prior and not hand_prior_in_support(prob.prior, h):
        return TangentVector(np.zeros(3), np.zeros(4))
    total = TangentVector(np.zeros(3), np.zeros(4))
    if prob.success_model is not None:
        emb = embed_observation(prob.success_model, 1.0)
        _, grad = logit_grad_given_embedding(prob.success_model, emb, h)
        total = total.plus(grad.neg())
    if prob.use_conditioning:
        _, grad = logit_grad_given_embedding(prob.cond_model, prob.cond_embedding, h)
        total = total.plus(grad.neg())
    if prob.use_prior:
        total = total.plus(hand_prior_grad(prob.prior, h).neg())
    return total


def _retract(h: HandConfig, step: TangentVector, t: float) -> HandConfig:
    return HandConfig(h.x + t * step.dx, retract_sphere(h.q, t * step.dq), h.g)


def _transport(q_new: np.ndarray, v: TangentVector) -> TangentVector:
    return TangentVector(v.dx, project_sphere_tangent(q_new, v.dq))


def _problem_cost(prob, h: HandConfig) -> float:
    return map_cost(prob, h) if isinstance(prob, MapProblem) else prob.cost(h)


def _problem_grad(prob, h: HandConfig) -> TangentVector:
    return map_cost_grad(prob, h) if isinstance(prob, MapProblem) else prob.grad(h)


def geometric_cg(prob, h0: HandConfig, max_iters: int = 20):
    """Riemannian conjugate gradient (Polak-Ribiere+, Armijo backtracking)
    with the grasp type frozen; returns (hand, trace). Accepted costs are
    non-increasing; a NaN cost aborts with trace.error set. prob is a
    MapProblem or any object with cost(h) and grad(h)."""
    trace = OptTrace()
    h = h0
    f = _problem_cost(prob, h)
    if not np.isfinite(f):
        trace.error = "non-finite cost at the starting point"
        return h, trace
    grad = _problem_grad(prob, h)
    direction = grad.neg()
    assert abs(float(h.q @ direction.dq)) <= 1e-9

    for _ in range(max_iters):
        gnorm = grad.norm()
        if gnorm < 1e-12:
            break
        slope = grad.inner(direction)
        if slope >= 0.0:
            # Restart: the conjugate direction lost descent.
            direction = grad.neg()
            slope = -gnorm * gnorm
        t = 1.0
        accepted = False
        f_try = f
        h_try = h
        for bt in range(MAX_BACKTRACKS + 1):
            h_try = _retract(h, direction, t)
            f_try = _problem_cost(prob, h_try)
            if np.isnan(f_try):
                trace.error = "cost became NaN during line search"
                return h, trace
            if f_try <= f + ARMIJO_C * t * slope:
                accepted = True
                break
            t *= ARMIJO_SHRINK
        trace.costs.append(f_try if accepted else f)
        trace.grad_norms.append(gnorm)
        trace.steps.append(t if accepted else 0.0)
        trace.accepted.append(accepted)
        trace.backtracks.append(bt)
        if not accepted:
            break
        assert f_try <= f
        grad_new = _problem_grad(prob, h_try)
        g_prev = _transport(h_try.q, grad)
        denom = gnorm * gnorm
        beta = max(0.0, grad_new.inner(grad_new.plus(g_prev.neg())) / denom)
        direction = grad_new.neg().plus(_transport(h_try.q, direction).scaled(beta))
        assert abs(float(h_try.q @ direction.dq)) <= 1e-9
        h, f, grad = h_try, f_try, grad_new
    return h, trace


@dataclass
class PlanEntry:
    hand: HandConfig
    cost: float
    trace: OptTrace
    start_index: int
    start_cost: float


@dataclass
class PlanResult:
    hand: HandConfig
    cost: float
    per_type: dict
    n_candidates: int

    def to_dict(self) -> dict:
        return {
            "hand": self.hand.to_dict(),
            "cost": float(self.cost),
            "n_candidates": self.n_candidates,
            "per_type": {
                g: {
                    "hand": e.hand.to_dict(),
                    "cost": float(e.cost),
                    "start_index": e.start_index,
                    "start_cost": float(e.start_cost),
                    "trace": e.trace.to_dict(),
                }
                for g, e in self.per_type.items()
            },
        }


def plan(prob: MapProblem, rng: np.random.Generator, n_candidates: int = 1000, max_iters: int = 20) -> PlanResult:
    """Candidate sweep plus one CG run per grasp type.

    Exactly n_candidates cost evaluations happen per grasp type before
    refinement; ties at the argmin go to the lowest index.
    """
    X, Q = hand_prior_sample_batch(prob.prior, rng, n_candidates)
    per_type = {}
    for g in GRASP_TYPES:
        costs = _costs_batch(prob, X, Q, g)
        i = int(np.argmin(costs))
        if not np.isfinite(costs[i]):
            continue
        h0 = HandConfig(X[i].copy(), Q[i].copy(), g)
        h_opt, trace = geometric_cg(prob, h0, max_iters)
        f_opt = map_cost(prob, h_opt)
        per_type[g] = PlanEntry(h_opt, f_opt, trace, i, float(costs[i]))
    if not per_type:
        raise PlanError("every candidate had infinite cost")
    best = min(per_type, key=lambda g: per_type[g].cost)
    entry = per_type[best]
    return PlanResult(entry.hand, entry.cost, per_type, n_candidates)


STRATEGIES = (
    "prior-sample",
    "prior-argmax",
    "metric-mle",
    "metric-map",
    "image-mle",
    "image-map",
    "oracle-mle",
    "oracle-map",
)


def _require(models: dict, key: str, strategy: str) -> RatioModel:
    model = (models or {}).get(key)
    if model is None:
        raise DataError(f"strategy {strategy!r} needs a {key!r} model")
    return model


def plan_strategy(
    strategy: str,
    models: dict,
    observation,
    prior: HandPrior,
    rng: np.random.Generator,
    n_candidates: int = 1000,
    max_iters: int = 20,
) -> PlanResult:
    """Dispatch one benchmark row to the matching objective."""
    if strategy not in STRATEGIES:
        raise DataError(f"unknown strategy {strategy!r}")
    if strategy == "prior-sample":
        h = hand_prior_sample(prior, rng)
        prob = MapProblem(prior=prior)
        return PlanResult(h, map_cost(prob, h), {}, 0)
    if strategy == "prior-argmax":
        prob = MapProblem(prior=prior)
        return plan(prob, rng, n_candidates, max_iters)

    family, mode = strategy.split("-")
    success = _require(models, "success", strategy)
    use_prior = mode == "map"
    if family == "metric":
        prob = MapProblem(prior=prior, success_model=success, use_prior=use_prior)
    else:
        cond = _require(models, family, strategy)
        emb = embed_observation(cond, observation)
        prob = MapProblem(
            prior=prior,
            success_model=success,
            cond_model=cond,
            cond_embedding=emb,
            use_prior=use_prior,
            use_conditioning=True,
        )
    return plan(prob, rng, n_candidates, max_iters)
