"""Classifier-based likelihood-to-evidence ratio estimators.

Each estimator is a binary classifier between pairs drawn from a joint
distribution and pairs whose hand configuration was swapped in from
another episode. The raw logit of such a classifier converges to the
log density ratio, so log_ratio returns the logit directly and the
planner differentiates it with respect to the hand configuration.

Three conditioning kinds share one hand-feature layout:
  success  d(S, h)      conditioning = the scalar outcome flag
  image    d(i, h)      conditioning = a rendered depth image
  oracle   d(props, h)  conditioning = ground-truth object properties
The success and image estimators are deliberately separate networks;
the outcome flag never enters the image network.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import nets
from .errors import DataError, NumericError
from .geometry import (
    TangentVector,
    project_sphere_tangent,
    quat_to_rotmat_batch,
    rotmat_jacobian,
)
from .hand import GRASP_TYPES, HandConfig
from .world import SHAPES, ObjectSpec, ScenePose

X_SCALE = 5.0
EMBED_DIM = 4
IMAGE_EMBED_DIM = 128
HAND_WIDTH = 3 + 9 + EMBED_DIM


@dataclass(frozen=True)
class LayoutDescriptor:
    """Names and widths of the slots in a model's input vector."""

    kind: str
    cond_slots: tuple
    hand_slots: tuple = (("position", 3), ("rotation_matrix", 9), ("grasp_embedding", EMBED_DIM))
    x_scale: float = X_SCALE

    def __post_init__(self) -> None:
        if self.kind not in ("success", "image", "oracle"):
            raise DataError(f"unknown ratio kind {self.kind!r}")

    @property
    def cond_width(self) -> int:
        return sum(wd for _, wd in self.cond_slots)

    @property
    def hand_width(self) -> int:
        return sum(wd for _, wd in self.hand_slots)

    def slice_of(self, name: str) -> slice:
        off = 0
        for slot, wd in self.cond_slots:
            if slot == name:
                return slice(off, off + wd)
            off += wd
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "cond_slots": [[n, w] for n, w in self.cond_slots],
            "hand_slots": [[n, w] for n, w in self.hand_slots],
            "x_scale": self.x_scale,
        }

    @staticmethod
    def from_dict(d: dict) -> "LayoutDescriptor":
        return LayoutDescriptor(
            kind=d["kind"],
            cond_slots=tuple((str(n), int(w)) for n, w in d["cond_slots"]),
            hand_slots=tuple((str(n), int(w)) for n, w in d["hand_slots"]),
            x_scale=float(d["x_scale"]),
        )


_LAYOUTS = {
    "success": LayoutDescriptor("success", (("success_flag", 1),)),
    "image": LayoutDescriptor("image", (("image_embedding", IMAGE_EMBED_DIM),)),
    "oracle": LayoutDescriptor(
        "oracle",
        (
            ("shape_onehot", len(SHAPES)),
            ("scaled_dims", 3),
            ("friction", 1),
            ("position_xy", 2),
            ("yaw_sincos", 2),
        ),
    ),
}

ORACLE_WIDTH = _LAYOUTS["oracle"].cond_width


def oracle_conditioning(obj: ObjectSpec, pose: ScenePose) -> np.ndarray:
    """Ground-truth conditioning vector for the ideal estimator.

    Metric entries (scaled dimensions and planar position) carry the
    same scale factor as the hand position features so size-position
    interactions sit in a comparable numeric range."""
    onehot = np.zeros(len(SHAPES))
    onehot[SHAPES.index(obj.shape)] = 1.0
    return np.concatenate(
        [
            onehot,
            X_SCALE * obj.beta * np.asarray(obj.dims, dtype=np.float64),
            [obj.friction, X_SCALE * pose.x, X_SCALE * pose.y, np.sin(pose.phi), np.cos(pose.phi)],
        ]
    )


def _build_encoder() -> nets.Sequential:
    # 48x64 -> 24x32 -> 12x16 -> 6x8, then a 1x1 bottleneck and a dense
    # projection to the image embedding.
    return nets.Sequential(
        [
            nets.Conv2d(1, 32, kernel=3, stride=2, pad=1),
            nets.ReLU(),
            nets.Conv2d(32, 32, kernel=3, stride=2, pad=1),
            nets.ReLU(),
            nets.Conv2d(32, 32, kernel=3, stride=2, pad=1),
            nets.ReLU(),
            nets.Conv2d(32, 8, kernel=1, stride=1, pad=0),
            nets.ReLU(),
            nets.Flatten(),
            nets.Dense(8 * 6 * 8, IMAGE_EMBED_DIM),
            nets.ReLU(),
        ]
    )


def _build_trunk(in_width: int, hidden: int) -> nets.Sequential:
    # Zero-init head: an untrained model scores log-ratio 0 everywhere.
    return nets.Sequential(
        [
            nets.Dense(in_width, hidden),
            nets.ReLU(),
            nets.Dense(hidden, hidden),
            nets.ReLU(),
            nets.Dense(hidden, 1, zero_init=True),
        ]
    )


@dataclass
class TrainSpec:
    batch_size: int = 256
    max_epochs: int = 60
    lr: float = 1e-3
    patience: int = 5
    min_delta: float = 1e-5
    val_fraction: float = 0.1
    min_positives: int = 64
    hidden: int = 256


@dataclass
class TrainReport:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_epoch: int = -1
    best_val: float = np.inf
    n_train: int = 0
    n_val: int = 0
    wall_time_s: float = 0.0

    def to_dict(self) -> dict:
        return {
            "train_loss": [float(v) for v in self.train_loss],
            "val_loss": [float(v) for v in self.val_loss],
            "best_epoch": self.best_epoch,
            "best_val": float(self.best_val),
            "n_train": self.n_train,
            "n_val": self.n_val,
            "wall_time_s": float(self.wall_time_s),
        }


def derangement_indices(n: int) -> np.ndarray:
    """Index permutation with no fixed point: a cyclic shift by one."""
    if n < 2:
        raise DataError("derangement needs at least two rows")
    return np.roll(np.arange(n), -1)


@dataclass
class RatioModel:
    kind: str
    layout: LayoutDescriptor
    params: dict
    hidden: int = 256

    def __post_init__(self) -> None:
        self.trunk = _build_trunk(self.layout.cond_width + self.layout.hand_width, self.hidden)
        self.encoder = _build_encoder() if self.kind == "image" else None


def init_ratio_params(kind: str, rng: np.random.Generator, hidden: int = 256) -> dict:
    layout = _LAYOUTS[kind]
    embed = rng.uniform(-0.5, 0.5, size=(len(GRASP_TYPES), EMBED_DIM))
    encoder = _build_encoder().init_params(rng) if kind == "image" else []
    trunk = _build_trunk(layout.cond_width + layout.hand_width, hidden).init_params(rng)
    return {"embed": embed, "encoder": encoder, "trunk": trunk}


def hand_core_features(X: np.ndarray, Q: np.ndarray, x_scale: float = X_SCALE) -> np.ndarray:
    """Scaled position plus flattened rotation matrix, one row per hand."""
    rots = quat_to_rotmat_batch(Q).reshape(len(Q), 9)
    return np.concatenate([np.asarray(X) * x_scale, rots], axis=1)


def _trunk_inputs(model: RatioModel, cond_vecs: np.ndarray, core: np.ndarray, g_idx: np.ndarray) -> np.ndarray:
    emb = model.params["embed"][g_idx]
    return np.concatenate([cond_vecs, core, emb], axis=1)


def embed_observation(model: RatioModel, cond) -> np.ndarray:
    """Reduce a raw conditioning value to the trunk's conditioning slot."""
    if model.kind == "success":
        return np.array([float(cond)])
    if model.kind == "oracle":
        vec = np.asarray(cond, dtype=np.float64)
        if vec.shape != (ORACLE_WIDTH,):
            raise DataError(f"oracle conditioning must have shape ({ORACLE_WIDTH},)")
        return vec
    img = np.asarray(cond, dtype=np.float64)
    if img.ndim != 2:
        raise DataError("image conditioning must be a 2-d depth grid")
    return model.encoder.apply(model.params["encoder"], img[None, None, :, :])[0]


def logits_given_embedding(model: RatioModel, emb: np.ndarray, X, Q, G) -> np.ndarray:
    core = hand_core_features(np.atleast_2d(X), np.atleast_2d(Q), model.layout.x_scale)
    g_idx = np.asarray(G, dtype=int).reshape(-1)
    cond = np.broadcast_to(emb, (len(core), emb.size))
    out = model.trunk.apply(model.params["trunk"], _trunk_inputs(model, cond, core, g_idx))
    return out[:, 0]


def log_ratio(model: RatioModel, cond, h: HandConfig) -> float:
    """Log likelihood-to-evidence ratio: exactly the classifier logit."""
    emb = embed_observation(model, cond)
    return float(logits_given_embedding(model, emb, h.x[None], h.q[None], [h.g_index])[0])


def logit_grad_given_embedding(model: RatioModel, emb: np.ndarray, h: HandConfig):
    """Logit and its tangent gradient at h with the conditioning slot
    already embedded; the gradient chains through the rotation map and
    is projected onto the sphere tangent at q."""
    core = hand_core_features(h.x[None], h.q[None], model.layout.x_scale)
    z = _trunk_inputs(model, emb[None], core, np.array([h.g_index]))
    out, caches = model.trunk.forward(model.params["trunk"], z)
    dz, _ = model.trunk.backward(model.params["trunk"], caches, np.ones((1, 1)))
    kc = model.layout.cond_width
    dx = dz[0, kc : kc + 3] * model.layout.x_scale
    dr = dz[0, kc + 3 : kc + 12]
    dq = rotmat_jacobian(h.q).T @ dr
    return float(out[0, 0]), TangentVector(dx, project_sphere_tangent(h.q, dq))


def log_ratio_grad(model: RatioModel, cond, h: HandConfig):
    """Logit and its tangent gradient at h, conditioning held fixed."""
    return logit_grad_given_embedding(model, embed_observation(model, cond), h)


# --- training ---


def _epoch_batches(order: np.ndarray, batch_size: int):
    for k in range(0, len(order), batch_size):
        chunk = order[k : k + batch_size]
        if len(chunk) >= 2:
            yield chunk


def _pair_forward(trunk, encoder, params, cond, core, g_idx, idx):
    """Assemble one positive+negative block for rows idx; returns the
    trunk activations plus everything backward needs."""
    neg = idx[derangement_indices(len(idx))]
    if encoder is not None:
        emb, enc_caches = encoder.forward(params["encoder"], cond[idx])
    else:
        emb, enc_caches = cond[idx], None
    cond_rows = np.concatenate([emb, emb], axis=0)
    core_rows = np.concatenate([core[idx], core[neg]], axis=0)
    blocks = [cond_rows, core_rows]
    if g_idx is not None:
        blocks.append(params["embed"][np.concatenate([g_idx[idx], g_idx[neg]])])
    z = np.concatenate(blocks, axis=1)
    logits, caches = trunk.forward(params["trunk"], z)
    labels = np.concatenate([np.ones(len(idx)), np.zeros(len(idx))])[:, None]
    return logits, labels, caches, enc_caches, neg


def _train_core(cond, core, g_idx, spec: TrainSpec, seed: int, encoder, trunk):
    """Shared loop: derangement negatives, BCE, Adam, early stop on a
    held-out split; returns the best parameters and a report."""
    t_start = time.monotonic()
    n = len(core)
    if n < 8:
        raise DataError(f"need at least 8 rows to train, got {n}")
    rng = np.random.default_rng(seed)
    params = {
        "embed": rng.uniform(-0.5, 0.5, size=(len(GRASP_TYPES), EMBED_DIM))
        if g_idx is not None
        else np.zeros((0, EMBED_DIM)),
        "encoder": encoder.init_params(rng) if encoder is not None else [],
        "trunk": trunk.init_params(rng),
    }
    perm = rng.permutation(n)
    n_val = max(2, int(round(n * spec.val_fraction)))
    val_ids, train_ids = perm[:n_val], perm[n_val:]
    if len(train_ids) < 2:
        raise DataError("training split is empty")

    opt = nets.Adam(lr=spec.lr)
    state = opt.init_state(params)
    report = TrainReport(n_train=len(train_ids), n_val=len(val_ids))
    best_params = nets.tree_map(np.copy, params)
    stale = 0
    kc = IMAGE_EMBED_DIM if encoder is not None else cond.shape[1]

    for epoch in range(spec.max_epochs):
        order = rng.permutation(len(train_ids))
        total, rows = 0.0, 0
        for chunk in _epoch_batches(train_ids[order], spec.batch_size):
            logits, labels, caches, enc_caches, neg = _pair_forward(
                trunk, encoder, params, cond, core, g_idx, chunk
            )
            loss = nets.bce_with_logits(logits, labels)
            if not np.isfinite(loss):
                raise NumericError(f"training loss diverged at epoch {epoch}")
            dlog = nets.bce_with_logits_grad(logits, labels)
            dz, trunk_grads = trunk.backward(params["trunk"], caches, dlog)
            grads = {
                "embed": np.zeros_like(params["embed"]),
                "encoder": [],
                "trunk": trunk_grads,
            }
            if g_idx is not None:
                g_rows = np.concatenate([g_idx[chunk], g_idx[neg]])
                np.add.at(grads["embed"], g_rows, dz[:, dz.shape[1] - EMBED_DIM :])
            if encoder is not None:
                demb = dz[: len(chunk), :kc] + dz[len(chunk) :, :kc]
                _, grads["encoder"] = encoder.backward(params["encoder"], enc_caches, demb)
            params, state = opt.step(params, grads, state)
            total += loss * len(logits)
            rows += len(logits)
        report.train_loss.append(total / max(rows, 1))

        vlogits, vlabels, _, _, _ = _pair_forward(trunk, encoder, params, cond, core, g_idx, val_ids)
        vloss = nets.bce_with_logits(vlogits, vlabels)
        if not np.isfinite(vloss):
            raise NumericError(f"validation loss diverged at epoch {epoch}")
        report.val_loss.append(vloss)
        if vloss < report.best_val - spec.min_delta:
            report.best_val = vloss
            report.best_epoch = epoch
            best_params = nets.tree_map(np.copy, params)
            stale = 0
        else:
            stale += 1
            if stale >= spec.patience:
                break

    report.wall_time_s = time.monotonic() - t_start
    return best_params, report


def train_ratio_from_arrays(cond: np.ndarray, feats: np.ndarray, spec: TrainSpec, seed: int):
    """Train a plain joint-vs-marginal classifier on raw conditioning and
    feature arrays (no hand layout); used for synthetic checks."""
    trunk = _build_trunk(cond.shape[1] + feats.shape[1], spec.hidden)
    params, report = _train_core(cond, feats, None, spec, seed, None, trunk)
    return trunk, params, report


def _records_to_arrays(records):
    X = np.array([r.h.x for r in records])
    Q = np.array([r.h.q for r in records])
    G = np.array([r.h.g_index for r in records], dtype=int)
    S = np.array([float(r.success) for r in records])
    return X, Q, G, S


def train_success_ratio(records, spec: TrainSpec, seed: int):
    """Outcome-flag estimator d(S, h) over the full episode set."""
    if not records:
        raise DataError("empty dataset")
    X, Q, G, S = _records_to_arrays(records)
    layout = _LAYOUTS["success"]
    core = hand_core_features(X, Q, layout.x_scale)
    trunk = _build_trunk(layout.cond_width + layout.hand_width, spec.hidden)
    params, report = _train_core(S[:, None], core, G, spec, seed, None, trunk)
    return RatioModel("success", layout, params, spec.hidden), report


def _positives_only(records, spec: TrainSpec, what: str):
    kept = [r for r in records if r.success]
    if len(kept) < spec.min_positives:
        raise DataError(
            f"{what} training needs at least {spec.min_positives} successful episodes, got {len(kept)}"
        )
    return kept


def train_image_ratio(records, images: np.ndarray, spec: TrainSpec, seed: int):
    """Depth-image estimator d(i, h) over successful episodes only.

    images must be aligned with records, one (H, W) grid per row.
    """
    if len(records) != len(images):
        raise DataError("records and images are misaligned")
    keep = [k for k, r in enumerate(records) if r.success]
    _positives_only(records, spec, "image")
    kept = [records[k] for k in keep]
    imgs = np.asarray(images, dtype=np.float64)[keep][:, None, :, :]
    X, Q, G, _ = _records_to_arrays(kept)
    layout = _LAYOUTS["image"]
    core = hand_core_features(X, Q, layout.x_scale)
    encoder = _build_encoder()
    trunk = _build_trunk(layout.cond_width + layout.hand_width, spec.hidden)
    params, report = _train_core(imgs, core, G, spec, seed, encoder, trunk)
    return RatioModel("image", layout, params, spec.hidden), report


def train_oracle_ratio(records, spec: TrainSpec, seed: int):
    """Ground-truth-conditioned estimator over successful episodes only."""
    kept = _positives_only(records, spec, "oracle")
    cond = np.array([oracle_conditioning(r.obj, r.pose) for r in kept])
    X, Q, G, _ = _records_to_arrays(kept)
    layout = _LAYOUTS["oracle"]
    core = hand_core_features(X, Q, layout.x_scale)
    trunk = _build_trunk(layout.cond_width + layout.hand_width, spec.hidden)
    params, report = _train_core(cond, core, G, spec, seed, None, trunk)
    return RatioModel("oracle", layout, params, spec.hidden), report


# --- diagnostics ---


def calibration_diagnostic(model, prior, n: int, rng: np.random.Generator) -> float:
    """Monte Carlo E over the hand prior of the estimated ratio at S=1;
    close to 1 when the estimator is calibrated. model may be a
    RatioModel of kind success or any callable h -> log-ratio."""
    from .distributions import hand_prior_sample_batch

    X, Q = hand_prior_sample_batch(prior, rng, n)
    G = rng.integers(0, len(GRASP_TYPES), size=n)
    if callable(model) and not isinstance(model, RatioModel):
        logs = np.array(
            [model(HandConfig(X[i], Q[i], GRASP_TYPES[G[i]])) for i in range(n)]
        )
    else:
        if model.kind != "success":
            raise DataError("calibration diagnostic applies to the success estimator")
        emb = embed_observation(model, 1.0)
        logs = logits_given_embedding(model, emb, X, Q, G)
    return float(np.mean(np.exp(logs)))


# --- persistence ---


def save_ratio_model(
    path: str, model: RatioModel, report: TrainReport | None = None, extra: dict | None = None
) -> None:
    meta = {"kind": model.kind, "layout": model.layout.to_dict(), "hidden": model.hidden}
    if report is not None:
        meta["report"] = report.to_dict()
    if extra:
        for key in extra:
            if key in meta:
                raise DataError(f"extra metadata key {key!r} clashes with a reserved field")
        meta.update(extra)
    nets.save_params(path, model.params, meta=meta)


def load_ratio_model(path: str) -> RatioModel:
    params, meta = nets.load_params(path)
    layout = LayoutDescriptor.from_dict(meta["layout"])
    return RatioModel(meta["kind"], layout, params, int(meta.get("hidden", 256)))
