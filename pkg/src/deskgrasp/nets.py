"""Minimal feed-forward nets on float64 numpy.

Layers are stateless: parameters live in plain dict/list trees that are
passed explicitly through ``forward`` and ``backward``, so the same layer
object can serve several parameter sets at once. Backward consumes the
cache produced by the matching forward call and returns the input
gradient together with a parameter-gradient tree of the same shape as
the parameters.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import CheckpointError


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0.0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def bce_with_logits(logits: np.ndarray, targets: np.ndarray) -> float:
    """Mean binary cross entropy, stable for logits of any magnitude."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    per = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    return float(np.mean(per))


def bce_with_logits_grad(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    return (_sigmoid(z) - y) / z.size


def he_uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


class Dense:
    def __init__(self, n_in: int, n_out: int, zero_init: bool = False):
        self.n_in = n_in
        self.n_out = n_out
        self.zero_init = zero_init

    def init_params(self, rng: np.random.Generator) -> dict:
        if self.zero_init:
            w = np.zeros((self.n_in, self.n_out))
        else:
            w = he_uniform(rng, self.n_in, (self.n_in, self.n_out))
        return {"w": w, "b": np.zeros(self.n_out)}

    def forward(self, params: dict, x: np.ndarray):
        return x @ params["w"] + params["b"], x

    def backward(self, params: dict, cache, dy: np.ndarray):
        x = cache
        dx = dy @ params["w"].T
        return dx, {"w": x.T @ dy, "b": dy.sum(axis=0)}


class ReLU:
    def init_params(self, rng: np.random.Generator) -> dict:
        return {}

    def forward(self, params: dict, x: np.ndarray):
        mask = x > 0.0
        return x * mask, mask

    def backward(self, params: dict, cache, dy: np.ndarray):
        return dy * cache, {}


class Flatten:
    """Collapse all but the leading batch axis."""

    def init_params(self, rng: np.random.Generator) -> dict:
        return {}

    def forward(self, params: dict, x: np.ndarray):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, params: dict, cache, dy: np.ndarray):
        return dy.reshape(cache), {}


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    n, c, h, w = x.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((n, c, kh, kw, ho, wo))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(n, c * kh * kw, ho * wo), ho, wo


def _col2im(dcols: np.ndarray, xshape, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    n, c, h, w = xshape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    dcols = dcols.reshape(n, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, :, i, j]
    return dxp[:, :, pad : pad + h, pad : pad + w]


class Conv2d:
    """2-d convolution on NCHW tensors, square kernel, symmetric padding."""

    def __init__(self, c_in: int, c_out: int, kernel: int = 3, stride: int = 1, pad: int = 0):
        self.c_in = c_in
        self.c_out = c_out
        self.kernel = kernel
        self.stride = stride
        self.pad = pad

    def init_params(self, rng: np.random.Generator) -> dict:
        fan_in = self.c_in * self.kernel * self.kernel
        w = he_uniform(rng, fan_in, (self.c_out, self.c_in, self.kernel, self.kernel))
        return {"w": w, "b": np.zeros(self.c_out)}

    def out_shape(self, h: int, w: int):
        k, s, p = self.kernel, self.stride, self.pad
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1

    def forward(self, params: dict, x: np.ndarray):
        cols, ho, wo = _im2col(x, self.kernel, self.kernel, self.stride, self.pad)
        wmat = params["w"].reshape(self.c_out, -1)
        y = np.matmul(wmat[None, :, :], cols) + params["b"][None, :, None]
        return y.reshape(x.shape[0], self.c_out, ho, wo), (cols, x.shape)

    def backward(self, params: dict, cache, dy: np.ndarray):
        cols, xshape = cache
        n = dy.shape[0]
        dyf = dy.reshape(n, self.c_out, -1)
        wmat = params["w"].reshape(self.c_out, -1)
        dw = np.einsum("nol,nkl->ok", dyf, cols).reshape(params["w"].shape)
        db = dyf.sum(axis=(0, 2))
        dcols = np.matmul(wmat.T[None, :, :], dyf)
        dx = _col2im(dcols, xshape, self.kernel, self.kernel, self.stride, self.pad)
        return dx, {"w": dw, "b": db}


class Sequential:
    def __init__(self, layers):
        self.layers = list(layers)

    def init_params(self, rng: np.random.Generator) -> list:
        return [layer.init_params(rng) for layer in self.layers]

    def forward(self, params: list, x: np.ndarray):
        caches = []
        for layer, p in zip(self.layers, params):
            x, cache = layer.forward(p, x)
            caches.append(cache)
        return x, caches

    def backward(self, params: list, caches: list, dy: np.ndarray):
        grads: list = [None] * len(self.layers)
        for i in range(len(self.layers) - 1, -1, -1):
            dy, grads[i] = self.layers[i].backward(params[i], caches[i], dy)
        return dy, grads

    def apply(self, params: list, x: np.ndarray) -> np.ndarray:
        return self.forward(params, x)[0]


# --- parameter trees ---


def tree_map(fn, *trees):
    """Apply fn leaf-wise across parallel dict/list trees of arrays."""
    t0 = trees[0]
    if isinstance(t0, dict):
        return {k: tree_map(fn, *[t[k] for t in trees]) for k in t0}
    if isinstance(t0, (list, tuple)):
        return [tree_map(fn, *[t[i] for t in trees]) for i in range(len(t0))]
    return fn(*trees)


def _tree_leaves(tree, prefix, out):
    # Dict keys are walked sorted so enumeration order is canonical.
    if isinstance(tree, dict):
        for k in sorted(tree, key=str):
            _tree_leaves(tree[k], prefix + (str(k),), out)
    elif isinstance(tree, (list, tuple)):
        for i, v in enumerate(tree):
            _tree_leaves(v, prefix + (str(i),), out)
    else:
        out.append(("/".join(prefix), np.asarray(tree, dtype=np.float64)))


# --- optimizer ---


@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def init_state(self, params) -> dict:
        zeros = lambda: tree_map(np.zeros_like, params)  # noqa: E731
        return {"step": 0, "m": zeros(), "v": zeros()}

    def step(self, params, grads, state):
        """One update; returns (new_params, new_state), inputs untouched."""
        t = state["step"] + 1
        m = tree_map(lambda m_, g: self.beta1 * m_ + (1 - self.beta1) * g, state["m"], grads)
        v = tree_map(lambda v_, g: self.beta2 * v_ + (1 - self.beta2) * g * g, state["v"], grads)
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        new = tree_map(
            lambda p, m_, v_: p - self.lr * (m_ / c1) / (np.sqrt(v_ / c2) + self.eps),
            params,
            m,
            v,
        )
        return new, {"step": t, "m": m, "v": v}


# --- checkpoints ---

_MAGIC = b"DGNET001"


def _tree_skeleton(tree, counter):
    if isinstance(tree, dict):
        return {k: _tree_skeleton(tree[k], counter) for k in sorted(tree, key=str)}
    if isinstance(tree, (list, tuple)):
        return [_tree_skeleton(v, counter) for v in tree]
    idx = counter[0]
    counter[0] += 1
    return {"__array__": idx}


def _tree_rebuild(skel, arrays):
    if isinstance(skel, dict):
        if set(skel.keys()) == {"__array__"}:
            return arrays[skel["__array__"]]
        return {k: _tree_rebuild(v, arrays) for k, v in skel.items()}
    if isinstance(skel, list):
        return [_tree_rebuild(v, arrays) for v in skel]
    raise CheckpointError("malformed checkpoint tree")


def save_params(path: str, params, meta: dict | None = None) -> None:
    """Write a parameter tree as magic + JSON header + raw little-endian
    float64 blocks. The write is atomic via a temp file and rename."""
    leaves: list = []
    _tree_leaves(params, (), leaves)
    skel = _tree_skeleton(params, [0])
    header = {
        "format": 1,
        "meta": meta or {},
        "tree": skel,
        "arrays": [{"name": name, "shape": list(arr.shape)} for name, arr in leaves],
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(_MAGIC)
        f.write(len(hbytes).to_bytes(8, "little"))
        f.write(hbytes)
        for _, arr in leaves:
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    os.replace(tmp, path)


def load_params(path: str):
    """Inverse of save_params; returns (params, meta)."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < len(_MAGIC) + 8 or blob[: len(_MAGIC)] != _MAGIC:
        raise CheckpointError(f"{path} is not a parameter checkpoint")
    off = len(_MAGIC)
    hlen = int.from_bytes(blob[off : off + 8], "little")
    off += 8
    if off + hlen > len(blob):
        raise CheckpointError(f"{path} is truncated")
    try:
        header = json.loads(blob[off : off + hlen].decode("utf-8"))
    except ValueError as exc:
        raise CheckpointError(f"{path} has a corrupt header") from exc
    off += hlen
    if header.get("format") != 1:
        raise CheckpointError(f"unsupported checkpoint format {header.get('format')!r}")
    arrays = []
    for spec in header["arrays"]:
        count = int(np.prod(spec["shape"])) if spec["shape"] else 1
        nbytes = count * 8
        if off + nbytes > len(blob):
            raise CheckpointError(f"{path} is truncated")
        arr = np.frombuffer(blob[off : off + nbytes], dtype="<f8").astype(np.float64)
        arrays.append(arr.reshape(spec["shape"]))
        off += nbytes
    if off != len(blob):
        raise CheckpointError(f"{path} has trailing bytes")
    return _tree_rebuild(header["tree"], arrays), header["meta"]
