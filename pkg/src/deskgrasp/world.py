"""Stochastic tabletop toy world: objects, grasp simulation, depth camera.

A single rigid object rests on an infinite table at z = 0. The object
is one of four parametric shape families (box, cylinder, sphere,
capsule), posed by a planar offset and a yaw angle, and scaled by a
factor. Grasp outcomes are decided by a four-phase analytic test
(reachability, collision, closure, slip) with Gaussian pose jitter, so
the outcome is stochastic given the hand and the scene.

The depth camera ray-casts the scene from a nuisance-perturbed pose at
low resolution. Valid depths are normalized to [0.45, 1.0]; pixels out
of range are 0, mimicking an invalid-return depth sensor.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .geometry import quat_to_rotmat, so3_exp
from .hand import GRASP_TYPES, HandConfig

SHAPES = ("box", "cylinder", "sphere", "capsule")

FAILURE_NONE = "none"
FAILURE_UNREACHABLE = "unreachable"
FAILURE_COLLISION = "collision"
FAILURE_NO_CONTACT = "no_contact"
FAILURE_SLIP = "slip"


@dataclass
class ObjectSpec:
    """Parametric object: shape family, base dimensions (m), scale, friction.

    dims semantics: box (x, y, z extents); cylinder/capsule (diameter,
    diameter, height); sphere (diameter, -, -). A scale of exactly 0 is
    an internal hook meaning "no object" (used to render a bare table).
    """

    shape: str
    dims: np.ndarray
    beta: float = 1.0
    friction: float = 1.0
    name: str = ""

    def __post_init__(self) -> None:
        if self.shape not in SHAPES:
            raise DataError(f"unknown shape {self.shape!r}, expected one of {SHAPES}")
        self.dims = np.asarray(self.dims, dtype=np.float64).reshape(3)
        if np.any(self.dims < 0.0):
            raise DataError("object dimensions must be nonnegative")
        self.beta = float(self.beta)
        if self.beta < 0.0:
            raise DataError("scale must be nonnegative")
        self.friction = float(self.friction)
        if self.friction <= 0.0:
            raise DataError("friction must be positive")
        if not self.name:
            self.name = self.shape
        if self.shape == "capsule" and self.beta > 0.0 and self.dims[2] < self.dims[0]:
            raise DataError("capsule height must be at least its diameter")

    @property
    def height(self) -> float:
        if self.shape == "sphere":
            return self.beta * self.dims[0]
        return self.beta * self.dims[2]

    def to_dict(self) -> dict:
        return {
            "shape": self.shape,
            "dims": [float(v) for v in self.dims],
            "beta": self.beta,
            "friction": self.friction,
            "name": self.name,
        }

    @staticmethod
    def from_dict(d: dict) -> "ObjectSpec":
        return ObjectSpec(d["shape"], np.array(d["dims"], dtype=np.float64), d["beta"], d["friction"], d.get("name", ""))


@dataclass
class ScenePose:
    """Planar pose of the object on the table."""

    x: float
    y: float
    phi: float

    def to_dict(self) -> dict:
        return {"x": float(self.x), "y": float(self.y), "phi": float(self.phi)}

    @staticmethod
    def from_dict(d: dict) -> "ScenePose":
        return ScenePose(float(d["x"]), float(d["y"]), float(d["phi"]))


@dataclass
class Scene:
    obj: ObjectSpec
    pose: ScenePose


@dataclass
class Nuisances:
    """Domain-randomization state for one episode.

    Camera fields are absolute (offsets in meters/radians, depth window
    and field of view after perturbation); the two friction entries are
    multiplicative factors applied to the object's nominal coefficient.
    """

    cam_dpos: np.ndarray
    cam_deta: np.ndarray
    depth_min: float
    depth_max: float
    fov_y: float
    friction_lateral: float
    friction_spin: float

    def __post_init__(self) -> None:
        self.cam_dpos = np.asarray(self.cam_dpos, dtype=np.float64).reshape(3)
        self.cam_deta = np.asarray(self.cam_deta, dtype=np.float64).reshape(3)

    def to_dict(self) -> dict:
        return {
            "cam_dpos": [float(v) for v in self.cam_dpos],
            "cam_deta": [float(v) for v in self.cam_deta],
            "depth_min": float(self.depth_min),
            "depth_max": float(self.depth_max),
            "fov_y": float(self.fov_y),
            "friction_lateral": float(self.friction_lateral),
            "friction_spin": float(self.friction_spin),
        }

    @staticmethod
    def from_dict(d: dict) -> "Nuisances":
        return Nuisances(
            np.array(d["cam_dpos"], dtype=np.float64),
            np.array(d["cam_deta"], dtype=np.float64),
            float(d["depth_min"]),
            float(d["depth_max"]),
            float(d["fov_y"]),
            float(d["friction_lateral"]),
            float(d["friction_spin"]),
        )


@dataclass
class CameraParams:
    """Nominal depth camera: pose, optics, resolution, pixel noise."""

    position: np.ndarray = field(default_factory=lambda: np.array([0.0, -0.45, 0.42]))
    lookat: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.03]))
    fov_y: float = 0.85
    depth_min: float = 0.40
    depth_max: float = 0.90
    width: int = 64
    height: int = 48
    sigma_px: float = 0.005
    sigma_cam_pos: float = 0.005
    sigma_cam_rot: np.ndarray = field(default_factory=lambda: np.array([0.002, 0.01, 0.002]))
    range_jitter: float = 0.02

    def __post_init__(self) -> None:
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        self.lookat = np.asarray(self.lookat, dtype=np.float64).reshape(3)
        self.sigma_cam_rot = np.asarray(self.sigma_cam_rot, dtype=np.float64).reshape(3)
        if self.width <= 0 or self.height <= 0:
            raise DataError("image resolution must be positive")
        if not (0.0 < self.depth_min < self.depth_max):
            raise DataError("depth window must satisfy 0 < depth_min < depth_max")
        if not (0.0 < self.fov_y < np.pi):
            raise DataError("vertical field of view must be in (0, pi)")


@dataclass
class WorldParams:
    """Gripper geometry and the four-phase outcome thresholds."""

    workspace_low: np.ndarray = field(default_factory=lambda: np.array([-0.18, -0.18, 0.09]))
    workspace_high: np.ndarray = field(default_factory=lambda: np.array([0.18, 0.18, 0.37]))
    palm_radius: float = 0.022
    finger_radius: float = 0.007
    grasp_offset: float = 0.15
    # Collision capsules cover only the straight proximal segment; the curled
    # distal pads are abstracted by the closure chord test, so finger_length
    # may be shorter than grasp_offset.
    finger_length: float = 0.10
    closure_pad: float = 0.02
    spans: dict = field(default_factory=lambda: {"basic": 0.105, "wide": 0.13, "pinch": 0.085})
    slip_gain: dict = field(default_factory=lambda: {"basic": 1.0, "wide": 1.2, "pinch": 0.8})
    closure_min: float = 0.3
    sigma_jitter_xy: float = 0.002
    sigma_jitter_phi: float = float(np.radians(2.0))
    friction_jitter: float = 0.02

    def __post_init__(self) -> None:
        self.workspace_low = np.asarray(self.workspace_low, dtype=np.float64).reshape(3)
        self.workspace_high = np.asarray(self.workspace_high, dtype=np.float64).reshape(3)
        for g in GRASP_TYPES:
            if g not in self.spans or g not in self.slip_gain:
                raise DataError(f"spans and slip_gain must cover grasp type {g!r}")
        if not (0.0 < self.closure_min < 1.0):
            raise DataError("closure_min must lie in (0, 1)")


@dataclass
class GraspOutcome:
    success: bool
    failure: str

    def __post_init__(self) -> None:
        valid = (FAILURE_NONE, FAILURE_UNREACHABLE, FAILURE_COLLISION, FAILURE_NO_CONTACT, FAILURE_SLIP)
        if self.failure not in valid:
            raise ValueError(f"unknown failure reason {self.failure!r}")
        if self.success != (self.failure == FAILURE_NONE):
            raise ValueError("success flag inconsistent with failure reason")


def sample_nuisances(cam: CameraParams, world: WorldParams, rng: np.random.Generator) -> Nuisances:
    """Domain randomization: Gaussian camera pose offsets, +/-2% uniforms
    on the depth window, field of view, and friction factors."""
    dpos = rng.normal(0.0, cam.sigma_cam_pos, size=3)
    deta = rng.normal(0.0, 1.0, size=3) * cam.sigma_cam_rot
    j = cam.range_jitter
    depth_min = cam.depth_min * rng.uniform(1.0 - j, 1.0 + j)
    depth_max = cam.depth_max * rng.uniform(1.0 - j, 1.0 + j)
    fov_y = cam.fov_y * rng.uniform(1.0 - j, 1.0 + j)
    fj = world.friction_jitter
    lat = rng.uniform(1.0 - fj, 1.0 + fj)
    spin = rng.uniform(1.0 - fj, 1.0 + fj)
    return Nuisances(dpos, deta, depth_min, depth_max, fov_y, lat, spin)


def nominal_nuisances(cam: CameraParams) -> Nuisances:
    return Nuisances(np.zeros(3), np.zeros(3), cam.depth_min, cam.depth_max, cam.fov_y, 1.0, 1.0)


# --- shape geometry, object local frame (object base on the table plane) ---


def _to_local(points: np.ndarray, pose: ScenePose) -> np.ndarray:
    p = np.atleast_2d(points) - np.array([pose.x, pose.y, 0.0])
    c, s = np.cos(pose.phi), np.sin(pose.phi)
    # Rotate by -phi about z.
    out = np.empty_like(p)
    out[:, 0] = c * p[:, 0] + s * p[:, 1]
    out[:, 1] = -s * p[:, 0] + c * p[:, 1]
    out[:, 2] = p[:, 2]
    return out


def _rot_dirs(dirs: np.ndarray, pose: ScenePose) -> np.ndarray:
    d = np.atleast_2d(dirs)
    c, s = np.cos(pose.phi), np.sin(pose.phi)
    out = np.empty_like(d)
    out[:, 0] = c * d[:, 0] + s * d[:, 1]
    out[:, 1] = -s * d[:, 0] + c * d[:, 1]
    out[:, 2] = d[:, 2]
    return out


def _slab(o, d, lo, hi):
    """Entry/exit parameters of rays against lo <= coord <= hi."""
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - o) / d
        t2 = (hi - o) / d
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    parallel = np.abs(d) < 1e-300
    inside = (o >= lo) & (o <= hi)
    tmin = np.where(parallel, np.where(inside, -np.inf, np.inf), tmin)
    tmax = np.where(parallel, np.where(inside, np.inf, -np.inf), tmax)
    return tmin, tmax


def _quadratic_interval(a, b, c):
    """Solve a t^2 + 2 b t + c <= 0 for rays; returns (tmin, tmax)."""
    disc = b * b - a * c
    ok = disc >= 0.0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        tmin = (-b - sq) / a
        tmax = (-b + sq) / a
    tmin = np.where(ok, tmin, np.inf)
    tmax = np.where(ok, tmax, -np.inf)
    return tmin, tmax


def _sphere_interval(o, d, center, radius):
    oc = o - center
    a = np.sum(d * d, axis=1)
    b = np.sum(oc * d, axis=1)
    c = np.sum(oc * oc, axis=1) - radius * radius
    return _quadratic_interval(a, b, c)


def _infinite_cyl_interval(o, d, radius):
    a = d[:, 0] ** 2 + d[:, 1] ** 2
    b = o[:, 0] * d[:, 0] + o[:, 1] * d[:, 1]
    c = o[:, 0] ** 2 + o[:, 1] ** 2 - radius * radius
    vertical = a < 1e-300
    tmin, tmax = _quadratic_interval(np.where(vertical, 1.0, a), b, c)
    inside = c <= 0.0
    tmin = np.where(vertical, np.where(inside, -np.inf, np.inf), tmin)
    tmax = np.where(vertical, np.where(inside, np.inf, -np.inf), tmax)
    return tmin, tmax


def ray_object_interval(origins: np.ndarray, dirs: np.ndarray, obj: ObjectSpec, pose: ScenePose):
    """Intersection interval [t0, t1] of world-frame rays with the object.

    Returns (t0, t1, hit). Rays with no intersection have hit False.
    """
    o = _to_local(origins, pose)
    d = _rot_dirs(dirs, pose)
    n = o.shape[0]
    if obj.beta == 0.0:
        return np.full(n, np.inf), np.full(n, -np.inf), np.zeros(n, dtype=bool)

    if obj.shape == "box":
        hx, hy, hz = obj.beta * obj.dims / 2.0
        t0 = np.full(n, -np.inf)
        t1 = np.full(n, np.inf)
        for axis, (lo, hi) in enumerate([(-hx, hx), (-hy, hy), (0.0, 2 * hz)]):
            a0, a1 = _slab(o[:, axis], d[:, axis], lo, hi)
            t0 = np.maximum(t0, a0)
            t1 = np.minimum(t1, a1)
    elif obj.shape == "cylinder":
        r = obj.beta * obj.dims[0] / 2.0
        h = obj.beta * obj.dims[2]
        c0, c1 = _infinite_cyl_interval(o, d, r)
        z0, z1 = _slab(o[:, 2], d[:, 2], 0.0, h)
        t0 = np.maximum(c0, z0)
        t1 = np.minimum(c1, z1)
    elif obj.shape == "sphere":
        r = obj.beta * obj.dims[0] / 2.0
        center = np.array([0.0, 0.0, r])
        t0, t1 = _sphere_interval(o, d, center, r)
    else:  # capsule: convex union of a clipped cylinder and two cap spheres
        r = obj.beta * obj.dims[0] / 2.0
        h = obj.beta * obj.dims[2]
        za, zb = r, h - r
        c0, c1 = _infinite_cyl_interval(o, d, r)
        z0, z1 = _slab(o[:, 2], d[:, 2], za, zb)
        cyl0 = np.maximum(c0, z0)
        cyl1 = np.minimum(c1, z1)
        s0a, s1a = _sphere_interval(o, d, np.array([0.0, 0.0, za]), r)
        s0b, s1b = _sphere_interval(o, d, np.array([0.0, 0.0, zb]), r)
        pieces0 = np.stack([cyl0, s0a, s0b])
        pieces1 = np.stack([cyl1, s1a, s1b])
        valid = pieces0 <= pieces1
        pieces0 = np.where(valid, pieces0, np.inf)
        pieces1 = np.where(valid, pieces1, -np.inf)
        t0 = np.min(pieces0, axis=0)
        t1 = np.max(pieces1, axis=0)

    hit = t0 <= t1
    return t0, t1, hit


def point_object_distance(points: np.ndarray, obj: ObjectSpec, pose: ScenePose) -> np.ndarray:
    """Signed distance from world points to the object surface (< 0 inside)."""
    p = _to_local(points, pose)
    n = p.shape[0]
    if obj.beta == 0.0:
        return np.full(n, np.inf)
    if obj.shape == "box":
        half = obj.beta * obj.dims / 2.0
        center = np.array([0.0, 0.0, half[2]])
        q = np.abs(p - center) - half
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        inside = np.minimum(np.max(q, axis=1), 0.0)
        return outside + inside
    if obj.shape == "cylinder":
        r = obj.beta * obj.dims[0] / 2.0
        h = obj.beta * obj.dims[2]
        dxy = np.hypot(p[:, 0], p[:, 1]) - r
        dz = np.abs(p[:, 2] - h / 2.0) - h / 2.0
        q = np.stack([dxy, dz], axis=1)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        inside = np.minimum(np.max(q, axis=1), 0.0)
        return outside + inside
    if obj.shape == "sphere":
        r = obj.beta * obj.dims[0] / 2.0
        return np.linalg.norm(p - np.array([0.0, 0.0, r]), axis=1) - r
    # capsule
    r = obj.beta * obj.dims[0] / 2.0
    h = obj.beta * obj.dims[2]
    za, zb = r, h - r
    zc = np.clip(p[:, 2], za, zb)
    seg = np.stack([p[:, 0], p[:, 1], p[:, 2] - zc], axis=1)
    return np.linalg.norm(seg, axis=1) - r


# --- grasp simulation ---


def simulate_grasp(
    h: HandConfig,
    obj: ObjectSpec,
    pose: ScenePose,
    nuis: Nuisances,
    params: WorldParams,
    rng: np.random.Generator,
) -> GraspOutcome:
    """Four-phase analytic grasp test under Gaussian pose jitter.

    Phases, first failure wins: (1) reachability of the palm position,
    (2) palm/finger collision against the object and the table, (3)
    closure: the finger closing line must cut the object with a chord
    the grasp type can hold, (4) slip: the approach must be within the
    friction cone scaled by the grasp-type gain.
    """
    jitter = rng.normal(0.0, 1.0, size=3)
    jx = jitter[0] * params.sigma_jitter_xy
    jy = jitter[1] * params.sigma_jitter_xy
    jphi = jitter[2] * params.sigma_jitter_phi
    jpose = ScenePose(pose.x + jx, pose.y + jy, pose.phi + jphi)

    # Phase 1: reachability.
    if np.any(h.x < params.workspace_low) or np.any(h.x > params.workspace_high):
        return GraspOutcome(False, FAILURE_UNREACHABLE)
    if h.x[2] < params.palm_radius:
        return GraspOutcome(False, FAILURE_UNREACHABLE)

    r = quat_to_rotmat(h.q)
    approach = r[:, 0]
    closing = r[:, 1]
    span = float(params.spans[h.g])
    half_span = span / 2.0
    grasp_center = h.x + params.grasp_offset * approach

    # Phase 2: collision of the palm sphere and finger capsules.
    palm_dist = float(point_object_distance(h.x[None, :], obj, jpose)[0])
    if palm_dist < params.palm_radius:
        return GraspOutcome(False, FAILURE_COLLISION)
    bases = [h.x + half_span * closing, h.x - half_span * closing]
    ts = np.linspace(0.2, 1.0, 5) * params.finger_length
    for base in bases:
        pts = base[None, :] + ts[:, None] * approach[None, :]
        if float(np.min(pts[:, 2])) < 0.0:
            return GraspOutcome(False, FAILURE_COLLISION)
        if obj.beta > 0.0 and float(np.min(point_object_distance(pts, obj, jpose))) < params.finger_radius:
            return GraspOutcome(False, FAILURE_COLLISION)

    # Phase 3: closure chord along the closing axis. The finger pads cover a
    # short window along the approach, so the cut may land anywhere within
    # closure_pad of the grasp center; the first admissible plane wins.
    closed = False
    for pad in (0.0, -params.closure_pad, params.closure_pad):
        plane = grasp_center + pad * approach
        t0, t1, hit = ray_object_interval(plane[None, :], closing[None, :], obj, jpose)
        if not bool(hit[0]):
            continue
        lo, hi = float(t0[0]), float(t1[0])
        if lo < -half_span or hi > half_span:
            continue
        width = hi - lo
        if width < params.closure_min * span or width > span:
            continue
        closed = True
        break
    if not closed:
        return GraspOutcome(False, FAILURE_NO_CONTACT)

    # Phase 4: slip test against the grasp-type friction cone.
    cos_theta = float(-approach[2])
    if cos_theta <= 1e-9:
        return GraspOutcome(False, FAILURE_SLIP)
    tan_theta = float(np.sqrt(max(0.0, 1.0 - cos_theta**2)) / cos_theta)
    mu_eff = obj.friction * nuis.friction_lateral
    if tan_theta > mu_eff * float(params.slip_gain[h.g]):
        return GraspOutcome(False, FAILURE_SLIP)
    return GraspOutcome(True, FAILURE_NONE)


# --- depth rendering ---


@dataclass
class DepthImage:
    """Row-major normalized depth grid; 0 marks an invalid return."""

    width: int
    height: int
    data: np.ndarray

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.shape != (self.height, self.width):
            raise DataError(f"depth grid shape {self.data.shape} does not match {self.height}x{self.width}")
        valid = self.data != 0.0
        vals = self.data[valid]
        if vals.size and (np.min(vals) < 0.45 - 1e-6 or np.max(vals) > 1.0 + 1e-9):
            raise DataError("depth pixels must lie in {0} union [0.45, 1.0]")

    def to_blob(self) -> bytes:
        return self.data.astype("<f4").tobytes()

    @staticmethod
    def from_blob(blob: bytes, width: int, height: int) -> "DepthImage":
        expected = width * height * 4
        if len(blob) != expected:
            raise DataError(f"image blob has {len(blob)} bytes, expected {expected}")
        data = np.frombuffer(blob, dtype="<f4").astype(np.float64).reshape(height, width)
        return DepthImage(width, height, data)


def _camera_rays(cam: CameraParams, nuis: Nuisances):
    pos = cam.position + nuis.cam_dpos
    fwd = cam.lookat - cam.position
    fwd = fwd / np.linalg.norm(fwd)
    up = np.array([0.0, 0.0, 1.0])
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    upc = np.cross(right, fwd)
    basis = np.stack([right, upc, fwd], axis=1) @ so3_exp(nuis.cam_deta)
    right, upc, fwd = basis[:, 0], basis[:, 1], basis[:, 2]

    tan_y = np.tan(nuis.fov_y / 2.0)
    tan_x = tan_y * (cam.width / cam.height)
    xs = (2.0 * (np.arange(cam.width) + 0.5) / cam.width - 1.0) * tan_x
    ys = (2.0 * (np.arange(cam.height) + 0.5) / cam.height - 1.0) * tan_y
    gx, gy = np.meshgrid(xs, ys)
    dirs = fwd[None, :] + gx.reshape(-1, 1) * right[None, :] - gy.reshape(-1, 1) * upc[None, :]
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(pos, dirs.shape)
    return origins, dirs


def render_depth(
    scene: Scene,
    nuis: Nuisances,
    cam: CameraParams,
    rng: np.random.Generator | None = None,
) -> DepthImage:
    """Perspective ray cast of the object on an infinite table.

    Depths inside [depth_min, depth_max] map affinely to [0.45, 1.0];
    anything else renders as 0. Passing an rng adds i.i.d. Gaussian
    pixel noise (then clamps back into the valid band)."""
    origins, dirs = _camera_rays(cam, nuis)
    n = dirs.shape[0]

    with np.errstate(divide="ignore", invalid="ignore"):
        t_table = -origins[:, 2] / dirs[:, 2]
    t_table = np.where((dirs[:, 2] < 0.0) & (t_table > 0.0), t_table, np.inf)

    t0, t1, hit = ray_object_interval(origins, dirs, scene.obj, scene.pose)
    t_obj = np.where(hit & (t1 > 0.0), np.maximum(t0, 0.0), np.inf)

    depth = np.minimum(t_table, t_obj)
    valid = np.isfinite(depth) & (depth >= nuis.depth_min) & (depth <= nuis.depth_max)
    norm = np.zeros(n)
    span = nuis.depth_max - nuis.depth_min
    norm[valid] = 0.45 + 0.55 * (depth[valid] - nuis.depth_min) / span

    if rng is not None and cam.sigma_px > 0.0:
        noise = rng.normal(0.0, cam.sigma_px, size=n)
        norm[valid] = np.clip(norm[valid] + noise[valid], 0.45, 1.0)

    grid = norm.reshape(cam.height, cam.width)
    return DepthImage(cam.width, cam.height, grid)


# --- default object catalog ---


def default_catalog() -> list:
    """Eight desk-scale objects, two size buckets per shape family."""
    entries = [
        ("box_small", "box", (0.070, 0.070, 0.15), 1.20),
        ("box_large", "box", (0.105, 0.075, 0.17), 1.20),
        ("cylinder_small", "cylinder", (0.070, 0.070, 0.15), 1.00),
        ("cylinder_large", "cylinder", (0.100, 0.100, 0.18), 1.00),
        ("sphere_small", "sphere", (0.075, 0.075, 0.075), 0.90),
        ("sphere_large", "sphere", (0.100, 0.100, 0.100), 0.90),
        ("capsule_small", "capsule", (0.065, 0.065, 0.16), 0.95),
        ("capsule_large", "capsule", (0.095, 0.095, 0.20), 0.95),
    ]
    return [ObjectSpec(shape, np.array(dims), 1.0, mu, name) for name, shape, dims, mu in entries]


# --- episode records and dataset I/O ---


@dataclass
class EpisodeRecord:
    idx: int
    h: HandConfig
    obj: ObjectSpec
    pose: ScenePose
    nuis: Nuisances
    success: int
    failure: str
    img: str | None

    def to_json_line(self) -> str:
        d = {
            "idx": self.idx,
            "h": self.h.to_dict(),
            "obj": self.obj.to_dict(),
            "pose": self.pose.to_dict(),
            "nuis": self.nuis.to_dict(),
            "S": int(self.success),
            "failure": self.failure,
            "img": self.img,
        }
        return json.dumps(d, sort_keys=True)

    @staticmethod
    def from_json_line(line: str) -> "EpisodeRecord":
        d = json.loads(line)
        return EpisodeRecord(
            int(d["idx"]),
            HandConfig.from_dict(d["h"]),
            ObjectSpec.from_dict(d["obj"]),
            ScenePose.from_dict(d["pose"]),
            Nuisances.from_dict(d["nuis"]),
            int(d["S"]),
            str(d["failure"]),
            d["img"],
        )


def _atomic_write_bytes(path: str, data: bytes) -> None:
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def _atomic_write_text(path: str, text: str) -> None:
    _atomic_write_bytes(path, text.encode("utf-8"))


_GEN_CTX: dict = {}


def _episode_worker(idx: int) -> tuple:
    ctx = _GEN_CTX
    return run_episode(
        idx,
        ctx["base_seed"],
        ctx["hand_prior"],
        ctx["scene_prior"],
        ctx["world"],
        ctx["camera"],
        ctx["images_mode"],
    )


def _init_gen_ctx(ctx: dict) -> None:
    global _GEN_CTX
    _GEN_CTX = ctx


def run_episode(idx, base_seed, hand_prior, scene_prior, world_params, cam, images_mode):
    """One episode with its own rng stream (seed = base_seed + idx).

    Returns (record_without_img_path, image_blob_or_None)."""
    from .distributions import hand_prior_sample, scene_prior_sample

    rng = np.random.default_rng(base_seed + idx)
    scene = scene_prior_sample(scene_prior, rng)
    nuis = sample_nuisances(cam, world_params, rng)
    h = hand_prior_sample(hand_prior, rng)
    outcome = simulate_grasp(h, scene.obj, scene.pose, nuis, world_params, rng)
    blob = None
    if images_mode == "all" or (images_mode == "success" and outcome.success):
        img = render_depth(scene, nuis, cam, rng)
        blob = img.to_blob()
    rec = EpisodeRecord(idx, h, scene.obj, scene.pose, nuis, int(outcome.success), outcome.failure, None)
    return rec, blob


def generate_episodes(
    out_dir: str,
    n: int,
    seed: int,
    hand_prior,
    scene_prior,
    world_params: WorldParams,
    cam: CameraParams,
    config_hash: str,
    images_mode: str = "success",
    workers: int = 1,
    zero_timing: bool = False,
) -> dict:
    """Write an episode dataset: episodes.jsonl, img/ blobs, manifest.json.

    The dataset is built in a scratch directory and renamed into place,
    so a failed run leaves nothing behind. Episode i is generated from
    seed + i regardless of the worker count. zero_timing reports
    wall_time_s as 0 so reruns are byte-identical."""
    if n <= 0:
        raise DataError("episode count must be positive")
    if images_mode not in ("success", "all", "none"):
        raise DataError(f"unknown images mode {images_mode!r}")
    if os.path.exists(out_dir):
        raise DataError(f"output directory {out_dir!r} already exists")

    t_start = time.monotonic()
    tmp_dir = out_dir + ".partial"
    if os.path.exists(tmp_dir):
        raise DataError(f"stale partial output {tmp_dir!r}; remove it first")
    os.makedirs(os.path.join(tmp_dir, "img"))

    ctx = {
        "base_seed": seed,
        "hand_prior": hand_prior,
        "scene_prior": scene_prior,
        "world": world_params,
        "camera": cam,
        "images_mode": images_mode,
    }

    try:
        if workers > 1:
            import multiprocessing as mp

            with mp.Pool(workers, initializer=_init_gen_ctx, initargs=(ctx,)) as pool:
                results = pool.map(_episode_worker, range(n), chunksize=64)
        else:
            _init_gen_ctx(ctx)
            results = [_episode_worker(i) for i in range(n)]

        n_success = 0
        lines = []
        for rec, blob in results:
            if blob is not None:
                rel = f"img/{rec.idx:06d}.f32"
                _atomic_write_bytes(os.path.join(tmp_dir, rel), blob)
                rec.img = rel
            n_success += rec.success
            lines.append(rec.to_json_line())
        _atomic_write_text(os.path.join(tmp_dir, "episodes.jsonl"), "\n".join(lines) + "\n")

        manifest = {
            "format": 1,
            "episodes": n,
            "seed": seed,
            "config_hash": config_hash,
            "images": images_mode,
            "image_width": cam.width,
            "image_height": cam.height,
            "success_count": n_success,
            "wall_time_s": 0.0 if zero_timing else time.monotonic() - t_start,
        }
        _atomic_write_text(os.path.join(tmp_dir, "manifest.json"), json.dumps(manifest, sort_keys=True, indent=2) + "\n")
        os.replace(tmp_dir, out_dir)
        return manifest
    except Exception:
        import shutil

        shutil.rmtree(tmp_dir, ignore_errors=True)
        raise


def load_episodes(dataset_dir: str):
    """Read a dataset directory; returns (records, manifest)."""
    man_path = os.path.join(dataset_dir, "manifest.json")
    ep_path = os.path.join(dataset_dir, "episodes.jsonl")
    if not os.path.isfile(man_path) or not os.path.isfile(ep_path):
        raise DataError(f"{dataset_dir!r} is not a dataset directory (missing manifest or episodes)")
    with open(man_path, "r", encoding="utf-8") as f:
        manifest = json.load(f)
    if manifest.get("format") != 1:
        raise DataError(f"unsupported dataset format {manifest.get('format')!r}")
    records = []
    with open(ep_path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                records.append(EpisodeRecord.from_json_line(line))
    if len(records) != manifest["episodes"]:
        raise DataError(f"dataset holds {len(records)} episodes, manifest claims {manifest['episodes']}")
    return records, manifest


def load_image(dataset_dir: str, rec: EpisodeRecord, width: int, height: int) -> np.ndarray:
    if rec.img is None:
        raise DataError(f"episode {rec.idx} has no stored image")
    with open(os.path.join(dataset_dir, rec.img), "rb") as f:
        blob = f.read()
    return DepthImage.from_blob(blob, width, height).data
