"""Conditioning pathways: text, instances, camera, road sketch.

A scene is encoded into a ConditionSet of token blocks: text tokens L
[n_L, d], instance tokens I [n_ins, d] and one camera token per view
P [V, 1, d]. The cross-attention context for view v is the row
concatenation [L; I; P_v], so its length obeys n_L + n_ins + 1.

Any of (text, instances, sketch) can be nullified: token blocks fall back
to learned null rows (zero-initialized) and the sketch raster to all zeros.
The camera block is never nullified.
"""

from dataclasses import dataclass, field, replace
from typing import NamedTuple, Optional

import numpy as np

from . import geometry
from .nn import Linear, Mlp, Module, Parameter, ShapeError, fourier_features

ROAD_HALF_WIDTH = 0.04  # world units; shared by sketch raster and renderer


class NullFlags(NamedTuple):
    text: bool = False
    instance: bool = False
    sketch: bool = False


@dataclass(frozen=True)
class CameraSpec:
    """Pinhole camera: intrinsics K [3,3], rotation R [3,3], translation t [3]."""

    K: np.ndarray
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "K", np.asarray(self.K, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "R", np.asarray(self.R, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64).reshape(3))
        if np.abs(self.R.T @ self.R - np.eye(3)).max() > 1e-8:
            raise ValueError("camera rotation is not orthonormal")
        if abs(np.linalg.det(self.K)) < 1e-12:
            raise ValueError("camera intrinsic matrix is singular")


@dataclass
class InstanceSpec:
    """A ground-plane box with linear per-frame motion.

    World fields drive the oracle renderer; ``box_views`` holds the derived
    per-view 2D boxes (cx, cy, w, h) in normalized [0,1] units at frame 0,
    clipped to the frame, which is what the encoder consumes.
    """

    center: np.ndarray  # [2] world
    size: np.ndarray  # [2] world, > 0
    heading: float  # radians
    velocity: np.ndarray  # [2] world displacement per frame
    caption_id: int
    box_views: np.ndarray  # [V, 4]

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(2)
        self.size = np.asarray(self.size, dtype=np.float64).reshape(2)
        self.velocity = np.asarray(self.velocity, dtype=np.float64).reshape(2)
        self.box_views = np.asarray(self.box_views, dtype=np.float64)
        if not np.all(self.size > 0):
            raise ValueError("instance size must be positive")


@dataclass
class SketchRaster:
    """Binary road raster [V, T, H, W, 1], values in {0, 1}."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 5 or self.values.shape[-1] != 1:
            raise ShapeError(f"sketch raster must be [V,T,H,W,1], got {self.values.shape}")
        if not np.all((self.values == 0.0) | (self.values == 1.0)):
            raise ValueError("sketch raster must be binary")

    @property
    def shape(self):
        return self.values.shape

    def zeros_like(self) -> "SketchRaster":
        return SketchRaster(np.zeros_like(self.values))


@dataclass
class SceneSpec:
    """Everything the generator is conditioned on for one scene."""

    scene_label: int
    instances: list
    cameras: list  # CameraSpec per view
    road: np.ndarray  # [n_pts, 2] world polyline
    sketch: Optional[SketchRaster] = None  # cached raster at the nominal resolution

    def __post_init__(self):
        self.road = np.asarray(self.road, dtype=np.float64)

    @property
    def n_views(self) -> int:
        return len(self.cameras)


def rasterize_sketch(scene: SceneSpec, resolution, t_frames: int) -> SketchRaster:
    """Draw the scene's road polyline per view at the given (H, W)."""
    h, w = resolution
    views = []
    for cam in scene.cameras:
        hom = geometry.ground_homography(cam.K, cam.R, cam.t)
        pts = geometry.project_ground(hom, scene.road)
        cov = geometry.polyline_coverage(pts, ROAD_HALF_WIDTH, h, w, supersample=1)
        views.append((cov > 0.5).astype(np.float64))
    grid = np.stack(views)[:, None, :, :, None]
    return SketchRaster(np.repeat(grid, t_frames, axis=1))


def scene_equal(a: SceneSpec, b: SceneSpec) -> bool:
    if a.scene_label != b.scene_label or len(a.instances) != len(b.instances):
        return False
    if not (np.array_equal(a.road, b.road) and len(a.cameras) == len(b.cameras)):
        return False
    for ca, cb in zip(a.cameras, b.cameras):
        if not (np.array_equal(ca.K, cb.K) and np.array_equal(ca.R, cb.R) and np.array_equal(ca.t, cb.t)):
            return False
    for ia, ib in zip(a.instances, b.instances):
        same = (
            np.array_equal(ia.center, ib.center)
            and np.array_equal(ia.size, ib.size)
            and ia.heading == ib.heading
            and np.array_equal(ia.velocity, ib.velocity)
            and ia.caption_id == ib.caption_id
            and np.array_equal(ia.box_views, ib.box_views)
        )
        if not same:
            return False
    return True


@dataclass
class ConditionSet:
    """Encoded condition blocks plus null bookkeeping."""

    L: np.ndarray  # [n_L, d]
    I: np.ndarray  # [n_ins, d]
    P: np.ndarray  # [V, 1, d]
    sketch: SketchRaster
    null_flags: NullFlags = NullFlags()
    scene_label: int = 0
    null_text_row: Optional[np.ndarray] = None
    null_inst_row: Optional[np.ndarray] = None
    ctx: Optional[dict] = field(default=None, repr=False)  # encoder backward cache

    @property
    def n_views(self) -> int:
        return self.P.shape[0]

    @property
    def n_rows(self) -> int:
        return self.L.shape[0] + self.I.shape[0] + 1


def aggregate_conditions(L, I, P) -> np.ndarray:
    """Row concatenation [L; I; P] -> [n_L + n_ins + 1, d]."""
    L = np.asarray(L, dtype=np.float64)
    I = np.asarray(I, dtype=np.float64)
    P = np.asarray(P, dtype=np.float64).reshape(1, -1)
    d = L.shape[1]
    if I.shape[1] != d and I.shape[0] > 0:
        raise ShapeError(f"instance token dim {I.shape} != text dim {L.shape}")
    if P.shape[1] != d:
        raise ShapeError(f"camera token dim {P.shape} != text dim {L.shape}")
    if I.shape[0] == 0:
        I = I.reshape(0, d)
    return np.concatenate([L, I, P], axis=0)


def nullify(cond: ConditionSet, mask) -> ConditionSet:
    """Replace masked blocks with learned null rows / all-zero raster. Idempotent."""
    mask = NullFlags(*mask)
    out = replace(cond)
    if mask.text:
        out.L = np.tile(cond.null_text_row, (cond.L.shape[0], 1))
    if mask.instance:
        out.I = np.tile(cond.null_inst_row, (cond.I.shape[0], 1))
    if mask.sketch:
        out.sketch = cond.sketch.zeros_like()
    out.null_flags = NullFlags(
        cond.null_flags.text or mask.text,
        cond.null_flags.instance or mask.instance,
        cond.null_flags.sketch or mask.sketch,
    )
    return out


def apply_first_k_mask(x_t: np.ndarray, x_1: np.ndarray, k: int):
    """Clamp the first k frames of x_t to x_1; loss mask is 0 there, 1 elsewhere.

    Returns (clamped grid, per-frame mask [T]). k must satisfy 0 <= k < T or
    the loss support would be empty.
    """
    if x_t.shape != x_1.shape:
        raise ShapeError(f"grid shapes differ: {x_t.shape} vs {x_1.shape}")
    t_frames = x_t.shape[1]
    if not 0 <= k < t_frames:
        raise ValueError(f"k={k} out of range for T={t_frames}")
    out = x_t.copy()
    out[:, :k] = x_1[:, :k]
    loss_mask = np.ones(t_frames)
    loss_mask[:k] = 0.0
    return out, loss_mask


class ConditionEncoder(Module):
    """Learned encoders for the three token pathways plus null embeddings.

    Forward caches feed ``backward``; at most one encode per training step
    may be outstanding (single-writer, like every module here).
    """

    def __init__(self, cfg, rng):
        d = cfg.d_model
        self.cfg = cfg
        self.text_table = Parameter(rng.normal(0.0, 1.0, size=(cfg.n_labels, d)))
        self.text_pos = Parameter(rng.normal(0.0, 0.02, size=(cfg.n_text_tokens, d)))
        self.null_text = Parameter(np.zeros(d))
        self.caption_table = Parameter(rng.normal(0.0, 1.0, size=(cfg.n_captions, d)))
        self.null_instance = Parameter(np.zeros(d))
        geo_dim = (4 * cfg.n_views + 3) * 2 * cfg.fourier_bands
        self.instance_mlp = Mlp(geo_dim + d, 2 * d, d, rng)
        self.camera_mlp = Mlp(16 * 2 * cfg.fourier_bands, 2 * d, d, rng)
        self._geo_dim = geo_dim

    # -- text ---------------------------------------------------------------
    def encode_text(self, scene_label: int) -> np.ndarray:
        if not 0 <= scene_label < self.cfg.n_labels:
            raise ValueError(f"unknown scene label {scene_label}")
        return self.text_table.value[scene_label] + self.text_pos.value

    # -- instances ----------------------------------------------------------
    def _instance_features(self, instances):
        rows = []
        for ins in instances:
            geo = np.concatenate([ins.box_views.ravel(), ins.velocity, [ins.heading]])
            ff = fourier_features(geo, self.cfg.fourier_bands).ravel()
            rows.append(np.concatenate([ff, self.caption_table.value[ins.caption_id]]))
        return np.stack(rows)

    def encode_instances(self, instances) -> np.ndarray:
        if not instances:
            return np.zeros((0, self.cfg.d_model))
        return self.instance_mlp.forward(self._instance_features(instances))

    # -- camera ---------------------------------------------------------------
    def camera_matrix_features(self, cam: CameraSpec) -> np.ndarray:
        """Flattened image-to-global 4x4 product, fourier encoded."""
        ext = np.eye(4)
        ext[:3, :3] = cam.R
        ext[:3, 3] = cam.t
        intr = np.eye(4)
        intr[:3, :3] = np.linalg.inv(cam.K)
        return fourier_features((ext @ intr).ravel(), self.cfg.fourier_bands).ravel()

    def encode_camera(self, cam: CameraSpec) -> np.ndarray:
        return self.camera_mlp.forward(self.camera_matrix_features(cam)[None, :])

    # -- whole scene ----------------------------------------------------------
    def encode_scene(self, scene: SceneSpec, resolution, t_frames: int) -> ConditionSet:
        L = self.encode_text(scene.scene_label)
        caption_ids = [ins.caption_id for ins in scene.instances]
        if scene.instances:
            feats = self._instance_features(scene.instances)
            I = self.instance_mlp.forward(feats)
        else:
            I = np.zeros((0, self.cfg.d_model))
        cam_feats = np.stack([self.camera_matrix_features(c) for c in scene.cameras])
        P = self.camera_mlp.forward(cam_feats)[:, None, :]
        sketch = rasterize_sketch(scene, resolution, t_frames)
        ctx = {"label": scene.scene_label, "caption_ids": caption_ids, "n_ins": len(scene.instances)}
        return ConditionSet(
            L=L,
            I=I,
            P=P,
            sketch=sketch,
            scene_label=scene.scene_label,
            null_text_row=self.null_text.value,
            null_inst_row=self.null_instance.value,
            ctx=ctx,
        )

    def backward(self, cond: ConditionSet, d_L, d_I, d_P):
        """Route token gradients into encoder parameters (see encode_scene)."""
        ctx = cond.ctx
        if cond.null_flags.text:
            self.null_text.grad += d_L.sum(axis=0)
        else:
            self.text_pos.grad += d_L
            self.text_table.grad[ctx["label"]] += d_L.sum(axis=0)
        if ctx["n_ins"] > 0:
            if cond.null_flags.instance:
                self.null_instance.grad += d_I.sum(axis=0)
            else:
                d_feats = self.instance_mlp.backward(d_I)
                d_caps = d_feats[:, self._geo_dim:]
                np.add.at(self.caption_table.grad, np.asarray(ctx["caption_ids"]), d_caps)
        self.camera_mlp.backward(d_P[:, 0, :])
