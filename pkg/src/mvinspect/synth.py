"""Deterministic synthetic multi-view scene generator.

The scene is a unit sphere dressed with a smooth multi-lobe appearance field,
observed by pinhole cameras on an arc. Patch features are noisy averages of
the appearance vectors of surface anchors projecting into each patch, so the
generator provides exact ground-truth geometry (for epipolar oracles) and
patch-level anomaly labels with view-dependent visibility.

All randomness is drawn from counter-based streams keyed by
(seed, sample_id, purpose), so generation is deterministic and order-free.
"""

from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import rng
from .errors import DegenerateRig, SchemaError
from .features import (
    CameraRig,
    DatasetManifest,
    FeatureTensor,
    ManifestSample,
    save_manifest,
    save_rig,
    write_feature_tensor,
)
from .geometry import PatchGrid, fundamental_from_cameras

_ORBIT_RADIUS = 4.0  # distance of camera centers from the object
_N_BASIS = 8  # smooth appearance lobes; keeps the normal feature set multi-modal
_BASIS_WIDTH = 0.8
_ANOMALY_GAIN = 0.45  # appearance shift applied to defective anchors
_FOCAL_FACTOR = 1.7  # focal length as a multiple of image width
_VIEW_GAIN_PER_SIGMA = 4.375  # per-view photometric modulation, relative to noise
_VIEW_GAIN_CAP = 0.5


@dataclass(frozen=True)
class SceneConfig:
    """Parameters of the synthetic multi-camera scene."""

    seed: int
    views: int
    grid: PatchGrid
    feature_dims: int
    surface_points: int = 800
    anomaly_rate: float = 0.5
    anomaly_radius: float = 0.35
    noise_sigma: float = 0.05
    camera_baseline: float = 1.2

    def __post_init__(self):
        if self.views < 2:
            raise SchemaError("need at least 2 views")
        if not 0.0 <= self.anomaly_rate <= 1.0:
            raise SchemaError("anomaly_rate must be in [0, 1]")
        if self.noise_sigma < 0:
            raise SchemaError("noise_sigma must be >= 0")
        if self.surface_points < 1 or self.feature_dims < 1:
            raise SchemaError("surface_points and feature_dims must be positive")


def make_rig(cfg: SceneConfig) -> CameraRig:
    """Place V pinhole cameras on an arc facing the origin.

    Adjacent camera centers are separated by cfg.camera_baseline (chord
    length). All pairwise fundamental matrices are computed analytically from
    the calibration, so the rig self-validates.
    """
    half_chord = cfg.camera_baseline / (2.0 * _ORBIT_RADIUS)
    if abs(half_chord) >= 1.0:
        raise SchemaError("camera_baseline too large for the orbit radius")
    step = 2.0 * np.arcsin(half_chord)
    if step < 1e-9:
        raise DegenerateRig("zero baseline: coincident camera centers")

    w, h = cfg.grid.image_width, cfg.grid.image_height
    focal = _FOCAL_FACTOR * w
    k = np.array([[focal, 0.0, w / 2.0],
                  [0.0, focal, h / 2.0],
                  [0.0, 0.0, 1.0]])

    view_ids = [f"view{v}" for v in range(cfg.views)]
    intrinsics = {}
    extrinsics = {}
    for i, vid in enumerate(view_ids):
        angle = (i - (cfg.views - 1) / 2.0) * step
        center = _ORBIT_RADIUS * np.array([np.sin(angle), 0.0, np.cos(angle)])
        r = _look_at(center)
        t = -r @ center
        intrinsics[vid] = k
        extrinsics[vid] = np.column_stack([r, t])

    fundamental = {}
    for a in view_ids:
        for b in view_ids:
            if a == b:
                continue
            try:
                fundamental[(a, b)] = fundamental_from_cameras(
                    intrinsics[a], extrinsics[a], intrinsics[b], extrinsics[b],
                    src_view=a, dst_view=b)
            except Exception as exc:
                raise DegenerateRig(f"cannot relate views {a} and {b}: {exc}") from exc

    rig = CameraRig(view_ids=view_ids, fundamental=fundamental,
                    intrinsics=intrinsics, extrinsics=extrinsics)
    rig.validate()
    return rig


def _look_at(center: np.ndarray) -> np.ndarray:
    """World-to-camera rotation for a camera at ``center`` looking at the origin."""
    z = -center / np.linalg.norm(center)
    up = np.array([0.0, 1.0, 0.0])
    x = np.cross(up, z)
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=0)


def project_point(k: np.ndarray, rt: np.ndarray, point: np.ndarray):
    """Project a world point; returns (u, v, depth). depth <= 0 means behind."""
    cam = rt[:, :3] @ point + rt[:, 3]
    if cam[2] <= 1e-12:
        return 0.0, 0.0, float(cam[2])
    pix = k @ cam
    return float(pix[0] / pix[2]), float(pix[1] / pix[2]), float(cam[2])


@dataclass(frozen=True)
class _SceneModel:
    """Deterministic per-scene data shared by every sample."""

    anchors: np.ndarray       # (N, 3) points on the unit sphere
    appearance: np.ndarray    # (N, D) smooth multi-lobe appearance vectors
    background: np.ndarray    # (D,) feature of patches with no visible anchor
    view_gains: np.ndarray    # (V, D) per-view photometric modulation


@lru_cache(maxsize=8)
def _scene_model(cfg: SceneConfig) -> _SceneModel:
    gen = rng.stream(cfg.seed, "scene-anchors")
    anchors = gen.standard_normal((cfg.surface_points, 3))
    anchors /= np.linalg.norm(anchors, axis=1, keepdims=True)

    gen = rng.stream(cfg.seed, "scene-appearance")
    basis_centers = gen.standard_normal((_N_BASIS, 3))
    basis_centers /= np.linalg.norm(basis_centers, axis=1, keepdims=True)
    basis_vectors = gen.standard_normal((_N_BASIS, cfg.feature_dims))
    basis_vectors /= np.sqrt(cfg.feature_dims)

    d2 = ((anchors[:, None, :] - basis_centers[None, :, :]) ** 2).sum(axis=2)
    response = np.exp(-d2 / (2.0 * _BASIS_WIDTH ** 2))
    appearance = response @ basis_vectors

    gen = rng.stream(cfg.seed, "scene-background")
    background = gen.standard_normal(cfg.feature_dims) / np.sqrt(cfg.feature_dims)

    # each camera sees the surface under its own photometric character;
    # the modulation scales with the noise level so cross-view feature gaps
    # stay noise-dominated at any configured sigma
    gen = rng.stream(cfg.seed, "scene-view-gains")
    strength = min(_VIEW_GAIN_PER_SIGMA * cfg.noise_sigma, _VIEW_GAIN_CAP)
    view_gains = 1.0 + strength * gen.standard_normal((cfg.views, cfg.feature_dims))
    np.clip(view_gains, 0.2, None, out=view_gains)
    return _SceneModel(anchors=anchors, appearance=appearance,
                       background=background, view_gains=view_gains)


def synth_sample(cfg: SceneConfig, rig: CameraRig, sample_id, anomalous: bool):
    """Generate one sample: (FeatureTensor, per-view patch masks).

    A defective sample perturbs the appearance of every anchor within
    cfg.anomaly_radius of a randomly chosen surface point; each view's patch
    mask marks exactly the patches receiving at least one perturbed anchor,
    so one 3D defect yields view-dependent visibility.
    """
    scene = _scene_model(cfg)
    grid = cfg.grid
    d = cfg.feature_dims
    appearance = scene.appearance

    defect_anchor_idx = np.zeros(len(scene.anchors), dtype=bool)
    if anomalous:
        gen = rng.stream(cfg.seed, "defect", sample_id)
        # defects live on the surface the rig can actually observe, so every
        # anomalous sample carries evidence in at least one view
        visible_any = np.zeros(len(scene.anchors), dtype=bool)
        for vid in rig.view_ids:
            _, vis = _anchor_tokens(cfg, rig, vid, scene.anchors)
            visible_any |= vis
        candidates = np.flatnonzero(visible_any)
        if candidates.size == 0:
            candidates = np.arange(len(scene.anchors))
        center = scene.anchors[int(candidates[int(gen.integers(candidates.size))])]
        defect_anchor_idx = np.linalg.norm(scene.anchors - center, axis=1) <= cfg.anomaly_radius
        appearance = appearance.copy()
        if gen.random() < 0.5 and cfg.views >= 2:
            # cross-camera impersonation: the defective surface mimics how a
            # DIFFERENT camera renders normal material, so one view's pooled
            # nearest-neighbor match is fooled while its own view's bank is not
            v0, w0 = gen.choice(cfg.views, size=2, replace=False)
            ratio = scene.view_gains[int(w0)] / scene.view_gains[int(v0)]
            appearance[defect_anchor_idx] *= ratio
        else:
            direction = gen.standard_normal(d)
            direction /= np.linalg.norm(direction)
            appearance[defect_anchor_idx] += _ANOMALY_GAIN * direction

    tensor = np.empty((cfg.views, grid.token_count, d), dtype=np.float32)
    masks = []
    for v, vid in enumerate(rig.view_ids):
        tokens, visible = _anchor_tokens(cfg, rig, vid, scene.anchors)
        patch_sum = np.zeros((grid.token_count, d))
        patch_cnt = np.zeros(grid.token_count)
        np.add.at(patch_sum, tokens, appearance[visible])
        np.add.at(patch_cnt, tokens, 1.0)
        feats = np.where(patch_cnt[:, None] > 0,
                         patch_sum / np.maximum(patch_cnt[:, None], 1.0),
                         scene.background[None, :])
        feats = feats * scene.view_gains[v][None, :]
        noise = rng.stream(cfg.seed, "noise", sample_id, v).standard_normal(feats.shape)
        feats = feats + cfg.noise_sigma * noise

        mask = np.zeros(grid.token_count, dtype=np.uint8)
        if anomalous:
            hit = defect_anchor_idx[visible]
            if hit.any():
                mask[np.unique(tokens[hit])] = 1
        tensor[v] = feats.astype(np.float32)
        masks.append(mask)
    return FeatureTensor(tensor), masks


def _anchor_tokens(cfg: SceneConfig, rig: CameraRig, view_id: str, anchors: np.ndarray):
    """Token index of each visible anchor in one view.

    Visibility = in front of the camera, inside the frame, and on the camera
    side of the sphere (hemisphere test against the anchor normal).
    """
    grid = cfg.grid
    k = rig.intrinsics[view_id]
    rt = rig.extrinsics[view_id]
    r, t = rt[:, :3], rt[:, 3]

    cam = anchors @ r.T + t
    in_front = cam[:, 2] > 1e-9
    z = np.where(in_front, cam[:, 2], 1.0)
    u = (k[0, 0] * cam[:, 0] + k[0, 2] * cam[:, 2]) / (k[2, 2] * z)
    v = (k[1, 1] * cam[:, 1] + k[1, 2] * cam[:, 2]) / (k[2, 2] * z)

    center = -r.T @ t
    facing = ((center[None, :] - anchors) * anchors).sum(axis=1) > 0.0

    inside = (u >= 0) & (u < grid.image_width) & (v >= 0) & (v < grid.image_height)
    visible = in_front & facing & inside
    cols = np.floor(u[visible] / grid.patch_size).astype(int)
    rows = np.floor(v[visible] / grid.patch_size).astype(int)
    return rows * grid.grid_w + cols, visible


def synth_dataset(cfg: SceneConfig, n_train: int, n_test: int, out_dir) -> DatasetManifest:
    """Write a complete dataset (rig, MVFT feature files, manifest) to out_dir.

    Train samples are all normal; each test sample is anomalous with
    probability cfg.anomaly_rate, decided by its own keyed stream.
    Returns the manifest (also written as manifest.json).
    """
    out = Path(out_dir)
    feat_dir = out / "features"
    feat_dir.mkdir(parents=True, exist_ok=True)

    rig = make_rig(cfg)
    save_rig(rig, out / "rig.json")

    samples = []
    for split, count in (("train", n_train), ("test", n_test)):
        for i in range(count):
            sid = f"{split}{i:04d}"
            if split == "train":
                anomalous = False
            else:
                anomalous = bool(rng.stream(cfg.seed, "label", sid).random() < cfg.anomaly_rate)
            tensor, masks = synth_sample(cfg, rig, sid, anomalous)
            paths = []
            for v in range(cfg.views):
                rel = f"features/{sid}_v{v}.mvft"
                write_feature_tensor(FeatureTensor(tensor.data[v:v + 1]), out / rel)
                paths.append(rel)
            samples.append(ManifestSample(
                sample_id=sid,
                split=split,
                label="anomalous" if anomalous else "normal",
                view_feature_paths=paths,
                view_labels=[int(m.any()) for m in masks],
                patch_masks=([m.tolist() for m in masks] if split == "test" else None),
            ))

    manifest = DatasetManifest(grid=cfg.grid, rig_path="rig.json",
                               samples=samples, base_dir=out)
    save_manifest(manifest, out / "manifest.json")
    return manifest
