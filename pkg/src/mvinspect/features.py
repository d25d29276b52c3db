"""Data model and I/O: feature tensors, camera rig files, dataset manifests.

This is the ingestion boundary of the pipeline. Patch features normally come
from a frozen upstream encoder; here they enter as MVFT files so the library
never depends on an image backbone.

MVFT binary layout (all integers little-endian):
    bytes 0-3    magic "MVFT"
    bytes 4-7    version (u32, currently 1)
    bytes 8-19   V, T, D (u32 each)
    bytes 20-27  reserved, must be zero
    bytes 28-    V*T*D IEEE-754 binary32 values, view-major row-major
"""

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    AnomalousTrainSample,
    BadMagic,
    InvalidTensor,
    IoError,
    SchemaError,
    ShapeMismatch,
    TruncatedPayload,
    VersionMismatch,
)
from .geometry import FundamentalMatrix, PatchGrid

MVFT_MAGIC = b"MVFT"
MVFT_VERSION = 1
_HEADER = struct.Struct("<4s4I8x")  # magic, version, V, T, D, 8 reserved bytes
assert _HEADER.size == 28


@dataclass
class FeatureTensor:
    """Per-sample patch features across views: (V, T, D) float32."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise InvalidTensor(f"feature tensor must be 3-d (V,T,D), got {arr.ndim}-d")
        arr = arr.astype(np.float32, copy=False)
        if not np.all(np.isfinite(arr)):
            raise InvalidTensor("feature tensor contains non-finite values")
        self.data = arr

    @property
    def views(self) -> int:
        return self.data.shape[0]

    @property
    def tokens(self) -> int:
        return self.data.shape[1]

    @property
    def dims(self) -> int:
        return self.data.shape[2]


def write_feature_tensor(t: FeatureTensor, path) -> None:
    """Write a tensor in MVFT format; read_feature_tensor round-trips bit-exactly."""
    t = FeatureTensor(np.asarray(t.data if isinstance(t, FeatureTensor) else t))
    v, tok, d = t.data.shape
    header = _HEADER.pack(MVFT_MAGIC, MVFT_VERSION, v, tok, d)
    payload = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(payload)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def read_feature_tensor(path) -> FeatureTensor:
    """Read and validate an MVFT file."""
    shape, payload = _read_mvft_raw(path)
    v, tok, d = shape
    arr = np.frombuffer(payload, dtype="<f4").reshape(v, tok, d)
    if not np.all(np.isfinite(arr)):
        raise InvalidTensor(f"{path}: non-finite values in payload")
    return FeatureTensor(arr.copy())


def read_feature_shape(path) -> tuple[int, int, int]:
    """Read just the (V, T, D) header of an MVFT file (cheap validation)."""
    shape, _ = _read_mvft_raw(path, header_only=True)
    return shape


def _read_mvft_raw(path, header_only: bool = False):
    try:
        with open(path, "rb") as fh:
            head = fh.read(_HEADER.size)
            if len(head) < 4 or head[:4] != MVFT_MAGIC:
                raise BadMagic(f"{path}: not an MVFT file")
            if len(head) < _HEADER.size:
                raise TruncatedPayload(f"{path}: header truncated")
            magic, version, v, tok, d = _HEADER.unpack(head)
            if version != MVFT_VERSION:
                raise VersionMismatch(f"{path}: version {version}, expected {MVFT_VERSION}")
            if head[20:28] != b"\x00" * 8:
                raise SchemaError(f"{path}: reserved header bytes are not zero")
            expected = v * tok * d * 4
            if header_only:
                return (v, tok, d), b""
            payload = fh.read(expected + 1)
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if len(payload) < expected:
        raise TruncatedPayload(f"{path}: payload has {len(payload)} of {expected} bytes")
    if len(payload) > expected:
        raise SchemaError(f"{path}: trailing bytes after payload")
    return (v, tok, d), payload


@dataclass
class CameraRig:
    """Pairwise fundamental matrices (and optionally full calibration) for V views."""

    view_ids: list
    fundamental: dict  # (view_id_a, view_id_b) -> FundamentalMatrix
    intrinsics: dict | None = None  # view_id -> 3x3
    extrinsics: dict | None = None  # view_id -> 3x4 [R|t], world-to-camera

    def __post_init__(self):
        self.view_ids = [str(v) for v in self.view_ids]

    @property
    def n_views(self) -> int:
        return len(self.view_ids)

    def validate(self) -> None:
        """Check pair coverage and, when calibration is present, F consistency."""
        from .geometry import fundamental_from_cameras

        for a in self.view_ids:
            for b in self.view_ids:
                if a == b:
                    continue
                if (a, b) not in self.fundamental:
                    raise SchemaError(f"rig missing fundamental matrix for pair ({a}, {b})")
        if self.intrinsics is None or self.extrinsics is None:
            return
        for (a, b), f in self.fundamental.items():
            analytic = fundamental_from_cameras(
                self.intrinsics[a], self.extrinsics[a],
                self.intrinsics[b], self.extrinsics[b],
            )
            gap = min(np.linalg.norm(analytic.m - f.m), np.linalg.norm(analytic.m + f.m))
            if gap > 1e-9:
                raise SchemaError(
                    f"stored F for pair ({a}, {b}) deviates from calibration by {gap:.3e}"
                )

    def to_json_dict(self) -> dict:
        out = {
            "view_ids": list(self.view_ids),
            "fundamental": {
                a: {b: f.m.ravel().tolist()
                    for (fa, b), f in sorted(self.fundamental.items()) if fa == a}
                for a in self.view_ids
            },
        }
        if self.intrinsics is not None:
            out["intrinsics"] = {v: np.asarray(k).ravel().tolist()
                                 for v, k in sorted(self.intrinsics.items())}
        if self.extrinsics is not None:
            out["extrinsics"] = {v: np.asarray(rt).ravel().tolist()
                                 for v, rt in sorted(self.extrinsics.items())}
        return out

    @classmethod
    def from_json_dict(cls, obj: dict) -> "CameraRig":
        try:
            view_ids = [str(v) for v in obj["view_ids"]]
            fundamental = {}
            for a, row in obj["fundamental"].items():
                for b, nine in row.items():
                    m = np.asarray(nine, dtype=np.float64)
                    if m.size != 9:
                        raise SchemaError(f"fundamental[{a}][{b}] must have 9 numbers")
                    fundamental[(a, b)] = FundamentalMatrix(
                        m=m.reshape(3, 3), src_view=a, dst_view=b)
            intrinsics = extrinsics = None
            if "intrinsics" in obj:
                intrinsics = {v: np.asarray(k, dtype=np.float64).reshape(3, 3)
                              for v, k in obj["intrinsics"].items()}
            if "extrinsics" in obj:
                extrinsics = {v: np.asarray(rt, dtype=np.float64).reshape(3, 4)
                              for v, rt in obj["extrinsics"].items()}
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"malformed rig: {exc}") from exc
        rig = cls(view_ids=view_ids, fundamental=fundamental,
                  intrinsics=intrinsics, extrinsics=extrinsics)
        rig.validate()
        return rig


def save_rig(rig: CameraRig, path) -> None:
    _write_json(rig.to_json_dict(), path)


def load_rig(path) -> CameraRig:
    return CameraRig.from_json_dict(_read_json(path))


@dataclass
class ManifestSample:
    sample_id: str
    split: str  # train | test
    label: str  # normal | anomalous
    view_feature_paths: list
    view_labels: list  # V image-level binary labels
    patch_masks: list | None = None  # V binary vectors of length T


@dataclass
class DatasetManifest:
    grid: PatchGrid
    rig_path: str
    samples: list = field(default_factory=list)
    base_dir: Path = field(default_factory=Path)

    def train_samples(self) -> list:
        return [s for s in self.samples if s.split == "train"]

    def test_samples(self) -> list:
        return [s for s in self.samples if s.split == "test"]

    def feature_path(self, sample: ManifestSample, view: int) -> Path:
        return self.base_dir / sample.view_feature_paths[view]

    def resolved_rig_path(self) -> Path:
        return self.base_dir / self.rig_path

    def to_json_dict(self) -> dict:
        return {
            "grid": {
                "image_width": self.grid.image_width,
                "image_height": self.grid.image_height,
                "patch_size": self.grid.patch_size,
            },
            "rig_path": self.rig_path,
            "samples": [
                {
                    "sample_id": s.sample_id,
                    "split": s.split,
                    "label": s.label,
                    "view_feature_paths": list(s.view_feature_paths),
                    "view_labels": [int(x) for x in s.view_labels],
                    **({"patch_masks": [[int(b) for b in m] for m in s.patch_masks]}
                       if s.patch_masks is not None else {}),
                }
                for s in self.samples
            ],
        }


def save_manifest(manifest: DatasetManifest, path) -> None:
    _write_json(manifest.to_json_dict(), path)


def load_manifest(path) -> DatasetManifest:
    """Parse, then validate cross-file shape consistency and the
    normal-only-training protocol.

    Raises SchemaError (structure/missing file), ShapeMismatch (inconsistent
    tensors), AnomalousTrainSample (protocol violation).
    """
    obj = _read_json(path)
    base = Path(path).parent
    try:
        g = obj["grid"]
        grid = PatchGrid(int(g["image_width"]), int(g["image_height"]), int(g["patch_size"]))
        rig_path = str(obj["rig_path"])
        samples = []
        for raw in obj["samples"]:
            samples.append(ManifestSample(
                sample_id=str(raw["sample_id"]),
                split=str(raw["split"]),
                label=str(raw["label"]),
                view_feature_paths=[str(p) for p in raw["view_feature_paths"]],
                view_labels=[int(x) for x in raw["view_labels"]],
                patch_masks=([[int(b) for b in m] for m in raw["patch_masks"]]
                             if "patch_masks" in raw else None),
            ))
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"malformed manifest: {exc}") from exc

    manifest = DatasetManifest(grid=grid, rig_path=rig_path, samples=samples, base_dir=base)
    _validate_manifest(manifest)
    return manifest


def _validate_manifest(manifest: DatasetManifest) -> None:
    t_expected = manifest.grid.token_count
    ref_shape = None
    if not (manifest.base_dir / manifest.rig_path).exists():
        raise SchemaError(f"rig file missing: {manifest.rig_path}")
    for s in manifest.samples:
        if s.split not in ("train", "test"):
            raise SchemaError(f"sample {s.sample_id}: bad split {s.split!r}")
        if s.label not in ("normal", "anomalous"):
            raise SchemaError(f"sample {s.sample_id}: bad label {s.label!r}")
        if s.split == "train" and s.label != "normal":
            raise AnomalousTrainSample(
                f"sample {s.sample_id} is anomalous but in the train split")
        if len(s.view_labels) != len(s.view_feature_paths):
            raise SchemaError(f"sample {s.sample_id}: view_labels length mismatch")
        if s.patch_masks is not None:
            if len(s.patch_masks) != len(s.view_feature_paths):
                raise SchemaError(f"sample {s.sample_id}: patch_masks view count mismatch")
            for m in s.patch_masks:
                if len(m) != t_expected:
                    raise ShapeMismatch(
                        f"sample {s.sample_id}: patch mask length {len(m)} != T {t_expected}")
        for rel in s.view_feature_paths:
            fpath = manifest.base_dir / rel
            if not fpath.exists():
                raise SchemaError(f"sample {s.sample_id}: missing feature file {rel}")
            shape = read_feature_shape(fpath)
            if shape[0] != 1:
                raise ShapeMismatch(f"{rel}: per-view files must have V=1, got {shape[0]}")
            if shape[1] != t_expected:
                raise ShapeMismatch(f"{rel}: T={shape[1]} but grid implies {t_expected}")
            if ref_shape is None:
                ref_shape = shape
            elif shape[2] != ref_shape[2]:
                raise ShapeMismatch(f"{rel}: D={shape[2]} != first sample's D={ref_shape[2]}")


def load_sample_tensor(manifest: DatasetManifest, sample: ManifestSample) -> FeatureTensor:
    """Stack a sample's per-view MVFT files into one (V, T, D) tensor."""
    views = [read_feature_tensor(manifest.feature_path(sample, v)).data[0]
             for v in range(len(sample.view_feature_paths))]
    return FeatureTensor(np.stack(views, axis=0))


def masks_to_json_dict(mask_set) -> dict:
    """Compact JSON encoding of an EpipolarMaskSet (rows as 0/1 strings)."""
    return {
        "delta_patches": mask_set.delta_patches,
        "masks": {
            f"{a},{b}": ["".join("1" if x else "0" for x in row) for row in m]
            for (a, b), m in sorted(mask_set.masks.items())
        },
    }


def masks_from_json_dict(obj: dict):
    from .geometry import EpipolarMaskSet

    try:
        masks = {}
        for key, rows in obj["masks"].items():
            a, b = (int(x) for x in key.split(","))
            masks[(a, b)] = np.array(
                [[1 if ch == "1" else 0 for ch in row] for row in rows], dtype=np.uint8)
        return EpipolarMaskSet(masks=masks, delta_patches=float(obj["delta_patches"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"malformed mask set: {exc}") from exc


def _write_json(obj: dict, path) -> None:
    try:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def _read_json(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}") from exc
