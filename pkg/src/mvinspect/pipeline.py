"""End-to-end orchestration: pretrain -> build banks -> score -> evaluate.

RunConfig is the single configuration surface shared by the CLI and the
ablation harness; every stage derives its seeds from RunConfig.seed so a
full run is deterministic.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .attention import ProjectionWeights, forward_batch
from .errors import NumericError, SchemaError
from .features import DatasetManifest, load_sample_tensor
from .geometry import EpipolarMaskSet
from .membank import MemoryBank, build_bank, score_sample
from .metrics import (
    VALID_BANK,
    VALID_FUSION,
    VALID_PRETRAIN,
    MetricTable,
    evaluate,
)
from .pretrain import TrainConfig, TrainResult, train

DEFAULT_RATIOS = {"single-class": 0.10, "multi-class": 0.0033}


@dataclass(frozen=True)
class RunConfig:
    """Pipeline settings: fusion arm, pretraining arm, bank layout, scoring."""

    seed: int = 0
    fusion: str = "epipolar"  # none | unmasked | epipolar
    pretraining: str = "multi-center+reg"
    bank: str = "per-view"  # per-view | shared
    mode: str = "single-class"  # selects the default coreset ratio
    ratio: float = None
    delta_patches: float = 1.0
    refine: bool = False
    alpha: float = 0.5
    train: TrainConfig = None

    def __post_init__(self):
        if self.fusion not in VALID_FUSION:
            raise SchemaError(f"bad fusion {self.fusion!r}")
        if self.pretraining not in VALID_PRETRAIN:
            raise SchemaError(f"bad pretraining {self.pretraining!r}")
        if self.bank not in VALID_BANK:
            raise SchemaError(f"bad bank {self.bank!r}")
        if self.mode not in DEFAULT_RATIOS:
            raise SchemaError(f"bad mode {self.mode!r}")
        if self.ratio is not None and not 0.0 < self.ratio <= 1.0:
            raise SchemaError("ratio must be in (0, 1]")
        if not 0.0 <= self.alpha <= 1.0:
            raise SchemaError("alpha must be in [0, 1]")
        if self.train is None:
            object.__setattr__(self, "train", TrainConfig(seed=self.seed))

    @property
    def effective_ratio(self) -> float:
        return self.ratio if self.ratio is not None else DEFAULT_RATIOS[self.mode]

    @property
    def effective_delta(self) -> float:
        """Mask threshold for the configured fusion arm."""
        return math.inf if self.fusion == "unmasked" else self.delta_patches

    def train_config(self) -> TrainConfig:
        """TrainConfig for this run's pretraining arm."""
        base = replace(self.train, seed=self.seed, delta_patches=self.effective_delta)
        if self.pretraining == "single-center":
            return replace(base, k_centers=1, lam=0.0)
        if self.pretraining == "multi-center":
            return replace(base, lam=0.0)
        return base

    def with_spec(self, spec, seed: int) -> "RunConfig":
        return replace(self, fusion=spec.fusion, pretraining=spec.pretraining,
                       bank=spec.bank, seed=seed)


@dataclass
class PipelineResult:
    weights: ProjectionWeights = None
    train_result: TrainResult = None
    bank: MemoryBank = None
    reports: list = field(default_factory=list)
    metrics: MetricTable = None
    masks: EpipolarMaskSet = None


def build_masks(manifest: DatasetManifest, rig, cfg: RunConfig) -> EpipolarMaskSet:
    return EpipolarMaskSet.from_fundamentals(
        manifest.grid, rig.fundamental, cfg.effective_delta, view_order=rig.view_ids)


def prepare_weights(manifest: DatasetManifest, rig, cfg: RunConfig):
    """Weights for the configured arm: None (no fusion), random init
    (untrained arms), or pretrained via the multi-center objective."""
    if cfg.fusion == "none":
        return None, None
    if cfg.pretraining in ("random-init", "copy-proxy"):
        dims = load_sample_tensor(manifest, manifest.samples[0]).dims
        return ProjectionWeights.random_init(dims, cfg.seed), None
    result = train(manifest, rig, cfg.train_config())
    return result.weights, result


def fuse_tensors(tensors: np.ndarray, masks, weights, batch: int = 8) -> np.ndarray:
    """Map (N, V, T, D) float inputs through the fusion module -> float32."""
    if weights is None:
        return tensors.astype(np.float32)
    out = np.empty(tensors.shape, dtype=np.float32)
    for start in range(0, tensors.shape[0], batch):
        chunk = tensors[start:start + batch].astype(np.float64)
        out[start:start + batch] = forward_batch(chunk, masks, weights).fused.astype(np.float32)
    return out


def run_pipeline(manifest: DatasetManifest, rig, cfg: RunConfig) -> PipelineResult:
    """Run the full chain on one manifest and return all stage artifacts."""
    masks = build_masks(manifest, rig, cfg) if cfg.fusion != "none" else None
    weights, train_result = prepare_weights(manifest, rig, cfg)

    train_samples = manifest.train_samples()
    test_samples = manifest.test_samples()
    z_train = np.stack([load_sample_tensor(manifest, s).data for s in train_samples])
    fused_train = fuse_tensors(z_train, masks, weights)
    _check_finite(fused_train, "fused train features")

    v_n = fused_train.shape[1]
    per_view = {v: fused_train[:, v].reshape(-1, fused_train.shape[-1])
                for v in range(v_n)}
    bank = build_bank(per_view, cfg.effective_ratio, cfg.seed, mode=cfg.bank)

    reports = []
    for sample in test_samples:
        z = load_sample_tensor(manifest, sample).data[None]
        fused = fuse_tensors(z, masks, weights)[0]
        _check_finite(fused, f"fused features of {sample.sample_id}")
        reports.append(score_sample(
            sample.sample_id, fused, bank,
            masks=masks, alpha=cfg.alpha, refine=cfg.refine and masks is not None,
            metadata={"delta_patches": repr(cfg.effective_delta), "fusion": cfg.fusion,
                      "bank": cfg.bank}))

    table = evaluate(manifest, reports)
    return PipelineResult(weights=weights, train_result=train_result, bank=bank,
                          reports=reports, metrics=table, masks=masks)


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")
