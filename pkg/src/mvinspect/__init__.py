"""Epipolar-geometry-guided multi-view anomaly detection.

Camera geometry builds binary cross-view attention masks; a trainable masked
attention module fuses per-view patch features; fused features are scored
against per-view coreset memory banks. A built-in synthetic multi-view scene
generator makes the whole pipeline verifiable at desk scale.
"""

__version__ = "0.1.0"

from .attention import ProjectionWeights, eam_backward, eam_forward, unmasked_mode
from .features import (
    CameraRig,
    DatasetManifest,
    FeatureTensor,
    load_manifest,
    load_rig,
    read_feature_tensor,
    save_rig,
    write_feature_tensor,
)
from .geometry import (
    EpipolarLine,
    EpipolarMaskSet,
    FundamentalMatrix,
    PatchGrid,
    PixelPoint,
    build_epipolar_mask,
    epipolar_line,
    estimate_fundamental_8pt,
    fundamental_from_cameras,
    patch_center,
    point_line_distance,
)
from .membank import (
    MemoryBank,
    ScoreReport,
    build_bank,
    refine_scores_epipolar,
    sample_score,
    score_sample,
    score_view,
)
from .metrics import AblationSpec, ap, auroc, evaluate, run_ablation
from .pipeline import RunConfig, run_pipeline
from .pretrain import (
    ClusterCenters,
    NegativeSet,
    TrainConfig,
    assign_nearest,
    kmeans_init,
    negative_loss,
    positive_loss,
    synthesize_negatives,
    total_loss,
    train,
)
from .synth import SceneConfig, make_rig, synth_dataset, synth_sample
