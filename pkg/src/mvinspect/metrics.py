"""Evaluation metrics (AUROC, average precision) and the ablation harness.

AUROC uses the rank-sum (Mann-Whitney) formulation with average ranks for
ties, which equals trapezoidal integration of the ROC curve. AP sweeps
descending score thresholds with tied scores grouped into one threshold.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import NoPositives, SchemaError, SingleClass

VALID_FUSION = ("none", "unmasked", "epipolar")
VALID_PRETRAIN = ("random-init", "copy-proxy", "single-center",
                  "multi-center", "multi-center+reg")
VALID_BANK = ("shared", "per-view")


def _as_scores_labels(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(int)
    if s.shape != y.shape:
        raise SchemaError(f"scores {s.shape} and labels {y.shape} differ")
    if not np.all((y == 0) | (y == 1)):
        raise SchemaError("labels must be binary")
    return s, y


def _average_ranks(s: np.ndarray) -> np.ndarray:
    """1-based ranks with tied values assigned their average rank."""
    order = np.argsort(s, kind="stable")
    ranks = np.empty(len(s), dtype=np.float64)
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and s[order[j + 1]] == s[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auroc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative
    (ties count half)."""
    s, y = _as_scores_labels(scores, labels)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("AUROC needs both classes")
    ranks = _average_ranks(s)
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def ap(scores, labels) -> float:
    """Average precision: sum of (recall step) * (precision) over descending
    thresholds, tied scores grouped."""
    s, y = _as_scores_labels(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise NoPositives("AP needs at least one positive")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    boundaries = np.flatnonzero(np.diff(s)) + 1
    group_ends = np.append(boundaries, len(s))
    tp = np.cumsum(y)[group_ends - 1]
    predicted = group_ends
    precision = tp / predicted
    recall = tp / n_pos
    recall_prev = np.concatenate([[0.0], recall[:-1]])
    return float(((recall - recall_prev) * precision).sum())


@dataclass
class MetricRow:
    level: str
    metric: str
    value: float
    n_pos: int
    n_neg: int


@dataclass
class MetricTable:
    rows: list = field(default_factory=list)

    def value(self, level: str, metric: str) -> float:
        for row in self.rows:
            if row.level == level and row.metric == metric:
                return row.value
        raise KeyError(f"no metric {metric} at level {level}")

    def to_csv(self) -> str:
        lines = ["level,metric,value,n_pos,n_neg"]
        for r in self.rows:
            lines.append(f"{r.level},{r.metric},{r.value:.6f},{r.n_pos},{r.n_neg}")
        return "\n".join(lines) + "\n"

    def to_json_dict(self) -> dict:
        return {"rows": [vars(r) for r in self.rows]}


def evaluate(manifest, reports: list) -> MetricTable:
    """Image-level AUROC/AP (per-view scores vs per-view labels),
    sample-level AUROC/AP (max-over-views score vs sample label), and
    patch-level AUROC (token scores vs token masks, pooled).

    A view of an anomalous sample in which no patch is marked counts as
    normal at image level.
    """
    by_id = {s.sample_id: s for s in manifest.test_samples()}
    image_scores, image_labels = [], []
    sample_scores, sample_labels = [], []
    patch_scores, patch_labels = [], []
    for report in reports:
        sample = by_id.get(report.sample_id)
        if sample is None:
            raise SchemaError(f"report for unknown test sample {report.sample_id!r}")
        sample_scores.append(report.score)
        sample_labels.append(1 if sample.label == "anomalous" else 0)
        for v, vs in enumerate(np.asarray(report.image_scores)):
            image_scores.append(float(vs))
            image_labels.append(int(sample.view_labels[v]))
        if sample.patch_masks is not None:
            for v in range(len(sample.patch_masks)):
                patch_scores.extend(np.asarray(report.token_scores[v]).tolist())
                patch_labels.extend(int(b) for b in sample.patch_masks[v])

    table = MetricTable()
    _append_level(table, "image", image_scores, image_labels, with_ap=True)
    _append_level(table, "sample", sample_scores, sample_labels, with_ap=True)
    if patch_scores:
        _append_level(table, "patch", patch_scores, patch_labels, with_ap=False)
    return table


def _append_level(table: MetricTable, level: str, scores, labels, with_ap: bool) -> None:
    y = np.asarray(labels, dtype=int)
    n_pos, n_neg = int(y.sum()), int((1 - y).sum())
    table.rows.append(MetricRow(level, "auroc", auroc(scores, labels), n_pos, n_neg))
    if with_ap:
        table.rows.append(MetricRow(level, "ap", ap(scores, labels), n_pos, n_neg))


@dataclass(frozen=True)
class AblationSpec:
    """One arm of the fusion / pretraining / bank configuration matrix."""

    fusion: str  # none | unmasked | epipolar
    pretraining: str = "multi-center+reg"
    bank: str = "per-view"

    def __post_init__(self):
        if self.fusion not in VALID_FUSION:
            raise SchemaError(f"bad fusion {self.fusion!r}")
        if self.pretraining not in VALID_PRETRAIN:
            raise SchemaError(f"bad pretraining {self.pretraining!r}")
        if self.bank not in VALID_BANK:
            raise SchemaError(f"bad bank {self.bank!r}")

    @property
    def name(self) -> str:
        if self.fusion == "none":
            return f"none//{self.bank}"
        return f"{self.fusion}/{self.pretraining}/{self.bank}"


def default_ablation_specs() -> list:
    """The six-arm matrix: baseline, untrained fusion, then pretraining and
    bank variants of epipolar fusion."""
    return [
        AblationSpec(fusion="none", bank="shared"),
        AblationSpec(fusion="epipolar", pretraining="random-init", bank="shared"),
        AblationSpec(fusion="epipolar", pretraining="single-center", bank="shared"),
        AblationSpec(fusion="epipolar", pretraining="multi-center", bank="shared"),
        AblationSpec(fusion="epipolar", pretraining="multi-center+reg", bank="shared"),
        AblationSpec(fusion="epipolar", pretraining="multi-center+reg", bank="per-view"),
    ]


@dataclass
class AblationResult:
    rows: list = field(default_factory=list)  # dicts: spec fields, seed, metrics

    def median_image_auroc(self, spec: AblationSpec) -> float:
        vals = [r["image_auroc"] for r in self.rows if r["spec"] == spec.name]
        if not vals:
            raise KeyError(f"no runs recorded for {spec.name}")
        return float(np.median(vals))

    def to_csv(self) -> str:
        lines = ["fusion,pretraining,bank,seed,image_auroc,sample_auroc"]
        for r in self.rows:
            lines.append(
                f"{r['fusion']},{r['pretraining']},{r['bank']},{r['seed']},"
                f"{r['image_auroc']:.6f},{r['sample_auroc']:.6f}")
        return "\n".join(lines) + "\n"


def run_ablation(manifest, rig, specs: list, seeds: list, run_config=None) -> AblationResult:
    """Execute the full pipeline for every (spec, seed) and collect
    image/sample AUROC. run_config carries the shared pipeline settings
    (train epochs, coreset ratio, delta); per-run seeds override its seed.
    """
    from .pipeline import RunConfig, run_pipeline

    base = run_config or RunConfig()
    result = AblationResult()
    for spec in specs:
        for seed in seeds:
            cfg = base.with_spec(spec, seed)
            out = run_pipeline(manifest, rig, cfg)
            result.rows.append({
                "spec": spec.name,
                "fusion": spec.fusion,
                "pretraining": spec.pretraining,
                "bank": spec.bank,
                "seed": seed,
                "image_auroc": out.metrics.value("image", "auroc"),
                "sample_auroc": out.metrics.value("sample", "auroc"),
            })
    return result
