"""Per-view memory banks: greedy k-center coreset selection,
nearest-prototype token scoring, view/sample aggregation, and the optional
epipolar score refinement.

Distances are exact (direct differences, no random projection or
approximate indices), so every selection and score admits a brute-force
oracle.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist

from . import rng
from .errors import EmptyBank, EmptyView, IoError, SchemaError
from .features import FeatureTensor, read_feature_tensor, write_feature_tensor
from .geometry import EpipolarMaskSet

SHARED_KEY = "__shared__"


@dataclass
class ScoreReport:
    """Anomaly scores for one test sample across its V views.

    image_scores[v] is the max token score of view v; score is the max over
    views. metadata records the scoring configuration (delta, alpha, modes).
    """

    sample_id: str
    token_scores: np.ndarray  # (V, T)
    image_scores: np.ndarray  # (V,)
    score: float
    metadata: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "token_scores": np.asarray(self.token_scores).tolist(),
            "image_scores": np.asarray(self.image_scores).tolist(),
            "score": self.score,
            "metadata": dict(self.metadata),
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "ScoreReport":
        try:
            return cls(
                sample_id=str(obj["sample_id"]),
                token_scores=np.asarray(obj["token_scores"], dtype=np.float64),
                image_scores=np.asarray(obj["image_scores"], dtype=np.float64),
                score=float(obj["score"]),
                metadata=dict(obj.get("metadata", {})),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"malformed score report: {exc}") from exc


@dataclass
class MemoryBank:
    """Prototype sets, one per view (or a single pooled set in shared mode).

    Prototypes are exact rows of the source feature matrices; n_v per view is
    max(1, ceil(ratio * source_count)).
    """

    prototypes: dict  # view key -> (n_v, D) float32
    ratio: float
    source_counts: dict = field(default_factory=dict)
    selected_indices: dict = field(default_factory=dict)
    mode: str = "per-view"  # per-view | shared

    def prototypes_for(self, view) -> np.ndarray:
        key = SHARED_KEY if self.mode == "shared" else view
        protos = self.prototypes.get(key)
        if protos is None or len(protos) == 0:
            raise EmptyBank(f"no prototypes for view {view!r}")
        return protos


def coreset_size(ratio: float, source_count: int) -> int:
    return max(1, int(np.ceil(ratio * source_count)))


def greedy_coreset(features: np.ndarray, n_select: int, start: int) -> np.ndarray:
    """Greedy farthest-point (k-center) selection: indices into features.

    Starting from ``start``, repeatedly adds the point with the largest
    minimum distance to the selected set; ties resolve to the lowest index.
    """
    x = np.asarray(features, dtype=np.float64)
    n = x.shape[0]
    n_select = min(n_select, n)
    selected = np.empty(n_select, dtype=np.int64)
    selected[0] = start
    min_dist = np.sqrt(((x - x[start]) ** 2).sum(axis=1))
    for i in range(1, n_select):
        nxt = int(np.argmax(min_dist))
        selected[i] = nxt
        d = np.sqrt(((x - x[nxt]) ** 2).sum(axis=1))
        np.minimum(min_dist, d, out=min_dist)
    return selected


def build_bank(features_per_view: dict, ratio: float, seed: int,
               mode: str = "per-view") -> MemoryBank:
    """Select per-view coresets from normal training features.

    features_per_view maps view index -> (N_v, D) array. In shared mode the
    views are pooled into a single prototype set used for every view.
    """
    if not 0.0 < ratio <= 1.0:
        raise SchemaError(f"coreset ratio must be in (0, 1], got {ratio}")
    if mode not in ("per-view", "shared"):
        raise SchemaError(f"bad bank mode {mode!r}")
    for view, feats in features_per_view.items():
        if np.asarray(feats).shape[0] == 0:
            raise EmptyView(f"view {view!r} has no source tokens")

    if mode == "shared":
        views = sorted(features_per_view)
        pooled = np.concatenate([np.asarray(features_per_view[v]) for v in views], axis=0)
        sources = {SHARED_KEY: pooled}
    else:
        sources = dict(features_per_view)

    prototypes, counts, indices = {}, {}, {}
    for view, feats in sources.items():
        feats = np.asarray(feats)
        n = feats.shape[0]
        n_sel = coreset_size(ratio, n)
        start = int(rng.stream(seed, "coreset", str(view)).integers(n))
        sel = greedy_coreset(feats, n_sel, start)
        prototypes[view] = feats[sel].astype(np.float32)
        counts[view] = n
        indices[view] = sel
    return MemoryBank(prototypes=prototypes, ratio=ratio, source_counts=counts,
                      selected_indices=indices, mode=mode)


def score_view(z_v: np.ndarray, bank: MemoryBank, view) -> tuple:
    """(token_scores, image_score) for one view's (T, D) fused test features.

    Token score = distance to the nearest prototype; image score = max token.
    """
    protos = bank.prototypes_for(view)
    z = np.asarray(z_v, dtype=np.float64)
    d = cdist(z, np.asarray(protos, dtype=np.float64))
    token_scores = d.min(axis=1)
    return token_scores, float(token_scores.max())


def sample_score(image_scores) -> float:
    """Sample-level score: maximum over the per-view image scores."""
    return float(np.max(np.asarray(image_scores, dtype=np.float64)))


def refine_scores_epipolar(token_scores: dict, masks: EpipolarMaskSet,
                           alpha: float) -> dict:
    """Blend each token's score with the mean score of its epipolar
    neighbors pooled over all support views.

    refined_A[j] = alpha * s_A[j] + (1 - alpha) * mean{s_B[k] : M_AB[j,k]=1};
    tokens with no masked neighbor keep their own score. Optional inference
    mode, off by default.
    """
    if not 0.0 <= alpha <= 1.0:
        raise SchemaError("alpha must be in [0, 1]")
    views = sorted(token_scores)
    refined = {}
    for a in views:
        s_a = np.asarray(token_scores[a], dtype=np.float64)
        acc = np.zeros_like(s_a)
        cnt = np.zeros_like(s_a)
        for b in views:
            if b == a:
                continue
            m = masks.mask(a, b).astype(np.float64)
            acc += m @ np.asarray(token_scores[b], dtype=np.float64)
            cnt += m.sum(axis=1)
        neighbor_mean = np.divide(acc, cnt, out=s_a.copy(), where=cnt > 0)
        refined[a] = alpha * s_a + (1.0 - alpha) * neighbor_mean
    return refined


def score_sample(sample_id: str, fused: np.ndarray, bank: MemoryBank,
                 masks: EpipolarMaskSet = None, alpha: float = 0.5,
                 refine: bool = False, metadata: dict = None) -> ScoreReport:
    """Score one test sample: per-token distances, per-view maxima, sample max.

    With refine=True the token scores are blended along epipolar neighbors
    (refine_scores_epipolar) before aggregation.
    """
    data = fused.data if isinstance(fused, FeatureTensor) else np.asarray(fused)
    v_n, t_n, _ = data.shape
    per_view = {}
    for v in range(v_n):
        per_view[v], _ = score_view(data[v], bank, v)
    if refine:
        if masks is None:
            raise SchemaError("refinement requires epipolar masks")
        per_view = refine_scores_epipolar(per_view, masks, alpha)
    token_scores = np.stack([per_view[v] for v in range(v_n)])
    image_scores = token_scores.max(axis=1)
    meta = {"refine": bool(refine), "alpha": float(alpha) if refine else None}
    meta.update(metadata or {})
    return ScoreReport(sample_id=sample_id, token_scores=token_scores,
                       image_scores=image_scores, score=sample_score(image_scores),
                       metadata=meta)


def bank_stats(bank: MemoryBank) -> dict:
    """Prototype counts and source fractions per view (reporting only)."""
    stats = {}
    for view in sorted(bank.prototypes, key=str):
        count = len(bank.prototypes[view])
        source = bank.source_counts.get(view, 0)
        stats[str(view)] = {
            "prototypes": count,
            "source_tokens": source,
            "fraction": (count / source) if source else 0.0,
        }
    return stats


def save_bank(bank: MemoryBank, out_dir) -> None:
    """One MVFT tensor per view plus a JSON index."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    index = {"ratio": bank.ratio, "mode": bank.mode, "views": {}}
    for view in sorted(bank.prototypes, key=str):
        protos = bank.prototypes[view]
        fname = f"bank_{_safe_name(view)}.mvft"
        write_feature_tensor(FeatureTensor(protos[None, :, :]), out / fname)
        index["views"][str(view)] = {
            "file": fname,
            "prototypes": len(protos),
            "source_tokens": int(bank.source_counts.get(view, 0)),
        }
    try:
        with open(out / "bank_index.json", "w", encoding="utf-8") as fh:
            json.dump(index, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise IoError(f"cannot write bank index: {exc}") from exc


def load_bank(bank_dir) -> MemoryBank:
    path = Path(bank_dir) / "bank_index.json"
    try:
        with open(path, "r", encoding="utf-8") as fh:
            index = json.load(fh)
    except OSError as exc:
        raise IoError(f"cannot read bank index: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON at line {exc.lineno}") from exc
    try:
        prototypes, counts = {}, {}
        for view, entry in index["views"].items():
            key = view if view == SHARED_KEY else _parse_view_key(view)
            tensor = read_feature_tensor(Path(bank_dir) / entry["file"])
            prototypes[key] = tensor.data[0]
            counts[key] = int(entry["source_tokens"])
        return MemoryBank(prototypes=prototypes, ratio=float(index["ratio"]),
                          source_counts=counts, mode=str(index["mode"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"malformed bank index: {exc}") from exc


def _parse_view_key(view: str):
    return int(view) if view.lstrip("-").isdigit() else view


def _safe_name(view) -> str:
    return "".join(ch if ch.isalnum() else "_" for ch in str(view))
