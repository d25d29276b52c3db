"""Multi-center pretraining of the fusion projection weights.

The positive objective pulls every fused token toward the nearest of K
cluster centers (K-means initialized). To keep the map from contracting all
features onto a few points, synthesized negative tokens (the patches most
altered by erasing one support-view patch, plus the erased patch itself) are
pushed away from per-view center sets through a log-average-distance
penalty. Training uses decoupled-weight-decay Adam and is bit-deterministic
given the seed.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial.distance import cdist

from . import rng
from .attention import ProjectionWeights, backward_batch, forward_batch
from .errors import (
    EmptyTrainSplit,
    NoEligibleSupportToken,
    SchemaError,
    TooFewPoints,
)
from .features import DatasetManifest, load_sample_tensor
from .geometry import EpipolarMaskSet

_LOG_CLAMP = 1e-12
_KMEANS_TOL = 1e-6
_KMEANS_MAX_ITER = 100
_REFRESH_SUBSAMPLE = 4096
_COLLAPSE_SAMPLE = 1024


@dataclass
class ClusterCenters:
    """K x D prototype matrix; per_view marks membership of a per-view set."""

    centers: np.ndarray
    per_view: bool = False

    def __post_init__(self):
        c = np.asarray(self.centers, dtype=np.float64)
        if c.ndim != 2:
            raise SchemaError("centers must be a K x D matrix")
        self.centers = c

    @property
    def k(self) -> int:
        return self.centers.shape[0]


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    epochs: int = 50
    lam: float = 0.1
    n_k: int = 1
    k_centers: int = 20
    delta_patches: float = 1.0
    batch_samples: int = 8
    seed: int = 0
    center_refresh: str = "per-epoch"  # per-epoch | fixed
    masked_fill: str = "zeros"  # zeros | mean
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0 or self.epochs <= 0 or self.batch_samples <= 0:
            raise SchemaError("learning_rate, epochs, batch_samples must be positive")
        if self.lam < 0 or self.weight_decay < 0:
            raise SchemaError("lambda and weight_decay must be >= 0")
        if self.k_centers < 1 or self.n_k < 1:
            raise SchemaError("k_centers and n_k must be >= 1")
        if self.center_refresh not in ("per-epoch", "fixed"):
            raise SchemaError(f"bad center_refresh {self.center_refresh!r}")
        if self.masked_fill not in ("zeros", "mean"):
            raise SchemaError(f"bad masked_fill {self.masked_fill!r}")


@dataclass
class NegativeSet:
    """Synthesized pseudo-anomalous tokens for one sample.

    entries are (view, token, fused feature from the masked pass); the
    erased support-view token appears exactly once.
    """

    entries: list
    support_view: int
    support_token: int


def kmeans_init(features: np.ndarray, k: int, seed: int) -> ClusterCenters:
    """Deterministic K-means (k-means++ seeding, Lloyd to convergence).

    Stops when the largest center shift drops below 1e-6 or after 100
    iterations. Clusters that lose all points keep their previous center.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise SchemaError("features must be N x D")
    n = x.shape[0]
    if n < k:
        raise TooFewPoints(f"{n} points cannot seed {k} centers")

    gen = rng.stream(seed, "kmeans")
    centers = _kmeans_pp_seed(x, k, gen)
    for _ in range(_KMEANS_MAX_ITER):
        assign = _nearest_index(x, centers)
        new_centers = centers.copy()
        for j in range(k):
            members = assign == j
            if members.any():
                new_centers[j] = x[members].mean(axis=0)
        shift = np.abs(new_centers - centers).max()
        centers = new_centers
        if shift < _KMEANS_TOL:
            break
    return ClusterCenters(centers=centers)


def _kmeans_pp_seed(x: np.ndarray, k: int, gen: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    if np.unique(x, axis=0).shape[0] < k:
        raise TooFewPoints(f"fewer than {k} distinct points")
    centers = np.empty((k, x.shape[1]))
    idx = int(gen.integers(n))
    centers[0] = x[idx]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            raise TooFewPoints("cannot seed: remaining points coincide")
        probs = d2 / total
        idx = int(gen.choice(n, p=probs))
        centers[j] = x[idx]
        d2 = np.minimum(d2, ((x - centers[j]) ** 2).sum(axis=1))
    return centers


def _nearest_index(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d = cdist(x, centers)
    return d.argmin(axis=1)


def assign_nearest(z: np.ndarray, centers: ClusterCenters) -> int:
    """Index of the closest center; ties resolve to the lowest index."""
    z = np.asarray(z, dtype=np.float64).reshape(1, -1)
    return int(cdist(z, centers.centers).argmin())


def positive_loss(fused, centers: ClusterCenters) -> float:
    """Mean distance of every token to its nearest center."""
    loss, _ = positive_loss_grad(fused, centers)
    return loss


def positive_loss_grad(fused, centers: ClusterCenters):
    """(loss, d loss / d token) with the nearest-center assignment frozen."""
    data = fused.data if hasattr(fused, "data") else np.asarray(fused)
    x = np.asarray(data, dtype=np.float64).reshape(-1, data.shape[-1])
    d = cdist(x, centers.centers)
    nearest = d.argmin(axis=1)
    dist = d[np.arange(len(x)), nearest]
    n = len(x)
    loss = float(dist.sum() / n)
    diff = x - centers.centers[nearest]
    safe = np.where(dist > 0, dist, 1.0)
    grad = diff / safe[:, None] / n
    grad[dist == 0] = 0.0
    return loss, grad.reshape(data.shape)


def select_negative_tokens(fused_orig: np.ndarray, fused_masked: np.ndarray,
                           masks: EpipolarMaskSet, support_view: int,
                           support_token: int, n_k: int) -> list:
    """(view, token) picks: per reference view, the n_k tokens on the erased
    patch's epipolar column whose fused feature moved the most, plus the
    erased support token itself. Ties break toward lower indices."""
    v_n = fused_orig.shape[0]
    picks = []
    for a in range(v_n):
        if a == support_view:
            continue
        column = masks.mask(a, support_view)[:, support_token]
        cand = np.flatnonzero(column)
        if cand.size == 0:
            continue
        delta = np.linalg.norm(fused_masked[a, cand] - fused_orig[a, cand], axis=1)
        order = np.argsort(-delta, kind="stable")
        for j in cand[order[:n_k]]:
            picks.append((a, int(j)))
    picks.append((support_view, support_token))
    return picks


def eligible_support_tokens(masks: EpipolarMaskSet, support_view: int, n_views: int,
                            token_count: int) -> np.ndarray:
    """Support tokens having at least one epipolar correspondent in any
    other view (nonempty mask column)."""
    any_col = np.zeros(token_count, dtype=bool)
    for a in range(n_views):
        if a == support_view:
            continue
        any_col |= masks.mask(a, support_view).any(axis=0)
    return np.flatnonzero(any_col)


def synthesize_negatives(z, masks: EpipolarMaskSet, w: ProjectionWeights,
                         n_k: int, rng_stream: np.random.Generator,
                         masked_fill: str = "zeros") -> NegativeSet:
    """Erase one support-view token and harvest the most-altered fused tokens.

    Procedure: pick a support view uniformly, pick an eligible support token
    uniformly, erase its input feature, run the fusion forward on both the
    original and erased inputs, then select tokens via
    select_negative_tokens. Deterministic given rng_stream.
    """
    data = np.asarray(z.data if hasattr(z, "data") else z, dtype=np.float64)
    v_n, t_n, _ = data.shape
    b = int(rng_stream.integers(v_n))
    eligible = eligible_support_tokens(masks, b, v_n, t_n)
    if eligible.size == 0:
        raise NoEligibleSupportToken(
            f"view {b} has no token with an epipolar correspondent")
    k = int(eligible[int(rng_stream.integers(eligible.size))])

    masked = data.copy()
    masked[b, k] = _fill_value(data, masked_fill)
    orig_cache = forward_batch(data[None], masks, w)
    masked_cache = forward_batch(masked[None], masks, w)
    picks = select_negative_tokens(orig_cache.fused[0], masked_cache.fused[0],
                                   masks, b, k, n_k)
    entries = [(v, j, masked_cache.fused[0, v, j].copy()) for v, j in picks]
    return NegativeSet(entries=entries, support_view=b, support_token=k)


def _fill_value(data: np.ndarray, masked_fill: str):
    if masked_fill == "mean":
        return data.reshape(-1, data.shape[-1]).mean(axis=0)
    return 0.0


def negative_loss(neg: NegativeSet, per_view_centers: dict) -> float:
    """Negated log of each entry's average distance to its view's centers."""
    loss, _ = negative_loss_grad(neg, per_view_centers)
    return loss


def negative_loss_grad(neg: NegativeSet, per_view_centers: dict):
    """(loss, list of (view, token, d loss / d entry vector))."""
    loss = 0.0
    grads = []
    for view, token, vec in neg.entries:
        centers = per_view_centers[view].centers
        diff = vec[None, :] - centers
        dist = np.linalg.norm(diff, axis=1)
        mean_dist = float(dist.mean())
        clamped = max(mean_dist, _LOG_CLAMP)
        loss -= math.log(clamped)
        if mean_dist <= _LOG_CLAMP:
            grads.append((view, token, np.zeros_like(vec)))
            continue
        safe = np.where(dist > 0, dist, 1.0)
        unit = diff / safe[:, None]
        unit[dist == 0] = 0.0
        grads.append((view, token, -unit.mean(axis=0) / mean_dist))
    return float(loss), grads


def total_loss(pos: float, neg: float, lam: float) -> float:
    """Combined objective: positive pull plus lam-weighted negative push."""
    return float(pos + lam * neg)


@dataclass
class TrainResult:
    weights: ProjectionWeights
    loss_trace: list = field(default_factory=list)      # per epoch: dict
    collapse_trace: list = field(default_factory=list)  # per epoch: float


class AdamW:
    """Decoupled-weight-decay Adam over the four projection matrices."""

    def __init__(self, cfg: TrainConfig, dims: int):
        self.cfg = cfg
        self.m = [np.zeros((dims, dims)) for _ in range(4)]
        self.v = [np.zeros((dims, dims)) for _ in range(4)]
        self.t = 0

    def step(self, weights: ProjectionWeights, grads: ProjectionWeights) -> None:
        cfg = self.cfg
        self.t += 1
        bias1 = 1.0 - cfg.beta1 ** self.t
        bias2 = 1.0 - cfg.beta2 ** self.t
        for i, (w, g) in enumerate(zip(weights.as_tuple(), grads.as_tuple())):
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g
            m_hat = self.m[i] / bias1
            v_hat = self.v[i] / bias2
            w -= cfg.learning_rate * (m_hat / (np.sqrt(v_hat) + cfg.eps) + cfg.weight_decay * w)


def train(manifest: DatasetManifest, rig, cfg: TrainConfig) -> TrainResult:
    """Pretrain the fusion weights on the manifest's train split.

    Per batch: fuse the inputs, synthesize one negative set per sample (one
    erased support token each), combine the positive and negative losses,
    and update the weights with AdamW. Shared centers (positive loss) and
    per-view centers (negative loss) are re-fit by K-means on the current
    fused features at each epoch start, or kept from epoch 0 when
    center_refresh = "fixed".

    Returns the trained weights plus per-epoch loss and collapse traces
    (collapse = mean pairwise distance among up to 1024 fixed fused tokens).
    """
    train_samples = manifest.train_samples()
    if not train_samples:
        raise EmptyTrainSplit("manifest has no train samples")

    z_all = np.stack(
        [load_sample_tensor(manifest, s).data for s in train_samples]
    ).astype(np.float64)
    n_samples, v_n, t_n, d_n = z_all.shape

    masks = EpipolarMaskSet.from_fundamentals(
        manifest.grid, rig.fundamental, cfg.delta_patches, view_order=rig.view_ids)
    weights = ProjectionWeights.random_init(d_n, cfg.seed)
    optimizer = AdamW(cfg, d_n)

    collapse_pick = rng.stream(cfg.seed, "collapse-sample").choice(
        n_samples * v_n * t_n, size=min(_COLLAPSE_SAMPLE, n_samples * v_n * t_n),
        replace=False)

    result = TrainResult(weights=weights)
    shared_centers = None
    view_centers = None
    fused_all = _fuse_dataset(z_all, masks, weights, cfg.batch_samples)
    for epoch in range(cfg.epochs):
        if shared_centers is None or cfg.center_refresh == "per-epoch":
            shared_centers, view_centers = _fit_centers(
                fused_all, cfg, epoch, need_per_view=cfg.lam > 0)

        order = rng.stream(cfg.seed, "shuffle", epoch).permutation(n_samples)
        epoch_pos, epoch_neg, epoch_total, n_steps = 0.0, 0.0, 0.0, 0
        for step, start in enumerate(range(0, n_samples, cfg.batch_samples)):
            batch_idx = order[start:start + cfg.batch_samples]
            z_batch = z_all[batch_idx]
            pos, neg, grads = _batch_loss_and_grads(
                z_batch, masks, weights, shared_centers, view_centers, cfg, epoch, step)
            optimizer.step(weights, grads)
            epoch_pos += pos
            epoch_neg += neg
            epoch_total += total_loss(pos, neg, cfg.lam)
            n_steps += 1

        fused_all = _fuse_dataset(z_all, masks, weights, cfg.batch_samples)
        indicator = _mean_pairwise(fused_all.reshape(-1, d_n)[collapse_pick])
        result.loss_trace.append({
            "epoch": epoch + 1,
            "pos_loss": epoch_pos / n_steps,
            "neg_loss": epoch_neg / n_steps,
            "total": epoch_total / n_steps,
            "collapse_indicator": indicator,
        })
        result.collapse_trace.append(indicator)
    return result


def _batch_loss_and_grads(z_batch, masks, weights, shared_centers, view_centers,
                          cfg: TrainConfig, epoch: int, step: int):
    b_n = z_batch.shape[0]
    cache = forward_batch(z_batch, masks, weights)
    pos, pos_grad = positive_loss_grad(cache.fused, shared_centers)
    if cfg.lam == 0.0:
        # negatives do not influence the objective; skip the masked pass
        return pos, 0.0, backward_batch(cache, pos_grad)

    masked_batch = z_batch.copy()
    supports = []
    for i in range(b_n):
        gen = rng.stream(cfg.seed, "negatives", epoch, step, i)
        b = int(gen.integers(z_batch.shape[1]))
        eligible = eligible_support_tokens(masks, b, z_batch.shape[1], z_batch.shape[2])
        if eligible.size == 0:
            raise NoEligibleSupportToken(f"view {b} has no eligible support token")
        k = int(eligible[int(gen.integers(eligible.size))])
        masked_batch[i, b, k] = _fill_value(z_batch[i], cfg.masked_fill)
        supports.append((b, k))
    masked_cache = forward_batch(masked_batch, masks, weights)

    neg_total = 0.0
    neg_grad = np.zeros_like(masked_cache.fused)
    for i, (b, k) in enumerate(supports):
        picks = select_negative_tokens(cache.fused[i], masked_cache.fused[i],
                                       masks, b, k, cfg.n_k)
        neg = NegativeSet(
            entries=[(v, j, masked_cache.fused[i, v, j]) for v, j in picks],
            support_view=b, support_token=k)
        loss_i, grads_i = negative_loss_grad(neg, view_centers)
        neg_total += loss_i
        for v, j, g in grads_i:
            neg_grad[i, v, j] += g
    neg_mean = neg_total / b_n

    grads = backward_batch(cache, pos_grad)
    if cfg.lam > 0:
        grads.scaled_add(backward_batch(masked_cache, neg_grad), cfg.lam / b_n)
    return pos, neg_mean, grads


def _fuse_dataset(z_all: np.ndarray, masks, weights, batch: int) -> np.ndarray:
    out = np.empty_like(z_all)
    for start in range(0, z_all.shape[0], batch):
        out[start:start + batch] = forward_batch(z_all[start:start + batch], masks, weights).fused
    return out


def _fit_centers(fused_all: np.ndarray, cfg: TrainConfig, epoch: int,
                 need_per_view: bool = True):
    _, v_n, _, d_n = fused_all.shape
    pooled = fused_all.reshape(-1, d_n)
    pooled = _subsample(pooled, _REFRESH_SUBSAMPLE, rng.stream(cfg.seed, "centers", epoch))
    shared = kmeans_init(pooled, cfg.k_centers, cfg.seed)
    per_view = {}
    if need_per_view:
        for v in range(v_n):
            pv = fused_all[:, v].reshape(-1, d_n)
            pv = _subsample(pv, _REFRESH_SUBSAMPLE // 2,
                            rng.stream(cfg.seed, "centers-view", epoch, v))
            per_view[v] = ClusterCenters(
                kmeans_init(pv, cfg.k_centers, cfg.seed).centers, per_view=True)
    return shared, per_view


def _subsample(x: np.ndarray, cap: int, gen: np.random.Generator) -> np.ndarray:
    if x.shape[0] <= cap:
        return x
    return x[np.sort(gen.choice(x.shape[0], size=cap, replace=False))]


def _mean_pairwise(x: np.ndarray) -> float:
    """Mean pairwise euclidean distance; BLAS path, clamped at zero."""
    sq = (x * x).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.maximum(d2, 0.0, out=d2)
    d = np.sqrt(d2)
    n = x.shape[0]
    iu = np.triu_indices(n, k=1)
    return float(d[iu].mean())


def _flatten_tokens(fused) -> np.ndarray:
    data = fused.data if hasattr(fused, "data") else np.asarray(fused)
    return np.asarray(data, dtype=np.float64).reshape(-1, data.shape[-1])


def deepsvdd_config(cfg: TrainConfig) -> TrainConfig:
    """Single-center, no-regularization variant (K=1, lambda=0)."""
    return replace(cfg, k_centers=1, lam=0.0)
