"""Masked cross-view attention with residual connection, plus analytic
gradients of the four projection matrices for pretraining.

For reference view a, token j, and support view b, the attention logit
against support token k is (W_Q z_aj) . (W_K z_bk) / sqrt(D). Logits whose
mask entry is 0 are excluded from the softmax; the outputs of all support
views are summed, projected by W_O, and added back onto z_aj. A token whose
mask rows are empty in every support view passes through unchanged.

All math runs in float64. The forward/backward pair operates on a batch
axis internally; the public entry points take a single sample.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import rng
from .errors import SchemaError, ShapeMismatch, StaleCache
from .features import FeatureTensor, read_feature_tensor, write_feature_tensor
from .geometry import EpipolarMaskSet

_MASKED_LOGIT = -1e30  # effectively -inf but keeps row maxima finite


@dataclass
class ProjectionWeights:
    """The four trainable D x D matrices of the fusion module."""

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray

    def __post_init__(self):
        mats = [np.asarray(m, dtype=np.float64) for m in (self.w_q, self.w_k, self.w_v, self.w_o)]
        d = mats[0].shape[0]
        for m in mats:
            if m.shape != (d, d):
                raise ShapeMismatch(f"projection matrices must share shape ({d},{d})")
            if not np.all(np.isfinite(m)):
                raise ShapeMismatch("projection weights contain non-finite values")
        self.w_q, self.w_k, self.w_v, self.w_o = mats

    @property
    def dims(self) -> int:
        return self.w_q.shape[0]

    @classmethod
    def random_init(cls, dims: int, seed: int) -> "ProjectionWeights":
        """Gaussian init with std 2/sqrt(D), keyed by seed.

        Deliberately sharp: untrained attention at this scale visibly mixes
        unrelated patches, which is the behavior pretraining must tame.
        """
        gen = rng.stream(seed, "projection-init")
        scale = 2.0 / np.sqrt(dims)
        return cls(*(gen.standard_normal((dims, dims)) * scale for _ in range(4)))

    @classmethod
    def zeros_like(cls, other: "ProjectionWeights") -> "ProjectionWeights":
        d = other.dims
        return cls(*(np.zeros((d, d)) for _ in range(4)))

    def as_tuple(self):
        return (self.w_q, self.w_k, self.w_v, self.w_o)

    def scaled_add(self, other: "ProjectionWeights", factor: float = 1.0) -> None:
        self.w_q += factor * other.w_q
        self.w_k += factor * other.w_k
        self.w_v += factor * other.w_v
        self.w_o += factor * other.w_o


@dataclass
class AttentionCache:
    """Activations retained by the forward pass for the backward pass.

    ``fused`` is the float64 fused batch (B, V, T, D); ``weights[(a, b)]``
    are the masked softmax rows (B, T, T), each row summing to 1 or all-zero
    when the mask row is empty.
    """

    z: np.ndarray           # (B, V, T, D) inputs
    q: np.ndarray           # (B, V, T, D)
    k: np.ndarray           # (B, V, T, D)
    v: np.ndarray           # (B, V, T, D)
    attn_out: np.ndarray    # (B, V, T, D) pre-W_O aggregated attention output
    fused: np.ndarray       # (B, V, T, D)
    weights: dict           # (a, b) -> (B, T, T)
    masks: EpipolarMaskSet
    proj: ProjectionWeights
    agg_factor: float = 1.0  # 1 for sum aggregation, 1/(V-1) for mean


def forward_batch(z: np.ndarray, masks: EpipolarMaskSet, w: ProjectionWeights,
                  aggregate: str = "sum") -> AttentionCache:
    """Fused cross-view attention over a batch: z is (B, V, T, D) float64.

    ``aggregate`` chooses how support views combine: "sum" (default) or
    "mean" (divides by V - 1).
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 4:
        raise ShapeMismatch(f"expected (B, V, T, D) batch, got {z.shape}")
    if aggregate not in ("sum", "mean"):
        raise ShapeMismatch(f"bad aggregate mode {aggregate!r}")
    b_n, v_n, t_n, d_n = z.shape
    if d_n != w.dims:
        raise ShapeMismatch(f"feature D={d_n} but weights are {w.dims}x{w.dims}")
    for a in range(v_n):
        for b in range(v_n):
            if a != b:
                m = masks.mask(a, b)
                if m.shape != (t_n, t_n):
                    raise ShapeMismatch(f"mask ({a},{b}) is {m.shape}, expected {(t_n, t_n)}")

    flat = z.reshape(-1, d_n)
    q = (flat @ w.w_q.T).reshape(z.shape)
    k = (flat @ w.w_k.T).reshape(z.shape)
    v = (flat @ w.w_v.T).reshape(z.shape)
    scale = 1.0 / np.sqrt(d_n)

    agg_factor = 1.0 if aggregate == "sum" or v_n < 2 else 1.0 / (v_n - 1)
    attn_out = np.zeros_like(z)
    weights = {}
    for a in range(v_n):
        for b in range(v_n):
            if a == b:
                continue
            m = masks.mask(a, b).astype(bool)
            logits = (q[:, a] @ k[:, b].transpose(0, 2, 1)) * scale
            logits = np.where(m[None, :, :], logits, _MASKED_LOGIT)
            logits -= logits.max(axis=2, keepdims=True)
            expw = np.exp(logits)
            expw *= m[None, :, :]
            denom = expw.sum(axis=2, keepdims=True)
            attn = np.divide(expw, denom, out=np.zeros_like(expw), where=denom > 0)
            weights[(a, b)] = attn
            if agg_factor == 1.0:
                attn_out[:, a] += attn @ v[:, b]
            else:
                attn_out[:, a] += agg_factor * (attn @ v[:, b])

    fused = attn_out.reshape(-1, d_n) @ w.w_o.T
    fused = fused.reshape(z.shape) + z
    return AttentionCache(z=z, q=q, k=k, v=v, attn_out=attn_out,
                          fused=fused, weights=weights, masks=masks, proj=w,
                          agg_factor=agg_factor)


def backward_batch(cache: AttentionCache, grad_fused: np.ndarray) -> ProjectionWeights:
    """Gradients of the four projection matrices given d(loss)/d(fused)."""
    g = np.asarray(grad_fused, dtype=np.float64)
    if g.shape != cache.fused.shape:
        raise StaleCache(f"grad shape {g.shape} does not match cache {cache.fused.shape}")
    z, q, k, v = cache.z, cache.q, cache.k, cache.v
    w = cache.proj
    b_n, v_n, t_n, d_n = z.shape
    scale = 1.0 / np.sqrt(d_n)

    g_flat = g.reshape(-1, d_n)
    grad_wo = g_flat.T @ cache.attn_out.reshape(-1, d_n)
    g_out = (g_flat @ w.w_o).reshape(z.shape)  # d(loss)/d(attn_out)

    dq = np.zeros_like(q)
    dk = np.zeros_like(k)
    dv = np.zeros_like(v)
    for (a, b), attn in cache.weights.items():
        g_pair = g_out[:, a] if cache.agg_factor == 1.0 else cache.agg_factor * g_out[:, a]
        d_attn = g_pair @ v[:, b].transpose(0, 2, 1)
        dv[:, b] += attn.transpose(0, 2, 1) @ g_pair
        # softmax rows: dS = A * (dA - sum_k dA*A); empty rows have A = 0
        inner = (d_attn * attn).sum(axis=2, keepdims=True)
        d_scores = attn * (d_attn - inner) * scale
        dq[:, a] += d_scores @ k[:, b]
        dk[:, b] += d_scores.transpose(0, 2, 1) @ q[:, a]

    z_flat = z.reshape(-1, d_n)
    grad_wq = dq.reshape(-1, d_n).T @ z_flat
    grad_wk = dk.reshape(-1, d_n).T @ z_flat
    grad_wv = dv.reshape(-1, d_n).T @ z_flat
    return ProjectionWeights(grad_wq, grad_wk, grad_wv, grad_wo)


def eam_forward(z, masks: EpipolarMaskSet, w: ProjectionWeights):
    """Fuse one sample (V, T, D) through masked cross-view attention.

    Returns (fused FeatureTensor, AttentionCache). The cache holds the
    float64 fused values used during training; the returned tensor is the
    float32 storage form.
    """
    data = z.data if isinstance(z, FeatureTensor) else np.asarray(z)
    if data.ndim != 3:
        raise ShapeMismatch(f"expected (V, T, D) sample, got {data.shape}")
    cache = forward_batch(data[None].astype(np.float64), masks, w)
    return FeatureTensor(cache.fused[0].astype(np.float32)), cache


def eam_backward(cache: AttentionCache, grad_fused) -> ProjectionWeights:
    """Per-sample wrapper over backward_batch; accepts (V, T, D) gradients."""
    g = grad_fused.data if isinstance(grad_fused, FeatureTensor) else np.asarray(grad_fused)
    if g.ndim == 3:
        g = g[None]
    return backward_batch(cache, g)


def save_weights(weights: ProjectionWeights, path) -> None:
    """Serialize the four D x D matrices as one MVFT tensor (V=4), plus a
    JSON sidecar documenting the matrix order."""
    stacked = np.stack([m.astype(np.float32) for m in weights.as_tuple()])
    write_feature_tensor(FeatureTensor(stacked), path)
    sidecar = {
        "format": "mvinspect projection weights",
        "matrix_order": ["w_q", "w_k", "w_v", "w_o"],
        "dims": weights.dims,
    }
    Path(str(path) + ".json").write_text(
        json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def load_weights(path) -> ProjectionWeights:
    tensor = read_feature_tensor(path)
    if tensor.views != 4 or tensor.tokens != tensor.dims:
        raise SchemaError(f"{path}: expected a 4 x D x D weight tensor")
    mats = tensor.data.astype(np.float64)
    return ProjectionWeights(mats[0], mats[1], mats[2], mats[3])


def unmasked_mode(z, w: ProjectionWeights) -> FeatureTensor:
    """Standard dense cross-view attention: every mask entry set to 1.

    Identical to eam_forward under delta = +inf masks; kept as the
    no-geometry ablation arm.
    """
    data = z.data if isinstance(z, FeatureTensor) else np.asarray(z)
    v_n, t_n, _ = data.shape
    masks = EpipolarMaskSet.all_ones(t_n, v_n)
    fused, _ = eam_forward(data, masks, w)
    return fused
