"""Epipolar geometry primitives.

Fundamental-matrix estimation (normalized eight-point), epipolar lines,
patch-grid center coordinates, and the binary cross-view attention masks
derived from them.

Conventions: pixel points are homogeneous [u, v, 1] with u the column
coordinate and v the row coordinate. A pair of corresponding points
satisfies ``p_a^T F_ab p_b = 0``; the line of candidate matches for p_a
in view b is ``l_b = F_ab^T p_a``.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateConfiguration,
    DegenerateLine,
    IndexOutOfRange,
    MissingMaskPair,
    SchemaError,
    TooFewCorrespondences,
)

_EPIPOLE_EPS = 1e-15
_RANK2_EPS = 1e-12
_COND_LIMIT = 1e12


@dataclass(frozen=True)
class PixelPoint:
    """Homogeneous pixel point [u, v, w] with w = 1 for finite points."""

    u: float
    v: float
    w: float = 1.0

    def as_array(self) -> np.ndarray:
        return np.array([self.u, self.v, self.w], dtype=np.float64)


@dataclass(frozen=True)
class EpipolarLine:
    """Line a*u + b*v + c = 0 in pixel coordinates."""

    a: float
    b: float
    c: float

    @property
    def degenerate(self) -> bool:
        return abs(self.a) < _EPIPOLE_EPS and abs(self.b) < _EPIPOLE_EPS


@dataclass(frozen=True)
class PatchGrid:
    """Regular patch grid over an image: patch_size must divide both sides."""

    image_width: int
    image_height: int
    patch_size: int

    def __post_init__(self):
        if self.patch_size <= 0 or self.image_width <= 0 or self.image_height <= 0:
            raise SchemaError("grid dimensions must be positive")
        if self.image_width % self.patch_size or self.image_height % self.patch_size:
            raise SchemaError(
                f"patch_size {self.patch_size} must divide image "
                f"{self.image_width}x{self.image_height} exactly"
            )

    @property
    def grid_w(self) -> int:
        return self.image_width // self.patch_size

    @property
    def grid_h(self) -> int:
        return self.image_height // self.patch_size

    @property
    def token_count(self) -> int:
        return self.grid_w * self.grid_h


@dataclass(frozen=True)
class FundamentalMatrix:
    """3x3 rank-2 matrix with unit Frobenius norm and canonical sign."""

    m: np.ndarray
    src_view: str = "a"
    dst_view: str = "b"

    def __post_init__(self):
        m = np.asarray(self.m, dtype=np.float64)
        if m.shape != (3, 3):
            raise SchemaError(f"fundamental matrix must be 3x3, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise SchemaError("fundamental matrix has non-finite entries")
        object.__setattr__(self, "m", m)

    @classmethod
    def from_matrix(cls, m, src_view: str = "a", dst_view: str = "b") -> "FundamentalMatrix":
        """Canonicalize an arbitrary 3x3 matrix into a valid F.

        Forces rank 2 (smallest singular value zeroed, skipped when the
        matrix is already rank-2 so canonical inputs round-trip exactly),
        scales to unit Frobenius norm, and fixes the sign so the largest
        magnitude entry is positive.
        """
        m = np.asarray(m, dtype=np.float64).reshape(3, 3)
        if not np.all(np.isfinite(m)):
            raise SchemaError("fundamental matrix has non-finite entries")
        norm = np.linalg.norm(m)
        if norm == 0.0:
            raise DegenerateConfiguration("zero fundamental matrix")
        u, s, vt = np.linalg.svd(m)
        if s[1] <= norm * _RANK2_EPS:
            raise DegenerateConfiguration("fundamental matrix has rank < 2")
        if s[2] > norm * _RANK2_EPS:
            m = (u[:, :2] * s[:2]) @ vt[:2]
        m = m / np.linalg.norm(m)
        flat = np.abs(m).ravel()
        if m.ravel()[int(np.argmax(flat))] < 0:
            m = -m
        return cls(m=m, src_view=src_view, dst_view=dst_view)


def patch_center(j: int, grid: PatchGrid) -> PixelPoint:
    """Center pixel of token j; tokens are row-major (j = row*grid_w + col)."""
    if not 0 <= j < grid.token_count:
        raise IndexOutOfRange(f"token {j} outside grid of {grid.token_count} tokens")
    p = float(grid.patch_size)
    u = (j % grid.grid_w + 0.5) * p
    v = (j // grid.grid_w + 0.5) * p
    return PixelPoint(u=u, v=v, w=1.0)


def epipolar_line(p: PixelPoint, f: FundamentalMatrix) -> EpipolarLine:
    """Line of candidate correspondents of p in the destination view: F^T p."""
    m = f.m
    a = m[0, 0] * p.u + m[1, 0] * p.v + m[2, 0] * p.w
    b = m[0, 1] * p.u + m[1, 1] * p.v + m[2, 1] * p.w
    c = m[0, 2] * p.u + m[1, 2] * p.v + m[2, 2] * p.w
    line = EpipolarLine(a=float(a), b=float(b), c=float(c))
    if line.degenerate:
        raise DegenerateLine("point is the epipole; epipolar line undefined")
    return line


def point_line_distance(p: PixelPoint, l: EpipolarLine) -> float:
    """Perpendicular pixel distance |a*u + b*v + c| / sqrt(a^2 + b^2)."""
    if l.degenerate:
        raise DegenerateLine("line direction ~ (0, 0)")
    return abs(l.a * p.u + l.b * p.v + l.c) / math.sqrt(l.a * l.a + l.b * l.b)


def estimate_fundamental_8pt(correspondences) -> FundamentalMatrix:
    """Normalized eight-point estimate of F from point correspondences.

    Each correspondence is a (p_a, p_b) pair (PixelPoint or a 2/3-sequence).
    Points in each view are translated to their centroid and isotropically
    scaled to mean distance sqrt(2) before solving; the rank-2 constraint is
    enforced in normalized coordinates and the result is denormalized,
    unit-norm scaled, and sign-canonicalized.

    Raises:
        TooFewCorrespondences: fewer than 8 pairs.
        DegenerateConfiguration: design matrix condition number > 1e12
            (e.g. all points collinear in one view).
    """
    pts_a, pts_b = _split_pairs(correspondences)
    n = pts_a.shape[0]
    if n < 8:
        raise TooFewCorrespondences(f"need at least 8 correspondences, got {n}")

    t_a, na = _hartley_normalize(pts_a)
    t_b, nb = _hartley_normalize(pts_b)

    # p_a^T F p_b = 0 -> row = kron(p_a, p_b) against F flattened row-major
    design = np.einsum("ni,nj->nij", na, nb).reshape(n, 9)
    _, s, vt = np.linalg.svd(design, full_matrices=True)
    if s[7] <= 0 or s[0] / s[7] > _COND_LIMIT:
        raise DegenerateConfiguration("correspondence configuration is degenerate")
    f_hat = vt[8].reshape(3, 3)

    u, sv, vvt = np.linalg.svd(f_hat)
    sv = sv.copy()
    sv[2] = 0.0
    f_hat = (u * sv) @ vvt

    f = t_a.T @ f_hat @ t_b
    return FundamentalMatrix.from_matrix(f)


def fundamental_from_cameras(k_a, rt_a, k_b, rt_b,
                             src_view: str = "a", dst_view: str = "b") -> FundamentalMatrix:
    """Analytic F from two calibrated pinhole cameras K [R|t] (world-to-cam).

    Returns the matrix satisfying p_a^T F p_b = 0 for projections p_a, p_b
    of any world point visible in both views.
    """
    k_a = np.asarray(k_a, dtype=np.float64)
    k_b = np.asarray(k_b, dtype=np.float64)
    rt_a = np.asarray(rt_a, dtype=np.float64)
    rt_b = np.asarray(rt_b, dtype=np.float64)
    r_a, t_a = rt_a[:, :3], rt_a[:, 3]
    r_b, t_b = rt_b[:, :3], rt_b[:, 3]

    r_rel = r_b @ r_a.T
    t_rel = t_b - r_rel @ t_a
    if np.linalg.norm(t_rel) < 1e-12:
        raise DegenerateConfiguration("coincident camera centers; F undefined")
    essential = _cross_matrix(t_rel) @ r_rel
    # standard orientation satisfies p_b^T F_std p_a = 0; transpose for ours
    f_std = np.linalg.inv(k_b).T @ essential @ np.linalg.inv(k_a)
    return FundamentalMatrix.from_matrix(f_std.T, src_view=src_view, dst_view=dst_view)


def build_epipolar_mask(grid: PatchGrid, f: FundamentalMatrix, delta_patches: float) -> np.ndarray:
    """T x T binary mask: M[j, k] = 1 iff patch k's center in the destination
    view lies within delta_patches * patch_size pixels of the epipolar line of
    patch j's center.

    Rows whose reference center coincides with the epipole carry no geometric
    constraint and are set all-ones.
    """
    if delta_patches < 0:
        raise SchemaError("delta_patches must be >= 0")
    t = grid.token_count
    threshold = delta_patches * grid.patch_size
    centers_u = np.empty(t, dtype=np.float64)
    centers_v = np.empty(t, dtype=np.float64)
    for k in range(t):
        c = patch_center(k, grid)
        centers_u[k] = c.u
        centers_v[k] = c.v

    mask = np.empty((t, t), dtype=np.uint8)
    for j in range(t):
        try:
            line = epipolar_line(PixelPoint(centers_u[j], centers_v[j]), f)
        except DegenerateLine:
            mask[j, :] = 1
            continue
        # mirrors point_line_distance term by term so the vectorized row is
        # bit-identical to the scalar definition
        num = np.abs(line.a * centers_u + line.b * centers_v + line.c)
        den = math.sqrt(line.a * line.a + line.b * line.b)
        mask[j, :] = (num / den <= threshold)
    return mask


@dataclass
class EpipolarMaskSet:
    """Binary attention masks for every ordered pair of distinct views.

    Keys are integer view indices (a, b): a is the reference view whose
    patch centers cast epipolar lines into support view b.
    """

    masks: dict = field(default_factory=dict)
    delta_patches: float = 1.0

    @classmethod
    def from_fundamentals(cls, grid: PatchGrid, fundamentals, delta_patches: float,
                          view_order=None) -> "EpipolarMaskSet":
        """Build masks for all ordered pairs in ``fundamentals``.

        ``fundamentals`` maps (view_id_a, view_id_b) to FundamentalMatrix.
        ``view_order`` lists view ids in tensor order; defaults to the sorted
        ids appearing in the mapping. The resulting mask keys are index pairs.
        """
        if view_order is None:
            ids = sorted({v for pair in fundamentals for v in pair})
        else:
            ids = list(view_order)
        index = {vid: i for i, vid in enumerate(ids)}
        masks = {}
        for (ida, idb), f in fundamentals.items():
            masks[(index[ida], index[idb])] = build_epipolar_mask(grid, f, delta_patches)
        return cls(masks=masks, delta_patches=delta_patches)

    @classmethod
    def all_ones(cls, token_count: int, n_views: int) -> "EpipolarMaskSet":
        """Unconstrained masks (the delta = +inf / standard cross-attention limit)."""
        full = np.ones((token_count, token_count), dtype=np.uint8)
        masks = {(a, b): full for a in range(n_views) for b in range(n_views) if a != b}
        return cls(masks=masks, delta_patches=math.inf)

    def mask(self, a: int, b: int) -> np.ndarray:
        try:
            return self.masks[(a, b)]
        except KeyError:
            raise MissingMaskPair(f"no mask for view pair ({a}, {b})") from None

    @property
    def n_views(self) -> int:
        return 1 + max(max(a, b) for a, b in self.masks) if self.masks else 0


def mask_to_pgm(mask: np.ndarray) -> bytes:
    """Encode a binary mask as a binary (P5) PGM image, 1 -> 255."""
    mask = np.asarray(mask)
    h, w = mask.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    return header + (mask.astype(np.uint8) * 255).tobytes()


def _cross_matrix(t: np.ndarray) -> np.ndarray:
    return np.array([
        [0.0, -t[2], t[1]],
        [t[2], 0.0, -t[0]],
        [-t[1], t[0], 0.0],
    ])


def _split_pairs(correspondences):
    pts_a = []
    pts_b = []
    for pa, pb in correspondences:
        pts_a.append(_as_homogeneous(pa))
        pts_b.append(_as_homogeneous(pb))
    return np.asarray(pts_a, dtype=np.float64), np.asarray(pts_b, dtype=np.float64)


def _as_homogeneous(p) -> np.ndarray:
    if isinstance(p, PixelPoint):
        return np.array([p.u, p.v, p.w], dtype=np.float64)
    arr = np.asarray(p, dtype=np.float64).ravel()
    if arr.size == 2:
        return np.array([arr[0], arr[1], 1.0])
    if arr.size == 3:
        return arr
    raise SchemaError(f"cannot interpret point of size {arr.size}")


def _hartley_normalize(pts: np.ndarray):
    """Isotropic normalization: centroid to origin, mean distance sqrt(2)."""
    xy = pts[:, :2] / pts[:, 2:3]
    centroid = xy.mean(axis=0)
    dist = np.sqrt(((xy - centroid) ** 2).sum(axis=1)).mean()
    if dist < 1e-12:
        raise DegenerateConfiguration("all points coincide")
    scale = math.sqrt(2.0) / dist
    t = np.array([
        [scale, 0.0, -scale * centroid[0]],
        [0.0, scale, -scale * centroid[1]],
        [0.0, 0.0, 1.0],
    ])
    normalized = np.column_stack([xy, np.ones(len(xy))]) @ t.T
    return t, normalized
