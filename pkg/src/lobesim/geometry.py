"""Numeric geometry primitives shared by the planning modules.

Points are numpy arrays of shape (N, 3) in millimeters; single vectors are
shape (3,). Everything here is a pure function over immutable inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

_ORTHO_TOL = 1e-9


class DegenerateInputError(ValueError):
    """Input does not carry enough geometric structure for the operation."""


def as_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1 and pts.size == 3:
        pts = pts.reshape(1, 3)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected (N, 3) points, got shape {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ValueError("points contain non-finite values")
    return pts


def unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    n = float(np.linalg.norm(v))
    if n == 0.0:
        raise ValueError("cannot normalize a zero vector")
    return v / n


def angle_between_deg(a, b) -> float:
    """Unsigned angle between two vectors, in degrees."""
    c = float(np.dot(unit(a), unit(b)))
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


@dataclass(frozen=True)
class RigidTransform:
    """Proper rigid motion p -> rotation @ p + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        tr = np.asarray(self.translation, dtype=float).reshape(3)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", tr)
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-8):
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(rot) - 1.0) > 1e-8:
            raise ValueError("rotation is not proper (det != +1)")

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        out = pts @ self.rotation.T + self.translation
        return out[0] if np.asarray(points).ndim == 1 else out

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self after other: (self ∘ other)(p) = self(other(p))."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "RigidTransform":
        rot_t = self.rotation.T
        return RigidTransform(rot_t, -rot_t @ self.translation)

    def with_translation_offset(self, delta) -> "RigidTransform":
        return RigidTransform(self.rotation, self.translation + np.asarray(delta, dtype=float))


@dataclass(frozen=True)
class PrincipalAxes:
    """PCA result: axes are rows, ordered by descending variance (mm^2)."""

    mean: np.ndarray
    axes: np.ndarray
    variances: np.ndarray


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=float).reshape(3))
        object.__setattr__(self, "direction", np.asarray(self.direction, dtype=float).reshape(3))
        if abs(np.linalg.norm(self.direction) - 1.0) > _ORTHO_TOL:
            raise ValueError("ray direction must be unit length")

    def point_at(self, s: float) -> np.ndarray:
        return self.origin + s * self.direction


class NeighborIndex:
    """Read-only spatial index over a fixed point set (kd-tree backed).

    Queries return exactly what a brute-force scan would; the tree only
    accelerates them. Safe to share across threads once built.
    """

    def __init__(self, points):
        self._points = as_points(points)
        self._tree = cKDTree(self._points) if len(self._points) else None

    def __len__(self) -> int:
        return len(self._points)

    @property
    def points(self) -> np.ndarray:
        return self._points

    def nearest(self, queries, max_distance: float | None = None):
        """Nearest indexed point per query: (distances, indices).

        Misses (beyond max_distance, or empty index) come back as inf
        distance with index == len(self).
        """
        queries = np.atleast_2d(np.asarray(queries, dtype=float))
        if self._tree is None:
            return (np.full(len(queries), np.inf), np.full(len(queries), 0, dtype=int))
        bound = np.inf if max_distance is None else float(max_distance)
        dists, idx = self._tree.query(queries, k=1, distance_upper_bound=bound)
        return dists, idx

    def within_radius(self, center, radius: float) -> np.ndarray:
        if self._tree is None:
            return np.empty(0, dtype=int)
        found = self._tree.query_ball_point(np.asarray(center, dtype=float), float(radius))
        return np.asarray(sorted(found), dtype=int)


@dataclass(frozen=True)
class ClusterResult:
    assignments: np.ndarray
    centroids: np.ndarray
    inertia: float
    history: list = field(default_factory=list, repr=False)


def pca(points) -> PrincipalAxes:
    """Principal axes of a point set.

    Axes are eigenvectors of the covariance of mean-centered points, ordered
    by descending variance. The first two axes are flipped so their
    largest-magnitude component is positive; the third completes a
    right-handed triad.
    """
    pts = as_points(points)
    if len(pts) < 2:
        raise DegenerateInputError(f"pca needs at least 2 points, got {len(pts)}")
    mean = pts.mean(axis=0)
    centered = pts - mean
    cov = centered.T @ centered / len(pts)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    variances = np.clip(evals[order], 0.0, None)
    axes = evecs[:, order].T.copy()
    for i in range(2):
        j = int(np.argmax(np.abs(axes[i])))
        if axes[i, j] < 0:
            axes[i] = -axes[i]
    axes[2] = np.cross(axes[0], axes[1])
    return PrincipalAxes(mean=mean, axes=axes, variances=variances)


def kabsch_align(source, target) -> tuple[RigidTransform, float]:
    """Least-squares rigid transform mapping source onto target.

    Minimizes sum ||R s_i + t - t_i||^2 over proper rigid (R, t); returns
    the transform and the residual RMS in mm.
    """
    src = as_points(source)
    tgt = as_points(target)
    if src.shape != tgt.shape:
        raise DegenerateInputError(
            f"paired lists must match: {src.shape[0]} source vs {tgt.shape[0]} target"
        )
    if len(src) < 3:
        raise DegenerateInputError(f"kabsch_align needs at least 3 pairs, got {len(src)}")
    src_mean = src.mean(axis=0)
    tgt_mean = tgt.mean(axis=0)
    src_c = src - src_mean
    sv = np.linalg.svd(src_c, compute_uv=False)
    if sv[1] <= 1e-9 * max(sv[0], 1.0):
        raise DegenerateInputError("source points are collinear; rotation is ambiguous")
    h = src_c.T @ (tgt - tgt_mean)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    tr = tgt_mean - rot @ src_mean
    transform = RigidTransform(rot, tr)
    residual = transform.apply(src) - tgt
    rms = float(np.sqrt(np.mean(np.sum(residual**2, axis=1))))
    return transform, rms


def ray_collides(
    ray: Ray, index: NeighborIndex, clearance: float, max_range: float
) -> float | None:
    """First marched distance at which the ray passes within `clearance` of
    an indexed point, or None.

    The ray is marched at step = clearance / 2, so a reported hit distance
    may exceed the true closest-approach distance by at most one step.
    """
    if clearance <= 0.0:
        raise ValueError("clearance must be > 0")
    if max_range <= 0.0:
        raise ValueError("max_range must be > 0")
    if len(index) == 0:
        return None
    step = clearance / 2.0
    steps = np.arange(0.0, max_range + step / 2.0, step)
    steps = steps[steps <= max_range]
    samples = ray.origin[None, :] + steps[:, None] * ray.direction[None, :]
    dists, _ = index.nearest(samples, max_distance=clearance * (1.0 + 1e-12))
    hits = np.flatnonzero(np.isfinite(dists) & (dists <= clearance))
    if hits.size == 0:
        return None
    return float(steps[hits[0]])


def _farthest_point_init(pts: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    chosen = [int(rng.integers(len(pts)))]
    d2 = np.sum((pts - pts[chosen[0]]) ** 2, axis=1)
    for _ in range(1, k):
        nxt = int(np.argmax(d2))
        chosen.append(nxt)
        d2 = np.minimum(d2, np.sum((pts - pts[nxt]) ** 2, axis=1))
    return pts[chosen].copy()


def kmeans(points, k: int, seed: int) -> ClusterResult:
    """Lloyd k-means with farthest-point initialization.

    Deterministic for a given seed; iterates until centroid motion drops
    below 1e-6 mm or 100 iterations. Inertia never increases across
    iterations.
    """
    pts = as_points(points)
    if k < 1:
        raise DegenerateInputError("k must be >= 1")
    if k > len(pts):
        raise DegenerateInputError(f"k={k} exceeds point count {len(pts)}")
    rng = np.random.default_rng(seed)
    centroids = _farthest_point_init(pts, k, rng)
    history: list[float] = []
    for _ in range(100):
        d2 = np.sum((pts[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
        assign = np.argmin(d2, axis=1)
        history.append(float(d2[np.arange(len(pts)), assign].sum()))
        new_centroids = centroids.copy()
        for c in range(k):
            members = pts[assign == c]
            if len(members):
                new_centroids[c] = members.mean(axis=0)
            else:
                # Re-seat an empty cluster on the point farthest from its centroid.
                far = int(np.argmax(d2[np.arange(len(pts)), assign]))
                new_centroids[c] = pts[far]
        motion = float(np.max(np.linalg.norm(new_centroids - centroids, axis=1)))
        centroids = new_centroids
        if motion < 1e-6:
            break
    d2 = np.sum((pts[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
    assign = np.argmin(d2, axis=1)
    inertia = float(d2[np.arange(len(pts)), assign].sum())
    return ClusterResult(assignments=assign, centroids=centroids, inertia=inertia, history=history)
