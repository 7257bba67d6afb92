"""Independent reference implementations used only to check the library.

These deliberately avoid the code paths they verify: the eigensolver is a
hand-rolled Jacobi sweep, distances are brute-force scans, and volumes come
from closed-form formulas.
"""

from __future__ import annotations

import numpy as np


def jacobi_eigh_3x3(a: np.ndarray, sweeps: int = 50):
    """Eigen-decomposition of a symmetric 3x3 matrix by cyclic Jacobi sweeps.

    Returns (eigenvalues, eigenvectors-as-columns), unsorted.
    """
    a = np.array(a, dtype=float)
    v = np.eye(3)
    for _ in range(sweeps):
        off = np.sqrt(a[0, 1] ** 2 + a[0, 2] ** 2 + a[1, 2] ** 2)
        if off < 1e-15:
            break
        for p in range(2):
            for q in range(p + 1, 3):
                if abs(a[p, q]) < 1e-18:
                    continue
                theta = 0.5 * np.arctan2(2.0 * a[p, q], a[q, q] - a[p, p])
                c, s = np.cos(theta), np.sin(theta)
                rot = np.eye(3)
                rot[p, p] = c
                rot[q, q] = c
                rot[p, q] = s
                rot[q, p] = -s
                a = rot.T @ a @ rot
                v = v @ rot
    return np.diag(a).copy(), v


def point_segment_distance(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distance from each point to segment [a, b], by direct projection."""
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return np.linalg.norm(points - a, axis=1)
    t = np.clip((points - a) @ ab / denom, 0.0, 1.0)
    closest = a[None, :] + t[:, None] * ab[None, :]
    return np.linalg.norm(points - closest, axis=1)


def polyline_distance(points: np.ndarray, polyline: np.ndarray) -> np.ndarray:
    """Distance from each point to a polyline (min over its segments)."""
    best = np.full(len(points), np.inf)
    if len(polyline) == 1:
        return np.linalg.norm(points - polyline[0], axis=1)
    for a, b in zip(polyline[:-1], polyline[1:]):
        best = np.minimum(best, point_segment_distance(points, a, b))
    return best


def best_kmeans_inertia(points: np.ndarray, k: int, restarts: int = 50, seed: int = 0) -> float:
    """Best inertia found over many random-init Lloyd runs."""
    rng = np.random.default_rng(seed)
    best = np.inf
    for _ in range(restarts):
        centroids = points[rng.choice(len(points), size=k, replace=False)].copy()
        for _ in range(200):
            d2 = np.sum((points[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
            assign = np.argmin(d2, axis=1)
            moved = 0.0
            for c in range(k):
                members = points[assign == c]
                if len(members) == 0:
                    members = points[[int(rng.integers(len(points)))]]
                newc = members.mean(axis=0)
                moved = max(moved, float(np.linalg.norm(newc - centroids[c])))
                centroids[c] = newc
            if moved < 1e-9:
                break
        d2 = np.sum((points[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
        inertia = float(d2[np.arange(len(points)), d2.argmin(axis=1)].sum())
        best = min(best, inertia)
    return best


def sphere_volume(radius: float) -> float:
    return 4.0 / 3.0 * np.pi * radius**3


def swept_segment_volume(radius: float, length: float) -> float:
    """Volume of a sphere swept along a straight segment (capsule solid)."""
    return np.pi * radius**2 * length + sphere_volume(radius)


def rotation_about_axis(axis, angle_rad: float) -> np.ndarray:
    """Rodrigues rotation matrix (independent of the library's transforms)."""
    k = np.asarray(axis, dtype=float)
    k = k / np.linalg.norm(k)
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(angle_rad) * kx + (1 - np.cos(angle_rad)) * (kx @ kx)
