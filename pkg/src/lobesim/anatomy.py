"""Anatomy-derived planning stages: channel axis, troughs, capsule surface.

All operations consume a labeled point cloud in the phantom frame and are
deterministic for a given seed.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.linalg import solve_triangular
from scipy.spatial import ConvexHull, cKDTree

from lobesim.errors import (
    ChannelNotFoundError,
    IllConditionedFitError,
    TroughDetectionError,
    ValidationError,
)
from lobesim.geometry import kmeans, pca, unit
from lobesim.phantom import CloudLabel, LabeledPointCloud, LOBE_CLOUD_LABELS


@dataclass(frozen=True)
class ChannelAxis:
    point: np.ndarray
    direction: np.ndarray
    clearance: float

    def __post_init__(self):
        object.__setattr__(self, "point", np.asarray(self.point, dtype=float).reshape(3))
        object.__setattr__(self, "direction", unit(self.direction))


class TroughLabel(str, Enum):
    TOP_CENTER = "top_center"
    LEFT = "left"
    RIGHT = "right"


@dataclass(frozen=True)
class Trough:
    label: TroughLabel
    line_point: np.ndarray
    line_direction: np.ndarray
    members: np.ndarray
    plane_point: np.ndarray
    plane_normal: np.ndarray


@dataclass(frozen=True)
class TroughSet:
    top_center: Trough
    left: Trough
    right: Trough

    def __iter__(self):
        return iter((self.top_center, self.left, self.right))

    def get(self, label: TroughLabel) -> Trough:
        return {t.label: t for t in self}[label]


@dataclass(frozen=True)
class UVWFrame:
    """Right-handed local frame: U along the channel, V lateral, W pointing
    from the capsule floor toward the axis (so +W offsets move inward)."""

    origin: np.ndarray
    u: np.ndarray
    v: np.ndarray
    w: np.ndarray

    def to_frame(self, points) -> np.ndarray:
        rel = np.atleast_2d(np.asarray(points, dtype=float)) - self.origin
        return rel @ np.stack([self.u, self.v, self.w]).T

    def to_world(self, coords) -> np.ndarray:
        coords = np.atleast_2d(np.asarray(coords, dtype=float))
        return self.origin + coords @ np.stack([self.u, self.v, self.w])


def _polynomial_exponents(degree: int) -> list[tuple[int, int]]:
    return [(i, total - i) for total in range(degree + 1) for i in range(total + 1)]


def _design_matrix(un: np.ndarray, vn: np.ndarray, degree: int) -> np.ndarray:
    cols = [un**i * vn**j for i, j in _polynomial_exponents(degree)]
    return np.stack(cols, axis=1)


@dataclass
class CapsuleFit:
    """Bivariate polynomial floor model W = f(U, V) plus the margin-raised
    evaluation grid cropped to the inter-trough corridor."""

    frame: UVWFrame
    degree: int
    coefficients: np.ndarray
    u_bounds: tuple[float, float]
    v_bounds: tuple[float, float]
    margin: float
    rms: float
    grid: np.ndarray
    left_plane: tuple[np.ndarray, np.ndarray]
    right_plane: tuple[np.ndarray, np.ndarray]
    floor_direction: np.ndarray
    support_points: np.ndarray = None

    def normalize_uv(self, u, v):
        ulo, uhi = self.u_bounds
        vlo, vhi = self.v_bounds
        un = 2.0 * (np.asarray(u, dtype=float) - ulo) / (uhi - ulo) - 1.0
        vn = 2.0 * (np.asarray(v, dtype=float) - vlo) / (vhi - vlo) - 1.0
        return un, vn

    def surface_w(self, u, v) -> np.ndarray:
        """Fitted floor height (no margin) at frame coordinates (u, v)."""
        un, vn = self.normalize_uv(u, v)
        return _design_matrix(np.atleast_1d(un), np.atleast_1d(vn), self.degree) @ self.coefficients

    def margin_w(self, u, v) -> np.ndarray:
        return self.surface_w(u, v) + self.margin

    def in_corridor(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        ok = np.ones(len(pts), dtype=bool)
        for plane_point, plane_normal in (self.left_plane, self.right_plane):
            ok &= (pts - plane_point) @ plane_normal >= 0.0
        ok &= (pts - self.frame.origin) @ self.floor_direction > 0.0
        return ok

    def in_support(self, points, radius: float = 3.0) -> np.ndarray:
        """True where a point is near the capsule data that shaped the fit;
        guards against polynomial extrapolation outside the sampled floor."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if self.support_points is None or len(self.support_points) == 0:
            return np.ones(len(pts), dtype=bool)
        tree = getattr(self, "_support_tree", None)
        if tree is None:
            tree = cKDTree(self.support_points)
            object.__setattr__(self, "_support_tree", tree)
        dist, _ = tree.query(pts, k=1)
        return dist <= radius

    def height_above_margin(self, points) -> np.ndarray:
        """Signed W-distance of world points above the margin-raised surface.

        Positive values are on the tissue side (toward the axis); negative
        values are on the capsule side.
        """
        coords = self.frame.to_frame(points)
        return coords[:, 2] - self.margin_w(coords[:, 0], coords[:, 1])

    def to_dict(self) -> dict:
        return {
            "origin": self.frame.origin.tolist(),
            "u": self.frame.u.tolist(),
            "v": self.frame.v.tolist(),
            "w": self.frame.w.tolist(),
            "degree": self.degree,
            "coefficients": self.coefficients.tolist(),
            "u_bounds": list(self.u_bounds),
            "v_bounds": list(self.v_bounds),
            "margin": self.margin,
            "rms": self.rms,
            "left_plane_point": self.left_plane[0].tolist(),
            "left_plane_normal": self.left_plane[1].tolist(),
            "right_plane_point": self.right_plane[0].tolist(),
            "right_plane_normal": self.right_plane[1].tolist(),
            "floor_direction": self.floor_direction.tolist(),
            "support_points": np.asarray(self.support_points).tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CapsuleFit":
        frame = UVWFrame(
            origin=np.asarray(data["origin"]),
            u=np.asarray(data["u"]),
            v=np.asarray(data["v"]),
            w=np.asarray(data["w"]),
        )
        return cls(
            frame=frame,
            degree=int(data["degree"]),
            coefficients=np.asarray(data["coefficients"]),
            u_bounds=tuple(data["u_bounds"]),
            v_bounds=tuple(data["v_bounds"]),
            margin=float(data["margin"]),
            rms=float(data["rms"]),
            grid=np.empty((0, 3)),
            left_plane=(np.asarray(data["left_plane_point"]), np.asarray(data["left_plane_normal"])),
            right_plane=(np.asarray(data["right_plane_point"]), np.asarray(data["right_plane_normal"])),
            floor_direction=np.asarray(data["floor_direction"]),
            support_points=np.asarray(data.get("support_points", [])),
        )


# -- channel axis -------------------------------------------------------------


def _march_rays(origin: np.ndarray, dirs: np.ndarray, tree: cKDTree, clearance: float,
                max_range: float):
    """First-hit march distance per ray (vectorized); inf where no hit."""
    step = clearance / 2.0
    steps = np.arange(0.0, max_range + step / 2.0, step)
    samples = (origin[None, None, :] + steps[None, :, None] * dirs[:, None, :]).reshape(-1, 3)
    dist, idx = tree.query(samples, k=1, distance_upper_bound=clearance * (1 + 1e-12))
    hit = np.isfinite(dist).reshape(len(dirs), len(steps))
    first = np.argmax(hit, axis=1)
    any_hit = hit.any(axis=1)
    out = np.full(len(dirs), np.inf)
    out[any_hit] = steps[first[any_hit]]
    return out, idx.reshape(len(dirs), len(steps))


def _dominant_direction(vectors: np.ndarray) -> np.ndarray:
    """Axis of maximal second moment (uncentered), sign-aligned to the mean."""
    moment = vectors.T @ vectors
    evals, evecs = np.linalg.eigh(moment)
    axis = evecs[:, np.argmax(evals)]
    mean = vectors.mean(axis=0)
    if mean @ axis < 0 and np.linalg.norm(mean) > 1e-12:
        axis = -axis
    return unit(axis)


def _slab_cross_section_area(capsule_pts: np.ndarray, center: np.ndarray,
                             normal: np.ndarray, half_width: float = 1.0) -> float:
    offsets = (capsule_pts - center) @ normal
    slab = capsule_pts[np.abs(offsets) <= half_width]
    if len(slab) < 3:
        return 0.0
    e1 = unit(np.cross(normal, [0.0, 0.0, 1.0] if abs(normal[2]) < 0.9 else [1.0, 0.0, 0.0]))
    e2 = np.cross(normal, e1)
    planar = np.stack([(slab - center) @ e1, (slab - center) @ e2], axis=1)
    try:
        return float(ConvexHull(planar).volume)
    except Exception:
        return 0.0


def find_channel_axis(
    cloud: LabeledPointCloud,
    ray_count: int = 12_000,
    clearance: float = 2.0,
    seed: int = 0,
) -> ChannelAxis:
    """Estimate the central channel through the lobes.

    Stage 1 keeps rays from the capsule centroid that escape the phantom
    without passing within `clearance` of any surface sample. Stage 2 splits
    the survivors into the two channel orientations, takes the dominant
    second-moment axis over all survivors as the line direction, and picks
    the orientation whose perpendicular capsule cross-section (convex-hull
    area of a 2mm slab at the centroid) is larger. Stage 3 slides the anchor
    on a polar grid perpendicular to the axis to maximize clearance from
    lobe points.
    """
    capsule_pts = cloud.select(CloudLabel.CAPSULE)
    lobe_pts = cloud.select(*LOBE_CLOUD_LABELS)
    if len(capsule_pts) == 0 or len(lobe_pts) == 0:
        raise ValidationError("cloud must contain capsule and lobe labels")

    centroid = capsule_pts.mean(axis=0)
    tree = cKDTree(cloud.points)
    max_range = float(np.linalg.norm(cloud.points - centroid, axis=1).max()) * 1.2
    rng = np.random.default_rng(seed)
    dirs = rng.normal(size=(ray_count, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    hit_dist, _ = _march_rays(centroid, dirs, tree, clearance, max_range)
    kept = dirs[~np.isfinite(hit_dist)]
    if len(kept) < 4:
        raise ChannelNotFoundError(
            f"channel not found: {len(kept)} collision-free rays of {ray_count}"
        )

    clusters = kmeans(kept, 2, seed=seed)
    candidates = []
    for c in range(2):
        members = kept[clusters.assignments == c]
        if len(members) == 0:
            raise ChannelNotFoundError("channel not found: degenerate direction clusters")
        candidates.append(_dominant_direction(members))
    areas = [
        _slab_cross_section_area(capsule_pts, centroid, cand, half_width=1.0)
        for cand in candidates
    ]
    winner = candidates[int(np.argmax(areas))]
    direction = _dominant_direction(kept)
    if direction @ winner < 0:
        direction = -direction

    # Stage 3: polar-grid search for the maximal-clearance anchor.
    e1 = unit(np.cross(direction, [0.0, 0.0, 1.0] if abs(direction[2]) < 0.9 else [0.0, 1.0, 0.0]))
    e2 = np.cross(direction, e1)
    rel = lobe_pts - centroid
    planar = np.stack([rel @ e1, rel @ e2], axis=1)
    planar_tree = cKDTree(planar)

    def clearance_at(offsets_2d: np.ndarray) -> np.ndarray:
        d, _ = planar_tree.query(offsets_2d, k=1)
        return d

    best = np.zeros(2)
    best_clear = float(clearance_at(best[None, :])[0])
    center = best.copy()
    radius_hi = 6.0
    for _ in range(3):
        radii = np.linspace(0.0, radius_hi, 13)
        angles = np.linspace(0.0, 2 * np.pi, 24, endpoint=False)
        grid = [center]
        for r in radii[1:]:
            for a in angles:
                grid.append(center + r * np.array([np.cos(a), np.sin(a)]))
        grid = np.asarray(grid)
        values = clearance_at(grid)
        k = int(np.argmax(values))
        if values[k] > best_clear:
            best_clear = float(values[k])
            best = grid[k]
        center = best.copy()
        radius_hi /= 4.0

    anchor = centroid + best[0] * e1 + best[1] * e2
    return ChannelAxis(point=anchor, direction=direction, clearance=best_clear)


# -- troughs ------------------------------------------------------------------


def _signed_angle_about(axis_dir: np.ndarray, reference: np.ndarray, target: np.ndarray) -> float:
    return float(
        np.arctan2(np.cross(reference, target) @ axis_dir, reference @ target)
    )


def find_troughs(
    cloud: LabeledPointCloud,
    axis: ChannelAxis,
    instrument_y,
    stations: int = 40,
    rays_per_station: int = 180,
    seed: int = 0,
    clearance: float = 1.25,
) -> TroughSet:
    """Detect the three inter-lobe crevice lines.

    Radial rays at stations along the axis record first lobe-surface hits;
    the deepest hit flanking each label-change boundary in a station's
    angular profile is a crevice sample. Samples cluster into three troughs
    (k-means), each fitted with a PCA line. Labels follow the signed angle
    about the axis measured from the instrument Y direction: nearest to
    instrument_y is top_center, negative angles left, positive right.
    """
    instrument_y = np.asarray(instrument_y, dtype=float)
    if np.linalg.norm(np.cross(instrument_y, axis.direction)) < 1e-6:
        raise ValidationError("instrument_y must not be parallel to the channel axis")
    lobe_pts = cloud.select(*LOBE_CLOUD_LABELS)
    if len(lobe_pts) == 0:
        raise ValidationError("cloud has no lobe points")
    lobe_labels = cloud.labels[np.isin(cloud.labels, [int(l) for l in LOBE_CLOUD_LABELS])]
    tree = cKDTree(lobe_pts)

    # Stations span only where the labeled lobes coexist; crevices are
    # undefined past a lobe's axial end.
    along = (lobe_pts - axis.point) @ axis.direction
    lo_each, hi_each = [], []
    for label in LOBE_CLOUD_LABELS:
        mask = lobe_labels == int(label)
        if mask.any():
            q = np.quantile(along[mask], [0.12, 0.88])
            lo_each.append(q[0])
            hi_each.append(q[1])
    lo, hi = max(lo_each), min(hi_each)
    if hi <= lo:
        raise TroughDetectionError("trough detection failed: lobes do not overlap axially")
    station_s = np.linspace(lo, hi, stations)
    radial_extent = float(np.max(np.linalg.norm(
        lobe_pts - axis.point - along[:, None] * axis.direction[None, :], axis=1))) + 2.0

    y_ref = unit(instrument_y - (instrument_y @ axis.direction) * axis.direction)
    e1 = -y_ref  # angle 0 points at the capsule floor side
    e2 = np.cross(axis.direction, e1)
    theta = np.linspace(-np.pi, np.pi, rays_per_station, endpoint=False)
    ray_dirs = np.cos(theta)[:, None] * e1[None, :] + np.sin(theta)[:, None] * e2[None, :]

    step = clearance / 2.0
    radii = np.arange(step, radial_extent, step)
    crevice_points: list[np.ndarray] = []
    crevice_pairs: list[tuple[int, int]] = []
    for s in station_s:
        origin = axis.point + s * axis.direction
        samples = (origin[None, None, :]
                   + radii[None, :, None] * ray_dirs[:, None, :]).reshape(-1, 3)
        dist, idx = tree.query(samples, k=1, distance_upper_bound=clearance * (1 + 1e-12))
        hit = np.isfinite(dist).reshape(len(ray_dirs), len(radii))
        has_hit = hit.any(axis=1)
        first = np.argmax(hit, axis=1)
        hit_r = np.where(has_hit, radii[np.minimum(first, len(radii) - 1)], np.nan)
        flat_idx = idx.reshape(len(ray_dirs), len(radii))
        hit_label = np.full(len(ray_dirs), -1)
        rays_with_hit = np.flatnonzero(has_hit)
        hit_label[rays_with_hit] = lobe_labels[
            np.minimum(flat_idx[rays_with_hit, first[rays_with_hit]], len(lobe_pts) - 1)
        ]
        # Label-change boundaries (cyclic), tolerant of short no-hit gaps.
        n = len(ray_dirs)
        for k in range(n):
            a, b = k, (k + 1) % n
            la = hit_label[a]
            # Skip forward over short gaps.
            gap = 0
            while hit_label[b] < 0 and gap < 5:
                b = (b + 1) % n
                gap += 1
            lb = hit_label[b]
            if la < 0 or lb < 0 or la == lb:
                continue
            window = [(a - w) % n for w in range(0, 3)] + [(b + w) % n for w in range(0, 3)]
            window = [w for w in window if has_hit[w]]
            if not window:
                continue
            deepest = max(window, key=lambda w: hit_r[w])
            prominence = hit_r[deepest] - np.nanmedian(hit_r[has_hit])
            if prominence < 1.0:
                continue
            point = (axis.point + s * axis.direction
                     + hit_r[deepest] * ray_dirs[deepest])
            crevice_points.append(point)
            crevice_pairs.append((int(la), int(lb)))

    if len(crevice_points) < 9:
        raise TroughDetectionError(
            f"trough detection failed: only {len(crevice_points)} crevice samples"
        )
    crevice = np.asarray(crevice_points)
    # Troughs are elongated along the axis; cluster their radial directions
    # about the axis so parallel crevice lines separate cleanly.
    rel = crevice - axis.point
    radial_all = rel - (rel @ axis.direction)[:, None] * axis.direction[None, :]
    radial_all /= np.linalg.norm(radial_all, axis=1, keepdims=True)
    clusters = kmeans(radial_all, 3, seed=seed)
    troughs = []
    for c in range(3):
        members = crevice[clusters.assignments == c]
        if len(members) < 3:
            raise TroughDetectionError("trough detection failed: degenerate cluster")
        axes = pca(members)
        line_dir = axes.axes[0]
        if line_dir @ axis.direction < 0:
            line_dir = -line_dir
        radial = members.mean(axis=0) - axis.point
        radial -= (radial @ axis.direction) * axis.direction
        radial = unit(radial)
        plane_normal = unit(np.cross(axis.direction, radial))
        phi = _signed_angle_about(axis.direction, y_ref, radial)
        troughs.append(
            dict(line_point=axes.mean, line_direction=line_dir, members=members,
                 plane_point=axes.mean, plane_normal=plane_normal, phi=phi)
        )

    by_top = sorted(troughs, key=lambda t: abs(t["phi"]))
    top = by_top[0]
    rest = sorted(by_top[1:], key=lambda t: t["phi"])
    left_t, right_t = rest[0], rest[1]
    if abs(top["phi"]) > np.pi / 2:
        raise TroughDetectionError("trough detection failed: no cluster near instrument_y")

    def build(entry, label):
        return Trough(
            label=label,
            line_point=entry["line_point"],
            line_direction=entry["line_direction"],
            members=entry["members"],
            plane_point=entry["plane_point"],
            plane_normal=entry["plane_normal"],
        )

    return TroughSet(
        top_center=build(top, TroughLabel.TOP_CENTER),
        left=build(left_t, TroughLabel.LEFT),
        right=build(right_t, TroughLabel.RIGHT),
    )


# -- capsule surface fit -------------------------------------------------------


def fit_capsule_surface(
    cloud: LabeledPointCloud,
    axis: ChannelAxis,
    troughs: TroughSet,
    margin: float = 1.0,
    grid_resolution: int = 48,
    degree: int = 5,
) -> CapsuleFit:
    """Fit the capsule floor between the left and right trough planes.

    Corridor capsule points are expressed in the UVW frame, (U, V)
    normalized to [-1, 1], and a full bivariate polynomial is fitted by
    linear least squares (QR). The surface is evaluated on a UV grid,
    raised by `margin` along W (toward the axis), and cropped to the
    corridor.
    """
    if margin < 0:
        raise ValidationError("margin must be >= 0")
    capsule_pts = cloud.select(CloudLabel.CAPSULE)
    if len(capsule_pts) == 0:
        raise ValidationError("cloud has no capsule points")

    left, right = troughs.get(TroughLabel.LEFT), troughs.get(TroughLabel.RIGHT)
    left_normal = left.plane_normal
    if (right.line_point - left.plane_point) @ left_normal < 0:
        left_normal = -left_normal
    right_normal = right.plane_normal
    if (left.line_point - right.plane_point) @ right_normal < 0:
        right_normal = -right_normal

    def radial_of(t: Trough) -> np.ndarray:
        r = t.line_point - axis.point
        r -= (r @ axis.direction) * axis.direction
        return unit(r)

    floor_dir = unit(radial_of(left) + radial_of(right))
    u_dir = axis.direction
    w_dir = -floor_dir
    v_dir = np.cross(w_dir, u_dir)
    frame = UVWFrame(origin=axis.point, u=u_dir, v=v_dir, w=w_dir)

    # Regression data extends a little past the trough planes so the fit is
    # interpolating (not extrapolating) exactly where the trough tracks ride
    # the corridor edges; the evaluated grid is still cropped to the
    # corridor proper.
    fit_pad = 4.0
    in_left = (capsule_pts - left.plane_point) @ left_normal >= -fit_pad
    in_right = (capsule_pts - right.plane_point) @ right_normal >= -fit_pad
    on_floor = (capsule_pts - axis.point) @ floor_dir > 0.0
    # Axially, the corridor spans the lobe tissue between the planes; past
    # the lobe ends the "floor" bends up into the capsule end caps and is
    # not a resection surface.
    lobe_pts = cloud.select(*LOBE_CLOUD_LABELS)
    lobe_in_wedge = (
        ((lobe_pts - left.plane_point) @ left_normal >= 0.0)
        & ((lobe_pts - right.plane_point) @ right_normal >= 0.0)
        & ((lobe_pts - axis.point) @ floor_dir > 0.0)
    )
    if not lobe_in_wedge.any():
        raise ValidationError("no lobe tissue between the trough planes")
    lobe_u = (lobe_pts[lobe_in_wedge] - axis.point) @ axis.direction
    u_span = (float(lobe_u.min()) - 3.0, float(lobe_u.max()) + 3.0)
    capsule_u = (capsule_pts - axis.point) @ axis.direction
    in_span = (capsule_u >= u_span[0]) & (capsule_u <= u_span[1])
    corridor = capsule_pts[in_left & in_right & on_floor & in_span]
    n_coeffs = (degree + 1) * (degree + 2) // 2
    if len(corridor) < n_coeffs:
        raise ValidationError(
            f"only {len(corridor)} capsule points in corridor; need >= {n_coeffs}"
        )

    coords = frame.to_frame(corridor)
    u_bounds = (float(coords[:, 0].min()), float(coords[:, 0].max()))
    v_bounds = (float(coords[:, 1].min()), float(coords[:, 1].max()))
    if u_bounds[1] - u_bounds[0] < 1e-6 or v_bounds[1] - v_bounds[0] < 1e-6:
        raise IllConditionedFitError(float("inf"))
    un = 2.0 * (coords[:, 0] - u_bounds[0]) / (u_bounds[1] - u_bounds[0]) - 1.0
    vn = 2.0 * (coords[:, 1] - v_bounds[0]) / (v_bounds[1] - v_bounds[0]) - 1.0
    design = _design_matrix(un, vn, degree)
    q, r = np.linalg.qr(design)
    try:
        condition = float(np.linalg.cond(r))
    except np.linalg.LinAlgError:
        condition = float("inf")
    if condition > 1e8:
        raise IllConditionedFitError(condition)
    coeffs = solve_triangular(r, q.T @ coords[:, 2])
    rms = float(np.sqrt(np.mean((design @ coeffs - coords[:, 2]) ** 2)))

    support = corridor
    if len(support) > 2500:
        stride = int(np.ceil(len(support) / 2500))
        support = support[::stride]
    fit = CapsuleFit(
        frame=frame,
        degree=degree,
        coefficients=coeffs,
        u_bounds=u_bounds,
        v_bounds=v_bounds,
        margin=margin,
        rms=rms,
        grid=np.empty((0, 3)),
        left_plane=(left.plane_point, left_normal),
        right_plane=(right.plane_point, right_normal),
        floor_direction=floor_dir,
        support_points=support,
    )
    u_lin = np.linspace(u_bounds[0], u_bounds[1], grid_resolution)
    v_lin = np.linspace(v_bounds[0], v_bounds[1], grid_resolution)
    uu, vv = np.meshgrid(u_lin, v_lin, indexing="ij")
    ww = fit.margin_w(uu.ravel(), vv.ravel())
    world = frame.to_world(np.stack([uu.ravel(), vv.ravel(), ww], axis=1))
    fit.grid = world[fit.in_corridor(world) & fit.in_support(world)]
    return fit
