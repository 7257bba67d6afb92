"""Parametric synthetic prostate phantom.

Generates the already-segmented product a resection planner consumes: a
labeled surface point cloud plus a voxel occupancy volume, with exact
implicit geometry retained as ground truth for tests.

Construction: a superellipsoid capsule shell; three ellipsoidal lobes (with
seeded radial bulge perturbations) arranged in angular sectors around a
cylindrical urethral channel. Adjacent lobes are separated by guaranteed
crevice gaps; the channel bore carves every solid it crosses and pierces
the capsule at both ends.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from enum import IntEnum
from pathlib import Path

import numpy as np

from lobesim.geometry import unit

PLY_MAGIC = "ply"
LPVX_MAGIC = b"LPVX"
LPVX_VERSION = 1
LPVX_HEADER_SIZE = 64


class PhantomSpecError(ValueError):
    """Phantom specification violates a containment or sizing invariant."""


class CloudParseError(ValueError):
    """Point-cloud file is malformed; message carries the offending line."""


class CloudLabel(IntEnum):
    CAPSULE = 0
    LEFT_LOBE = 1
    RIGHT_LOBE = 2
    MEDIAN_LOBE = 3


class VoxelLabel(IntEnum):
    EMPTY = 0
    CAPSULE = 1
    LEFT_LOBE = 2
    RIGHT_LOBE = 3
    MEDIAN_LOBE = 4
    REMOVED = 5


LOBE_CLOUD_LABELS = (CloudLabel.LEFT_LOBE, CloudLabel.RIGHT_LOBE, CloudLabel.MEDIAN_LOBE)
LOBE_VOXEL_LABELS = (VoxelLabel.LEFT_LOBE, VoxelLabel.RIGHT_LOBE, VoxelLabel.MEDIAN_LOBE)
CLOUD_TO_VOXEL_LABEL = {
    CloudLabel.CAPSULE: VoxelLabel.CAPSULE,
    CloudLabel.LEFT_LOBE: VoxelLabel.LEFT_LOBE,
    CloudLabel.RIGHT_LOBE: VoxelLabel.RIGHT_LOBE,
    CloudLabel.MEDIAN_LOBE: VoxelLabel.MEDIAN_LOBE,
}


@dataclass(frozen=True)
class LobeSpec:
    """One lobe: an ellipsoid in the channel frame, sector-clipped.

    center_offset is relative to the capsule center (world mm); semi_axes
    are along (channel, lateral, floorward). The sector wedge [theta_lo,
    theta_hi] is measured about the channel axis, 0 deg pointing at the
    capsule floor; gap widths are the full crevice slab widths enforced at
    each sector boundary.
    """

    label: CloudLabel
    center_offset: tuple[float, float, float]
    semi_axes: tuple[float, float, float]
    bulge_amplitude: float
    theta_lo_deg: float
    theta_hi_deg: float
    gap_lo_mm: float
    gap_hi_mm: float


@dataclass(frozen=True)
class PhantomSpec:
    capsule_semi_axes: tuple[float, float, float] = (34.0, 26.0, 24.0)
    capsule_exponent: float = 2.5
    shell_thickness_mm: float = 2.0
    capsule_fill: bool = False
    channel_point: tuple[float, float, float] = (0.0, 0.0, 0.8)
    channel_direction: tuple[float, float, float] = (1.0, 0.015, 0.04)
    channel_radius_mm: float = 4.2
    lobes: tuple[LobeSpec, ...] = ()
    surface_samples: int = 50_000
    voxel_pitch_mm: float = 0.5
    seed: int = 0

    @classmethod
    def default(cls, seed: int = 0) -> "PhantomSpec":
        lobes = (
            LobeSpec(
                label=CloudLabel.MEDIAN_LOBE,
                center_offset=(0.0, 0.0, -13.0),
                semi_axes=(21.0, 13.0, 11.5),
                bulge_amplitude=0.35,
                theta_lo_deg=-55.0,
                theta_hi_deg=55.0,
                gap_lo_mm=1.4,
                gap_hi_mm=1.4,
            ),
            LobeSpec(
                label=CloudLabel.RIGHT_LOBE,
                center_offset=(0.0, -11.0, 14.0),
                semi_axes=(28.0, 10.5, 18.0),
                bulge_amplitude=0.15,
                theta_lo_deg=55.0,
                theta_hi_deg=180.0,
                gap_lo_mm=1.4,
                gap_hi_mm=1.8,
            ),
            LobeSpec(
                label=CloudLabel.LEFT_LOBE,
                center_offset=(0.0, 11.0, 14.0),
                semi_axes=(28.0, 10.5, 18.0),
                bulge_amplitude=0.15,
                theta_lo_deg=-180.0,
                theta_hi_deg=-55.0,
                gap_lo_mm=1.8,
                gap_hi_mm=1.4,
            ),
        )
        return cls(lobes=lobes, seed=seed)

    @classmethod
    def sphere(cls, radius: float = 25.0, pitch: float = 0.5, seed: int = 0) -> "PhantomSpec":
        """Lobe-free solid sphere; calibration fixture for volume oracles."""
        return cls(
            capsule_semi_axes=(radius, radius, radius),
            capsule_exponent=2.0,
            capsule_fill=True,
            channel_radius_mm=0.0,
            lobes=(),
            surface_samples=20_000,
            voxel_pitch_mm=pitch,
            seed=seed,
        )

    def with_channel(self, point, direction) -> "PhantomSpec":
        return replace(self, channel_point=tuple(point), channel_direction=tuple(direction))


@dataclass
class LabeledPointCloud:
    points: np.ndarray
    labels: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        self.labels = np.asarray(self.labels, dtype=np.uint8).reshape(-1)
        if len(self.points) != len(self.labels):
            raise ValueError("points and labels must have the same length")
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=float).reshape(-1, 3)
            if len(self.normals) != len(self.points):
                raise ValueError("normals must match points")

    def __len__(self) -> int:
        return len(self.points)

    def select(self, *labels: CloudLabel) -> np.ndarray:
        mask = np.isin(self.labels, [int(l) for l in labels])
        return self.points[mask]

    def label_counts(self) -> dict[CloudLabel, int]:
        return {l: int(np.sum(self.labels == int(l))) for l in CloudLabel}


@dataclass
class VoxelVolume:
    """Dense label grid; labels indexed [ix, iy, iz], x fastest on disk."""

    origin: np.ndarray
    pitch: float
    labels: np.ndarray

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float).reshape(3)
        self.pitch = float(self.pitch)
        if self.pitch <= 0:
            raise ValueError("pitch must be > 0")
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.labels.ndim != 3:
            raise ValueError("labels must be a 3-d array")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.labels.shape

    def copy(self) -> "VoxelVolume":
        return VoxelVolume(self.origin.copy(), self.pitch, self.labels.copy())

    def centers_along(self, axis: int) -> np.ndarray:
        n = self.labels.shape[axis]
        return self.origin[axis] + (np.arange(n) + 0.5) * self.pitch

    def center_of(self, index) -> np.ndarray:
        return self.origin + (np.asarray(index, dtype=float) + 0.5) * self.pitch

    def world_to_index(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return np.floor((pts - self.origin) / self.pitch).astype(int)

    def count(self, label: VoxelLabel) -> int:
        return int(np.sum(self.labels == int(label)))

    def volume_mm3(self, label: VoxelLabel) -> float:
        return self.count(label) * self.pitch**3

    def same_grid(self, other: "VoxelVolume") -> bool:
        return (
            self.labels.shape == other.labels.shape
            and self.pitch == other.pitch
            and bool(np.allclose(self.origin, other.origin))
        )


@dataclass(frozen=True)
class ChannelTruth:
    point: np.ndarray
    direction: np.ndarray


class PhantomModel:
    """Exact implicit geometry behind a generated phantom.

    Serves as the independent ground-truth oracle: capsule membership and
    radial gaps, per-lobe membership, and first-tissue-hit ray profiles are
    all evaluated on the analytic solids, not on sampled data.
    """

    def __init__(self, spec: PhantomSpec):
        self.spec = spec
        self.capsule_semi = np.asarray(spec.capsule_semi_axes, dtype=float)
        self.exponent = float(spec.capsule_exponent)
        self.channel_point = np.asarray(spec.channel_point, dtype=float)
        self.channel_dir = unit(spec.channel_direction)
        # Channel frame: axis, lateral, floorward (right-handed).
        down = np.array([0.0, 0.0, -1.0])
        down = down - (down @ self.channel_dir) * self.channel_dir
        self.e_down = unit(down)
        self.e_lat = np.cross(self.e_down, self.channel_dir)
        rng = np.random.default_rng(spec.seed)
        # Per-lobe bulge fields: seeded low-order direction-dependent radius
        # perturbations (quadrupole coefficients).
        self._bulge_coeffs = [rng.normal(size=5) for _ in spec.lobes]
        self._validate()

    # -- capsule -----------------------------------------------------------

    def capsule_value(self, points) -> np.ndarray:
        """Homogeneous superellipsoid field: 1.0 on the inner capsule wall."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        scaled = np.abs(pts / self.capsule_semi) ** self.exponent
        return np.sum(scaled, axis=1) ** (1.0 / self.exponent)

    def capsule_radius(self, dirs) -> np.ndarray:
        """Distance from the capsule center to the wall along each direction."""
        d = np.atleast_2d(np.asarray(dirs, dtype=float))
        norms = np.linalg.norm(d, axis=1, keepdims=True)
        d = d / norms
        return 1.0 / self.capsule_value(d)

    def capsule_inward_gap(self, points) -> np.ndarray:
        """Radial distance inward from the capsule wall (negative outside)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        value = self.capsule_value(pts)
        radial = np.linalg.norm(pts, axis=1)
        rho = np.where(value > 1e-12, radial / np.maximum(value, 1e-12), np.inf)
        rho = np.where(radial > 1e-9, rho, self.capsule_radius([[1.0, 0, 0]])[0])
        return (1.0 - value) * rho

    # -- channel -----------------------------------------------------------

    def axis_distance(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        rel = pts - self.channel_point
        along = rel @ self.channel_dir
        return np.linalg.norm(rel - along[:, None] * self.channel_dir[None, :], axis=1)

    @property
    def channel_truth(self) -> ChannelTruth:
        return ChannelTruth(self.channel_point.copy(), self.channel_dir.copy())

    def sector_angle(self, points) -> np.ndarray:
        """Angle about the channel axis, radians; 0 points at the floor."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        rel = pts - self.channel_point
        return np.arctan2(rel @ self.e_lat, rel @ self.e_down)

    # -- lobes -------------------------------------------------------------

    def _lobe_frame_coords(self, i: int, points) -> np.ndarray:
        lobe = self.spec.lobes[i]
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        rel = pts - np.asarray(lobe.center_offset, dtype=float)
        basis = np.stack([self.channel_dir, self.e_lat, self.e_down])
        return rel @ basis.T

    def _bulge(self, i: int, q_unit: np.ndarray) -> np.ndarray:
        lobe = self.spec.lobes[i]
        if lobe.bulge_amplitude == 0.0:
            return np.zeros(len(q_unit))
        c = self._bulge_coeffs[i]
        x, y, z = q_unit[:, 0], q_unit[:, 1], q_unit[:, 2]
        basis = np.stack([x * y, y * z, x * z, x * x - y * y, 3 * z * z - 1.0])
        raw = c @ basis
        return lobe.bulge_amplitude * raw / np.sqrt(np.sum(c**2) + 1e-12)

    def lobe_level(self, i: int, points) -> np.ndarray:
        """Ellipsoid-with-bulge level value: <= 1 inside the unclipped body."""
        lobe = self.spec.lobes[i]
        q = self._lobe_frame_coords(i, points) / np.asarray(lobe.semi_axes, dtype=float)
        r = np.linalg.norm(q, axis=1)
        safe = np.maximum(r, 1e-12)
        bulge = self._bulge(i, q / safe[:, None])
        # Bulge perturbs the local radius in scaled space: amplitude is in mm
        # relative to the mean semi-axis.
        mean_semi = float(np.mean(lobe.semi_axes))
        return r / (1.0 + bulge / mean_semi)

    def sector_tangent(self, theta_deg: float) -> np.ndarray:
        """In-plane unit normal of the sector boundary plane at theta,
        pointing toward increasing angle."""
        theta = np.radians(theta_deg)
        return -np.sin(theta) * self.e_down + np.cos(theta) * self.e_lat

    def _sector_clip(self, i: int, points) -> np.ndarray:
        lobe = self.spec.lobes[i]
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        rel = pts - self.channel_point
        ok = np.ones(len(pts), dtype=bool)
        for theta_deg, gap, side in (
            (lobe.theta_lo_deg, lobe.gap_lo_mm, +1.0),
            (lobe.theta_hi_deg, lobe.gap_hi_mm, -1.0),
        ):
            ok &= side * (rel @ self.sector_tangent(theta_deg)) >= gap / 2.0
        return ok

    def lobe_inside(self, i: int, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        inside = self.lobe_level(i, pts) <= 1.0
        inside &= self.capsule_value(pts) <= 1.0
        if self.spec.channel_radius_mm > 0:
            inside &= self.axis_distance(pts) >= self.spec.channel_radius_mm
        inside &= self._sector_clip(i, pts)
        return inside

    def tissue_label(self, points) -> np.ndarray:
        """VoxelLabel per point from the exact solids (no sampling)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        out = np.full(len(pts), int(VoxelLabel.EMPTY), dtype=np.uint8)
        value = self.capsule_value(pts)
        if self.spec.capsule_fill:
            shell = value <= 1.0
        else:
            radial = np.linalg.norm(pts, axis=1)
            rho = radial / np.maximum(value, 1e-12)
            shell = (value >= 1.0) & ((value - 1.0) * rho <= self.spec.shell_thickness_mm)
        if self.spec.channel_radius_mm > 0:
            shell &= self.axis_distance(pts) >= self.spec.channel_radius_mm
        out[shell] = int(VoxelLabel.CAPSULE)
        for i, lobe in enumerate(self.spec.lobes):
            mask = self.lobe_inside(i, pts)
            out[mask] = int(CLOUD_TO_VOXEL_LABEL[lobe.label])
        return out

    def first_tissue_hit(self, origin, direction, max_range: float, step: float = 0.05):
        """March the exact solids: (distance, VoxelLabel) of first lobe hit.

        Independent of the sampled-cloud ray casting; used as a test oracle.
        """
        direction = unit(direction)
        steps = np.arange(step, max_range, step)
        pts = np.asarray(origin, dtype=float)[None, :] + steps[:, None] * direction[None, :]
        labels = np.full(len(pts), 0, dtype=np.uint8)
        for i, lobe in enumerate(self.spec.lobes):
            mask = (labels == 0) & self.lobe_inside(i, pts)
            labels[mask] = int(CLOUD_TO_VOXEL_LABEL[lobe.label])
        hits = np.flatnonzero(labels != 0)
        if hits.size == 0:
            return None, None
        return float(steps[hits[0]]), VoxelLabel(labels[hits[0]])

    def lobe_volume_mm3(self, i: int, pitch: float = 0.25) -> float:
        """Quadrature of the exact lobe solid on a fine grid."""
        lobe = self.spec.lobes[i]
        center = np.asarray(lobe.center_offset, dtype=float)
        reach = float(max(lobe.semi_axes)) + 2.0
        axes = [np.arange(center[k] - reach, center[k] + reach + pitch, pitch) for k in range(3)]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
        return float(np.sum(self.lobe_inside(i, grid))) * pitch**3

    # -- validation ---------------------------------------------------------

    def _validate(self):
        spec = self.spec
        if min(spec.capsule_semi_axes) <= 0 or spec.voxel_pitch_mm <= 0:
            raise PhantomSpecError("capsule semi-axes and voxel pitch must be positive")
        if spec.surface_samples < 100:
            raise PhantomSpecError("surface_samples must be at least 100")
        if self.capsule_value([spec.channel_point])[0] >= 1.0:
            raise PhantomSpecError("channel anchor lies outside the capsule interior")
        for lobe in spec.lobes:
            if min(lobe.semi_axes) <= 0:
                raise PhantomSpecError(f"{lobe.label.name}: semi-axes must be positive")
            if self.capsule_value([np.asarray(lobe.center_offset)])[0] >= 0.95:
                raise PhantomSpecError(
                    f"{lobe.label.name}: center is not strictly inside the capsule"
                )


def _sample_directions(rng: np.random.Generator, n: int) -> np.ndarray:
    d = rng.normal(size=(n, 3))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def _capsule_normals(model: PhantomModel, pts: np.ndarray) -> np.ndarray:
    semi = model.capsule_semi
    e = model.exponent
    scaled = pts / semi
    grad = e * np.sign(scaled) * np.abs(scaled) ** (e - 1.0) / semi
    return grad / np.linalg.norm(grad, axis=1, keepdims=True)


def _sample_capsule(model: PhantomModel, count: int, rng: np.random.Generator):
    spec = model.spec
    pts = np.empty((0, 3))
    while len(pts) < count:
        dirs = _sample_directions(rng, count * 3)
        radius = model.capsule_radius(dirs)
        cand = dirs * radius[:, None]
        # Radial mapping dilutes density on far/oblique patches; weight by
        # the local area element so the wall is sampled uniformly.
        normals = _capsule_normals(model, cand)
        cosine = np.maximum(np.sum(normals * dirs, axis=1), 0.05)
        weight = radius**2 / cosine
        keep = rng.random(len(cand)) < weight / weight.max()
        cand = cand[keep]
        if spec.channel_radius_mm > 0:
            # Exit holes where the channel pierces the wall.
            cand = cand[model.axis_distance(cand) > spec.channel_radius_mm + 1.0]
        pts = np.vstack([pts, cand])
    pts = pts[:count]
    return pts, _capsule_normals(model, pts)


def _lobe_surface_normals(model: PhantomModel, i: int, pts: np.ndarray) -> np.ndarray:
    eps = 1e-4
    grads = np.zeros_like(pts)
    for k in range(3):
        d = np.zeros(3)
        d[k] = eps
        grads[:, k] = (model.lobe_level(i, pts + d) - model.lobe_level(i, pts - d)) / (2 * eps)
    norms = np.linalg.norm(grads, axis=1, keepdims=True)
    return grads / np.maximum(norms, 1e-12)


def _sample_lobe(model: PhantomModel, i: int, count: int, rng: np.random.Generator):
    """Samples on the clipped lobe boundary: body surface, bore wall, and
    crevice (sector-clip) walls, allocated by rejection success."""
    spec = model.spec
    lobe = spec.lobes[i]
    semi = np.asarray(lobe.semi_axes, dtype=float)
    basis = np.stack([model.channel_dir, model.e_lat, model.e_down])
    center = np.asarray(lobe.center_offset, dtype=float)

    out_pts, out_nrm = [], []

    # Body surface: level == 1, kept where no other constraint clips it.
    want_body = int(count * 0.72)
    body = np.empty((0, 3))
    for _ in range(60):
        if len(body) >= want_body:
            break
        q = _sample_directions(rng, want_body * 2)
        base = q * semi[None, :]
        world = center[None, :] + base @ basis
        level = model.lobe_level(i, world)
        # Push radially in the scaled frame until on the perturbed surface.
        world = center[None, :] + (base / level[:, None]) @ basis
        keep = model.capsule_value(world) <= 1.0 - 1e-6
        if spec.channel_radius_mm > 0:
            keep &= model.axis_distance(world) >= spec.channel_radius_mm + 1e-6
        keep &= model._sector_clip(i, world)
        body = np.vstack([body, world[keep]])
    body = body[:want_body]
    out_pts.append(body)
    out_nrm.append(_lobe_surface_normals(model, i, body))

    # Bore wall: cylinder pieces inside the lobe body.
    if spec.channel_radius_mm > 0:
        want_bore = int(count * 0.08)
        along_span = float(lobe.semi_axes[0]) + 2.0
        bore = np.empty((0, 3))
        for _ in range(40):
            if len(bore) >= want_bore:
                break
            t = rng.uniform(-along_span, along_span, want_bore * 4)
            ang = rng.uniform(0, 2 * np.pi, want_bore * 4)
            radial = (
                np.cos(ang)[:, None] * model.e_down[None, :]
                + np.sin(ang)[:, None] * model.e_lat[None, :]
            )
            cand = (
                model.channel_point[None, :]
                + (t + (center @ model.channel_dir))[:, None] * model.channel_dir[None, :]
                + spec.channel_radius_mm * radial
            )
            keep = (model.lobe_level(i, cand) <= 1.0) & model._sector_clip(i, cand)
            keep &= model.capsule_value(cand) <= 1.0 - 1e-6
            bore = np.vstack([bore, cand[keep]])
        bore = bore[:want_bore]
        if len(bore):
            rel = bore - model.channel_point
            along = rel @ model.channel_dir
            nrm = rel - along[:, None] * model.channel_dir[None, :]
            nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
            out_pts.append(bore)
            out_nrm.append(-nrm)

    # Crevice walls where the sector planes clip the body.
    want_wall = count - sum(len(p) for p in out_pts)
    for theta_deg, gap, side in (
        (lobe.theta_lo_deg, lobe.gap_lo_mm, +1.0),
        (lobe.theta_hi_deg, lobe.gap_hi_mm, -1.0),
    ):
        theta = np.radians(theta_deg)
        radial = np.cos(theta) * model.e_down + np.sin(theta) * model.e_lat
        normal = side * model.sector_tangent(theta_deg)
        anchor = model.channel_point + (gap / 2.0) * normal
        wall = np.empty((0, 3))
        for _ in range(40):
            if len(wall) >= want_wall // 2:
                break
            t = rng.uniform(-float(lobe.semi_axes[0]) - 2.0, float(lobe.semi_axes[0]) + 2.0,
                            want_wall * 2)
            s = rng.uniform(0.0, float(max(model.capsule_semi)) + 2.0, want_wall * 2)
            cand = (
                anchor[None, :]
                + (t + (center @ model.channel_dir))[:, None] * model.channel_dir[None, :]
                + s[:, None] * radial[None, :]
            )
            keep = model.lobe_level(i, cand) <= 1.0
            keep &= model.capsule_value(cand) <= 1.0 - 1e-6
            if spec.channel_radius_mm > 0:
                keep &= model.axis_distance(cand) >= spec.channel_radius_mm + 1e-6
            wall = np.vstack([wall, cand[keep]])
        wall = wall[: want_wall // 2]
        if len(wall):
            out_pts.append(wall)
            out_nrm.append(np.tile(-normal, (len(wall), 1)))

    pts = np.vstack(out_pts)
    nrm = np.vstack(out_nrm)
    return pts[:count], nrm[:count]


def generate_phantom(spec: PhantomSpec) -> tuple[LabeledPointCloud, VoxelVolume, PhantomModel]:
    """Build the labeled surface cloud, voxel volume, and ground-truth model.

    Deterministic for a given spec (seed included).
    """
    model = PhantomModel(spec)
    rng = np.random.default_rng(spec.seed)

    # Surface cloud: capsule wall plus each lobe's boundary pieces.
    n_lobes = len(spec.lobes)
    capsule_share = 0.45 if n_lobes else 1.0
    n_capsule = int(spec.surface_samples * capsule_share)
    cap_pts, cap_nrm = _sample_capsule(model, n_capsule, rng)
    all_pts = [cap_pts]
    all_nrm = [cap_nrm]
    all_lbl = [np.full(len(cap_pts), int(CloudLabel.CAPSULE), dtype=np.uint8)]
    if n_lobes:
        per_lobe = (spec.surface_samples - n_capsule) // n_lobes
        for i, lobe in enumerate(spec.lobes):
            pts, nrm = _sample_lobe(model, i, per_lobe, rng)
            all_pts.append(pts)
            all_nrm.append(nrm)
            all_lbl.append(np.full(len(pts), int(lobe.label), dtype=np.uint8))
    cloud = LabeledPointCloud(
        points=np.vstack(all_pts), labels=np.concatenate(all_lbl), normals=np.vstack(all_nrm)
    )

    # Voxel volume over the capsule bounding box (plus shell and padding).
    pad = spec.shell_thickness_mm + 2.0 * spec.voxel_pitch_mm
    extent = np.asarray(spec.capsule_semi_axes, dtype=float) + pad
    origin = -extent
    dims = np.ceil(2.0 * extent / spec.voxel_pitch_mm).astype(int)
    centers = [origin[k] + (np.arange(dims[k]) + 0.5) * spec.voxel_pitch_mm for k in range(3)]
    grid = np.stack(np.meshgrid(*centers, indexing="ij"), axis=-1).reshape(-1, 3)
    labels = model.tissue_label(grid).reshape(tuple(dims))
    volume = VoxelVolume(origin=origin, pitch=spec.voxel_pitch_mm, labels=labels)
    return cloud, volume, model


def downsample(cloud: LabeledPointCloud, target: int) -> LabeledPointCloud:
    """Label-stratified voxel-grid thinning to at most `target` points.

    Per-label quotas preserve the input proportions, with a floor of 1% of
    the target for any label present in the input.
    """
    if target < 4:
        raise ValueError("target must be >= 4")
    if len(cloud) <= target:
        return cloud

    keep_indices: list[np.ndarray] = []
    present = [l for l in CloudLabel if np.any(cloud.labels == int(l))]
    floor = max(1, int(np.ceil(0.01 * target)))
    shares = {}
    for l in present:
        n = int(np.sum(cloud.labels == int(l)))
        shares[l] = max(floor, int(round(target * n / len(cloud))))
    # Scale back if the floors pushed the total over target.
    total = sum(shares.values())
    if total > target:
        biggest = max(shares, key=lambda l: shares[l])
        shares[biggest] -= total - target

    for l in present:
        idx = np.flatnonzero(cloud.labels == int(l))
        quota = min(shares[l], len(idx))
        pts = cloud.points[idx]
        span = float(np.max(pts.max(axis=0) - pts.min(axis=0))) or 1.0
        lo_cell, hi_cell = span / (2 * max(quota, 1)) ** (1 / 3) * 0.1, span
        chosen = idx
        for _ in range(40):
            cell = 0.5 * (lo_cell + hi_cell)
            keys = np.floor((pts - pts.min(axis=0)) / cell).astype(np.int64)
            flat = keys[:, 0] * 73856093 ^ keys[:, 1] * 19349663 ^ keys[:, 2] * 83492791
            _, first = np.unique(flat, return_index=True)
            if len(first) > quota:
                lo_cell = cell
            else:
                hi_cell = cell
                chosen = idx[np.sort(first)]
                if len(first) >= quota * 0.9:
                    break
        keep_indices.append(chosen[:quota])

    keep = np.sort(np.concatenate(keep_indices))
    return LabeledPointCloud(
        points=cloud.points[keep],
        labels=cloud.labels[keep],
        normals=None if cloud.normals is None else cloud.normals[keep],
    )


# -- point-cloud file format (ASCII PLY) ------------------------------------


def save_cloud(cloud: LabeledPointCloud, path) -> None:
    path = Path(path)
    has_normals = cloud.normals is not None
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(cloud)}",
        "property float x",
        "property float y",
        "property float z",
    ]
    if has_normals:
        lines += ["property float nx", "property float ny", "property float nz"]
    lines += ["property uchar label", "end_header"]
    rows = []
    for i in range(len(cloud)):
        coords = "{:.6f} {:.6f} {:.6f}".format(*cloud.points[i])
        if has_normals:
            coords += " {:.6f} {:.6f} {:.6f}".format(*cloud.normals[i])
        rows.append(f"{coords} {int(cloud.labels[i])}")
    path.write_text("\n".join(lines + rows) + "\n")


def load_cloud(path) -> LabeledPointCloud:
    path = Path(path)
    text = path.read_text().splitlines()
    if not text or text[0].strip() != PLY_MAGIC:
        raise CloudParseError(f"{path}: missing header (expected 'ply' on line 1)")
    n_vertices = None
    properties: list[str] = []
    body_start = None
    for lineno, line in enumerate(text[1:], start=2):
        token = line.strip()
        if token == "end_header":
            body_start = lineno
            break
        if token.startswith("element vertex"):
            try:
                n_vertices = int(token.split()[-1])
            except ValueError:
                raise CloudParseError(f"{path}:{lineno}: bad vertex count in '{token}'")
        elif token.startswith("property"):
            properties.append(token.split()[-1])
    if body_start is None or n_vertices is None:
        raise CloudParseError(f"{path}: missing header (no 'end_header'/'element vertex')")
    has_normals = "nx" in properties
    expected = 7 if has_normals else 4
    points, labels, normals = [], [], []
    for offset, line in enumerate(text[body_start : body_start + n_vertices]):
        lineno = body_start + 1 + offset
        parts = line.split()
        if len(parts) != expected:
            raise CloudParseError(
                f"{path}:{lineno}: vertex {offset} has {len(parts)} fields, expected {expected}"
            )
        try:
            vals = [float(v) for v in parts[:-1]]
            label = int(parts[-1])
        except ValueError:
            raise CloudParseError(f"{path}:{lineno}: vertex {offset} has non-numeric fields")
        if label not in [int(l) for l in CloudLabel]:
            raise CloudParseError(
                f"{path}:{lineno}: vertex {offset} has unknown label {label}"
            )
        points.append(vals[:3])
        if has_normals:
            normals.append(vals[3:6])
        labels.append(label)
    if len(points) != n_vertices:
        raise CloudParseError(
            f"{path}: expected {n_vertices} vertices, file ends after {len(points)}"
        )
    return LabeledPointCloud(
        points=np.asarray(points),
        labels=np.asarray(labels, dtype=np.uint8),
        normals=np.asarray(normals) if has_normals else None,
    )


# -- voxel volume file format (LPVX) -----------------------------------------


def save_volume(volume: VoxelVolume, path) -> None:
    header = struct.pack(
        "<4sI3dd3I",
        LPVX_MAGIC,
        LPVX_VERSION,
        *volume.origin.tolist(),
        volume.pitch,
        *volume.labels.shape,
    )
    header = header.ljust(LPVX_HEADER_SIZE, b"\x00")
    Path(path).write_bytes(header + volume.labels.ravel(order="F").tobytes())


def load_volume(path) -> VoxelVolume:
    raw = Path(path).read_bytes()
    if len(raw) < LPVX_HEADER_SIZE:
        raise CloudParseError(f"{path}: truncated LPVX header")
    magic, version, ox, oy, oz, pitch, nx, ny, nz = struct.unpack(
        "<4sI3dd3I", raw[: struct.calcsize("<4sI3dd3I")]
    )
    if magic != LPVX_MAGIC:
        raise CloudParseError(f"{path}: bad magic {magic!r}, expected {LPVX_MAGIC!r}")
    if version != LPVX_VERSION:
        raise CloudParseError(f"{path}: unsupported LPVX version {version}")
    count = nx * ny * nz
    body = raw[LPVX_HEADER_SIZE : LPVX_HEADER_SIZE + count]
    if len(body) != count:
        raise CloudParseError(f"{path}: expected {count} voxels, got {len(body)}")
    labels = np.frombuffer(body, dtype=np.uint8).reshape((nx, ny, nz), order="F").copy()
    return VoxelVolume(origin=np.array([ox, oy, oz]), pitch=pitch, labels=labels)
