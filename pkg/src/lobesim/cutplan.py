"""Cut trajectory planning: interpolated trough and median cuts, grouped
into workspace-reachable sets with global execution indices.

All coordinates are millimeters in the phantom frame.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum, IntEnum

import numpy as np

from lobesim.anatomy import CapsuleFit, ChannelAxis, Trough, TroughLabel, TroughSet
from lobesim.errors import UnreachableCutError, ValidationError
from lobesim.phantom import CloudLabel, LabeledPointCloud, LOBE_CLOUD_LABELS

BAND_HALF_WIDTH = 2.0
SMOOTH_WINDOW = 5
REACH_IN_OFFSETS = (5.0, 2.0)
WORKSPACE_SAFETY = 2.0
DEFAULT_VELOCITY = 5.0


class WaypointKind(IntEnum):
    REACH_IN = 0
    CUTTING = 1


class CutPhase(str, Enum):
    LEFT_TROUGH = "left_trough"
    RIGHT_TROUGH = "right_trough"
    MEDIAN_DISSECTION = "median_dissection"


PHASE_ORDER = (CutPhase.LEFT_TROUGH, CutPhase.RIGHT_TROUGH, CutPhase.MEDIAN_DISSECTION)


@dataclass
class CutTrajectory:
    waypoints: np.ndarray
    kinds: np.ndarray
    phase: CutPhase
    layer_index: int
    velocity_mm_s: float = DEFAULT_VELOCITY
    global_index: int = -1
    group_id: int = -1

    def __post_init__(self):
        self.waypoints = np.asarray(self.waypoints, dtype=float).reshape(-1, 3)
        self.kinds = np.asarray(self.kinds, dtype=np.uint8).reshape(-1)
        if len(self.waypoints) != len(self.kinds):
            raise ValidationError("waypoints and kinds must match")
        cutting = self.kinds == int(WaypointKind.CUTTING)
        if cutting.sum() < 2:
            raise ValidationError("a trajectory needs at least 2 cutting waypoints")
        first_cut = int(np.argmax(cutting))
        if not np.all(cutting[first_cut:]) or np.any(cutting[:first_cut]):
            raise ValidationError("reach-in waypoints must form one leading run")

    @property
    def cutting_waypoints(self) -> np.ndarray:
        return self.waypoints[self.kinds == int(WaypointKind.CUTTING)]

    def path_length(self) -> float:
        return float(np.sum(np.linalg.norm(np.diff(self.waypoints, axis=0), axis=1)))


@dataclass
class CutGroup:
    group_id: int
    member_indices: list[int]
    scope_point: np.ndarray
    scope_direction: np.ndarray
    work_center: np.ndarray


@dataclass
class CutPlan:
    trajectories: list[CutTrajectory]
    groups: list[CutGroup]
    config: dict
    capsule_fit: CapsuleFit
    axis: ChannelAxis
    warnings: list[str] = field(default_factory=list)

    def phase_trajectories(self, phase: CutPhase) -> list[CutTrajectory]:
        return [t for t in self.trajectories if t.phase == phase]

    def to_json_dict(self) -> dict:
        phases = []
        for phase in PHASE_ORDER:
            members = self.phase_trajectories(phase)
            if not members:
                continue
            group_ids = sorted({t.group_id for t in members})
            groups = []
            for gid in group_ids:
                group = next(g for g in self.groups if g.group_id == gid)
                cuts = []
                for t in sorted((t for t in members if t.group_id == gid),
                                key=lambda t: t.global_index):
                    cuts.append({
                        "global_index": t.global_index,
                        "layer": t.layer_index,
                        "velocity_mm_s": t.velocity_mm_s,
                        "waypoints": [
                            {"kind": WaypointKind(int(k)).name.lower(),
                             "x": float(p[0]), "y": float(p[1]), "z": float(p[2])}
                            for p, k in zip(t.waypoints, t.kinds)
                        ],
                    })
                groups.append({
                    "group_id": gid,
                    "scope_pose": {
                        "point": group.scope_point.tolist(),
                        "direction": group.scope_direction.tolist(),
                    },
                    "cuts": cuts,
                })
            phases.append({"phase": phase.value, "groups": groups})
        return {
            "version": 1,
            "config": self.config,
            "axis": {
                "point": self.axis.point.tolist(),
                "direction": self.axis.direction.tolist(),
                "clearance": self.axis.clearance,
            },
            "capsule_fit": self.capsule_fit.to_dict(),
            "warnings": list(self.warnings),
            "phases": phases,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=1)

    @classmethod
    def from_json_dict(cls, data: dict) -> "CutPlan":
        fit = CapsuleFit.from_dict(data["capsule_fit"])
        axis = ChannelAxis(
            point=np.asarray(data["axis"]["point"]),
            direction=np.asarray(data["axis"]["direction"]),
            clearance=float(data["axis"]["clearance"]),
        )
        trajectories: list[CutTrajectory] = []
        groups: list[CutGroup] = []
        for phase_entry in data["phases"]:
            phase = CutPhase(phase_entry["phase"])
            for group_entry in phase_entry["groups"]:
                members = []
                for cut in group_entry["cuts"]:
                    pts = np.array([[w["x"], w["y"], w["z"]] for w in cut["waypoints"]])
                    kinds = np.array(
                        [int(WaypointKind[w["kind"].upper()]) for w in cut["waypoints"]],
                        dtype=np.uint8,
                    )
                    trajectories.append(CutTrajectory(
                        waypoints=pts,
                        kinds=kinds,
                        phase=phase,
                        layer_index=int(cut["layer"]),
                        velocity_mm_s=float(cut["velocity_mm_s"]),
                        global_index=int(cut["global_index"]),
                        group_id=int(group_entry["group_id"]),
                    ))
                    members.append(int(cut["global_index"]))
                scope = group_entry["scope_pose"]
                groups.append(CutGroup(
                    group_id=int(group_entry["group_id"]),
                    member_indices=members,
                    scope_point=np.asarray(scope["point"]),
                    scope_direction=np.asarray(scope["direction"]),
                    work_center=np.asarray(scope["point"]),
                ))
        trajectories.sort(key=lambda t: t.global_index)
        for g in groups:
            cuts = [t for t in trajectories if t.group_id == g.group_id]
            g.work_center = np.mean(np.vstack([t.cutting_waypoints for t in cuts]), axis=0)
        return cls(
            trajectories=trajectories,
            groups=groups,
            config=data.get("config", {}),
            capsule_fit=fit,
            axis=axis,
            warnings=list(data.get("warnings", [])),
        )

    @classmethod
    def from_json(cls, text: str) -> "CutPlan":
        return cls.from_json_dict(json.loads(text))


def _moving_average(values: np.ndarray, window: int) -> np.ndarray:
    if len(values) < 2:
        return values.copy()
    pad = window // 2
    padded = np.concatenate([np.full(pad, values[0]), values, np.full(pad, values[-1])])
    kernel = np.ones(window) / window
    return np.convolve(padded, kernel, mode="valid")


def _resample_polyline(points: np.ndarray, spacing: float) -> np.ndarray:
    """Arc-length resampling with exact endpoints; consecutive samples are
    at most `spacing` apart."""
    if len(points) < 2:
        return points.copy()
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    total = arc[-1]
    if total < 1e-9:
        return points[[0, -1]].copy()
    n = max(1, int(np.ceil(total / spacing)))
    targets = np.linspace(0.0, total, n + 1)
    out = np.empty((len(targets), 3))
    for k in range(3):
        out[:, k] = np.interp(targets, arc, points[:, k])
    return out


def _with_reach_in(cut_points: np.ndarray, approach_dir: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    reach = [cut_points[0] - off * approach_dir for off in REACH_IN_OFFSETS]
    waypoints = np.vstack([reach, cut_points])
    kinds = np.concatenate([
        np.full(len(reach), int(WaypointKind.REACH_IN), dtype=np.uint8),
        np.full(len(cut_points), int(WaypointKind.CUTTING), dtype=np.uint8),
    ])
    return waypoints, kinds


def _true_runs(mask: np.ndarray) -> list[slice]:
    runs, cur_start = [], None
    for i, v in enumerate(np.concatenate([mask, [False]])):
        if v and cur_start is None:
            cur_start = i
        elif not v and cur_start is not None:
            runs.append(slice(cur_start, i))
            cur_start = None
    return runs


def _longest_true_run(mask: np.ndarray) -> slice:
    runs = _true_runs(mask)
    if not runs:
        return slice(0, 0)
    return max(runs, key=lambda r: r.stop - r.start)


def plan_trough_cuts(
    cloud: LabeledPointCloud,
    axis: ChannelAxis,
    trough: Trough,
    fit: CapsuleFit,
    layer_spacing: float = 2.0,
    waypoint_spacing: float = 1.5,
) -> tuple[list[CutTrajectory], list[str]]:
    """Layered cuts within one trough plane, from the lobe surface down to
    the margin-raised capsule track.

    Lobe points near the plane are projected onto it and reduced to a
    smoothed surface track; intermediate layers step toward the capsule at
    `layer_spacing`; the final layer rides the capsule track, clipped where
    it meets the surface track.
    """
    if trough.label not in (TroughLabel.LEFT, TroughLabel.RIGHT):
        raise ValidationError("trough cuts are planned for left/right troughs only")
    if layer_spacing <= 0:
        raise ValidationError("layer spacing must be > 0")
    warnings: list[str] = []
    phase = CutPhase.LEFT_TROUGH if trough.label == TroughLabel.LEFT else CutPhase.RIGHT_TROUGH

    lobe_pts = cloud.select(*LOBE_CLOUD_LABELS)
    offsets = (lobe_pts - trough.plane_point) @ trough.plane_normal
    band = np.abs(offsets) <= BAND_HALF_WIDTH
    member_u = (trough.members - axis.point) @ axis.direction
    u_all = (lobe_pts - axis.point) @ axis.direction
    band &= (u_all >= member_u.min() - 2.0) & (u_all <= member_u.max() + 2.0)
    # The plane extends through the axis to the far side of the gland; keep
    # only points on the trough's own radial side.
    radial_t = trough.line_point - axis.point
    radial_t -= (radial_t @ axis.direction) * axis.direction
    band &= (lobe_pts - axis.point) @ radial_t > 0.0
    band_pts = lobe_pts[band]
    if len(band_pts) < 4:
        raise ValidationError("no lobe points near trough")

    in_plane = band_pts - np.outer(
        (band_pts - trough.plane_point) @ trough.plane_normal, trough.plane_normal
    )
    along_dir = axis.direction
    depth_dir = np.cross(trough.plane_normal, along_dir)
    radial = trough.line_point - axis.point
    radial -= (radial @ axis.direction) * axis.direction
    if depth_dir @ radial < 0:
        depth_dir = -depth_dir
    depth_dir /= np.linalg.norm(depth_dir)

    ell = (in_plane - trough.plane_point) @ along_dir
    depth = (in_plane - trough.plane_point) @ depth_dir

    order = np.argsort(ell)
    ell, depth = ell[order], depth[order]
    bins = np.arange(ell.min(), ell.max() + waypoint_spacing, waypoint_spacing)
    which = np.digitize(ell, bins)
    track_l, track_d = [], []
    for b in np.unique(which):
        sel = which == b
        track_l.append(float(np.mean(ell[sel])))
        track_d.append(float(np.median(depth[sel])))
    track_l = np.asarray(track_l)
    track_d = _moving_average(np.asarray(track_d), SMOOTH_WINDOW)
    if len(track_l) < 2:
        raise ValidationError("no lobe points near trough")

    def world_at(l_coords: np.ndarray, d_coords: np.ndarray) -> np.ndarray:
        return (trough.plane_point[None, :]
                + l_coords[:, None] * along_dir[None, :]
                + d_coords[:, None] * depth_dir[None, :])

    # Capsule track: root of the margin-surface crossing along the depth
    # direction at each station.
    d_hi = track_d + 40.0
    lo = track_d.copy()
    hi = d_hi
    h_lo = fit.height_above_margin(world_at(track_l, lo))
    h_hi = fit.height_above_margin(world_at(track_l, hi))
    capsule_d = np.full_like(track_d, np.nan)
    # Stations where the surface already sits at (or below) the margin
    # surface have a zero-gap capsule track.
    at_surface = h_lo <= 0.2
    capsule_d[at_surface] = track_d[at_surface]
    bracket = (h_lo > 0.2) & (h_hi < 0)
    lo_b, hi_b = lo[bracket].copy(), hi[bracket].copy()
    l_b = track_l[bracket]
    for _ in range(45):
        mid = 0.5 * (lo_b + hi_b)
        h_mid = fit.height_above_margin(world_at(l_b, mid))
        above = h_mid > 0
        lo_b = np.where(above, mid, lo_b)
        hi_b = np.where(above, hi_b, mid)
    capsule_d[bracket] = 0.5 * (lo_b + hi_b)
    supported = np.zeros(len(track_l), dtype=bool)
    valid = ~np.isnan(capsule_d)
    if valid.any():
        supported[valid] = fit.in_support(world_at(track_l[valid], capsule_d[valid]))
    usable = valid & supported

    if not usable.any():
        raise ValidationError("no lobe points near trough")
    clipped = _longest_true_run(usable)
    track_l = track_l[clipped]
    track_d = track_d[clipped]
    capsule_d = capsule_d[clipped]
    gap = capsule_d - track_d
    if np.all(gap <= 0.05):
        # Surface already at the capsule: single finishing layer.
        points = _resample_polyline(world_at(track_l, capsule_d), waypoint_spacing)
        waypoints, kinds = _with_reach_in(points, axis.direction)
        return [CutTrajectory(waypoints=waypoints, kinds=kinds, phase=phase, layer_index=0)], warnings
    if (gap < -0.05).any():
        warnings.append(f"{phase.value}: capsule track crosses above the surface track")

    trajectories: list[CutTrajectory] = []
    layer = 0
    k = 0
    while True:
        d_k = track_d + k * layer_spacing
        inside = d_k < capsule_d - 0.05
        if k == 0:
            inside = np.ones_like(inside)
        run = _longest_true_run(inside)
        if k > 0 and (run.stop - run.start) < 2:
            break
        pts = world_at(track_l[run], d_k[run])
        resampled = _resample_polyline(pts, waypoint_spacing)
        waypoints, kinds = _with_reach_in(resampled, axis.direction)
        trajectories.append(
            CutTrajectory(waypoints=waypoints, kinds=kinds, phase=phase, layer_index=layer)
        )
        layer += 1
        k += 1
        if k * layer_spacing >= float(np.max(capsule_d - track_d)):
            break
    capsule_pts = _resample_polyline(world_at(track_l, capsule_d), waypoint_spacing)
    waypoints, kinds = _with_reach_in(capsule_pts, axis.direction)
    trajectories.append(
        CutTrajectory(waypoints=waypoints, kinds=kinds, phase=phase, layer_index=layer)
    )
    return trajectories, warnings


def plan_median_cuts(
    cloud: LabeledPointCloud,
    axis: ChannelAxis,
    fit: CapsuleFit,
    troughs: TroughSet,
    layer_spacing: float = 2.0,
    waypoint_spacing: float = 1.5,
    station_spacing: float = 0.45,
) -> tuple[list[CutTrajectory], list[str]]:
    """Lateral sweep polylines descending from the median lobe's free
    surface to the margin-raised capsule grid.

    Each layer holds one polyline per axial station, spanning the corridor
    between the trough planes; the final layer rides the margin surface
    with dense stations so the dissection sheet is contiguous.
    """
    median_pts = cloud.select(CloudLabel.MEDIAN_LOBE)
    if len(median_pts) == 0:
        raise ValidationError("median lobe absent from cloud")
    warnings: list[str] = []
    frame = fit.frame
    coords = frame.to_frame(median_pts)

    # Free-surface height per (u, v) cell: the lobe's channel-facing top.
    cell = 2.0
    u_lo, u_hi = coords[:, 0].min(), coords[:, 0].max()
    v_lo, v_hi = coords[:, 1].min(), coords[:, 1].max()
    nu = max(2, int(np.ceil((u_hi - u_lo) / cell)))
    nv = max(2, int(np.ceil((v_hi - v_lo) / cell)))
    iu = np.clip(((coords[:, 0] - u_lo) / cell).astype(int), 0, nu - 1)
    iv = np.clip(((coords[:, 1] - v_lo) / cell).astype(int), 0, nv - 1)
    top = np.full((nu, nv), -np.inf)
    np.maximum.at(top, (iu, iv), coords[:, 2])
    top[np.isinf(top)] = np.nan

    def top_at(u: float, v: np.ndarray) -> np.ndarray:
        ui = int(np.clip((u - u_lo) / cell, 0, nu - 1))
        vi = np.clip(((v - v_lo) / cell).astype(int), 0, nv - 1)
        return top[ui, vi]

    depth_max = 0.0
    margin_all = fit.margin_w(coords[:, 0], coords[:, 1])
    depth_max = float(np.nanmax(coords[:, 2] - margin_all))

    n_layers = max(0, int(np.ceil(depth_max / layer_spacing)) - 1)
    trajectories: list[CutTrajectory] = []

    def stations(spacing: float) -> np.ndarray:
        return np.arange(u_lo, u_hi + spacing / 2, spacing)

    def sweep_layer(layer_idx: int, k: int | None, spacing: float, serpentine_flip: bool):
        """k = None means the final capsule-surface layer."""
        polylines = []
        for si, u in enumerate(stations(spacing)):
            v_line = np.arange(v_lo - 2.0, v_hi + 2.0, waypoint_spacing / 2)
            w_margin = fit.margin_w(np.full_like(v_line, u), v_line)
            if k is None:
                w_line = w_margin
                keep = np.ones(len(v_line), dtype=bool)
            else:
                lobe_top = top_at(u, v_line)
                w_line = lobe_top - (k + 1) * layer_spacing
                keep = ~np.isnan(w_line) & (w_line > w_margin + 0.05)
            world = frame.to_world(
                np.stack([np.full_like(v_line, u), v_line, np.nan_to_num(w_line)], axis=1)
            )
            # Footprint guards evaluate at the margin surface: the fit's
            # horizontal support is what bounds the sweep, not the cut height.
            footprint = frame.to_world(
                np.stack([np.full_like(v_line, u), v_line, w_margin], axis=1)
            )
            keep &= fit.in_corridor(world) & fit.in_support(footprint)
            for run in _true_runs(keep):
                if run.stop - run.start < 2:
                    continue
                pts = world[run]
                if (si % 2 == 1) ^ serpentine_flip:
                    pts = pts[::-1]
                polylines.append(pts)
        for pts in polylines:
            resampled = _resample_polyline(pts, waypoint_spacing)
            waypoints, kinds = _with_reach_in(resampled, axis.direction)
            trajectories.append(CutTrajectory(
                waypoints=waypoints, kinds=kinds,
                phase=CutPhase.MEDIAN_DISSECTION, layer_index=layer_idx,
            ))

    for k in range(n_layers):
        sweep_layer(k, k, max(waypoint_spacing, 1.6), serpentine_flip=bool(k % 2))
    sweep_layer(n_layers, None, station_spacing, serpentine_flip=False)
    if n_layers == 0:
        warnings.append("median lobe shallower than one layer; capsule sheet only")
    return trajectories, warnings


def _split_to_fit(traj: CutTrajectory, diameter: float) -> list[CutTrajectory]:
    cuts = traj.cutting_waypoints
    center = cuts.mean(axis=0)
    radius = float(np.linalg.norm(cuts - center, axis=1).max())
    if radius <= diameter / 2.0:
        return [traj]
    if len(cuts) < 4:
        raise UnreachableCutError(
            f"{traj.phase.value} layer {traj.layer_index}: "
            f"span {2 * radius:.1f}mm exceeds the {diameter:.0f}mm workspace"
        )
    mid = len(cuts) // 2
    halves = []
    for part in (cuts[:mid + 1], cuts[mid:]):
        approach = traj.waypoints[0] - traj.waypoints[min(2, len(traj.waypoints) - 1)]
        direction = approach / (np.linalg.norm(approach) + 1e-12)
        waypoints, kinds = _with_reach_in(part, -direction)
        halves.append(replace(traj, waypoints=waypoints, kinds=kinds))
    out = []
    for h in halves:
        out.extend(_split_to_fit(h, diameter))
    return out


def group_cuts(
    trajectories: list[CutTrajectory],
    axis: ChannelAxis,
    workspace_diameter: float = 40.0,
    overlap: float = 5.0,
    config: dict | None = None,
    capsule_fit: CapsuleFit | None = None,
    warnings: list[str] | None = None,
) -> CutPlan:
    """Partition trajectories into workspace windows along the channel axis
    and assign global execution order.

    Axial windows are at most (diameter - safety) long with `overlap`
    between neighbors; trajectories are split at window boundaries, then any
    piece that still cannot fit a workspace sphere is split along its arc.
    Windows shrink adaptively until every group fits its sphere.
    """
    if workspace_diameter <= 0:
        raise ValidationError("workspace diameter must be > 0")
    if overlap < 0:
        raise ValidationError("overlap must be >= 0")

    def axial(pts: np.ndarray) -> np.ndarray:
        return (pts - axis.point) @ axis.direction

    plan_trajectories: list[CutTrajectory] = []
    groups: list[CutGroup] = []
    next_group = 0
    for phase in PHASE_ORDER:
        members = [t for t in trajectories if t.phase == phase]
        if not members:
            continue
        window = workspace_diameter - WORKSPACE_SAFETY
        for _ in range(14):
            step = max(window - overlap, 2.0)
            pieces: list[CutTrajectory] = []
            for t in members:
                u = axial(t.cutting_waypoints)
                if u.max() - u.min() <= window:
                    pieces.append(t)
                    continue
                # Split at window boundaries (with overlap retained on both
                # sides of each boundary).
                t_pieces: list[CutTrajectory] = []
                starts = np.arange(u.min(), u.max(), step)
                for s in starts:
                    sel = (u >= s - 1e-9) & (u <= s + window + 1e-9)
                    run = _longest_true_run(sel)
                    if run.stop - run.start < 2:
                        continue
                    cuts = t.cutting_waypoints[run]
                    waypoints, kinds = _with_reach_in(cuts, axis.direction)
                    t_pieces.append(replace(t, waypoints=waypoints, kinds=kinds))
                if not t_pieces:
                    # Too sparse to window; fall back to arc splitting (which
                    # rejects trajectories that can never fit a sphere).
                    t_pieces = _split_to_fit(t, workspace_diameter)
                pieces.extend(t_pieces)
            split_pieces: list[CutTrajectory] = []
            for p in pieces:
                split_pieces.extend(_split_to_fit(p, workspace_diameter))
            pieces = split_pieces

            # Window assignment by cutting-centroid axial position.
            centroids = np.array([axial(p.cutting_waypoints).mean() for p in pieces])
            lo = float(centroids.min())
            hi = float(centroids.max())
            n_windows = max(1, int(np.ceil((hi - lo) / step)))
            assignment = np.clip(
                np.floor((centroids - lo) / step).astype(int), 0, n_windows - 1
            )
            ok = True
            phase_groups: list[tuple[np.ndarray, list[int]]] = []
            for wi in range(n_windows):
                idx = np.flatnonzero(assignment == wi)
                if len(idx) == 0:
                    continue
                cuts = np.vstack([pieces[i].cutting_waypoints for i in idx])
                center = cuts.mean(axis=0)
                if np.linalg.norm(cuts - center, axis=1).max() > workspace_diameter / 2.0:
                    ok = False
                    break
                phase_groups.append((center, idx.tolist()))
            if ok:
                break
            window *= 0.85
        else:
            raise UnreachableCutError(f"{phase.value}: cannot partition into workspace spheres")

        for center, idx in phase_groups:
            group_members: list[CutTrajectory] = []
            for i in idx:
                group_members.append(replace(pieces[i], group_id=next_group))
            # Top-to-bottom within the group: by layer, then axial position.
            group_members.sort(key=lambda t: (
                t.layer_index,
                round(float(axial(t.cutting_waypoints).mean()), 6),
                round(float(t.cutting_waypoints[0][1]), 6),
            ))
            along = float((center - axis.point) @ axis.direction)
            scope_point = axis.point + along * axis.direction
            groups.append(CutGroup(
                group_id=next_group,
                member_indices=[],
                scope_point=scope_point,
                scope_direction=axis.direction.copy(),
                work_center=center,
            ))
            plan_trajectories.extend(group_members)
            next_group += 1

    for i, t in enumerate(plan_trajectories):
        t.global_index = i
    for g in groups:
        g.member_indices = [t.global_index for t in plan_trajectories if t.group_id == g.group_id]

    return CutPlan(
        trajectories=plan_trajectories,
        groups=groups,
        config=dict(config or {}),
        capsule_fit=capsule_fit,
        axis=axis,
        warnings=list(warnings or []),
    )


def plan_resection(
    cloud: LabeledPointCloud,
    axis: ChannelAxis,
    troughs: TroughSet,
    fit: CapsuleFit,
    layer_spacing: float = 2.0,
    waypoint_spacing: float = 1.5,
    station_spacing: float = 0.45,
    workspace_diameter: float = 40.0,
    overlap: float = 5.0,
) -> CutPlan:
    """Full three-phase plan: left trough, right trough, median dissection."""
    warnings: list[str] = []
    trajectories: list[CutTrajectory] = []
    for label in (TroughLabel.LEFT, TroughLabel.RIGHT):
        cuts, warn = plan_trough_cuts(
            cloud, axis, troughs.get(label), fit,
            layer_spacing=layer_spacing, waypoint_spacing=waypoint_spacing,
        )
        trajectories.extend(cuts)
        warnings.extend(warn)
    cuts, warn = plan_median_cuts(
        cloud, axis, fit, troughs,
        layer_spacing=layer_spacing, waypoint_spacing=waypoint_spacing,
        station_spacing=station_spacing,
    )
    trajectories.extend(cuts)
    warnings.extend(warn)
    config = {
        "layer_spacing_mm": layer_spacing,
        "waypoint_spacing_mm": waypoint_spacing,
        "station_spacing_mm": station_spacing,
        "workspace_diameter_mm": workspace_diameter,
        "overlap_mm": overlap,
        "margin_mm": fit.margin,
        "velocity_mm_s": DEFAULT_VELOCITY,
    }
    return group_cuts(
        trajectories, axis,
        workspace_diameter=workspace_diameter, overlap=overlap,
        config=config, capsule_fit=fit, warnings=warnings,
    )
