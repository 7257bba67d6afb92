"""Execute a cut plan against the voxel phantom under the three-phase
workflow, with retraction effects, a procedure state machine, and
volumetric outcome metrics.

The electrode is a sphere swept along the cutting polyline: lobe-labeled
voxels within the electrode radius are relabeled `removed`. Capsule voxels
are never relabeled; sweeping within reach of one is counted and logged as
a warning (a capsule strike). Tissue that loses its 6-connected path to the
bed (tissue on the capsule side of the margin surface, or outside the
corridor) is evacuated: the freed fragment is relabeled `removed`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy import ndimage

from lobesim.cutplan import CutPhase, CutPlan, CutTrajectory, WaypointKind
from lobesim.errors import ValidationError
from lobesim.geometry import RigidTransform, unit
from lobesim.phantom import LOBE_VOXEL_LABELS, VoxelLabel, VoxelVolume
from lobesim.registration import RegistrationResult
from lobesim.retraction import PushAction, SceneInputs

DEFAULT_ELECTRODE_RADIUS = 0.5
RETRACTION_DECAY = 0.5


class Phase(str, Enum):
    LEFT_TROUGH = "left_trough"
    RIGHT_TROUGH = "right_trough"
    MEDIAN_DISSECTION = "median_dissection"
    COMPLETE = "complete"


PHASE_SEQUENCE = (
    Phase.LEFT_TROUGH, Phase.RIGHT_TROUGH, Phase.MEDIAN_DISSECTION, Phase.COMPLETE
)

_CUT_PHASE = {
    Phase.LEFT_TROUGH: CutPhase.LEFT_TROUGH,
    Phase.RIGHT_TROUGH: CutPhase.RIGHT_TROUGH,
    Phase.MEDIAN_DISSECTION: CutPhase.MEDIAN_DISSECTION,
}


class PhaseCompleteSignal(RuntimeError):
    """All cuts of the current phase are executed; advance_phase required."""


@dataclass
class ExecutionEvent:
    timestamp_s: float
    kind: str
    payload: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"timestamp_s": self.timestamp_s, "kind": self.kind, "payload": self.payload}


@dataclass
class MetricsReport:
    preop_median_cm3: float
    target_residual_cm3: float
    actual_residual_cm3: float
    percent_removal: float
    targeted_percent_removal: float
    percent_of_targeted: float
    capsule_voxels_removed: int
    capsule_strike_voxels: int
    per_phase_cuts: dict
    per_phase_retractions: dict
    simulated_duration_s: float

    def to_dict(self) -> dict:
        return {
            "preop_median_cm3": self.preop_median_cm3,
            "target_residual_cm3": self.target_residual_cm3,
            "actual_residual_cm3": self.actual_residual_cm3,
            "percent_removal": self.percent_removal,
            "targeted_percent_removal": self.targeted_percent_removal,
            "percent_of_targeted": self.percent_of_targeted,
            "capsule_voxels_removed": self.capsule_voxels_removed,
            "capsule_strike_voxels": self.capsule_strike_voxels,
            "per_phase_cuts": self.per_phase_cuts,
            "per_phase_retractions": self.per_phase_retractions,
            "simulated_duration_s": self.simulated_duration_s,
        }


def metrics_from_volumes(
    preop_cm3: float, actual_residual_cm3: float, target_residual_cm3: float
) -> tuple[float, float, float]:
    """Pure volume accounting: (percent removal, targeted percent removal,
    percent of targeted volume)."""
    if preop_cm3 <= 0:
        raise ValidationError("preoperative volume must be positive")
    percent_removal = 100.0 * (preop_cm3 - actual_residual_cm3) / preop_cm3
    targeted = 100.0 * (preop_cm3 - target_residual_cm3) / preop_cm3
    ratio = 100.0 * percent_removal / targeted if targeted > 0 else 0.0
    return percent_removal, targeted, ratio


class ProcedureState:
    """Mutable execution state; mutate only through the operations below,
    strictly serially per session."""

    def __init__(
        self,
        plan: CutPlan,
        volume: VoxelVolume,
        registration: RegistrationResult | None = None,
        true_transform: RigidTransform | None = None,
        exec_noise_mm: float = 0.0,
        seed: int = 0,
        instrument_y=(0.0, 0.0, 1.0),
        max_push_mm: float = 15.0,
    ):
        self.plan = plan
        self.volume = volume.copy()
        self.preop = volume.copy()
        self.phase = Phase.LEFT_TROUGH
        self.next_cut_index = 0
        self.current_group_id = -1
        self.registration = registration
        self.true_transform = true_transform or RigidTransform.identity()
        self.exec_noise_mm = float(exec_noise_mm)
        self.rng = np.random.default_rng(seed)
        self.retraction_displacement = np.zeros(3)
        self.events: list[ExecutionEvent] = []
        self.elapsed_s = 0.0
        self.max_push_mm = float(max_push_mm)
        self.instrument_y = unit(np.asarray(instrument_y, dtype=float))
        self.per_phase_cuts = {p.value: 0 for p in Phase if p != Phase.COMPLETE}
        self.per_phase_retractions = {p.value: 0 for p in Phase if p != Phase.COMPLETE}
        self.capsule_strike_voxels = 0
        self._bed_mask = self._compute_bed_mask()

    # -- derived geometry ---------------------------------------------------

    def _voxel_centers(self, index_array: np.ndarray) -> np.ndarray:
        return self.volume.origin + (index_array + 0.5) * self.volume.pitch

    def _compute_bed_mask(self) -> np.ndarray:
        """Static anchor region: lateral-lobe tissue (never targeted) and
        median tissue on the capsule side of the margin surface."""
        fit = self.plan.capsule_fit
        labels = self.volume.labels
        bed = np.isin(labels, [int(VoxelLabel.LEFT_LOBE), int(VoxelLabel.RIGHT_LOBE)])
        idx = np.argwhere(labels == int(VoxelLabel.MEDIAN_LOBE))
        if len(idx):
            centers = self._voxel_centers(idx)
            below = fit.height_above_margin(centers) < 0.0
            bed[tuple(idx[below].T)] = True
        return bed

    def phase_trajectories(self) -> list[CutTrajectory]:
        if self.phase == Phase.COMPLETE:
            return []
        return self.plan.phase_trajectories(_CUT_PHASE[self.phase])

    def phase_cut_bounds(self) -> tuple[int, int]:
        members = self.phase_trajectories()
        if not members:
            return (self.next_cut_index, self.next_cut_index)
        indices = [t.global_index for t in members]
        return (min(indices), max(indices) + 1)

    def cuts_done_in_phase(self) -> int:
        lo, hi = self.phase_cut_bounds()
        return int(np.clip(self.next_cut_index - lo, 0, hi - lo))

    def phase_complete(self) -> bool:
        _, hi = self.phase_cut_bounds()
        return self.next_cut_index >= hi

    def median_centroid_offset_scope(self) -> np.ndarray:
        axis = self.plan.axis
        mask = self.volume.labels == int(VoxelLabel.MEDIAN_LOBE)
        idx = np.argwhere(mask)
        if len(idx) == 0:
            return np.zeros(3)
        centroid = self._voxel_centers(idx).mean(axis=0) + self.retraction_displacement
        rel = centroid - axis.point
        along = rel @ axis.direction
        y_dir = unit(self.instrument_y - (self.instrument_y @ axis.direction) * axis.direction)
        x_dir = np.cross(y_dir, axis.direction)
        lateral = rel - along * axis.direction
        return np.array([along, lateral @ x_dir, lateral @ y_dir])

    def scene_inputs(self) -> SceneInputs:
        lo, hi = self.phase_cut_bounds()
        return SceneInputs(
            phase=self.phase.value,
            cuts_done_in_phase=self.cuts_done_in_phase(),
            cuts_total_in_phase=hi - lo,
            median_offset_scope=self.median_centroid_offset_scope(),
            retraction_magnitude=float(np.linalg.norm(self.retraction_displacement)),
        )

    def log(self, kind: str, payload: dict) -> ExecutionEvent:
        event = ExecutionEvent(timestamp_s=self.elapsed_s, kind=kind, payload=payload)
        self.events.append(event)
        return event


def _sweep_remove(
    state: ProcedureState, polyline: np.ndarray, radius: float
) -> tuple[int, int]:
    """Remove lobe voxels within `radius` of the polyline; median-lobe
    voxels are tested at their retraction-displaced positions. Returns
    (voxels removed, capsule voxels struck)."""
    volume = state.volume
    labels = volume.labels
    pitch = volume.pitch
    removed = 0
    struck = 0
    displacement = state.retraction_displacement
    for a, b in zip(polyline[:-1], polyline[1:]):
        for shifted, target_labels in (
            (False, (VoxelLabel.LEFT_LOBE, VoxelLabel.RIGHT_LOBE, VoxelLabel.CAPSULE)),
            (True, (VoxelLabel.MEDIAN_LOBE,)),
        ):
            a_eff = a - displacement if shifted else a
            b_eff = b - displacement if shifted else b
            lo = np.minimum(a_eff, b_eff) - radius - pitch
            hi = np.maximum(a_eff, b_eff) + radius + pitch
            i_lo = np.maximum(volume.world_to_index(lo)[0], 0)
            i_hi = np.minimum(volume.world_to_index(hi)[0] + 1, np.array(labels.shape))
            if np.any(i_lo >= i_hi):
                continue
            sub = labels[i_lo[0]:i_hi[0], i_lo[1]:i_hi[1], i_lo[2]:i_hi[2]]
            mask = np.isin(sub, [int(l) for l in target_labels])
            if not mask.any():
                continue
            idx = np.argwhere(mask)
            centers = volume.origin + (idx + i_lo + 0.5) * pitch
            seg = b_eff - a_eff
            denom = float(seg @ seg)
            if denom < 1e-12:
                dist = np.linalg.norm(centers - a_eff, axis=1)
            else:
                t = np.clip((centers - a_eff) @ seg / denom, 0.0, 1.0)
                dist = np.linalg.norm(centers - a_eff - t[:, None] * seg[None, :], axis=1)
            hit = dist <= radius
            if not hit.any():
                continue
            hit_idx = idx[hit]
            hit_labels = sub[tuple(hit_idx.T)]
            capsule_hits = hit_labels == int(VoxelLabel.CAPSULE)
            struck += int(capsule_hits.sum())
            to_remove = hit_idx[~capsule_hits]
            if len(to_remove):
                sub_view = sub
                sub_view[tuple(to_remove.T)] = int(VoxelLabel.REMOVED)
                removed += len(to_remove)
    return removed, struck


def _evacuate_free_tissue(state: ProcedureState) -> ExecutionEvent | None:
    """Relabel tissue fragments with no 6-connected path to the bed."""
    labels = state.volume.labels
    tissue = np.isin(labels, [int(l) for l in LOBE_VOXEL_LABELS])
    if not tissue.any():
        return None
    structure = ndimage.generate_binary_structure(3, 1)
    components, n = ndimage.label(tissue, structure=structure)
    if n == 0:
        return None
    anchored = np.unique(components[tissue & state._bed_mask])
    anchored = anchored[anchored > 0]
    free = tissue & ~np.isin(components, anchored)
    count = int(free.sum())
    if count == 0:
        return None
    freed_median = int(np.sum(labels[free] == int(VoxelLabel.MEDIAN_LOBE)))
    labels[free] = int(VoxelLabel.REMOVED)
    return state.log("evacuation", {
        "voxels": count,
        "volume_mm3": count * state.volume.pitch**3,
        "median_voxels": freed_median,
    })


def executed_path(state: ProcedureState, waypoints: np.ndarray) -> np.ndarray:
    """Planned waypoints mapped through registration and execution error
    into the phantom frame."""
    path = waypoints
    if state.registration is not None:
        effective = state.true_transform.inverse().compose(state.registration.transform)
        path = effective.apply(path)
    if state.exec_noise_mm > 0:
        noise = state.rng.normal(
            scale=state.exec_noise_mm / np.sqrt(3.0), size=path.shape
        )
        path = path + noise
    return path


def execute_cut(
    state: ProcedureState,
    electrode_radius: float = DEFAULT_ELECTRODE_RADIUS,
) -> ExecutionEvent:
    """Execute the next planned trajectory of the current phase."""
    if state.phase == Phase.COMPLETE:
        raise ValidationError("procedure complete; no cuts remain")
    if state.phase_complete():
        raise PhaseCompleteSignal(f"{state.phase.value}: all cuts executed")
    trajectory = state.plan.trajectories[state.next_cut_index]
    if trajectory.phase != _CUT_PHASE[state.phase]:
        raise ValidationError(
            f"next cut {trajectory.global_index} belongs to {trajectory.phase.value}, "
            f"not {state.phase.value}"
        )
    path = executed_path(state, trajectory.waypoints)
    cutting = path[trajectory.kinds == int(WaypointKind.CUTTING)]
    removed, struck = _sweep_remove(state, cutting, electrode_radius)
    length = float(np.sum(np.linalg.norm(np.diff(path, axis=0), axis=1)))
    state.elapsed_s += length / trajectory.velocity_mm_s
    state.next_cut_index += 1
    state.current_group_id = trajectory.group_id
    state.per_phase_cuts[state.phase.value] += 1
    state.capsule_strike_voxels += struck
    # Tissue relaxes after each cut.
    state.retraction_displacement = state.retraction_displacement * RETRACTION_DECAY
    event = state.log("cut_executed", {
        "global_index": trajectory.global_index,
        "phase": state.phase.value,
        "group_id": trajectory.group_id,
        "removed_voxels": removed,
        "capsule_strikes": struck,
        "path_length_mm": length,
        "duration_s": length / trajectory.velocity_mm_s,
    })
    if struck:
        state.log("warning", {"reason": "capsule_strike", "voxels": struck,
                              "global_index": trajectory.global_index})
    if removed and state.phase == Phase.MEDIAN_DISSECTION:
        _evacuate_free_tissue(state)
    return event


def force_cut(
    state: ProcedureState,
    waypoints,
    velocity_mm_s: float = 5.0,
    electrode_radius: float = DEFAULT_ELECTRODE_RADIUS,
) -> ExecutionEvent:
    """Operator-issued teleoperated cut along explicit waypoints (used to
    sever residual tissue strings); bypasses plan bookkeeping."""
    path = np.asarray(waypoints, dtype=float).reshape(-1, 3)
    if len(path) < 2:
        raise ValidationError("force_cut needs at least 2 waypoints")
    removed, struck = _sweep_remove(state, path, electrode_radius)
    length = float(np.sum(np.linalg.norm(np.diff(path, axis=0), axis=1)))
    state.elapsed_s += length / velocity_mm_s
    state.capsule_strike_voxels += struck
    event = state.log("cut_executed", {
        "forced": True,
        "phase": state.phase.value,
        "removed_voxels": removed,
        "capsule_strikes": struck,
        "path_length_mm": length,
        "duration_s": length / velocity_mm_s,
    })
    _evacuate_free_tissue(state)
    return event


def apply_retraction(
    state: ProcedureState, action: PushAction, stiffness: float = 1.0
) -> ExecutionEvent:
    """Displace the median lobe's effective position toward the push vector,
    saturating at the maximum push length."""
    if action.length > state.max_push_mm + 1e-9:
        raise ValidationError(
            f"push of {action.length:.1f}mm exceeds the {state.max_push_mm:.0f}mm bound"
        )
    new_displacement = state.retraction_displacement + stiffness * action.vector
    magnitude = float(np.linalg.norm(new_displacement))
    if magnitude > state.max_push_mm:
        new_displacement = new_displacement * (state.max_push_mm / magnitude)
    state.retraction_displacement = new_displacement
    state.per_phase_retractions[state.phase.value] += 1
    return state.log("retraction_executed", {
        "start": action.start.tolist(),
        "end": action.end.tolist(),
        "displacement": state.retraction_displacement.tolist(),
        "magnitude": float(np.linalg.norm(state.retraction_displacement)),
    })


def advance_phase(state: ProcedureState, force: bool = False) -> ExecutionEvent:
    """Move to the next phase; forward only. Forcing past unexecuted cuts is
    allowed but logged as a warning."""
    if state.phase == Phase.COMPLETE:
        raise ValidationError("cannot advance past complete")
    remaining = 0
    if not state.phase_complete():
        _, hi = state.phase_cut_bounds()
        remaining = hi - state.next_cut_index
        if not force:
            raise ValidationError(
                f"{remaining} cuts remain in {state.phase.value}; force to skip"
            )
        state.log("warning", {
            "reason": "forced_phase_advance",
            "skipped_cuts": remaining,
            "phase": state.phase.value,
        })
    _evacuate_free_tissue(state)
    old = state.phase
    state.phase = PHASE_SEQUENCE[PHASE_SEQUENCE.index(state.phase) + 1]
    state.retraction_displacement = np.zeros(3)
    if state.phase != Phase.COMPLETE:
        lo, _ = state.phase_cut_bounds()
        state.next_cut_index = max(state.next_cut_index, lo)
    return state.log("phase_advanced", {
        "from": old.value, "to": state.phase.value, "skipped_cuts": remaining,
    })


def record_fine_tune(state: ProcedureState, result: RegistrationResult,
                     correction) -> ExecutionEvent:
    state.registration = result
    return state.log("fine_tune_applied", {
        "correction": np.asarray(correction, dtype=float).tolist(),
    })


def find_bridged_waterline_regions(state: ProcedureState, max_regions: int = 8):
    """Locate residual tissue strings: median tissue above the margin
    surface still 6-connected to the bed. Returns per-string bounding boxes
    (u_lo, u_hi, v_lo, v_hi) in the capsule-fit frame, where the string
    crosses the margin surface.
    """
    fit = state.plan.capsule_fit
    labels = state.volume.labels
    tissue = np.isin(labels, [int(l) for l in LOBE_VOXEL_LABELS])
    if not tissue.any():
        return []
    structure = ndimage.generate_binary_structure(3, 1)
    comp, _ = ndimage.label(tissue, structure=structure)
    med_idx = np.argwhere(labels == int(VoxelLabel.MEDIAN_LOBE))
    if len(med_idx) == 0:
        return []
    centers = state._voxel_centers(med_idx)
    height = fit.height_above_margin(centers)
    above = height > 0.5
    if not above.any():
        return []
    anchored = np.unique(comp[tissue & state._bed_mask])
    anchored = anchored[anchored > 0]
    dome_comps = np.unique(comp[tuple(med_idx[above].T)])
    bridged = np.intersect1d(dome_comps, anchored)
    if len(bridged) == 0:
        return []
    # The string is wherever bridged tissue crosses the margin surface:
    # adjacent voxel pairs with heights of opposite sign.
    hgrid = np.full(labels.shape, np.nan)
    hgrid[tuple(med_idx.T)] = height
    in_bridged = np.zeros(labels.shape, dtype=bool)
    in_bridged[tuple(med_idx.T)] = np.isin(comp[tuple(med_idx.T)], bridged)
    crossing = np.zeros(labels.shape, dtype=bool)
    for ax in range(3):
        for shift in (1, -1):
            neighbor_h = np.roll(hgrid, shift, axis=ax)
            neighbor_b = np.roll(in_bridged, shift, axis=ax)
            pair = in_bridged & neighbor_b & (hgrid >= 0) & (neighbor_h < 0)
            crossing |= pair | np.roll(pair, -shift, axis=ax)
    waterline = crossing[tuple(med_idx.T)]
    if not waterline.any():
        # No sharp crossing found; fall back to the near-surface band.
        waterline = (np.abs(height) <= 1.0) & np.isin(comp[tuple(med_idx.T)], bridged)
    if not waterline.any():
        waterline = np.isin(comp[tuple(med_idx.T)], bridged)
    spots = centers[waterline]
    coords = fit.frame.to_frame(spots)
    # Group crossing spots into separate strings by 2D proximity.
    order = np.argsort(coords[:, 0], kind="stable")
    coords = coords[order]
    regions: list[tuple[float, float, float, float]] = []
    used = np.zeros(len(coords), dtype=bool)
    for i in range(len(coords)):
        if used[i] or len(regions) >= max_regions:
            continue
        group = [i]
        used[i] = True
        for j in range(len(coords)):
            if used[j]:
                continue
            if (abs(coords[j, 0] - coords[i, 0]) < 6.0
                    and abs(coords[j, 1] - coords[i, 1]) < 6.0):
                group.append(j)
                used[j] = True
        sel = coords[group]
        regions.append((
            float(sel[:, 0].min()), float(sel[:, 0].max()),
            float(sel[:, 1].min()), float(sel[:, 1].max()),
        ))
    return regions


def bridge_patch_waypoints(
    state: ProcedureState, region, pad: float = 1.5,
    station_spacing: float = 0.4, waypoint_spacing: float = 1.0,
) -> np.ndarray:
    """Serpentine sweep over a waterline region at the margin surface, used
    as a teleoperated finishing cut for a residual string."""
    fit = state.plan.capsule_fit
    u_lo, u_hi, v_lo, v_hi = region
    points = []
    stations = np.arange(u_lo - pad, u_hi + pad + station_spacing / 2, station_spacing)
    for si, u in enumerate(stations):
        v_line = np.arange(v_lo - pad, v_hi + pad + waypoint_spacing / 2, waypoint_spacing)
        w_line = fit.margin_w(np.full_like(v_line, u), v_line)
        world = fit.frame.to_world(
            np.stack([np.full_like(v_line, u), v_line, w_line], axis=1)
        )
        keep = fit.in_corridor(world) & fit.in_support(world)
        world = world[keep]
        if len(world) == 0:
            continue
        if si % 2 == 1:
            world = world[::-1]
        points.append(world)
    if not points:
        return np.empty((0, 3))
    return np.vstack(points)


def compute_metrics(
    preop: VoxelVolume,
    postop: VoxelVolume,
    plan: CutPlan,
    state: ProcedureState | None = None,
) -> MetricsReport:
    """Volume accounting against the margin-raised capsule surface."""
    if not preop.same_grid(postop):
        raise ValidationError("pre- and post-operative volumes must share a grid")
    pitch3 = preop.pitch**3
    median = int(VoxelLabel.MEDIAN_LOBE)
    preop_count = preop.count(VoxelLabel.MEDIAN_LOBE)
    if preop_count == 0:
        raise ValidationError("preoperative volume has no median lobe")
    fit = plan.capsule_fit
    idx = np.argwhere(preop.labels == median)
    centers = preop.origin + (idx + 0.5) * preop.pitch
    untargeted = (fit.height_above_margin(centers) < 0.0) | (~fit.in_corridor(centers))
    target_residual_cm3 = float(untargeted.sum()) * pitch3 / 1000.0
    preop_cm3 = preop_count * pitch3 / 1000.0
    actual_residual_cm3 = postop.count(VoxelLabel.MEDIAN_LOBE) * pitch3 / 1000.0
    pct_removal, pct_targeted, ratio = metrics_from_volumes(
        preop_cm3, actual_residual_cm3, target_residual_cm3
    )
    # Capsule voxels are never relabeled by cuts; any count change would be
    # a simulator defect, not resection.
    capsule_removed = preop.count(VoxelLabel.CAPSULE) - postop.count(VoxelLabel.CAPSULE)
    return MetricsReport(
        preop_median_cm3=preop_cm3,
        target_residual_cm3=target_residual_cm3,
        actual_residual_cm3=actual_residual_cm3,
        percent_removal=pct_removal,
        targeted_percent_removal=pct_targeted,
        percent_of_targeted=ratio,
        capsule_voxels_removed=int(capsule_removed),
        capsule_strike_voxels=state.capsule_strike_voxels if state else 0,
        per_phase_cuts=dict(state.per_phase_cuts) if state else {},
        per_phase_retractions=dict(state.per_phase_retractions) if state else {},
        simulated_duration_s=state.elapsed_s if state else 0.0,
    )
