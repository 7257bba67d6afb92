import json

import numpy as np
import pytest

from lobesim.anatomy import (
    CapsuleFit,
    ChannelAxis,
    Trough,
    TroughLabel,
    TroughSet,
    UVWFrame,
    fit_capsule_surface,
    find_channel_axis,
    find_troughs,
)
from lobesim.cutplan import (
    CutPhase,
    CutPlan,
    CutTrajectory,
    PHASE_ORDER,
    WaypointKind,
    group_cuts,
    plan_median_cuts,
    plan_resection,
    plan_trough_cuts,
)
from lobesim.errors import UnreachableCutError, ValidationError
from lobesim.phantom import CloudLabel, LabeledPointCloud

from oracles import polyline_distance
from simhelpers import flat_fit


@pytest.fixture(scope="module")
def planned(plan_bundle):
    return plan_bundle


def synthetic_trough(depth: float = 5.0, n: int = 40, length: float = 30.0):
    """Band of lobe points at constant depth below the axis, plus the trough
    descriptor whose plane is the xz-plane."""
    xs = np.linspace(0.0, length, n)
    pts = np.stack([xs, np.zeros(n), np.full(n, -depth)], axis=1)
    cloud = LabeledPointCloud(
        points=pts, labels=np.full(n, int(CloudLabel.MEDIAN_LOBE), dtype=np.uint8)
    )
    trough = Trough(
        label=TroughLabel.LEFT,
        line_point=np.array([length / 2, 0.0, -depth]),
        line_direction=np.array([1.0, 0.0, 0.0]),
        members=pts.copy(),
        plane_point=np.array([length / 2, 0.0, -depth]),
        plane_normal=np.array([0.0, 1.0, 0.0]),
    )
    axis = ChannelAxis(point=np.zeros(3), direction=[1.0, 0.0, 0.0], clearance=3.0)
    return cloud, axis, trough


class TestTroughCuts:
    def test_ten_mm_gap_gives_six_layers(self):
        # Surface track 5mm deep, capsule floor 15mm deep: surface + 4
        # intermediates at 2mm + capsule track.
        cloud, axis, trough = synthetic_trough(depth=5.0)
        fit = flat_fit(floor_w=-15.0)
        cuts, warnings = plan_trough_cuts(cloud, axis, trough, fit, layer_spacing=2.0)
        assert len(cuts) == 6
        assert [t.layer_index for t in cuts] == list(range(6))
        assert warnings == []
        depths = [-t.cutting_waypoints[:, 2].mean() for t in cuts]
        assert np.allclose(depths, [5, 7, 9, 11, 13, 15], atol=0.05)

    def test_zero_gap_single_layer(self):
        cloud, axis, trough = synthetic_trough(depth=15.0)
        fit = flat_fit(floor_w=-15.0)
        cuts, _ = plan_trough_cuts(cloud, axis, trough, fit)
        assert len(cuts) == 1

    def test_exact_endpoint_layers(self):
        cloud, axis, trough = synthetic_trough(depth=5.0)
        fit = flat_fit(floor_w=-15.0)
        cuts, _ = plan_trough_cuts(cloud, axis, trough, fit)
        surface = cuts[0].cutting_waypoints
        capsule = cuts[-1].cutting_waypoints
        assert np.max(np.abs(surface[:, 2] + 5.0)) <= 0.1
        assert np.max(np.abs(capsule[:, 2] + 15.0)) <= 0.1

    def test_reach_in_waypoints(self):
        cloud, axis, trough = synthetic_trough(depth=5.0)
        cuts, _ = plan_trough_cuts(cloud, axis, trough, flat_fit(-15.0))
        for t in cuts:
            assert list(t.kinds[:2]) == [int(WaypointKind.REACH_IN)] * 2
            first_cut = t.waypoints[2]
            assert np.allclose(t.waypoints[0], first_cut - 5.0 * axis.direction)
            assert np.allclose(t.waypoints[1], first_cut - 2.0 * axis.direction)

    def test_waypoints_respect_margin_against_implicit(self, planned):
        # Every trough cutting waypoint at least margin - 0.5mm from the
        # true capsule wall, checked on the phantom implicit.
        model, _, _, fit, plan = planned
        for phase in (CutPhase.LEFT_TROUGH, CutPhase.RIGHT_TROUGH):
            waypoints = np.vstack(
                [t.cutting_waypoints for t in plan.phase_trajectories(phase)]
            )
            gaps = model.capsule_inward_gap(waypoints)
            assert gaps.min() >= fit.margin - 0.5

    def test_empty_band_raises(self):
        cloud, axis, trough = synthetic_trough(depth=5.0)
        far = LabeledPointCloud(
            points=cloud.points + np.array([0.0, 30.0, 0.0]),
            labels=cloud.labels.copy(),
        )
        with pytest.raises(ValidationError, match="no lobe points near trough"):
            plan_trough_cuts(far, axis, trough, flat_fit(-15.0))

    def test_top_center_rejected(self):
        cloud, axis, trough = synthetic_trough()
        bad = Trough(
            label=TroughLabel.TOP_CENTER,
            line_point=trough.line_point,
            line_direction=trough.line_direction,
            members=trough.members,
            plane_point=trough.plane_point,
            plane_normal=trough.plane_normal,
        )
        with pytest.raises(ValidationError):
            plan_trough_cuts(cloud, axis, bad, flat_fit(-15.0))


class TestMedianCuts:
    def test_final_layer_on_margin_grid(self, planned):
        _, _, _, fit, plan = planned
        med = plan.phase_trajectories(CutPhase.MEDIAN_DISSECTION)
        final = max(t.layer_index for t in med)
        pts = np.vstack([t.cutting_waypoints for t in med if t.layer_index == final])
        assert np.max(np.abs(fit.height_above_margin(pts))) <= 0.5

    def test_degenerate_depth_single_layer(self, planned):
        # Median points barely above the margin surface: only the capsule
        # sheet is emitted.
        _, axis, troughs, _, _ = planned
        fit = flat_fit(floor_w=-15.0, margin=1.0)
        rng = np.random.default_rng(0)
        pts = np.stack([
            rng.uniform(5, 25, 300),
            rng.uniform(-8, 8, 300),
            np.full(300, -13.2),
        ], axis=1)
        cloud = LabeledPointCloud(
            points=pts, labels=np.full(300, int(CloudLabel.MEDIAN_LOBE), dtype=np.uint8)
        )
        cuts, warnings = plan_median_cuts(cloud, axis, fit, troughs, layer_spacing=2.0)
        layers = {t.layer_index for t in cuts}
        assert layers == {0}
        assert all(np.max(np.abs(fit.height_above_margin(t.cutting_waypoints))) < 0.01
                   for t in cuts)
        assert any("capsule sheet only" in w for w in warnings)

    def test_cuts_between_trough_planes(self, planned):
        _, _, _, fit, plan = planned
        for t in plan.phase_trajectories(CutPhase.MEDIAN_DISSECTION):
            assert fit.in_corridor(t.cutting_waypoints).all()

    def test_missing_median_raises(self, planned):
        _, axis, troughs, fit, _ = planned
        cloud = LabeledPointCloud(
            points=np.random.default_rng(0).normal(size=(50, 3)),
            labels=np.zeros(50, dtype=np.uint8),
        )
        with pytest.raises(ValidationError, match="median lobe absent"):
            plan_median_cuts(cloud, axis, fit, troughs)


def straight_cut(u_start, u_end, phase, layer=0, offset=(0.0, 5.0, 0.0), spacing=1.5):
    n = max(2, int(abs(u_end - u_start) / spacing) + 1)
    xs = np.linspace(u_start, u_end, n)
    cuts = np.stack([xs, np.full(n, offset[1]), np.full(n, offset[2])], axis=1)
    reach = np.array([cuts[0] - [5, 0, 0], cuts[0] - [2, 0, 0]])
    return CutTrajectory(
        waypoints=np.vstack([reach, cuts]),
        kinds=np.concatenate([np.zeros(2, dtype=np.uint8), np.ones(n, dtype=np.uint8)]),
        phase=phase,
        layer_index=layer,
    )


class TestGrouping:
    AXIS = ChannelAxis(point=np.zeros(3), direction=[1.0, 0.0, 0.0], clearance=3.0)

    def test_compact_cuts_one_group_per_phase(self):
        trajectories = [
            straight_cut(0, 20, phase, layer=k)
            for phase in PHASE_ORDER
            for k in range(3)
        ]
        plan = group_cuts(trajectories, self.AXIS)
        assert len(plan.groups) == 3
        for phase in PHASE_ORDER:
            assert len({t.group_id for t in plan.phase_trajectories(phase)}) == 1

    def test_seventy_mm_extent_two_or_three_groups(self):
        trajectories = [
            straight_cut(0, 70, CutPhase.LEFT_TROUGH, layer=k) for k in range(3)
        ]
        plan = group_cuts(trajectories, self.AXIS, workspace_diameter=40.0, overlap=5.0)
        n_groups = len(plan.groups)
        assert 2 <= n_groups <= 3
        for g in plan.groups:
            cuts = np.vstack(
                [t.cutting_waypoints for t in plan.trajectories if t.group_id == g.group_id]
            )
            assert np.linalg.norm(cuts - g.work_center, axis=1).max() <= 20.0

    def test_unreachable_two_point_cut(self):
        cuts = np.array([[0.0, 0.0, 0.0], [55.0, 0.0, 0.0]])
        reach = np.array([[-5.0, 0, 0], [-2.0, 0, 0]])
        t = CutTrajectory(
            waypoints=np.vstack([reach, cuts]),
            kinds=np.array([0, 0, 1, 1], dtype=np.uint8),
            phase=CutPhase.LEFT_TROUGH,
            layer_index=0,
        )
        with pytest.raises(UnreachableCutError):
            group_cuts([t], self.AXIS)

    def test_global_indices_are_permutation(self, planned):
        _, _, _, _, plan = planned
        indices = [t.global_index for t in plan.trajectories]
        assert sorted(indices) == list(range(len(indices)))
        assert indices == list(range(len(indices)))

    def test_order_monotone_in_phase_group_layer(self, planned):
        _, axis, _, _, plan = planned
        phase_rank = {p: i for i, p in enumerate(PHASE_ORDER)}
        group_order = {}
        for t in plan.trajectories:
            group_order.setdefault(t.group_id, len(group_order))
        keys = [
            (phase_rank[t.phase], group_order[t.group_id], t.layer_index)
            for t in plan.trajectories
        ]
        assert keys == sorted(keys)

    def test_groups_fit_workspace_spheres(self, planned):
        _, _, _, _, plan = planned
        for g in plan.groups:
            cuts = np.vstack(
                [t.cutting_waypoints for t in plan.trajectories if t.group_id == g.group_id]
            )
            assert np.linalg.norm(cuts - g.work_center, axis=1).max() <= 20.0 + 1e-9

    def test_scope_pose_on_axis(self, planned):
        _, axis, _, _, plan = planned
        for g in plan.groups:
            rel = g.scope_point - axis.point
            lateral = rel - (rel @ axis.direction) * axis.direction
            assert np.linalg.norm(lateral) < 1e-9
            assert np.allclose(g.scope_direction, axis.direction)


class TestPlanStructure:
    def test_waypoint_spacing_bound(self, planned):
        _, _, _, _, plan = planned
        spacing = plan.config["waypoint_spacing_mm"]
        for t in plan.trajectories:
            cuts = t.cutting_waypoints
            gaps = np.linalg.norm(np.diff(cuts, axis=0), axis=1)
            assert gaps.max() <= spacing * 1.1

    def test_layer_spacing_between_intermediate_layers(self, planned):
        # 2mm +/- 0.2 between consecutive interpolated layers, measured at
        # matched stations (point to neighboring polyline).
        _, _, _, _, plan = planned
        for phase in (CutPhase.LEFT_TROUGH, CutPhase.RIGHT_TROUGH):
            members = plan.phase_trajectories(phase)
            final = max(t.layer_index for t in members)
            by_layer = {}
            for t in members:
                by_layer.setdefault(t.layer_index, []).append(t)
            for layer in range(0, final - 1):
                if layer not in by_layer or layer + 1 not in by_layer:
                    continue
                upper = np.vstack([t.cutting_waypoints for t in by_layer[layer]])
                lower = np.vstack([t.cutting_waypoints for t in by_layer[layer + 1]])
                d = polyline_distance(lower, upper)
                assert np.all(d >= 1.8) and np.all(d <= 2.2), (
                    f"{phase.value} layers {layer}->{layer + 1}: "
                    f"{d.min():.2f}..{d.max():.2f}"
                )

    def test_plan_deterministic(self, planner_cloud):
        def build():
            axis = find_channel_axis(planner_cloud, seed=0)
            troughs = find_troughs(planner_cloud, axis, instrument_y=[0, 0, 1.0], seed=0)
            fit = fit_capsule_surface(planner_cloud, axis, troughs, margin=1.0)
            return plan_resection(planner_cloud, axis, troughs, fit).to_json()

        assert build() == build()

    def test_json_roundtrip(self, planned):
        _, _, _, _, plan = planned
        restored = CutPlan.from_json(plan.to_json())
        assert len(restored.trajectories) == len(plan.trajectories)
        for a, b in zip(plan.trajectories, restored.trajectories):
            assert np.allclose(a.waypoints, b.waypoints)
            assert np.array_equal(a.kinds, b.kinds)
            assert a.phase == b.phase and a.global_index == b.global_index
        assert len(restored.groups) == len(plan.groups)

    def test_json_schema_fields(self, planned):
        _, _, _, _, plan = planned
        doc = json.loads(plan.to_json())
        assert list(doc.keys()) == [
            "version", "config", "axis", "capsule_fit", "warnings", "phases"
        ]
        for phase_entry in doc["phases"]:
            assert set(phase_entry.keys()) == {"phase", "groups"}
            for group in phase_entry["groups"]:
                assert set(group.keys()) == {"group_id", "scope_pose", "cuts"}
                for cut in group["cuts"]:
                    assert set(cut.keys()) == {
                        "global_index", "layer", "velocity_mm_s", "waypoints"
                    }
                    for wp in cut["waypoints"]:
                        assert set(wp.keys()) == {"kind", "x", "y", "z"}
