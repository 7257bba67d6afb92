import numpy as np
import pytest
from scipy.spatial import cKDTree

from lobesim.anatomy import (
    CapsuleFit,
    ChannelAxis,
    Trough,
    TroughLabel,
    TroughSet,
    find_channel_axis,
    find_troughs,
    fit_capsule_surface,
    _polynomial_exponents,
)
from lobesim.errors import (
    ChannelNotFoundError,
    IllConditionedFitError,
    TroughDetectionError,
    ValidationError,
)
from lobesim.geometry import angle_between_deg, unit
from lobesim.phantom import CloudLabel, LabeledPointCloud

from oracles import rotation_about_axis


@pytest.fixture(scope="module")
def pipeline(default_phantom, planner_cloud):
    _, _, model = default_phantom
    axis = find_channel_axis(planner_cloud, seed=0)
    troughs = find_troughs(planner_cloud, axis, instrument_y=[0.0, 0.0, 1.0], seed=0)
    return model, axis, troughs


def axis_errors(axis, truth):
    angle = min(
        angle_between_deg(axis.direction, truth.direction),
        angle_between_deg(-axis.direction, truth.direction),
    )
    rel = axis.point - truth.point
    lateral = np.linalg.norm(rel - (rel @ truth.direction) * truth.direction)
    return angle, float(lateral)


class TestChannelAxis:
    def test_recovers_ground_truth(self, pipeline):
        model, axis, _ = pipeline
        angle, lateral = axis_errors(axis, model.channel_truth)
        assert angle < 3.0
        assert lateral < 1.0

    def test_hollow_cylinder(self):
        # Capsule shell + a lobe sleeve around a known axis.
        rng = np.random.default_rng(3)
        n = 6000
        t = rng.uniform(-30, 30, n)
        ang = rng.uniform(0, 2 * np.pi, n)
        capsule = np.stack([t, 24 * np.cos(ang), 24 * np.sin(ang)], axis=1)
        keep = np.abs(capsule[:, 0]) < 29
        capsule = capsule[keep]
        t2 = rng.uniform(-28, 28, n)
        ang2 = rng.uniform(0, 2 * np.pi, n)
        sleeve = np.stack([t2, 5 * np.cos(ang2), 5 * np.sin(ang2)], axis=1)
        # End caps with a hole where the channel exits.
        caps = []
        for sign in (-1.0, 1.0):
            r = np.sqrt(rng.uniform((6.0 / 24) ** 2, 1.0, 2000)) * 24
            a = rng.uniform(0, 2 * np.pi, 2000)
            caps.append(np.stack([np.full(2000, sign * 30.0), r * np.cos(a), r * np.sin(a)], axis=1))
        points = np.vstack([capsule, *caps, sleeve])
        labels = np.concatenate([
            np.zeros(len(capsule) + 4000, dtype=np.uint8),
            np.full(len(sleeve), int(CloudLabel.MEDIAN_LOBE), dtype=np.uint8),
        ])
        cloud = LabeledPointCloud(points=points, labels=labels)
        axis = find_channel_axis(cloud, ray_count=8000, clearance=1.5, seed=1)
        angle = min(angle_between_deg(axis.direction, [1, 0, 0]),
                    angle_between_deg(-axis.direction, [1, 0, 0]))
        assert angle < 0.5

    def test_blocked_channel(self):
        rng = np.random.default_rng(5)
        dirs = rng.normal(size=(4000, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        shell = dirs * 25.0
        filler = rng.uniform(-20, 20, size=(4000, 3))
        points = np.vstack([shell, filler])
        labels = np.concatenate([
            np.zeros(4000, dtype=np.uint8),
            np.full(4000, int(CloudLabel.MEDIAN_LOBE), dtype=np.uint8),
        ])
        cloud = LabeledPointCloud(points=points, labels=labels)
        with pytest.raises(ChannelNotFoundError):
            find_channel_axis(cloud, ray_count=2000, seed=2)

    def test_missing_labels(self):
        cloud = LabeledPointCloud(
            points=np.random.default_rng(0).normal(size=(100, 3)),
            labels=np.zeros(100, dtype=np.uint8),
        )
        with pytest.raises(ValidationError):
            find_channel_axis(cloud, ray_count=500)

    def test_refinement_does_not_reduce_clearance(self, pipeline, planner_cloud):
        _, axis, _ = pipeline
        from lobesim.phantom import LOBE_CLOUD_LABELS

        lobes = planner_cloud.select(*LOBE_CLOUD_LABELS)
        capsule = planner_cloud.select(CloudLabel.CAPSULE)
        centroid = capsule.mean(axis=0)
        # Clearance of the unrefined axis (anchored at the capsule centroid).
        rel = lobes - centroid
        along = rel @ axis.direction
        unrefined = float(np.linalg.norm(rel - along[:, None] * axis.direction[None, :], axis=1).min())
        assert axis.clearance >= unrefined - 1e-9


def exact_lobe_boundaries(model, pitch=0.4):
    """Boundary samples of the exact lobe solids (independent of the
    production cloud): fine-grid voxelization, keep inside cells with an
    outside 6-neighbor."""
    boundaries = {}
    for i, lobe in enumerate(model.spec.lobes):
        center = np.asarray(lobe.center_offset, dtype=float)
        reach = float(max(lobe.semi_axes)) + 2.0
        axes = [np.arange(center[k] - reach, center[k] + reach + pitch, pitch) for k in range(3)]
        shape = tuple(len(a) for a in axes)
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
        inside = model.lobe_inside(i, grid).reshape(shape)
        boundary = np.zeros_like(inside)
        for ax in range(3):
            shifted = np.roll(inside, 1, axis=ax)
            shifted2 = np.roll(inside, -1, axis=ax)
            boundary |= inside & (~shifted | ~shifted2)
        boundaries[int(lobe.label)] = grid.reshape(*shape, 3)[boundary]
    return boundaries


def ground_truth_crevices(model, clearance=1.25):
    """Crevice curve samples from the exact solids: radial profile of first
    surface approach per station, deepest hit flanking each label change."""
    truth = model.channel_truth
    u = truth.direction
    boundaries = exact_lobe_boundaries(model)
    trees = {lbl: cKDTree(pts) for lbl, pts in boundaries.items()}
    e1 = unit(np.array([0.0, 0.0, -1.0]) - (np.array([0.0, 0.0, -1.0]) @ u) * u)
    e2 = np.cross(u, e1)
    theta = np.linspace(-np.pi, np.pi, 720, endpoint=False)
    dirs = np.cos(theta)[:, None] * e1[None, :] + np.sin(theta)[:, None] * e2[None, :]
    radii = np.arange(clearance / 2, 30.0, clearance / 2)
    curves = {"left_like": [], "right_like": [], "top_like": []}
    pair_to_curve = {
        frozenset({int(CloudLabel.MEDIAN_LOBE), int(CloudLabel.LEFT_LOBE)}): "left_like",
        frozenset({int(CloudLabel.MEDIAN_LOBE), int(CloudLabel.RIGHT_LOBE)}): "right_like",
        frozenset({int(CloudLabel.LEFT_LOBE), int(CloudLabel.RIGHT_LOBE)}): "top_like",
    }
    for s in np.linspace(-10.0, 10.0, 11):
        origin = truth.point + s * u
        samples = (origin[None, None, :] + radii[None, :, None] * dirs[:, None, :]).reshape(-1, 3)
        hit_r = np.full(len(dirs), np.nan)
        hit_label = np.full(len(dirs), -1)
        for lbl, tree in trees.items():
            dist, _ = tree.query(samples, k=1, distance_upper_bound=clearance * (1 + 1e-9))
            hits = np.isfinite(dist).reshape(len(dirs), len(radii))
            has = hits.any(axis=1)
            first = np.argmax(hits, axis=1)
            r = radii[np.minimum(first, len(radii) - 1)]
            better = has & (np.isnan(hit_r) | (r < hit_r))
            hit_r[better] = r[better]
            hit_label[better] = lbl
        n = len(dirs)
        for k in range(n):
            a, b = k, (k + 1) % n
            la = hit_label[a]
            gap = 0
            while hit_label[b] < 0 and gap < 20:
                b = (b + 1) % n
                gap += 1
            lb = hit_label[b]
            if la < 0 or lb < 0 or la == lb:
                continue
            window = [(a - w) % n for w in range(0, 9)] + [(b + w) % n for w in range(0, 9)]
            window = [w for w in window if hit_label[w] >= 0]
            deepest = max(window, key=lambda w: hit_r[w])
            if hit_r[deepest] - np.nanmedian(hit_r[hit_label >= 0]) < 1.0:
                continue
            key = pair_to_curve.get(frozenset({int(la), int(lb)}))
            if key:
                curves[key].append(origin + hit_r[deepest] * dirs[deepest])
    return {k: np.asarray(v) for k, v in curves.items()}


def point_line_rms(points, line_point, line_dir):
    rel = points - line_point
    along = rel @ line_dir
    perp = rel - along[:, None] * line_dir[None, :]
    return float(np.sqrt(np.mean(np.sum(perp**2, axis=1))))


class TestTroughs:
    def test_lines_match_implicit_crevices(self, pipeline):
        model, axis, troughs = pipeline
        curves = ground_truth_crevices(model)
        for label, key in ((TroughLabel.LEFT, "left_like"),
                           (TroughLabel.RIGHT, "right_like"),
                           (TroughLabel.TOP_CENTER, "top_like")):
            trough = troughs.get(label)
            gt = curves[key]
            assert len(gt) >= 5
            rms = point_line_rms(gt, trough.line_point, trough.line_direction)
            assert rms < 2.0, f"{label}: {rms:.2f}mm"

    def test_line_direction_near_channel(self, pipeline):
        _, axis, troughs = pipeline
        for trough in troughs:
            assert trough.line_direction @ axis.direction > 0
            assert angle_between_deg(trough.line_direction, axis.direction) < 90

    def test_rotation_equivariance(self, planner_cloud, pipeline):
        _, axis, troughs = pipeline
        rot = rotation_about_axis(axis.direction, np.radians(30.0))
        rotated = LabeledPointCloud(
            points=planner_cloud.points @ rot.T,
            labels=planner_cloud.labels.copy(),
        )
        axis_r = ChannelAxis(
            point=rot @ axis.point, direction=rot @ axis.direction, clearance=axis.clearance
        )
        instrument_y = rot @ np.array([0.0, 0.0, 1.0])
        troughs_r = find_troughs(rotated, axis_r, instrument_y, seed=0)
        for label in TroughLabel:
            orig = troughs.get(label)
            new = troughs_r.get(label)
            # The labeled trough should be the rotated image of the original.
            assert np.linalg.norm(new.line_point - rot @ orig.line_point) < 2.5

    def test_two_lobe_cloud_fails(self, planner_cloud):
        labels = planner_cloud.labels.copy()
        labels[labels == int(CloudLabel.RIGHT_LOBE)] = int(CloudLabel.LEFT_LOBE)
        merged = LabeledPointCloud(points=planner_cloud.points.copy(), labels=labels)
        axis = find_channel_axis(merged, seed=0)
        with pytest.raises(TroughDetectionError):
            find_troughs(merged, axis, instrument_y=[0.0, 0.0, 1.0], seed=0)

    def test_instrument_y_parallel_to_axis(self, pipeline, planner_cloud):
        _, axis, _ = pipeline
        with pytest.raises(ValidationError):
            find_troughs(planner_cloud, axis, instrument_y=axis.direction, seed=0)


def synthetic_fit_setup(coeffs, degree=5, n_grid=30, noise=0.0, seed=0):
    """Capsule points exactly on a known polynomial in a trivial frame:
    axis along +x at z=+2, floor below (W = +z)."""
    rng = np.random.default_rng(seed)
    u = np.linspace(-1, 1, n_grid)
    v = np.linspace(-1, 1, n_grid)
    uu, vv = np.meshgrid(u, v, indexing="ij")
    un, vn = uu.ravel(), vv.ravel()
    cols = np.stack([un**i * vn**j for i, j in _polynomial_exponents(degree)], axis=1)
    w = cols @ np.asarray(coeffs, dtype=float)
    if noise:
        w = w + rng.normal(scale=noise, size=w.shape)
    capsule = np.stack([un, vn, w], axis=1)
    lobe = np.array([[0.0, 0.0, 1.5], [0.5, 0.0, 1.5], [-0.5, 0.0, 1.5], [0.0, 0.3, 1.5]])
    points = np.vstack([capsule, lobe])
    labels = np.concatenate([
        np.zeros(len(capsule), dtype=np.uint8),
        np.full(4, int(CloudLabel.MEDIAN_LOBE), dtype=np.uint8),
    ])
    cloud = LabeledPointCloud(points=points, labels=labels)
    axis = ChannelAxis(point=[0.0, 0.0, 2.0], direction=[1.0, 0.0, 0.0], clearance=1.0)

    def trough(label, y):
        return Trough(
            label=label,
            line_point=np.array([0.0, y, 0.0]),
            line_direction=np.array([1.0, 0.0, 0.0]),
            members=np.array([[0.0, y, 0.0], [1.0, y, 0.0]]),
            plane_point=np.array([0.0, y, 0.0]),
            plane_normal=np.array([0.0, 1.0, 0.0]),
        )

    troughs = TroughSet(
        top_center=trough(TroughLabel.TOP_CENTER, 0.0),
        left=trough(TroughLabel.LEFT, 1.02),
        right=trough(TroughLabel.RIGHT, -1.02),
    )
    return cloud, axis, troughs


class TestCapsuleFit:
    def test_exact_degree5_recovery(self):
        rng = np.random.default_rng(8)
        coeffs = rng.uniform(-0.4, 0.4, 21)
        cloud, axis, troughs = synthetic_fit_setup(coeffs)
        fit = fit_capsule_surface(cloud, axis, troughs, margin=0.0, degree=5)
        expected = np.asarray(coeffs, dtype=float).copy()
        expected[0] -= 2.0  # frame origin sits 2mm above the synthetic floor
        assert np.max(np.abs(fit.coefficients - expected)) < 1e-6
        assert fit.rms < 1e-6
        assert len(fit.coefficients) == 21

    def test_flat_plane(self):
        coeffs = np.zeros(21)
        coeffs[0] = 0.37
        cloud, axis, troughs = synthetic_fit_setup(coeffs)
        fit = fit_capsule_surface(cloud, axis, troughs, margin=0.0)
        assert fit.coefficients[0] == pytest.approx(0.37 - 2.0, abs=1e-9)
        assert np.max(np.abs(fit.coefficients[1:])) < 1e-8

    def test_margin_is_rigid_w_offset(self):
        rng = np.random.default_rng(9)
        coeffs = rng.uniform(-0.3, 0.3, 21)
        cloud, axis, troughs = synthetic_fit_setup(coeffs)
        fit0 = fit_capsule_surface(cloud, axis, troughs, margin=0.0)
        fit1 = fit_capsule_surface(cloud, axis, troughs, margin=1.0)
        u = np.linspace(-0.8, 0.8, 7)
        v = np.linspace(-0.8, 0.8, 7)
        uu, vv = np.meshgrid(u, v)
        w0 = fit0.margin_w(uu.ravel(), vv.ravel())
        w1 = fit1.margin_w(uu.ravel(), vv.ravel())
        assert np.allclose(w1 - w0, 1.0, atol=1e-12)
        p0 = fit0.frame.to_world(np.stack([uu.ravel(), vv.ravel(), w0], axis=1))
        p1 = fit1.frame.to_world(np.stack([uu.ravel(), vv.ravel(), w1], axis=1))
        assert np.allclose(p1 - p0, fit1.frame.w[None, :], atol=1e-12)

    def test_rms_monotone_in_degree(self, planner_cloud, pipeline):
        _, axis, troughs = pipeline
        rms = [
            fit_capsule_surface(planner_cloud, axis, troughs, margin=1.0, degree=d).rms
            for d in range(1, 6)
        ]
        assert all(b <= a + 1e-9 for a, b in zip(rms, rms[1:]))

    def test_margin_grid_inside_capsule(self, planner_cloud, pipeline):
        # No margin-raised grid point farther from the channel axis than its
        # zero-margin counterpart.
        _, axis, troughs = pipeline
        fit0 = fit_capsule_surface(planner_cloud, axis, troughs, margin=0.0)
        fit1 = fit_capsule_surface(planner_cloud, axis, troughs, margin=1.0)
        u = np.linspace(fit1.u_bounds[0] + 1, fit1.u_bounds[1] - 1, 20)
        v = np.linspace(fit1.v_bounds[0] + 1, fit1.v_bounds[1] - 1, 20)
        uu, vv = np.meshgrid(u, v)
        coords0 = np.stack([uu.ravel(), vv.ravel(), fit0.margin_w(uu.ravel(), vv.ravel())], axis=1)
        coords1 = np.stack([uu.ravel(), vv.ravel(), fit1.margin_w(uu.ravel(), vv.ravel())], axis=1)
        p0 = fit0.frame.to_world(coords0)
        p1 = fit1.frame.to_world(coords1)

        def axis_radial(points):
            rel = points - axis.point
            along = rel @ axis.direction
            return np.linalg.norm(rel - along[:, None] * axis.direction[None, :], axis=1)

        assert np.all(axis_radial(p1) < axis_radial(p0) + 1e-9)

    def test_real_corridor_fit_quality(self, planner_cloud, pipeline, default_phantom):
        _, _, model = default_phantom
        _, axis, troughs = pipeline
        fit = fit_capsule_surface(planner_cloud, axis, troughs, margin=1.0)
        assert fit.rms < 0.5
        gaps = model.capsule_inward_gap(fit.grid)
        assert np.mean(gaps) > 0.6

    def test_ill_conditioned_fit(self):
        # Corridor capsule points on a single line: rank-deficient design.
        n = 60
        capsule = np.stack([np.linspace(-1, 1, n), np.zeros(n), np.zeros(n)], axis=1)
        lobe = np.array([[0.0, 0.0, 1.5], [0.5, 0.0, 1.5], [-0.5, 0.2, 1.5]])
        cloud = LabeledPointCloud(
            points=np.vstack([capsule, lobe]),
            labels=np.concatenate([
                np.zeros(n, dtype=np.uint8),
                np.full(3, int(CloudLabel.MEDIAN_LOBE), dtype=np.uint8),
            ]),
        )
        _, axis, troughs = synthetic_fit_setup(np.zeros(21))
        with pytest.raises(IllConditionedFitError):
            fit_capsule_surface(cloud, axis, troughs, margin=0.0)

    def test_serialization_roundtrip(self, planner_cloud, pipeline):
        _, axis, troughs = pipeline
        fit = fit_capsule_surface(planner_cloud, axis, troughs, margin=1.0)
        restored = CapsuleFit.from_dict(fit.to_dict())
        pts = fit.grid[:40]
        assert np.allclose(restored.height_above_margin(pts), fit.height_above_margin(pts))
        assert np.array_equal(restored.in_corridor(pts), fit.in_corridor(pts))
