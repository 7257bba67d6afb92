"""Batch entry points: phantom generation, planning, retraction training,
headless supervised runs, metrics reporting, and the service launcher."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from lobesim import phantom as ph
from lobesim.anatomy import find_channel_axis, find_troughs, fit_capsule_surface
from lobesim.cutplan import CutPlan, plan_resection
from lobesim.errors import ValidationError
from lobesim.geometry import RigidTransform
from lobesim.registration import (
    KeypointSet, fine_tune, pick_keypoints, register, save_keypoints,
)
from lobesim.retraction import (
    CvaeParams, RetractionPhase, TrainConfig, load_demos, make_synthetic_demos,
    sample_actions, save_demos, select_action, summarize_scene,
)
from lobesim.simexec import (
    Phase, PhaseCompleteSignal, ProcedureState, advance_phase, apply_retraction,
    bridge_patch_waypoints, compute_metrics, execute_cut,
    find_bridged_waterline_regions, force_cut, record_fine_tune,
)

EXIT_THRESHOLD = 1
EXIT_ERROR = 2


def _parse_vector(text: str) -> np.ndarray:
    parts = [float(v) for v in text.replace(",", " ").split()]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected 3 components, got {text!r}")
    return np.asarray(parts)


def _rotation_from_axis_angle(axis, angle_rad: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    k = np.array([
        [0, -axis[2], axis[1]],
        [axis[2], 0, -axis[0]],
        [-axis[1], axis[0], 0],
    ])
    return np.eye(3) + np.sin(angle_rad) * k + (1 - np.cos(angle_rad)) * (k @ k)


class ScriptedSupervisor:
    """Headless stand-in for the human operator: resects in plan order,
    retracting before each group's first cut and after every fifth cut
    within a group, up to the retraction budget."""

    def __init__(self, state: ProcedureState, weights: dict, budget: int = 20,
                 stiffness: float = 0.25, seed: int = 0):
        self.state = state
        self.weights = weights
        self.budget = budget
        self.stiffness = stiffness
        self.seed = seed
        self.used = 0
        self._cuts_since = 0
        self._last_group = None

    def maybe_retract(self):
        state = self.state
        if self.used >= self.budget or not self.weights:
            return
        trajectory = state.plan.trajectories[state.next_cut_index]
        fresh_group = trajectory.group_id != self._last_group
        if not fresh_group and self._cuts_since < 5:
            return
        phase = RetractionPhase(
            {"left_trough": "left_trough", "right_trough": "right_trough",
             "median_dissection": "middle_lift"}[state.phase.value]
        )
        params = self.weights.get(phase)
        if params is None:
            return
        features = summarize_scene(state, params.standardization)
        candidates = sample_actions(params, features, 1000, seed=self.seed + self.used)
        action = select_action(candidates, 0)
        apply_retraction(state, action, stiffness=self.stiffness)
        self.used += 1
        self._cuts_since = 0
        self._last_group = trajectory.group_id

    def note_cut(self):
        trajectory_group = self.state.current_group_id
        self._cuts_since += 1
        self._last_group = trajectory_group


def run_headless(args) -> dict:
    rng = np.random.default_rng(args.seed)
    spec = ph.PhantomSpec.default(seed=args.seed)
    full_cloud, volume, model = ph.generate_phantom(spec)
    cloud = ph.downsample(full_cloud, args.downsample)
    axis = find_channel_axis(cloud, seed=args.seed)
    troughs = find_troughs(cloud, axis, instrument_y=args.instrument_y, seed=args.seed)
    fit = fit_capsule_surface(cloud, axis, troughs, margin=args.margin)
    plan = plan_resection(
        cloud, axis, troughs, fit,
        layer_spacing=args.layer_spacing,
        waypoint_spacing=args.waypoint_spacing,
        station_spacing=args.station_spacing,
        workspace_diameter=args.workspace,
        overlap=args.overlap,
    )

    # Ground-truth plan-to-robot transform the registration must recover.
    true_transform = RigidTransform(
        _rotation_from_axis_angle(rng.normal(size=3), np.radians(2.0)),
        rng.uniform(-5.0, 5.0, 3),
    )
    plan_keys = pick_keypoints(cloud, count=10, seed=args.seed)
    measured = true_transform.apply(plan_keys) + rng.normal(
        scale=args.reg_noise / np.sqrt(3.0), size=plan_keys.shape
    )
    registration = register(KeypointSet(plan_points=plan_keys, measured_points=measured))

    train_config = TrainConfig(seed=args.seed, epochs=args.train_epochs)
    from lobesim.retraction import train_cvae

    demos = make_synthetic_demos(seed=args.seed)
    weights = {phase: train_cvae(demos, phase, train_config) for phase in RetractionPhase}

    state = ProcedureState(
        plan, volume,
        registration=registration,
        true_transform=true_transform,
        exec_noise_mm=args.exec_noise,
        seed=args.seed,
    )
    supervisor = ScriptedSupervisor(
        state, weights, budget=args.retraction_budget,
        stiffness=args.stiffness, seed=args.seed,
    )

    while state.phase != Phase.COMPLETE:
        if (state.phase in (Phase.LEFT_TROUGH, Phase.RIGHT_TROUGH)
                and state.cuts_done_in_phase() == 0 and not state.phase_complete()):
            trajectory = state.plan.trajectories[state.next_cut_index]
            first_cut = trajectory.cutting_waypoints[0]
            expected = state.registration.transform.apply(first_cut)
            touch = true_transform.apply(first_cut) + rng.normal(
                scale=args.touch_noise / np.sqrt(3.0), size=3
            )
            tuned = fine_tune(state.registration, expected, touch)
            record_fine_tune(state, tuned, touch - expected)
        try:
            supervisor.maybe_retract()
            execute_cut(state, electrode_radius=args.electrode_radius)
            supervisor.note_cut()
        except PhaseCompleteSignal:
            advance_phase(state)

    # Teleoperated finishing cuts for residual tissue strings.
    recovery_rounds = 0
    while recovery_rounds < args.max_recovery_rounds:
        regions = find_bridged_waterline_regions(state)
        if not regions:
            break
        for region in regions:
            patch = bridge_patch_waypoints(state, region)
            if len(patch) >= 2:
                force_cut(state, patch, electrode_radius=args.electrode_radius)
        recovery_rounds += 1

    report = compute_metrics(state.preop, state.volume, plan, state)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "metrics.json").write_text(json.dumps(report.to_dict(), indent=1))
    with open(out_dir / "events.jsonl", "w") as fh:
        for event in state.events:
            fh.write(json.dumps(event.to_dict()) + "\n")
    (out_dir / "cutplan.json").write_text(plan.to_json())
    if args.save_volumes:
        ph.save_volume(state.preop, out_dir / "pre.lpvx")
        ph.save_volume(state.volume, out_dir / "post.lpvx")
    return report.to_dict()


def cmd_gen_phantom(args) -> int:
    spec = (ph.PhantomSpec.sphere(radius=args.sphere_radius, pitch=args.pitch,
                                  seed=args.seed)
            if args.sphere else
            replace(ph.PhantomSpec.default(seed=args.seed),
                    voxel_pitch_mm=args.pitch, surface_samples=args.samples))
    cloud, volume, _ = ph.generate_phantom(spec)
    ph.save_cloud(cloud, args.out)
    if args.volume_out:
        ph.save_volume(volume, args.volume_out)
    print(json.dumps({
        "cloud": str(args.out),
        "points": len(cloud),
        "volume": str(args.volume_out) if args.volume_out else None,
        "median_lobe_cm3": volume.volume_mm3(ph.VoxelLabel.MEDIAN_LOBE) / 1000.0,
    }))
    return 0


def cmd_plan(args) -> int:
    cloud = ph.load_cloud(args.cloud)
    if len(cloud) > args.downsample:
        cloud = ph.downsample(cloud, args.downsample)
    axis = find_channel_axis(cloud, seed=args.seed)
    troughs = find_troughs(cloud, axis, instrument_y=args.instrument_y, seed=args.seed)
    fit = fit_capsule_surface(cloud, axis, troughs, margin=args.margin)
    plan = plan_resection(
        cloud, axis, troughs, fit,
        layer_spacing=args.layer_spacing,
        waypoint_spacing=args.waypoint_spacing,
        station_spacing=args.station_spacing,
        workspace_diameter=args.workspace,
        overlap=args.overlap,
    )
    Path(args.out).write_text(plan.to_json())
    print(json.dumps({
        "plan": str(args.out),
        "trajectories": len(plan.trajectories),
        "groups": len(plan.groups),
        "fit_rms_mm": plan.capsule_fit.rms,
        "warnings": plan.warnings,
    }))
    return 0


def cmd_train(args) -> int:
    from lobesim.retraction import train_cvae

    if args.demos:
        demos = load_demos(args.demos)
    else:
        demos = make_synthetic_demos(seed=args.seed)
        if args.save_demos:
            save_demos(demos, args.save_demos)
    config = TrainConfig(
        epochs=args.epochs, learning_rate=args.learning_rate,
        beta=args.beta, seed=args.seed,
    )
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = {}
    for phase in RetractionPhase:
        params = train_cvae(demos, phase, config)
        path = out_dir / f"weights_{phase.value}.json"
        params.save(path)
        summary[phase.value] = {
            "weights": str(path),
            "final_loss": params.loss_history[-1]["loss"],
        }
    print(json.dumps(summary))
    return 0


def cmd_run_headless(args) -> int:
    report = run_headless(args)
    print(json.dumps(report, indent=1))
    if report["percent_of_targeted"] < args.threshold:
        print(
            f"percent-of-targeted {report['percent_of_targeted']:.1f} "
            f"below threshold {args.threshold}",
            file=sys.stderr,
        )
        return EXIT_THRESHOLD
    return 0


def cmd_report(args) -> int:
    preop = ph.load_volume(args.pre)
    postop = ph.load_volume(args.post)
    if args.target_residual_cm3 is not None:
        from lobesim.simexec import metrics_from_volumes

        pitch3 = preop.pitch**3 / 1000.0
        preop_cm3 = preop.count(ph.VoxelLabel.MEDIAN_LOBE) * pitch3
        actual_cm3 = postop.count(ph.VoxelLabel.MEDIAN_LOBE) * pitch3
        removal, targeted, ratio = metrics_from_volumes(
            preop_cm3, actual_cm3, args.target_residual_cm3
        )
        print(json.dumps({
            "preop_median_cm3": preop_cm3,
            "actual_residual_cm3": actual_cm3,
            "target_residual_cm3": args.target_residual_cm3,
            "percent_removal": removal,
            "targeted_percent_removal": targeted,
            "percent_of_targeted": ratio,
        }, indent=1))
        return 0
    plan = CutPlan.from_json(Path(args.plan).read_text())
    report = compute_metrics(preop, postop, plan)
    print(json.dumps(report.to_dict(), indent=1))
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from lobesim.service import bootstrap_session, build_app

    session = bootstrap_session(seed=args.seed, margin=args.margin,
                                exec_noise=args.exec_noise,
                                reg_noise=args.reg_noise,
                                train_epochs=args.train_epochs,
                                voxel_pitch=args.voxel_pitch)
    app = build_app(session)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def _apply_config_file(parser: argparse.ArgumentParser, argv: list[str]) -> list[str]:
    """key=value config file support; explicit flags win."""
    probe = argparse.ArgumentParser(add_help=False)
    probe.add_argument("--config")
    known, _ = probe.parse_known_args(argv)
    if not known.config:
        return argv
    defaults = {}
    for lineno, line in enumerate(Path(known.config).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{known.config}:{lineno}: expected key=value")
        key, value = (part.strip() for part in line.split("=", 1))
        defaults[key.replace("-", "_")] = value
    # Defaults live on the subcommand parsers; coerce through each flag's
    # declared type so config values behave exactly like command-line ones.
    subparsers = parser._subparsers._group_actions[0].choices.values()
    for sub in subparsers:
        converted = {}
        for action in sub._actions:
            if action.dest in defaults:
                raw = defaults[action.dest]
                converted[action.dest] = action.type(raw) if action.type else raw
        if converted:
            sub.set_defaults(**converted)
    return argv


def _add_common_planner_args(p: argparse.ArgumentParser):
    p.add_argument("--seed", type=int, default=0, help="master random seed (default 0)")
    p.add_argument("--margin", type=float, default=1.0,
                   help="resection margin above the capsule fit, mm (default 1.0)")
    p.add_argument("--layer-spacing", type=float, default=2.0,
                   help="depth between cut layers, mm (default 2.0)")
    p.add_argument("--waypoint-spacing", type=float, default=1.5,
                   help="arc spacing of cut waypoints, mm (default 1.5)")
    p.add_argument("--station-spacing", type=float, default=0.45,
                   help="axial spacing of dissection sweeps, mm (default 0.45)")
    p.add_argument("--workspace", type=float, default=40.0,
                   help="tool workspace sphere diameter, mm (default 40)")
    p.add_argument("--overlap", type=float, default=5.0,
                   help="axial overlap between cut groups, mm (default 5.0)")
    p.add_argument("--downsample", type=int, default=10_000,
                   help="planner point budget (default 10000)")
    p.add_argument("--instrument-y", type=_parse_vector, default=np.array([0.0, 0.0, 1.0]),
                   help="instrument Y axis in phantom frame (default 0,0,1)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lobesim",
        description="Desk-scale supervised lobe-resection planner and simulator",
    )
    parser.add_argument("--config", help="key=value config file; flags win")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-phantom", help="generate a synthetic phantom")
    p.add_argument("--out", required=True, help="output point cloud (.ply)")
    p.add_argument("--volume-out", help="output voxel volume (.lpvx)")
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    p.add_argument("--pitch", type=float, default=0.5, help="voxel pitch mm (default 0.5)")
    p.add_argument("--samples", type=int, default=50_000,
                   help="surface samples before downsampling (default 50000)")
    p.add_argument("--sphere", action="store_true",
                   help="lobe-free calibration sphere instead of the default phantom")
    p.add_argument("--sphere-radius", type=float, default=25.0,
                   help="radius for --sphere, mm (default 25)")
    p.set_defaults(func=cmd_gen_phantom)

    p = sub.add_parser("plan", help="plan resection cuts from a labeled cloud")
    p.add_argument("--cloud", required=True, help="input point cloud (.ply)")
    p.add_argument("--out", default="cutplan.json", help="output plan (default cutplan.json)")
    _add_common_planner_args(p)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("train", help="train per-phase retraction models")
    p.add_argument("--demos", help="demonstrations file (.jsonl); synthetic if omitted")
    p.add_argument("--save-demos", help="write the synthetic demonstrations here")
    p.add_argument("--out-dir", default="weights", help="weights directory (default weights)")
    p.add_argument("--epochs", type=int, default=2000, help="training epochs (default 2000)")
    p.add_argument("--learning-rate", type=float, default=1e-3,
                   help="gradient step size (default 0.001)")
    p.add_argument("--beta", type=float, default=0.1, help="KL weight (default 0.1)")
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("run-headless", help="run the full supervised procedure")
    _add_common_planner_args(p)
    p.add_argument("--out-dir", default="run_out", help="output directory (default run_out)")
    p.add_argument("--reg-noise", type=float, default=0.5,
                   help="keypoint measurement noise, RMS mm (default 0.5)")
    p.add_argument("--exec-noise", type=float, default=0.3,
                   help="execution noise per waypoint, RMS mm (default 0.3)")
    p.add_argument("--touch-noise", type=float, default=0.1,
                   help="fine-tune touch noise, RMS mm (default 0.1)")
    p.add_argument("--electrode-radius", type=float, default=0.5,
                   help="electrode sphere radius, mm (default 0.5)")
    p.add_argument("--retraction-budget", type=int, default=20,
                   help="autonomous retractions for the run (default 20)")
    p.add_argument("--stiffness", type=float, default=0.25,
                   help="tissue response per unit push (default 0.25)")
    p.add_argument("--train-epochs", type=int, default=2000,
                   help="retraction training epochs (default 2000)")
    p.add_argument("--max-recovery-rounds", type=int, default=5,
                   help="teleoperated string-removal rounds (default 5)")
    p.add_argument("--threshold", type=float, default=90.0,
                   help="minimum percent-of-targeted for exit 0 (default 90)")
    p.add_argument("--save-volumes", action="store_true",
                   help="also write pre/post voxel volumes")
    p.set_defaults(func=cmd_run_headless)

    p = sub.add_parser("report", help="recompute metrics from stored volumes")
    p.add_argument("--pre", required=True, help="preoperative volume (.lpvx)")
    p.add_argument("--post", required=True, help="postoperative volume (.lpvx)")
    p.add_argument("--plan", help="cut plan (.json) for the margin surface")
    p.add_argument("--target-residual-cm3", type=float,
                   help="override the plan-derived target residual volume")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("serve", help="launch the supervisory control service")
    p.add_argument("--host", default="127.0.0.1", help="bind host (default 127.0.0.1)")
    p.add_argument("--port", type=int, default=8460, help="bind port (default 8460)")
    p.add_argument("--seed", type=int, default=0, help="session seed (default 0)")
    p.add_argument("--margin", type=float, default=1.0, help="resection margin mm (default 1.0)")
    p.add_argument("--reg-noise", type=float, default=0.5,
                   help="keypoint noise, RMS mm (default 0.5)")
    p.add_argument("--exec-noise", type=float, default=0.3,
                   help="execution noise, RMS mm (default 0.3)")
    p.add_argument("--train-epochs", type=int, default=2000,
                   help="retraction training epochs (default 2000)")
    p.add_argument("--voxel-pitch", type=float, default=0.5,
                   help="simulation voxel pitch, mm (default 0.5)")
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        argv = _apply_config_file(parser, argv)
        args = parser.parse_args(argv)
        return args.func(args)
    except (ValidationError, ph.PhantomSpecError, ph.CloudParseError) as exc:
        print(json.dumps({"error": type(exc).__name__, "reason": str(exc)}),
              file=sys.stderr)
        return EXIT_ERROR
    except Exception as exc:  # module errors surface with their reason
        print(json.dumps({"error": type(exc).__name__, "reason": str(exc)}),
              file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
