"""Supervisory control service: the human-in-the-loop command surface.

One procedure session per server. Mutating commands are funneled through a
single lock (linearizable); readers take consistent snapshots; subscribers
get every event exactly once, in order, with Last-Event-ID resume.
"""

from __future__ import annotations

import json
import threading
import time
from dataclasses import replace

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse, StreamingResponse

from lobesim import phantom as ph
from lobesim.anatomy import find_channel_axis, find_troughs, fit_capsule_surface
from lobesim.cutplan import plan_resection
from lobesim.errors import CorrectionBoundError, ValidationError
from lobesim.geometry import RigidTransform
from lobesim.registration import KeypointSet, fine_tune, pick_keypoints, register
from lobesim.retraction import (
    CandidateSet,
    CvaeParams,
    RetractionPhase,
    TrainConfig,
    make_synthetic_demos,
    sample_actions,
    select_action,
    summarize_scene,
    train_cvae,
)
from lobesim.simexec import (
    Phase,
    PhaseCompleteSignal,
    ProcedureState,
    advance_phase,
    apply_retraction,
    compute_metrics,
    execute_cut,
    force_cut,
    record_fine_tune,
)

PHASE_TO_RETRACTION = {
    Phase.LEFT_TROUGH: RetractionPhase.LEFT_TROUGH,
    Phase.RIGHT_TROUGH: RetractionPhase.RIGHT_TROUGH,
    Phase.MEDIAN_DISSECTION: RetractionPhase.MIDDLE_LIFT,
}


class CommandRejected(Exception):
    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


class Session:
    """Single-procedure session: serialized commands, ordered event stream."""

    def __init__(
        self,
        state: ProcedureState,
        weights: dict[RetractionPhase, CvaeParams],
        cloud: ph.LabeledPointCloud,
        sample_count: int = 1000,
        stiffness: float = 0.25,
        seed: int = 0,
    ):
        self.state = state
        self.weights = weights
        self.cloud = cloud
        self.sample_count = sample_count
        self.stiffness = stiffness
        self.rng = np.random.default_rng(seed)
        self._lock = threading.Condition()
        self._events: list[dict] = []
        self._issue_counter = 0
        self._pending: CandidateSet | None = None
        self._pending_rank = 0
        self._sampled_for_issue = 0
        self.connected_clients = 0

    # -- event stream ---------------------------------------------------

    def _emit(self, kind: str, payload: dict) -> dict:
        message = {
            "seq": len(self._events) + 1,
            "kind": kind,
            "timestamp_s": self.state.elapsed_s,
            "payload": payload,
        }
        self._events.append(message)
        self._lock.notify_all()
        return message

    def _flush_state_events(self, start: int):
        for event in self.state.events[start:]:
            self._emit(event.kind, event.payload)

    def events_since(self, last_seq: int) -> list[dict]:
        with self._lock:
            return list(self._events[last_seq:])

    def wait_for_events(self, last_seq: int, timeout: float = 0.5) -> list[dict]:
        with self._lock:
            if len(self._events) <= last_seq:
                self._lock.wait(timeout=timeout)
            return list(self._events[last_seq:])

    # -- commands ---------------------------------------------------------

    def handle_command(self, kind: str, args: dict | None = None) -> dict:
        args = args or {}
        with self._lock:
            self._issue_counter += 1
            issue_id = self._issue_counter
            state_events_before = len(self.state.events)
            events_before = len(self._events)
            try:
                handler = {
                    "resect": self._cmd_resect,
                    "retract": self._cmd_retract,
                    "override_retract": self._cmd_override,
                    "advance_phase": self._cmd_advance,
                    "fine_tune": self._cmd_fine_tune,
                    "force_cut": self._cmd_force_cut,
                }.get(kind)
                if handler is None:
                    raise CommandRejected(f"unknown command kind '{kind}'")
                handler(args)
            except CommandRejected as exc:
                return {"accepted": False, "issue_id": issue_id, "reason": exc.reason}
            except (ValidationError, CorrectionBoundError, PhaseCompleteSignal) as exc:
                return {"accepted": False, "issue_id": issue_id, "reason": str(exc)}
            self._flush_state_events(state_events_before)
            new_events = [e["seq"] for e in self._events[events_before:]]
            return {"accepted": True, "issue_id": issue_id, "events": new_events}

    def _cmd_resect(self, args: dict):
        if self.state.phase == Phase.COMPLETE:
            raise CommandRejected("procedure complete")
        if self.state.phase_complete():
            raise CommandRejected(
                f"{self.state.phase.value} complete; advance_phase required"
            )
        execute_cut(self.state, electrode_radius=float(args.get("electrode_radius", 0.5)))

    def _cmd_retract(self, args: dict):
        if self._pending is not None:
            # Confirmation of the currently proposed action.
            action = select_action(self._pending, self._pending_rank)
            apply_retraction(self.state, action, stiffness=self.stiffness)
            self._emit("retraction_confirmed", {
                "rank": self._pending_rank,
                "issue": self._sampled_for_issue,
            })
            self._pending = None
            self._pending_rank = 0
            return
        if self.state.phase == Phase.COMPLETE:
            raise CommandRejected("procedure complete")
        params = self.weights.get(PHASE_TO_RETRACTION[self.state.phase])
        if params is None:
            raise CommandRejected(f"no retraction model for {self.state.phase.value}")
        features = summarize_scene(self.state, params.standardization)
        seed = int(self.rng.integers(2**31))
        self._pending = sample_actions(params, features, self.sample_count, seed=seed)
        self._pending_rank = 0
        self._sampled_for_issue = self._issue_counter
        self._emit("retraction_proposed", {
            "count": len(self._pending),
            "selected_rank": 0,
            "candidates": self._top_candidates(),
        })

    def _cmd_override(self, args: dict):
        if self._pending is None:
            raise CommandRejected("no pending retraction to override")
        rank = int(args.get("rank", 1))
        if rank < 0 or rank >= len(self._pending):
            raise CommandRejected(f"rank {rank} out of range")
        self._pending_rank = rank
        self._emit("override_applied", {
            "selected_rank": rank,
            "candidates": self._top_candidates(),
        })

    def _cmd_advance(self, args: dict):
        force = not self.state.phase_complete()
        advance_phase(self.state, force=force)
        self._pending = None
        self._pending_rank = 0

    def _cmd_fine_tune(self, args: dict):
        if self.state.registration is None:
            raise CommandRejected("no registration to fine-tune")
        if self.state.phase_complete() or self.state.phase == Phase.COMPLETE:
            raise CommandRejected("no upcoming cut to align against")
        trajectory = self.state.plan.trajectories[self.state.next_cut_index]
        plan_point = trajectory.cutting_waypoints[0]
        expected = self.state.registration.transform.apply(plan_point)
        if "measured" in args:
            measured = np.asarray(args["measured"], dtype=float)
        elif args.get("simulate"):
            touch_noise = float(args.get("touch_noise", 0.1))
            measured = self.state.true_transform.apply(plan_point) + self.rng.normal(
                scale=touch_noise / np.sqrt(3.0), size=3
            )
        else:
            raise CommandRejected("fine_tune needs a measured point (or simulate=true)")
        tuned = fine_tune(self.state.registration, expected, measured)
        record_fine_tune(self.state, tuned, measured - expected)

    def _cmd_force_cut(self, args: dict):
        waypoints = np.asarray(args.get("waypoints", []), dtype=float)
        if waypoints.ndim != 2 or waypoints.shape[0] < 2 or waypoints.shape[1] != 3:
            raise CommandRejected("force_cut needs waypoints [[x,y,z], ...] (>= 2)")
        force_cut(self.state, waypoints, velocity_mm_s=float(args.get("velocity", 5.0)))

    # -- snapshots ----------------------------------------------------------

    def _top_candidates(self, k: int = 3) -> list[dict]:
        if self._pending is None:
            return []
        return [
            {
                "rank": i,
                "start": c.action.start.tolist(),
                "end": c.action.end.tolist(),
                "log_density": c.log_density,
            }
            for i, c in enumerate(self._pending.candidates[:k])
        ]

    def snapshot(self) -> dict:
        with self._lock:
            state = self.state
            lo, hi = state.phase_cut_bounds() if state.phase != Phase.COMPLETE else (0, 0)
            return {
                "phase": state.phase.value,
                "next_cut_index": state.next_cut_index,
                "cuts_done_in_phase": state.cuts_done_in_phase()
                if state.phase != Phase.COMPLETE else 0,
                "cuts_total_in_phase": hi - lo,
                "current_group_id": state.current_group_id,
                "elapsed_s": state.elapsed_s,
                "retraction_displacement": state.retraction_displacement.tolist(),
                "per_phase_cuts": dict(state.per_phase_cuts),
                "per_phase_retractions": dict(state.per_phase_retractions),
                "capsule_strike_voxels": state.capsule_strike_voxels,
                "registration_rms": state.registration.residual_rms
                if state.registration else None,
                "pending_retraction": {
                    "count": len(self._pending),
                    "selected_rank": self._pending_rank,
                    "candidates": self._top_candidates(),
                } if self._pending is not None else None,
                "event_count": len(self._events),
                "connected_clients": self.connected_clients,
            }

    def metrics(self) -> dict:
        with self._lock:
            report = compute_metrics(
                self.state.preop, self.state.volume, self.state.plan, self.state
            )
            return report.to_dict()

    def cloud_summary(self, max_points: int = 4000) -> dict:
        stride = max(1, len(self.cloud) // max_points)
        points = self.cloud.points[::stride]
        labels = self.cloud.labels[::stride]
        return {
            "points": np.round(points, 2).tolist(),
            "labels": labels.tolist(),
        }


def bootstrap_session(
    seed: int = 0,
    margin: float = 1.0,
    exec_noise: float = 0.3,
    reg_noise: float = 0.5,
    train_epochs: int = 2000,
    voxel_pitch: float = 0.5,
    surface_samples: int = 50_000,
    downsample_to: int = 10_000,
    sample_count: int = 1000,
) -> Session:
    """Generate a phantom, plan it, register, train retraction models, and
    wrap everything in a ready session."""
    spec = replace(
        ph.PhantomSpec.default(seed=seed),
        voxel_pitch_mm=voxel_pitch,
        surface_samples=surface_samples,
    )
    full_cloud, volume, _ = ph.generate_phantom(spec)
    cloud = ph.downsample(full_cloud, downsample_to)
    axis = find_channel_axis(cloud, seed=seed)
    troughs = find_troughs(cloud, axis, instrument_y=[0.0, 0.0, 1.0], seed=seed)
    fit = fit_capsule_surface(cloud, axis, troughs, margin=margin)
    plan = plan_resection(cloud, axis, troughs, fit)

    rng = np.random.default_rng(seed)
    axis_vec = rng.normal(size=3)
    axis_vec /= np.linalg.norm(axis_vec)
    angle = np.radians(2.0)
    k = np.array([
        [0, -axis_vec[2], axis_vec[1]],
        [axis_vec[2], 0, -axis_vec[0]],
        [-axis_vec[1], axis_vec[0], 0],
    ])
    rotation = np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)
    true_transform = RigidTransform(rotation, rng.uniform(-5, 5, 3))
    plan_keys = pick_keypoints(cloud, count=10, seed=seed)
    measured = true_transform.apply(plan_keys) + rng.normal(
        scale=reg_noise / np.sqrt(3.0), size=plan_keys.shape
    )
    registration = register(KeypointSet(plan_points=plan_keys, measured_points=measured))

    demos = make_synthetic_demos(seed=seed)
    config = TrainConfig(seed=seed, epochs=train_epochs)
    weights = {phase: train_cvae(demos, phase, config) for phase in RetractionPhase}

    state = ProcedureState(
        plan, volume,
        registration=registration,
        true_transform=true_transform,
        exec_noise_mm=exec_noise,
        seed=seed,
    )
    return Session(state, weights, cloud, sample_count=sample_count, seed=seed)


def build_app(session: Session) -> FastAPI:
    app = FastAPI(title="lobesim supervisory service")

    @app.get("/state")
    def get_state():
        return session.snapshot()

    @app.get("/plan")
    def get_plan():
        return JSONResponse(session.state.plan.to_json_dict())

    @app.get("/cloud")
    def get_cloud():
        return session.cloud_summary()

    @app.get("/metrics")
    def get_metrics():
        return session.metrics()

    @app.post("/command")
    def post_command(body: dict):
        kind = body.get("kind")
        if not isinstance(kind, str):
            return JSONResponse(
                {"accepted": False, "reason": "missing command kind"}, status_code=400
            )
        return session.handle_command(kind, body.get("args") or {})

    @app.get("/events")
    def get_events(request: Request, last_event_id: int = 0):
        header_id = request.headers.get("last-event-id")
        start = int(header_id) if header_id else last_event_id

        def stream():
            session.connected_clients += 1
            cursor = start
            try:
                while True:
                    batch = session.wait_for_events(cursor, timeout=0.5)
                    if batch:
                        for message in batch:
                            cursor = message["seq"]
                            yield (
                                f"id: {message['seq']}\n"
                                f"data: {json.dumps(message)}\n\n"
                            )
                    else:
                        yield ": keepalive\n\n"
            finally:
                session.connected_clients -= 1

        return StreamingResponse(stream(), media_type="text/event-stream")

    return app
