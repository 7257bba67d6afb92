"""Keypoint registration of the plan frame to the execution frame, with
per-phase translational fine-tuning."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from lobesim.errors import CorrectionBoundError, ValidationError
from lobesim.geometry import RigidTransform, kabsch_align
from lobesim.phantom import LabeledPointCloud

DEFAULT_CORRECTION_BOUND = 3.0


@dataclass(frozen=True)
class KeypointSet:
    plan_points: np.ndarray
    measured_points: np.ndarray
    noise_mm: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "plan_points",
                           np.asarray(self.plan_points, dtype=float).reshape(-1, 3))
        object.__setattr__(self, "measured_points",
                           np.asarray(self.measured_points, dtype=float).reshape(-1, 3))
        if len(self.plan_points) != len(self.measured_points):
            raise ValidationError("plan and measured keypoints must pair up")
        if len(self.plan_points) < 3:
            raise ValidationError("need at least 3 keypoint pairs")

    def __len__(self) -> int:
        return len(self.plan_points)


@dataclass(frozen=True)
class RegistrationResult:
    transform: RigidTransform
    residual_rms: float
    fine_tune_total: np.ndarray = field(default_factory=lambda: np.zeros(3))
    history: tuple = ()

    def map_plan_point(self, point) -> np.ndarray:
        return self.transform.apply(point)


def register(keys: KeypointSet) -> RegistrationResult:
    """Least-squares rigid alignment of plan keypoints onto measured ones;
    the fine-tune accumulator starts at zero."""
    transform, rms = kabsch_align(keys.plan_points, keys.measured_points)
    return RegistrationResult(transform=transform, residual_rms=rms)


def fine_tune(
    result: RegistrationResult,
    expected_point,
    measured_point,
    bound: float = DEFAULT_CORRECTION_BOUND,
) -> RegistrationResult:
    """Apply a pure translational correction from a touch measurement.

    The correction is measured - expected; a magnitude at or beyond `bound`
    signals gross misregistration and is rejected so the caller can
    re-register instead.
    """
    expected = np.asarray(expected_point, dtype=float).reshape(3)
    measured = np.asarray(measured_point, dtype=float).reshape(3)
    correction = measured - expected
    magnitude = float(np.linalg.norm(correction))
    if magnitude >= bound:
        raise CorrectionBoundError(magnitude, bound)
    return RegistrationResult(
        transform=result.transform.with_translation_offset(correction),
        residual_rms=result.residual_rms,
        fine_tune_total=result.fine_tune_total + correction,
        history=result.history + (correction,),
    )


def pick_keypoints(cloud: LabeledPointCloud, count: int = 10, seed: int = 0) -> np.ndarray:
    """Well-spread surface keypoints via seeded farthest-point sampling.

    Stands in for the manual selection of distinctive surface features.
    """
    if count < 3:
        raise ValidationError("need at least 3 keypoints")
    rng = np.random.default_rng(seed)
    pts = cloud.points
    chosen = [int(rng.integers(len(pts)))]
    d2 = np.sum((pts - pts[chosen[0]]) ** 2, axis=1)
    for _ in range(count - 1):
        nxt = int(np.argmax(d2))
        chosen.append(nxt)
        d2 = np.minimum(d2, np.sum((pts - pts[nxt]) ** 2, axis=1))
    return pts[chosen].copy()


def save_keypoints(keys: KeypointSet, path) -> None:
    records = [
        {"id": i, "plan": keys.plan_points[i].tolist(),
         "measured": keys.measured_points[i].tolist()}
        for i in range(len(keys))
    ]
    Path(path).write_text(json.dumps(records, indent=1))


def load_keypoints(path) -> KeypointSet:
    records = json.loads(Path(path).read_text())
    plan = np.array([r["plan"] for r in records], dtype=float)
    measured = np.array([r["measured"] for r in records], dtype=float)
    return KeypointSet(plan_points=plan, measured_points=measured)
