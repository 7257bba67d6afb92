"""Learned retraction-action generation.

A conditional variational autoencoder maps 8-dimensional scene features to
distributions over push actions (start, end), trained from demonstration
records with a reconstruction + KL objective. The image backbone of the
original system is replaced by simulator-emitted features of the same
dimension; everything else (latent sampling, 1000-candidate inference,
likelihood ranking with second-best override) is preserved.

Networks are small MLPs with exact hand-rolled backpropagation so training
is dependency-free and bit-deterministic per seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np

from lobesim.errors import TrainingDivergedError, ValidationError

FEATURE_DIM = 8
LATENT_DIM = 8
ACTION_DIM = 6


class RetractionPhase(str, Enum):
    LEFT_TROUGH = "left_trough"
    RIGHT_TROUGH = "right_trough"
    MIDDLE_LIFT = "middle_lift"


@dataclass(frozen=True)
class PushAction:
    start: np.ndarray
    end: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "start", np.asarray(self.start, dtype=float).reshape(3))
        object.__setattr__(self, "end", np.asarray(self.end, dtype=float).reshape(3))

    @property
    def vector(self) -> np.ndarray:
        return self.end - self.start

    @property
    def length(self) -> float:
        return float(np.linalg.norm(self.vector))


@dataclass(frozen=True)
class Standardization:
    feature_mean: np.ndarray
    feature_std: np.ndarray
    action_mean: np.ndarray
    action_std: np.ndarray

    @classmethod
    def from_data(cls, features: np.ndarray, actions: np.ndarray) -> "Standardization":
        def stats(arr):
            mean = arr.mean(axis=0)
            std = arr.std(axis=0)
            return mean, np.where(std < 1e-9, 1.0, std)

        fm, fs = stats(features)
        am, as_ = stats(actions)
        return cls(fm, fs, am, as_)

    def encode_features(self, features) -> np.ndarray:
        return (np.asarray(features, dtype=float) - self.feature_mean) / self.feature_std

    def encode_actions(self, actions) -> np.ndarray:
        return (np.asarray(actions, dtype=float) - self.action_mean) / self.action_std

    def decode_actions(self, encoded) -> np.ndarray:
        return np.asarray(encoded, dtype=float) * self.action_std + self.action_mean

    def to_dict(self) -> dict:
        return {
            "feature_mean": self.feature_mean.tolist(),
            "feature_std": self.feature_std.tolist(),
            "action_mean": self.action_mean.tolist(),
            "action_std": self.action_std.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Standardization":
        return cls(*(np.asarray(d[k]) for k in
                     ("feature_mean", "feature_std", "action_mean", "action_std")))


@dataclass
class DemoDataset:
    """Demonstration records: raw features (N, 8) paired with raw push
    actions (N, 6) = (start, end), plus shared standardization."""

    features: np.ndarray
    actions: np.ndarray
    phases: np.ndarray
    standardization: Standardization = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float).reshape(-1, FEATURE_DIM)
        self.actions = np.asarray(self.actions, dtype=float).reshape(-1, ACTION_DIM)
        self.phases = np.asarray(self.phases)
        if not (len(self.features) == len(self.actions) == len(self.phases)):
            raise ValidationError("features, actions, and phases must align")
        if self.standardization is None:
            self.standardization = Standardization.from_data(self.features, self.actions)

    def __len__(self) -> int:
        return len(self.features)

    def phase_subset(self, phase: RetractionPhase) -> "DemoDataset":
        mask = self.phases == phase.value
        return DemoDataset(
            features=self.features[mask],
            actions=self.actions[mask],
            phases=self.phases[mask],
            standardization=self.standardization,
        )

    def phase_counts(self) -> dict[str, int]:
        return {p.value: int(np.sum(self.phases == p.value)) for p in RetractionPhase}


@dataclass(frozen=True)
class TrainConfig:
    hidden: int = 32
    learning_rate: float = 1e-3
    epochs: int = 2000
    beta: float = 0.1
    clip_norm: float = 10.0
    seed: int = 0
    max_push_mm: float = 15.0
    min_push_mm: float = 0.05

    def to_dict(self) -> dict:
        return {
            "hidden": self.hidden, "learning_rate": self.learning_rate,
            "epochs": self.epochs, "beta": self.beta, "clip_norm": self.clip_norm,
            "seed": self.seed, "max_push_mm": self.max_push_mm,
            "min_push_mm": self.min_push_mm,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class CvaeParams:
    phase: RetractionPhase
    weights: dict
    standardization: Standardization
    config: TrainConfig
    loss_history: list[dict] = field(default_factory=list)

    def save(self, path) -> None:
        doc = {
            "version": 1,
            "phase": self.phase.value,
            "standardization": self.standardization.to_dict(),
            "encoder": [self.weights[k].tolist() for k in _ENCODER_KEYS],
            "decoder": [self.weights[k].tolist() for k in _DECODER_KEYS],
            "config": self.config.to_dict(),
            "loss_history": self.loss_history,
        }
        Path(path).write_text(json.dumps(doc))

    @classmethod
    def load(cls, path) -> "CvaeParams":
        doc = json.loads(Path(path).read_text())
        weights = {}
        for k, arr in zip(_ENCODER_KEYS, doc["encoder"]):
            weights[k] = np.asarray(arr, dtype=float)
        for k, arr in zip(_DECODER_KEYS, doc["decoder"]):
            weights[k] = np.asarray(arr, dtype=float)
        return cls(
            phase=RetractionPhase(doc["phase"]),
            weights=weights,
            standardization=Standardization.from_dict(doc["standardization"]),
            config=TrainConfig.from_dict(doc["config"]),
            loss_history=doc["loss_history"],
        )


@dataclass(frozen=True)
class Candidate:
    action: PushAction
    latent: np.ndarray
    log_density: float


@dataclass(frozen=True)
class CandidateSet:
    candidates: tuple[Candidate, ...]

    def __len__(self) -> int:
        return len(self.candidates)

    def __getitem__(self, i: int) -> Candidate:
        return self.candidates[i]


_ENCODER_KEYS = ("enc_w1", "enc_b1", "enc_w2", "enc_b2",
                 "enc_wm", "enc_bm", "enc_wv", "enc_bv")
_DECODER_KEYS = ("dec_w1", "dec_b1", "dec_w2", "dec_b2", "dec_w3", "dec_b3")


def _init_weights(hidden: int, rng: np.random.Generator) -> dict:
    def layer(n_in, n_out):
        scale = np.sqrt(1.0 / n_in)
        return rng.uniform(-scale, scale, size=(n_in, n_out))

    return {
        "enc_w1": layer(FEATURE_DIM, hidden), "enc_b1": np.zeros(hidden),
        "enc_w2": layer(hidden, hidden), "enc_b2": np.zeros(hidden),
        "enc_wm": layer(hidden, LATENT_DIM), "enc_bm": np.zeros(LATENT_DIM),
        "enc_wv": layer(hidden, LATENT_DIM), "enc_bv": np.zeros(LATENT_DIM),
        "dec_w1": layer(LATENT_DIM + FEATURE_DIM, hidden), "dec_b1": np.zeros(hidden),
        "dec_w2": layer(hidden, hidden), "dec_b2": np.zeros(hidden),
        "dec_w3": layer(hidden, ACTION_DIM), "dec_b3": np.zeros(ACTION_DIM),
    }


def _encode(weights: dict, x: np.ndarray):
    h1 = np.tanh(x @ weights["enc_w1"] + weights["enc_b1"])
    h2 = np.tanh(h1 @ weights["enc_w2"] + weights["enc_b2"])
    mu = h2 @ weights["enc_wm"] + weights["enc_bm"]
    logvar = np.clip(h2 @ weights["enc_wv"] + weights["enc_bv"], -10.0, 10.0)
    return h1, h2, mu, logvar


def _decode(weights: dict, z: np.ndarray, x: np.ndarray):
    d0 = np.concatenate([z, x], axis=1)
    g1 = np.tanh(d0 @ weights["dec_w1"] + weights["dec_b1"])
    g2 = np.tanh(g1 @ weights["dec_w2"] + weights["dec_b2"])
    out = g2 @ weights["dec_w3"] + weights["dec_b3"]
    return d0, g1, g2, out


def cvae_loss_and_grads(weights: dict, x: np.ndarray, a: np.ndarray,
                        eps: np.ndarray, beta: float):
    """Full-batch loss (reconstruction MSE + beta * KL) and exact gradients."""
    n = len(x)
    h1, h2, mu, logvar = _encode(weights, x)
    sigma = np.exp(0.5 * logvar)
    z = mu + sigma * eps
    d0, g1, g2, out = _decode(weights, z, x)

    err = out - a
    recon = float(np.mean(err**2))
    kl_terms = 0.5 * (mu**2 + np.exp(logvar) - 1.0 - logvar)
    kl = float(np.mean(np.sum(kl_terms, axis=1)))
    loss = recon + beta * kl

    grads = {}
    # Decoder backward.
    d_out = 2.0 * err / err.size
    grads["dec_w3"] = g2.T @ d_out
    grads["dec_b3"] = d_out.sum(axis=0)
    d_g2 = d_out @ weights["dec_w3"].T
    d_p2 = d_g2 * (1.0 - g2**2)
    grads["dec_w2"] = g1.T @ d_p2
    grads["dec_b2"] = d_p2.sum(axis=0)
    d_g1 = d_p2 @ weights["dec_w2"].T
    d_p1 = d_g1 * (1.0 - g1**2)
    grads["dec_w1"] = d0.T @ d_p1
    grads["dec_b1"] = d_p1.sum(axis=0)
    d_d0 = d_p1 @ weights["dec_w1"].T
    d_z = d_d0[:, :LATENT_DIM]

    # Latent reparameterization and KL contributions.
    d_mu = d_z + beta * mu / n
    d_logvar = d_z * eps * sigma * 0.5 + beta * 0.5 * (np.exp(logvar) - 1.0) / n

    # Encoder backward.
    grads["enc_wm"] = h2.T @ d_mu
    grads["enc_bm"] = d_mu.sum(axis=0)
    grads["enc_wv"] = h2.T @ d_logvar
    grads["enc_bv"] = d_logvar.sum(axis=0)
    d_h2 = d_mu @ weights["enc_wm"].T + d_logvar @ weights["enc_wv"].T
    d_q2 = d_h2 * (1.0 - h2**2)
    grads["enc_w2"] = h1.T @ d_q2
    grads["enc_b2"] = d_q2.sum(axis=0)
    d_h1 = d_q2 @ weights["enc_w2"].T
    d_q1 = d_h1 * (1.0 - h1**2)
    grads["enc_w1"] = x.T @ d_q1
    grads["enc_b1"] = d_q1.sum(axis=0)

    return loss, recon, kl, grads


def train_cvae(data: DemoDataset, phase: RetractionPhase,
               config: TrainConfig | None = None) -> CvaeParams:
    """Train the per-phase action generator by full-batch gradient descent.

    Reparameterization noise is drawn once per record and frozen for the
    whole run, which keeps training deterministic per seed and lets the
    decoder attach distinct actions to distinct latents even when their
    conditioning features coincide.
    """
    config = config or TrainConfig()
    subset = data.phase_subset(phase)
    if len(subset) < 20:
        raise ValidationError(
            f"{phase.value}: {len(subset)} demonstrations; need at least 20"
        )
    stats = data.standardization
    x = stats.encode_features(subset.features)
    a = stats.encode_actions(subset.actions)
    rng = np.random.default_rng(config.seed)
    weights = _init_weights(config.hidden, rng)
    eps = rng.normal(size=(len(x), LATENT_DIM))

    history = []
    for epoch in range(config.epochs):
        loss, recon, kl, grads = cvae_loss_and_grads(weights, x, a, eps, config.beta)
        if not np.isfinite(loss) or loss > 1e15:
            raise TrainingDivergedError(epoch)
        norm = float(np.sqrt(sum(np.sum(g**2) for g in grads.values())))
        scale = config.learning_rate
        if norm > config.clip_norm:
            scale *= config.clip_norm / norm
        for k in weights:
            weights[k] = weights[k] - scale * grads[k]
        if epoch % 50 == 0 or epoch == config.epochs - 1:
            history.append({"epoch": epoch, "loss": loss, "recon": recon, "kl": kl})

    return CvaeParams(
        phase=phase,
        weights=weights,
        standardization=stats,
        config=config,
        loss_history=history,
    )


def reconstruction_rms_mm(params: CvaeParams, data: DemoDataset) -> float:
    """RMS action reconstruction error in millimeters on the phase subset."""
    subset = data.phase_subset(params.phase)
    stats = params.standardization
    x = stats.encode_features(subset.features)
    _, _, mu, _ = _encode(params.weights, x)
    _, _, _, out = _decode(params.weights, mu, x)
    decoded = stats.decode_actions(out)
    return float(np.sqrt(np.mean((decoded - subset.actions) ** 2)))


def _clamp_action(raw: np.ndarray, config: TrainConfig) -> PushAction:
    start, end = raw[:3], raw[3:]
    vec = end - start
    length = float(np.linalg.norm(vec))
    if length < config.min_push_mm:
        direction = vec / length if length > 1e-12 else np.array([0.0, 0.0, 1.0])
        end = start + config.min_push_mm * direction
    elif length > config.max_push_mm:
        end = start + vec * (config.max_push_mm / length)
    return PushAction(start=start, end=end)


def sample_actions(params: CvaeParams, features, count: int, seed: int = 0) -> CandidateSet:
    """Draw `count` latents from the conditional Gaussian for this scene,
    decode each to a push action, and rank by latent log-density."""
    if count < 1:
        raise ValidationError("count must be >= 1")
    features = np.asarray(features, dtype=float).reshape(1, FEATURE_DIM)
    _, _, mu, logvar = _encode(params.weights, features)
    sigma = np.exp(0.5 * logvar)
    rng = np.random.default_rng(seed)
    z = mu + sigma * rng.normal(size=(count, LATENT_DIM))
    x_rep = np.repeat(features, count, axis=0)
    _, _, _, out = _decode(params.weights, z, x_rep)
    decoded = params.standardization.decode_actions(out)
    log_det = float(np.sum(np.log(sigma)))
    log_density = (
        -0.5 * np.sum(((z - mu) / sigma) ** 2, axis=1)
        - log_det - 0.5 * LATENT_DIM * np.log(2 * np.pi)
    )
    order = np.argsort(-log_density, kind="stable")
    candidates = tuple(
        Candidate(
            action=_clamp_action(decoded[i], params.config),
            latent=z[i].copy(),
            log_density=float(log_density[i]),
        )
        for i in order
    )
    return CandidateSet(candidates=candidates)


def select_action(candidates: CandidateSet, rank: int = 0) -> PushAction:
    """Rank-th most likely candidate (0 = most likely); pure lookup."""
    if rank < 0 or rank >= len(candidates):
        raise ValidationError(f"rank {rank} out of range for {len(candidates)} candidates")
    return candidates[rank].action


# -- scene features -----------------------------------------------------------


@dataclass(frozen=True)
class SceneInputs:
    """What the simulator exposes for feature extraction."""

    phase: str
    cuts_done_in_phase: int
    cuts_total_in_phase: int
    median_offset_scope: np.ndarray
    retraction_magnitude: float


CUT_PHASE_TO_RETRACTION = {
    "left_trough": RetractionPhase.LEFT_TROUGH,
    "right_trough": RetractionPhase.RIGHT_TROUGH,
    "median_dissection": RetractionPhase.MIDDLE_LIFT,
}


def raw_scene_features(inputs: SceneInputs) -> np.ndarray:
    """Deterministic 8-vector: phase one-hot (3), cuts-completed fraction
    (1), median centroid offset in the scope frame (3), retraction
    displacement magnitude (1)."""
    phase = CUT_PHASE_TO_RETRACTION.get(inputs.phase)
    if phase is None:
        phase = RetractionPhase(inputs.phase)
    one_hot = np.zeros(3)
    one_hot[list(RetractionPhase).index(phase)] = 1.0
    total = max(1, inputs.cuts_total_in_phase)
    fraction = inputs.cuts_done_in_phase / total
    offset = np.asarray(inputs.median_offset_scope, dtype=float).reshape(3)
    return np.concatenate([one_hot, [fraction], offset, [inputs.retraction_magnitude]])


def summarize_scene(state, standardization: Standardization | None = None) -> np.ndarray:
    """Scene features for a live procedure state (or SceneInputs),
    standardized with the dataset statistics when provided."""
    inputs = state if isinstance(state, SceneInputs) else state.scene_inputs()
    raw = raw_scene_features(inputs)
    if standardization is None:
        return raw
    return standardization.encode_features(raw)


# -- demonstrations -----------------------------------------------------------


def save_demos(data: DemoDataset, path) -> None:
    with open(path, "w") as fh:
        for i in range(len(data)):
            fh.write(json.dumps({
                "phase": str(data.phases[i]),
                "features": data.features[i].tolist(),
                "p_start": data.actions[i, :3].tolist(),
                "p_end": data.actions[i, 3:].tolist(),
            }) + "\n")


def load_demos(path) -> DemoDataset:
    features, actions, phases = [], [], []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        features.append(rec["features"])
        actions.append(rec["p_start"] + rec["p_end"])
        phases.append(rec["phase"])
    return DemoDataset(
        features=np.asarray(features),
        actions=np.asarray(actions),
        phases=np.asarray(phases),
    )


def make_synthetic_demos(seed: int = 0, total: int = 211) -> DemoDataset:
    """Synthetic demonstration corpus: push actions as a smooth per-phase
    function of the scene features plus small noise, split near-evenly
    across the three retraction phases."""
    rng = np.random.default_rng(seed)
    counts = [total // 3, total // 3, total - 2 * (total // 3)]
    base_dirs = {
        RetractionPhase.LEFT_TROUGH: np.array([0.0, -6.0, 3.0]),
        RetractionPhase.RIGHT_TROUGH: np.array([0.0, 6.0, 3.0]),
        RetractionPhase.MIDDLE_LIFT: np.array([0.0, 0.0, 7.0]),
    }
    features, actions, phases = [], [], []
    for phase, n in zip(RetractionPhase, counts):
        for _ in range(n):
            inputs = SceneInputs(
                phase=phase.value,
                cuts_done_in_phase=int(rng.integers(0, 40)),
                cuts_total_in_phase=40,
                median_offset_scope=rng.normal(scale=2.0, size=3) + [0.0, 0.0, -12.0],
                retraction_magnitude=float(rng.uniform(0.0, 6.0)),
            )
            raw = raw_scene_features(inputs)
            start = raw[4:7] + np.array([0.0, 0.0, 4.0]) + rng.normal(scale=0.4, size=3)
            push = base_dirs[phase] * (0.7 + 0.3 * raw[3]) + rng.normal(scale=0.5, size=3)
            features.append(raw)
            actions.append(np.concatenate([start, start + push]))
            phases.append(phase.value)
    return DemoDataset(
        features=np.asarray(features),
        actions=np.asarray(actions),
        phases=np.asarray(phases),
    )
