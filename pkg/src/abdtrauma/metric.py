"""Composite weighted log-loss score over label groups plus an any-injury label."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from abdtrauma.errors import ContractError, DegenerateInputError
from abdtrauma.schema import LabelSchema

CLIP = 1e-15
SAMPLE_MODES = ("study", "study_state")


def normalize_probs(p, uniform_fallback: bool = False) -> np.ndarray:
    """Divide a group's state values by their sum."""
    p = np.asarray(p, dtype=float)
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ContractError("probabilities must be finite and non-negative")
    total = p.sum(axis=-1, keepdims=True)
    if np.any(total == 0):
        if not uniform_fallback:
            raise DegenerateInputError("all-zero probability group cannot be normalized")
        p = np.where(total == 0, 1.0, p)
        total = p.sum(axis=-1, keepdims=True)
    return p / total


def group_log_loss(y, p, w, clip: float = CLIP, normalize_weights: bool = False) -> float:
    """-(1/N) * sum_i w_i [y_i log p_i + (1 - y_i) log(1 - p_i)].

    With ``normalize_weights`` the sum is divided by sum(w) instead of N.
    """
    y = np.asarray(y, dtype=float).ravel()
    p = np.asarray(p, dtype=float).ravel()
    w = np.asarray(w, dtype=float).ravel()
    if not (len(y) == len(p) == len(w)):
        raise ContractError(f"length mismatch: y={len(y)}, p={len(p)}, w={len(w)}")
    if len(y) == 0:
        raise ContractError("no samples")
    p = np.clip(p, clip, 1.0 - clip)
    terms = w * (y * np.log(p) + (1.0 - y) * np.log(1.0 - p))
    denom = w.sum() if normalize_weights else len(y)
    return float(-terms.sum() / denom)


def any_injury(patient: Mapping[str, np.ndarray], schema: LabelSchema) -> float:
    """Largest (1 - healthy probability) over the schema's groups."""
    return float(max(1.0 - float(np.asarray(patient[g.name])[g.healthy]) for g in schema.groups))


def final_score(group_losses: Sequence[float], any_loss: float) -> float:
    if len(group_losses) == 0:
        raise ContractError("at least one group loss is required")
    vals = [float(x) for x in group_losses] + [float(any_loss)]
    return sum(vals) / len(vals)


@dataclass
class MetricReport:
    group_losses: dict[str, float]
    any_injury_loss: float
    final_score: float
    n_samples: dict[str, int]
    settings: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "group_losses": dict(self.group_losses),
            "any_injury_loss": self.any_injury_loss,
            "final_score": self.final_score,
            "n_samples": dict(self.n_samples),
            "settings": dict(self.settings),
        }


def _binarize(true_states: np.ndarray, probs: np.ndarray, weights: np.ndarray, mode: str):
    """Per-sample (y, p, w) arrays for one multi-state group."""
    n, s = probs.shape
    if mode == "study":
        rows = np.arange(n)
        return np.ones(n), probs[rows, true_states], weights[true_states]
    onehot = np.zeros((n, s))
    onehot[np.arange(n), true_states] = 1.0
    return onehot.ravel(), probs.ravel(), np.tile(weights, n)


def evaluate(preds: Mapping[str, Mapping[str, np.ndarray]], truth: Mapping[str, Mapping[str, int]],
             schema: LabelSchema, clip: float = CLIP, normalize_weights: bool = False,
             sample_mode: str = "study", uniform_fallback: bool = False,
             any_injury_weights: tuple[float, float] = (1.0, 1.0)) -> MetricReport:
    """Normalise, score each group, derive and score any-injury, average.

    ``sample_mode="study"`` scores one true-state-vs-rest sample per study;
    ``"study_state"`` scores every (study, state) pair as a binary sample.
    """
    if sample_mode not in SAMPLE_MODES:
        raise ContractError(f"sample_mode must be one of {SAMPLE_MODES}")
    studies = sorted(truth)
    missing = [s for s in studies if s not in preds]
    if missing:
        raise ContractError(f"predictions missing for studies: {missing}")
    extra = sorted(set(preds) - set(truth))
    if extra:
        raise ContractError(f"predictions for unknown studies: {extra}")

    normed = {}
    for sid in studies:
        normed[sid] = {}
        for g in schema.groups:
            if g.name not in preds[sid]:
                raise ContractError(f"study {sid}: no prediction for group {g.name!r}")
            p = np.asarray(preds[sid][g.name], dtype=float)
            if p.shape != (g.n_states,):
                raise ContractError(f"study {sid}, group {g.name!r}: expected {g.n_states} states, got {p.shape}")
            normed[sid][g.name] = normalize_probs(p, uniform_fallback)

    group_losses, counts = {}, {}
    for g in schema.groups:
        states = np.array([int(truth[sid][g.name]) for sid in studies])
        if np.any((states < 0) | (states >= g.n_states)):
            raise ContractError(f"group {g.name!r}: invalid true state index")
        probs = np.stack([normed[sid][g.name] for sid in studies])
        y, p, w = _binarize(states, probs, np.asarray(g.weights), sample_mode)
        group_losses[g.name] = group_log_loss(y, p, w, clip, normalize_weights)
        counts[g.name] = len(y)

    any_y = np.array(
        [float(any(int(truth[sid][g.name]) != g.healthy for g in schema.groups)) for sid in studies]
    )
    any_p = np.array([any_injury(normed[sid], schema) for sid in studies])
    any_w = np.where(any_y > 0, any_injury_weights[1], any_injury_weights[0])
    any_loss = group_log_loss(any_y, any_p, any_w, clip, normalize_weights)
    counts["any_injury"] = len(studies)

    score = final_score([group_losses[g.name] for g in schema.groups], any_loss)
    settings = {
        "clip": clip,
        "normalize_weights": normalize_weights,
        "sample_mode": sample_mode,
        "uniform_fallback": uniform_fallback,
        "any_injury_weights": list(any_injury_weights),
        "weights": {g.name: list(g.weights) for g in schema.groups},
    }
    return MetricReport(group_losses, any_loss, score, counts, settings)
