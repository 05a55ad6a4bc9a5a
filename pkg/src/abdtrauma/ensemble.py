"""Slice-level averaging, patient-level max aggregation, cross-model averaging and folds.

Probability containers are plain dicts:

* slice probabilities: ``{group: array (n_slices, n_states)}``
* patient probabilities: ``{group: array (n_states,)}``
* a prediction set: ``{study_id: patient probabilities}``
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from abdtrauma.errors import ContractError
from abdtrauma.rawio import dump_json, load_json
from abdtrauma.schema import LabelSchema

SliceProbs = dict[str, np.ndarray]
PatientProbs = dict[str, np.ndarray]
PredictionSet = dict[str, PatientProbs]


def _stack_mean(arrays: Sequence[np.ndarray]) -> np.ndarray:
    # fixed left-to-right summation, then one division
    total = np.array(arrays[0], dtype=float, copy=True)
    for a in arrays[1:]:
        total = total + np.asarray(a, dtype=float)
    return total / len(arrays)


def slice_ensemble(preds: Sequence[SliceProbs]) -> SliceProbs:
    """Mean over K models of per-slice state probabilities."""
    if not preds:
        raise ContractError("slice_ensemble needs at least one model")
    groups = list(preds[0])
    for p in preds[1:]:
        if list(p) != groups:
            raise ContractError(f"group mismatch: {list(p)} vs {groups}")
        for g in groups:
            if np.shape(p[g]) != np.shape(preds[0][g]):
                raise ContractError(
                    f"group {g!r}: slice array shape {np.shape(p[g])} != {np.shape(preds[0][g])}"
                )
    return {g: _stack_mean([p[g] for p in preds]) for g in groups}


def patient_aggregate(slices: SliceProbs, schema: LabelSchema) -> PatientProbs:
    """Max over slices for every non-healthy state.

    The healthy state becomes 1 - (largest non-healthy maximum), clipped to
    [0, 1], and the group is renormalised to sum to 1.
    """
    out = {}
    for g in schema.groups:
        p = np.asarray(slices[g.name], dtype=float)
        if p.ndim != 2 or p.shape[0] == 0:
            raise ContractError(f"group {g.name!r}: need at least one slice, got shape {p.shape}")
        if p.shape[1] != g.n_states:
            raise ContractError(f"group {g.name!r}: {p.shape[1]} states, schema has {g.n_states}")
        agg = p.max(axis=0)
        sick = [s for s in range(g.n_states) if s != g.healthy]
        agg[g.healthy] = np.clip(1.0 - agg[sick].max(), 0.0, 1.0)
        out[g.name] = agg / agg.sum()
    return out


def final_ensemble(patients: Sequence[PredictionSet]) -> PredictionSet:
    """Mean over N models of patient-level probabilities."""
    if not patients:
        raise ContractError("final_ensemble needs at least one model")
    studies = sorted(patients[0])
    for p in patients[1:]:
        if sorted(p) != studies:
            missing = sorted(set(studies) ^ set(p))
            raise ContractError(f"study sets differ between models: {missing[:5]}")
    out = {}
    for sid in studies:
        groups = list(patients[0][sid])
        for p in patients[1:]:
            if list(p[sid]) != groups:
                raise ContractError(f"study {sid}: group mismatch")
        out[sid] = {g: _stack_mean([p[sid][g] for p in patients]) for g in groups}
    return out


def integrate(per_model_slices: Sequence[dict[str, SliceProbs]], schema: LabelSchema,
              blocks: Sequence[Sequence[int]] | None = None) -> PredictionSet:
    """Slice ensemble within each block of models, max aggregation, then mean over blocks.

    ``per_model_slices[k]`` maps study id to that model's slice probabilities.
    Without ``blocks`` every model forms its own block.
    """
    if blocks is None:
        blocks = [[k] for k in range(len(per_model_slices))]
    patient_sets = []
    for block in blocks:
        models = [per_model_slices[k] for k in block]
        studies = sorted(models[0])
        patient_sets.append(
            {sid: patient_aggregate(slice_ensemble([m[sid] for m in models]), schema) for sid in studies}
        )
    return final_ensemble(patient_sets)


# ---------------------------------------------------------------------------
# folds

FULL = "full"


@dataclass
class FoldSpec:
    k: Union[int, str]
    study_ids: list[str]
    folds: list[list[str]] = field(default_factory=list)  # validation ids per fold
    seed: int = 0

    @property
    def n_models(self) -> int:
        return 1 if self.k == FULL else len(self.folds)

    def val_ids(self, i: int) -> list[str]:
        return [] if self.k == FULL else list(self.folds[i])

    def train_ids(self, i: int) -> list[str]:
        held = set(self.val_ids(i))
        return [s for s in self.study_ids if s not in held]

    def to_dict(self) -> dict:
        return {"k": self.k, "seed": self.seed, "study_ids": self.study_ids, "folds": self.folds}

    @classmethod
    def from_dict(cls, d: dict) -> "FoldSpec":
        return cls(d["k"], list(d["study_ids"]), [list(f) for f in d["folds"]], int(d.get("seed", 0)))

    def save(self, path) -> None:
        dump_json(path, self.to_dict())

    @classmethod
    def load(cls, path) -> "FoldSpec":
        return cls.from_dict(load_json(Path(path)))


def make_folds(study_ids: Sequence[str], k: Union[int, str], seed: int = 0) -> FoldSpec:
    """Seeded shuffle, then round-robin assignment of studies to ``k`` folds."""
    ids = list(study_ids)
    if len(set(ids)) != len(ids):
        raise ContractError("study ids must be unique")
    if k == FULL:
        if not ids:
            raise ContractError("no studies to train on")
        return FoldSpec(FULL, ids, [], seed)
    k = int(k)
    if k < 2:
        raise ContractError("fold count must be >= 2 (or 'full')")
    if k > len(ids):
        raise ContractError(f"{k} folds requested for only {len(ids)} studies")
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    folds = [shuffled[i::k] for i in range(k)]
    return FoldSpec(k, ids, folds, seed)


# ---------------------------------------------------------------------------
# prediction files


def predictions_to_dict(model: str, schema: LabelSchema, patients: PredictionSet,
                        slices: dict[str, SliceProbs] | None = None) -> dict:
    d = {
        "model": model,
        "schema": schema.to_dict(),
        "studies": {
            sid: {g: [float(x) for x in np.asarray(v)] for g, v in patients[sid].items()}
            for sid in sorted(patients)
        },
    }
    if slices is not None:
        d["slices"] = {
            sid: {g: np.asarray(v, dtype=float).tolist() for g, v in slices[sid].items()}
            for sid in sorted(slices)
        }
    return d


def save_predictions(path, model: str, schema: LabelSchema, patients: PredictionSet,
                     slices: dict[str, SliceProbs] | None = None) -> None:
    dump_json(path, predictions_to_dict(model, schema, patients, slices))


def load_predictions(path) -> tuple[str, LabelSchema, PredictionSet, dict[str, SliceProbs] | None]:
    d = load_json(Path(path))
    schema = LabelSchema.from_dict(d["schema"])
    patients = {sid: {g: np.asarray(v, dtype=float) for g, v in groups.items()} for sid, groups in d["studies"].items()}
    slices = None
    if "slices" in d:
        slices = {sid: {g: np.asarray(v, dtype=float) for g, v in groups.items()} for sid, groups in d["slices"].items()}
    return d["model"], schema, patients, slices
