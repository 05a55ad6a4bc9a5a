"""Glue between stages: masks -> preprocessing -> model tensors -> predictions -> score."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from abdtrauma import ensemble as ens
from abdtrauma.metric import MetricReport, evaluate
from abdtrauma.phantom import PhantomStudy
from abdtrauma.schema import LabelSchema
from abdtrauma.segmenter3d import SegModel, oracle_masks, predict_mask
from abdtrauma.traumanet import Checkpoint, StudyTensors, TraumaNet, predict_study, to_study_tensors
from abdtrauma.volumeprep import PrepConfig, preprocess_study


def study_masks(study: PhantomStudy, seg_model: SegModel | None = None, threshold: float = 0.5) -> dict[str, np.ndarray]:
    """Oracle masks when ``seg_model`` is None, otherwise thresholded predictions."""
    if seg_model is None:
        return oracle_masks(study)
    return predict_mask(seg_model, study.volume, threshold)


def prepare(studies: Sequence[PhantomStudy], schema: LabelSchema, prep: PrepConfig = PrepConfig(),
            seg_model: SegModel | None = None, threshold: float = 0.5, use_injuries: bool = True) -> list[StudyTensors]:
    """Preprocess every study into model tensors.

    Crops and slice positions come from the chosen masks; aux targets and
    slice visibility always use them too, so oracle vs trained mode differ
    only through the masks.
    """
    out = []
    for s in studies:
        masks = study_masks(s, seg_model, threshold)
        injuries = s.lesion_masks if use_injuries else None
        seq = preprocess_study(s.volume, masks, schema, s.true_states(), prep, injuries)
        out.append(to_study_tensors(s.study_id, seq, s.true_states(), schema))
    return out


def predict_slices(model: TraumaNet, data: Sequence[StudyTensors], schema: LabelSchema) -> dict[str, ens.SliceProbs]:
    return {s.study_id: predict_study(model, s.triplets, schema) for s in data}


def patient_predictions(model: TraumaNet, data: Sequence[StudyTensors], schema: LabelSchema) -> ens.PredictionSet:
    return {sid: ens.patient_aggregate(sl, schema) for sid, sl in predict_slices(model, data, schema).items()}


def truth_of(data: Sequence[StudyTensors]) -> dict[str, dict[str, int]]:
    return {s.study_id: dict(s.true_states) for s in data}


def score(preds: ens.PredictionSet, data: Sequence[StudyTensors], schema: LabelSchema) -> MetricReport:
    return evaluate(preds, truth_of(data), schema)


def out_of_fold(checkpoints: Sequence[Checkpoint], data: Sequence[StudyTensors], schema: LabelSchema) -> ens.PredictionSet:
    """Each study predicted by the fold model that did not train on it."""
    by_id = {s.study_id: s for s in data}
    preds = {}
    for ck in checkpoints:
        val = [by_id[sid] for sid in ck.manifest["val_ids"]]
        preds.update(patient_predictions(ck.model, val, schema))
    return preds


def ensemble_predictions(checkpoints: Sequence[Checkpoint], data: Sequence[StudyTensors],
                         schema: LabelSchema) -> ens.PredictionSet:
    """Max-aggregate each model's slices, then average patient probabilities over models."""
    per_model = [predict_slices(ck.model, data, schema) for ck in checkpoints]
    return ens.integrate(per_model, schema)


def prior_predictions(train_states: Sequence[dict[str, int]], study_ids: Sequence[str],
                      schema: LabelSchema) -> ens.PredictionSet:
    """Constant class-frequency baseline (add-one smoothed) for every study."""
    prior = {}
    for g in schema.groups:
        counts = np.ones(g.n_states)
        for t in train_states:
            counts[t[g.name]] += 1
        prior[g.name] = counts / counts.sum()
    return {sid: {g: p.copy() for g, p in prior.items()} for sid in study_ids}
