import json

import numpy as np
import pytest

from abdtrauma.errors import ConfigurationError, ContractError
from abdtrauma.phantom import PhantomConfig, generate_study, study_seed
from abdtrauma.schema import default_schema
from abdtrauma.segmenter3d import (
    SegConfig,
    dice_score,
    mask_to_crops,
    oracle_masks,
    predict_mask,
    resample_nearest3d,
    save_segmentation,
    threshold_probs,
    train_segmenter,
)
from abdtrauma.volumeprep import PrepConfig, preprocess_study


def test_resample_roundtrip_identity():
    a = np.random.default_rng(0).random((6, 7, 8))
    np.testing.assert_array_equal(resample_nearest3d(a, a.shape), a)
    assert resample_nearest3d(a, (3, 3, 3)).shape == (3, 3, 3)


def test_threshold():
    probs = np.array([[[[0.2, 0.6]]], [[[0.5, 0.51]]]])
    out = threshold_probs(probs, ["a", "b"], 0.5)
    np.testing.assert_array_equal(out["a"], [[[0, 1]]])
    np.testing.assert_array_equal(out["b"], [[[0, 1]]])
    with pytest.raises(ContractError):
        threshold_probs(probs, ["a", "b"], 1.0)


def test_crops_and_degenerate_fallback(tmp_path):
    vol = np.random.default_rng(0).random((10, 10, 10))
    full = np.zeros(vol.shape, np.uint8)
    full[4:6, 4:6, 4:6] = 1
    crops = mask_to_crops({"a": full, "b": np.zeros_like(full)}, vol, margin=1)
    assert crops[0].box == ((3, 6),) * 3 and not crops[0].degenerate
    assert crops[1].degenerate and crops[1].volume.shape == vol.shape
    save_segmentation(tmp_path, "s0", crops, {"a": full})
    doc = json.loads((tmp_path / "seg_s0.json").read_text())
    assert [o["degenerate"] for o in doc["organs"]] == [False, True]
    assert (tmp_path / "segmask_s0_a.raw").stat().st_size == full.size


def test_dice_score():
    a = np.zeros(8)
    b = np.zeros(8)
    a[:4], b[2:6] = 1, 1
    assert dice_score(a, b) == 0.5
    assert dice_score(np.zeros(3), np.zeros(3)) == 1.0


def test_oracle_masks_give_exact_visibility():
    schema = default_schema()
    s = generate_study(4, PhantomConfig(injury_probability=1.0), schema)
    masks = oracle_masks(s)
    for o in s.organ_masks:
        assert masks[o].tobytes() == s.organ_masks[o].tobytes()
    a = preprocess_study(s.volume, masks, schema, s.true_states(), PrepConfig())
    b = preprocess_study(s.volume, s.organ_masks, schema, s.true_states(), PrepConfig())
    for g in a.slice_labels:
        assert a.slice_labels[g].tobytes() == b.slice_labels[g].tobytes()


def test_config_validation():
    with pytest.raises(ConfigurationError):
        SegConfig(size=30).validate()
    with pytest.raises(ConfigurationError):
        SegConfig.from_dict({"depth": 3})


def test_empty_dataset():
    with pytest.raises(ContractError):
        train_segmenter([], SegConfig(steps=1))


def test_short_training_learns_and_is_deterministic():
    schema = default_schema()
    cfg = PhantomConfig(volume_depth=32, volume_height=32, volume_width=32)
    studies = [generate_study(i, cfg, schema) for i in range(4)]
    seg_cfg = SegConfig(size=16, steps=60, widths=(8, 16, 16))
    m1 = train_segmenter(studies, seg_cfg)
    m2 = train_segmenter(studies, seg_cfg)
    assert m1.history == m2.history
    assert np.isfinite(m1.history).all()
    assert np.mean(m1.history[-10:]) < np.mean(m1.history[:10])
    masks = predict_mask(m1, studies[0].volume)
    assert set(masks) == set(studies[0].organ_masks)
    assert all(m.shape == studies[0].volume.shape and m.dtype == np.uint8 for m in masks.values())


@pytest.fixture(scope="module")
def trained_on_eight():
    schema = default_schema()
    train = [generate_study(study_seed(1, i), PhantomConfig(), schema) for i in range(8)]
    return train_segmenter(train, SegConfig())


def test_eight_studies_reach_low_dice_loss(trained_on_eight):
    assert trained_on_eight.final_loss < 0.3


def test_heldout_dice_above_half(trained_on_eight):
    schema = default_schema()
    held = [generate_study(study_seed(2, i), PhantomConfig(), schema) for i in range(4)]
    scores = []
    for s in held:
        pred = predict_mask(trained_on_eight, s.volume)
        scores += [dice_score(pred[o], s.organ_masks[o]) for o in s.organ_masks]
    assert np.mean(scores) > 0.5


def test_single_study_overfits():
    study = generate_study(study_seed(3, 0), PhantomConfig(), default_schema())
    model = train_segmenter([study], SegConfig())
    assert model.final_loss < 0.1
