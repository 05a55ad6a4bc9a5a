"""3D organ segmentation: a small encoder-decoder, mask prediction and organ crops."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from abdtrauma import neuralcore as nc
from abdtrauma.errors import ConfigurationError, ContractError
from abdtrauma.phantom import PhantomStudy
from abdtrauma.rawio import dump_json, write_raw
from abdtrauma.volumeprep import crop_to_box, mask_box

MIN_SIDE = 8


@dataclass(frozen=True)
class SegConfig:
    size: int = 32
    widths: tuple[int, int, int] = (16, 32, 32)
    steps: int = 200
    batch_size: int = 2
    lr: float = 0.1
    momentum: float = 0.9
    clip_norm: float = 0.5
    # fixed input affine: (x - input_center) * input_scale
    input_center: float = 0.2
    input_scale: float = 10.0
    seed: int = 0
    threshold: float = 0.5
    margin: int = 2
    dtype: str = "float32"

    def validate(self) -> None:
        if self.size < 4 or self.size % 4:
            raise ConfigurationError("segmenter size must be a positive multiple of 4")
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigurationError("steps must be >= 0 and batch_size >= 1")
        if not 0 < self.threshold < 1:
            raise ConfigurationError("threshold must lie in (0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> "SegConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown segmenter config keys: {sorted(unknown)}")
        d = dict(d)
        if "widths" in d:
            d["widths"] = tuple(d["widths"])
        return cls(**d)


def _block(cin, cout):
    return nn.Sequential(
        nn.Conv3d(cin, cout, 3, padding=1, dtype=nc.DTYPE),
        nn.ReLU(),
    )


class SegModel(nn.Module):
    """Two-level 3D encoder-decoder with skip connections and sigmoid organ outputs."""

    def __init__(self, organs: Sequence[str], config: SegConfig = SegConfig()):
        super().__init__()
        self.organs = list(organs)
        self.config = config
        c1, c2, c3 = config.widths
        self.enc1 = _block(1, c1)
        self.enc2 = _block(c1, c2)
        self.mid = _block(c2, c3)
        self.dec2 = _block(c3 + c2, c2)
        self.dec1 = _block(c2 + c1, c1)
        self.head = nn.Conv3d(c1, len(self.organs), 1, dtype=nc.DTYPE)
        for m in self.modules():
            if isinstance(m, nn.Conv3d):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                nn.init.zeros_(m.bias)
        nn.init.normal_(self.head.weight, std=0.01)
        self.history: list[float] = []
        self.final_loss = float("nan")

    def forward(self, x):
        x = (x - self.config.input_center) * self.config.input_scale
        e1 = self.enc1(x)
        e2 = self.enc2(nc.max_pool3d(e1))
        m = self.mid(nc.max_pool3d(e2))
        d2 = self.dec2(torch.cat([nc.upsample2(m), e2], dim=1))
        d1 = self.dec1(torch.cat([nc.upsample2(d2), e1], dim=1))
        return nc.sigmoid(self.head(d1))


def _axis_index(n_out: int, n_in: int) -> np.ndarray:
    return np.minimum((np.arange(n_out) * n_in) // n_out, n_in - 1)


def resample_nearest3d(array: np.ndarray, shape: Sequence[int]) -> np.ndarray:
    """Nearest-neighbour resampling of the last three axes to ``shape``."""
    d, h, w = array.shape[-3:]
    i = _axis_index(shape[0], d)
    j = _axis_index(shape[1], h)
    k = _axis_index(shape[2], w)
    return array[..., i[:, None, None], j[None, :, None], k[None, None, :]]


def _check_volume(volume: np.ndarray) -> np.ndarray:
    volume = np.asarray(volume)
    if volume.ndim != 3 or min(volume.shape) < MIN_SIDE:
        raise ContractError(f"volume shape {volume.shape} below segmenter minimum {MIN_SIDE} per axis")
    return volume


def _batch(studies: Sequence[PhantomStudy], organs: Sequence[str], size: int, dtype):
    x = np.stack([resample_nearest3d(_check_volume(s.volume), (size,) * 3)[None] for s in studies])
    y = np.stack(
        [np.stack([resample_nearest3d(s.organ_masks[o], (size,) * 3) for o in organs]) for s in studies]
    )
    return nc.as_tensor(x, dtype=dtype), nc.as_tensor(y, dtype=dtype)


def seg_dice(probs, target):
    """Mean over organ channels of the soft Dice loss; probs/target are (B, C, D, H, W)."""
    c = probs.shape[1]
    return nc.aux_seg_loss([probs[:, k] for k in range(c)], [target[:, k] for k in range(c)]) / c


def train_segmenter(studies: Sequence[PhantomStudy], config: SegConfig = SegConfig(),
                    organs: Sequence[str] | None = None) -> SegModel:
    """SGD on the mean per-organ Dice loss at ``config.size``**3.

    ``model.history`` holds the loss at every step; ``model.final_loss`` the
    loss after the last update, evaluated on the full training set.
    """
    config.validate()
    if not studies:
        raise ContractError("cannot train a segmenter on an empty dataset")
    organs = list(organs or studies[0].organ_masks)
    torch.manual_seed(config.seed)
    model = SegModel(organs, config).to(nc.resolve_dtype(config.dtype))
    x, y = _batch(studies, organs, config.size, config.dtype)
    opt = nc.SGD(model.parameters(), lr=config.lr, momentum=config.momentum, clip_norm=config.clip_norm)
    rng = np.random.default_rng(config.seed)
    order = np.array([], dtype=int)
    for _ in range(config.steps):
        if len(order) < config.batch_size:
            order = np.concatenate([order, rng.permutation(len(studies))])
        idx, order = order[: config.batch_size], order[config.batch_size :]
        opt.zero_grad()
        loss = seg_dice(model(x[idx]), y[idx])
        loss.backward()
        opt.step()
        model.history.append(loss.item())
    with torch.no_grad():
        model.final_loss = float(seg_dice(model(x), y))
    return model


def predict_probs(model: SegModel, volume: np.ndarray) -> np.ndarray:
    """Per-organ probabilities at the volume's own resolution, (C, D, H, W)."""
    volume = _check_volume(volume)
    size = model.config.size
    dtype = next(model.parameters()).dtype
    x = nc.as_tensor(resample_nearest3d(volume, (size,) * 3)[None, None], dtype=dtype)
    with torch.no_grad():
        p = model(x)[0].double().numpy()
    return resample_nearest3d(p, volume.shape)


def threshold_probs(probs: np.ndarray, organs: Sequence[str], threshold: float = 0.5) -> dict[str, np.ndarray]:
    if not 0 < threshold < 1:
        raise ContractError("threshold must lie in (0, 1)")
    return {o: (probs[k] > threshold).astype(np.uint8) for k, o in enumerate(organs)}


def predict_mask(model: SegModel, volume: np.ndarray, threshold: float = 0.5) -> dict[str, np.ndarray]:
    return threshold_probs(predict_probs(model, volume), model.organs, threshold)


def oracle_masks(study: PhantomStudy) -> dict[str, np.ndarray]:
    return dict(study.organ_masks)


@dataclass
class OrganCrop:
    organ: str
    box: tuple[tuple[int, int], ...]
    mask: np.ndarray
    volume: np.ndarray
    degenerate: bool = False

    def to_dict(self) -> dict:
        return {"organ": self.organ, "box": [list(b) for b in self.box], "degenerate": self.degenerate}


def mask_to_crops(masks: dict[str, np.ndarray], volume: np.ndarray, margin: int = 2) -> list[OrganCrop]:
    volume = np.asarray(volume)
    crops = []
    for organ, m in masks.items():
        m = np.asarray(m)
        if m.shape != volume.shape:
            raise ContractError(f"mask {organ!r} shape {m.shape} != volume shape {volume.shape}")
        box = mask_box(m, margin)
        degenerate = box is None
        if degenerate:
            box = tuple((0, s - 1) for s in volume.shape)
        crops.append(OrganCrop(organ, box, crop_to_box(m, box).astype(np.uint8), crop_to_box(volume, box), degenerate))
    return crops


def dice_score(a: np.ndarray, b: np.ndarray) -> float:
    """Hard Dice overlap of two binary masks (1.0 when both are empty)."""
    a, b = np.asarray(a) > 0, np.asarray(b) > 0
    denom = a.sum() + b.sum()
    return 1.0 if denom == 0 else 2.0 * np.logical_and(a, b).sum() / denom


def save_segmentation(out_dir, study_id: str, crops: list[OrganCrop], masks: dict[str, np.ndarray] | None = None) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dump_json(out_dir / f"seg_{study_id}.json", {"study": study_id, "organs": [c.to_dict() for c in crops]})
    for organ, m in (masks or {}).items():
        write_raw(out_dir / f"segmask_{study_id}_{organ}.raw", m, "u1")


def seg_config_dict(config: SegConfig) -> dict:
    d = asdict(config)
    d["widths"] = list(config.widths)
    return d


__all__ = [
    "SegConfig",
    "SegModel",
    "OrganCrop",
    "train_segmenter",
    "predict_probs",
    "predict_mask",
    "oracle_masks",
    "mask_to_crops",
    "dice_score",
    "save_segmentation",
]
