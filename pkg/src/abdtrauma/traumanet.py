"""2.5D slice-sequence classifier: per-slice CNN, bidirectional GRU, auxiliary Dice heads.

Input is (B, T, 3, H, W): T slice triplets per study. The backbone runs on
every slice independently; a GRU then runs along T and a dense head emits
(B, T, n_classes) scores. Two 1x1 sigmoid heads read the conv features of
the penultimate and final backbone blocks (1/4 and 1/8 resolution) and are
trained against downsampled organ masks with Dice loss.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from abdtrauma import neuralcore as nc
from abdtrauma.ensemble import FoldSpec, SliceProbs
from abdtrauma.errors import ConfigurationError, ContractError, NumericError
from abdtrauma.rawio import load_json
from abdtrauma.schema import LabelSchema
from abdtrauma.volumeprep import TripletSequence, slice_label_targets


@dataclass(frozen=True)
class TraumaNetConfig:
    n_classes: int = 11
    n_organs: int = 4
    seq_len: int = 32
    height: int = 32
    width: int = 32
    widths: tuple[int, ...] = (8, 16, 32, 32)
    hidden: int = 32
    bidirectional: bool = True
    aux_weight: float = 1.0
    batch_size: int = 2
    epochs: int = 20
    lr: float = 0.02
    # "constant" or "cosine" (per-epoch decay from lr towards 0)
    lr_schedule: str = "cosine"
    momentum: float = 0.9
    weight_decay: float = 1e-3
    clip_norm: float = 1.0
    # fixed input affine: (x - input_center) * input_scale
    input_center: float = 0.5
    input_scale: float = 20.0
    # spatial pooling of the last block before the GRU: "mean" or "max"
    feature_pool: str = "max"
    seed: int = 0
    dtype: str = "float32"
    zero_head: bool = True

    def validate(self) -> None:
        if self.seq_len < 1:
            raise ConfigurationError("seq_len must be >= 1")
        if len(self.widths) != 4:
            raise ConfigurationError("backbone needs exactly 4 block widths")
        for side in (self.height, self.width):
            if side < 16 or side % 8:
                raise ConfigurationError("height and width must be multiples of 8 and >= 16")
        if self.aux_weight < 0:
            raise ConfigurationError("aux_weight must be non-negative")
        if self.n_classes < 2 or self.n_organs < 1:
            raise ConfigurationError("n_classes >= 2 and n_organs >= 1 required")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigurationError("lr_schedule must be 'constant' or 'cosine'")
        if self.feature_pool not in ("mean", "max"):
            raise ConfigurationError("feature_pool must be 'mean' or 'max'")
        if self.weight_decay < 0:
            raise ConfigurationError("weight_decay must be non-negative")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigurationError("batch_size >= 1 and epochs >= 0 required")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TraumaNetConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown traumanet config keys: {sorted(unknown)}")
        d = dict(d)
        if "widths" in d:
            d["widths"] = tuple(d["widths"])
        return cls(**d)

    @classmethod
    def for_schema(cls, schema: LabelSchema, n_organs: int | None = None, **kw) -> "TraumaNetConfig":
        return cls(n_classes=schema.total_states, n_organs=n_organs or len(schema.groups), **kw)


@dataclass
class TraumaNetOutput:
    class_scores: torch.Tensor  # (B, T, n_classes)
    aux_maps: list[torch.Tensor]  # [(B, T, n_organs, H/4, W/4), (B, T, n_organs, H/8, W/8)]


class TraumaNet(nn.Module):
    def __init__(self, config: TraumaNetConfig):
        super().__init__()
        config.validate()
        self.config = config
        chans = (3, *config.widths)
        self.blocks = nn.ModuleList(
            nn.Conv2d(chans[i], chans[i + 1], 3, padding=1, dtype=nc.DTYPE) for i in range(4)
        )
        self.aux_heads = nn.ModuleList(
            nn.Conv2d(chans[i + 1], config.n_organs, 1, dtype=nc.DTYPE) for i in (2, 3)
        )
        self.rnn = nc.GRU(config.widths[-1], config.hidden, config.bidirectional)
        self.head = nn.Linear(self.rnn.output_size + config.widths[-1], config.n_classes, dtype=nc.DTYPE)
        for conv in self.blocks:
            nn.init.kaiming_normal_(conv.weight, nonlinearity="relu")
            nn.init.zeros_(conv.bias)
        if config.zero_head:
            nn.init.zeros_(self.head.weight)
            nn.init.zeros_(self.head.bias)

    def forward(self, x: torch.Tensor) -> TraumaNetOutput:
        cfg = self.config
        if x.ndim != 5 or x.shape[2] != 3:
            raise ContractError(f"expected (B, T, 3, H, W) input, got {tuple(x.shape)}")
        if x.shape[3] != cfg.height or x.shape[4] != cfg.width:
            raise ContractError(f"spatial size {tuple(x.shape[3:])} != configured {(cfg.height, cfg.width)}")
        B, T = x.shape[:2]
        h = (x.reshape(B * T, *x.shape[2:]) - cfg.input_center) * cfg.input_scale
        aux = []
        for i, conv in enumerate(self.blocks):
            h = nc.relu(conv(h))
            if i >= 2:
                m = nc.sigmoid(self.aux_heads[i - 2](h))
                aux.append(m.reshape(B, T, *m.shape[1:]))
            h = nc.max_pool2d(h)
        feat = nc.reduce(h.flatten(2), cfg.feature_pool, axis=2).reshape(B, T, -1)
        seq = self.rnn(feat)
        scores = self.head(torch.cat([seq, feat], dim=-1))
        return TraumaNetOutput(scores, aux)


def downsample_masks(masks: torch.Tensor, factor: int) -> torch.Tensor:
    """Nearest-neighbour downsampling of (..., H, W) masks, binarised at 0.5."""
    return (masks[..., ::factor, ::factor] > 0.5).to(masks.dtype)


def total_loss(out: TraumaNetOutput, targets, masks, schema: LabelSchema, aux_weight: float = 1.0,
               parts: bool = False):
    """Weighted cross-entropy on slice targets plus ``aux_weight`` x summed Dice of both aux heads."""
    if aux_weight < 0:
        raise ContractError("aux_weight must be non-negative")
    targets = torch.as_tensor(targets)
    if torch.is_floating_point(targets):
        targets = targets.to(out.class_scores.dtype)
    ce = nc.weighted_ce_loss(out.class_scores, targets, schema)
    masks = torch.as_tensor(masks, dtype=out.class_scores.dtype)
    B, T = out.class_scores.shape[:2]
    if masks.shape[:3] != (B, T, out.aux_maps[0].shape[2]):
        raise ContractError(f"mask shape {tuple(masks.shape)} inconsistent with output {(B, T)}")
    trues = [downsample_masks(masks, 4), downsample_masks(masks, 8)]
    aux = nc.aux_seg_loss(out.aux_maps, trues)
    total = ce + aux_weight * aux
    return (total, ce, aux) if parts else total


# ---------------------------------------------------------------------------
# data


@dataclass
class StudyTensors:
    """Model-ready arrays for one study."""

    study_id: str
    triplets: np.ndarray  # (T, 3, H, W)
    targets: np.ndarray  # (T, n_classes) soft state distributions
    masks: np.ndarray  # (T, n_organs, H, W)
    true_states: dict[str, int] = field(default_factory=dict)


def to_study_tensors(study_id: str, seq: TripletSequence, true_states: dict[str, int],
                     schema: LabelSchema) -> StudyTensors:
    targets = slice_label_targets(seq.slice_labels, true_states, schema)
    return StudyTensors(study_id, seq.triplets, targets, seq.masks, dict(true_states))


def _stack(items: Sequence[StudyTensors], dtype):
    x = nc.as_tensor(np.stack([s.triplets for s in items]), dtype=dtype)
    y = nc.as_tensor(np.stack([s.targets for s in items]), dtype=dtype)
    m = nc.as_tensor(np.stack([s.masks for s in items]), dtype=dtype)
    return x, y, m


# ---------------------------------------------------------------------------
# training


@dataclass
class Checkpoint:
    name: str
    model: TraumaNet
    manifest: dict

    def save(self, directory) -> Path:
        directory = Path(directory) / self.name
        nc.save_checkpoint(directory, self.model, self.manifest)
        return directory


def build_model(config: TraumaNetConfig) -> TraumaNet:
    torch.manual_seed(config.seed)
    return TraumaNet(config).to(nc.resolve_dtype(config.dtype))


def evaluate_loss(model: TraumaNet, data: Sequence[StudyTensors], schema: LabelSchema,
                  aux_weight: float) -> float | None:
    if not data:
        return None
    dtype = next(model.parameters()).dtype
    total, bs = 0.0, model.config.batch_size
    with torch.no_grad():
        for i in range(0, len(data), bs):
            chunk = data[i : i + bs]
            x, y, m = _stack(chunk, dtype)
            total += float(total_loss(model(x), y, m, schema, aux_weight)) * len(chunk)
    return total / len(data)


def epoch_lr(config: TraumaNetConfig, epoch: int) -> float:
    if config.lr_schedule == "constant":
        return config.lr
    return 0.5 * config.lr * (1.0 + math.cos(math.pi * epoch / config.epochs))


def fit(train: Sequence[StudyTensors], val: Sequence[StudyTensors], schema: LabelSchema,
        config: TraumaNetConfig, name: str = "model", log=None) -> Checkpoint:
    """Train one model; deterministic given ``config.seed``."""
    if not train:
        raise ContractError(f"{name}: empty training split")
    model = build_model(config)
    dtype = next(model.parameters()).dtype
    opt = nc.SGD(model.parameters(), lr=config.lr, momentum=config.momentum, clip_norm=config.clip_norm,
                 weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)
    history = {"train": [evaluate_loss(model, train, schema, config.aux_weight)],
               "val": [evaluate_loss(model, val, schema, config.aux_weight)]}
    start = time.perf_counter()
    for epoch in range(config.epochs):
        opt.lr = epoch_lr(config, epoch)
        order = rng.permutation(len(train))
        for i in range(0, len(order), config.batch_size):
            x, y, m = _stack([train[j] for j in order[i : i + config.batch_size]], dtype)
            opt.zero_grad()
            loss = total_loss(model(x), y, m, schema, config.aux_weight)
            if not torch.isfinite(loss):
                raise NumericError(f"{name}: training loss became non-finite in epoch {epoch + 1}")
            loss.backward()
            opt.step()
        history["train"].append(evaluate_loss(model, train, schema, config.aux_weight))
        history["val"].append(evaluate_loss(model, val, schema, config.aux_weight))
        if log is not None:
            val_txt = "" if history["val"][-1] is None else f" val={history['val'][-1]:.4f}"
            log(f"{name} epoch {epoch + 1}/{config.epochs} train={history['train'][-1]:.4f}{val_txt}")
    manifest = {
        "name": name,
        "architecture": config.to_dict(),
        "schema": schema.to_dict(),
        "seed": config.seed,
        "epoch": config.epochs,
        "loss_history": history,
        "train_ids": [s.study_id for s in train],
        "val_ids": [s.study_id for s in val],
        "optimizer": {"type": "sgd-momentum", "lr": config.lr, "lr_schedule": config.lr_schedule,
                      "momentum": config.momentum, "weight_decay": config.weight_decay,
                      "clip_norm": config.clip_norm, "parameter_order": "module.parameters()"},
    }
    model.train_seconds = time.perf_counter() - start
    return Checkpoint(name, model, manifest)


def train(data: Sequence[StudyTensors], folds: FoldSpec, schema: LabelSchema, config: TraumaNetConfig,
          log=None) -> list[Checkpoint]:
    """One checkpoint per fold (a single one for ``"full"``)."""
    by_id = {s.study_id: s for s in data}
    missing = [s for s in folds.study_ids if s not in by_id]
    if missing:
        raise ContractError(f"fold spec references unknown studies: {missing[:5]}")
    out = []
    for i in range(folds.n_models):
        tr = [by_id[s] for s in folds.train_ids(i)]
        va = [by_id[s] for s in folds.val_ids(i)]
        name = "full" if folds.k == "full" else f"fold{i}"
        if not tr:
            raise ContractError(f"{name}: empty training split")
        out.append(fit(tr, va, schema, config, name=name, log=log))
    return out


def load_checkpoint(directory) -> Checkpoint:
    directory = Path(directory)
    manifest = load_json(directory / "manifest.json")
    config = TraumaNetConfig.from_dict(manifest["architecture"])
    model = TraumaNet(config)
    nc.load_into(model, directory / "params.bin")
    return Checkpoint(manifest["name"], model.to(nc.resolve_dtype(config.dtype)), manifest)


# ---------------------------------------------------------------------------
# inference


def slice_probabilities(scores: torch.Tensor, schema: LabelSchema) -> SliceProbs:
    """Per-group softmax of (T, n_classes) scores, computed in float64."""
    s = scores.detach().double()
    out, start = {}, 0
    for g in schema.groups:
        out[g.name] = nc.softmax(s[:, start : start + g.n_states], axis=-1).numpy()
        start += g.n_states
    return out


def predict_study(model: TraumaNet, triplets: np.ndarray, schema: LabelSchema) -> SliceProbs:
    triplets = np.asarray(triplets)
    cfg = model.config
    if triplets.shape != (cfg.seq_len, 3, cfg.height, cfg.width):
        raise ContractError(
            f"sequence shape {triplets.shape} != {(cfg.seq_len, 3, cfg.height, cfg.width)}"
        )
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        out = model(nc.as_tensor(triplets[None], dtype=dtype))
    return slice_probabilities(out.class_scores[0], schema)


def aux_dice(model: TraumaNet, data: Sequence[StudyTensors]) -> float:
    """Mean hard Dice of both aux heads (threshold 0.5) against downsampled organ masks."""
    dtype = next(model.parameters()).dtype
    scores = []
    with torch.no_grad():
        for s in data:
            x, _, m = _stack([s], dtype)
            out = model(x)
            for pred, f in zip(out.aux_maps, (4, 8)):
                t = downsample_masks(m, f) > 0.5
                p = pred > 0.5
                denom = int(p.sum() + t.sum())
                scores.append(1.0 if denom == 0 else 2.0 * int((p & t).sum()) / denom)
    return float(np.mean(scores))


def with_overrides(config: TraumaNetConfig, **kw) -> TraumaNetConfig:
    return replace(config, **kw)
