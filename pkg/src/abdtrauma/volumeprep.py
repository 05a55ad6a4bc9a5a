"""Preprocessing: windowing, mask cropping, 96-slice resampling, 2.5D triplets, slice labels."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from abdtrauma.errors import ConfigurationError, ContractError, DegenerateMaskError
from abdtrauma.rawio import dump_json, write_raw
from abdtrauma.schema import LabelSchema

N_SLICES = 96
N_TRIPLETS = N_SLICES - 2


def round_half_away(x) -> np.ndarray:
    """Round half away from zero; numpy's default rounds half to even."""
    x = np.asarray(x, dtype=float)
    return (np.sign(x) * np.floor(np.abs(x) + 0.5)).astype(int)


@dataclass
class CtVolume:
    data: np.ndarray
    # inclusive (lo, hi) per axis relative to the source volume; None when uncropped
    box: tuple[tuple[int, int], ...] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)


@dataclass
class SliceVolume96:
    slices: np.ndarray  # (96, H, W)
    source_indices: np.ndarray  # (96,)


@dataclass
class TripletSequence:
    triplets: np.ndarray  # (T, 3, H, W)
    center_indices: np.ndarray  # (T,) indices into the 96-slice volume
    slice_labels: dict[str, np.ndarray] = field(default_factory=dict)  # group -> (T,)
    masks: np.ndarray | None = None  # (T, n_organs, H, W) centre-slice organ masks

    def __len__(self) -> int:
        return len(self.triplets)


@dataclass
class LabelVector:
    values: np.ndarray
    patient_value: float = 1.0


def normalize_volume(raw: CtVolume, lo: float, hi: float) -> CtVolume:
    if not lo < hi:
        raise ConfigurationError(f"window requires lo < hi, got lo={lo}, hi={hi}")
    data = np.asarray(raw.data, dtype=float)
    if not np.all(np.isfinite(data)):
        raise ContractError("volume contains non-finite values")
    return CtVolume(np.clip((data - lo) / (hi - lo), 0.0, 1.0), raw.box)


def mask_box(mask: np.ndarray, margin: int) -> tuple[tuple[int, int], ...] | None:
    """Inclusive bounding box of the positive voxels, grown by ``margin`` and clipped."""
    idx = np.argwhere(np.asarray(mask) > 0)
    if len(idx) == 0:
        return None
    lo = np.maximum(idx.min(axis=0) - margin, 0)
    hi = np.minimum(idx.max(axis=0) + margin, np.asarray(mask.shape) - 1)
    return tuple((int(a), int(b)) for a, b in zip(lo, hi))


def crop_to_box(array: np.ndarray, box) -> np.ndarray:
    return array[tuple(slice(a, b + 1) for a, b in box)]


def apply_mask_crop(norm: CtVolume, mask: np.ndarray, margin: int = 2) -> CtVolume:
    """Multiply by the mask, then restrict to the mask's bounding box plus ``margin``."""
    mask = np.asarray(mask)
    if mask.shape != norm.shape:
        raise ContractError(f"mask shape {mask.shape} differs from volume shape {norm.shape}")
    if margin < 0:
        raise ConfigurationError("margin must be non-negative")
    box = mask_box(mask, margin)
    if box is None:
        raise DegenerateMaskError("mask has no positive voxels", fallback=True)
    masked = norm.data * (mask > 0)
    return CtVolume(crop_to_box(masked, box), box)


def resample_indices(depth: int, n: int = N_SLICES) -> np.ndarray:
    if depth < 1:
        raise ContractError("volume has no slices")
    if n == 1:
        return np.zeros(1, dtype=int)
    return round_half_away(np.arange(n) * (depth - 1) / (n - 1))


def resample_96(vol: CtVolume) -> SliceVolume96:
    if vol.data.ndim != 3 or vol.data.shape[0] < 1:
        raise ContractError(f"expected a non-empty 3D volume, got shape {vol.data.shape}")
    idx = resample_indices(vol.data.shape[0])
    return SliceVolume96(vol.data[idx], idx)


def make_triplets(vol: SliceVolume96) -> TripletSequence:
    """Stack slices (i-1, i, i+1) for every interior slice: 94 triplets, no padding."""
    s = np.asarray(vol.slices)
    if s.shape[0] != N_SLICES:
        raise ContractError(f"expected {N_SLICES} slices, got {s.shape[0]}")
    centers = np.arange(1, N_SLICES - 1)
    trip = np.stack([s[centers - 1], s[centers], s[centers + 1]], axis=1)
    return TripletSequence(trip, centers)


def sequence_positions(n: int, T: int) -> np.ndarray:
    if not 1 <= T <= n:
        raise ContractError(f"sequence length {T} outside [1, {n}]")
    if T == 1:
        return round_half_away([(n - 1) / 2])
    return round_half_away(np.arange(T) * (n - 1) / (T - 1))


def select_sequence(trip: TripletSequence, T: int) -> TripletSequence:
    """Keep ``T`` equidistant triplets (the middle one when ``T == 1``)."""
    pos = sequence_positions(len(trip), T)
    return TripletSequence(
        triplets=trip.triplets[pos],
        center_indices=trip.center_indices[pos],
        slice_labels={g: np.asarray(v)[pos] for g, v in trip.slice_labels.items()},
        masks=None if trip.masks is None else trip.masks[pos],
    )


def normalize_labels(raw: LabelVector) -> LabelVector:
    v = np.asarray(raw.values, dtype=float)
    if np.any(v < 0):
        raise ContractError("label values must be non-negative")
    top = v.max() if v.size else 0.0
    out = v / top if top > 0 else np.zeros_like(v)
    return LabelVector(out, raw.patient_value)


def combine_patient_label(norm: LabelVector, patient: float) -> LabelVector:
    v = np.asarray(norm.values, dtype=float)
    if not 0.0 <= patient <= 1.0:
        raise ContractError(f"patient label {patient} outside [0, 1]")
    if np.any((v < 0) | (v > 1)):
        raise ContractError("normalized label values must lie in [0, 1]")
    return LabelVector(v * patient, float(patient))


def compute_visibility(mask: np.ndarray) -> LabelVector:
    """Per-slice positive-pixel count divided by its maximum over the volume."""
    mask = np.asarray(mask)
    if mask.ndim != 3 or mask.size == 0:
        raise ContractError(f"expected a non-empty 3D mask, got shape {mask.shape}")
    counts = (mask > 0).reshape(mask.shape[0], -1).sum(axis=1).astype(float)
    return normalize_labels(LabelVector(counts))


def resize_nearest(array: np.ndarray, height: int, width: int) -> np.ndarray:
    """Nearest-neighbour resize over the last two axes."""
    h, w = array.shape[-2:]
    rows = np.minimum((np.arange(height) * h) // height, h - 1)
    cols = np.minimum((np.arange(width) * w) // width, w - 1)
    return array[..., rows[:, None], cols[None, :]]


@dataclass(frozen=True)
class PrepConfig:
    window_lo: float = 0.0
    window_hi: float = 1.0
    margin: int = 2
    seq_len: int = 32
    height: int = 32
    width: int = 32

    def validate(self) -> None:
        if not self.window_lo < self.window_hi:
            raise ConfigurationError("window_lo must be below window_hi")
        if not 1 <= self.seq_len <= N_TRIPLETS:
            raise ConfigurationError(f"seq_len must lie in [1, {N_TRIPLETS}]")
        if self.height < 8 or self.width < 8:
            raise ConfigurationError("height and width must be >= 8")

    @classmethod
    def from_dict(cls, d: dict) -> "PrepConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown prep config keys: {sorted(unknown)}")
        return cls(**d)


def slice_label_targets(slice_labels: dict[str, np.ndarray], true_states: dict[str, int],
                        schema: LabelSchema) -> np.ndarray:
    """Per-slice soft state distributions, shape (T, n_classes).

    For group g with true state k: mass ``l`` on k and ``1 - l`` on the healthy
    state, where ``l`` is the slice label (1 when k is healthy).
    """
    cols = []
    for g in schema.groups:
        v = np.asarray(slice_labels[g.name], dtype=float)
        k = true_states[g.name]
        q = np.zeros((len(v), g.n_states))
        if k == g.healthy:
            q[:, g.healthy] = 1.0
        else:
            q[:, k] = v
            q[:, g.healthy] = 1.0 - v
        cols.append(q)
    return np.concatenate(cols, axis=1)


def slice_labels_for(organ96: np.ndarray, injury96: np.ndarray | None, patient: float) -> np.ndarray:
    """Per-slice label of one group on the 96-slice stacks.

    With an injury mask: L_norm from its per-slice positive-pixel counts,
    times the patient label, times organ visibility. Without one the organ's
    own pixel counts stand in for L_raw, which reduces to visibility x patient.
    """
    vis = compute_visibility(organ96)
    if injury96 is None:
        return combine_patient_label(vis, patient).values
    counts = (injury96 > 0).reshape(injury96.shape[0], -1).sum(axis=1).astype(float)
    final = combine_patient_label(normalize_labels(LabelVector(counts)), patient)
    return final.values * vis.values


def preprocess_study(volume: np.ndarray, masks: dict[str, np.ndarray], schema: LabelSchema,
                     true_states: dict[str, int] | None, config: PrepConfig = PrepConfig(),
                     injuries: dict[str, np.ndarray] | None = None) -> TripletSequence:
    """Full chain for one study: window, crop to the organ ROI, 96 slices, triplets, T positions.

    ``masks`` holds one mask per organ (label groups first). The ROI is the
    union of all organ masks; an empty union falls back to the full volume.
    Slice labels are computed on the cropped 96-slice stacks before the
    in-plane resize (see ``slice_labels_for``); ``injuries`` optionally gives
    per-group injury masks as the source of the raw pixel counts.
    """
    config.validate()
    norm = normalize_volume(CtVolume(volume), config.window_lo, config.window_hi)
    organ_stack = np.stack([np.asarray(m) > 0 for m in masks.values()])
    union = organ_stack.any(axis=0)
    try:
        crop = apply_mask_crop(norm, union, config.margin)
    except DegenerateMaskError:
        crop = CtVolume(norm.data, tuple((0, s - 1) for s in norm.shape))
    organ_crop = np.stack([crop_to_box(m, crop.box) for m in organ_stack])

    sv = resample_96(crop)
    sv = SliceVolume96(resize_nearest(sv.slices, config.height, config.width), sv.source_indices)
    mask96 = organ_crop[:, sv.source_indices]  # (n_organs, 96, h, w)

    trip = make_triplets(sv)
    centers = trip.center_indices
    trip.masks = resize_nearest(mask96[:, centers], config.height, config.width).transpose(1, 0, 2, 3).astype(np.float64)
    if true_states is not None:
        for k, g in enumerate(schema.groups):
            patient = 0.0 if true_states[g.name] == g.healthy else 1.0
            inj = None
            if injuries is not None:
                inj = crop_to_box(np.asarray(injuries[g.name]) > 0, crop.box)[sv.source_indices]
            trip.slice_labels[g.name] = slice_labels_for(mask96[k], inj, patient)[centers]
    seq = select_sequence(trip, config.seq_len)
    seq.triplets = np.ascontiguousarray(seq.triplets, dtype=np.float64)
    return seq


def save_sequence(seq: TripletSequence, out_dir, study_id: str, true_states: dict[str, int] | None = None) -> None:
    """Write ``prep_<study>.raw`` (float32, T x 3 x H x W) and ``prep_<study>.json``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_raw(out_dir / f"prep_{study_id}.raw", seq.triplets, "f4")
    meta = {
        "shape": list(seq.triplets.shape),
        "order": "T x 3 x H x W, float32 little-endian",
        "center_indices": [int(c) for c in seq.center_indices],
        "slice_labels": {g: [float(x) for x in v] for g, v in seq.slice_labels.items()},
    }
    if true_states is not None:
        meta["true_states"] = {g: int(s) for g, s in true_states.items()}
    dump_json(out_dir / f"prep_{study_id}.json", meta)
    if seq.masks is not None:
        write_raw(out_dir / f"prepmask_{study_id}.raw", seq.masks, "u1")


__all__ = [
    "N_SLICES",
    "N_TRIPLETS",
    "CtVolume",
    "SliceVolume96",
    "TripletSequence",
    "LabelVector",
    "PrepConfig",
    "normalize_volume",
    "apply_mask_crop",
    "resample_96",
    "make_triplets",
    "select_sequence",
    "normalize_labels",
    "combine_patient_label",
    "compute_visibility",
    "preprocess_study",
    "slice_label_targets",
    "resize_nearest",
    "round_half_away",
]
