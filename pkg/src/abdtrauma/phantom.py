"""Synthetic abdominal CT studies with exact organ masks, lesions and labels.

Each label group of the schema owns one organ region. Organs are random
ellipsoids around fixed anchor points, carved so that no voxel belongs to two
organs. An injured organ
receives one connected lesion whose intensity is offset by
``lesion_offset(config, k)``; larger lesions encode higher injury grades.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from abdtrauma.errors import ConfigurationError, StorageError
from abdtrauma.rawio import dump_json, load_json, read_raw, write_raw
from abdtrauma.schema import LabelSchema

MASK64 = (1 << 64) - 1
GOLDEN64 = 0x9E3779B97F4A7C15


def organ_level(k: int) -> float:
    return 0.12 + 0.05 * (k % 4)


# (z, y, x) anchor of organ k % 4 as a fraction of the volume; organs keep a
# rough anatomical layout so their identity is not carried by intensity alone
ORGAN_ANCHORS = ((0.45, 0.40, 0.32), (0.40, 0.40, 0.68), (0.55, 0.64, 0.50), (0.68, 0.38, 0.50))
ANCHOR_JITTER = 0.06


# per-organ step between lesion bands
LESION_STEP = 0.12


def lesion_offset(config: "PhantomConfig", k: int) -> float:
    """Intensity added to organ ``k`` inside a lesion.

    Lesion bands sit ``LESION_STEP`` apart so the injured organ can be told
    from intensity alone; with the defaults they are 0.45, 0.62, 0.79, 0.96,
    all above every organ level.
    """
    return config.lesion_contrast + LESION_STEP * (k % 4)


@dataclass(frozen=True)
class PhantomConfig:
    volume_depth: int = 48
    volume_height: int = 48
    volume_width: int = 48
    organ_count: int = 4
    injury_probability: float = 0.5
    noise_sigma: float = 0.02
    lesion_contrast: float = 0.33
    lesion_radius: float = 3.5

    def validate(self) -> None:
        dims = (self.volume_depth, self.volume_height, self.volume_width)
        if any(int(d) != d or d < 8 for d in dims):
            raise ConfigurationError(f"volume dimensions must be integers >= 8, got {dims}")
        if self.organ_count < 1:
            raise ConfigurationError("organ_count must be >= 1")
        if not 0.0 <= self.injury_probability <= 1.0:
            raise ConfigurationError("injury_probability must lie in [0, 1]")
        if self.noise_sigma < 0:
            raise ConfigurationError("noise_sigma must be non-negative")
        if self.lesion_radius <= 0:
            raise ConfigurationError("lesion_radius must be positive")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.volume_depth, self.volume_height, self.volume_width)

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown phantom config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class PhantomStudy:
    study_id: str
    volume: np.ndarray  # float32, (D, H, W), values in [0, 1]
    organ_masks: dict[str, np.ndarray]  # uint8, insertion order = organ order
    lesion_masks: dict[str, np.ndarray]
    patient_labels: dict[str, np.ndarray]  # one-hot per group
    seed: int
    schema: LabelSchema = field(repr=False, default=None)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.volume.shape)

    def true_state(self, group: str) -> int:
        return int(np.argmax(self.patient_labels[group]))

    def true_states(self) -> dict[str, int]:
        return {g: self.true_state(g) for g in self.patient_labels}


def study_seed(root_seed: int, index: int) -> int:
    """Per-study seed: splitmix64 finaliser applied to root_seed * golden + index (mod 2**64)."""
    z = (int(root_seed) * GOLDEN64 + int(index)) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def organ_names(config: PhantomConfig, schema: LabelSchema) -> list[str]:
    names = list(schema.names)
    names += [f"organ{k}" for k in range(len(names), config.organ_count)]
    return names


def _ellipsoid(shape, center, axes) -> np.ndarray:
    zz, yy, xx = np.ogrid[: shape[0], : shape[1], : shape[2]]
    r = (
        ((zz - center[0]) / axes[0]) ** 2
        + ((yy - center[1]) / axes[1]) ** 2
        + ((xx - center[2]) / axes[2]) ** 2
    )
    return r <= 1.0


def _place_lesion(rng, organ: np.ndarray, radius: float) -> np.ndarray:
    depth = ndimage.distance_transform_edt(organ)
    # favour centres deep enough that the ball mostly stays inside the organ
    cutoff = min(radius, depth.max())
    candidates = np.argwhere(depth >= cutoff)
    center = candidates[rng.integers(len(candidates))]
    ball = _ellipsoid(organ.shape, center, (radius, radius, radius)) & organ
    labels, _ = ndimage.label(ball)
    return labels == labels[tuple(center)]


def generate_study(seed: int, config: PhantomConfig, schema: LabelSchema, study_id: str | None = None) -> PhantomStudy:
    """Build one study; a pure function of (seed, config, schema)."""
    config.validate()
    if config.organ_count < len(schema.groups):
        raise ConfigurationError(
            f"organ_count={config.organ_count} is smaller than the {len(schema.groups)} label groups"
        )
    rng = np.random.default_rng(int(seed))
    shape = config.shape
    dims = np.asarray(shape, dtype=float)
    names = organ_names(config, schema)

    vol = np.zeros(shape)
    body = _ellipsoid(shape, dims / 2 - 0.5, (dims[0] * 10, dims[1] * 0.46, dims[2] * 0.46))
    vol[body] = 0.05

    taken = np.zeros(shape, dtype=bool)
    organ_masks, lesion_masks, labels = {}, {}, {}
    for k, name in enumerate(names):
        mask = np.zeros(shape, dtype=bool)
        for _ in range(20):
            center = (np.asarray(ORGAN_ANCHORS[k % 4]) + rng.uniform(-ANCHOR_JITTER, ANCHOR_JITTER, size=3)) * dims
            axes = np.maximum(rng.uniform(0.12, 0.20, size=3) * dims, 2.0)
            mask = _ellipsoid(shape, center, axes) & ~taken
            if mask.sum() >= 27:
                break
        if not mask.any():
            raise ConfigurationError(f"volume too crowded to place organ {name!r}")
        taken |= mask
        vol[mask] = organ_level(k)
        organ_masks[name] = mask

    for k, name in enumerate(names):
        lesion = np.zeros(shape, dtype=bool)
        if k < len(schema.groups):
            group = schema.groups[k]
            state = group.healthy
            if rng.random() < config.injury_probability:
                sick = [s for s in range(group.n_states) if s != group.healthy]
                rank = int(rng.integers(len(sick)))
                state = sick[rank]
                radius = config.lesion_radius * (1.0 + 0.6 * rank)
                lesion = _place_lesion(rng, organ_masks[name], radius)
                vol[lesion] += lesion_offset(config, k)
            onehot = np.zeros(group.n_states)
            onehot[state] = 1.0
            labels[group.name] = onehot
        lesion_masks[name] = lesion

    if config.noise_sigma > 0:
        vol = vol + rng.normal(0.0, config.noise_sigma, size=shape)
    vol = np.clip(vol, 0.0, 1.0).astype(np.float32)

    return PhantomStudy(
        study_id=study_id if study_id is not None else f"seed{int(seed)}",
        volume=vol,
        organ_masks={n: m.astype(np.uint8) for n, m in organ_masks.items()},
        lesion_masks={n: m.astype(np.uint8) for n, m in lesion_masks.items()},
        patient_labels=labels,
        seed=int(seed),
        schema=schema,
    )


@dataclass
class DatasetManifest:
    root_seed: int
    count: int
    study_ids: list[str]
    seeds: list[int]
    shape: tuple[int, int, int]
    organs: list[str]
    config: dict
    schema: dict

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shape"] = list(self.shape)
        d["seed_mixing"] = "splitmix64((root_seed * 0x9E3779B97F4A7C15 + index) mod 2**64)"
        d["formats"] = {
            "volume.raw": "float32 little-endian, C order (depth, height, width)",
            "mask_<organ>.raw": "uint8, same order",
            "lesion_<organ>.raw": "uint8, same order",
            "labels.json": "group -> true state index",
        }
        return d


def save_study(study: PhantomStudy, directory) -> None:
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise StorageError(f"cannot create {directory}: {exc}") from exc
    write_raw(directory / "volume.raw", study.volume, "f4")
    for name, m in study.organ_masks.items():
        write_raw(directory / f"mask_{name}.raw", m, "u1")
    for name, m in study.lesion_masks.items():
        write_raw(directory / f"lesion_{name}.raw", m, "u1")
    dump_json(directory / "labels.json", study.true_states())


def generate_dataset(
    root_seed: int,
    count: int,
    config: PhantomConfig,
    schema: LabelSchema,
    out_path,
    workers: int = 1,
) -> DatasetManifest:
    """Write ``count`` studies under ``out_path`` plus ``manifest.json``.

    Output bytes do not depend on ``workers``: every study is generated from
    its own derived seed.
    """
    if count < 1:
        raise ConfigurationError("count must be >= 1")
    config.validate()
    out = Path(out_path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise StorageError(f"cannot create {out}: {exc}") from exc

    ids = [f"study_{i:04d}" for i in range(count)]
    seeds = [study_seed(root_seed, i) for i in range(count)]

    def work(i):
        study = generate_study(seeds[i], config, schema, study_id=ids[i])
        save_study(study, out / ids[i])

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            list(pool.map(work, range(count)))
    else:
        for i in range(count):
            work(i)

    manifest = DatasetManifest(
        root_seed=int(root_seed),
        count=count,
        study_ids=ids,
        seeds=seeds,
        shape=config.shape,
        organs=organ_names(config, schema),
        config=asdict(config),
        schema=schema.to_dict(),
    )
    dump_json(out / "manifest.json", manifest.to_dict())
    return manifest


def load_study(root, study_id: str, manifest: dict | None = None) -> PhantomStudy:
    root = Path(root)
    if manifest is None:
        manifest = load_json(root / "manifest.json")
    schema = LabelSchema.from_dict(manifest["schema"])
    shape = tuple(manifest["shape"])
    d = root / study_id
    vol = read_raw(d / "volume.raw", "f4", shape)
    masks = {o: read_raw(d / f"mask_{o}.raw", "u1", shape) for o in manifest["organs"]}
    lesions = {}
    for o in manifest["organs"]:
        p = d / f"lesion_{o}.raw"
        lesions[o] = read_raw(p, "u1", shape) if p.exists() else np.zeros(shape, np.uint8)
    states = load_json(d / "labels.json")
    labels = {}
    for g in schema.groups:
        onehot = np.zeros(g.n_states)
        onehot[int(states[g.name])] = 1.0
        labels[g.name] = onehot
    seed = manifest["seeds"][manifest["study_ids"].index(study_id)]
    return PhantomStudy(study_id, vol, masks, lesions, labels, int(seed), schema)


def load_dataset(root) -> tuple[list[PhantomStudy], dict]:
    root = Path(root)
    if not (root / "manifest.json").exists():
        raise StorageError(f"no dataset manifest under {root}")
    manifest = load_json(root / "manifest.json")
    return [load_study(root, sid, manifest) for sid in manifest["study_ids"]], manifest
