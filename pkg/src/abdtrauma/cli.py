"""Command-line driver: gen, segment, prep, folds, train, predict, ensemble, eval.

Exit codes: 0 success, 1 runtime or data error, 2 usage or configuration error.
Outputs are deterministic given inputs and seeds; wall-clock times and
timestamps only ever go to ``run_manifest.json``.
"""

from __future__ import annotations

import argparse
import hashlib
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch

from abdtrauma import __version__
from abdtrauma import ensemble as ens
from abdtrauma import neuralcore as nc
from abdtrauma import traumanet as tn
from abdtrauma.errors import ConfigurationError, ContractError, TraumaError
from abdtrauma.metric import evaluate
from abdtrauma.phantom import PhantomConfig, generate_dataset, load_dataset
from abdtrauma.rawio import dump_json, load_json, read_raw
from abdtrauma.schema import LabelSchema, default_schema
from abdtrauma.segmenter3d import (
    SegConfig,
    SegModel,
    mask_to_crops,
    predict_mask,
    save_segmentation,
    seg_config_dict,
    train_segmenter,
)
from abdtrauma.volumeprep import PrepConfig, preprocess_study, save_sequence

TOP_KEYS = {"phantom", "schema", "prep", "segmenter", "traumanet", "folds", "workers"}
TRAUMANET_DERIVED = {"n_classes", "n_organs", "seq_len", "height", "width"}


@dataclass
class PipelineConfig:
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    schema: LabelSchema = field(default_factory=default_schema)
    prep: PrepConfig = field(default_factory=PrepConfig)
    segmenter: SegConfig = field(default_factory=SegConfig)
    traumanet: dict = field(default_factory=dict)  # overrides on top of schema-derived sizes
    folds: dict = field(default_factory=lambda: {"k": 4, "seed": 0})
    workers: int = 1

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        unknown = set(d) - TOP_KEYS
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        schema = LabelSchema.from_dict(d["schema"]) if "schema" in d else default_schema()
        fold_d = dict(d.get("folds", {}))
        bad = set(fold_d) - {"k", "seed"}
        if bad:
            raise ConfigurationError(f"unknown folds keys: {sorted(bad)}")
        cfg = cls(
            phantom=PhantomConfig.from_dict(d.get("phantom", {})),
            schema=schema,
            prep=PrepConfig.from_dict(d.get("prep", {})),
            segmenter=SegConfig.from_dict(d.get("segmenter", {})),
            traumanet=dict(d.get("traumanet", {})),
            folds={"k": fold_d.get("k", 4), "seed": int(fold_d.get("seed", 0))},
            workers=int(d.get("workers", 1)),
        )
        cfg.validate()
        return cfg

    def validate(self) -> None:
        self.phantom.validate()
        self.prep.validate()
        self.segmenter.validate()
        clash = set(self.traumanet) & TRAUMANET_DERIVED
        if clash:
            raise ConfigurationError(f"traumanet keys {sorted(clash)} are derived from schema/prep")
        self.traumanet_config().validate()
        k = self.folds["k"]
        if k != ens.FULL and (not isinstance(k, int) or k < 2):
            raise ConfigurationError("folds.k must be an integer >= 2 or 'full'")
        if self.workers < 1:
            raise ConfigurationError("workers must be >= 1")

    def traumanet_config(self, **kw) -> tn.TraumaNetConfig:
        base = tn.TraumaNetConfig.for_schema(
            self.schema, seq_len=self.prep.seq_len, height=self.prep.height, width=self.prep.width
        )
        overrides = dict(self.traumanet)
        if "widths" in overrides:
            overrides["widths"] = tuple(overrides["widths"])
        overrides.update(kw)
        unknown = set(overrides) - set(tn.TraumaNetConfig.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown traumanet config keys: {sorted(unknown)}")
        return tn.with_overrides(base, **overrides)

    def to_dict(self) -> dict:
        return {
            "phantom": asdict(self.phantom),
            "schema": self.schema.to_dict(),
            "prep": asdict(self.prep),
            "segmenter": seg_config_dict(self.segmenter),
            "traumanet": self.traumanet_config().to_dict(),
            "folds": dict(self.folds),
            "workers": self.workers,
        }


def load_config(path) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    return PipelineConfig.from_dict(load_json(path))


class RunManifest:
    """Provenance for one command: config, seeds, output hashes, stage times."""

    def __init__(self, command: str, config: PipelineConfig, argv: list[str]):
        self.data = {
            "command": command,
            "argv": list(argv),
            "version": __version__,
            "torch": torch.__version__,
            "numpy": np.__version__,
            "config": config.to_dict(),
            "seeds": {},
            "stages": {},
            "artifacts": {},
            "started": datetime.now(timezone.utc).isoformat(),
        }
        self._t = time.perf_counter()

    def stage(self, name: str):
        manifest = self

        class _Timer:
            def __enter__(self):
                self.t = time.perf_counter()

            def __exit__(self, *exc):
                manifest.data["stages"][name] = round(time.perf_counter() - self.t, 3)

        return _Timer()

    def hash_outputs(self, out_dir: Path) -> None:
        for p in sorted(out_dir.rglob("*")):
            if p.is_file() and p.name != "run_manifest.json":
                self.data["artifacts"][str(p.relative_to(out_dir))] = hashlib.sha256(p.read_bytes()).hexdigest()

    def write(self, out_dir: Path) -> None:
        self.hash_outputs(out_dir)
        self.data["finished"] = datetime.now(timezone.utc).isoformat()
        self.data["wall_seconds"] = round(time.perf_counter() - self._t, 3)
        dump_json(out_dir / "run_manifest.json", self.data)


# ---------------------------------------------------------------------------
# helpers


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dataset(path):
    studies, manifest = load_dataset(path)
    return studies, manifest, LabelSchema.from_dict(manifest["schema"])


def _load_masks(seg_dir: Path, study, organs) -> dict[str, np.ndarray]:
    return {o: read_raw(seg_dir / f"segmask_{study.study_id}_{o}.raw", "u1", study.volume.shape) for o in organs}


def _study_masks(study, seg_dir) -> dict[str, np.ndarray]:
    if seg_dir is None:
        return dict(study.organ_masks)
    return _load_masks(Path(seg_dir), study, list(study.organ_masks))


def _prepare(studies, schema, prep: PrepConfig, seg_dir) -> list[tn.StudyTensors]:
    out = []
    for s in studies:
        seq = preprocess_study(s.volume, _study_masks(s, seg_dir), schema, s.true_states(), prep,
                               s.lesion_masks)
        out.append(tn.to_study_tensors(s.study_id, seq, s.true_states(), schema))
    return out


def _parse_k(text: str):
    if text == ens.FULL:
        return ens.FULL
    try:
        return int(text)
    except ValueError:
        raise argparse.ArgumentTypeError("fold count must be an integer or 'full'") from None


def _check_schema(a: LabelSchema, b: LabelSchema, what: str) -> None:
    da, db = a.to_dict(), b.to_dict()
    if da == db:
        return
    ga = {g["name"]: g for g in da["groups"]}
    gb = {g["name"]: g for g in db["groups"]}
    if list(ga) != list(gb):
        raise ContractError(f"schema mismatch ({what}): field 'groups' {list(ga)} != {list(gb)}")
    for name in ga:
        for key in ga[name]:
            if ga[name][key] != gb[name].get(key):
                raise ContractError(f"schema mismatch ({what}): field 'groups.{name}.{key}'")
    raise ContractError(f"schema mismatch ({what})")


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args, cfg: PipelineConfig, run: RunManifest) -> Path:
    out = _out_dir(args.out)
    seed = 0 if args.seed is None else args.seed
    run.data["seeds"]["root"] = seed
    with run.stage("generate"):
        generate_dataset(seed, args.count, cfg.phantom, cfg.schema, out, workers=cfg.workers)
    dump_json(out / "schema.json", cfg.schema.to_dict())
    return out


def _seg_manifest(model: SegModel, config: SegConfig, train_ids) -> dict:
    return {
        "kind": "segmenter3d",
        "organs": list(model.organs),
        "architecture": seg_config_dict(config),
        "seed": config.seed,
        "epoch": config.steps,
        "loss_history": list(model.history),
        "final_loss": model.final_loss,
        "train_ids": list(train_ids),
    }


def load_segmenter(directory) -> SegModel:
    directory = Path(directory)
    manifest = load_json(directory / "manifest.json")
    config = SegConfig.from_dict(manifest["architecture"])
    model = SegModel(manifest["organs"], config)
    nc.load_into(model, directory / "params.bin")
    return model.to(nc.resolve_dtype(config.dtype))


def cmd_segment(args, cfg: PipelineConfig, run: RunManifest) -> Path:
    """Train the segmenter (or load one with --model) and write masks and crop boxes."""
    out = _out_dir(args.out)
    studies, _, _ = _dataset(args.data)
    if args.model:
        model = load_segmenter(args.model)
    else:
        config = cfg.segmenter if args.seed is None else replace(cfg.segmenter, seed=args.seed)
        run.data["seeds"]["segmenter"] = config.seed
        train_set = studies
        if args.train_data:
            train_set, _, _ = _dataset(args.train_data)
        with run.stage("train"):
            model = train_segmenter(train_set, config)
        nc.save_checkpoint(out / "model", model, _seg_manifest(model, config, [s.study_id for s in train_set]))
    with run.stage("predict"):
        for s in studies:
            masks = predict_mask(model, s.volume, model.config.threshold)
            crops = mask_to_crops(masks, s.volume, model.config.margin)
            save_segmentation(out, s.study_id, crops, masks)
    return out


def cmd_prep(args, cfg: PipelineConfig, run: RunManifest) -> Path:
    out = _out_dir(args.out)
    studies, _, schema = _dataset(args.data)
    with run.stage("preprocess"):
        for s in studies:
            seq = preprocess_study(s.volume, _study_masks(s, args.masks), schema, s.true_states(), cfg.prep,
                                   s.lesion_masks)
            save_sequence(seq, out, s.study_id, s.true_states())
    return out


def cmd_folds(args, cfg: PipelineConfig, run: RunManifest) -> Path:
    out = _out_dir(args.out)
    _, manifest, _ = _dataset(args.data)
    k = cfg.folds["k"] if args.k is None else args.k
    seed = cfg.folds["seed"] if args.seed is None else args.seed
    run.data["seeds"]["folds"] = seed
    ens.make_folds(manifest["study_ids"], k, seed).save(out / "folds.json")
    return out


def cmd_train(args, cfg: PipelineConfig, run: RunManifest) -> Path:
    out = _out_dir(args.out)
    studies, _, schema = _dataset(args.data)
    _check_schema(cfg.schema, schema, "config vs dataset")
    seed = cfg.traumanet_config().seed if args.seed is None else args.seed
    config = cfg.traumanet_config(seed=seed)
    if args.fold_file:
        folds = ens.FoldSpec.load(args.fold_file)
    else:
        k = cfg.folds["k"] if args.folds is None else args.folds
        fold_seed = cfg.folds["seed"] if args.seed is None else args.seed
        folds = ens.make_folds([s.study_id for s in studies], k, fold_seed)
    folds.save(out / "folds.json")
    run.data["seeds"].update({"traumanet": seed, "folds": folds.seed})
    with run.stage("preprocess"):
        data = _prepare(studies, schema, cfg.prep, args.masks)
    with run.stage("train"):
        checkpoints = tn.train(data, folds, schema, config, log=_log if args.verbose else None)
    for ck in checkpoints:
        ck.manifest["mask_source"] = "oracle" if args.masks is None else "segmenter"
        ck.manifest["prep"] = asdict(cfg.prep)
        ck.save(out)
        run.data["stages"][f"train_{ck.name}"] = round(ck.model.train_seconds, 3)
    return out


def _checkpoint_dirs(models: Path) -> list[Path]:
    if (models / "params.bin").exists():
        return [models]
    dirs = sorted(p.parent for p in models.glob("*/params.bin"))
    if not dirs:
        raise ContractError(f"no checkpoints under {models}")
    return dirs


def cmd_predict(args, cfg: PipelineConfig, run: RunManifest) -> Path:
    """Write ``preds_<model>.json`` (patient plus per-slice probabilities) for every checkpoint."""
    out = _out_dir(args.out)
    studies, _, schema = _dataset(args.data)
    for d in _checkpoint_dirs(Path(args.models)):
        ck = tn.load_checkpoint(d)
        _check_schema(LabelSchema.from_dict(ck.manifest["schema"]), schema, f"checkpoint {ck.name} vs dataset")
        prep = PrepConfig.from_dict(ck.manifest.get("prep", asdict(cfg.prep)))
        subset = studies
        if args.oof:
            held = set(ck.manifest["val_ids"])
            subset = [s for s in studies if s.study_id in held]
        with run.stage(f"predict_{ck.name}"):
            data = _prepare(subset, schema, prep, args.masks)
            slices = {s.study_id: tn.predict_study(ck.model, s.triplets, schema) for s in data}
            patients = {sid: ens.patient_aggregate(sl, schema) for sid, sl in slices.items()}
        ens.save_predictions(out / f"preds_{ck.name}.json", ck.name, schema, patients, slices)
    return out


def cmd_ensemble(args, cfg: PipelineConfig, run: RunManifest) -> Path:
    out_path = Path(args.out)
    if out_path.suffix != ".json":
        out_path = _out_dir(out_path) / f"preds_{args.name}.json"
    else:
        out_path.parent.mkdir(parents=True, exist_ok=True)
    loaded = [ens.load_predictions(p) for p in args.preds]
    schema = loaded[0][1]
    for path, (_, s, _, _) in zip(args.preds[1:], loaded[1:]):
        _check_schema(schema, s, f"{args.preds[0]} vs {path}")
    ids = set(loaded[0][2])
    for path, (_, _, p, _) in zip(args.preds[1:], loaded[1:]):
        if set(p) != ids:
            raise ContractError(f"study sets differ between {args.preds[0]} and {path}")
    with run.stage("ensemble"):
        if all(sl is not None for *_, sl in loaded):
            patients = ens.integrate([sl for *_, sl in loaded], schema)
        else:
            patients = ens.final_ensemble([p for _, _, p, _ in loaded])
    ens.save_predictions(out_path, args.name, schema, patients)
    return out_path.parent


def cmd_eval(args, cfg: PipelineConfig, run: RunManifest) -> Path:
    out = _out_dir(args.out)
    _, manifest, data_schema = _dataset(args.data)
    schema = LabelSchema.from_dict(load_json(args.schema)) if args.schema else data_schema
    _check_schema(schema, data_schema, "schema file vs dataset")
    model, pred_schema, preds, _ = ens.load_predictions(args.preds)
    _check_schema(schema, pred_schema, "predictions vs dataset")
    ids = sorted(preds)
    missing = [i for i in ids if i not in manifest["study_ids"]]
    if missing:
        raise ContractError(f"predictions reference unknown studies: {missing[:5]}")
    truth = {sid: load_json(Path(args.data) / sid / "labels.json") for sid in ids}
    with run.stage("evaluate"):
        report = evaluate(preds, truth, schema, normalize_weights=args.normalize_weights, sample_mode=args.sample_mode)
    d = report.to_dict()
    d["model"] = model
    d["n_studies"] = len(ids)
    dump_json(out / "report.json", d)
    print(f"{model}: final score {report.final_score:.6f}")
    return out


COMMANDS = {
    "gen": cmd_gen,
    "segment": cmd_segment,
    "prep": cmd_prep,
    "folds": cmd_folds,
    "train": cmd_train,
    "predict": cmd_predict,
    "ensemble": cmd_ensemble,
    "eval": cmd_eval,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="abdtrauma", description="Phantom abdominal trauma pipeline")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="pipeline JSON config")
        p.add_argument("--seed", type=int, help="override the stage seed")
        p.add_argument("--out", required=True, help="output directory")
        return p

    p = add("gen", "generate a phantom dataset")
    p.add_argument("--count", type=int, required=True)

    p = add("segment", "train the 3D segmenter and write masks")
    p.add_argument("--data", required=True)
    p.add_argument("--train-data", help="train on this dataset instead of --data")
    p.add_argument("--model", help="existing segmenter checkpoint directory")

    p = add("prep", "write preprocessed slice sequences")
    p.add_argument("--data", required=True)
    p.add_argument("--masks", help="segment output directory (default: oracle masks)")

    p = add("folds", "write folds.json")
    p.add_argument("--data", required=True)
    p.add_argument("--k", type=_parse_k)

    p = add("train", "train one classifier per fold")
    p.add_argument("--data", required=True)
    p.add_argument("--folds", type=_parse_k, help="fold count or 'full'")
    p.add_argument("--fold-file", help="existing folds.json")
    p.add_argument("--masks", help="segment output directory (default: oracle masks)")
    p.add_argument("--verbose", action="store_true")

    p = add("predict", "write preds_<model>.json per checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--models", required=True, help="train output directory or one checkpoint")
    p.add_argument("--masks", help="segment output directory (default: oracle masks)")
    p.add_argument("--oof", action="store_true", help="only predict each model's validation studies")

    p = add("ensemble", "merge prediction files")
    p.add_argument("--preds", nargs="+", required=True)
    p.add_argument("--name", default="ensemble")

    p = add("eval", "score predictions and write report.json")
    p.add_argument("--data", required=True)
    p.add_argument("--preds", required=True)
    p.add_argument("--schema", help="schema.json (default: the dataset's)")
    p.add_argument("--sample-mode", choices=["study", "study_state"], default="study")
    p.add_argument("--normalize-weights", action="store_true")
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    torch.use_deterministic_algorithms(True)
    try:
        cfg = load_config(args.config)
    except (ConfigurationError, TypeError, KeyError) as exc:
        print(f"error: bad config: {exc}", file=sys.stderr)
        return 2
    except TraumaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    run = RunManifest(args.command, cfg, argv)
    try:
        out = COMMANDS[args.command](args, cfg, run)
        run.write(Path(out))
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TraumaError, OSError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
