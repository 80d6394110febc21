"""Command-line entry point.

Subcommands run one pipeline stage each::

    twoview synth --classes 4 --specimens 30 --mode joint-code --out data/
    twoview validate --manifest data/manifest.jsonl
    twoview patchify --manifest data/manifest.jsonl --out patches/
    twoview train-sv --patches patches/ --backbone mini --epochs 10 --out sv/
    twoview train-mv --sv-checkpoint sv/sv.ckpt --patches patches/ --fusion maxpool --epochs 20 --out mv/
    twoview eval --checkpoint sv/sv.ckpt --checkpoint mv/mv.ckpt --patches patches/ --report-out report.json
    twoview export-features --checkpoint mv/mv.ckpt --patches patches/ --out features.csv

Exit codes: 0 success, 1 usage error, 2 data or validation error (a JSON
error report is written to stderr).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import torch

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data_model import ManifestError, load_manifest, validate_manifest
from .evaluation import evaluate_suite, export_features
from .nets import FAMILIES, FUSIONS, FeatureExtractor, LayerSpecError, MultiViewModel, SingleViewModel, backbone_config, build_single_view
from .patches import PatchError, PatchStore, PipelineConfig, run_patchify
from .seeding import derive_seed
from .synth import MODES, generate_synthetic
from .training import (
    PAIRING_POLICIES,
    TrainConfig,
    TrainingError,
    build_multiview,
    freeze_features,
    pair_views,
    train_multiview,
    train_single_view,
)

log = logging.getLogger("twoview")

DTYPES = {"float32": torch.float32, "float64": torch.float64}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:10]


def _write_json(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")


def resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """defaults < config file < explicit flags."""
    cfg = dict(defaults)
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise DataError(f"config file not found: {path}")
        file_cfg = json.loads(path.read_text(encoding="utf-8"))
        cfg.update({k: v for k, v in file_cfg.items() if k in defaults})
    for k in defaults:
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = v
    return cfg


def run_dir(out: str | None, command: str, cfg: dict) -> Path:
    if out:
        path = Path(out)
    else:
        path = Path("runs") / f"{time.strftime('%Y%m%d-%H%M%S')}-{command}-{_digest(cfg)}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def _file_sha(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- subcommands -------------------------------------------------------------


def cmd_validate(args) -> int:
    try:
        manifest = load_manifest(args.manifest)
    except ManifestError as exc:
        raise DataError(str(exc)) from None
    violations = validate_manifest(manifest, check_files=args.check_files)
    for v in violations:
        print(v)
    print(f"{len(violations)} violations")
    if violations:
        raise DataError(f"{len(violations)} violations in {args.manifest}")
    return 0


def cmd_synth(args) -> int:
    cfg = resolve(args, {"classes": 6, "specimens": 5, "mode": "texture", "seed": 0, "image_size": 128})
    out = run_dir(args.out, "synth", cfg)
    manifest = generate_synthetic(out, cfg["classes"], cfg["specimens"], cfg["image_size"], cfg["seed"], cfg["mode"])
    _write_json({"toolkit_version": __version__, **cfg}, out / "synth.json")
    print(f"wrote {len(manifest.records)} images to {out}")
    return 0


PATCHIFY_DEFAULTS = {k: v for k, v in PipelineConfig().to_json().items()}


def cmd_patchify(args) -> int:
    cfg = resolve(args, PATCHIFY_DEFAULTS)
    try:
        manifest = load_manifest(args.manifest)
    except ManifestError as exc:
        raise DataError(str(exc)) from None
    violations = validate_manifest(manifest, check_files=True)
    if violations:
        raise DataError("manifest is invalid: " + "; ".join(violations[:10]))
    config = PipelineConfig.from_json(cfg)
    out = run_dir(args.out, "patchify", cfg)
    run_patchify(manifest, config, out)
    _write_json({"command": "patchify", "manifest": str(Path(args.manifest).resolve()), **config.to_json()}, out / "config.json")
    print(f"patch store written to {out}")
    return 0


def _open_store(path) -> PatchStore:
    try:
        return PatchStore.open(path)
    except FileNotFoundError as exc:
        raise DataError(str(exc)) from None


def cmd_train_sv(args) -> int:
    defaults = {"backbone": "mini", "feature_dim": None, "epochs": None, "lr": 2e-4, "batch": 64, "seed": 0,
                "precision": "float32", "select_best": False, "patches": None}  # fmt: skip
    cfg = resolve(args, defaults)
    if cfg["epochs"] is None:
        raise UsageError("--epochs is required (no default is applied)")
    if cfg["patches"] is None:
        raise UsageError("--patches is required")
    store = _open_store(cfg["patches"])
    classes = store.class_set
    train = store.normalized("train")
    val = store.normalized("val")
    if not train:
        raise DataError("patch store has no training patches")
    seeds = {"init": derive_seed(cfg["seed"], "train-sv", "init"), "shuffle": derive_seed(cfg["seed"], "train-sv", "shuffle")}
    size = train[0].values.shape[0]
    bcfg = backbone_config(cfg["backbone"], input_size=size, feature_dim=cfg["feature_dim"])
    model = build_single_view(bcfg, len(classes), seeds["init"], DTYPES[cfg["precision"]])
    tcfg = TrainConfig(epochs=cfg["epochs"], learning_rate=cfg["lr"], batch_size=cfg["batch"], seed=seeds["shuffle"],
                       select_best=bool(cfg["select_best"]))  # fmt: skip
    out = run_dir(args.out, "train-sv", cfg)
    model, history = train_single_view(model, train, val, tcfg, classes)
    meta = {"stage": "single_view", "seeds": seeds, "train_config": tcfg.to_json()}
    save_checkpoint(model, out / "sv.ckpt", classes, meta)
    save_checkpoint(freeze_features(model), out / "extractor.ckpt", classes, meta)
    if history.best_state is not None:
        best = build_single_view(bcfg, len(classes), seeds["init"], DTYPES[cfg["precision"]])
        best.load_state_dict(history.best_state)
        save_checkpoint(best, out / "best.ckpt", classes, {**meta, "best_epoch": history.best_epoch})
    history.to_csv(out / "history.csv")
    _write_json({"command": "train-sv", "toolkit_version": __version__, **cfg,
                 "patches": str(Path(cfg["patches"]).resolve()), "resolved_seeds": seeds,
                 "train_config": tcfg.to_json(), "backbone_config": bcfg.to_json()}, out / "config.json")  # fmt: skip
    last = history.records[-1]
    print(f"single-view training done: loss={last.train_loss:.4f} acc={last.train_acc:.4f} -> {out}")
    return 0


def _load_frozen(path) -> FeatureExtractor:
    if path is None or not Path(path).exists():
        raise DataError(
            "missing prerequisite: a frozen single-view checkpoint (--sv-checkpoint) from `train-sv`"
            + (f"; not found: {path}" if path else "")
        )
    try:
        model, header = load_checkpoint(path)
    except CheckpointError as exc:
        raise DataError(f"{path}: {exc}") from None
    if isinstance(model, SingleViewModel):
        return freeze_features(model)
    if isinstance(model, FeatureExtractor):
        if not model.frozen:
            raise DataError(f"{path}: extractor checkpoint is not frozen")
        return model
    raise DataError(f"{path}: expected a single-view or extractor checkpoint, got {header['kind']}")


def cmd_train_mv(args) -> int:
    defaults = {"sv_checkpoint": None, "patches": None, "fusion": "maxpool", "pairing": "specimen_first", "epochs": None,
                "lr": 2e-4, "batch": 64, "seed": 0, "repair_each_epoch": False, "select_best": False}  # fmt: skip
    cfg = resolve(args, defaults)
    frozen = _load_frozen(cfg["sv_checkpoint"])
    if cfg["epochs"] is None:
        raise UsageError("--epochs is required (no default is applied)")
    if cfg["patches"] is None:
        raise UsageError("--patches is required")
    store = _open_store(cfg["patches"])
    classes = store.class_set
    seeds = {k: derive_seed(cfg["seed"], "train-mv", k) for k in ("init", "shuffle", "pairing")}
    train = store.normalized("train")
    val = store.normalized("val")
    try:
        pairs = pair_views(train, cfg["pairing"], seeds["pairing"])
        val_pairs = pair_views(val, cfg["pairing"], seeds["pairing"]) if val else []
    except ValueError as exc:
        raise DataError(str(exc)) from None
    model = build_multiview(frozen, cfg["fusion"], len(classes), seeds["init"])
    tcfg = TrainConfig(epochs=cfg["epochs"], learning_rate=cfg["lr"], batch_size=cfg["batch"], seed=seeds["shuffle"],
                       repair_each_epoch=bool(cfg["repair_each_epoch"]), select_best=bool(cfg["select_best"]))  # fmt: skip
    out = run_dir(args.out, "train-mv", cfg)
    model, history = train_multiview(model, pairs, val_pairs, tcfg, classes, repair_from=train, policy=cfg["pairing"])
    meta = {"stage": "multi_view", "seeds": seeds, "train_config": tcfg.to_json(), "pairing": cfg["pairing"]}
    save_checkpoint(model, out / "mv.ckpt", classes, meta)
    if history.best_state is not None:
        model.load_state_dict(history.best_state)
        save_checkpoint(model, out / "best.ckpt", classes, {**meta, "best_epoch": history.best_epoch})
    history.to_csv(out / "history.csv")
    _write_json({"command": "train-mv", "toolkit_version": __version__, **cfg,
                 "sv_checkpoint": str(Path(cfg["sv_checkpoint"]).resolve()), "patches": str(Path(cfg["patches"]).resolve()),
                 "resolved_seeds": seeds, "train_config": tcfg.to_json(),
                 "specimen_matched_pairs": sum(p.specimen_match for p in pairs), "pairs": len(pairs)}, out / "config.json")  # fmt: skip
    last = history.records[-1]
    print(f"multi-view training done: loss={last.train_loss:.4f} acc={last.train_acc:.4f} -> {out}")
    return 0


def _load_model(path):
    try:
        return load_checkpoint(path)
    except FileNotFoundError as exc:
        raise DataError(str(exc)) from None
    except CheckpointError as exc:
        raise DataError(f"{path}: {exc}") from None


def cmd_eval(args) -> int:
    defaults = {"checkpoint": None, "patches": None, "report_out": None, "pairing": "specimen_first", "seed": 0, "split": "test"}
    cfg = resolve(args, defaults)
    if not cfg["checkpoint"] or not cfg["patches"] or not cfg["report_out"]:
        raise UsageError("--checkpoint, --patches and --report-out are required")
    ckpts = [cfg["checkpoint"]] if isinstance(cfg["checkpoint"], str) else list(cfg["checkpoint"])
    sv = mv = None
    provenance = {}
    for path in ckpts:
        model, header = _load_model(path)
        provenance[Path(path).name] = _file_sha(Path(path))
        if isinstance(model, SingleViewModel):
            sv = model
        elif isinstance(model, MultiViewModel):
            mv = model
        else:
            raise DataError(f"{path}: cannot evaluate a bare extractor checkpoint")
    store = _open_store(cfg["patches"])
    test = store.normalized(cfg["split"])
    if not test:
        raise DataError(f"patch store has no {cfg['split']!r} patches")
    pairing_seed = derive_seed(cfg["seed"], "eval", "pairing")
    report = evaluate_suite(sv, mv, test, store.class_set, cfg["pairing"], pairing_seed)
    report.seeds.update({"master": cfg["seed"], "checkpoints": provenance})
    out = Path(cfg["report_out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.dumps(), encoding="utf-8")
    text = report.render_text()
    out.with_suffix(".txt").write_text(text, encoding="utf-8")
    _write_json({"command": "eval", **cfg, "checkpoint": [str(Path(c).resolve()) for c in ckpts],
                 "patches": str(Path(cfg["patches"]).resolve())}, out.with_suffix(".config.json"))  # fmt: skip
    print(text, end="")
    return 0


def cmd_export(args) -> int:
    defaults = {"checkpoint": None, "patches": None, "out": None, "split": "test", "pairing": "specimen_first", "seed": 0}
    cfg = resolve(args, defaults)
    if not cfg["checkpoint"] or not cfg["patches"] or not cfg["out"]:
        raise UsageError("--checkpoint, --patches and --out are required")
    model, header = _load_model(cfg["checkpoint"])
    store = _open_store(cfg["patches"])
    items = store.normalized(cfg["split"])
    pairing_seed = derive_seed(cfg["seed"], "export", "pairing")
    if isinstance(model, MultiViewModel):
        try:
            items = pair_views(items, cfg["pairing"], pairing_seed)
        except ValueError as exc:
            raise DataError(str(exc)) from None
    elif isinstance(model, FeatureExtractor):
        raise DataError("export-features needs a single-view or multi-view checkpoint")
    out = Path(cfg["out"])
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        export_features(model, items, out)
    except OSError as exc:
        raise DataError(f"cannot write {out}: {exc}") from None
    _write_json({"toolkit_version": __version__, "checkpoint_sha256": _file_sha(Path(cfg["checkpoint"])),
                 "pairing_seed": pairing_seed, "rows": len(items), **cfg}, Path(str(out) + ".meta.json"))  # fmt: skip
    print(f"wrote {len(items)} feature rows to {out}")
    return 0


# -- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="twoview", description="Two-view patch classification toolkit")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("validate", help="check a manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--check-files", action="store_true")
    s.set_defaults(func=cmd_validate)

    s = sub.add_parser("synth", help="generate a synthetic two-view dataset")
    s.add_argument("--classes", type=int)
    s.add_argument("--specimens", type=int)
    s.add_argument("--mode", choices=MODES)
    s.add_argument("--image-size", type=int, dest="image_size")
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.add_argument("--config")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("patchify", help="build a balanced, split, augmented patch store")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--patch-size", type=int, dest="patch_size")
    s.add_argument("--patches-per-image", type=int, dest="patches_per_image")
    s.add_argument("--target", type=int, dest="target_per_class_per_view")
    s.add_argument("--test-fraction", type=float, dest="test_fraction")
    s.add_argument("--val-fraction", type=float, dest="val_fraction")
    s.add_argument("--variants", type=int, dest="augmentation_variants")
    s.add_argument("--leak-free", action=argparse.BooleanOptionalAction, dest="leak_free", default=None)
    s.add_argument("--jobs", type=int)
    s.set_defaults(func=cmd_patchify)

    s = sub.add_parser("train-sv", help="pretrain a single-view backbone on mixed patches")
    s.add_argument("--patches")
    s.add_argument("--backbone", choices=FAMILIES)
    s.add_argument("--feature-dim", type=int, dest="feature_dim")
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--batch", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--precision", choices=tuple(DTYPES))
    s.add_argument("--select-best", action="store_true", default=None, dest="select_best")
    s.add_argument("--out")
    s.add_argument("--config")
    s.set_defaults(func=cmd_train_sv)

    s = sub.add_parser("train-mv", help="train fusion + head on two frozen branches")
    s.add_argument("--sv-checkpoint", dest="sv_checkpoint")
    s.add_argument("--patches")
    s.add_argument("--fusion", choices=FUSIONS)
    s.add_argument("--pairing", choices=PAIRING_POLICIES)
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--batch", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--repair-each-epoch", action="store_true", default=None, dest="repair_each_epoch")
    s.add_argument("--select-best", action="store_true", default=None, dest="select_best")
    s.add_argument("--out")
    s.add_argument("--config")
    s.set_defaults(func=cmd_train_mv)

    s = sub.add_parser("eval", help="precision/recall report in the surface/section/mixed layout")
    s.add_argument("--checkpoint", action="append")
    s.add_argument("--patches")
    s.add_argument("--report-out", dest="report_out")
    s.add_argument("--pairing", choices=PAIRING_POLICIES)
    s.add_argument("--split")
    s.add_argument("--seed", type=int)
    s.add_argument("--config")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("export-features", help="write learned representations as CSV")
    s.add_argument("--checkpoint")
    s.add_argument("--patches")
    s.add_argument("--out")
    s.add_argument("--split")
    s.add_argument("--pairing", choices=PAIRING_POLICIES)
    s.add_argument("--seed", type=int)
    s.add_argument("--config")
    s.set_defaults(func=cmd_export)
    return p


def run_cli(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if not getattr(args, "command", None):
        parser.print_usage(sys.stderr)
        return 1
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"twoview {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except (DataError, PatchError, TrainingError, LayerSpecError) as exc:
        report = {"command": args.command, "error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(report), file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
