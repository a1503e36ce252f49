"""``patchforge`` command line: one subcommand per pipeline stage, one run directory per call."""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, parse_config
from .models import CheckpointError

logger = logging.getLogger("patchforge")

RUNS_ENV = "PATCHFORGE_RUNS"
EXIT_OK, EXIT_USER, EXIT_INTERNAL = 0, 1, 2

# subcommand -> artifact another stage looks for in its run directory
PRODUCES = {
    "build-dataset": "manifest.jsonl",
    "finetune": "checkpoint.pt",
    "craft-patch": "patch.png",
    "evaluate": "report.json",
    "transfer-matrix": "matrix.json",
}


class UserError(Exception):
    pass


def runs_root(args) -> Path:
    return Path(args.runs_dir or os.environ.get(RUNS_ENV) or "runs")


def make_run_dir(root: Path, subcommand: str) -> Path:
    root.mkdir(parents=True, exist_ok=True)
    stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S")
    base = root / f"{stamp}-{subcommand}"
    path, n = base, 1
    while path.exists():
        path = base.with_name(f"{base.name}-{n}")
        n += 1
    path.mkdir()
    return path


def mark_latest(root: Path, subcommand: str, run_dir: Path) -> None:
    (root / f"latest-{subcommand}").write_text(run_dir.name + "\n")


def latest_artifact(root: Path, subcommand: str, explicit=None) -> Path:
    """Explicit path if given, else the artifact of the newest run of ``subcommand``."""
    name = PRODUCES[subcommand]
    if explicit:
        path = Path(explicit)
        if path.is_dir():
            path = path / name
        if not path.exists():
            raise UserError(f"{path} does not exist; produce it with `patchforge {subcommand}`")
        return path
    pointer = root / f"latest-{subcommand}"
    if pointer.exists():
        path = root / pointer.read_text().strip() / name
        if path.exists():
            return path
    raise UserError(f"no {name} found under {root}; run `patchforge {subcommand}` first or pass its path")


def file_digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def cmd_build_dataset(cfg: RunConfig, args, run_dir: Path) -> None:
    from .data import (
        build_splits,
        candidate_crops,
        extract_crops,
        filter_annotations,
        index_by_image,
        load_coco,
        select_attack_subset,
        write_manifest,
    )
    from .data.splits import InsufficientPoolError

    ann_path = args.annotations or cfg.data.annotations
    images = args.images or cfg.data.images
    if not ann_path or not images:
        raise UserError("build-dataset needs --annotations and --images (or data.annotations / data.images)")
    if not Path(ann_path).exists():
        raise UserError(f"annotation file {ann_path} does not exist")

    coco = load_coco(ann_path)
    index = index_by_image(coco.annotations)
    filtered = filter_annotations(coco.annotations, index)
    person_pool, nonperson_pool = candidate_crops(
        index, coco.images, filtered.person_ids, filtered.nonperson_ids,
        cfg.data.padding_fraction, cfg.data.max_nonperson_per_image,
    )
    sizes = (cfg.data.train_size, cfg.data.val_size, cfg.data.test_size)
    try:
        manifest = build_splits(person_pool, nonperson_pool, sizes, cfg.seed, cfg.data.padding_fraction)
        manifest.attack = select_attack_subset(
            manifest, cfg.data.attack_subset_size, cfg.seed, cfg.data.attack_subset_source
        )
    except InsufficientPoolError as err:
        raise UserError(str(err)) from err
    write_manifest(manifest, run_dir / "manifest.jsonl")
    summary = extract_crops(manifest, images, run_dir / "crops", workers=cfg.data.workers)
    (run_dir / "summary.json").write_text(json.dumps({
        "person_images": len(filtered.person_ids),
        "nonperson_images": len(filtered.nonperson_ids),
        "rejected_annotations": [str(r) for r in filtered.rejected],
        "counts": manifest.counts,
        "attack_subset": len(manifest.attack),
        "crops_written": len(summary.written),
        "failures": [{"crop": spec.relpath, "error": err} for spec, err in summary.failures],
    }, indent=2, sort_keys=True) + "\n")
    print(f"{len(summary.written)} crops written, {len(summary.failures)} failures -> {run_dir}")


def _load_dataset(root: Path, explicit):
    from .data import read_manifest

    manifest_path = latest_artifact(root, "build-dataset", explicit)
    return read_manifest(manifest_path), manifest_path.parent / "crops"


def cmd_finetune(cfg: RunConfig, args, run_dir: Path) -> None:
    from .data import load_split
    from .estimators import _resolve_plan
    from .finetune import AugConfig, TrainConfig, evaluate_metrics, train
    from .models import apply_freeze_plan, load_backbone, save_checkpoint

    manifest, crops = _load_dataset(runs_root(args), args.dataset)
    ft = cfg.finetune
    model = load_backbone(ft.backbone, seed=cfg.seed, pretrained=ft.pretrained)
    apply_freeze_plan(model, _resolve_plan(ft.freeze_plan))
    X, y = load_split(manifest, crops, "train", model.image_size)
    Xv, yv = load_split(manifest, crops, "val", model.image_size)
    config = TrainConfig(ft.batch_size, ft.learning_rate, ft.epochs, cfg.seed,
                         AugConfig(ft.hflip_prob, ft.brightness, ft.contrast))
    model, _ = train(model, X, y, config, Xv, yv, log_path=run_dir / "train.log")
    metrics = {"val": evaluate_metrics(model, Xv, yv).to_dict(), "best_epoch": model.metrics["best_epoch"]}
    if manifest.split("test"):
        Xt, yt = load_split(manifest, crops, "test", model.image_size)
        metrics["test"] = evaluate_metrics(model, Xt, yt).to_dict()
    save_checkpoint(model, run_dir / "checkpoint.pt", metrics)
    (run_dir / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    print(f"checkpoint -> {run_dir / 'checkpoint.pt'} (val f1 {metrics['val']['f1']:.4f})")


def craft_config_from(cfg: RunConfig, backbone_id: str):
    from .crafting import REFERENCE_STEPS, CraftConfig
    from .losses import LossWeights
    from .transforms import CreaseConfig

    c = cfg.craft
    steps = c.steps or REFERENCE_STEPS.get(backbone_id, CraftConfig.steps)
    return CraftConfig(
        steps=steps,
        learning_rate=c.learning_rate,
        batch_size=c.batch_size,
        patch_size=c.patch_size,
        max_area=c.max_area,
        seed=cfg.seed,
        weights=LossWeights(c.beta, c.gamma),
        crease=CreaseConfig(c.angle_window_deg, c.crease_strength, c.crease_max_offset_frac),
        loss_sign=c.loss_sign,
    )


def cmd_craft_patch(cfg: RunConfig, args, run_dir: Path) -> None:
    from .crafting import CraftingError, craft, export_patch, init_patch
    from .data import load_split
    from .models import load_checkpoint

    root = runs_root(args)
    ckpt = latest_artifact(root, "finetune", args.checkpoint)
    model = load_checkpoint(ckpt)
    manifest, crops = _load_dataset(root, args.dataset)
    if not manifest.attack:
        raise UserError("the dataset has no attack subset; rebuild it with data.attack_subset_size > 0")
    X, y = load_split(manifest, crops, "attack", model.image_size)
    config = craft_config_from(cfg, model.backbone_id)
    if config.patch_size > model.image_size:
        raise UserError(f"craft.patch_size {config.patch_size} exceeds the model input size {model.image_size}")
    state = init_patch(cfg.craft.reference or None, config.patch_size, config.seed)
    try:
        state, trace = craft(model, X, config, labels=y, state=state)
    except CraftingError as err:
        if err.trace is not None:
            err.trace.write(run_dir / "trace.log")
        raise
    trace.write(run_dir / "trace.log")
    export_patch(state, run_dir / "patch.png", {
        "source_model": model.backbone_id,
        "checkpoint_sha256": file_digest(ckpt),
        "config_sha256": config.digest(),
        "learning_rate": config.learning_rate,
        "beta": config.weights.beta,
        "gamma": config.weights.gamma,
    })
    print(f"patch -> {run_dir / 'patch.png'} after {config.steps} steps")


def _patch_entry(path: Path):
    from .crafting import import_patch

    pixels, meta = import_patch(path)
    return pixels, meta


def cmd_evaluate(cfg: RunConfig, args, run_dir: Path) -> None:
    from .data import load_split
    from .evaluation import EvalConfig, evaluate_under_attack, render_exemplar, render_report
    from .models import load_checkpoint

    root = runs_root(args)
    model = load_checkpoint(latest_artifact(root, "finetune", args.checkpoint))
    pixels, meta = _patch_entry(latest_artifact(root, "craft-patch", args.patch))
    manifest, crops = _load_dataset(root, args.dataset)
    X, y = load_split(manifest, crops, cfg.eval.split, model.image_size)
    ecfg = EvalConfig((cfg.eval.size_min, cfg.eval.size_max), cfg.seed, cfg.eval.draws, cfg.eval.batch_size)
    report = evaluate_under_attack(model, pixels, X, y, ecfg, model_id=model.backbone_id,
                                   patch_source=meta.get("source_model"), steps=meta.get("steps"))
    (run_dir / "report.json").write_text(render_report([report], "json"))
    text = render_report([report], "text")
    (run_dir / "report.txt").write_text(text)
    if cfg.eval.exemplars:
        out = run_dir / "exemplars"
        out.mkdir()
        person = [i for i in range(len(y)) if y[i] == 1][: cfg.eval.exemplars]
        for k, i in enumerate(person):
            render_exemplar(model, X[i], pixels, out / f"exemplar_{k:02d}.png", ecfg)
    print(text, end="")


def _unique(ids):
    seen, out = {}, []
    for i in ids:
        seen[i] = seen.get(i, 0) + 1
        out.append(i if seen[i] == 1 else f"{i}#{seen[i]}")
    return out


def cmd_transfer_matrix(cfg: RunConfig, args, run_dir: Path) -> None:
    from .data import load_split
    from .evaluation import EvalConfig, render_report, transfer_matrix
    from .models import load_checkpoint

    root = runs_root(args)
    if not args.checkpoint or not args.patch:
        raise UserError("transfer-matrix needs at least one --checkpoint and one --patch")
    ckpts = [latest_artifact(root, "finetune", c) for c in args.checkpoint]
    patch_paths = [latest_artifact(root, "craft-patch", p) for p in args.patch]
    models = {}
    for mid, path in zip(_unique([_checkpoint_id(p) for p in ckpts]), ckpts):
        models[mid] = lambda path=path: load_checkpoint(path)
    patches, steps = {}, {}
    metas = [_patch_entry(p) for p in patch_paths]
    for pid, (pixels, meta) in zip(_unique([m.get("source_model", "patch") for _, m in metas]), metas):
        patches[pid] = pixels
        steps[pid] = meta.get("steps")

    manifest, crops = _load_dataset(root, args.dataset)
    cache = {}

    def data(model):
        if model.image_size not in cache:
            cache[model.image_size] = load_split(manifest, crops, cfg.eval.split, model.image_size)
        return cache[model.image_size]

    ecfg = EvalConfig((cfg.eval.size_min, cfg.eval.size_max), cfg.seed, cfg.eval.draws, cfg.eval.batch_size)
    tm = transfer_matrix(models, patches, data, ecfg, steps)
    (run_dir / "matrix.json").write_text(json.dumps(tm.to_dict(), indent=2, sort_keys=True) + "\n")
    (run_dir / "matrix.txt").write_text(tm.render())
    if tm.reports:
        (run_dir / "reports.txt").write_text(render_report(list(tm.reports.values()), "text"))
    print(tm.render(), end="")
    if tm.errors:
        print(f"{len(tm.errors)} cell(s) failed; see matrix.json", file=sys.stderr)


def _checkpoint_id(path: Path) -> str:
    import torch

    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
        return payload["backbone_id"]
    except Exception:  # noqa: BLE001 - the cell loader reports the real error
        return path.parent.name


def cmd_report(cfg: RunConfig, args, run_dir: Path) -> None:
    from .evaluation import TransferMatrix, render_report, reports_from_json

    root = runs_root(args)
    inputs = [Path(p) for p in args.inputs] or [latest_artifact(root, "evaluate")]
    reports = []
    for path in inputs:
        if not path.exists():
            raise UserError(f"{path} does not exist; produce it with `patchforge evaluate`")
        text = path.read_text()
        data = json.loads(text)
        if isinstance(data, dict) and "cells" in data:
            reports.extend(TransferMatrix.from_dict(data).reports.values())
        else:
            reports.extend(reports_from_json(text))
    if not reports:
        raise UserError("no evaluation reports found in the inputs")
    (run_dir / "reports.json").write_text(render_report(reports, "json"))
    (run_dir / "table.md").write_text(render_report(reports, "markdown"))
    text = render_report(reports, args.format)
    (run_dir / "table.txt").write_text(render_report(reports, "text"))
    print(text, end="")


COMMANDS = {
    "build-dataset": cmd_build_dataset,
    "finetune": cmd_finetune,
    "craft-patch": cmd_craft_patch,
    "evaluate": cmd_evaluate,
    "transfer-matrix": cmd_transfer_matrix,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file with [run] [data] [finetune] [craft] [eval] sections")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
    common.add_argument("--seed", type=int, help="global seed (run.seed)")
    common.add_argument("--runs-dir", help=f"artifact root (default ${RUNS_ENV} or ./runs)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="patchforge", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-dataset", parents=[common], help="filter COCO annotations and extract crops")
    p.add_argument("--annotations", help="COCO instances JSON")
    p.add_argument("--images", help="directory holding the source images")
    p.add_argument("--attack-subset-source", choices=("held-out", "train"))

    p = sub.add_parser("finetune", parents=[common], help="fine-tune a backbone on the crop dataset")
    p.add_argument("--dataset", help="build-dataset run dir or manifest (default: latest)")
    p.add_argument("--backbone")

    p = sub.add_parser("craft-patch", parents=[common], help="optimise an adversarial patch")
    p.add_argument("--checkpoint", help="finetune run dir or checkpoint file (default: latest)")
    p.add_argument("--dataset")
    p.add_argument("--steps", type=int)
    p.add_argument("--loss-sign", choices=("mean", "negated"))

    p = sub.add_parser("evaluate", parents=[common], help="measure accuracy and ASR under a patch")
    p.add_argument("--checkpoint")
    p.add_argument("--patch", help="craft-patch run dir or patch.png (default: latest)")
    p.add_argument("--dataset")
    p.add_argument("--draws", type=int)

    p = sub.add_parser("transfer-matrix", parents=[common], help="evaluate every patch on every model")
    p.add_argument("--checkpoint", action="append", default=[])
    p.add_argument("--patch", action="append", default=[])
    p.add_argument("--dataset")
    p.add_argument("--draws", type=int)

    p = sub.add_parser("report", parents=[common], help="render evaluation reports as a table")
    p.add_argument("inputs", nargs="*", help="report.json or matrix.json files (default: latest evaluate)")
    p.add_argument("--format", choices=("text", "markdown", "json"), default="text")
    return parser


FLAG_KEYS = {
    "seed": "run.seed",
    "steps": "craft.steps",
    "loss_sign": "craft.loss_sign",
    "draws": "eval.draws",
    "backbone": "finetune.backbone",
    "attack_subset_source": "data.attack_subset_source",
}


def collect_overrides(args) -> dict:
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(item, "--set expects SECTION.KEY=VALUE")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value
    for attr, key in FLAG_KEYS.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides[key] = value
    return overrides


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = parse_config(args.config, collect_overrides(args))
        from ._validation import set_deterministic

        set_deterministic(cfg.seed)
        root = runs_root(args)
        run_dir = make_run_dir(root, args.command)
        (run_dir / "config.ini").write_text(cfg.to_ini())
        COMMANDS[args.command](cfg, args, run_dir)
        mark_latest(root, args.command, run_dir)
        return EXIT_OK
    except (UserError, ValueError, CheckpointError, FileNotFoundError) as err:
        print(f"patchforge {args.command}: error: {err}", file=sys.stderr)
        return EXIT_USER
    except Exception as err:  # noqa: BLE001
        logger.exception("internal error")
        print(f"patchforge {args.command}: internal error: {err}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
