"""Attack success rate, patched-accuracy evaluation, transfer matrices and report rendering."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
from PIL import Image

from ._validation import check_fraction_range, check_images, check_labels
from .finetune import predict_person_proba
from .models import ClassifierModel
from .transforms import place_patch

logger = logging.getLogger(__name__)


def compute_asr(labels, predictions) -> float:
    """Fraction of person images (label 1) predicted non-person (0)."""
    labels = np.asarray(labels)
    predictions = np.asarray(predictions)
    if labels.shape != predictions.shape:
        raise ValueError(f"labels {labels.shape} and predictions {predictions.shape} differ in shape")
    person = labels == 1
    n_person = int(person.sum())
    if n_person == 0:
        raise ValueError("ASR is undefined without person images")
    return int((predictions[person] == 0).sum()) / n_person


@dataclass(frozen=True)
class EvalConfig:
    size_range: tuple = (0.30, 0.60)
    seed: int = 2
    draws: int = 1
    batch_size: int = 64

    def __post_init__(self):
        check_fraction_range(*self.size_range, name="size_range")
        if self.draws < 1:
            raise ValueError("draws must be >= 1")


@dataclass
class EvaluationReport:
    model_id: str
    patch_source: str | None
    clean_accuracy: float
    patched_accuracy: float
    asr: float
    clean_miss_rate: float
    n_person: int
    n_total: int
    steps: int | None = None
    draws: int = 1
    placement_fractions: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "EvaluationReport":
        return cls(**d)


def patch_images(images: torch.Tensor, patch: torch.Tensor, config: EvalConfig, draw: int = 0,
                 offset: int = 0):
    """Paste ``patch`` into every image at an independent random size and position.

    Draws are keyed on (seed, draw, offset + position in batch), so results do
    not depend on how a split is chunked into batches.
    """
    out, placements = [], []
    for i, image in enumerate(images, start=offset):
        rng = np.random.default_rng([config.seed, draw, i])
        patched, placement = place_patch(image, patch.to(image.dtype), rng, size_range=config.size_range)
        out.append(patched)
        placements.append(placement)
    return torch.stack(out), placements


def evaluate_under_attack(model: ClassifierModel, patch, X, y, config: EvalConfig = EvalConfig(),
                          model_id: str | None = None, patch_source: str | None = None,
                          steps: int | None = None) -> EvaluationReport:
    """Clean accuracy, patched accuracy over all images and ASR over person images.

    Every image gets ``config.draws`` independent placements; with more than one
    draw the patched accuracy and ASR are averaged over draws.
    """
    X = check_images(X)
    y = check_labels(y, len(X))
    patch = check_images(patch, name="patch")[0]
    if patch.shape[1] != patch.shape[2]:
        raise ValueError(f"patch must be square, got {tuple(patch.shape)}")

    with torch.no_grad():
        clean_pred = (predict_person_proba(model, X, config.batch_size) >= 0.5).astype(np.int64)
        accs, asrs, fractions = [], [], []
        for draw in range(config.draws):
            preds = []
            for start in range(0, len(X), config.batch_size):
                patched, placements = patch_images(X[start:start + config.batch_size], patch, config, draw, start)
                fractions.extend(p.area_fraction for p in placements)
                preds.append(predict_person_proba(model, patched, config.batch_size) >= 0.5)
            pred = np.concatenate(preds).astype(np.int64)
            accs.append(float(np.mean(pred == y)))
            asrs.append(compute_asr(y, pred))

    return EvaluationReport(
        model_id=model_id or model.backbone_id,
        patch_source=patch_source,
        clean_accuracy=float(np.mean(clean_pred == y)),
        patched_accuracy=float(np.mean(accs)),
        asr=float(np.mean(asrs)),
        clean_miss_rate=compute_asr(y, clean_pred),
        n_person=int(np.sum(y == 1)),
        n_total=int(len(y)),
        steps=steps,
        draws=config.draws,
        placement_fractions=fractions,
    )


@dataclass
class TransferMatrix:
    """ASR of every patch (rows) against every target model (columns); failed cells are None."""

    patch_ids: list
    model_ids: list
    reports: dict = field(default_factory=dict)
    errors: dict = field(default_factory=dict)

    def asr(self, patch_id: str, model_id: str):
        report = self.reports.get((patch_id, model_id))
        return None if report is None else report.asr

    def as_array(self) -> np.ndarray:
        return np.array([[np.nan if self.asr(p, m) is None else self.asr(p, m) for m in self.model_ids]
                         for p in self.patch_ids])

    def to_dict(self) -> dict:
        return {
            "patch_ids": list(self.patch_ids),
            "model_ids": list(self.model_ids),
            "cells": [
                {"patch": p, "model": m,
                 "report": self.reports[(p, m)].to_dict() if (p, m) in self.reports else None,
                 "error": self.errors.get((p, m))}
                for p in self.patch_ids for m in self.model_ids
            ],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "TransferMatrix":
        tm = cls(list(d["patch_ids"]), list(d["model_ids"]))
        for cell in d["cells"]:
            key = (cell["patch"], cell["model"])
            if cell["report"] is not None:
                tm.reports[key] = EvaluationReport.from_dict(cell["report"])
            if cell["error"] is not None:
                tm.errors[key] = cell["error"]
        return tm

    def render(self) -> str:
        width = max([len("patch \\ model")] + [len(p) for p in self.patch_ids])
        cols = [max(len(m), 8) for m in self.model_ids]
        lines = ["  ".join(["patch \\ model".ljust(width)] + [m.rjust(c) for m, c in zip(self.model_ids, cols)])]
        for p in self.patch_ids:
            cells = []
            for m, c in zip(self.model_ids, cols):
                v = self.asr(p, m)
                cells.append(("failed" if v is None else f"{100 * v:.2f}%").rjust(c))
            lines.append("  ".join([p.ljust(width)] + cells))
        return "\n".join(lines) + "\n"


def _resolve(obj):
    return obj() if callable(obj) and not isinstance(obj, (torch.nn.Module, torch.Tensor)) else obj


def transfer_matrix(models: Mapping[str, object], patches: Mapping[str, object], data,
                    config: EvalConfig = EvalConfig(), steps: Mapping[str, int] | None = None) -> TransferMatrix:
    """Evaluate every patch on every model.

    Models and patches may be given directly or as zero-argument loaders.
    ``data`` is an ``(X, y)`` pair or a callable mapping a model to its
    ``(X, y)``, for target models with different input sizes. A loader or
    evaluation that raises marks only the affected cell as failed; successful
    loads are reused for later cells.
    """
    if not models or not patches:
        raise ValueError("transfer_matrix needs at least one model and one patch")
    tm = TransferMatrix(list(patches), list(models))
    loaded_models: dict = {}
    loaded_patches: dict = {}

    def get(cache, source, key):
        if key not in cache:
            cache[key] = _resolve(source[key])
        return cache[key]

    for pid in tm.patch_ids:
        for mid in tm.model_ids:
            try:
                patch = get(loaded_patches, patches, pid)
                model = get(loaded_models, models, mid)
                X, y = data(model) if callable(data) else data
                tm.reports[(pid, mid)] = evaluate_under_attack(
                    model, patch, X, y, config, model_id=mid, patch_source=pid,
                    steps=(steps or {}).get(pid),
                )
            except Exception as err:  # noqa: BLE001 - one bad cell must not sink the matrix
                logger.warning("transfer cell (%s, %s) failed: %s", pid, mid, err)
                tm.errors[(pid, mid)] = f"{type(err).__name__}: {err}"
    return tm


COLUMNS = ("Target Model", "Accuracy", "Accuracy with Patch", "ASR", "Training Steps")


def _pct(v: float) -> str:
    return f"{100 * v:.2f}%"


def render_report(reports, fmt: str = "text") -> str:
    """Table of per-model results as aligned plain text, markdown or JSON."""
    reports = list(reports)
    if not reports:
        raise ValueError("nothing to render")
    if fmt == "json":
        return json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True) + "\n"
    rows = [
        (r.model_id, _pct(r.clean_accuracy), _pct(r.patched_accuracy), _pct(r.asr),
         "-" if r.steps is None else str(r.steps))
        for r in reports
    ]
    if fmt == "markdown":
        lines = ["| " + " | ".join(COLUMNS) + " |", "|" + "---|" * len(COLUMNS)]
        lines += ["| " + " | ".join(row) + " |" for row in rows]
        return "\n".join(lines) + "\n"
    if fmt != "text":
        raise ValueError(f"unknown report format {fmt!r}")
    widths = [max(len(h), *(len(row[i]) for row in rows)) for i, h in enumerate(COLUMNS)]
    fmt_row = lambda cells: "  ".join(  # noqa: E731
        c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(cells, widths))
    )
    return "\n".join([fmt_row(COLUMNS), "  ".join("-" * w for w in widths)] + [fmt_row(r) for r in rows]) + "\n"


def reports_from_json(text: str) -> list:
    return [EvaluationReport.from_dict(d) for d in json.loads(text)]


def render_exemplar(model: ClassifierModel, image: torch.Tensor, patch: torch.Tensor, path,
                    config: EvalConfig = EvalConfig(), index: int = 0) -> tuple:
    """Save original and patched image side by side with person probabilities in a sidecar."""
    image = check_images(image)[0]
    patched, placement = patch_images(image[None], check_images(patch, name="patch")[0], config)
    probs = predict_person_proba(model, torch.stack([image, patched[0]]))
    canvas = torch.cat([image, torch.ones(3, image.shape[1], 4), patched[0]], dim=2)
    arr = np.round(canvas.permute(1, 2, 0).numpy() * 255).astype(np.uint8)
    path = Path(path)
    Image.fromarray(arr).save(path, format="PNG")
    note = path.with_suffix(".txt")
    note.write_text(
        f"original: {_pct(float(probs[0]))} person\n"
        f"patched: {_pct(float(probs[1]))} person\n"
        f"placement: {json.dumps(placement[0].to_dict(), sort_keys=True)}\n"
    )
    return path, note
