"""Crop raster extraction and loading crops back as model-ready tensors."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np
import torch
from PIL import Image

from .annotations import PERSON
from .splits import CropSpec, DatasetManifest

logger = logging.getLogger(__name__)


@dataclass
class ExtractionSummary:
    written: list = field(default_factory=list)
    failures: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures


def _resolver(image_store) -> Callable[[CropSpec], Path]:
    if callable(image_store):
        return lambda spec: Path(image_store(spec.image_id))
    if isinstance(image_store, Mapping):
        return lambda spec: Path(image_store[spec.image_id])
    root = Path(image_store)
    return lambda spec: root / spec.file_name


def crop_image(image: Image.Image, padded_box) -> Image.Image:
    x, y, w, h = padded_box
    return image.crop((x, y, x + w, y + h))


def extract_crops(
    specs: DatasetManifest | Iterable[CropSpec],
    image_store,
    out_dir: str | Path,
    workers: int = 1,
) -> ExtractionSummary:
    """Write one PNG per crop spec under ``out_dir/<split>/<label>/``.

    ``image_store`` is a directory holding the source images by file name, a
    mapping from image id to path, or a callable doing the same. A missing or
    unreadable source records a failure for that crop and extraction continues.
    """
    if isinstance(specs, DatasetManifest):
        specs = list(specs.crops) + list(specs.attack)
    specs = list(specs)
    out_dir = Path(out_dir)
    resolve = _resolver(image_store)

    def one(spec: CropSpec):
        try:
            with Image.open(resolve(spec)) as im:
                crop = crop_image(im.convert("RGB"), spec.padded_box)
            dest = out_dir / spec.relpath
            dest.parent.mkdir(parents=True, exist_ok=True)
            crop.save(dest, format="PNG")
            return spec, dest, None
        except (OSError, KeyError) as err:
            return spec, None, f"{type(err).__name__}: {err}"

    summary = ExtractionSummary()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, specs))
    else:
        results = [one(s) for s in specs]
    for spec, dest, err in results:
        if err is None:
            summary.written.append(dest)
        else:
            logger.warning("crop %s failed: %s", spec.relpath, err)
            summary.failures.append((spec, err))
    return summary


def load_crop(path: str | Path, image_size: int) -> torch.Tensor:
    with Image.open(path) as im:
        im = im.convert("RGB").resize((image_size, image_size), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def load_split(
    manifest: DatasetManifest, crop_root: str | Path, split: str, image_size: int
) -> tuple:
    """Load every crop of ``split`` as an (n, 3, S, S) tensor plus 0/1 person labels."""
    specs = manifest.split(split)
    if not specs:
        raise ValueError(f"split {split!r} is empty")
    root = Path(crop_root)
    missing = [s.relpath for s in specs if not (root / s.relpath).exists()]
    if missing:
        raise FileNotFoundError(
            f"{len(missing)} crops of split {split!r} missing under {root} (first: {missing[0]}); "
            "run `patchforge build-dataset` to extract them"
        )
    X = torch.stack([load_crop(root / s.relpath, image_size) for s in specs])
    y = np.array([int(s.label == PERSON) for s in specs], dtype=np.int64)
    return X, y
