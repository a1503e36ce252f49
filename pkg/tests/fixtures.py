"""Synthetic COCO annotations and image data shared by the test modules."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch
from PIL import Image

IMAGE_SIDE = 128
CELL = 42

# image id -> list of (category, cell index); cells are laid out on a 3x3 grid
LAYOUT: dict = {}
for i in range(1, 25):  # 1..3 persons
    LAYOUT[i] = [("person", c) for c in range(1 + (i - 1) % 3)]
for i in range(25, 29):  # 4 persons: excluded
    LAYOUT[i] = [("person", c) for c in range(4)]
for i in range(29, 31):  # 5 persons: excluded
    LAYOUT[i] = [("person", c) for c in range(5)]
for i in range(31, 55):  # 1..4 objects, no person
    LAYOUT[i] = [("dog" if c % 2 else "car", c) for c in range(1 + (i - 31) % 4)]
for i in range(55, 59):  # person next to a dog
    LAYOUT[i] = [("person", 0), ("dog", 4)]
LAYOUT[59] = [("person", 0), ("person", 1)]  # second record made degenerate below
LAYOUT[60] = [("car", 0), ("car", 1)]  # second record loses its bbox below
MALFORMED = {59: "zero width", 60: "missing bbox"}

EXPECTED_PERSON = list(range(1, 25)) + list(range(55, 59))
EXPECTED_NONPERSON = list(range(31, 55))
EXPECTED_PERSON_CROPS = 8 * (1 + 2 + 3) + 4
EXPECTED_NONPERSON_CROPS = 6 * (1 + 2 + 3 + 3)

PERSON_RGB = (200, 40, 40)
OBJECT_RGB = (40, 40, 200)


def cell_box(cell: int, image_id: int) -> list:
    r, c = divmod(cell, 3)
    side = 30 + (image_id + cell) % 6
    return [4 + CELL * c, 4 + CELL * r, side, side]


def make_coco(image_ids=None) -> dict:
    image_ids = sorted(LAYOUT) if image_ids is None else image_ids
    cats = {"person": 1, "car": 3, "dog": 18}
    images, anns = [], []
    for image_id in image_ids:
        images.append({"id": image_id, "file_name": f"{image_id:012d}.png", "width": IMAGE_SIDE,
                       "height": IMAGE_SIDE})
        for k, (cat, cell) in enumerate(LAYOUT[image_id]):
            ann = {"id": image_id * 10 + k, "image_id": image_id, "category_id": cats[cat],
                   "bbox": cell_box(cell, image_id), "iscrowd": 0}
            if image_id == 59 and k == 1:
                ann["bbox"][2] = 0
            if image_id == 60 and k == 1:
                del ann["bbox"]
            anns.append(ann)
    return {"images": images, "annotations": anns,
            "categories": [{"id": v, "name": k} for k, v in cats.items()]}


def render_image(image_id: int) -> Image.Image:
    rng = np.random.default_rng(image_id)
    arr = rng.integers(100, 156, size=(IMAGE_SIDE, IMAGE_SIDE, 3)).astype(np.uint8)
    for k, (cat, cell) in enumerate(LAYOUT[image_id]):
        x, y, w, h = cell_box(cell, image_id)
        arr[y:y + h, x:x + w] = PERSON_RGB if cat == "person" else OBJECT_RGB
    return Image.fromarray(arr)


def write_coco_fixture(root, skip_images=()) -> tuple:
    """Write annotations JSON plus PNG images under ``root``; returns (annotations path, image dir)."""
    root = Path(root)
    image_dir = root / "images"
    image_dir.mkdir(parents=True, exist_ok=True)
    for image_id in LAYOUT:
        if image_id not in skip_images:
            render_image(image_id).save(image_dir / f"{image_id:012d}.png")
    ann_path = root / "instances.json"
    ann_path.write_text(json.dumps(make_coco()))
    return ann_path, image_dir


def squares(n: int, size: int = 32, seed: int = 0, person_fraction: float = 0.5, square: int = 16) -> tuple:
    """Noisy gray images with one coloured square: red for person (1), blue otherwise (0)."""
    rng = np.random.default_rng(seed)
    y = (np.arange(n) < round(n * person_fraction)).astype(np.int64)
    rng.shuffle(y)
    X = 0.5 + 0.08 * rng.standard_normal((n, 3, size, size))
    for i in range(n):
        top, left = rng.integers(0, size - square + 1, size=2)
        colour = (0.85, 0.15, 0.15) if y[i] else (0.15, 0.15, 0.85)
        for ch in range(3):
            X[i, ch, top:top + square, left:left + square] = colour[ch]
    return torch.as_tensor(np.clip(X, 0, 1), dtype=torch.float32), y
