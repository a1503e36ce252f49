"""Crop candidates, balanced split construction and the dataset manifest file."""

from __future__ import annotations

import json
import logging
from collections import Counter, OrderedDict
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping

import numpy as np

from .annotations import (
    NON_PERSON,
    PERSON,
    AnnotationRecord,
    ImageInfo,
    compute_padded_box,
    pixel_box,
    sort_key,
)

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
MANIFEST_VERSION = 1


class InsufficientPoolError(ValueError):
    pass


@dataclass(frozen=True)
class CropSpec:
    image_id: object
    k: int
    file_name: str
    bbox: tuple
    padded_box: tuple
    label: str
    split: str = "unassigned"

    @property
    def relpath(self) -> str:
        return f"{self.split}/{self.label}/{self.image_id}_{self.k:02d}.png"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bbox"] = list(self.bbox)
        d["padded_box"] = list(self.padded_box)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "CropSpec":
        return cls(
            image_id=d["image_id"],
            k=int(d["k"]),
            file_name=d["file_name"],
            bbox=tuple(d["bbox"]),
            padded_box=tuple(int(v) for v in d["padded_box"]),
            label=d["label"],
            split=d["split"],
        )


def candidate_crops(
    per_image_index: Mapping,
    images: Mapping,
    person_ids,
    nonperson_ids,
    padding_fraction: float = 0.15,
    max_nonperson_per_image: int = 3,
) -> tuple:
    """Turn the filtered image sets into unassigned person / non-person crop pools.

    Person images contribute one crop per person box. Non-person images
    contribute one crop per object box, capped at ``max_nonperson_per_image``.
    """

    def crops_for(image_id, recs, label):
        info: ImageInfo = images[image_id]
        size = (info.width, info.height)
        out = []
        for k, rec in enumerate(recs):
            padded = compute_padded_box(rec.bbox, padding_fraction, size)
            out.append(
                CropSpec(
                    image_id=image_id,
                    k=k,
                    file_name=info.file_name,
                    bbox=tuple(float(v) for v in rec.bbox),
                    padded_box=pixel_box(padded, size),
                    label=label,
                )
            )
        return out

    def ordered(recs):
        return sorted(recs, key=lambda r: sort_key(r.ann_id) if r.ann_id is not None else (2, 0, ""))

    person_pool, nonperson_pool = [], []
    for image_id in person_ids:
        recs = [r for r in ordered(per_image_index[image_id]) if r.category == PERSON]
        person_pool.extend(crops_for(image_id, recs, PERSON))
    for image_id in nonperson_ids:
        recs = ordered(per_image_index[image_id])[:max_nonperson_per_image]
        nonperson_pool.extend(crops_for(image_id, recs, NON_PERSON))
    return person_pool, nonperson_pool


@dataclass
class DatasetManifest:
    crops: list
    padding_fraction: float = 0.15
    seed: int = 2
    sizes: tuple = (20000, 2500, 2500)
    attack: list = field(default_factory=list)
    reserve: list = field(default_factory=list)

    @property
    def counts(self) -> dict:
        c = Counter((spec.label, spec.split) for spec in self.crops)
        return {f"{label}/{split}": c[(label, split)] for split in SPLITS for label in (PERSON, NON_PERSON)}

    def split(self, name: str) -> list:
        if name == "attack":
            return list(self.attack)
        return [c for c in self.crops if c.split == name]

    def image_ids(self, split: str) -> set:
        return {c.image_id for c in self.split(split)}

    def config(self) -> dict:
        return OrderedDict(
            version=MANIFEST_VERSION,
            padding_fraction=self.padding_fraction,
            seed=self.seed,
            sizes=list(self.sizes),
            counts=self.counts,
        )

    def validate(self) -> None:
        for split, size in zip(SPLITS, self.sizes):
            members = self.split(split)
            if len(members) != size:
                raise ValueError(f"split {split} has {len(members)} crops, expected {size}")
            n_person = sum(c.label == PERSON for c in members)
            if 2 * n_person != size:
                raise ValueError(f"split {split} is unbalanced: {n_person} person of {size}")
        seen = {}
        for split in SPLITS:
            for image_id in self.image_ids(split):
                if image_id in seen:
                    raise ValueError(f"image {image_id!r} appears in {seen[image_id]} and {split}")
                seen[image_id] = split


def _group_by_image(pool) -> dict:
    groups = {}
    for spec in pool:
        groups.setdefault(spec.image_id, []).append(spec)
    return groups


def _seeded_image_order(groups: Mapping, rng: np.random.Generator) -> list:
    ids = sorted(groups, key=sort_key)
    return [ids[i] for i in rng.permutation(len(ids))]


def build_splits(person_pool, nonperson_pool, sizes=(20000, 2500, 2500), seed: int = 2,
                 padding_fraction: float = 0.15) -> DatasetManifest:
    """Draw exactly class-balanced train/val/test splits from the two crop pools.

    Images are visited in a seeded shuffle of their ascending ids and all of an
    image's crops go to the same split. When a split's quota is reached midway
    through an image, the remainder of that image is dropped rather than spilled
    into the next split. Crops from untouched images are kept as ``reserve``.
    """
    sizes = tuple(int(s) for s in sizes)
    if len(sizes) != 3 or any(s < 0 or s % 2 for s in sizes):
        raise ValueError(f"sizes must be three non-negative even numbers, got {sizes}")
    need = sum(sizes) // 2
    for name, pool in ((PERSON, person_pool), (NON_PERSON, nonperson_pool)):
        if len(pool) < need:
            raise InsufficientPoolError(
                f"{name} pool has {len(pool)} crops, {need} needed (short by {need - len(pool)})"
            )

    rng = np.random.default_rng(seed)
    crops, reserve = [], []
    for pool in (person_pool, nonperson_pool):
        groups = _group_by_image(pool)
        order = _seeded_image_order(groups, rng)
        quotas = [s // 2 for s in sizes]
        split_idx = 0
        for image_id in order:
            while split_idx < 3 and quotas[split_idx] == 0:
                split_idx += 1
            members = sorted(groups[image_id], key=lambda c: c.k)
            if split_idx == 3:
                reserve.extend(replace(c, split="reserve") for c in members)
                continue
            take = members[: quotas[split_idx]]
            quotas[split_idx] -= len(take)
            crops.extend(replace(c, split=SPLITS[split_idx]) for c in take)
        if any(quotas):
            # only possible if a truncated image ate the crops we counted on
            raise InsufficientPoolError(f"{pool[0].label} pool exhausted with quotas {quotas} unfilled")

    split_rank = {s: i for i, s in enumerate(SPLITS)}
    crops.sort(key=lambda c: (split_rank[c.split], c.label != PERSON, sort_key(c.image_id), c.k))
    manifest = DatasetManifest(crops, padding_fraction, seed, sizes, reserve=reserve)
    manifest.validate()
    return manifest


def select_attack_subset(manifest: DatasetManifest, n: int, seed: int = 2, source: str = "held-out",
                         label: str = PERSON) -> list:
    """Pick ``n`` crops of ``label`` for patch optimisation by seeded shuffle.

    ``source="held-out"`` draws from reserve crops, which share no image with
    any split. If the reserve is too small it falls back to the training split
    and logs a warning. ``source="train"`` draws from the training split
    directly.
    """
    if n < 0:
        raise ValueError("n must be >= 0")
    if source not in ("held-out", "train"):
        raise ValueError(f"source must be 'held-out' or 'train', got {source!r}")
    if n == 0:
        return []

    pool = [c for c in manifest.reserve if c.label == label]
    split_name = "attack"
    if source == "train" or len(pool) < n:
        if source == "held-out":
            logger.warning(
                "held-out pool has %d %s crops, %d requested; drawing the attack subset from the train split",
                len(pool), label, n,
            )
        pool = [c for c in manifest.split("train") if c.label == label]
    if len(pool) < n:
        raise InsufficientPoolError(f"attack subset of {n} requested, only {len(pool)} {label} crops available")

    pool.sort(key=lambda c: (sort_key(c.image_id), c.k))
    rng = np.random.default_rng(seed)
    picked = [pool[i] for i in rng.permutation(len(pool))[:n]]
    return [replace(c, split=split_name) for c in picked]


def write_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    lines = [json.dumps({"config": manifest.config()}, sort_keys=True)]
    for group in (manifest.crops, manifest.attack, manifest.reserve):
        lines.extend(json.dumps(c.to_dict(), sort_keys=True) for c in group)
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path: str | Path) -> DatasetManifest:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ValueError(f"empty manifest {path}")
    cfg = json.loads(lines[0])["config"]
    crops, attack, reserve = [], [], []
    for line in lines[1:]:
        spec = CropSpec.from_dict(json.loads(line))
        {"attack": attack, "reserve": reserve}.get(spec.split, crops).append(spec)
    return DatasetManifest(
        crops,
        padding_fraction=cfg["padding_fraction"],
        seed=cfg["seed"],
        sizes=tuple(cfg["sizes"]),
        attack=attack,
        reserve=reserve,
    )


__all__ = [
    "AnnotationRecord",
    "CropSpec",
    "DatasetManifest",
    "InsufficientPoolError",
    "build_splits",
    "candidate_crops",
    "read_manifest",
    "select_attack_subset",
    "write_manifest",
]
