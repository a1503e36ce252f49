"""COCO annotation parsing, person/non-person filtering and box padding."""

from __future__ import annotations

import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Mapping, NamedTuple

logger = logging.getLogger(__name__)

PERSON = "person"
NON_PERSON = "non_person"
LABELS = (NON_PERSON, PERSON)

MIN_PERSONS = 1
MAX_PERSONS = 3


class MalformedAnnotationError(ValueError):
    def __init__(self, record_id, reason: str):
        super().__init__(f"malformed annotation {record_id!r}: {reason}")
        self.record_id = record_id
        self.reason = reason


@dataclass(frozen=True)
class AnnotationRecord:
    image_id: Any
    category: str
    bbox: tuple
    ann_id: Any = None

    def validate(self) -> None:
        rid = self.ann_id if self.ann_id is not None else self.image_id
        if not isinstance(self.bbox, (tuple, list)) or len(self.bbox) != 4:
            raise MalformedAnnotationError(rid, f"bbox must be (x, y, w, h), got {self.bbox!r}")
        try:
            x, y, w, h = (float(v) for v in self.bbox)
        except (TypeError, ValueError):
            raise MalformedAnnotationError(rid, f"non-numeric bbox {self.bbox!r}") from None
        if not all(math.isfinite(v) for v in (x, y, w, h)):
            raise MalformedAnnotationError(rid, "non-finite bbox")
        if w <= 0 or h <= 0:
            raise MalformedAnnotationError(rid, f"degenerate bbox with w={w}, h={h}")
        if not isinstance(self.category, str) or not self.category:
            raise MalformedAnnotationError(rid, "missing category")


@dataclass(frozen=True)
class ImageInfo:
    image_id: Any
    file_name: str
    width: int
    height: int


class CocoIndex(NamedTuple):
    images: dict
    annotations: list


def load_coco(path: str | Path) -> CocoIndex:
    """Read a COCO-style instances file into image info and annotation records.

    Records are not validated here; `filter_annotations` rejects bad ones so a
    handful of broken boxes cannot abort a full-dataset run.
    """
    with open(path) as fh:
        coco = json.load(fh)
    return parse_coco(coco)


def parse_coco(coco: Mapping) -> CocoIndex:
    for key in ("images", "annotations", "categories"):
        if key not in coco:
            raise ValueError(f"COCO file has no '{key}' array")
    cats = {c["id"]: c["name"] for c in coco["categories"]}
    images = {
        im["id"]: ImageInfo(im["id"], im["file_name"], int(im["width"]), int(im["height"]))
        for im in coco["images"]
    }
    records = []
    for ann in coco["annotations"]:
        bbox = ann.get("bbox")
        records.append(
            AnnotationRecord(
                image_id=ann.get("image_id"),
                category=cats.get(ann.get("category_id"), ""),
                bbox=tuple(bbox) if isinstance(bbox, list) else bbox,
                ann_id=ann.get("id"),
            )
        )
    return CocoIndex(images, records)


def index_by_image(annotations: Iterable[AnnotationRecord]) -> dict:
    index = defaultdict(list)
    for rec in annotations:
        index[rec.image_id].append(rec)
    return dict(index)


class FilterResult(NamedTuple):
    person_ids: list
    nonperson_ids: list
    rejected: list


def filter_annotations(
    annotations: Iterable[AnnotationRecord], per_image_index: Mapping | None = None
) -> FilterResult:
    """Split images into person (1 to 3 person boxes) and non-person (zero person boxes) sets.

    Images with more than three persons fall in neither set. An image holding a
    malformed record is dropped from both sets, and the offending record ids are
    returned in ``rejected``.
    """
    if per_image_index is None:
        per_image_index = index_by_image(annotations)

    person, nonperson, rejected = [], [], []
    for image_id, recs in per_image_index.items():
        bad = False
        for rec in recs:
            try:
                rec.validate()
            except MalformedAnnotationError as err:
                rejected.append(err.record_id)
                logger.warning("%s", err)
                bad = True
        if bad:
            continue
        n_person = sum(rec.category == PERSON for rec in recs)
        if n_person == 0:
            nonperson.append(image_id)
        elif MIN_PERSONS <= n_person <= MAX_PERSONS:
            person.append(image_id)
    return FilterResult(sorted(person, key=sort_key), sorted(nonperson, key=sort_key), rejected)


def sort_key(image_id):
    # ints before strings; keeps ordering total on mixed id types
    if isinstance(image_id, (int, float)):
        return (0, image_id, "")
    return (1, 0, str(image_id))


def compute_padded_box(bbox, padding_fraction: float, image_size) -> tuple:
    """Grow each side of ``bbox`` by ``padding_fraction`` of its length, split evenly, then clip.

    ``bbox`` is (x, y, w, h) and ``image_size`` is (width, height). The result is
    the exact float box; see `pixel_box` for the integer raster region.
    """
    x, y, w, h = (float(v) for v in bbox)
    if w <= 0 or h <= 0:
        raise ValueError(f"degenerate bbox {tuple(bbox)}")
    if padding_fraction < 0:
        raise ValueError(f"padding_fraction must be >= 0, got {padding_fraction}")
    img_w, img_h = image_size
    dx, dy = 0.5 * padding_fraction * w, 0.5 * padding_fraction * h
    x0, y0 = max(0.0, x - dx), max(0.0, y - dy)
    x1, y1 = min(float(img_w), x + w + dx), min(float(img_h), y + h + dy)
    if x1 <= x0 or y1 <= y0:
        raise ValueError(f"bbox {tuple(bbox)} lies outside image of size {tuple(image_size)}")
    return (x0, y0, x1 - x0, y1 - y0)


def pixel_box(box, image_size) -> tuple:
    """Round a float box outward to whole pixels (floor origin, ceil far edge) and clip."""
    x, y, w, h = box
    img_w, img_h = image_size
    x0 = max(0, math.floor(x))
    y0 = max(0, math.floor(y))
    x1 = min(int(img_w), math.ceil(x + w))
    y1 = min(int(img_h), math.ceil(y + h))
    return (x0, y0, x1 - x0, y1 - y0)
