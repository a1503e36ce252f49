"""Adversarial patch optimisation: EOT + one crease per item, placement, composite loss, Adam."""

from __future__ import annotations

import contextlib
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .losses import LossWeights, classification_loss, similarity_loss, total_loss, tv_loss
from .models import ClassifierModel, forward_person_prob
from .transforms import (
    CreaseConfig,
    CreaseSpec,
    EotParams,
    EotRanges,
    Placement,
    apply_eot,
    crease_field,
    max_patch_side,
    place_patch,
    sample_crease,
    sample_eot,
    warp_by_field,
)

logger = logging.getLogger(__name__)

# optimisation steps per target model reported for the full-scale runs
REFERENCE_STEPS = {"vit-base-224": 4015, "vit-base-224-in21k": 3024, "dino-vitb16": 3039, "dinov3-vitb16": 5328}
NOMINAL_IMAGE_SIZE = 224


class CraftingError(RuntimeError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class CraftConfig:
    steps: int = 1000
    learning_rate: float = 1e-3
    batch_size: int = 32
    patch_size: int = 128
    max_area: float = 0.6
    seed: int = 2
    weights: LossWeights = field(default_factory=LossWeights)
    eot: EotRanges = field(default_factory=EotRanges)
    crease: CreaseConfig = field(default_factory=CreaseConfig)
    loss_sign: str = "mean"

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not 0.0 < self.max_area <= 1.0:
            raise ValueError("max_area must be in (0, 1]")
        if self.batch_size < 1 or self.patch_size < 2:
            raise ValueError("batch_size must be >= 1 and patch_size >= 2")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.loss_sign not in ("mean", "negated"):
            raise ValueError("loss_sign must be 'mean' or 'negated'")

    @classmethod
    def for_backbone(cls, backbone_id: str, **kwargs) -> "CraftConfig":
        kwargs.setdefault("steps", REFERENCE_STEPS.get(backbone_id, cls.steps))
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass
class PatchState:
    pixels: torch.Tensor
    reference: torch.Tensor
    step: int = 0
    seed: int = 2
    optimizer: torch.optim.Optimizer | None = field(default=None, repr=False)

    @property
    def patch_size(self) -> int:
        return int(self.pixels.shape[-1])

    @property
    def nominal_area_fraction(self) -> float:
        return self.patch_size**2 / NOMINAL_IMAGE_SIZE**2

    def ensure_optimizer(self, lr: float) -> torch.optim.Optimizer:
        if self.optimizer is None:
            self.optimizer = torch.optim.Adam([self.pixels], lr=lr)
        return self.optimizer


def _load_reference(reference, size: int) -> torch.Tensor:
    if isinstance(reference, (str, Path)):
        try:
            with Image.open(reference) as im:
                reference = im.convert("RGB").copy()
        except OSError as err:
            raise ValueError(f"cannot read reference image {reference}: {err}") from err
    if isinstance(reference, Image.Image):
        im = reference.convert("RGB")
        if im.size != (size, size):
            im = im.resize((size, size), Image.BILINEAR)
        return torch.from_numpy(np.asarray(im, dtype=np.float32) / 255.0).permute(2, 0, 1).contiguous()
    t = torch.as_tensor(np.asarray(reference) if not isinstance(reference, torch.Tensor) else reference)
    t = t.detach().float()
    if t.ndim != 3 or t.shape[0] != 3:
        raise ValueError(f"reference tensor must be (3, H, W), got {tuple(t.shape)}")
    if t.shape[1:] != (size, size):
        t = torch.nn.functional.interpolate(t[None], size=(size, size), mode="bilinear", align_corners=False)[0]
    return t.clamp(0.0, 1.0)


def init_patch(reference=None, patch_size: int = 128, seed: int = 2) -> PatchState:
    """Start from the reference image (resized to the patch size) or uniform mid-gray."""
    if reference is None:
        ref = torch.full((3, patch_size, patch_size), 0.5)
    else:
        ref = _load_reference(reference, patch_size)
    return PatchState(torch.nn.Parameter(ref.clone()), ref.clone(), 0, seed)


@contextlib.contextmanager
def frozen_weights(model: torch.nn.Module):
    """Temporarily stop gradients into ``model`` and put it in eval mode."""
    flags = [p.requires_grad for p in model.parameters()]
    was_training = model.training
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    try:
        yield model
    finally:
        for p, flag in zip(model.parameters(), flags):
            p.requires_grad_(flag)
        model.train(was_training)


@dataclass(frozen=True)
class ItemDraw:
    eot: EotParams
    crease: CreaseSpec
    placement: Placement

    def to_dict(self) -> dict:
        return {"eot": self.eot.to_dict(), "crease": self.crease.to_dict(), "placement": self.placement.to_dict()}

    @classmethod
    def from_dict(cls, d) -> "ItemDraw":
        return cls(EotParams(**d["eot"]), CreaseSpec(**d["crease"]), Placement(**d["placement"]))


def item_rng(seed: int, step: int, item: int) -> np.random.Generator:
    # one independent stream per (step, batch slot); batch parallelism cannot reorder draws
    return np.random.default_rng([seed, step, item])


def render_batch(pixels: torch.Tensor, images: torch.Tensor, config: CraftConfig, step: int, draws=None):
    """Push the patch through EOT, a fresh crease and random placement for every image.

    Returns the patched batch and the `ItemDraw` used per image. Passing
    ``draws`` (for example from a trace) reuses them instead of sampling.
    """
    out, used = [], []
    max_side = max_patch_side(images.shape[-2:], config.max_area)
    for i, image in enumerate(images):
        if draws is None:
            rng = item_rng(config.seed, step, i)
            eot = sample_eot(rng, config.eot)
            crease = sample_crease(rng, config.crease)
            position = None
        else:
            eot, crease = draws[i].eot, draws[i].crease
            rng, position = None, (draws[i].placement.top, draws[i].placement.left)
        p = apply_eot(pixels, eot, max_side=max_side)
        p = warp_by_field(p, crease_field(crease, p.shape[-2:], p.dtype))
        patched, placement = place_patch(image, p, rng, position=position)
        out.append(patched)
        used.append(ItemDraw(eot, crease, placement))
    return torch.stack(out), used


@dataclass
class CraftTrace:
    rows: list = field(default_factory=list)

    def __len__(self):
        return len(self.rows)

    def losses(self) -> list:
        return [r["loss"] for r in self.rows]

    def draws(self, step: int) -> list:
        return [ItemDraw.from_dict(d) for d in self.rows[step]["draws"]]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.rows)

    def write(self, path) -> None:
        Path(path).write_text(self.to_jsonl())

    @classmethod
    def read(cls, path) -> "CraftTrace":
        return cls([json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()])


def craft_step(state: PatchState, model: ClassifierModel, images: torch.Tensor, config: CraftConfig,
               draws=None):
    """One optimisation step on the patch pixels; the model is never updated.

    Returns ``(state, breakdown, draws, mean_person_prob)``. ``state`` is updated
    in place: pixels move by one Adam step and are clipped back to [0, 1].
    """
    optimizer = state.ensure_optimizer(config.learning_rate)
    with frozen_weights(model):
        batch, used = render_batch(state.pixels, images, config, state.step, draws)
        probs = forward_person_prob(model, batch)
        breakdown = total_loss(
            classification_loss(probs, config.loss_sign),
            similarity_loss(state.pixels, state.reference),
            tv_loss(state.pixels),
            config.weights,
        )
        optimizer.zero_grad(set_to_none=True)
        breakdown.l_total.backward()
        optimizer.step()
    with torch.no_grad():
        state.pixels.clamp_(0.0, 1.0)
    state.step += 1
    return state, breakdown, used, float(probs.detach().mean())


def craft(model: ClassifierModel, images, config: CraftConfig = CraftConfig(), labels=None, state=None,
          replay: CraftTrace | None = None, reference=None):
    """Run ``config.steps`` crafting steps over shuffled batches of person images.

    ``labels`` (1 = person), when given, restricts the pool to person images.
    ``replay`` re-runs the exact batches and transform draws of an earlier trace.
    """
    from ._validation import check_images

    images = check_images(images)
    if labels is not None:
        keep = np.asarray(labels) == 1
        images = images[torch.as_tensor(keep)]
    if len(images) == 0:
        raise ValueError("the attack subset has no person images")
    if replay is not None and len(replay) < config.steps:
        raise ValueError(f"replay trace has {len(replay)} rows, {config.steps} steps requested")
    if state is None:
        state = init_patch(reference, config.patch_size, config.seed)

    order_rng = np.random.default_rng(config.seed)
    order, cursor = order_rng.permutation(len(images)), 0
    trace = CraftTrace()
    for _ in range(config.steps):
        step = state.step
        if replay is not None:
            row = replay.rows[step]
            idx = np.asarray(row["indices"], dtype=np.int64)
            draws = replay.draws(step)
        else:
            take = []
            while len(take) < min(config.batch_size, len(images)):
                if cursor == len(order):
                    order, cursor = order_rng.permutation(len(images)), 0
                take.append(int(order[cursor]))
                cursor += 1
            idx, draws = np.asarray(take, dtype=np.int64), None
        try:
            state, breakdown, used, mean_prob = craft_step(state, model, images[idx], config, draws)
        except ValueError as err:
            raise CraftingError(f"step {step}: {err}", trace) from err
        trace.rows.append({
            "step": step,
            "indices": idx.tolist(),
            "loss": breakdown.to_dict(),
            "mean_person_prob": mean_prob,
            "draws": [d.to_dict() for d in used],
        })
        if step % 100 == 0:
            d = breakdown.detached()
            logger.info("step %d total %.4f class %.4f", step, d.l_total, d.l_class)
    return state, trace


def quantize(pixels: torch.Tensor) -> torch.Tensor:
    return torch.round(pixels.detach().float().clamp(0, 1) * 255.0) / 255.0


def export_patch(state: PatchState, path, metadata: dict | None = None) -> tuple:
    """Write the patch as an 8-bit PNG plus a JSON sidecar; returns both paths.

    The state's pixels are snapped to the 8-bit grid first, so the raster and
    the in-memory patch agree exactly afterwards.
    """
    path = Path(path)
    with torch.no_grad():
        state.pixels.copy_(quantize(state.pixels))
    arr = np.round(state.pixels.detach().float().permute(1, 2, 0).numpy() * 255.0).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")
    meta = {"seed": state.seed, "steps": state.step, "patch_size": state.patch_size,
            "nominal_area_fraction": state.nominal_area_fraction}
    meta.update(metadata or {})
    meta_path = path.with_suffix(".meta.json")
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path, meta_path


def import_patch(path) -> tuple:
    """Read a patch raster (and its sidecar when present) as a (3, S, S) float tensor in [0, 1]."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / np.float32(255.0)
    except OSError as err:
        raise ValueError(f"cannot read patch raster {path}: {err}") from err
    meta_path = path.with_suffix(".meta.json")
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous(), meta
