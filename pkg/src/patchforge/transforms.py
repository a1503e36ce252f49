"""Differentiable patch transforms: EOT draws, crease warps and placement onto images.

Patches are (C, H, W) tensors in [0, 1]. All random draws come from a numpy
``Generator`` and are materialised as plain parameter records (`EotParams`,
`CreaseSpec`, `Placement`) so a crafting run can be logged and replayed.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EotRanges:
    rotation_deg: tuple = (-20.0, 20.0)
    scale: tuple = (0.25, 1.25)
    shear: tuple = (-0.7, 0.7)
    brightness: tuple = (-0.1, 0.1)
    contrast: tuple = (0.8, 1.2)
    noise_sigma: float = 0.1


@dataclass(frozen=True)
class EotParams:
    rotation_deg: float = 0.0
    scale: float = 1.0
    shear_x: float = 0.0
    shear_y: float = 0.0
    brightness: float = 0.0
    contrast: float = 1.0
    noise_sigma: float = 0.1
    noise_seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def identity(cls) -> "EotParams":
        return cls(noise_sigma=0.0)


def sample_eot(rng, ranges: EotRanges = EotRanges()) -> EotParams:
    """One uniform draw of every transform parameter; noise sigma stays fixed."""
    return EotParams(
        rotation_deg=float(rng.uniform(*ranges.rotation_deg)),
        scale=float(rng.uniform(*ranges.scale)),
        shear_x=float(rng.uniform(*ranges.shear)),
        shear_y=float(rng.uniform(*ranges.shear)),
        brightness=float(rng.uniform(*ranges.brightness)),
        contrast=float(rng.uniform(*ranges.contrast)),
        noise_sigma=float(ranges.noise_sigma),
        noise_seed=int(rng.integers(0, 2**31 - 1)),
    )


def _as_batch(x: torch.Tensor):
    if x.ndim == 3:
        return x.unsqueeze(0), True
    if x.ndim == 4:
        return x, False
    raise ValueError(f"expected (C, H, W) or (N, C, H, W), got {tuple(x.shape)}")


def max_patch_side(image_size, max_area: float) -> int:
    """Largest square side whose area stays within ``max_area`` of the image."""
    h, w = image_size
    return max(1, min(h, w, math.floor(math.sqrt(max_area * h * w))))


def apply_eot(patch: torch.Tensor, params: EotParams, max_side: int | None = None) -> torch.Tensor:
    """Rotate, shear and rescale ``patch``, then jitter brightness/contrast and add noise.

    Geometry uses inverse affine mapping with bilinear sampling; samples falling
    outside the source are edge-clamped. The output side is ``round(side * scale)``,
    clamped to ``max_side``. Contrast pivots on mid-gray. The result is clipped
    to [0, 1].
    """
    x, squeeze = _as_batch(patch)
    n, c, h, w = x.shape
    out_h = max(1, round(h * params.scale))
    out_w = max(1, round(w * params.scale))
    if max_side is not None and max(out_h, out_w) > max_side:
        logger.debug("EOT scale %.3f clamped: side %d -> %d", params.scale, max(out_h, out_w), max_side)
        ratio = max_side / max(out_h, out_w)
        out_h, out_w = max(1, math.floor(out_h * ratio)), max(1, math.floor(out_w * ratio))

    theta = math.radians(params.rotation_deg)
    cos, sin = math.cos(theta), math.sin(theta)
    rot = torch.tensor([[cos, -sin], [sin, cos]], dtype=torch.float64)
    shear = torch.tensor([[1.0, params.shear_x], [params.shear_y, 1.0]], dtype=torch.float64)
    inverse = torch.linalg.inv(rot @ shear)
    affine = torch.zeros(n, 2, 3, dtype=x.dtype)
    affine[:, :, :2] = inverse.to(x.dtype)
    grid = F.affine_grid(affine, (n, c, out_h, out_w), align_corners=False)
    y = F.grid_sample(x, grid, mode="bilinear", padding_mode="border", align_corners=False)

    y = params.contrast * (y - 0.5) + 0.5 + params.brightness
    if params.noise_sigma > 0:
        gen = torch.Generator().manual_seed(params.noise_seed)
        y = y + params.noise_sigma * torch.randn(y.shape, generator=gen, dtype=y.dtype)
    y = y.clamp(0.0, 1.0)
    return y[0] if squeeze else y


@dataclass(frozen=True)
class CreaseConfig:
    angle_window_deg: float = 5.0
    strength: float = 0.02
    max_offset_frac: float = 0.1


@dataclass(frozen=True)
class CreaseSpec:
    """One fold line through ``vantage`` (normalised patch coords) at ``direction_deg``.

    Pixels on the positive side of the line (along the normal obtained by
    rotating the line direction +90 degrees) are pushed along the line by
    ``strength * d**2`` pixels, capped at ``max_offset_frac`` of the patch side.
    """

    vantage_u: float = 0.5
    vantage_v: float = 0.5
    base_deg: float = 0.0
    direction_deg: float = 0.0
    angle_window_deg: float = 5.0
    strength: float = 0.02
    max_offset_frac: float = 0.1

    def max_offset(self, size) -> float:
        return self.max_offset_frac * max(size)

    def to_dict(self) -> dict:
        return asdict(self)


def sample_crease(rng, config: CreaseConfig = CreaseConfig()) -> CreaseSpec:
    """Vantage uniform on the patch plane; direction = uniform base angle plus a perturbation
    uniform within the configured window centred on it."""
    u, v = float(rng.uniform(0.0, 1.0)), float(rng.uniform(0.0, 1.0))
    base = float(rng.uniform(0.0, 360.0))
    half = 0.5 * config.angle_window_deg
    direction = base + float(rng.uniform(-half, half))
    return CreaseSpec(u, v, base, direction, config.angle_window_deg, config.strength, config.max_offset_frac)


def crease_displacement(points: torch.Tensor, spec: CreaseSpec, size) -> torch.Tensor:
    """Displacement (dx, dy) in pixels at ``points`` (..., 2) given as (x, y) pixel coordinates."""
    h, w = size
    theta = math.radians(spec.direction_deg)
    along = torch.tensor([math.cos(theta), math.sin(theta)], dtype=points.dtype)
    normal = torch.tensor([-math.sin(theta), math.cos(theta)], dtype=points.dtype)
    vantage = torch.tensor([spec.vantage_u * w, spec.vantage_v * h], dtype=points.dtype)
    d = ((points - vantage) * normal).sum(-1)
    mag = torch.clamp(spec.strength * d**2, max=spec.max_offset(size))
    mag = torch.where(d > 0, mag, torch.zeros_like(mag))
    return mag.unsqueeze(-1) * along


def pixel_centers(size, dtype=torch.float32) -> torch.Tensor:
    h, w = size
    ys, xs = torch.meshgrid(
        torch.arange(h, dtype=dtype) + 0.5, torch.arange(w, dtype=dtype) + 0.5, indexing="ij"
    )
    return torch.stack([xs, ys], dim=-1)


def crease_field(spec: CreaseSpec, size, dtype=torch.float32) -> torch.Tensor:
    """Per-pixel (H, W, 2) displacement field of one crease, evaluated at pixel centres."""
    if size[0] < 2 or size[1] < 2:
        raise ValueError(f"crease field needs a patch of at least 2x2, got {tuple(size)}")
    return crease_displacement(pixel_centers(size, torch.float64), spec, size).to(dtype)


def warp_by_field(patch: torch.Tensor, field: torch.Tensor) -> torch.Tensor:
    """Resample so that content moves by ``field``: out(p) = in(p - field(p)).

    Bilinear, edge-clamped outside the source, differentiable w.r.t. ``patch``.
    """
    x, squeeze = _as_batch(patch)
    n, _, h, w = x.shape
    if tuple(field.shape) != (h, w, 2):
        raise ValueError(f"field shape {tuple(field.shape)} does not match patch ({h}, {w}, 2)")
    if not torch.isfinite(field).all():
        raise ValueError("displacement field has non-finite entries")
    src = pixel_centers((h, w), x.dtype) - field.to(x.dtype)
    grid = torch.stack([2.0 * src[..., 0] / w - 1.0, 2.0 * src[..., 1] / h - 1.0], dim=-1)
    y = F.grid_sample(x, grid.unsqueeze(0).expand(n, h, w, 2), mode="bilinear",
                      padding_mode="border", align_corners=False)
    return y[0] if squeeze else y


@dataclass(frozen=True)
class Placement:
    top: int
    left: int
    height: int
    width: int
    image_height: int
    image_width: int

    @property
    def area_fraction(self) -> float:
        return self.height * self.width / (self.image_height * self.image_width)

    def to_dict(self) -> dict:
        return asdict(self)


def side_for_fraction(fraction: float, image_size) -> int:
    h, w = image_size
    return max(1, min(h, w, math.floor(math.sqrt(fraction * h * w))))


def place_patch(image: torch.Tensor, patch: torch.Tensor, rng=None, size_range=None, position=None):
    """Paste ``patch`` into ``image`` and return the new image with its `Placement`.

    With ``size_range=(lo, hi)`` the patch is first resized to a square whose
    area is a fraction drawn uniformly from [lo, hi] of the image area (the
    integer side is kept so the achieved fraction stays within the range);
    otherwise it keeps its own size. The top-left corner is ``position`` or
    uniform over all positions that keep the patch inside the image. Only the
    pixels under the patch change.
    """
    c, h_img, w_img = image.shape
    if patch.ndim != 3 or patch.shape[0] != c:
        raise ValueError(f"patch shape {tuple(patch.shape)} incompatible with image {tuple(image.shape)}")
    if size_range is not None:
        lo, hi = size_range
        side = side_for_fraction(float(rng.uniform(lo, hi)), (h_img, w_img))
        # flooring can undershoot the lower bound; keep the achieved area inside the range
        side = min(max(side, math.ceil(math.sqrt(lo * h_img * w_img) - 1e-9)), side_for_fraction(hi, (h_img, w_img)))
        if patch.shape[1:] != (side, side):
            patch = F.interpolate(patch.unsqueeze(0), size=(side, side), mode="bilinear",
                                  align_corners=False)[0]
    ph, pw = patch.shape[1:]
    if ph > h_img or pw > w_img:
        raise ValueError(f"patch {ph}x{pw} does not fit in image {h_img}x{w_img}")
    if position is None:
        top = int(rng.integers(0, h_img - ph + 1))
        left = int(rng.integers(0, w_img - pw + 1))
    else:
        top, left = (int(v) for v in position)
        if not (0 <= top <= h_img - ph and 0 <= left <= w_img - pw):
            raise ValueError(f"position {position} puts the patch outside the image")
    out = image.clone().to(patch.dtype)
    out[:, top:top + ph, left:left + pw] = patch
    return out, Placement(top, left, ph, pw, h_img, w_img)
