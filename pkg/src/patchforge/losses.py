"""Patch objective: person-probability term plus similarity and smoothness regularisers."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

TV_EPS = 1e-8


@dataclass(frozen=True)
class LossWeights:
    beta: float = 4.0
    gamma: float = 0.5

    def __post_init__(self):
        for name in ("beta", "gamma"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be a finite non-negative number, got {v}")


@dataclass
class LossBreakdown:
    """Loss terms of one step. Fields are tensors during optimisation, floats once detached."""

    l_class: object
    l_sim: object
    l_tv: object
    l_total: object
    beta: float
    gamma: float

    def detached(self) -> "LossBreakdown":
        f = lambda v: float(v.detach()) if isinstance(v, torch.Tensor) else float(v)  # noqa: E731
        return LossBreakdown(f(self.l_class), f(self.l_sim), f(self.l_tv), f(self.l_total), self.beta, self.gamma)

    def to_dict(self) -> dict:
        d = self.detached()
        return {"l_class": d.l_class, "l_sim": d.l_sim, "l_tv": d.l_tv, "l_total": d.l_total,
                "beta": d.beta, "gamma": d.gamma}


def classification_loss(person_probs: torch.Tensor, sign: str = "mean") -> torch.Tensor:
    """Mean person probability over the batch; minimising it pushes images towards non-person.

    ``sign="negated"`` returns the negated mean instead. An optimiser minimising
    that would *raise* person confidence; it is kept for sign ablations.
    """
    if person_probs.numel() == 0:
        raise ValueError("classification_loss needs at least one probability")
    mean = person_probs.mean()
    if sign == "mean":
        return mean
    if sign == "negated":
        return -mean
    raise ValueError(f"sign must be 'mean' or 'negated', got {sign!r}")


def similarity_loss(patch: torch.Tensor, reference: torch.Tensor) -> torch.Tensor:
    """Negative squared cosine similarity between the flattened patch and reference, in [-1, 0]."""
    if patch.shape != reference.shape:
        raise ValueError(f"patch {tuple(patch.shape)} and reference {tuple(reference.shape)} differ in shape")
    p, n = patch.reshape(-1), reference.reshape(-1).to(patch.dtype)
    p_norm, n_norm = p.norm(), n.norm()
    if float(p_norm.detach()) == 0.0 or float(n_norm.detach()) == 0.0:
        raise ValueError("cosine similarity is undefined for an all-zero patch or reference")
    cos = (p * n).sum() / (p_norm * n_norm)
    return -(cos**2)


def tv_loss(patch: torch.Tensor, eps: float = TV_EPS) -> torch.Tensor:
    """Isotropic total variation summed over pixels and channels.

    Each pixel contributes sqrt(dy^2 + dx^2 + eps) using its forward
    differences; differences past the last row or column count as zero.
    Accepts (H, W) or (C, H, W).
    """
    if patch.ndim == 2:
        patch = patch.unsqueeze(0)
    if patch.ndim != 3 or patch.shape[-1] < 2 or patch.shape[-2] < 2:
        raise ValueError(f"tv_loss needs a patch of at least 2x2, got {tuple(patch.shape)}")
    dy = torch.zeros_like(patch)
    dx = torch.zeros_like(patch)
    dy[:, :-1, :] = patch[:, 1:, :] - patch[:, :-1, :]
    dx[:, :, :-1] = patch[:, :, 1:] - patch[:, :, :-1]
    return torch.sqrt(dy**2 + dx**2 + eps).sum()


def total_loss(l_class, l_sim, l_tv, weights: LossWeights | None = None) -> LossBreakdown:
    weights = weights or LossWeights()
    for name, v in (("l_class", l_class), ("l_sim", l_sim), ("l_tv", l_tv)):
        value = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
        if not math.isfinite(value):
            raise ValueError(f"loss term {name} is not finite ({value})")
    total = l_class + weights.beta * l_sim + weights.gamma * l_tv
    return LossBreakdown(l_class, l_sim, l_tv, total, weights.beta, weights.gamma)
