"""Input validation helpers shared by the estimators and the functional API."""

from __future__ import annotations

import hashlib
import random

import numpy as np
import torch


def check_images(X, *, channels: int = 3, dtype=torch.float32, name: str = "X") -> torch.Tensor:
    """Coerce an image batch to a float tensor of shape (n, C, H, W) in [0, 1].

    Accepts numpy arrays or tensors. A single (C, H, W) image is promoted to a
    batch of one.
    """
    if isinstance(X, torch.Tensor):
        t = X.detach() if not X.requires_grad else X
    else:
        t = torch.as_tensor(np.asarray(X))
    if not torch.is_floating_point(t):
        raise ValueError(f"{name} must hold floating point pixels in [0, 1], got dtype {t.dtype}")
    if t.ndim == 3:
        t = t.unsqueeze(0)
    if t.ndim != 4:
        raise ValueError(f"{name} must have shape (n, C, H, W), got {tuple(t.shape)}")
    if t.shape[1] != channels:
        raise ValueError(f"{name} must have {channels} channels, got {t.shape[1]}")
    if t.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    if not torch.isfinite(t).all():
        raise ValueError(f"{name} contains non-finite values")
    lo, hi = float(t.min()), float(t.max())
    if lo < 0.0 or hi > 1.0:
        raise ValueError(f"{name} pixels must lie in [0, 1], got range [{lo:.4g}, {hi:.4g}]")
    return t.to(dtype)


def check_labels(y, n: int, name: str = "y") -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != n:
        raise ValueError(f"{name} must be a 1-d array of length {n}, got shape {y.shape}")
    if not np.isin(y, (0, 1)).all():
        raise ValueError(f"{name} must be binary (0 = non-person, 1 = person)")
    return y.astype(np.int64)


def check_fraction_range(lo: float, hi: float, name: str) -> None:
    if not (0.0 < lo <= hi <= 1.0):
        raise ValueError(f"{name} must satisfy 0 < min <= max <= 1, got ({lo}, {hi})")


def set_deterministic(seed: int) -> None:
    """Seed every RNG we touch and pin torch to single-threaded deterministic kernels."""
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True, warn_only=True)


def tensor_digest(t: torch.Tensor) -> str:
    return hashlib.sha256(t.detach().cpu().contiguous().numpy().tobytes()).hexdigest()


def module_digest(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in module.state_dict().items():
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
