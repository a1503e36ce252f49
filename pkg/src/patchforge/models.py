"""Binary person classifiers on top of ViT-B/16 style backbones.

Every backbone is wrapped in `ClassifierModel`, which takes raw [0, 1] pixels,
applies the checkpoint's own mean/std normalisation and returns two logits
(index 1 = person). Keeping the normalisation inside the model lets adversarial
patches be optimised directly in printable pixel space.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import torch
from torch import nn

logger = logging.getLogger(__name__)

PERSON_CLASS_INDEX = 1
CACHE_ENV = "PATCHFORGE_CACHE"
CHECKPOINT_FORMAT = "patchforge-checkpoint"

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
HALF = (0.5, 0.5, 0.5)

VIT_B16 = dict(
    hidden_size=768,
    num_hidden_layers=12,
    num_attention_heads=12,
    intermediate_size=3072,
    patch_size=16,
    image_size=224,
)


class UnknownBackboneError(ValueError):
    pass


class GeometryError(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class BackboneSpec:
    name: str
    family: str  # "vit" or "dinov3"
    hub_id: str | None = None
    mean: tuple = HALF
    std: tuple = HALF
    config: dict = field(default_factory=dict)
    expect_vit_b16: bool = True


_TOY = dict(hidden_size=32, num_attention_heads=2, intermediate_size=64, image_size=32, patch_size=8)

BACKBONES: dict[str, BackboneSpec] = {
    "vit-base-224": BackboneSpec("vit-base-224", "vit", "google/vit-base-patch16-224", HALF, HALF, VIT_B16),
    "vit-base-224-in21k": BackboneSpec(
        "vit-base-224-in21k", "vit", "google/vit-base-patch16-224-in21k", HALF, HALF, VIT_B16
    ),
    "dino-vitb16": BackboneSpec(
        "dino-vitb16", "vit", "facebook/dino-vitb16", IMAGENET_MEAN, IMAGENET_STD, VIT_B16
    ),
    "dinov3-vitb16": BackboneSpec(
        "dinov3-vitb16", "dinov3", "facebook/dinov3-vitb16-pretrain-lvd1689m", IMAGENET_MEAN, IMAGENET_STD, VIT_B16
    ),
    # small randomly initialised transformers for tests and desk-scale smoke runs
    "toy-vit-2": BackboneSpec("toy-vit-2", "vit", None, config=dict(_TOY, num_hidden_layers=2), expect_vit_b16=False),
    "toy-vit-12": BackboneSpec(
        "toy-vit-12", "vit", None, config=dict(_TOY, num_hidden_layers=12), expect_vit_b16=False
    ),
}


def register_backbone(spec: BackboneSpec) -> None:
    if spec.family not in ("vit", "dinov3"):
        raise ValueError(f"unsupported backbone family {spec.family!r}")
    BACKBONES[spec.name] = spec


def resolve_backbone(backbone_id: str) -> BackboneSpec:
    try:
        return BACKBONES[backbone_id]
    except KeyError:
        raise UnknownBackboneError(
            f"unknown backbone {backbone_id!r}; valid keys: {', '.join(sorted(BACKBONES))}"
        ) from None


def _config_class(family: str):
    if family == "vit":
        from transformers import ViTConfig

        return ViTConfig
    from transformers import DINOv3ViTConfig

    return DINOv3ViTConfig


def _model_from_config(family: str, config) -> nn.Module:
    if family == "vit":
        from transformers import ViTModel

        return ViTModel(config, add_pooling_layer=False)
    from transformers import DINOv3ViTModel

    return DINOv3ViTModel(config)


def _model_from_hub(spec: BackboneSpec, cache_dir) -> nn.Module:
    if spec.family == "vit":
        from transformers import ViTModel

        return ViTModel.from_pretrained(spec.hub_id, cache_dir=cache_dir, add_pooling_layer=False)
    from transformers import DINOv3ViTModel

    return DINOv3ViTModel.from_pretrained(spec.hub_id, cache_dir=cache_dir)


@dataclass(frozen=True)
class FreezePlan:
    """Which parameter groups stay fixed during fine-tuning.

    ``freeze_patch_embedding`` covers the patch projection and the learned
    special tokens (CLS, mask, registers). The final encoder-output norm follows
    the last encoder block: it trains exactly when that block trains.
    """

    freeze_patch_embedding: bool = False
    freeze_positional_embedding: bool = False
    frozen_encoder_layers: frozenset = frozenset()
    train_classifier_head: bool = True

    def __post_init__(self):
        object.__setattr__(self, "frozen_encoder_layers", frozenset(int(i) for i in self.frozen_encoder_layers))

    @classmethod
    def top4(cls) -> "FreezePlan":
        """Freeze embeddings and blocks 0-7; blocks 8-11, final norm and head train."""
        return cls(True, True, frozenset(range(8)), True)

    @classmethod
    def none(cls) -> "FreezePlan":
        return cls()

    def trainable_encoder_layers(self, depth: int) -> list:
        return [i for i in range(depth) if i not in self.frozen_encoder_layers]

    def validate(self, depth: int) -> None:
        bad = sorted(i for i in self.frozen_encoder_layers if not 0 <= i < depth)
        if bad:
            raise IndexError(f"freeze plan names encoder layers {bad}, model has {depth} (0..{depth - 1})")

    def to_dict(self) -> dict:
        return {
            "freeze_patch_embedding": self.freeze_patch_embedding,
            "freeze_positional_embedding": self.freeze_positional_embedding,
            "frozen_encoder_layers": sorted(self.frozen_encoder_layers),
            "train_classifier_head": self.train_classifier_head,
        }

    @classmethod
    def from_dict(cls, d) -> "FreezePlan":
        return cls(
            bool(d["freeze_patch_embedding"]),
            bool(d["freeze_positional_embedding"]),
            frozenset(d["frozen_encoder_layers"]),
            bool(d["train_classifier_head"]),
        )


class ClassifierModel(nn.Module):
    def __init__(self, backbone: nn.Module, spec: BackboneSpec, seed: int = 2):
        super().__init__()
        self.backbone = backbone
        self.backbone_id = spec.name
        self.spec = spec
        self.seed = seed
        cfg = backbone.config
        self.image_size = int(cfg.image_size)
        self.patch_size = int(cfg.patch_size)
        self.person_class_index = PERSON_CLASS_INDEX
        self.register_buffer("pixel_mean", torch.tensor(spec.mean).view(1, 3, 1, 1))
        self.register_buffer("pixel_std", torch.tensor(spec.std).view(1, 3, 1, 1))
        gen = torch.Generator().manual_seed(seed)
        self.head = nn.Linear(cfg.hidden_size, 2)
        with torch.no_grad():
            bound = 1.0 / cfg.hidden_size**0.5
            self.head.weight.copy_(torch.empty_like(self.head.weight).uniform_(-bound, bound, generator=gen))
            self.head.bias.copy_(torch.empty_like(self.head.bias).uniform_(-bound, bound, generator=gen))
        self.freeze_plan = FreezePlan.none()
        self.metrics: dict = {}

    @property
    def encoder_layers(self) -> nn.ModuleList:
        return self.backbone.get_submodule(self._encoder_prefix())

    @property
    def depth(self) -> int:
        return len(self.encoder_layers)

    def _encoder_prefix(self) -> str:
        n = self.backbone.config.num_hidden_layers
        for name, mod in self.backbone.named_modules():
            if isinstance(mod, nn.ModuleList) and len(mod) == n and name:
                return name
        raise GeometryError(f"cannot locate the encoder block list in {type(self.backbone).__name__}")

    def parameter_groups(self) -> dict:
        """Map group name to its list of (qualified name, parameter).

        Groups: ``patch_embedding``, ``positional_embedding``, ``encoder.<i>``,
        ``final_norm`` and ``head``. Every parameter lands in exactly one group.
        """
        enc = self._encoder_prefix() + "."
        groups: dict[str, list] = {"patch_embedding": [], "positional_embedding": [], "final_norm": [], "head": []}
        for i in range(self.depth):
            groups[f"encoder.{i}"] = []
        for name, p in self.backbone.named_parameters():
            if name.startswith("embeddings."):
                key = "positional_embedding" if "position_embeddings" in name else "patch_embedding"
            elif name.startswith(enc):
                key = f"encoder.{int(name[len(enc):].split('.')[0])}"
            else:
                key = "final_norm"
            groups[key].append(("backbone." + name, p))
        groups["head"] = [("head." + n, p) for n, p in self.head.named_parameters()]
        return groups

    def check_geometry(self, images: torch.Tensor) -> None:
        s = self.image_size
        if images.ndim != 4 or tuple(images.shape[1:]) != (3, s, s):
            raise GeometryError(f"{self.backbone_id} expects (n, 3, {s}, {s}) input, got {tuple(images.shape)}")

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        self.check_geometry(images)
        x = (images - self.pixel_mean.to(images.dtype)) / self.pixel_std.to(images.dtype)
        hidden = self.backbone(pixel_values=x).last_hidden_state
        return self.head(hidden[:, 0])

    def predict_proba(self, images: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self(images), dim=-1)


def load_backbone(backbone_id: str, seed: int = 2, pretrained: bool = True, cache_dir=None) -> ClassifierModel:
    """Build a classifier with a fresh, seeded two-way head on the named backbone.

    With ``pretrained=False`` (and always for the toy ids) the backbone gets the
    registered architecture with seeded random weights and nothing is fetched.
    Otherwise weights come from the hub id, cached under ``cache_dir`` or
    ``$PATCHFORGE_CACHE``; set ``HF_HUB_OFFLINE=1`` to forbid network access.
    """
    spec = resolve_backbone(backbone_id)
    torch.manual_seed(seed)
    if spec.hub_id is None or not pretrained:
        backbone = _model_from_config(spec.family, _config_class(spec.family)(**spec.config))
    else:
        cache_dir = cache_dir or os.environ.get(CACHE_ENV)
        backbone = _model_from_hub(spec, cache_dir)
    if spec.expect_vit_b16:
        _check_vit_b16(spec, backbone.config)
    model = ClassifierModel(backbone, spec, seed)
    return model.eval()


def _check_vit_b16(spec: BackboneSpec, config) -> None:
    for key in ("hidden_size", "patch_size", "image_size"):
        got = getattr(config, key)
        if got != VIT_B16[key]:
            raise GeometryError(f"{spec.name}: {key}={got}, ViT-B/16 expects {VIT_B16[key]}")


def apply_freeze_plan(model: ClassifierModel, plan: FreezePlan) -> ClassifierModel:
    """Set ``requires_grad`` on every parameter according to ``plan`` (absolute, not incremental)."""
    depth = model.depth
    plan.validate(depth)
    frozen = {
        "patch_embedding": plan.freeze_patch_embedding,
        "positional_embedding": plan.freeze_positional_embedding,
        "final_norm": (depth - 1) in plan.frozen_encoder_layers,
        "head": not plan.train_classifier_head,
    }
    for i in range(depth):
        frozen[f"encoder.{i}"] = i in plan.frozen_encoder_layers
    for group, params in model.parameter_groups().items():
        for _, p in params:
            p.requires_grad_(not frozen[group])
    model.freeze_plan = plan
    return model


def trainable_parameter_names(model: nn.Module) -> list:
    return [n for n, p in model.named_parameters() if p.requires_grad]


def forward_person_prob(model: ClassifierModel, images: torch.Tensor) -> torch.Tensor:
    """Person-class probability per image; differentiable w.r.t. ``images``."""
    return model.predict_proba(images)[:, model.person_class_index]


def _state_digest(state: dict) -> str:
    h = hashlib.sha256()
    for name in sorted(state):
        h.update(name.encode())
        h.update(state[name].detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(model: ClassifierModel, path, metrics: dict | None = None) -> Path:
    path = Path(path)
    state = {k: v.detach().cpu().clone() for k, v in model.state_dict().items()}
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "backbone_id": model.backbone_id,
        "family": model.spec.family,
        "mean": list(model.spec.mean),
        "std": list(model.spec.std),
        "backbone_config": model.backbone.config.to_json_string(),
        "freeze_plan": json.dumps(model.freeze_plan.to_dict()),
        "seed": model.seed,
        "metrics": json.dumps(metrics if metrics is not None else model.metrics),
        "digest": _state_digest(state),
        "state_dict": state,
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)
    return path


def load_checkpoint(path) -> ClassifierModel:
    """Rebuild a classifier from a checkpoint file alone; never returns a partially loaded model."""
    path = Path(path)
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as err:
        raise CheckpointError(f"cannot read checkpoint {path}: {err}") from err
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a patchforge checkpoint")
    state = payload["state_dict"]
    if _state_digest(state) != payload["digest"]:
        raise CheckpointError(f"{path}: weight digest mismatch, file is corrupt")

    family = payload["family"]
    config = _config_class(family)(**json.loads(payload["backbone_config"]))
    known = BACKBONES.get(payload["backbone_id"])
    spec = BackboneSpec(
        payload["backbone_id"],
        family,
        known.hub_id if known else None,
        tuple(payload["mean"]),
        tuple(payload["std"]),
        known.config if known else {},
        known.expect_vit_b16 if known else False,
    )
    model = ClassifierModel(_model_from_config(family, config), spec, payload["seed"])
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as err:
        raise CheckpointError(f"{path}: {err}") from err
    apply_freeze_plan(model, FreezePlan.from_dict(json.loads(payload["freeze_plan"])))
    model.metrics = json.loads(payload["metrics"])
    return model.eval()
