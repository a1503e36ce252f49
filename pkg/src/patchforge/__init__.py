"""Universal adversarial patches against person classifiers built on ViT backbones."""

from .crafting import CraftConfig, CraftTrace, PatchState, craft, export_patch, import_patch, init_patch
from .estimators import AdversarialPatch, PersonClassifier
from .evaluation import (
    EvalConfig,
    EvaluationReport,
    TransferMatrix,
    compute_asr,
    evaluate_under_attack,
    render_report,
    transfer_matrix,
)
from .finetune import AugConfig, MetricsReport, TrainConfig, f1_score, train
from .losses import LossBreakdown, LossWeights, classification_loss, similarity_loss, total_loss, tv_loss
from .models import (
    BACKBONES,
    ClassifierModel,
    FreezePlan,
    apply_freeze_plan,
    load_backbone,
    load_checkpoint,
    save_checkpoint,
)
from .transforms import CreaseConfig, EotParams, EotRanges, apply_eot, crease_field, place_patch, warp_by_field

__version__ = "0.1.0"

__all__ = [
    "AdversarialPatch", "AugConfig", "BACKBONES", "ClassifierModel", "CraftConfig", "CraftTrace",
    "CreaseConfig", "EotParams", "EotRanges", "EvalConfig", "EvaluationReport", "FreezePlan",
    "LossBreakdown", "LossWeights", "MetricsReport", "PatchState", "PersonClassifier", "TrainConfig",
    "TransferMatrix", "apply_eot", "apply_freeze_plan", "classification_loss", "compute_asr", "craft",
    "crease_field", "evaluate_under_attack", "export_patch", "f1_score", "import_patch", "init_patch",
    "load_backbone", "load_checkpoint", "place_patch", "render_report", "save_checkpoint",
    "similarity_loss", "total_loss", "train", "transfer_matrix", "tv_loss", "warp_by_field",
]
