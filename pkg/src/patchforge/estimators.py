"""scikit-learn compatible front ends.

`PersonClassifier` fine-tunes a backbone (``fit``) and exposes
``predict_proba``/``predict``/``score``. `AdversarialPatch` crafts a patch
against a fitted classifier (``fit`` on person images) and pastes it into new
images (``transform``). Images are arrays of shape (n, 3, H, W) in [0, 1];
labels are 1 for person and 0 for non-person.
"""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_images, check_labels
from .crafting import CraftConfig, craft, init_patch
from .evaluation import EvalConfig, compute_asr, evaluate_under_attack, patch_images
from .finetune import AugConfig, TrainConfig, evaluate_metrics, predict_person_proba, train
from .losses import LossWeights
from .models import ClassifierModel, FreezePlan, apply_freeze_plan, load_backbone
from .transforms import CreaseConfig, EotRanges


def _resolve_plan(plan) -> FreezePlan:
    if isinstance(plan, FreezePlan):
        return plan
    if plan == "top4":
        return FreezePlan.top4()
    if plan in (None, "none"):
        return FreezePlan.none()
    raise ValueError(f"freeze_plan must be a FreezePlan, 'top4' or 'none', got {plan!r}")


class PersonClassifier(ClassifierMixin, BaseEstimator):
    def __init__(self, backbone="vit-base-224", pretrained=True, freeze_plan="top4", batch_size=128,
                 learning_rate=1e-4, epochs=5, hflip_prob=0.5, brightness=0.1, contrast=0.1, seed=2):
        self.backbone = backbone
        self.pretrained = pretrained
        self.freeze_plan = freeze_plan
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.hflip_prob = hflip_prob
        self.brightness = brightness
        self.contrast = contrast
        self.seed = seed

    @classmethod
    def from_model(cls, model: ClassifierModel) -> "PersonClassifier":
        """Wrap an already trained model (e.g. from `load_checkpoint`) without refitting."""
        est = cls(backbone=model.backbone_id, freeze_plan=model.freeze_plan, seed=model.seed)
        est.model_ = model.eval()
        est.classes_ = np.array([0, 1])
        est.history_ = []
        return est

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            epochs=self.epochs,
            seed=self.seed,
            augmentation=AugConfig(self.hflip_prob, self.brightness, self.contrast),
        )

    def fit(self, X, y, eval_set=None, log_path=None):
        X = check_images(X)
        y = check_labels(y, len(X))
        model = load_backbone(self.backbone, seed=self.seed, pretrained=self.pretrained)
        apply_freeze_plan(model, _resolve_plan(self.freeze_plan))
        X_val, y_val = eval_set if eval_set is not None else (None, None)
        self.model_, self.history_ = train(model, X, y, self.train_config(), X_val, y_val, log_path)
        self.classes_ = np.array([0, 1])
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        p = predict_person_proba(self.model_, check_images(X))
        return np.stack([1.0 - p, p], axis=1)

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(np.int64)

    def metrics(self, X, y):
        check_is_fitted(self, "model_")
        return evaluate_metrics(self.model_, X, y)


class AdversarialPatch(TransformerMixin, BaseEstimator):
    """Universal patch that pushes a fitted `PersonClassifier` towards "non-person".

    ``fit`` optimises the patch on person images (rows with ``y == 0`` are
    dropped when ``y`` is given). ``transform`` pastes the fitted patch at a
    random position and a size drawn from ``eval_size_range``.
    """

    def __init__(self, estimator=None, steps=1000, learning_rate=1e-3, batch_size=32, patch_size=128,
                 max_area=0.6, beta=4.0, gamma=0.5, eot=None, crease=None, reference=None,
                 loss_sign="mean", eval_size_range=(0.30, 0.60), seed=2):
        self.estimator = estimator
        self.steps = steps
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.patch_size = patch_size
        self.max_area = max_area
        self.beta = beta
        self.gamma = gamma
        self.eot = eot
        self.crease = crease
        self.reference = reference
        self.loss_sign = loss_sign
        self.eval_size_range = eval_size_range
        self.seed = seed

    def _model(self) -> ClassifierModel:
        est = self.estimator
        if isinstance(est, ClassifierModel):
            return est
        if est is None:
            raise ValueError("AdversarialPatch needs a fitted PersonClassifier or ClassifierModel as estimator")
        check_is_fitted(est, "model_")
        return est.model_

    def craft_config(self) -> CraftConfig:
        return CraftConfig(
            steps=self.steps,
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            patch_size=self.patch_size,
            max_area=self.max_area,
            seed=self.seed,
            weights=LossWeights(self.beta, self.gamma),
            eot=self.eot or EotRanges(),
            crease=self.crease or CreaseConfig(),
            loss_sign=self.loss_sign,
        )

    def eval_config(self) -> EvalConfig:
        return EvalConfig(size_range=tuple(self.eval_size_range), seed=self.seed)

    def fit(self, X, y=None):
        X = check_images(X)
        labels = None if y is None else check_labels(y, len(X))
        config = self.craft_config()
        state = init_patch(self.reference, config.patch_size, config.seed)
        self.state_, self.trace_ = craft(self._model(), X, config, labels=labels, state=state)
        self.patch_ = self.state_.pixels.detach().clone()
        return self

    def transform(self, X):
        check_is_fitted(self, "patch_")
        X = check_images(X)
        patched, _ = patch_images(X, self.patch_.to(X.dtype), self.eval_config())
        return patched.numpy()

    def attack_success_rate(self, X, y) -> float:
        """ASR on the person rows of (X, y) under this patch."""
        check_is_fitted(self, "patch_")
        X = check_images(X)
        y = check_labels(y, len(X))
        with torch.no_grad():
            patched, _ = patch_images(X, self.patch_.to(X.dtype), self.eval_config())
            pred = (predict_person_proba(self._model(), patched) >= 0.5).astype(np.int64)
        return compute_asr(y, pred)

    def evaluate(self, X, y, draws: int = 1):
        check_is_fitted(self, "patch_")
        cfg = EvalConfig(size_range=tuple(self.eval_size_range), seed=self.seed, draws=draws)
        return evaluate_under_attack(self._model(), self.patch_, X, y, cfg, steps=self.steps)
