"""Scikit-learn style estimator over the full pipeline."""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from .autodiff import InvalidArgumentError
from .backbone import BackboneConfig
from .config import parse_stages
from .data import Dataset
from .losses import LossConfig
from .model import ModelConfig, SeparationNet
from .training import FastAdvConfig, TrainSchedule, train_model


class PrototypeSeparationClassifier(BaseEstimator, ClassifierMixin):
    """Fine-grained image classifier with attention-separated prototypes.

    X is a float array of shape (n_samples, size, size, channels) with
    values in [0, 1]; y holds integer class labels. fit() runs the
    staged schedule (warmup, joint, prototype projection, classifier
    refit); predict() reads the head selected by `head`, either the
    prototype classifier or the attention branch. Setting
    fast_adv_eps > 0 trains on single-step adversarial examples at
    that budget.
    """

    def __init__(self, variant="full", prototypes_per_class=5,
                 prototype_dim=32, gamma=1e-5, stages="16:2,32:2,64:2",
                 warmup_epochs=5, warmup_lr=3e-4, joint_epochs=25,
                 joint_lr=3e-3, classifier_epochs=15, batch_size=75,
                 lambda1=10.0, lambda2=0.08, fast_adv_eps=0.0,
                 head="prototype", seed=0):
        self.variant = variant
        self.prototypes_per_class = prototypes_per_class
        self.prototype_dim = prototype_dim
        self.gamma = gamma
        self.stages = stages
        self.warmup_epochs = warmup_epochs
        self.warmup_lr = warmup_lr
        self.joint_epochs = joint_epochs
        self.joint_lr = joint_lr
        self.classifier_epochs = classifier_epochs
        self.batch_size = batch_size
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.fast_adv_eps = fast_adv_eps
        self.head = head
        self.seed = seed

    def _check_images(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 4 or X.shape[1] != X.shape[2]:
            raise InvalidArgumentError(
                f"X must be (n, size, size, channels), got {X.shape}")
        return X

    def _active_head(self):
        if self.variant == "attention":
            return "attention"
        return self.head

    def fit(self, X, y):
        X = self._check_images(X)
        y = np.asarray(y)
        if len(X) != len(y):
            raise InvalidArgumentError(
                f"{len(X)} images but {len(y)} labels")
        self.classes_ = np.unique(y)
        if len(self.classes_) < 2:
            raise InvalidArgumentError("need at least 2 classes to fit")
        indexed = np.searchsorted(self.classes_, y)

        backbone = BackboneConfig(input_size=X.shape[1],
                                  in_channels=X.shape[3],
                                  stages=parse_stages(self.stages))
        config = ModelConfig(n_classes=len(self.classes_),
                             variant=self.variant,
                             prototypes_per_class=self.prototypes_per_class,
                             prototype_dim=self.prototype_dim,
                             gamma=self.gamma, backbone=backbone)
        model = SeparationNet(config, seed=self.seed)
        schedule = TrainSchedule(
            warmup_epochs=self.warmup_epochs, warmup_lr=self.warmup_lr,
            joint_epochs=self.joint_epochs, joint_lr=self.joint_lr,
            classifier_epochs=self.classifier_epochs,
            batch_size=self.batch_size)
        zero_reg = self.variant == "baseline"
        loss_cfg = LossConfig(
            lambda1=0.0 if zero_reg else self.lambda1,
            lambda2=0.0 if zero_reg else self.lambda2,
            batch_size=self.batch_size)
        fast_adv = None
        if self.fast_adv_eps > 0:
            fast_adv = FastAdvConfig(eps=self.fast_adv_eps,
                                     alpha=1.25 * self.fast_adv_eps)
        data = Dataset(images=X, labels=indexed,
                       ids=np.arange(len(y)),
                       paths=[f"sample_{i}" for i in range(len(y))],
                       split=np.array(["train"] * len(y)))
        self.history_ = train_model(model, data, schedule, loss_cfg,
                                    seed=self.seed, fast_adv=fast_adv)
        self.model_ = model
        return self

    def _logits(self, X, chunk=64):
        check_is_fitted(self, "model_")
        X = self._check_images(X)
        head = self._active_head()
        outs = []
        with ad.no_grad():
            for start in range(0, len(X), chunk):
                fw = self.model_.forward(X[start:start + chunk])
                logits = (fw.prototype_logits if head == "prototype"
                          else fw.attention_logits)
                outs.append(logits.data)
        return np.concatenate(outs)

    def predict(self, X):
        logits = self._logits(X)
        return self.classes_[np.argmax(logits, axis=-1)]

    def predict_proba(self, X):
        logits = self._logits(X)
        shifted = logits - logits.max(axis=-1, keepdims=True)
        expd = np.exp(shifted)
        return expd / expd.sum(axis=-1, keepdims=True)
