"""Three-phase training loop.

Phase layout, with default epoch counts:

    warmup      5 epochs at lr 3e-4; backbone and classifier frozen,
                only the attention branch, the reduction kernels, and
                the prototypes move.
    joint       25 epochs at lr 3e-3, decayed by 0.1 every 10 joint
                epochs; everything except the classifier trains.
    projection  once, after the joint phase: every prototype snaps to
                the nearest same-class training patch.
    classifier  15 epochs training only the classifier weights.

Epochs are numbered globally starting at 1 so a checkpoint taken at
any epoch boundary resumes into the right phase with the right
learning rate. Shuffling is stateless: epoch e always uses the
permutation drawn from rng_for(seed, STREAM_TRAIN, e).
"""

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .attacks import fast_adv_train_step
from .autodiff import InvalidArgumentError
from .losses import LossConfig, total_loss
from .model import SeparationNet, set_requires_grad
from .optim import Adam
from .prototypes import project_prototypes
from .util import STREAM_ATTACK, STREAM_TRAIN, rng_for

WARMUP, JOINT, CLASSIFIER = "warmup", "joint", "classifier"


@dataclass(frozen=True)
class TrainSchedule:
    warmup_epochs: int = 5
    warmup_lr: float = 3e-4
    joint_epochs: int = 25
    joint_lr: float = 3e-3
    joint_decay: float = 0.1
    joint_decay_every: int = 10
    classifier_epochs: int = 15
    classifier_lr: float = 3e-4
    batch_size: int = 75

    def validate(self):
        for name in ("warmup_epochs", "joint_epochs", "classifier_epochs"):
            if getattr(self, name) < 0:
                raise InvalidArgumentError(f"{name} must be >= 0")
        for name in ("warmup_lr", "joint_lr", "classifier_lr"):
            if getattr(self, name) <= 0:
                raise InvalidArgumentError(f"{name} must be positive")
        if not 0 < self.joint_decay <= 1:
            raise InvalidArgumentError("joint_decay must be in (0, 1]")
        if self.joint_decay_every < 1:
            raise InvalidArgumentError("joint_decay_every must be >= 1")
        if self.batch_size < 1:
            raise InvalidArgumentError("batch_size must be >= 1")
        return self

    @property
    def projection_epoch(self):
        """Global epoch after which prototypes are projected."""
        return self.warmup_epochs + self.joint_epochs

    @property
    def total_epochs(self):
        return (self.warmup_epochs + self.joint_epochs
                + self.classifier_epochs)

    def phase_of(self, epoch):
        """Map a global 1-based epoch to (phase, lr)."""
        if not 1 <= epoch <= self.total_epochs:
            raise InvalidArgumentError(
                f"epoch {epoch} outside schedule of {self.total_epochs}")
        if epoch <= self.warmup_epochs:
            return WARMUP, self.warmup_lr
        if epoch <= self.warmup_epochs + self.joint_epochs:
            within = epoch - self.warmup_epochs - 1
            steps = within // self.joint_decay_every
            return JOINT, self.joint_lr * self.joint_decay ** steps
        return CLASSIFIER, self.classifier_lr


@dataclass(frozen=True)
class FastAdvConfig:
    """Single-step adversarial training: uniform start, one signed step."""
    eps: float = 8.0 / 255.0
    alpha: float = 1.25 * 8.0 / 255.0

    def validate(self):
        if self.eps < 0:
            raise InvalidArgumentError("eps must be >= 0")
        if self.eps > 0 and self.alpha <= 0:
            raise InvalidArgumentError("alpha must be positive when eps > 0")
        return self


class TrainingDiverged(RuntimeError):
    """Raised when a loss goes non-finite; carries the last finite values."""

    def __init__(self, epoch, batch, last_finite):
        self.epoch = epoch
        self.batch = batch
        self.last_finite = last_finite
        detail = ", ".join(f"{k}={v:.6g}" for k, v in last_finite.items())
        super().__init__(
            f"non-finite loss at epoch {epoch}, batch {batch}; "
            f"last finite values: {detail or 'none recorded'}")


@dataclass
class EpochStats:
    epoch: int
    phase: str
    lr: float
    loss: float
    ce_attention: float
    ce_prototype: float
    regularization: float
    n_batches: int

    def as_row(self):
        return {
            "epoch": self.epoch, "phase": self.phase, "lr": self.lr,
            "loss": self.loss, "ce_attention": self.ce_attention,
            "ce_prototype": self.ce_prototype,
            "regularization": self.regularization,
        }


def trainable_names(model, phase):
    """Parameter names that move during a phase."""
    names = set(model.parameters())
    if not isinstance(model, SeparationNet):
        return names
    classifier = {n for n in names if n.startswith("classifier.")}
    backbone = {n for n in names if n.startswith("backbone.")}
    if phase == WARMUP:
        return names - classifier - backbone
    if phase == JOINT:
        return names - classifier
    if phase == CLASSIFIER:
        if not classifier:
            raise InvalidArgumentError(
                "model has no classifier weights to train")
        return classifier
    raise InvalidArgumentError(f"unknown phase {phase!r}")


def _apply_phase(model, phase, lr):
    """Freeze, unfreeze, and build the optimizer for one phase."""
    wanted = trainable_names(model, phase)
    params = model.parameters()
    set_requires_grad({n: p for n, p in params.items() if n in wanted}, True)
    set_requires_grad({n: p for n, p in params.items() if n not in wanted},
                      False)
    return Adam({n: params[n] for n in sorted(wanted)}, lr=lr)


def _batches(n, batch_size, seed, epoch):
    perm = rng_for(seed, STREAM_TRAIN, epoch).permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


def _sync_precision(model, optimizer):
    """Clamp live state to checkpoint storage precision at the epoch edge.

    Checkpoints hold f32 payloads. Keeping parameters and optimizer
    moments exactly f32-representable between epochs means a save loses
    nothing the next epoch would have used, so a resumed run is
    bit-identical to an uninterrupted one.
    """
    for p in model.parameters().values():
        p.data[...] = p.data.astype(np.float32)
    for buf in list(optimizer.m.values()) + list(optimizer.v.values()):
        buf[...] = buf.astype(np.float32)


def _clean_step(model, images, labels, optimizer, loss_cfg):
    optimizer.zero_grad()
    comps, _ = total_loss(model, images, labels, loss_cfg)
    ad.backward(comps.total, leaves=list(optimizer.params.values()))
    optimizer.step()
    return comps


def collect_train_patches(model, dataset, batch_size=64):
    """Every spatial feature vector of the training set, with provenance.

    Returns (patches (N*h*w, D), classes, image_ids, locations (.., 2)).
    """
    patches, classes, ids, locs = [], [], [], []
    n = len(dataset)
    for start in range(0, n, batch_size):
        stop = min(start + batch_size, n)
        fw = model.forward(dataset.images[start:stop])
        z = fw.z.data
        b, h, w, d = z.shape
        patches.append(z.reshape(b * h * w, d))
        classes.append(np.repeat(dataset.labels[start:stop], h * w))
        ids.append(np.repeat(dataset.ids[start:stop], h * w))
        rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        cell = np.stack([rows.ravel(), cols.ravel()], axis=1)
        locs.append(np.tile(cell, (b, 1)))
    return (np.concatenate(patches), np.concatenate(classes),
            np.concatenate(ids), np.concatenate(locs))


def run_projection(model, dataset):
    """Snap prototypes to their nearest same-class training patches."""
    patches, classes, ids, locs = collect_train_patches(model, dataset)
    with ad.no_grad():
        bank = project_prototypes(model.bank, patches, classes, ids, locs)
    model.replace_bank(bank)
    return bank


class _ScoreCache:
    """Frozen-feature shortcut for the classifier-only phase.

    With everything but the classifier frozen and no adversarial
    perturbation, prototype scores are constants per image, so they are
    computed once and the phase reduces to a linear model fit. Gradient
    values are identical to full forwards.
    """

    def __init__(self, model, dataset, batch_size=64):
        self.model = model
        scores = []
        with ad.no_grad():
            for start in range(0, len(dataset), batch_size):
                fw = model.forward(dataset.images[start:start + batch_size])
                scores.append(fw.similarity.scores.data)
        self.scores = np.concatenate(scores)

    def step(self, index, labels, optimizer):
        optimizer.zero_grad()
        scores = ad.Tensor(self.scores[index])
        logits = ad.linear(scores, self.model.classifier.W)
        loss = ad.softmax_cross_entropy(logits, labels)
        ad.backward(loss, leaves=list(optimizer.params.values()))
        optimizer.step()
        return loss


def train_model(model, dataset, schedule=None, loss_cfg=None, seed=0,
                fast_adv=None, start_epoch=0, optimizer_state=None,
                on_epoch=None):
    """Run the schedule from start_epoch+1 through the end.

    dataset needs .images, .labels, .ids and len(). Pass start_epoch
    and optimizer_state from a checkpoint to resume; state is synced to
    storage precision at every epoch edge, so the resumed run replays
    the uninterrupted one bit for bit. Returns a list of EpochStats.
    on_epoch, if given, is called with (model, stats, optimizer) after
    every epoch.
    """
    schedule = (schedule or TrainSchedule()).validate()
    loss_cfg = loss_cfg or LossConfig(batch_size=schedule.batch_size)
    if fast_adv is not None:
        fast_adv.validate()
        if fast_adv.eps == 0:
            fast_adv = None
    has_prototypes = (isinstance(model, SeparationNet)
                      and model.bank is not None)
    if not has_prototypes and schedule.classifier_epochs > 0:
        schedule = dataclasses.replace(schedule, classifier_epochs=0)
    n = len(dataset)
    if n == 0:
        raise InvalidArgumentError("training set is empty")

    history = []
    last_finite = {}
    optimizer = None
    cache = None
    current_phase = None
    # A checkpoint taken at or past the projection epoch already carries
    # the projected bank.
    projected = has_prototypes and start_epoch >= schedule.projection_epoch

    for epoch in range(start_epoch + 1, schedule.total_epochs + 1):
        phase, lr = schedule.phase_of(epoch)
        if phase != current_phase:
            optimizer = _apply_phase(model, phase, lr)
            if optimizer_state is not None:
                # Moments carry over only when the checkpoint epoch sits
                # inside this same phase; at a phase boundary a fresh run
                # would build a fresh optimizer too.
                if (start_epoch >= 1
                        and schedule.phase_of(start_epoch)[0] == phase):
                    optimizer.load_state(optimizer_state)
                optimizer_state = None
            current_phase = phase
            cache = None
        else:
            optimizer.lr = lr

        if phase == CLASSIFIER and cache is None and fast_adv is None:
            cache = _ScoreCache(model, dataset)

        # Warmup trains the added branches on the classification losses
        # alone; the separation regularizer starts with the joint phase,
        # once clustering has given the distance ratios structure.
        phase_loss_cfg = loss_cfg
        if phase == WARMUP and (loss_cfg.lambda1 or loss_cfg.lambda2):
            phase_loss_cfg = dataclasses.replace(loss_cfg, lambda1=0.0,
                                                 lambda2=0.0)

        sums = np.zeros(4)
        n_batches = 0
        for batch_no, index in enumerate(
                _batches(n, schedule.batch_size, seed, epoch)):
            images = dataset.images[index]
            labels = dataset.labels[index]
            if cache is not None:
                loss = cache.step(index, labels, optimizer)
                # In this phase only the prototype head's CE moves; the
                # other components are frozen constants and logged as 0.
                parts = np.array([loss.item(), 0.0, loss.item(), 0.0])
            else:
                if fast_adv is not None:
                    rng = rng_for(seed, STREAM_ATTACK, epoch, batch_no)
                    comps = fast_adv_train_step(
                        model, images, labels, fast_adv.eps, fast_adv.alpha,
                        optimizer, phase_loss_cfg, rng)
                else:
                    comps = _clean_step(model, images, labels, optimizer,
                                        phase_loss_cfg)
                values = comps.as_floats()
                parts = np.array([
                    values["total"], values["ce_attention"],
                    values["ce_prototype"], values["regularization"]])
            if not all(math.isfinite(v) for v in parts):
                raise TrainingDiverged(epoch, batch_no, last_finite)
            last_finite = {"loss": float(parts[0]),
                           "ce_attention": float(parts[1]),
                           "ce_prototype": float(parts[2]),
                           "regularization": float(parts[3])}
            sums += parts
            n_batches += 1

        stats = EpochStats(
            epoch=epoch, phase=phase, lr=lr,
            loss=float(sums[0] / n_batches),
            ce_attention=float(sums[1] / n_batches),
            ce_prototype=float(sums[2] / n_batches),
            regularization=float(sums[3] / n_batches), n_batches=n_batches)
        history.append(stats)

        if (epoch == schedule.projection_epoch and has_prototypes
                and not projected):
            run_projection(model, dataset)
            projected = True
            cache = None
        _sync_precision(model, optimizer)
        if on_epoch is not None:
            on_epoch(model, stats, optimizer)
    return history
