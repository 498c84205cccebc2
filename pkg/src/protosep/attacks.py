"""White-box l-infinity attacks, black-box transfer, fast adversarial training.

All attacks maximize a cross-entropy objective by signed gradient steps,
project back into the eps-ball around the original image after every
step, and clip to valid [0, 1] pixels last (the two clips do not
commute, so the order is part of the contract). sign(0) = 0, so dead
gradients never perturb. Attacks read model parameters but never write
them; gradient tracking on parameters is suspended during generation.
"""

import contextlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import InvalidArgumentError, Tensor
from .losses import total_loss
from .util import STREAM_ATTACK, rng_for

ATTACK_KINDS = ("fgsm", "bim", "pgd", "mim")
LOSS_MODES = ("joint", "attention")


@dataclass
class AttackConfig:
    kind: str
    eps: float
    alpha: float = 0.0
    steps: int = 1
    mu: float = 1.0
    target_loss: str = "joint"

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise InvalidArgumentError(
                f"attack kind must be one of {ATTACK_KINDS}, got {self.kind!r}")
        if self.target_loss not in LOSS_MODES:
            raise InvalidArgumentError(
                f"target_loss must be one of {LOSS_MODES}, "
                f"got {self.target_loss!r}")
        if self.eps < 0:
            raise InvalidArgumentError(f"eps must be >= 0, got {self.eps}")
        if self.steps < 1:
            raise InvalidArgumentError(f"steps must be >= 1, got {self.steps}")
        if self.kind == "fgsm" and self.steps != 1:
            raise InvalidArgumentError("fgsm is single-step; set steps=1")
        if self.kind != "fgsm":
            if not 0 <= self.alpha <= self.eps + 1e-12:
                raise InvalidArgumentError(
                    f"step size {self.alpha} must lie in [0, eps={self.eps}]")
            if self.eps > 0 and self.alpha == 0:
                raise InvalidArgumentError(
                    "multi-step attack needs a positive step size")
        if self.mu < 0:
            raise InvalidArgumentError(f"mu must be >= 0, got {self.mu}")


@dataclass
class AdversarialBatch:
    originals: np.ndarray
    perturbed: np.ndarray
    labels: np.ndarray
    pred_before: np.ndarray
    pred_after: np.ndarray

    def __post_init__(self):
        if np.any(self.perturbed < 0) or np.any(self.perturbed > 1):
            raise InvalidArgumentError("perturbed images left [0, 1]")


@contextlib.contextmanager
def _frozen_parameters(model):
    params = model.parameters()
    saved = {n: t.requires_grad for n, t in params.items()}
    for t in params.values():
        t.requires_grad = False
    try:
        yield
    finally:
        for n, t in params.items():
            t.requires_grad = saved[n]


def attack_objective(model, x, y, mode="joint"):
    """Cross entropy the attacker ascends.

    joint sums both heads' cross-entropies; attention uses only the
    attention head. Models without a prototype branch always reduce to
    their single head.
    """
    if mode not in LOSS_MODES:
        raise InvalidArgumentError(f"unknown attack loss mode {mode!r}")
    y = np.asarray(y, dtype=np.int64)
    fw = model.forward(x)
    ce_att = ad.softmax_cross_entropy(fw.attention_logits,
                                      y if y.ndim else int(y))
    if mode == "attention" or fw.prototype_logits is None:
        return ce_att
    ce_proto = ad.softmax_cross_entropy(fw.prototype_logits,
                                        y if y.ndim else int(y))
    return ad.add(ce_att, ce_proto)


def input_gradient(model, x, y, mode):
    """Gradient of the attack objective w.r.t. the input pixels."""
    with _frozen_parameters(model):
        xt = Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)
        loss = attack_objective(model, xt, y, mode)
        ad.backward(loss, leaves=[xt])
    return xt.grad


def fgsm(model, x, y, eps, mode="joint"):
    """Single signed-gradient step of size eps, clipped to [0, 1]."""
    x0 = np.asarray(x, dtype=np.float64)
    g = input_gradient(model, x0, y, mode)
    return np.clip(x0 + eps * np.sign(g), 0.0, 1.0)


def _iterate(model, x0, start, y, eps, alpha, steps, mode, momentum=None):
    x_adv = start
    g_acc = np.zeros_like(x0)
    for _ in range(steps):
        g = input_gradient(model, x_adv, y, mode)
        if momentum is None:
            direction = np.sign(g)
        else:
            # per-sample l1 normalization; an all-zero gradient skips
            # the division (dividing zeros by one changes nothing)
            axes = tuple(range(g.ndim - 3, g.ndim))
            norms = np.abs(g).sum(axis=axes, keepdims=True)
            g_acc = momentum * g_acc + g / np.where(norms > 0, norms, 1.0)
            direction = np.sign(g_acc)
        x_adv = x_adv + alpha * direction
        x_adv = np.clip(x_adv, x0 - eps, x0 + eps)
        x_adv = np.clip(x_adv, 0.0, 1.0)
    return x_adv


def bim(model, x, y, eps, alpha, steps, mode="joint"):
    """Iterated FGSM with per-step projection to the eps-ball."""
    x0 = np.asarray(x, dtype=np.float64)
    return _iterate(model, x0, x0.copy(), y, eps, alpha, steps, mode)


def pgd(model, x, y, eps, alpha, steps, mode="joint", seed=0,
        random_init=True):
    """BIM from a uniformly random start inside the eps-ball."""
    x0 = np.asarray(x, dtype=np.float64)
    if random_init:
        rng = rng_for(seed, STREAM_ATTACK)
        start = np.clip(x0 + rng.uniform(-eps, eps, size=x0.shape), 0.0, 1.0)
    else:
        start = x0.copy()
    return _iterate(model, x0, start, y, eps, alpha, steps, mode)


def mim(model, x, y, eps, alpha, steps, mu, mode="joint"):
    """Momentum-accumulated signed-gradient attack."""
    x0 = np.asarray(x, dtype=np.float64)
    return _iterate(model, x0, x0.copy(), y, eps, alpha, steps, mode,
                    momentum=mu)


def run_attack(model, x, y, cfg, seed=0):
    """Dispatch an AttackConfig to its implementation."""
    mode = cfg.target_loss
    if cfg.kind == "fgsm":
        return fgsm(model, x, y, cfg.eps, mode)
    if cfg.kind == "bim":
        return bim(model, x, y, cfg.eps, cfg.alpha, cfg.steps, mode)
    if cfg.kind == "pgd":
        return pgd(model, x, y, cfg.eps, cfg.alpha, cfg.steps, mode, seed=seed)
    return mim(model, x, y, cfg.eps, cfg.alpha, cfg.steps, cfg.mu, mode)


def adversarial_batch(model, x, y, cfg, seed=0, head="attention"):
    """Attack a batch and record predictions before and after."""
    x0 = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    x_adv = run_attack(model, x0, y, cfg, seed=seed)
    return AdversarialBatch(originals=x0, perturbed=x_adv, labels=y,
                            pred_before=model.predict(x0, head=head),
                            pred_after=model.predict(x_adv, head=head))


def transfer_eval(source_model, target_model, x, y, cfg, seed=0,
                  head="attention"):
    """Accuracy of the target on adversaries generated against the source."""
    y = np.asarray(y, dtype=np.int64)
    x_adv = run_attack(source_model, np.asarray(x, dtype=np.float64), y, cfg,
                       seed=seed)
    pred = target_model.predict(x_adv, head=head)
    return float(np.mean(pred == y))


def fast_adv_train_step(model, x, y, eps, alpha, optimizer, loss_cfg, rng):
    """One training step on single-step adversaries with random start.

    delta starts uniform in the eps-ball, takes one signed-gradient step
    of size alpha on the joint objective, is clipped back to the ball,
    and the optimizer then descends the full training objective at
    x + delta. eps=0 degenerates to a clean step.
    """
    x0 = np.asarray(x, dtype=np.float64)
    if eps > 0:
        delta = rng.uniform(-eps, eps, size=x0.shape)
        g = input_gradient(model, np.clip(x0 + delta, 0.0, 1.0), y, "joint")
        delta = np.clip(delta + alpha * np.sign(g), -eps, eps)
        x_train = np.clip(x0 + delta, 0.0, 1.0)
    else:
        x_train = x0
    optimizer.zero_grad()
    comps, fw = total_loss(model, x_train, y, loss_cfg)
    ad.backward(comps.total, leaves=optimizer.params.values())
    optimizer.step()
    return comps
