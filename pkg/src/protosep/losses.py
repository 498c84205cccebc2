"""Attention-weighted clustering, separation, and cross-sample losses.

Per sample, the clustering term pulls each local feature toward the
nearest prototype of its own class and the separation term pushes it
away from the nearest prototype of any other class, both weighted by
the attention at that location. The batch term reuses every other
sample's attention map as weights on a sample's own distances, so
features that light up anywhere in the batch get pulled, and the rest
drift toward shared low-attention prototypes. The training objective
adds both heads' cross-entropies to the weighted batch term, feeding
it each attention map normalized to unit spatial sum so the term
ranks locations against each other instead of rewarding smaller or
larger maps outright.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import InvalidArgumentError, Tensor


@dataclass
class LossConfig:
    """lambda1 weights clustering, lambda2 separation, over batch_size samples.

    Zero weights are allowed and switch the regularization term off
    (the plain-prototype baseline trains that way).
    """
    lambda1: float = 10.0
    lambda2: float = 0.08
    batch_size: int = 75

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise InvalidArgumentError(
                f"loss weights must be >= 0, got {self.lambda1}, {self.lambda2}")
        if self.batch_size < 1:
            raise InvalidArgumentError(
                f"batch_size must be >= 1, got {self.batch_size}")


@dataclass
class BatchContext:
    """Stacked reduced features (B,H,W,D), attention (B,H,W), labels (B,)."""
    z: Tensor
    attention: Tensor
    labels: np.ndarray
    bank: object  # PrototypeBank

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.z.data.ndim != 4 or self.z.shape[0] == 0:
            raise InvalidArgumentError(
                f"batch features must be (B, H, W, D) with B >= 1, "
                f"got {self.z.shape}")
        if self.attention.shape != self.z.shape[:3]:
            raise InvalidArgumentError(
                f"attention shape {self.attention.shape} does not match "
                f"features {self.z.shape[:3]}")
        if len(self.labels) != self.z.shape[0]:
            raise InvalidArgumentError("one label per sample required")
        if np.any(self.labels < 0) or np.any(self.labels >= self.bank.K):
            raise InvalidArgumentError(
                f"labels must lie in [0, {self.bank.K})")

    @classmethod
    def from_samples(cls, zs, attentions, labels, bank):
        shapes = {tuple(z.shape) for z in zs}
        if len(shapes) != 1:
            raise InvalidArgumentError(
                f"samples have mismatched spatial shapes: {sorted(shapes)}")
        z = Tensor(np.stack([np.asarray(z.data if isinstance(z, Tensor) else z)
                             for z in zs]))
        a = Tensor(np.stack([np.asarray(a.data if isinstance(a, Tensor) else a)
                             for a in attentions]))
        return cls(z=z, attention=a, labels=labels, bank=bank)

    @property
    def size(self):
        return self.z.shape[0]


def _check_label(bank, y):
    y = int(y)
    if not 0 <= y < bank.K:
        raise InvalidArgumentError(f"label {y} outside [0, {bank.K})")
    return y


def attentional_cluster_loss(z, a, bank, y):
    """sum_t A[t] * min over own-class prototypes of ||z_t - p||^2; >= 0."""
    y = _check_label(bank, y)
    dists = ad.sq_l2_distance_maps(z, bank.P)
    own = np.flatnonzero(bank.class_of == y)
    dmin = ad.reduce_min(ad.take(dists, own, axis=-1), axes=(-1,))
    return ad.reduce_sum(ad.mul(a, dmin))


def attentional_separation_loss(z, a, bank, y):
    """-sum_t A[t] * min over other-class prototypes of ||z_t - p||^2; <= 0."""
    y = _check_label(bank, y)
    other = np.flatnonzero(bank.class_of != y)
    if other.size == 0:
        raise InvalidArgumentError(
            f"no prototypes outside class {y} to separate from")
    dists = ad.sq_l2_distance_maps(z, bank.P)
    dmin = ad.reduce_min(ad.take(dists, other, axis=-1), axes=(-1,))
    return ad.scale(ad.reduce_sum(ad.mul(a, dmin)), -1.0)


def batch_regularization_loss(batch, cfg):
    """Cross-sample regularization over a batch.

    For sample i, every sample j's attention at location t weights
    sample i's own-class pull minus other-class push at t:

        L(i) = sum_j sum_t a_j[t] * (l1 * dmin_own_i[t] - l2 * dmin_other_i[t])

    Returns (mean over samples, per-sample tensor of shape (B,)).
    """
    b = batch.size
    if cfg.lambda1 == 0.0 and cfg.lambda2 == 0.0:
        zero = Tensor(np.zeros(b))
        return ad.reduce_mean(zero), zero

    dists = ad.sq_l2_distance_maps(batch.z, batch.bank.P)  # (B, H, W, m)
    own_mask = (batch.bank.class_of[None, :]
                == batch.labels[:, None]).astype(np.float64)  # (B, m)
    # push masked-out prototypes above every real distance so the
    # min lands inside the subset; the offset is constant, so the
    # gradient still flows to the selected entry
    big = float(dists.data.max()) + 1.0
    off = big * (1.0 - own_mask)[:, None, None, :]
    dmin_own = ad.reduce_min(ad.add(dists, Tensor(off)), axes=(-1,))
    off_other = big * own_mask[:, None, None, :]
    dmin_other = ad.reduce_min(ad.add(dists, Tensor(off_other)), axes=(-1,))

    weights = ad.reduce_sum(batch.attention, axes=(0,))  # (H, W), sum over j
    pull = ad.reduce_sum(ad.mul(weights, dmin_own), axes=(-2, -1))    # (B,)
    push = ad.reduce_sum(ad.mul(weights, dmin_other), axes=(-2, -1))  # (B,)
    per_sample = ad.sub(ad.scale(pull, cfg.lambda1),
                        ad.scale(push, cfg.lambda2))
    return ad.reduce_mean(per_sample), per_sample


@dataclass
class LossComponents:
    """Training objective pieces; total = ce_attention + ce_prototype + reg."""
    total: Tensor
    ce_attention: Tensor
    ce_prototype: Tensor
    regularization: Tensor
    per_sample_reg: Tensor

    def as_floats(self):
        return {"total": self.total.item(),
                "ce_attention": self.ce_attention.item(),
                "ce_prototype": self.ce_prototype.item(),
                "regularization": self.regularization.item()}


def total_loss(model, images, labels, cfg):
    """Full objective on an image batch: CE of both heads plus the batch term.

    The model must expose forward(images) with attention_logits,
    prototype_logits, z, and attention fields, plus a bank. Models
    without a prototype branch contribute only the attention head's
    cross-entropy.
    """
    labels = np.asarray(labels, dtype=np.int64)
    fw = model.forward(images)
    ce_att = ad.softmax_cross_entropy(fw.attention_logits, labels)
    if fw.prototype_logits is None:
        zero = Tensor(0.0)
        return LossComponents(total=ce_att, ce_attention=ce_att,
                              ce_prototype=zero, regularization=zero,
                              per_sample_reg=Tensor(np.zeros(len(labels)))), fw
    ce_proto = ad.softmax_cross_entropy(fw.prototype_logits, labels)
    # The batch term weights locations by each sample's attention share
    # rather than its absolute magnitude: dividing by the spatial sum
    # gives every batch member unit total weight, so the term
    # redistributes attention across locations and cannot profit from
    # globally shrinking or inflating the map itself.
    mass = ad.reduce_sum(fw.attention, axes=(-2, -1), keepdims=True)
    shares = ad.div(fw.attention, ad.add(mass, Tensor(1e-8)))
    batch = BatchContext(z=fw.z, attention=shares, labels=labels,
                         bank=model.bank)
    reg, per_sample = batch_regularization_loss(batch, cfg)
    total = ad.add(ad.add(ce_att, ce_proto), reg)
    return LossComponents(total=total, ce_attention=ce_att,
                          ce_prototype=ce_proto, regularization=reg,
                          per_sample_reg=per_sample), fw
