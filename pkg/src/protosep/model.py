"""Network wiring: backbone, attention branch, prototype branch, variants.

Three variants share one backbone:

  full       attention modulates the prototype branch and weights the
             clustering/separation losses
  baseline   prototype branch runs under uniform attention and the
             regularization weights are zero (plain-prototype wiring);
             the attention head still trains its own cross-entropy
  attention  attention head only, no prototype branch

`GlobalPoolNet` is a deliberately different architecture (backbone,
global average pooling, dense head) used as a black-box substitute.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .attention import AttentionParams, attention_forward, normalize_attention
from .autodiff import InvalidArgumentError, Tensor
from .backbone import Backbone, BackboneConfig
from .prototypes import (ClassifierWeights, PrototypeBank, ReductionParams,
                         prototype_forward, reduce_features)
from .util import STREAM_MODEL, glorot_uniform, rng_for

VARIANTS = ("full", "baseline", "attention")


@dataclass
class ModelConfig:
    n_classes: int = 8
    variant: str = "full"
    prototypes_per_class: int = 5
    prototype_dim: int = 32
    gamma: float = 1e-5
    backbone: BackboneConfig = field(default_factory=BackboneConfig)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise InvalidArgumentError(
                f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.n_classes < 2:
            raise InvalidArgumentError(
                f"need at least 2 classes, got {self.n_classes}")
        if self.prototypes_per_class < 1:
            raise InvalidArgumentError("prototypes_per_class must be >= 1")
        if self.prototype_dim > self.backbone.feature_channels:
            raise InvalidArgumentError(
                f"prototype_dim {self.prototype_dim} exceeds backbone "
                f"channels {self.backbone.feature_channels}")
        self.backbone.validate()


@dataclass
class ForwardResult:
    """Everything one pass produces; prototype fields are None for the
    attention-only variant."""
    features: Tensor           # (..., h, w, D')
    attention_logits: Tensor   # (..., K)
    attention_raw: Tensor      # rectified, un-normalized map (..., h, w)
    attention: Tensor          # weights the prototype branch saw (..., h, w)
    z: Tensor = None           # (..., h, w, D)
    similarity: object = None  # SimilarityResult
    prototype_logits: Tensor = None


class SeparationNet:
    """Prototype classifier with attentional feature separation."""

    def __init__(self, config, seed=0):
        self.config = config
        rng = rng_for(seed, STREAM_MODEL)
        self.backbone = Backbone(config.backbone, rng)
        d_feat = config.backbone.feature_channels
        self.attention = AttentionParams.init(d_feat, config.n_classes, rng)
        if config.variant == "attention":
            self.reduction = None
            self.bank = None
            self.classifier = None
        else:
            self.reduction = ReductionParams.init(d_feat, config.prototype_dim,
                                                  rng)
            self.bank = PrototypeBank.init(config.n_classes,
                                           config.prototypes_per_class,
                                           config.prototype_dim, rng,
                                           gamma=config.gamma)
            self.classifier = ClassifierWeights.init(self.bank.class_of,
                                                     config.n_classes)

    @property
    def n_classes(self):
        return self.config.n_classes

    def parameters(self):
        params = {}
        params.update(self.backbone.parameters())
        params.update(self.attention.parameters())
        if self.reduction is not None:
            params.update(self.reduction.parameters())
            params.update(self.bank.parameters())
            params.update(self.classifier.parameters())
        return params

    def forward(self, images):
        fm = self.backbone.extract(images)
        att = attention_forward(fm, self.attention)
        if self.config.variant == "attention":
            return ForwardResult(features=fm.values,
                                 attention_logits=att.logits,
                                 attention_raw=att.attention_map,
                                 attention=normalize_attention(att.attention_map))
        if self.config.variant == "baseline":
            weights = Tensor(np.ones(att.attention_map.shape))
        else:
            weights = normalize_attention(att.attention_map)
        z = reduce_features(fm, self.reduction)
        sim = prototype_forward(z, self.bank, weights, self.classifier)
        return ForwardResult(features=fm.values,
                             attention_logits=att.logits,
                             attention_raw=att.attention_map,
                             attention=weights, z=z, similarity=sim,
                             prototype_logits=sim.logits)

    def predict(self, images, head="prototype"):
        """Class labels from one head; the attention variant has only one."""
        if head not in ("prototype", "attention"):
            raise InvalidArgumentError(f"unknown head {head!r}")
        if head == "prototype" and self.config.variant == "attention":
            raise InvalidArgumentError(
                "attention-only variant has no prototype head")
        with ad.no_grad():
            fw = self.forward(images)
        logits = (fw.prototype_logits if head == "prototype"
                  else fw.attention_logits)
        return np.argmax(logits.data, axis=-1)

    def replace_bank(self, bank):
        """Swap in a projected prototype bank and keep the rest."""
        self.bank = bank


class GlobalPoolNet:
    """Conv features, global average pooling, dense head. Substitute model."""

    def __init__(self, backbone_config, n_classes, seed=0):
        self.config = backbone_config
        self.n_classes = n_classes
        rng = rng_for(seed, STREAM_MODEL)
        self.backbone = Backbone(backbone_config, rng)
        d = backbone_config.feature_channels
        w = glorot_uniform(rng, (n_classes, d), d, n_classes)
        self.head = Tensor(w, requires_grad=True)

    def parameters(self):
        params = dict(self.backbone.parameters())
        params["head.W"] = self.head
        return params

    def forward(self, images):
        fm = self.backbone.extract(images)
        pooled = ad.spatial_avg_pool(fm.values)
        logits = ad.linear(pooled, self.head)
        zeros = Tensor(np.zeros(fm.values.shape[:-1]))
        return ForwardResult(features=fm.values, attention_logits=logits,
                             attention_raw=zeros, attention=zeros)

    def predict(self, images, head="attention"):
        with ad.no_grad():
            fw = self.forward(images)
        return np.argmax(fw.attention_logits.data, axis=-1)


SUBSTITUTE_ARCHS = {
    # narrower but two convs per stage
    "deep": BackboneConfig(stages=((12, 2), (24, 2), (48, 2))),
    # wider single-conv stages
    "wide": BackboneConfig(stages=((24, 1), (48, 1), (96, 1))),
}


def make_substitute(arch, n_classes, input_size=64, seed=0):
    if arch not in SUBSTITUTE_ARCHS:
        raise InvalidArgumentError(
            f"substitute arch must be one of {sorted(SUBSTITUTE_ARCHS)}, "
            f"got {arch!r}")
    cfg = replace(SUBSTITUTE_ARCHS[arch], input_size=input_size)
    return GlobalPoolNet(cfg, n_classes, seed=seed)


def set_requires_grad(params, flag):
    """Toggle gradient tracking on a named parameter dict."""
    for t in params.values():
        t.requires_grad = flag
        if not flag:
            t.grad = None
