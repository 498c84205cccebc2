"""Attentional pooling branch.

A class-agnostic 1x1 filter and K class-specific 1x1 filters produce
per-location maps; each class map is multiplied by the agnostic one and
spatially averaged into a logit. Multiplying the two maps this way is a
rank-1 approximation of second-order pooling, which `rank1_pool_oracle`
verifies through the explicit second-moment matrix.

The fused attention map is the rectified per-location maximum over the
modulated class maps. The raw maximum can be negative, which would flip
the sign of the attention-weighted losses, so downstream consumers use
`normalize_attention` to rectify and rescale into [0, 1].
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .util import glorot_uniform


@dataclass
class AttentionParams:
    """agnostic: (D',) filter; class_filters: (D', K), column k for class k."""
    agnostic: Tensor
    class_filters: Tensor

    @classmethod
    def init(cls, feature_channels, n_classes, rng):
        a = glorot_uniform(rng, (feature_channels,), feature_channels, 1)
        b = glorot_uniform(rng, (feature_channels, n_classes),
                           feature_channels, n_classes)
        return cls(Tensor(a, requires_grad=True), Tensor(b, requires_grad=True))

    @property
    def n_classes(self):
        return self.class_filters.shape[1]

    def parameters(self):
        return {"attention.agnostic": self.agnostic,
                "attention.class_filters": self.class_filters}


@dataclass
class AttentionOutput:
    """Maps and logits for one image (H, W, ...) or a batch (B, H, W, ...).

    attention_map holds the rectified, un-normalized per-location maxima.
    """
    agnostic_map: Tensor   # (..., H, W)
    class_maps: Tensor     # (..., H, W, K), already modulated by agnostic map
    logits: Tensor         # (..., K)
    attention_map: Tensor  # (..., H, W)


def attention_forward(feature_map, params):
    """Compute agnostic map, modulated class maps, logits, and attention."""
    x = feature_map.values if hasattr(feature_map, "values") else feature_map
    x = x if isinstance(x, Tensor) else Tensor(x)
    d = params.agnostic.shape[0]
    if x.shape[-1] != d:
        raise ad.ShapeError("attention_forward", x.shape, params.agnostic.shape)
    agnostic = ad.reshape(ad.dense(x, ad.reshape(params.agnostic, (d, 1))),
                          x.shape[:-1])
    raw = ad.dense(x, params.class_filters)                   # (..., H, W, K)
    modulated = ad.mul(ad.reshape(agnostic, agnostic.shape + (1,)), raw)
    logits = ad.spatial_avg_pool(modulated)                   # (..., K)
    attention = ad.relu(ad.channel_max(modulated))            # (..., H, W)
    return AttentionOutput(agnostic_map=agnostic, class_maps=modulated,
                           logits=logits, attention_map=attention)


def normalize_attention(attention_map, eps=1e-8):
    """Rescale a rectified attention map into [0, 1] by its own maximum.

    Batched maps are normalized per sample.
    """
    a = attention_map if isinstance(attention_map, Tensor) else Tensor(attention_map)
    if a.data.ndim == 2:
        peak = ad.reduce_max(a, keepdims=True)
    else:
        peak = ad.reduce_max(a, axes=(-2, -1), keepdims=True)
    return ad.div(a, ad.add(peak, Tensor(eps)))


def rank1_pool_oracle(feature_map, agnostic, class_filter):
    """Second-order pooling reference: (1/N) a^T (sum_t x_t x_t^T) b.

    Test oracle only; computed through the explicit D'xD' second-moment
    matrix rather than the map-multiplication path.
    """
    x = feature_map.values if hasattr(feature_map, "values") else feature_map
    xd = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    h, w, d = xd.shape
    flat = xd.reshape(h * w, d)
    second_moment = flat.T @ flat
    a = np.asarray(agnostic, dtype=np.float64).reshape(d)
    b = np.asarray(class_filter, dtype=np.float64).reshape(d)
    return float(a @ second_moment @ b) / (h * w)
