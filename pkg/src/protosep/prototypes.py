"""Prototype branch: reduction, similarity, modulation, classification.

Local features are squashed into (0,1)^D by two pointwise convolutions,
compared against a bank of class-assigned prototype vectors with the
log-ratio activation f(u) = log((u+1)/(u+gamma)), modulated by an
attention map, spatially max-pooled into per-prototype scores, and
linearly classified. Projection snaps each prototype onto its nearest
same-class training patch and records where it landed.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import InvalidArgumentError, ShapeError, Tensor
from .util import glorot_uniform

GAMMA_DEFAULT = 1e-5


@dataclass
class PrototypeBank:
    """m = K*c prototype vectors in (0,1)^D with fixed class ownership.

    provenance[l] = (image id, row, col) of the training patch prototype l
    was last projected onto, or (-1,-1,-1) before any projection.
    """
    P: Tensor                 # (m, D)
    class_of: np.ndarray      # (m,) int
    K: int
    c: int
    gamma: float = GAMMA_DEFAULT
    provenance: np.ndarray = field(default=None)

    def __post_init__(self):
        self.class_of = np.asarray(self.class_of, dtype=np.int64)
        m = self.P.shape[0]
        if m != self.K * self.c:
            raise InvalidArgumentError(
                f"bank has {m} prototypes but K*c = {self.K * self.c}")
        counts = np.bincount(self.class_of, minlength=self.K)
        if len(counts) != self.K or not np.all(counts == self.c):
            raise InvalidArgumentError(
                f"each of {self.K} classes must own exactly {self.c} prototypes")
        if not self.gamma > 0:
            raise InvalidArgumentError(f"gamma must be > 0, got {self.gamma}")
        if self.provenance is None:
            self.provenance = np.full((m, 3), -1, dtype=np.int64)

    @classmethod
    def init(cls, n_classes, per_class, dim, rng, gamma=GAMMA_DEFAULT):
        p = rng.uniform(0.0, 1.0, size=(n_classes * per_class, dim))
        class_of = np.repeat(np.arange(n_classes), per_class)
        return cls(P=Tensor(p, requires_grad=True), class_of=class_of,
                   K=n_classes, c=per_class, gamma=gamma)

    @property
    def m(self):
        return self.P.shape[0]

    @property
    def dim(self):
        return self.P.shape[1]

    def parameters(self):
        return {"prototypes.P": self.P}


@dataclass
class ReductionParams:
    """Two pointwise convolutions D' -> D_mid -> D (rectify, then squash)."""
    k1: Tensor  # (D', D_mid)
    k2: Tensor  # (D_mid, D)

    @classmethod
    def init(cls, in_channels, out_channels, rng, mid_channels=None):
        mid = out_channels if mid_channels is None else mid_channels
        k1 = glorot_uniform(rng, (in_channels, mid), in_channels, mid)
        k2 = glorot_uniform(rng, (mid, out_channels), mid, out_channels)
        return cls(Tensor(k1, requires_grad=True), Tensor(k2, requires_grad=True))

    @property
    def in_channels(self):
        return self.k1.shape[0]

    @property
    def out_channels(self):
        return self.k2.shape[1]

    def parameters(self):
        return {"reduction.k1": self.k1, "reduction.k2": self.k2}


@dataclass
class ClassifierWeights:
    """Dense head over prototype scores, W: (K, m)."""
    W: Tensor

    @classmethod
    def init(cls, class_of, n_classes):
        class_of = np.asarray(class_of)
        w = np.full((n_classes, len(class_of)), -0.5)
        w[class_of, np.arange(len(class_of))] = 1.0
        return cls(Tensor(w, requires_grad=True))

    def parameters(self):
        return {"classifier.W": self.W}


@dataclass
class SimilarityResult:
    """maps/modulated: (..., H, W, m); scores: (..., m); logits: (..., K)."""
    maps: Tensor
    modulated: Tensor
    scores: Tensor
    logits: Tensor


def reduce_features(feature_map, params):
    """Squash backbone features into Z with entries in (0,1)."""
    x = feature_map.values if hasattr(feature_map, "values") else feature_map
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.shape[-1] != params.in_channels:
        raise ShapeError("reduce_features", x.shape, params.k1.shape)
    hidden = ad.relu(ad.dense(x, params.k1))
    return ad.sigmoid(ad.dense(hidden, params.k2))


def similarity(z, bank):
    """Per-location, per-prototype log-ratio similarity maps (..., H, W, m)."""
    z = z if isinstance(z, Tensor) else Tensor(z)
    if z.shape[-1] != bank.dim:
        raise ShapeError("similarity", z.shape, bank.P.shape)
    dists = ad.sq_l2_distance_maps(z, bank.P)
    return ad.log_ratio(dists, bank.gamma)


def modulate_and_score(maps, attention):
    """Weight maps by a nonnegative attention map, then spatially max-pool."""
    maps = maps if isinstance(maps, Tensor) else Tensor(maps)
    a = attention if isinstance(attention, Tensor) else Tensor(attention)
    if np.any(a.data < 0):
        raise InvalidArgumentError("attention map must be nonnegative")
    if a.shape != maps.shape[:-1]:
        raise ShapeError("modulate_and_score", a.shape, maps.shape)
    modulated = ad.mul(ad.reshape(a, a.shape + (1,)), maps)
    scores = ad.spatial_max_pool(modulated)
    return modulated, scores


def classify(scores, weights):
    """logits = W @ scores (per sample)."""
    scores = scores if isinstance(scores, Tensor) else Tensor(scores)
    if scores.shape[-1] != weights.W.shape[1]:
        raise ShapeError("classify", scores.shape, weights.W.shape)
    return ad.linear(scores, weights.W)


def prototype_forward(z, bank, attention, weights):
    """Full branch: similarity -> modulate -> max-pool -> classify."""
    maps = similarity(z, bank)
    modulated, scores = modulate_and_score(maps, attention)
    logits = classify(scores, weights)
    return SimilarityResult(maps=maps, modulated=modulated,
                            scores=scores, logits=logits)


def project_prototypes(bank, patches, patch_classes, patch_image_ids,
                       patch_locations):
    """Snap each prototype to its nearest same-class training patch.

    patches: (N, D) float; patch_classes: (N,) int; patch_image_ids: (N,)
    int; patch_locations: (N, 2) int rows/cols. Returns a new bank whose
    prototypes sit at squared distance 0 from their chosen patches, with
    provenance recording (image id, row, col). Ties go to the lowest
    patch index.
    """
    patches = np.asarray(patches, dtype=np.float64)
    patch_classes = np.asarray(patch_classes, dtype=np.int64)
    patch_image_ids = np.asarray(patch_image_ids, dtype=np.int64)
    patch_locations = np.asarray(patch_locations, dtype=np.int64)
    if patches.ndim != 2 or patches.shape[1] != bank.dim:
        raise ShapeError("project_prototypes", patches.shape, bank.P.shape)
    if not (len(patch_classes) == len(patches) == len(patch_image_ids)
            == len(patch_locations)):
        raise InvalidArgumentError("patch arrays must have equal length")

    new_p = np.empty_like(bank.P.data)
    provenance = np.empty((bank.m, 3), dtype=np.int64)
    for k in range(bank.K):
        idx = np.flatnonzero(patch_classes == k)
        if idx.size == 0:
            raise InvalidArgumentError(
                f"class {k} has no training patches to project onto")
        class_patches = patches[idx]
        for l in np.flatnonzero(bank.class_of == k):
            d = ((class_patches - bank.P.data[l]) ** 2).sum(axis=1)
            j = idx[int(np.argmin(d))]
            new_p[l] = patches[j]
            provenance[l] = (patch_image_ids[j],
                             patch_locations[j, 0], patch_locations[j, 1])

    return PrototypeBank(P=Tensor(new_p, requires_grad=True),
                         class_of=bank.class_of.copy(), K=bank.K, c=bank.c,
                         gamma=bank.gamma, provenance=provenance)
